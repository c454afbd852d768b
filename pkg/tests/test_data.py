import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from patchadv.data import (
    ImageBatch,
    ManifestError,
    Normalization,
    decode_labels,
    encode_labels,
    load_class_list,
    load_image,
    load_manifest,
    make_batches,
    preprocess_image,
)


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
    return path


def write_png(path, size=8, value=128):
    Image.fromarray(np.full((size, size, 3), value, np.uint8)).save(path)
    return path


@pytest.fixture()
def small_tree(tmp_path):
    for i in range(4):
        write_png(tmp_path / f"img{i}.png", value=40 * (i + 1))
    manifest = write_manifest(tmp_path / "train.jsonl", [
        {"image": "img0.png", "labels": ["cat"]},
        {"image": "img1.png", "labels": ["dog", "cat"]},
        {"image": "img2.png", "labels": ["dog"]},
        {"image": "img3.png", "labels": ["bird"]},
    ])
    return manifest


class TestLoadClassList:
    def test_reads_one_class_per_line(self, tmp_path):
        path = tmp_path / "classes.txt"
        path.write_text("cat\ndog\nbird\n")
        assert list(load_class_list(path)) == ["cat", "dog", "bird"]

    def test_rejects_duplicates(self, tmp_path):
        path = tmp_path / "classes.txt"
        path.write_text("cat\ncat\n")
        with pytest.raises(ValueError):
            load_class_list(path)

    def test_rejects_empty_file(self, tmp_path):
        path = tmp_path / "classes.txt"
        path.write_text("\n")
        with pytest.raises(ValueError):
            load_class_list(path)


class TestLoadManifest:
    def test_loads_entries_and_sorted_class_union(self, small_tree):
        manifest = load_manifest(small_tree)
        assert len(manifest.entries) == 4
        assert list(manifest.class_list) == ["bird", "cat", "dog"]
        assert manifest.num_classes == 3

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image": "a.png", "labels": ["x"]}\nnot json at all\n')
        with pytest.raises(ManifestError, match=r"bad\.jsonl:2"):
            load_manifest(path)

    def test_missing_keys_rejected(self, tmp_path):
        path = write_manifest(tmp_path / "m.jsonl", [{"image": "a.png"}])
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        with pytest.raises(ManifestError, match="empty"):
            load_manifest(path)

    def test_unknown_label_against_explicit_classes(self, tmp_path, small_tree):
        classes = tmp_path / "classes.txt"
        classes.write_text("cat\ndog\n")
        with pytest.raises(ValueError, match="bird"):
            load_manifest(small_tree, classes)

    def test_zero_label_entry_warns_but_kept(self, tmp_path):
        write_png(tmp_path / "a.png")
        path = write_manifest(tmp_path / "m.jsonl", [
            {"image": "a.png", "labels": ["cat"]},
            {"image": "a2.png", "labels": []},
        ])
        write_png(tmp_path / "a2.png")
        with pytest.warns(UserWarning, match="no labels"):
            manifest = load_manifest(path)
        assert len(manifest.entries) == 2

    def test_duplicate_paths_rejected(self, tmp_path):
        path = write_manifest(tmp_path / "m.jsonl", [
            {"image": "a.png", "labels": ["cat"]},
            {"image": "a.png", "labels": ["dog"]},
        ])
        with pytest.raises(ManifestError):
            load_manifest(path)


class TestLabelCodec:
    def test_round_trip(self):
        classes = ["bird", "cat", "dog"]
        bits = encode_labels(["dog", "bird"], classes)
        assert bits.dtype == np.float32
        assert bits.tolist() == [1.0, 0.0, 1.0]
        assert list(decode_labels(bits, classes)) == ["bird", "dog"]

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError, match="fish"):
            encode_labels(["fish"], ["cat"])


class TestPreprocessImage:
    def test_uint8_array_scaled_and_resized(self):
        raw = np.full((50, 60, 3), 255, np.uint8)
        out = preprocess_image(raw)
        assert out.shape == (224, 224, 3)
        assert out.dtype == np.float32
        assert np.allclose(out, 1.0)

    def test_identity_at_target_size(self):
        raw = (np.arange(224 * 224 * 3) % 256).reshape(224, 224, 3).astype(np.uint8)
        out = preprocess_image(raw)
        assert np.allclose(out, raw.astype(np.float32) / 255.0)

    def test_grayscale_replicated(self):
        img = Image.fromarray(np.full((30, 30), 7, np.uint8), mode="L")
        out = preprocess_image(img)
        assert out.shape == (224, 224, 3)
        assert np.allclose(out[..., 0], out[..., 1])

    def test_alpha_dropped(self):
        img = Image.fromarray(np.full((30, 30, 4), 200, np.uint8), mode="RGBA")
        assert preprocess_image(img).shape == (224, 224, 3)

    def test_float_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            preprocess_image(np.full((10, 10, 3), 2.0, np.float32))

    def test_custom_size(self):
        out = preprocess_image(np.zeros((10, 10, 3), np.uint8), size=32)
        assert out.shape == (32, 32, 3)


class TestLoadImage:
    def test_decode_failure_names_file(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"this is not an image")
        with pytest.raises(ValueError, match="broken.png"):
            load_image(bad)


class TestMakeBatches:
    def test_partial_final_batch(self, small_tree):
        manifest = load_manifest(small_tree)
        batches = list(make_batches(manifest, 3, size=16))
        assert [len(b.paths) for b in batches] == [3, 1]
        assert batches[0].images.shape == (3, 16, 16, 3)
        assert batches[0].labels.shape == (3, 3)

    def test_no_shuffle_preserves_manifest_order(self, small_tree):
        manifest = load_manifest(small_tree)
        batch = next(make_batches(manifest, 4, size=16))
        names = [Path(p).name for p in batch.paths]
        assert names == [e.image_path for e in manifest.entries]

    def test_shuffle_deterministic_per_seed(self, small_tree):
        manifest = load_manifest(small_tree)
        order = lambda seed: [
            p for b in make_batches(manifest, 2, shuffle=True, seed=seed, size=16)
            for p in b.paths
        ]
        assert order(5) == order(5)
        assert order((1, 2)) == order((1, 2))
        seen = {tuple(order(s)) for s in range(8)}
        assert len(seen) > 1

    def test_cache_is_populated_and_reused(self, small_tree):
        manifest = load_manifest(small_tree)
        cache = {}
        list(make_batches(manifest, 2, cache=cache, size=16))
        assert len(cache) == 4
        first = next(iter(cache.values()))
        list(make_batches(manifest, 2, cache=cache, size=16))
        assert next(iter(cache.values())) is first

    def test_tensor_layout(self, small_tree):
        manifest = load_manifest(small_tree)
        batch = next(make_batches(manifest, 2, size=16))
        t = batch.tensor()
        assert isinstance(t, torch.Tensor)
        assert t.shape == (2, 3, 16, 16)
        assert t.dtype == torch.float32
        assert np.allclose(t.permute(0, 2, 3, 1).numpy(), batch.images)


class TestNormalization:
    def test_apply_invert_round_trip(self):
        norm = Normalization((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
        x = torch.rand(2, 3, 8, 8)
        assert torch.allclose(norm.invert(norm.apply(x)), x, atol=1e-6)

    def test_apply_matches_manual(self):
        norm = Normalization((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
        x = torch.full((1, 3, 2, 2), 0.75)
        assert torch.allclose(norm.apply(x), torch.full((1, 3, 2, 2), 1.0))


class TestImageBatch:
    def test_len_is_batch_dimension(self):
        batch = ImageBatch(images=np.zeros((2, 8, 8, 3), np.float32),
                           labels=np.zeros((2, 3), np.float32), paths=("a", "b"))
        assert len(batch) == 2
