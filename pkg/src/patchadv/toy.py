"""Synthetic multi-object shapes dataset and a small trainable classifier.

Images contain 1-3 shape regions (circle / square / triangle) on a random
background; the label set is the set of shape kinds present. Each region is
filled with the *background* color plus a class-specific stripe pattern, so
the only class evidence is local oriented texture. That keeps the task easy
for a small CNN while making its decision depend on exactly the kind of
mid-layer feature structure a feature-space attack perturbs: flat color
masses survive global average pooling almost untouched at small pixel
budgets, oriented textures do not.
"""

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import DatasetManifest, ManifestEntry, load_manifest, make_batches
from .surrogate import ClassifierHandle, SmallCNN, save_classifier

TOY_CLASSES = ("circle", "square", "triangle")

# Stripe texture rendered inside every shape: each class pairs a distinct
# geometry with a distinct stripe orientation.
_STRIPE_PERIOD = 8
_STRIPE_AMP = 10.0
_STRIPE_AXES = {"circle": "rows", "square": "cols", "triangle": "diag"}


def _draw_shape(draw, kind, center, radius, color):
    cx, cy = center
    if kind == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=color)
    elif kind == "square":
        draw.rectangle([cx - radius, cy - radius, cx + radius, cy + radius], fill=color)
    elif kind == "triangle":
        points = [(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)]
        draw.polygon(points, fill=color)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")


def _shape_mask(size, kind, center, radius):
    mask = Image.new("L", (size, size), 0)
    _draw_shape(ImageDraw.Draw(mask), kind, center, radius, 255)
    return np.asarray(mask, dtype=bool)


def _stripe_pattern(size, kind, phase):
    """Square-wave stripes oriented by class: +1/-1 per pixel."""
    yy, xx = np.mgrid[0:size, 0:size]
    axis = _STRIPE_AXES[kind]
    coord = yy if axis == "rows" else xx if axis == "cols" else xx + yy
    return np.where(((coord + phase) % _STRIPE_PERIOD) < _STRIPE_PERIOD // 2, 1.0, -1.0)


def _random_color(rng, lo=0, hi=256):
    return tuple(int(v) for v in rng.integers(lo, hi, size=3))


def make_toy_dataset(root, n_train=256, n_test=64, size=224, seed=0):
    """Write train/test image trees plus JSONL manifests; returns the two manifests."""
    root = Path(root)
    manifests = {}
    for split, count in (("train", n_train), ("test", n_test)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        half = size // 2
        cells = [(0, 0), (half, 0), (0, half), (half, half)]
        for i in range(count):
            rng = np.random.default_rng((seed, 0 if split == "train" else 1, i))
            background = np.asarray(_random_color(rng, 60, 110), dtype=np.float64)
            arr = np.full((size, size, 3), background, dtype=np.float64)
            labels = set()
            n_shapes = int(rng.integers(1, 4))
            # one shape per quadrant so nothing is ever occluded
            cell_picks = rng.choice(len(cells), size=n_shapes, replace=False)
            for cell in cell_picks:
                kind = TOY_CLASSES[int(rng.integers(0, len(TOY_CLASSES)))]
                radius = int(rng.integers(size // 6, half // 2 - 4))
                x0, y0 = cells[cell]
                cx = x0 + int(rng.integers(radius, half - radius))
                cy = y0 + int(rng.integers(radius, half - radius))
                mask = _shape_mask(size, kind, (cx, cy), radius)
                pattern = _stripe_pattern(size, kind, int(rng.integers(0, _STRIPE_PERIOD)))
                # fill with the background colour itself so the stripes are
                # the only evidence of the region and its class
                arr[mask] = background[None, :] + _STRIPE_AMP * pattern[mask][:, None]
                labels.add(kind)
            name = f"{split}_{i:04d}.png"
            img = Image.fromarray(np.clip(np.round(arr), 0, 255).astype(np.uint8))
            img.save(split_dir / name)
            entries.append({"image": f"{split}/{name}", "labels": sorted(labels)})
        manifest_path = root / f"{split}.jsonl"
        with open(manifest_path, "w") as fh:
            for entry in entries:
                fh.write(json.dumps(entry) + "\n")
        manifests[split] = load_manifest(manifest_path)
    (root / "classes.txt").write_text("\n".join(TOY_CLASSES) + "\n")
    return manifests["train"], manifests["test"]


def train_toy_surrogate(manifest, epochs=40, batch_size=16, lr=1e-3, seed=0,
                        widths=(16, 32, 64, 128), label_smoothing=0.1, cache=None,
                        classifier_id="toy-smallcnn"):
    """Fit a SmallCNN multi-label classifier on a toy manifest; returns a frozen handle.

    Label smoothing keeps the fitted logits at realistic magnitudes
    (ln(0.9/0.1) ~ 2.2 at the default) instead of the unbounded margins a
    fully separable toy task would otherwise produce.
    """
    torch.manual_seed(seed)
    model = SmallCNN(manifest.num_classes, widths=widths)
    # Tap the mid-level stages, leaving out the final stage next to the
    # pooled head: its features sit at a scale where the dot-product patch
    # similarities saturate the contrastive softmax.
    mid_stages = max(1, model.num_stages - 1)
    handle = ClassifierHandle(
        id=classifier_id,
        task="multi-label",
        num_classes=manifest.num_classes,
        tap_points=[f"stage{i}" for i in range(1, mid_stages + 1)],
        model=model,
        dataset="toy-shapes",
        classes=tuple(manifest.class_list),
        cam_layer=f"stage{model.num_stages}",
    )
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=epochs, eta_min=lr * 0.05)
    criterion = torch.nn.BCEWithLogitsLoss()
    normalization = handle.normalization
    cache = {} if cache is None else cache
    for epoch in range(epochs):
        for batch in make_batches(manifest, batch_size, shuffle=True, seed=(seed, epoch),
                                  cache=cache):
            optimizer.zero_grad()
            logits = model(normalization.apply(batch.tensor()))
            targets = torch.from_numpy(batch.labels)
            targets = targets * (1 - 2 * label_smoothing) + label_smoothing
            loss = criterion(logits, targets)
            loss.backward()
            optimizer.step()
        scheduler.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return handle


def save_toy_surrogate(handle, path):
    """Persist a toy classifier so the CLI can load it like any other."""
    return save_classifier(
        handle.model, path, arch="smallcnn", classes=list(handle.classes),
        task=handle.task, input_size=handle.input_size,
        mean=handle.mean, std=handle.std,
        options={"widths": [m.out_channels for m in handle.model.modules()
                            if isinstance(m, torch.nn.Conv2d)]},
        dataset=handle.dataset, classifier_id=handle.id,
        taps=handle.tap_points, cam_layer=handle.cam_layer,
    )


def single_label_view(manifest):
    """Keep only single-shape images; for fitting single-label toy victims."""
    entries = [e for e in manifest.entries if len(e.labels) == 1]
    if not entries:
        raise ValueError("manifest has no single-label entries")
    return DatasetManifest(
        entries=[ManifestEntry(e.image_path, list(e.labels)) for e in entries],
        class_list=list(manifest.class_list),
        root=manifest.root,
    )
