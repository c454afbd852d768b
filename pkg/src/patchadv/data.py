"""Dataset manifests, multi-hot label encoding, and image preprocessing.

Images travel between modules as float arrays in [0, 1]; per-channel
normalization is a separate invertible view applied only at model input.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

TARGET_SIZE = 224

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """Missing, empty, or malformed dataset manifest."""


@dataclass(frozen=True)
class Normalization:
    """Invertible per-channel mean/std view over (..., 3, H, W) tensors."""

    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def _stats(self, t):
        mean = torch.as_tensor(self.mean, dtype=t.dtype, device=t.device).view(-1, 1, 1)
        std = torch.as_tensor(self.std, dtype=t.dtype, device=t.device).view(-1, 1, 1)
        return mean, std

    def apply(self, t):
        mean, std = self._stats(t)
        return (t - mean) / std

    def invert(self, t):
        mean, std = self._stats(t)
        return t * std + mean


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    labels: tuple


@dataclass(frozen=True)
class DatasetManifest:
    """Validated list of (image path, label set) pairs plus the class list."""

    entries: tuple
    class_list: tuple
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.entries:
            raise ManifestError("empty manifest")
        known = set(self.class_list)
        for e in self.entries:
            unknown = [l for l in e.labels if l not in known]
            if unknown:
                raise ManifestError(f"label(s) {unknown} for {e.image_path} not in class list")
        paths = [e.image_path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ManifestError(f"duplicate image paths in manifest: {dupes}")

    @property
    def num_classes(self):
        return len(self.class_list)

    def __len__(self):
        return len(self.entries)

    def resolve_path(self, entry):
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p


@dataclass(frozen=True)
class ImageBatch:
    """Immutable batch of preprocessed images with their multi-hot labels."""

    images: np.ndarray  # (B, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (B, C) float32 multi-hot
    paths: tuple

    def __len__(self):
        return self.images.shape[0]

    def tensor(self):
        """Channels-first torch view, shape (B, 3, H, W)."""
        return torch.from_numpy(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)))


def load_class_list(path):
    """Read one class name per line, blank lines skipped."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    classes = [ln for ln in lines if ln]
    if not classes:
        raise ManifestError(f"class list file {path} is empty")
    if len(set(classes)) != len(classes):
        raise ManifestError(f"class list file {path} contains duplicates")
    return tuple(classes)


def load_manifest(path, classes_path=None):
    """Parse a JSON-lines manifest ({"image": ..., "labels": [...]}) into a DatasetManifest.

    The class list is the sorted union of all label strings unless an
    explicit class list file is given. Entries with no labels are kept but
    flagged with a warning; training enforces the ground-truth invariant.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest file not found: {path}")
    entries = []
    empty_label_lines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            image, labels = obj["image"], obj["labels"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line ({err})") from err
        if not isinstance(image, str) or not isinstance(labels, list):
            raise ManifestError(f'{path}:{lineno}: "image" must be a string and "labels" a list')
        if not labels:
            empty_label_lines.append(lineno)
        entries.append(ManifestEntry(image_path=image, labels=tuple(labels)))
    if not entries:
        raise ManifestError(f"empty manifest: {path}")
    if classes_path is not None:
        class_list = load_class_list(classes_path)
    else:
        class_list = tuple(sorted({l for e in entries for l in e.labels}))
    if empty_label_lines:
        warnings.warn(
            f"{path}: {len(empty_label_lines)} entr{'y' if len(empty_label_lines) == 1 else 'ies'} "
            f"with no labels (lines {empty_label_lines}); kept but unusable as ground truth"
        )
    return DatasetManifest(entries=tuple(entries), class_list=class_list, root=path.parent)


def encode_labels(entry_labels, class_list):
    """Multi-hot encode label strings in class_list order."""
    index = {c: i for i, c in enumerate(class_list)}
    bits = np.zeros(len(class_list), dtype=np.float32)
    for label in entry_labels:
        if label not in index:
            raise ValueError(f"unknown label {label!r}; known classes: {list(class_list)}")
        bits[index[label]] = 1.0
    return bits


def decode_labels(bits, class_list):
    """Inverse of encode_labels: indices with bit 1 back to label strings."""
    return tuple(c for c, b in zip(class_list, bits) if b)


def preprocess_image(raw, size=TARGET_SIZE):
    """Resize (bilinear) to size x size RGB and scale into [0, 1].

    Accepts a PIL image or an ndarray (uint8 or float in [0, 1]); grayscale
    is replicated to 3 channels, alpha is dropped.
    """
    if isinstance(raw, np.ndarray):
        arr = raw
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
            raise ValueError(f"cannot interpret array of shape {raw.shape} as an image")
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        elif arr.shape[2] == 4:
            arr = arr[:, :, :3]
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        else:
            arr = arr.astype(np.float32)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("float image values must lie in [0, 1]")
        if arr.shape[:2] != (size, size):
            t = torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)
            t = torch.nn.functional.interpolate(
                t, size=(size, size), mode="bilinear", align_corners=False
            )
            arr = t.squeeze(0).numpy().transpose(1, 2, 0)
        return np.clip(arr, 0.0, 1.0)
    img = raw.convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), PILImage.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_image(path, size=TARGET_SIZE):
    """Decode an image file and preprocess it."""
    try:
        with PILImage.open(path) as img:
            img.load()
            return preprocess_image(img, size=size)
    except (OSError, SyntaxError) as err:
        raise ValueError(f"cannot decode image file {path}: {err}") from err


def make_batches(manifest, batch_size, shuffle=False, seed=0, cache=None, size=TARGET_SIZE):
    """Yield ImageBatch objects covering the manifest, final partial batch included.

    Order is deterministic given (shuffle, seed). `cache` may be a dict used
    to memoize decoded images across epochs.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(manifest))
    if shuffle:
        rng = np.random.default_rng(seed)
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        images, labels, paths = [], [], []
        for i in chunk:
            entry = manifest.entries[i]
            full = str(manifest.resolve_path(entry))
            if cache is not None and full in cache:
                img = cache[full]
            else:
                img = load_image(full, size=size)
                if cache is not None:
                    cache[full] = img
            images.append(img)
            labels.append(encode_labels(entry.labels, manifest.class_list))
            paths.append(full)
        yield ImageBatch(
            images=np.stack(images), labels=np.stack(labels), paths=tuple(paths)
        )
