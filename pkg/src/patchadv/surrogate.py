"""Frozen classifier wrappers: raw logits, mid-layer feature taps, and CAM.

Surrogate and victim classifiers share one interface. All parameters are
frozen; gradients flow through the network into the input image but never
into the weights. Inputs are [0, 1] pixel tensors at the handle's native
resolution; each handle applies its own normalization internally.
"""

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IMAGENET_MEAN, IMAGENET_STD, ImageBatch, Normalization


class SmallCNN(nn.Module):
    """Stacked stride-2 conv stages with a global-average-pool linear head.

    Stage outputs (post-ReLU) are the natural tap points, named stage1..N.
    """

    def __init__(self, num_classes, widths=(16, 32, 64, 128), kernel_size=5):
        super().__init__()
        in_ch = 3
        for i, w in enumerate(widths, start=1):
            block = nn.Sequential(
                nn.Conv2d(in_ch, w, kernel_size=kernel_size, stride=2,
                          padding=kernel_size // 2),
                nn.ReLU(inplace=True),
            )
            setattr(self, f"stage{i}", block)
            in_ch = w
        self.num_stages = len(widths)
        self.head = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        for i in range(1, self.num_stages + 1):
            x = getattr(self, f"stage{i}")(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


class LinearClassifier(nn.Module):
    """Flatten + single linear layer; analytic fixture for tests."""

    def __init__(self, num_classes, input_size=224):
        super().__init__()
        self.input_size = input_size
        self.head = nn.Linear(3 * input_size * input_size, num_classes)

    def forward(self, x):
        return self.head(x.flatten(1))


def build_architecture(arch, num_classes, options=None):
    """Construct a classifier module from an architecture id.

    Known ids: "smallcnn" (options: widths), "linear" (options: input_size),
    and "torchvision:<name>" for any torchvision.models constructor.
    """
    options = options or {}
    if arch == "smallcnn":
        return SmallCNN(num_classes, widths=tuple(options.get("widths", (16, 32, 64, 128))))
    if arch == "linear":
        return LinearClassifier(num_classes, input_size=int(options.get("input_size", 224)))
    if arch.startswith("torchvision:"):
        import torchvision.models as tvm

        name = arch.split(":", 1)[1]
        ctor = getattr(tvm, name, None)
        if ctor is None:
            raise ValueError(f"unknown torchvision model {name!r}")
        return ctor(num_classes=num_classes)
    raise ValueError(f"unknown architecture id {arch!r}")


def default_tap_points(arch, model):
    """Default mid-layer taps: the four stage outputs for staged nets.

    Residual/dense architectures tap their four stage blocks; VGG-style nets
    tap the last four of the five pool outputs.
    """
    if arch == "smallcnn":
        n = model.num_stages
        stages = [f"stage{i}" for i in range(1, n + 1)]
        return stages[-4:] if n > 4 else stages
    name = arch.split(":", 1)[1] if arch.startswith("torchvision:") else arch
    if name.startswith("resnet") or name.startswith("resnext") or name.startswith("wide_resnet"):
        return ["layer1", "layer2", "layer3", "layer4"]
    if name.startswith("densenet"):
        return [f"features.denseblock{i}" for i in range(1, 5)]
    if name.startswith("vgg"):
        pools = [
            f"features.{i}"
            for i, m in enumerate(model.features)
            if isinstance(m, nn.MaxPool2d)
        ]
        return pools[-4:]
    raise ValueError(f"no default tap points for architecture {arch!r}; list them explicitly")


@dataclass
class ClassifierHandle:
    """A frozen classifier plus the metadata the attack pipeline needs."""

    id: str
    task: str  # "multi-label" or "single-label"
    num_classes: int
    tap_points: list
    model: nn.Module
    input_size: int = 224
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    dataset: str = ""
    classes: tuple = None
    cam_layer: str = None
    frozen: bool = True
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.task not in ("multi-label", "single-label"):
            raise ValueError(f"task must be multi-label or single-label, got {self.task!r}")
        if not self.tap_points:
            raise ValueError("tap_points must be non-empty")
        known = dict(self.model.named_modules())
        for tap in list(self.tap_points) + ([self.cam_layer] if self.cam_layer else []):
            if tap not in known:
                raise ValueError(f"unknown tap point {tap!r} for classifier {self.id!r}")
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self):
        return len(self.tap_points)

    @property
    def normalization(self):
        return Normalization(self.mean, self.std)


@dataclass
class FeatureMapSet:
    """Mid-layer feature maps in channels-last layout, one tensor per tap.

    maps[k] has shape (B, h_k, w_k, c_k); the flat views reshape row-major to
    (B, v_k, c_k) with v_k = h_k * w_k, so flat[k][:, i * w_k + j] is
    maps[k][:, i, j].
    """

    maps: list

    def __post_init__(self):
        for m in self.maps:
            if m.ndim != 4:
                raise ValueError(f"feature maps must be (B, h, w, c), got shape {tuple(m.shape)}")

    @property
    def flat(self):
        return [m.reshape(m.shape[0], -1, m.shape[-1]) for m in self.maps]

    @property
    def num_layers(self):
        return len(self.maps)

    def __len__(self):
        return len(self.maps)


def _as_input_tensor(handle, batch):
    """Coerce an ImageBatch / ndarray / tensor into a normalized (B,3,H,W) tensor."""
    if isinstance(batch, ImageBatch):
        t = batch.tensor()
    elif isinstance(batch, np.ndarray):
        arr = batch if batch.ndim == 4 else batch[None]
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2).astype(np.float32)))
    elif isinstance(batch, torch.Tensor):
        t = batch if batch.ndim == 4 else batch.unsqueeze(0)
    else:
        raise TypeError(f"cannot interpret {type(batch).__name__} as an image batch")
    if t.shape[1] != 3:
        raise ValueError(f"expected 3-channel input, got shape {tuple(t.shape)}")
    if t.shape[2] != handle.input_size or t.shape[3] != handle.input_size:
        raise ValueError(
            f"classifier {handle.id!r} expects {handle.input_size}x{handle.input_size} input, "
            f"got {t.shape[2]}x{t.shape[3]}"
        )
    return handle.normalization.apply(t)


def _forward_capturing(handle, x, layers):
    """Run the frozen model capturing the named module outputs (grads intact)."""
    captured = {}

    def make_hook(name):
        def hook(module, inputs, output):
            captured[name] = output

        return hook

    with handle._lock:
        handles = [
            dict(handle.model.named_modules())[name].register_forward_hook(make_hook(name))
            for name in layers
        ]
        try:
            logits = handle.model(x)
        finally:
            for h in handles:
                h.remove()
    missing = [n for n in layers if n not in captured]
    if missing:
        raise ValueError(f"tap point(s) {missing} produced no output during forward")
    return logits, captured


def forward_with_features(handle, batch):
    """One forward pass returning (logits, FeatureMapSet) at the handle's taps."""
    x = _as_input_tensor(handle, batch)
    logits, captured = _forward_capturing(handle, x, handle.tap_points)
    maps = [captured[name].permute(0, 2, 3, 1) for name in handle.tap_points]
    return logits, FeatureMapSet(maps=maps)


def forward_logits(handle, batch):
    """Raw pre-activation class scores, shape (B, C)."""
    x = _as_input_tensor(handle, batch)
    with handle._lock:
        return handle.model(x)


def extract_features(handle, batch):
    """Mid-layer feature maps at the handle's taps, differentiable w.r.t. input."""
    _, feats = forward_with_features(handle, batch)
    return feats


def _cam_head(handle):
    linears = [m for m in handle.model.modules() if isinstance(m, nn.Linear)]
    if len(linears) != 1:
        raise ValueError(
            f"classifier {handle.id!r} has no single global-pool + linear head; CAM unsupported"
        )
    return linears[0]


def compute_cam(handle, image, class_index):
    """Class activation map in [0, 1] at the input's spatial resolution.

    Weighted sum of the final conv feature map's channels by the head row for
    class_index, bilinearly upsampled, then min-max normalized. A constant
    pre-normalization map yields all zeros.
    """
    if not 0 <= class_index < handle.num_classes:
        raise ValueError(f"class index {class_index} out of range [0, {handle.num_classes})")
    head = _cam_head(handle)
    layer = handle.cam_layer or handle.tap_points[-1]
    x = _as_input_tensor(handle, image)
    if x.shape[0] != 1:
        raise ValueError("compute_cam expects a single image")
    with torch.no_grad():
        _, captured = _forward_capturing(handle, x, [layer])
        fmap = captured[layer]  # (1, c, h, w)
        if fmap.shape[1] != head.in_features:
            raise ValueError(
                f"final conv map has {fmap.shape[1]} channels but the head expects "
                f"{head.in_features}; CAM unsupported for this architecture"
            )
        weights = head.weight[class_index].view(1, -1, 1, 1)
        cam = (weights * fmap).sum(dim=1, keepdim=True)
        cam = F.interpolate(
            cam, size=(x.shape[2], x.shape[3]), mode="bilinear", align_corners=False
        )[0, 0]
        lo, hi = cam.min(), cam.max()
        if hi - lo <= 0:
            return np.zeros(cam.shape, dtype=np.float32)
        return ((cam - lo) / (hi - lo)).numpy().astype(np.float32)


def parameter_checksum(model):
    """SHA-256 over all parameter and buffer bytes; detects any weight drift."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_classifier(model, path, arch, classes=None, task="multi-label", num_classes=None,
                    input_size=224, mean=IMAGENET_MEAN, std=IMAGENET_STD, options=None,
                    dataset="", classifier_id=None, taps=None, cam_layer=None):
    """Write a weights checkpoint plus the JSON sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    if num_classes is None:
        if classes is None:
            raise ValueError("save_classifier needs classes or num_classes")
        num_classes = len(classes)
    sidecar = {
        "id": classifier_id or arch,
        "arch": arch,
        "num_classes": num_classes,
        "classes": list(classes) if classes is not None else None,
        "task": task,
        "input_size": input_size,
        "mean": list(mean),
        "std": list(std),
        "options": options or {},
        "dataset": dataset,
        "taps": list(taps) if taps else None,
        "cam_layer": cam_layer,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_classifier(spec):
    """Build a frozen ClassifierHandle from a model spec dict.

    Required keys: "id" and "weights". The weights file's JSON sidecar fills
    in arch/classes/task defaults; explicit spec keys win. Raises on a
    weight/architecture mismatch or an unknown tap point.
    """
    spec = dict(spec)
    weights = spec.get("weights")
    if not weights:
        raise ValueError("model spec is missing the weights path (key: weights)")
    weights = Path(weights)
    if not weights.is_file():
        raise FileNotFoundError(f"weights file not found: {weights}")
    sidecar_path = weights.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.is_file() else {}

    def pick(key, default=None):
        return spec[key] if key in spec and spec[key] is not None else sidecar.get(key, default)

    arch = pick("arch")
    if arch is None:
        raise ValueError(f"model spec for {spec.get('id')!r} does not name an architecture")
    if "arch" in sidecar and spec.get("arch") not in (None, sidecar["arch"]):
        raise ValueError(
            f"architecture mismatch: spec says {spec['arch']!r}, sidecar says {sidecar['arch']!r}"
        )
    classes = pick("classes")
    num_classes = pick("num_classes") or (len(classes) if classes else None)
    if num_classes is None:
        raise ValueError(f"model spec for {spec.get('id')!r} needs classes or num_classes")
    model = build_architecture(arch, num_classes, options=pick("options", {}))
    state = torch.load(weights, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as err:
        raise ValueError(f"weights at {weights} do not match architecture {arch!r}: {err}") from err
    taps = pick("taps") or default_tap_points(arch, model)
    return ClassifierHandle(
        id=pick("id", arch),
        task=pick("task", "multi-label"),
        num_classes=num_classes,
        tap_points=list(taps),
        model=model,
        input_size=int(pick("input_size", 224)),
        mean=tuple(pick("mean", IMAGENET_MEAN)),
        std=tuple(pick("std", IMAGENET_STD)),
        dataset=pick("dataset", ""),
        classes=tuple(classes) if classes else None,
        cam_layer=pick("cam_layer"),
    )
