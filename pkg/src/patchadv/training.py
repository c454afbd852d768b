"""Optimization loop that trains the perturbation generator against a frozen classifier.

Each step: extract clean mid-layer features, produce the projected perturbed
batch, re-extract features and logits, evaluate the combined objective, and
apply one Adam update to the generator only. Randomness is derived per
(seed, epoch) for batch order and per (seed, epoch, step) for patch
sampling, so runs are reproducible and resumable exactly.
"""

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import encode_labels, make_batches
from .generator import PerturbationGenerator, perturb
from .losses import LossConfig, combined_objective
from .surrogate import forward_with_features, parameter_checksum


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 32
    epochs: int = 20
    mode: str = "untargeted"
    target: list = None  # class names, targeted mode only
    epsilon: float = 10.0
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    generator_width: int = 64
    residual_blocks: int = 6
    grad_clip: float = None
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"mode must be untargeted or targeted, got {self.mode!r}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


def config_hash(cfg):
    """Short stable digest of a TrainConfig, recorded in checkpoint sidecars.

    checkpoint_dir is excluded: the hash identifies the experiment, not where
    its artifacts happen to live.
    """
    payload = asdict(cfg)
    payload.pop("checkpoint_dir", None)
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:12]


def train_step(net, surrogate, batch, cfg, rng, optimizer=None, target_vector=None):
    """One optimization step of the generator; the surrogate never changes.

    Returns (net, diagnostics). A non-finite objective skips the update and
    sets diagnostics["skipped"].
    """
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    if cfg.mode == "targeted" and target_vector is None:
        raise ValueError("targeted mode needs a target label vector")
    net.train()
    images = batch.tensor()
    with torch.no_grad():
        _, clean_feats = forward_with_features(surrogate, images)
    perturbed = perturb(net, images, cfg.epsilon)
    logits_pert, pert_feats = forward_with_features(surrogate, perturbed)
    target = None
    if cfg.mode == "targeted":
        target = torch.as_tensor(target_vector, dtype=torch.float32).expand_as(logits_pert)
    loss, diagnostics = combined_objective(
        clean_feats, pert_feats, logits_pert, cfg.mode, cfg.loss, target=target, rng=rng
    )
    diagnostics["max_delta"] = float((perturbed - images).abs().max().detach())
    if not torch.isfinite(loss):
        diagnostics["skipped"] = True
        return net, diagnostics
    diagnostics["skipped"] = False
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
    optimizer.step()
    return net, diagnostics


def save_checkpoint(net, path, meta, optimizer=None):
    """Write generator weights (+ optional optimizer state) and a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"model": net.state_dict(), "epoch": meta.get("epoch", 0)}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    sidecar = {"width": net.width, "residual_blocks": net.residual_blocks}
    sidecar.update(meta)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path, expect_config=None, with_optimizer=False):
    """Rebuild a generator from a checkpoint; warn if the config hash differs."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.is_file():
        raise FileNotFoundError(f"checkpoint sidecar not found: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if expect_config is not None and meta.get("config_hash") != config_hash(expect_config):
        warnings.warn(
            f"checkpoint {path} was trained under config {meta.get('config_hash')}, "
            f"not the requested {config_hash(expect_config)}"
        )
    payload = torch.load(path, map_location="cpu", weights_only=True)
    net = PerturbationGenerator(
        width=int(meta["width"]),
        residual_blocks=int(meta["residual_blocks"]),
        mean=tuple(meta.get("mean", (0.485, 0.456, 0.406))),
        std=tuple(meta.get("std", (0.229, 0.224, 0.225))),
    )
    net.load_state_dict(payload["model"])
    net.eval()
    if with_optimizer:
        return net, meta, payload.get("optimizer")
    return net, meta


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "global", "lpcl", "total", "max_delta"])
        writer.writerows(rows)


def _read_log(path, before_epoch):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["epoch"]) < before_epoch:
                rows.append([row["step"], row["epoch"], row["global"], row["lpcl"],
                             row["total"], row["max_delta"]])
    return rows


def train_generator(manifest, surrogate, cfg, resume=None):
    """Full training run; returns the final checkpoint path.

    Writes per-epoch checkpoints plus a `generator_final.pt` alias and a CSV
    loss log (column `global` carries the non-contrastive component: feature
    MSE when untargeted, target BCE when targeted). Pass resume= an epoch
    checkpoint to continue an interrupted run; derived per-epoch seeding makes
    the result identical to an uninterrupted run.
    """
    if cfg.deterministic:
        torch.set_num_threads(1)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "training_log.csv"

    target_vector = None
    if cfg.mode == "targeted":
        if not cfg.target:
            raise ValueError("targeted mode needs train.target class names")
        target_vector = encode_labels(list(cfg.target), manifest.class_list)

    torch.manual_seed(cfg.seed)
    optimizer_state = None
    start_epoch = 0
    rows = []
    if resume is not None:
        net, meta, optimizer_state = load_checkpoint(resume, expect_config=cfg, with_optimizer=True)
        start_epoch = int(meta["epoch"])
        if log_path.is_file():
            rows = _read_log(log_path, start_epoch)
    else:
        net = PerturbationGenerator(
            width=cfg.generator_width,
            residual_blocks=cfg.residual_blocks,
            mean=surrogate.mean,
            std=surrogate.std,
        )
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    surrogate_checksum = parameter_checksum(surrogate.model)
    meta_base = {
        "config_hash": config_hash(cfg),
        "surrogate_id": surrogate.id,
        "surrogate_dataset": surrogate.dataset,
        "surrogate_task": surrogate.task,
        "epsilon": cfg.epsilon,
        "R": cfg.loss.R,
        "L": surrogate.num_layers,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "mean": list(surrogate.mean),
        "std": list(surrogate.std),
    }
    cache = {}
    final_path = ckpt_dir / "generator_final.pt"
    for epoch in range(start_epoch, cfg.epochs):
        batches = make_batches(
            manifest, cfg.batch_size, shuffle=True, seed=(cfg.seed, epoch), cache=cache
        )
        for step, batch in enumerate(batches):
            rng = np.random.default_rng((cfg.seed, epoch, step))
            net, diag = train_step(
                net, surrogate, batch, cfg, rng, optimizer=optimizer, target_vector=target_vector
            )
            non_lpcl = diag.get("global", diag.get("bce", 0.0))
            total = math.nan if diag["skipped"] else diag["objective"]
            rows.append([step, epoch, non_lpcl, diag["lpcl"], total, diag["max_delta"]])
        save_checkpoint(
            net,
            ckpt_dir / f"generator_epoch{epoch + 1:03d}.pt",
            {**meta_base, "epoch": epoch + 1},
            optimizer=optimizer,
        )
        _write_log(log_path, rows)
    if parameter_checksum(surrogate.model) != surrogate_checksum:
        raise RuntimeError("surrogate parameters changed during training; freeze contract broken")
    save_checkpoint(net, final_path, {**meta_base, "epoch": cfg.epochs}, optimizer=optimizer)
    return final_path
