"""Training losses: global feature distance, local patch contrast, combined objective.

The global term compares whole mid-layer feature maps between clean and
perturbed images. The local term is an InfoNCE-style (R+1)-way objective
over flattened feature locations: the query patch comes from the perturbed
features, the "negative" is the clean patch at the same location, and the R
positives are clean patches at distinct other locations. Pushing the query
toward the positives and away from its own clean counterpart corrupts the
feature map location by location.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    tau: float = 0.07
    R: int = 128
    queries_per_layer: int = 1
    seed: int = 0
    use_global: bool = True
    use_lpcl: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.R < 1:
            raise ValueError(f"R must be at least 1, got {self.R}")
        if self.queries_per_layer < 1:
            raise ValueError(f"queries_per_layer must be at least 1, got {self.queries_per_layer}")


@dataclass
class PatchTriplet:
    """One contrastive unit: a perturbed query patch against clean keys."""

    layer_index: int
    query_location: int
    query: torch.Tensor  # (c,)
    negative: torch.Tensor  # (c,) clean patch at query_location
    positives: torch.Tensor  # (R, c) clean patches at distinct other locations


def similarity(a, b, tau):
    """Scaled dot product a.b / tau (no normalization of the inputs)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a * b).sum() / tau


def sample_locations(v_k, q, R, rng):
    """R distinct locations drawn uniformly from {0..v_k-1} minus the query."""
    if not 0 <= q < v_k:
        raise ValueError(f"query location {q} out of range [0, {v_k})")
    if R > v_k - 1:
        raise ValueError(
            f"cannot draw R={R} distinct non-query locations from a map with v_k={v_k} locations"
        )
    pool = np.delete(np.arange(v_k), q)
    return rng.choice(pool, size=R, replace=False)


def build_patch_triplets(clean, pert, cfg, rng=None):
    """Draw the per-layer patch triplets for one training step.

    Queries come from the perturbed features; the negative and positives come
    from the clean features. Query locations are distinct within a layer for
    each image.
    """
    if clean.num_layers != pert.num_layers:
        raise ValueError(
            f"layer count mismatch: clean has {clean.num_layers}, perturbed has {pert.num_layers}"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    triplets = []
    for k, (clean_flat, pert_flat) in enumerate(zip(clean.flat, pert.flat)):
        if clean_flat.shape != pert_flat.shape:
            raise ValueError(
                f"layer {k} shape mismatch: {tuple(clean_flat.shape)} vs {tuple(pert_flat.shape)}"
            )
        batch, v_k, _ = clean_flat.shape
        if cfg.queries_per_layer > v_k:
            raise ValueError(
                f"layer {k} has only {v_k} locations for {cfg.queries_per_layer} queries"
            )
        for b in range(batch):
            queries = rng.choice(v_k, size=cfg.queries_per_layer, replace=False)
            for q in queries:
                q = int(q)
                locs = sample_locations(v_k, q, cfg.R, rng)
                triplets.append(
                    PatchTriplet(
                        layer_index=k,
                        query_location=q,
                        query=pert_flat[b, q],
                        negative=clean_flat[b, q],
                        positives=clean_flat[b, locs],
                    )
                )
    return triplets


def lpcl_loss(triplets, cfg):
    """Local patch-contrasting loss over a triplet collection.

    Per triplet: -log softmax over the (R+1) similarities with the clean
    same-location patch in slot 0, computed via log-sum-exp. Terms are
    averaged within each layer, then across layers. Internally float64.
    """
    if not triplets:
        raise ValueError("lpcl_loss needs at least one triplet")
    rs = {t.positives.shape[0] for t in triplets}
    if len(rs) != 1:
        raise ValueError(f"triplets disagree on R: {sorted(rs)}")
    per_layer = {}
    for t in triplets:
        keys = torch.cat([t.negative.unsqueeze(0), t.positives]).to(torch.float64)
        logits = keys @ t.query.to(torch.float64) / cfg.tau
        term = torch.logsumexp(logits, dim=0) - logits[0]
        per_layer.setdefault(t.layer_index, []).append(term)
    layer_means = [torch.stack(terms).mean() for terms in per_layer.values()]
    return torch.stack(layer_means).mean()


def global_loss(clean, pert):
    """Mean squared feature distance, averaged over layers."""
    if clean.num_layers != pert.num_layers:
        raise ValueError(
            f"layer count mismatch: clean has {clean.num_layers}, perturbed has {pert.num_layers}"
        )
    per_layer = []
    for k, (c, p) in enumerate(zip(clean.maps, pert.maps)):
        if c.shape != p.shape:
            raise ValueError(f"layer {k} shape mismatch: {tuple(c.shape)} vs {tuple(p.shape)}")
        per_layer.append(((c - p) ** 2).mean())
    return torch.stack(per_layer).mean()


def combined_objective(clean_feats, pert_feats, logits_pert, mode, cfg, target=None, rng=None):
    """The scalar the trainer minimizes, plus per-component diagnostics.

    Untargeted attacks maximize feature damage, so the returned value is
    -(global + lpcl). Targeted attacks minimize multi-label BCE toward the
    target vector plus the lpcl term.
    """
    if mode not in ("untargeted", "targeted"):
        raise ValueError(f"mode must be untargeted or targeted, got {mode!r}")
    zero = torch.zeros((), dtype=torch.float64)
    lpcl = zero
    if cfg.use_lpcl:
        triplets = build_patch_triplets(clean_feats, pert_feats, cfg, rng=rng)
        lpcl = lpcl_loss(triplets, cfg)
    diagnostics = {"lpcl": float(lpcl.detach())}
    if mode == "untargeted":
        g = global_loss(clean_feats, pert_feats).to(torch.float64) if cfg.use_global else zero
        diagnostics["global"] = float(g.detach())
        loss = -(g + lpcl)
    else:
        if target is None:
            raise ValueError("targeted mode needs a target label vector")
        target = target.to(logits_pert.dtype)
        bce = F.binary_cross_entropy_with_logits(logits_pert, target).to(torch.float64)
        diagnostics["bce"] = float(bce.detach())
        loss = bce + lpcl
    diagnostics["objective"] = float(loss.detach())
    return loss, diagnostics
