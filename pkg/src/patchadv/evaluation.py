"""Attack evaluation: prediction rules, accuracy metrics, and the victim sweep.

Victims are grouped into four transfer settings by what the attacker saw at
training time: 1 = victim model seen, 2 = model unseen, 3 = dataset also
unseen, 4 = task also unseen. The sweep evaluates one trained generator
checkpoint against every victim and reports clean vs perturbed accuracy.
"""

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import make_batches
from .generator import perturb
from .surrogate import forward_logits
from .training import load_checkpoint


def predict_labels(logits, task):
    """Prediction rule: multi-label thresholds sigmoid at 0.5 (inclusive, i.e.
    logit >= 0); single-label takes the argmax with lowest index winning ties."""
    row = np.asarray(torch.as_tensor(logits).detach().numpy(), dtype=np.float64)
    if task == "multi-label":
        return (row >= 0.0).astype(np.int64)
    if task == "single-label":
        return int(np.argmax(row))
    raise ValueError(f"unknown task {task!r}")


def multilabel_accuracy(truths, preds):
    """Mean Jaccard overlap |Y ∩ Y_hat| / |Y ∪ Y_hat| over samples."""
    if len(truths) != len(preds):
        raise ValueError(f"length mismatch: {len(truths)} truths vs {len(preds)} predictions")
    scores = []
    for truth, pred in zip(truths, preds):
        truth = np.asarray(truth, dtype=bool)
        pred = np.asarray(pred, dtype=bool)
        if not truth.any():
            raise ValueError("multilabel_accuracy needs at least one positive per truth")
        union = (truth | pred).sum()
        scores.append((truth & pred).sum() / union)
    return float(np.mean(scores))


def top1_accuracy(truths, preds):
    """Fraction of samples whose predicted class index matches the truth."""
    if len(truths) != len(preds):
        raise ValueError(f"length mismatch: {len(truths)} truths vs {len(preds)} predictions")
    truths = np.asarray(truths)
    preds = np.asarray(preds)
    return float((truths == preds).mean())


def classify_setting(surrogate_id, surrogate_dataset, victim_id, victim_dataset, victim_task,
                     surrogate_task="multi-label"):
    """Transfer-setting number for one victim, by escalating unseen-ness."""
    if victim_task != surrogate_task:
        return 4
    if victim_dataset != surrogate_dataset:
        return 3
    if victim_id != surrogate_id:
        return 2
    return 1


def _resample(images, size):
    if images.shape[2] == size and images.shape[3] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


def _score_batches(victim, truths, preds):
    if victim.task == "multi-label":
        return multilabel_accuracy(truths, preds)
    return top1_accuracy(truths, preds)


def evaluate_attack(checkpoint, victim, manifest, epsilon, batch_size=16, cache=None):
    """Clean vs perturbed accuracy of one victim under one generator checkpoint.

    Perturbations are generated at the manifest's resolution in [0, 1] and
    bilinearly resampled (after projection) when the victim expects a
    different input size.
    """
    if victim.classes is not None and tuple(victim.classes) != tuple(manifest.class_list):
        raise ValueError(
            f"victim {victim.id!r} classes do not match the manifest class list"
        )
    net, _ = load_checkpoint(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    net.eval()
    clean_truths, clean_preds, pert_preds = [], [], []
    with torch.no_grad():
        for batch in make_batches(manifest, batch_size, shuffle=False, cache=cache):
            images = batch.tensor()
            perturbed = perturb(net, images, epsilon)
            clean_logits = forward_logits(victim, _resample(images, victim.input_size))
            pert_logits = forward_logits(victim, _resample(perturbed, victim.input_size))
            for row_truth, row_clean, row_pert in zip(batch.labels, clean_logits, pert_logits):
                if victim.task == "multi-label":
                    clean_truths.append(row_truth.astype(bool))
                else:
                    clean_truths.append(int(np.argmax(row_truth)))
                clean_preds.append(predict_labels(row_clean, victim.task))
                pert_preds.append(predict_labels(row_pert, victim.task))
    clean = _score_batches(victim, clean_truths, clean_preds)
    perturbed = _score_batches(victim, clean_truths, pert_preds)
    return clean, perturbed


@dataclass
class EvalRow:
    victim: str
    dataset: str
    task: str
    setting: int
    clean: float
    perturbed: float
    metric: str
    epsilon: float
    n: int
    checkpoint: str

    @property
    def drop(self):
        return self.clean - self.perturbed


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def summary(self):
        """Per-setting means of clean / perturbed accuracy and drop."""
        out = {}
        for setting in sorted({r.setting for r in self.rows}):
            rows = [r for r in self.rows if r.setting == setting]
            out[setting] = {
                "clean": float(np.mean([r.clean for r in rows])),
                "perturbed": float(np.mean([r.perturbed for r in rows])),
                "drop": float(np.mean([r.drop for r in rows])),
                "n_victims": len(rows),
            }
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["victim", "dataset", "task", "setting", "clean", "perturbed",
                             "metric", "epsilon", "n", "checkpoint"])
            for r in self.rows:
                writer.writerow([r.victim, r.dataset, r.task, r.setting, repr(r.clean),
                                 repr(r.perturbed), r.metric, repr(r.epsilon), r.n, r.checkpoint])
        return path

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                report.rows.append(EvalRow(
                    victim=row["victim"], dataset=row["dataset"], task=row["task"],
                    setting=int(row["setting"]), clean=float(row["clean"]),
                    perturbed=float(row["perturbed"]), metric=row["metric"],
                    epsilon=float(row["epsilon"]), n=int(row["n"]),
                    checkpoint=row["checkpoint"],
                ))
        return report

    def format_table(self):
        header = f"{'victim':<18} {'dataset':<12} {'task':<12} {'set':>3} " \
                 f"{'clean':>7} {'pert':>7} {'drop':>7}"
        lines = [header, "-" * len(header)]
        for r in sorted(self.rows, key=lambda r: (r.setting, r.victim)):
            lines.append(
                f"{r.victim:<18} {r.dataset:<12} {r.task:<12} {r.setting:>3} "
                f"{r.clean:>7.4f} {r.perturbed:>7.4f} {r.drop:>7.4f}"
            )
        for setting, stats in self.summary().items():
            lines.append(
                f"mean setting {setting}: clean {stats['clean']:.4f} "
                f"perturbed {stats['perturbed']:.4f} drop {stats['drop']:.4f}"
            )
        if self.errors:
            lines.append("failed rows:")
            lines.extend(f"  {victim}: {message}" for victim, message in self.errors)
        return "\n".join(lines)


def checkpoint_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def run_setting_suite(checkpoint, victims, manifests, epsilon, batch_size=16):
    """Evaluate one checkpoint against many victims; failures don't stop the sweep.

    manifests maps dataset name -> DatasetManifest; each victim is evaluated
    on its own dataset's manifest. The transfer setting comes from the
    checkpoint sidecar's record of the surrogate id / dataset / task.
    """
    if not victims:
        raise ValueError("run_setting_suite needs at least one victim")
    net, meta = load_checkpoint(checkpoint)
    digest = checkpoint_digest(checkpoint)
    report = EvalReport()
    caches = {name: {} for name in manifests}
    for victim in victims:
        try:
            manifest = manifests.get(victim.dataset)
            if manifest is None:
                raise KeyError(f"no manifest for dataset {victim.dataset!r}")
            clean, perturbed = evaluate_attack(
                (net, meta), victim, manifest, epsilon,
                batch_size=batch_size, cache=caches[victim.dataset],
            )
            report.rows.append(EvalRow(
                victim=victim.id,
                dataset=victim.dataset,
                task=victim.task,
                setting=classify_setting(
                    meta.get("surrogate_id", ""), meta.get("surrogate_dataset", ""),
                    victim.id, victim.dataset, victim.task,
                    surrogate_task=meta.get("surrogate_task", "multi-label"),
                ),
                clean=clean,
                perturbed=perturbed,
                metric="jaccard" if victim.task == "multi-label" else "top1",
                epsilon=float(epsilon),
                n=len(manifest.entries),
                checkpoint=digest,
            ))
        except Exception as err:  # noqa: BLE001 - per-row faults must not kill the sweep
            report.errors.append((victim.id, str(err)))
    return report
