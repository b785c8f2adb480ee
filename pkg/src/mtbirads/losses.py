"""Weighted multi-task loss and the evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lexicon import DESCRIPTORS, LOSS_TASKS, MALIGNANT, Sample

DICE_EPS = 1.0
PROB_FLOOR = 1e-12

# JSON key for each headline descriptor
REPORT_KEYS = {
    "orientation": "orientation",
    "shape": "shape",
    "margin": "margin",
    "echo": "echo_pattern",
    "posterior": "posterior_features",
}


@dataclass(frozen=True)
class LossWeights:
    """Per-task weights, in LOSS_TASKS order."""

    orientation: float = 0.2
    shape: float = 0.2
    margin: float = 0.2
    echo: float = 0.2
    posterior: float = 0.2
    indistinct: float = 0.1
    angular: float = 0.1
    spiculated: float = 0.1
    microlobulated: float = 0.1
    tumor: float = 0.5
    segmentation: float = 0.6

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, t) for t in LOSS_TASKS)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "LossWeights":
        if len(values) != len(LOSS_TASKS):
            raise ValueError(f"expected {len(LOSS_TASKS)} weights, got {len(values)}")
        return cls(**dict(zip(LOSS_TASKS, map(float, values))))

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights.from_sequence([c * v for v in self.as_tuple()])


@dataclass
class Targets:
    """Batched supervision; ``-1`` marks an unlabeled task for that sample."""

    descriptors: Dict[str, np.ndarray]
    tumor: np.ndarray
    mask: np.ndarray  # [B, S, S]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], masks: Optional[np.ndarray] = None) -> "Targets":
        desc = {name: np.full(len(samples), -1, dtype=int) for name in DESCRIPTORS}
        for b, s in enumerate(samples):
            for name, idx in s.labels.indices().items():
                desc[name][b] = idx
        tumor = np.array([-1 if s.tumor is None else s.tumor for s in samples], dtype=int)
        if masks is None:
            masks = np.stack([s.mask for s in samples])
        return cls(desc, tumor, np.asarray(masks, dtype=np.float64))


def cross_entropy(probs, target: int) -> Tensor:
    """``-log(max(p[target], 1e-12))`` for one probability vector."""
    probs = ag.as_tensor(probs)
    if not 0 <= target < probs.shape[-1]:
        raise IndexError(f"target {target} out of range for {probs.shape[-1]} classes")
    return ag.neg(ag.log(ag.clamp_min(probs[target], PROB_FLOOR)))


def batch_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row CE ``[B]``; rows with target -1 give 0."""
    labeled = targets >= 0
    picked = probs[np.arange(len(targets)), np.where(labeled, targets, 0)]
    ce = ag.neg(ag.log(ag.clamp_min(picked, PROB_FLOOR)))
    return ce * labeled.astype(np.float64)


def dice_loss(pred_probs, mask, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(pg) + eps) / (sum p + sum g + eps)`` over one map."""
    p = ag.as_tensor(pred_probs)
    g = np.asarray(mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} differ")
    return 1.0 - (2.0 * ag.tsum(p * g) + eps) / (ag.tsum(p) + g.sum() + eps)


def batch_dice_loss(pred_probs: Tensor, masks: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """:func:`dice_loss` per map of a ``[B, S, S]`` batch -> ``[B]``."""
    g = np.asarray(masks, dtype=np.float64)
    axes = (-2, -1)
    inter = ag.tsum(pred_probs * g, axes)
    total = ag.tsum(pred_probs, axes) + g.sum(axis=axes)
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def per_sample_loss(pred, targets: Targets, w: LossWeights) -> Tensor:
    """Weighted 11-task loss for each sample of a batch -> ``[B]``."""
    loss = None
    for task in DESCRIPTORS:
        lam = getattr(w, task)
        if lam == 0:
            continue
        term = batch_cross_entropy(pred.descriptor_probs[task], targets.descriptors[task]) * lam
        loss = term if loss is None else loss + term
    if w.tumor:
        term = batch_cross_entropy(pred.tumor_probs, targets.tumor) * w.tumor
        loss = term if loss is None else loss + term
    if w.segmentation:
        seg = pred.seg_probs
        seg = ag.reshape(seg, (seg.shape[0],) + seg.shape[-2:])
        term = batch_dice_loss(seg, targets.mask) * w.segmentation
        loss = term if loss is None else loss + term
    return loss


def total_loss(pred, targets: Targets, w: Optional[LossWeights] = None) -> Tensor:
    """Mean over the batch of the per-sample weighted loss."""
    w = w or LossWeights()
    return ag.tmean(per_sample_loss(pred, targets, w))


def single_sample_targets(sample: Sample) -> Targets:
    return Targets.from_samples([sample])


# ---------------------------------------------------------------------------
# metrics


def classification_metrics(preds: Sequence[int], targets: Sequence[int], positive_class: int = MALIGNANT
                           ) -> Tuple[float, Optional[float], Optional[float]]:
    """(accuracy, sensitivity, specificity); undefined ratios come back as ``None``."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("no predictions")
    pos = targets == positive_class
    hit = preds == targets
    tp = int(np.sum(hit & pos))
    tn = int(np.sum((preds != positive_class) & ~pos))
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    accuracy = (tp + tn) / targets.size
    sensitivity = tp / n_pos if n_pos else None
    specificity = tn / n_neg if n_neg else None
    return accuracy, sensitivity, specificity


def accuracy(preds: Sequence[int], targets: Sequence[int]) -> float:
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {targets.shape}")
    return float(np.mean(preds == targets))


def dice_score(pred_mask, true_mask, threshold: float = 0.5) -> float:
    """Hard Dice ``2|P&G| / (|P|+|G|)``; two empty masks score 1."""
    p = np.asarray(pred_mask) > threshold
    g = np.asarray(true_mask) > 0.5
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.sum(p & g) / denom)


@dataclass
class MetricsReport:
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    descriptor_accuracy: Dict[str, Optional[float]]
    dice_score: Optional[float]
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self, include_counts: bool = False) -> dict:
        """Metric values keyed by column name; every value is None or lies in [0, 1]."""
        out = {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }
        for task, key in REPORT_KEYS.items():
            out[key] = self.descriptor_accuracy.get(task)
        out["dice_score"] = self.dice_score
        out["margin_subtypes"] = {
            t: self.descriptor_accuracy.get(t) for t in DESCRIPTORS if t not in REPORT_KEYS
        }
        if include_counts:
            out["counts"] = dict(self.counts)
        return out

    def to_json(self, include_counts: bool = False) -> str:
        return json.dumps(self.to_dict(include_counts), indent=2)


def evaluate_predictions(outputs: Mapping[str, np.ndarray], samples: Sequence[Sample]) -> MetricsReport:
    """Build a report from :func:`model.predict` outputs for ``samples``."""
    from .lexicon import head_slices

    targets = Targets.from_samples(samples)
    slices = head_slices()
    desc_acc: Dict[str, Optional[float]] = {}
    counts: Dict[str, int] = {}
    for task in DESCRIPTORS:
        t = targets.descriptors[task]
        lab = t >= 0
        counts[task] = int(lab.sum())
        if lab.any():
            pred = outputs["features"][:, slices[task]].argmax(axis=1)
            desc_acc[task] = accuracy(pred[lab], t[lab])
        else:
            desc_acc[task] = None
    lab = targets.tumor >= 0
    counts["tumor"] = int(lab.sum())
    if lab.any():
        acc, sens, spec = classification_metrics(outputs["tumor"].argmax(axis=1)[lab], targets.tumor[lab])
    else:
        acc = sens = spec = None
    dices = [dice_score(p, m) for p, m in zip(outputs["seg"], targets.mask)]
    counts["segmentation"] = len(dices)
    return MetricsReport(acc, sens, spec, desc_acc, float(np.mean(dices)) if dices else None, counts)


def aggregate_reports(reports: Sequence[MetricsReport]) -> dict:
    """Per-metric mean and (population) standard deviation across folds."""
    flat: Dict[str, List[float]] = {}
    for r in reports:
        d = r.to_dict()
        for k, v in d.items():
            if k == "margin_subtypes":
                continue
            if v is not None:
                flat.setdefault(k, []).append(v)
        for k, v in d["margin_subtypes"].items():
            if v is not None:
                flat.setdefault(k, []).append(v)
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in flat.items()}
