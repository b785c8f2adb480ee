"""Adam training loop with plateau LR decay, early stopping and k-fold CV."""

from __future__ import annotations

import copy
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import model as M
from .lexicon import Sample
from .losses import LossWeights, MetricsReport, Targets, aggregate_reports, evaluate_predictions, total_loss
from .preprocess import AugmentConfig, augment
from .synthdata import holdout_split, split_kfold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    lr_init: float = 1e-3
    lr_floor: float = 1e-6
    plateau_patience: int = 15
    stop_patience: int = 20
    lr_factor: float = 0.1
    max_epochs: int = 60
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    improve_tol: float = 1e-8
    seed: int = 0
    augment: bool = True
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    val_frac: float = 0.15
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr_floor > self.lr_init:
            raise ValueError("lr_floor cannot exceed lr_init")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        if isinstance(d.get("augment_cfg"), dict):
            d["augment_cfg"] = AugmentConfig(**d["augment_cfg"])
        return cls(**d)


@dataclass
class TrainState:
    params: M.ModelParams
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    lr: float
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_params: Optional[M.ModelParams] = None
    best_epoch: int = -1
    plateau_counter: int = 0
    stop_counter: int = 0
    history: List[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: M.ModelParams, cfg: TrainConfig) -> "TrainState":
        return cls(
            params={k: v.copy() for k, v in params.items()},
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            lr=cfg.lr_init,
        )


def adam_step(state: TrainState, grads: Dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        state.params[name] = state.params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def schedule(state: TrainState, val_loss: float, cfg: TrainConfig) -> bool:
    """Update plateau / early-stop counters after an epoch; returns the stop flag.

    On stop the best parameters seen so far are restored into ``state.params``.
    """
    if val_loss < state.best_val - cfg.improve_tol:
        state.best_val = val_loss
        state.best_params = {k: v.copy() for k, v in state.params.items()}
        state.best_epoch = state.epoch
        state.plateau_counter = 0
        state.stop_counter = 0
    else:
        state.plateau_counter += 1
        state.stop_counter += 1
    if state.plateau_counter >= cfg.plateau_patience:
        state.lr = max(state.lr * cfg.lr_factor, cfg.lr_floor)
        state.plateau_counter = 0
    if state.stop_counter >= cfg.stop_patience:
        restore_best(state)
        return True
    return False


def restore_best(state: TrainState) -> None:
    if state.best_params is not None:
        state.params = {k: v.copy() for k, v in state.best_params.items()}


# ---------------------------------------------------------------------------


def _stack(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def batch_gradients(params: M.ModelParams, images: np.ndarray, targets: Targets, model_cfg: M.ModelConfig,
                    weights: LossWeights) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient map."""
    tensors = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = total_loss(M.forward(tensors, images, model_cfg), targets, weights)
    ag.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return loss.item(), grads


def _sub_targets(t: Targets, sl: slice) -> Targets:
    return Targets({k: v[sl] for k, v in t.descriptors.items()}, t.tumor[sl], t.mask[sl])


def parallel_batch_gradients(params, images, targets, model_cfg, weights, workers: int):
    """Split the batch across threads; chunk results merge in chunk order."""
    n = len(images)
    if workers <= 1 or n < 2:
        return batch_gradients(params, images, targets, model_cfg, weights)
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        results = list(pool.map(
            lambda sl: batch_gradients(params, images[sl], _sub_targets(targets, sl), model_cfg, weights),
            chunks,
        ))
    scale = [(sl.stop - sl.start) / n for sl in chunks]
    loss = sum(s * r[0] for s, r in zip(scale, results))
    grads = ag.merge_grads({k: s * g for k, g in r[1].items()} for s, r in zip(scale, results))
    return loss, grads


def epoch(state: TrainState, train_samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
          model_cfg: M.ModelConfig, weights: Optional[LossWeights] = None) -> float:
    """One pass over shuffled, augmented mini-batches; returns the mean batch loss."""
    if not train_samples:
        raise ValueError("empty training set")
    weights = weights or LossWeights()
    order = rng.permutation(len(train_samples))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
        if cfg.augment:
            pairs = [augment(s.image, s.mask, cfg.augment_cfg, rng) for s in batch]
            images = np.stack([p[0] for p in pairs])
            masks = np.stack([p[1] for p in pairs])
        else:
            images, masks = _stack(batch), None
        targets = Targets.from_samples(batch, masks)
        loss, grads = parallel_batch_gradients(state.params, images, targets, model_cfg, weights, cfg.workers)
        adam_step(state, grads, cfg)
        losses.append(loss)
    return float(np.mean(losses))


def evaluate_loss(params: M.ModelParams, samples: Sequence[Sample], model_cfg: M.ModelConfig,
                  weights: Optional[LossWeights] = None, batch_size: int = 32) -> float:
    """Mean multi-task loss over ``samples`` (no augmentation, no graph)."""
    weights = weights or LossWeights()
    total = 0.0
    with ag.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            pred = M.forward(params, _stack(chunk), model_cfg)
            total += total_loss(pred, Targets.from_samples(chunk), weights).item() * len(chunk)
    return total / len(samples)


def train(params: M.ModelParams, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          model_cfg: M.ModelConfig, cfg: TrainConfig, weights: Optional[LossWeights] = None,
          rng: Optional[np.random.Generator] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train until early stop or ``max_epochs``; the best-validation params are restored."""
    weights = weights or LossWeights()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = TrainState.fresh(params, cfg)
    monitor = val_samples if len(val_samples) else train_samples
    if not len(val_samples):
        log.warning("no validation samples; monitoring training loss instead")
    for ep in range(cfg.max_epochs):
        state.epoch = ep
        train_loss = epoch(state, train_samples, cfg, rng, model_cfg, weights)
        val_loss = evaluate_loss(state.params, monitor, model_cfg, weights)
        stop = schedule(state, val_loss, cfg)
        record = {
            "epoch": ep,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": state.lr,
            "plateau_counter": state.plateau_counter,
            "stop_counter": state.stop_counter,
        }
        state.history.append(record)
        log.debug("epoch %s", json.dumps(record))
        if on_epoch:
            on_epoch(record)
        if stop:
            log.info("early stop at epoch %d (best epoch %d)", ep, state.best_epoch)
            break
    restore_best(state)
    return state


# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    state: TrainState
    split: Tuple[np.ndarray, np.ndarray, np.ndarray]


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold


def evaluate(params: M.ModelParams, samples: Sequence[Sample], model_cfg: M.ModelConfig) -> MetricsReport:
    return evaluate_predictions(M.predict(params, _stack(samples), model_cfg), samples)


def run_cv(samples: Sequence[Sample], k: int, model_cfg: M.ModelConfig, cfg: TrainConfig,
           weights: Optional[LossWeights] = None,
           on_epoch: Optional[Callable[[int, dict], None]] = None) -> Tuple[List[FoldResult], dict]:
    """k-fold cross-validation (``k == 1``: one stratified 80/20 hold-out split)."""
    tumors = {s.tumor for s in samples}
    if not {0, 1} <= tumors:
        raise ValueError("cross-validation needs both tumor classes in the dataset")
    if k == 1:
        splits = [holdout_split(samples, val_frac=cfg.val_frac, seed=cfg.seed)]
    else:
        splits = split_kfold(samples, k=k, val_frac=cfg.val_frac, seed=cfg.seed)
    results = []
    for f, (tr, va, te) in enumerate(splits):
        try:
            params = M.init(model_cfg, seed=cfg.seed + 1000 * f)
            rng = np.random.default_rng([cfg.seed, f, 7])
            hook = (lambda rec, _f=f: on_epoch(_f, rec)) if on_epoch else None
            state = train(params, [samples[i] for i in tr], [samples[i] for i in va], model_cfg, cfg,
                          weights, rng, hook)
            report = evaluate(state.params, [samples[i] for i in te], model_cfg)
        except Exception as exc:
            raise FoldError(f, exc) from exc
        log.info("fold %d: %s", f, json.dumps(report.to_dict()))
        results.append(FoldResult(f, report, state, (tr, va, te)))
    return results, aggregate_reports([r.report for r in results])
