"""Shapley attributions of the merged descriptor vector to the malignant probability.

Players are either the 25 descriptor-class probabilities or the nine
descriptor heads (groups).  A coalition keeps the instance's value for
present players and substitutes the baseline for absent ones.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import model as M
from .lexicon import DESCRIPTORS, FEATURE_DIM, MALIGNANT, feature_names, head_slices

MAX_EXACT_PLAYERS = 20


class TooManyPlayers(ValueError):
    """Exact enumeration requested for more players than allowed."""


class ValueFunction:
    """Mean-imputation game ``v(S) = f(z_S)``, ``z_i = x_i if i in S else b_i``.

    ``model_fn`` maps a batch of full feature vectors ``[n, d]`` to scalars ``[n]``.
    """

    def __init__(self, model_fn: Callable[[np.ndarray], np.ndarray], x, baseline, target: int = MALIGNANT,
                 names: Optional[Sequence[str]] = None):
        self.model_fn = model_fn
        self.x = np.asarray(x, dtype=np.float64)
        self.baseline = np.asarray(baseline, dtype=np.float64)
        if self.x.shape != self.baseline.shape or self.x.ndim != 1:
            raise ValueError(f"instance {self.x.shape} and baseline {self.baseline.shape} must be equal 1-d shapes")
        self.target = target
        self.names = list(names) if names is not None else [f"x{i}" for i in range(self.d)]

    @property
    def d(self) -> int:
        return self.x.size

    def __call__(self, coalitions: np.ndarray) -> np.ndarray:
        """Values for a boolean ``[n, d]`` array of coalitions."""
        c = np.asarray(coalitions, dtype=bool)
        z = np.where(c, self.x, self.baseline)
        return np.asarray(self.model_fn(z), dtype=np.float64).reshape(len(c))

    def value(self, members) -> float:
        """v(S) for an iterable of present player indices."""
        c = np.zeros((1, self.d), dtype=bool)
        c[0, list(members)] = True
        return float(self(c)[0])


class GroupedGame:
    """Players are disjoint groups of the underlying features."""

    def __init__(self, v: ValueFunction, groups: Sequence[Sequence[int]], names: Optional[Sequence[str]] = None):
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(v.d)):
            raise ValueError("groups must partition the feature indices")
        if any(len(g) == 0 for g in groups):
            raise ValueError("groups must be non-empty")
        self.base = v
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.names = list(names) if names is not None else [f"g{i}" for i in range(len(groups))]
        self._expand = np.zeros((len(groups), v.d), dtype=bool)
        for j, g in enumerate(self.groups):
            self._expand[j, g] = True

    @property
    def d(self) -> int:
        return len(self.groups)

    def __call__(self, coalitions: np.ndarray) -> np.ndarray:
        c = np.asarray(coalitions, dtype=bool)
        return self.base(c.astype(np.int64) @ self._expand > 0)

    def value(self, members) -> float:
        c = np.zeros((1, self.d), dtype=bool)
        c[0, list(members)] = True
        return float(self(c)[0])


class SetGame:
    """Arbitrary cooperative game from ``fn(bool_coalition_row) -> float``."""

    def __init__(self, fn: Callable[[np.ndarray], float], d: int, names: Optional[Sequence[str]] = None):
        self.fn = fn
        self._d = d
        self.names = list(names) if names is not None else [f"p{i}" for i in range(d)]

    @property
    def d(self) -> int:
        return self._d

    def __call__(self, coalitions: np.ndarray) -> np.ndarray:
        return np.array([self.fn(np.asarray(row, dtype=bool)) for row in np.atleast_2d(coalitions)], dtype=np.float64)

    def value(self, members) -> float:
        c = np.zeros(self.d, dtype=bool)
        c[list(members)] = True
        return float(self.fn(c))


@dataclass
class AttributionReport:
    feature_names: List[str]
    phi: np.ndarray
    v_full: float
    v_empty: float
    mode: str
    n_permutations: Optional[int] = None
    sample_id: Optional[str] = None
    baseline: Optional[np.ndarray] = None
    instance: Optional[np.ndarray] = None
    output: str = "malignant_probability"
    extra: Dict[str, object] = field(default_factory=dict)

    def efficiency_gap(self) -> float:
        return abs(float(np.sum(self.phi)) - (self.v_full - self.v_empty))

    def ranked(self) -> List[tuple]:
        """(name, phi) sorted by descending |phi|, ties kept in player order."""
        order = sorted(range(len(self.phi)), key=lambda i: -abs(self.phi[i]))
        return [(self.feature_names[i], float(self.phi[i])) for i in order]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "mode": self.mode,
            "output": self.output,
            "feature_names": list(self.feature_names),
            "phi": [float(p) for p in self.phi],
            "v_full": self.v_full,
            "v_empty": self.v_empty,
            "efficiency_gap": self.efficiency_gap(),
            "n_permutations": self.n_permutations,
            "baseline": None if self.baseline is None else [float(b) for b in self.baseline],
            "instance": None if self.instance is None else [float(b) for b in self.instance],
            "ranked": [{"name": n, "phi": p} for n, p in self.ranked()],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _all_coalitions(d: int) -> np.ndarray:
    masks = np.arange(2 ** d, dtype=np.int64)
    return ((masks[:, None] >> np.arange(d)) & 1).astype(bool)


def shapley_weights(d: int) -> np.ndarray:
    """``|S|! (d-|S|-1)! / d!`` for |S| = 0..d-1, via log-gamma."""
    s = np.arange(d)
    logw = np.array([math.lgamma(k + 1) + math.lgamma(d - k) - math.lgamma(d + 1) for k in s])
    return np.exp(logw)


def _exact_phi(game, d: int) -> tuple:
    coalitions = _all_coalitions(d)
    values = game(coalitions)  # one evaluation per coalition, shared by every player
    sizes = coalitions.sum(axis=1)
    w = shapley_weights(d)
    masks = np.arange(2 ** d, dtype=np.int64)
    phi = np.empty(d)
    for i in range(d):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.sum(w[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi, float(values[-1]), float(values[0])


def shapley_exact(game, max_players: int = MAX_EXACT_PLAYERS, sample_id: Optional[str] = None) -> AttributionReport:
    """Exact Shapley values by enumerating all 2^d coalitions once."""
    d = game.d
    if d > max_players:
        raise TooManyPlayers(
            f"exact mode over {d} players needs 2^{d} evaluations; use grouped or sampled mode"
        )
    phi, v_full, v_empty = _exact_phi(game, d)
    mode = "exact-group" if isinstance(game, GroupedGame) else "exact-class"
    return _report(game, phi, v_full, v_empty, mode, sample_id=sample_id)


def shapley_grouped(v: ValueFunction, groups: Optional[Sequence[Sequence[int]]] = None,
                    names: Optional[Sequence[str]] = None, sample_id: Optional[str] = None) -> AttributionReport:
    """Exact Shapley values over descriptor groups (default: the nine heads)."""
    if groups is None:
        sl = head_slices()
        groups = [list(range(sl[n].start, sl[n].stop)) for n in DESCRIPTORS]
        names = list(DESCRIPTORS)
    game = GroupedGame(v, groups, names)
    return shapley_exact(game, sample_id=sample_id)


def shapley_sampled(game, n_perms: int, seed: int = 0, permutations: Optional[Sequence[Sequence[int]]] = None,
                    sample_id: Optional[str] = None) -> AttributionReport:
    """Permutation-sampling estimate: mean marginal contribution along random orderings.

    Passing ``permutations`` evaluates exactly those orderings instead.
    """
    d = game.d
    if permutations is None:
        if n_perms < 1:
            raise ValueError("n_perms must be at least 1")
        rng = np.random.default_rng(seed)
        perms = np.array([rng.permutation(d) for _ in range(n_perms)], dtype=int).reshape(n_perms, d)
    else:
        perms = np.asarray(permutations, dtype=int).reshape(-1, d)
        n_perms = len(perms)
    # chain[p, k] = coalition holding the first k players of permutation p
    chain = np.zeros((n_perms, d + 1, d), dtype=bool)
    for k in range(1, d + 1):
        chain[:, k] = chain[:, k - 1]
        chain[np.arange(n_perms), k, perms[:, k - 1]] = True
    values = game(chain.reshape(-1, d)).reshape(n_perms, d + 1)
    contrib = np.diff(values, axis=1)
    phi = np.zeros(d)
    for p in range(n_perms):
        phi[perms[p]] += contrib[p]
    phi /= n_perms
    v_full, v_empty = float(values[0, -1]), float(values[0, 0])
    rep = _report(game, phi, v_full, v_empty, "sampled-class", sample_id=sample_id)
    rep.n_permutations = n_perms
    return rep


def brute_force_permutations(game) -> np.ndarray:
    """Shapley values as the average marginal contribution over all d! orderings (oracle)."""
    d = game.d
    phi = np.zeros(d)
    count = 0
    for perm in itertools.permutations(range(d)):
        present: List[int] = []
        prev = game.value(present)
        for i in perm:
            present.append(i)
            cur = game.value(present)
            phi[i] += cur - prev
            prev = cur
        count += 1
    return phi / count


def _report(game, phi, v_full, v_empty, mode, sample_id=None) -> AttributionReport:
    base = game.base if isinstance(game, GroupedGame) else game
    return AttributionReport(
        feature_names=list(game.names),
        phi=phi,
        v_full=v_full,
        v_empty=v_empty,
        mode=mode,
        sample_id=sample_id,
        baseline=getattr(base, "baseline", None),
        instance=getattr(base, "x", None),
    )


def baseline_from_reference(features) -> np.ndarray:
    """Coordinate-wise mean of reference descriptor vectors."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.size == 0 or len(arr) == 0:
        raise ValueError("need at least one reference vector")
    return np.atleast_2d(arr).mean(axis=0)


def model_value_function(params: M.ModelParams, cfg: M.ModelConfig, x_features, baseline,
                         pooled=None) -> ValueFunction:
    """Value function on the trained tumor head's malignant probability."""
    pooled = None if pooled is None or not cfg.tumor_uses_pooled_features else np.asarray(pooled)

    def fn(z: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            extra = None if pooled is None else np.broadcast_to(pooled, (len(z), pooled.size))
            return M.tumor_head(params, z, extra).data[:, MALIGNANT]

    if np.asarray(x_features).size != FEATURE_DIM:
        raise ValueError(f"expected a {FEATURE_DIM}-long descriptor vector")
    return ValueFunction(fn, x_features, baseline, MALIGNANT, names=feature_names())


def explain(params: M.ModelParams, cfg: M.ModelConfig, image: np.ndarray, baseline: np.ndarray,
            mode: str = "group", n_perms: int = 2000, seed: int = 0,
            sample_id: Optional[str] = None) -> AttributionReport:
    """Attribute one image's malignant probability to its descriptor predictions."""
    with ag.no_grad():
        pred = M.forward(params, image, cfg)
    x = M.descriptor_feature_vector(pred)
    v = model_value_function(params, cfg, x, baseline, pred.pooled.data)
    if mode == "group":
        rep = shapley_grouped(v, sample_id=sample_id)
    elif mode == "class":
        rep = shapley_exact(v, sample_id=sample_id)
    elif mode == "sampled":
        rep = shapley_sampled(v, n_perms, seed, sample_id=sample_id)
    else:
        raise ValueError(f"unknown explanation mode {mode!r}")
    rep.extra["descriptor_probs"] = {n: [float(p) for p in pred.descriptor_probs[n].data] for n in DESCRIPTORS}
    rep.extra["tumor_probs"] = [float(p) for p in pred.tumor_probs.data]
    return rep


# ---------------------------------------------------------------------------
# rendering


def render_text_bars(report: AttributionReport, width: int = 30) -> str:
    """Signed horizontal bars: left = toward benign, right = toward malignant."""
    rows = report.ranked()
    scale = max((abs(p) for _, p in rows), default=0.0) or 1.0
    label_w = max((len(n) for n, _ in rows), default=4)
    lines = [f"{'':{label_w}}  {'<- benign':>{width}}|{'malignant ->':<{width}}"]
    for name, p in rows:
        n = int(round(abs(p) / scale * width))
        left = ("#" * n).rjust(width) if p < 0 else " " * width
        right = ("#" * n).ljust(width) if p > 0 else " " * width
        lines.append(f"{name:>{label_w}}  {left}|{right} {p:+.4f}")
    lines.append(f"f(x) = {report.v_full:.4f}   f(baseline) = {report.v_empty:.4f}   sum(phi) = {sum(report.phi):.4f}")
    return "\n".join(lines)


def render_svg(report: AttributionReport, bar_h: int = 18, width: int = 520) -> str:
    rows = report.ranked()
    scale = max((abs(p) for _, p in rows), default=0.0) or 1.0
    label_w, half = 150, (width - 150 - 70) / 2
    mid = label_w + half
    height = bar_h * len(rows) + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<line x1="{mid:.1f}" y1="10" x2="{mid:.1f}" y2="{height - 20}" stroke="#333"/>',
        f'<text x="{mid - 5:.1f}" y="{height - 5}" text-anchor="end">benign</text>',
        f'<text x="{mid + 5:.1f}" y="{height - 5}">malignant</text>',
    ]
    for r, (name, p) in enumerate(rows):
        y = 12 + r * bar_h
        w = abs(p) / scale * half
        x = mid if p >= 0 else mid - w
        color = "#d62728" if p > 0 else "#1f77b4"
        parts.append(f'<text x="{label_w - 6}" y="{y + bar_h * 0.7:.1f}" text-anchor="end">{name}</text>')
        parts.append(f'<rect x="{x:.1f}" y="{y}" width="{w:.1f}" height="{bar_h - 4}" fill="{color}"/>')
        tx = mid + w + 4 if p >= 0 else mid - w - 4
        anchor = "start" if p >= 0 else "end"
        parts.append(f'<text x="{tx:.1f}" y="{y + bar_h * 0.7:.1f}" text-anchor="{anchor}">{p:+.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
