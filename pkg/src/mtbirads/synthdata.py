"""Procedural BUS-like images with exact masks and descriptor labels.

Benign masses are smooth, wide ellipses; malignant ones are radially
perturbed blobs whose perturbation profile determines the margin
sub-descriptors.  All labels are read off the generation parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .lexicon import MALIGNANT, DescriptorLabels, Sample
from .preprocess import mask_bbox, stack_channels


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    n_samples: int = 200
    malignant_frac: float = 0.5
    speckle_sigma: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if not 0.0 <= self.malignant_frac <= 1.0:
            raise ValueError("malignant_frac must lie in [0, 1]")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")


@dataclass
class SynthCase:
    """Raw generated image before channel stacking."""

    gray: np.ndarray  # uint8 [S, S]
    mask: np.ndarray  # uint8 [S, S], 0/1
    labels: DescriptorLabels
    tumor: int
    name: str
    # geometry kept for diagnostics / tests
    center: Tuple[float, float]
    background_level: float


def class_assignment(spec: SynthSpec) -> np.ndarray:
    n_mal = int(round(spec.n_samples * spec.malignant_frac))
    classes = np.array([MALIGNANT] * n_mal + [0] * (spec.n_samples - n_mal), dtype=int)
    return np.random.default_rng([spec.rng_seed, 0x5EED]).permutation(classes)


def generate_raw(spec: SynthSpec) -> List[SynthCase]:
    classes = class_assignment(spec)
    return [
        _make_case(spec, i, int(c), np.random.default_rng([spec.rng_seed, i]))
        for i, c in enumerate(classes)
    ]


def generate(spec: SynthSpec) -> List[Sample]:
    """Generate ``spec.n_samples`` samples with 3-channel images in [0, 1]."""
    return [to_sample(case) for case in generate_raw(spec)]


def to_sample(case: SynthCase, single_channel: bool = False) -> Sample:
    return Sample(
        image=stack_channels(case.gray.astype(np.float64), single_channel),
        mask=case.mask.copy(),
        labels=case.labels,
        tumor=case.tumor,
        name=case.name,
    )


# ---------------------------------------------------------------------------


def _background(size: int, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    level = rng.uniform(115.0, 145.0)
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 10.0, mode="wrap")
    field /= field.std() + 1e-12
    bg = level + 8.0 * field
    skin = int(round(0.07 * size))
    bg[:skin] += 45.0
    return bg, level


def _ellipse_radius(theta: np.ndarray) -> np.ndarray:
    return np.ones_like(theta)


def _polygon_radius(theta: np.ndarray, sides: int, phase: float) -> np.ndarray:
    seg = 2 * math.pi / sides
    t = np.mod(theta + phase, seg) - seg / 2
    return math.cos(seg / 2) / np.cos(t)


def _spikes(theta: np.ndarray, angles: np.ndarray, amp: float, width: float) -> np.ndarray:
    d = np.angle(np.exp(1j * (theta[..., None] - angles)))
    return amp * np.exp(-((d / width) ** 2)).sum(axis=-1)


def _lobes(theta: np.ndarray, rng: np.random.Generator, amp: float) -> np.ndarray:
    out = np.zeros_like(theta)
    for k in (5, 6, 7):
        out += rng.uniform(0.5, 1.0) * np.cos(k * theta + rng.uniform(0, 2 * math.pi))
    return amp * out / 3.0


def _tumor_mask(size: int, cx: float, cy: float, rx: float, ry: float, tilt: float,
                radius_fn) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(tilt), math.sin(tilt)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    return (rho <= radius_fn(theta)).astype(np.uint8)


def _draw_geometry(size: int, malignant: bool, rng: np.random.Generator):
    cx = rng.uniform(0.35, 0.65) * size
    cy = rng.uniform(0.30, 0.45) * size
    r0 = rng.uniform(0.11, 0.17) * size
    params = {}
    if not malignant:
        shape = "Oval" if rng.random() < 0.6 else "Round"
        aspect = rng.uniform(1.6, 2.1) if shape == "Oval" else rng.uniform(1.12, 1.2)
        rx, ry = r0 * math.sqrt(aspect), r0 / math.sqrt(aspect)
        tilt = math.radians(rng.uniform(-6, 6))
        radius_fn = _ellipse_radius
        params.update(shape=shape, intended_parallel=True)
    else:
        upright = rng.random() < 0.8
        aspect = rng.uniform(1.25, 1.6)
        if upright:
            rx, ry = r0 / math.sqrt(aspect), r0 * math.sqrt(aspect)
        else:
            rx, ry = r0 * math.sqrt(aspect), r0 / math.sqrt(aspect)
        tilt = math.radians(rng.uniform(-8, 8))
        # spiculation is drawn conditional on orientation so that spiculated
        # masses are predominantly taller-than-wide
        spiculated = rng.random() < (0.6 if upright else 0.15)
        angular = rng.random() < 0.45
        microlobulated = rng.random() < 0.4
        indistinct = rng.random() < 0.4
        if not (spiculated or angular or microlobulated or indistinct):
            indistinct = True
        sides = int(rng.integers(4, 7))
        phase = rng.uniform(0, 2 * math.pi)
        spike_angles = rng.uniform(0, 2 * math.pi, size=int(rng.integers(6, 10)))
        spike_amp = rng.uniform(0.45, 0.65)
        lobe_amp = rng.uniform(0.18, 0.25)
        lobe_seed = int(rng.integers(1 << 32))

        def radius_fn(theta, _sp=spiculated, _an=angular, _ml=microlobulated):
            r = _polygon_radius(theta, sides, phase) if _an else np.ones_like(theta)
            pert = np.zeros_like(theta)
            if _sp:
                pert += _spikes(theta, spike_angles, spike_amp, 0.09)
            if _ml:
                pert += _lobes(theta, np.random.default_rng(lobe_seed), lobe_amp)
            return r * (1.0 + pert)

        params.update(shape="Irregular", intended_parallel=not upright, spiculated=spiculated,
                      angular=angular, microlobulated=microlobulated, indistinct=indistinct)
    return cx, cy, rx, ry, tilt, radius_fn, params


def _make_case(spec: SynthSpec, index: int, tumor: int, rng: np.random.Generator) -> SynthCase:
    size = spec.image_size
    malignant = tumor == MALIGNANT
    bg, level = _background(size, rng)

    # redraw until the mask sits inside the image and its bbox agrees with
    # the intended orientation
    for _ in range(100):
        cx, cy, rx, ry, tilt, radius_fn, g = _draw_geometry(size, malignant, rng)
        mask = _tumor_mask(size, cx, cy, rx, ry, tilt, radius_fn)
        if mask.sum() < 12:
            continue
        r0, r1, c0, c1 = mask_bbox(mask)
        if r0 == 0 or c0 == 0 or r1 == size - 1 or c1 == size - 1:
            continue
        parallel = (c1 - c0) > (r1 - r0)
        if parallel == g["intended_parallel"]:
            break
    else:  # pragma: no cover - geometry ranges make this unreachable in practice
        raise RuntimeError(f"could not place tumor for sample {index}")

    # echo pattern
    if malignant:
        echo = rng.choice(["Hypoechoic", "Isoechoic", "Heterogeneous"], p=[0.5, 0.2, 0.3])
        posterior = "Shadowing"
    else:
        echo = "Anechoic" if rng.random() < 0.3 else "Hypoechoic"
        posterior = "Enhancement" if rng.random() < 0.5 else "None"

    if echo == "Anechoic":
        interior = np.full((size, size), 0.08 * level)
    elif echo == "Hypoechoic":
        interior = np.full((size, size), rng.uniform(0.35, 0.5) * level)
    elif echo == "Isoechoic":
        interior = np.full((size, size), rng.uniform(0.78, 0.86) * level)
    else:
        blob = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.5)
        blob /= blob.std() + 1e-12
        interior = level * (0.6 + 0.3 * np.clip(blob, -1.5, 1.5))

    # posterior acoustic band under the mass
    img = bg.copy()
    if posterior in ("Enhancement", "Shadowing"):
        factor = 1.4 if posterior == "Enhancement" else 0.6
        r0, r1, c0, c1 = mask_bbox(mask)
        cols = np.arange(size)
        half = (c1 - c0) / 2.0
        mid = (c0 + c1) / 2.0
        col_w = np.clip(1.0 - np.maximum(np.abs(cols - mid) - half * 0.8, 0) / 2.0, 0, 1)
        rows = np.arange(size)[:, None]
        row_w = np.clip((rows - r1 + 1) / 4.0, 0, 1)
        img *= 1.0 + (factor - 1.0) * row_w * col_w[None, :]

    alpha = mask.astype(np.float64)
    if malignant and g["indistinct"]:
        alpha = np.clip(ndimage.gaussian_filter(alpha, sigma=1.6) * 1.15, 0, 1)
    img = (1 - alpha) * img + alpha * interior

    if spec.speckle_sigma > 0:
        img = img * (1.0 + rng.normal(0.0, spec.speckle_sigma, size=img.shape))
    gray = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    r0, r1, c0, c1 = mask_bbox(mask)
    parallel = (c1 - c0) > (r1 - r0)
    if malignant:
        labels = DescriptorLabels(
            orientation="Parallel" if parallel else "NotParallel",
            shape="Irregular",
            margin="NotCircumscribed",
            echo=echo,
            posterior=posterior,
            indistinct="Present" if g["indistinct"] else "Absent",
            angular="Present" if g["angular"] else "Absent",
            microlobulated="Present" if g["microlobulated"] else "Absent",
            spiculated="Present" if g["spiculated"] else "Absent",
        )
    else:
        labels = DescriptorLabels(
            orientation="Parallel", shape=g["shape"], margin="Circumscribed", echo=echo,
            posterior=posterior, indistinct="Absent", angular="Absent",
            microlobulated="Absent", spiculated="Absent",
        )
    return SynthCase(gray, mask, labels, tumor, f"case{index:04d}", (cx, cy), level)


# ---------------------------------------------------------------------------
# cross-validation splits


def _stratified_order(idx: Sequence[int], classes: np.ndarray, rng: np.random.Generator) -> List[int]:
    """Interleave classes proportionally so any prefix is roughly stratified."""
    keys = []
    for c in np.unique(classes[list(idx)]):
        members = rng.permutation([i for i in idx if classes[i] == c])
        n = len(members)
        keys += [((r + 0.5) / n, int(c), int(i)) for r, i in enumerate(members)]
    keys.sort()
    return [k[2] for k in keys]


def split_kfold(samples, k: int = 5, val_frac: float = 0.15, seed: int = 0
                ) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stratified k-fold (train, val, test) index splits.

    ``samples`` is a sequence of :class:`Sample` or of integer class labels.
    """
    classes = np.array([s.tumor if hasattr(s, "tumor") else int(s) for s in samples])
    n = len(classes)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng([seed, 0xF01D])
    # deal each class round-robin over the folds, continuing the fold counter
    # across classes so fold sizes differ by at most one
    fold_of = np.empty(n, dtype=int)
    pos = 0
    for c in np.unique(classes):
        for i in rng.permutation(np.flatnonzero(classes == c)):
            fold_of[i] = pos % k
            pos += 1
    splits = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = [int(i) for i in np.flatnonzero(fold_of != f)]
        n_val = int(round(val_frac * len(rest)))
        val_order = _stratified_order(rest, classes, np.random.default_rng([seed, f]))
        val = np.array(sorted(val_order[:n_val]), dtype=int)
        train = np.array(sorted(val_order[n_val:]), dtype=int)
        splits.append((train, val, test))
    return splits


def holdout_split(samples, test_frac: float = 0.2, val_frac: float = 0.15, seed: int = 0):
    """Single stratified (train, val, test) split; used when folds == 1."""
    k = max(2, int(round(1.0 / test_frac)))
    return split_kfold(samples, k=k, val_frac=val_frac, seed=seed)[0]
