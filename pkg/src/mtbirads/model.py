"""Shared-encoder multi-task network.

A VGG-style encoder feeds two branches: a U-Net style decoder that emits
segmentation logits, and a descriptor trunk with nine softmax heads whose
merged probabilities drive the benign/malignant head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lexicon import DESCRIPTORS, FEATURE_DIM, HEAD_SIZES, head_slices

ModelParams = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    blocks: int = 3
    base_channels: int = 8
    head_hidden: int = 32
    tumor_uses_pooled_features: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError("need at least 2 encoder blocks")
        if self.input_size % (2 ** self.blocks):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{self.blocks}")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")

    def stage_channels(self) -> List[int]:
        return [self.base_channels * 2 ** s for s in range(self.blocks)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    """Network outputs; arrays carry a leading batch axis when the input did."""

    descriptor_probs: Dict[str, Tensor]
    tumor_probs: Tensor
    seg_logits: Tensor
    pooled: Tensor

    @property
    def seg_probs(self) -> Tensor:
        return ag.sigmoid(self.seg_logits)

    def features(self) -> np.ndarray:
        return descriptor_feature_vector(self)


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    chans = cfg.stage_channels()
    c_prev = cfg.in_channels
    for s, c in enumerate(chans):
        shapes[f"enc{s}.conv1.w"] = (c, c_prev, 3, 3)
        shapes[f"enc{s}.conv1.b"] = (c,)
        shapes[f"enc{s}.conv2.w"] = (c, c, 3, 3)
        shapes[f"enc{s}.conv2.b"] = (c,)
        c_prev = c
    for s in reversed(range(cfg.blocks)):
        c = chans[s]
        shapes[f"dec{s}.conv1.w"] = (c, c_prev + c, 3, 3)
        shapes[f"dec{s}.conv1.b"] = (c,)
        shapes[f"dec{s}.conv2.w"] = (c, c, 3, 3)
        shapes[f"dec{s}.conv2.b"] = (c,)
        c_prev = c
    shapes["seg.w"] = (1, c_prev, 1, 1)
    shapes["seg.b"] = (1,)
    deep = chans[-1]
    shapes["trunk.w"] = (cfg.head_hidden, deep)
    shapes["trunk.b"] = (cfg.head_hidden,)
    for name, size in zip(DESCRIPTORS, HEAD_SIZES):
        shapes[f"head.{name}.w"] = (size, cfg.head_hidden)
        shapes[f"head.{name}.b"] = (size,)
    tumor_in = FEATURE_DIM + (deep if cfg.tumor_uses_pooled_features else 0)
    shapes["tumor1.w"] = (cfg.head_hidden, tumor_in)
    shapes["tumor1.b"] = (cfg.head_hidden,)
    shapes["tumor2.w"] = (2, cfg.head_hidden)
    shapes["tumor2.b"] = (2,)
    return shapes


def init(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _as_tensors(params) -> Dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def forward(params, image, cfg: ModelConfig) -> Prediction:
    """Run the network on ``[C,S,S]`` or a batch ``[B,C,S,S]``.

    ``params`` may hold arrays or Tensors (Tensors with ``requires_grad``
    are used for training).
    """
    p = _as_tensors(params)
    x = ag.as_tensor(image)
    if x.shape[-3:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ag.DimensionError(
            f"image shape {x.shape} does not match config "
            f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})"
        )

    squeeze = x.ndim == 3
    if squeeze:
        x = ag.reshape(x, (1,) + x.shape)
    x = ag.to_channels_last(x)

    skips = []
    for s in range(cfg.blocks):
        x = ag.relu(ag.conv2d_hwc(x, p[f"enc{s}.conv1.w"], p[f"enc{s}.conv1.b"]))
        x = ag.relu(ag.conv2d_hwc(x, p[f"enc{s}.conv2.w"], p[f"enc{s}.conv2.b"]))
        skips.append(x)
        x = ag.maxpool2x2_hwc(x)
    deepest = x

    y = deepest
    for s in reversed(range(cfg.blocks)):
        y = ag.concat([ag.upsample2x2_hwc(y), skips[s]], axis=-1)
        y = ag.relu(ag.conv2d_hwc(y, p[f"dec{s}.conv1.w"], p[f"dec{s}.conv1.b"]))
        y = ag.relu(ag.conv2d_hwc(y, p[f"dec{s}.conv2.w"], p[f"dec{s}.conv2.b"]))
    seg_logits = ag.to_channels_first(ag.conv2d_hwc(y, p["seg.w"], p["seg.b"]))

    pooled = ag.tmean(deepest, axis=(1, 2))
    if squeeze:
        seg_logits = ag.reshape(seg_logits, seg_logits.shape[1:])
        pooled = ag.reshape(pooled, pooled.shape[1:])
    trunk = ag.relu(ag.dense(pooled, p["trunk.w"], p["trunk.b"]))
    probs = {
        name: ag.softmax(ag.dense(trunk, p[f"head.{name}.w"], p[f"head.{name}.b"]))
        for name in DESCRIPTORS
    }
    merged = ag.concat([probs[n] for n in DESCRIPTORS], axis=-1)
    tumor_probs = tumor_head(p, merged, pooled if cfg.tumor_uses_pooled_features else None)
    return Prediction(probs, tumor_probs, seg_logits, pooled)


def tumor_head(params, merged, pooled=None) -> Tensor:
    """Benign/malignant probabilities from the merged 25-vector (plus pooled features if wired)."""
    p = _as_tensors(params)
    z = ag.as_tensor(merged)
    if pooled is not None:
        z = ag.concat([z, ag.as_tensor(pooled)], axis=-1)
    h = ag.relu(ag.dense(z, p["tumor1.w"], p["tumor1.b"]))
    return ag.softmax(ag.dense(h, p["tumor2.w"], p["tumor2.b"]))


def descriptor_feature_vector(pred: Prediction) -> np.ndarray:
    """Merged head probabilities in fixed head order (last axis has length 25)."""
    return np.concatenate([pred.descriptor_probs[n].data for n in DESCRIPTORS], axis=-1)


def split_feature_vector(vec: np.ndarray) -> Dict[str, np.ndarray]:
    """Inverse of :func:`descriptor_feature_vector`."""
    vec = np.asarray(vec)
    return {name: vec[..., sl] for name, sl in head_slices().items()}


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise ValueError(f"{k}: shape {params[k].shape}, config expects {shape}")
        if not np.all(np.isfinite(params[k])):
            raise ValueError(f"{k} contains non-finite values")


def predict(params: ModelParams, images: np.ndarray, cfg: ModelConfig, batch_size: int = 32) -> Dict[str, np.ndarray]:
    """Inference without graph recording; returns plain arrays keyed by output."""
    out: Dict[str, List[np.ndarray]] = {"features": [], "tumor": [], "seg": []}
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            pred = forward(params, images[i:i + batch_size], cfg)
            out["features"].append(descriptor_feature_vector(pred))
            out["tumor"].append(pred.tumor_probs.data)
            out["seg"].append(pred.seg_probs.data[:, 0])
    return {k: np.concatenate(v) for k, v in out.items()}


def n_params(params: ModelParams) -> int:
    return int(sum(v.size for v in params.values()))


def default_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def config_from_dict(d: Optional[dict]) -> ModelConfig:
    return ModelConfig(**(d or {}))
