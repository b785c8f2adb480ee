"""Multi-task breast-ultrasound descriptor model on a small numpy autograd engine.

Submodules: ``autograd`` (tensors and ops), ``preprocess``, ``synthdata``,
``model``, ``losses`` (losses and metrics), ``trainer``, ``explain``
(Shapley attributions), ``io`` (file formats), ``config`` and ``cli``.
"""

from .lexicon import DESCRIPTOR_CLASSES, DESCRIPTORS, FEATURE_DIM, TUMOR_CLASSES, DescriptorLabels, Sample
from .model import ModelConfig
from .trainer import TrainConfig
from .losses import LossWeights
from .synthdata import SynthSpec

__version__ = "0.1.0"

__all__ = [
    "DESCRIPTOR_CLASSES", "DESCRIPTORS", "FEATURE_DIM", "TUMOR_CLASSES", "DescriptorLabels", "Sample",
    "ModelConfig", "TrainConfig", "LossWeights", "SynthSpec",
]
