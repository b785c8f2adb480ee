"""BI-RADS ultrasound descriptor taxonomy and label containers."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

# Head order used everywhere a flat descriptor vector appears.  Changing it
# breaks checkpoints and attribution reports.
DESCRIPTOR_CLASSES: Dict[str, Tuple[str, ...]] = {
    "orientation": ("Parallel", "NotParallel"),
    "shape": ("Oval", "Round", "Irregular"),
    "margin": ("Circumscribed", "NotCircumscribed"),
    "echo": ("Anechoic", "Hypoechoic", "Isoechoic", "Hyperechoic", "ComplexCysticSolid", "Heterogeneous"),
    "posterior": ("None", "Enhancement", "Shadowing", "Combined"),
    "indistinct": ("Absent", "Present"),
    "angular": ("Absent", "Present"),
    "microlobulated": ("Absent", "Present"),
    "spiculated": ("Absent", "Present"),
}
DESCRIPTORS: Tuple[str, ...] = tuple(DESCRIPTOR_CLASSES)
MARGIN_SUBTYPES: Tuple[str, ...] = ("indistinct", "angular", "microlobulated", "spiculated")
HEAD_SIZES: Tuple[int, ...] = tuple(len(v) for v in DESCRIPTOR_CLASSES.values())
FEATURE_DIM = sum(HEAD_SIZES)  # 25

TUMOR_CLASSES: Tuple[str, ...] = ("benign", "malignant")
MALIGNANT = 1

# Loss-weight order; the four margin sub-tasks are listed as indistinct,
# angular, spiculated, microlobulated here (unlike the head order above).
LOSS_TASKS: Tuple[str, ...] = (
    "orientation", "shape", "margin", "echo", "posterior",
    "indistinct", "angular", "spiculated", "microlobulated",
    "tumor", "segmentation",
)


def head_slices() -> Dict[str, slice]:
    """Positions of each head inside the 25-long merged descriptor vector."""
    out, start = {}, 0
    for name, size in zip(DESCRIPTORS, HEAD_SIZES):
        out[name] = slice(start, start + size)
        start += size
    return out


def feature_names() -> List[str]:
    return [f"{d}={c}" for d, classes in DESCRIPTOR_CLASSES.items() for c in classes]


@dataclass
class DescriptorLabels:
    """Categorical descriptor targets; ``None`` marks an unlabeled task."""

    orientation: Optional[str] = None
    shape: Optional[str] = None
    margin: Optional[str] = None
    echo: Optional[str] = None
    posterior: Optional[str] = None
    indistinct: Optional[str] = None
    angular: Optional[str] = None
    microlobulated: Optional[str] = None
    spiculated: Optional[str] = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and value not in DESCRIPTOR_CLASSES[f.name]:
                raise ValueError(f"{value!r} is not a valid {f.name} class")
        if self.margin == "Circumscribed":
            bad = [m for m in MARGIN_SUBTYPES if getattr(self, m) == "Present"]
            if bad:
                raise ValueError(f"circumscribed margin cannot have sub-descriptors {bad}")

    def indices(self) -> Dict[str, int]:
        """Class index per labeled task (unlabeled tasks omitted)."""
        return {
            name: DESCRIPTOR_CLASSES[name].index(getattr(self, name))
            for name in DESCRIPTORS
            if getattr(self, name) is not None
        }

    def as_dict(self) -> Dict[str, Optional[str]]:
        return {name: getattr(self, name) for name in DESCRIPTORS}


@dataclass
class Sample:
    """One training/evaluation unit."""

    image: np.ndarray  # [3, S, S], values in [0, 1]
    mask: np.ndarray  # [S, S], 0/1
    labels: DescriptorLabels
    tumor: Optional[int]  # index into TUMOR_CLASSES
    name: str = ""

    @property
    def size(self) -> int:
        return self.image.shape[-1]
