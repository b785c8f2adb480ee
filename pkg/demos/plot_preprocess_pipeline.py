"""
From a raw frame to a network input
===================================

A synthetic frame is cropped to a square around the mass, resized, and
expanded to three channels (raw, equalized, smoothed).  Augmentation then
warps image and mask with the same affine map.
"""

import numpy as np

from mtbirads import preprocess as P
from mtbirads import synthdata as SD

case = SD.generate_raw(SD.SynthSpec(n_samples=1, rng_seed=3))[0]
print("raw frame", case.gray.shape, "labels", case.labels.as_dict())

# the crop keeps every tumor pixel and is as large as the short side allows
top, left, side, fits = P.square_window(case.gray.shape, P.mask_bbox(case.mask))
print("window", (top, left, side), "contains mass:", fits)

x, m = P.preprocess_pair(case.gray, case.mask, 64)
for name, ch in zip(("raw", "equalized", "smoothed"), x):
    print(f"{name:10s} mean {ch.mean():.3f}  std {ch.std():.3f}")

###############################################################################
# Augmentation
# ------------
# Rotation, shift, zoom, shear and flip share one inverse affine matrix;
# the image is resampled bilinearly and the mask by nearest neighbour.

rng = np.random.default_rng(0)
for k in range(3):
    xa, ma = P.augment(x, m, P.AugmentConfig(), rng)
    print(f"draw {k}: mask area {int(m.sum())} -> {int(ma.sum())}")
