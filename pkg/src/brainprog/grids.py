"""Array containers shared across the pipeline.

``VolumeGrid`` holds image-domain scalar fields (depth, height, width) with
voxel spacing in millimetres. ``LatentGrid`` holds the compact
(channels, depth, height, width) representations the diffusion model works
on. Both preserve the dtype they are given (float32 on disk / in networks,
float64 in numerical tests) and validate finiteness up front.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar field with spacing metadata.

    Image volumes keep intensities in [0, 1]; derived maps (e.g. voxelwise
    uncertainty) reuse this container and may exceed that range, so the
    range is a convention of image-domain producers, not a constructor
    check.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(n < 4 for n in arr.shape):
            raise ValueError(f"all volume dimensions must be >= 4, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LatentGrid:
    """A (channels, depth, height, width) array of latent coefficients."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"latent data must be 4D (C,D,H,W), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent data contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape
