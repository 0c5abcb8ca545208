"""Image-domain preprocessing: normalization, resampling, external stubs.

Only intensity normalization and trilinear resampling are computed here;
the clinical preprocessing steps that require external tooling (bias-field
correction, skull stripping, template registration) are pass-through hooks
that log what was skipped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grids import VolumeGrid

log = logging.getLogger(__name__)

EXTERNAL_STEPS = ("bias_field_correction", "skull_stripping", "template_registration")


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: bool = True
    target_spacing_mm: tuple[float, float, float] | None = None
    external_steps: tuple[str, ...] = EXTERNAL_STEPS


def preprocess_stub(volume: VolumeGrid, cfg: PreprocessConfig | None = None) -> VolumeGrid:
    """Min-max normalize to [0,1] and optionally resample to a target spacing."""
    if cfg is None:
        cfg = PreprocessConfig()

    for step in cfg.external_steps:
        log.info("external step skipped: %s", step)

    data = volume.data.astype(np.float64)
    spacing = volume.spacing_mm

    if cfg.normalize:
        lo, hi = float(data.min()), float(data.max())
        if hi - lo <= 0.0:
            raise ValueError("cannot normalize a volume with zero intensity range")
        data = (data - lo) / (hi - lo)

    if cfg.target_spacing_mm is not None:
        factors = tuple(s_old / s_new for s_old, s_new in zip(spacing, cfg.target_spacing_mm))
        data = ndimage.zoom(data, zoom=factors, order=1, mode="nearest")
        data = np.clip(data, 0.0, 1.0)
        spacing = cfg.target_spacing_mm

    return VolumeGrid(data=data.astype(volume.data.dtype), spacing_mm=spacing)
