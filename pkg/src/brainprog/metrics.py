"""Image and volumetric comparison metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .covariates import REGIONS
from .grids import VolumeGrid


@dataclass(frozen=True)
class SsimConfig:
    """Sliding-window SSIM parameters, recorded in every report."""

    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")


def image_mse(a: VolumeGrid, b: VolumeGrid) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def image_ssim(a: VolumeGrid, b: VolumeGrid, cfg: SsimConfig | None = None) -> float:
    """Mean local SSIM over a sliding uniform window (fully valid windows only)."""
    if cfg is None:
        cfg = SsimConfig()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if any(n < cfg.window for n in a.shape):
        raise ValueError(f"volume {a.shape} smaller than SSIM window {cfg.window}")

    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    win = cfg.window
    np_win = win**3
    cov_norm = np_win / (np_win - 1)  # unbiased local (co)variances

    def f(img):
        return ndimage.uniform_filter(img, size=win, mode="constant")

    ux, uy = f(x), f(y)
    uxx, uyy, uxy = f(x * x), f(y * y), f(x * y)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    ssim_map = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux**2 + uy**2 + c1) * (vx + vy + c2)
    )

    pad = win // 2
    core = ssim_map[pad:-pad, pad:-pad, pad:-pad]
    return float(core.mean())


def volumetric_mae(
    pred_fractions: dict[str, float], true_fractions: dict[str, float]
) -> dict[str, float]:
    """Per-region |pred - true| in percentage points of total brain volume."""
    if set(pred_fractions) != set(true_fractions):
        raise ValueError(
            f"region sets differ: {sorted(pred_fractions)} vs {sorted(true_fractions)}"
        )
    return {
        r: abs(pred_fractions[r] - true_fractions[r]) * 100.0
        for r in sorted(pred_fractions)
    }


def voxel_uncertainty_correlation(
    uncertainty_map: VolumeGrid, squared_error: VolumeGrid, brain_mask: np.ndarray
) -> float:
    """Spearman rank correlation between uncertainty and error on brain voxels.

    Ties take average ranks. Returns NaN (with no exception) when either
    masked series has zero variance, which callers should treat as a
    degenerate, excluded case.
    """
    if uncertainty_map.shape != squared_error.shape or uncertainty_map.shape != brain_mask.shape:
        raise ValueError("uncertainty map, error map, and mask shapes must match")
    u = uncertainty_map.data[brain_mask]
    e = squared_error.data[brain_mask]
    if u.size < 2:
        raise ValueError(f"need >= 2 masked voxels, got {u.size}")
    if np.ptp(u) == 0.0 or np.ptp(e) == 0.0:
        return float("nan")
    rho, _ = stats.spearmanr(u, e)
    return float(rho)


def region_maes_for_row(pred: dict[str, float], true: dict[str, float]) -> dict[str, float]:
    """volumetric_mae restricted to the canonical region order."""
    return {r: abs(pred[r] - true[r]) * 100.0 for r in REGIONS}
