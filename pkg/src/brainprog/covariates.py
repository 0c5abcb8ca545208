"""Subject covariates and their dense conditioning encoding.

The conditioning vector layout is versioned: any change to the length or
position of an entry must bump ``COND_LAYOUT_VERSION`` (checkpoints record
the version they were trained with).

Layout (length 10):
    [0]    age / 100
    [1]    sex (female=0, male=1)
    [2:5]  cognitive status one-hot (CN, MCI, AD)
    [5:10] region fractions scaled to [0, 1], in REGIONS order
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

REGIONS = (
    "hippocampus",
    "cerebral_cortex",
    "amygdala",
    "cerebral_white_matter",
    "lateral_ventricles",
)
SEXES = ("female", "male")
STATUSES = ("CN", "MCI", "AD")

COND_DIM = 10
COND_LAYOUT_VERSION = 1

# Chosen so phantom-cohort fractions occupy most of [0, 1] after scaling.
DEFAULT_REGION_SCALES: dict[str, float] = {
    "hippocampus": 0.08,
    "cerebral_cortex": 0.50,
    "amygdala": 0.04,
    "cerebral_white_matter": 0.80,
    "lateral_ventricles": 0.06,
}


@dataclass(frozen=True)
class Covariates:
    """Subject metadata plus progression-related region volume fractions."""

    age_years: float
    sex: str
    cognitive_status: str
    region_fractions: Mapping[str, float]

    def __post_init__(self):
        if not np.isfinite(self.age_years) or self.age_years < 0:
            raise ValueError(f"age_years must be finite and >= 0, got {self.age_years}")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.cognitive_status not in STATUSES:
            raise ValueError(
                f"cognitive_status must be one of {STATUSES}, got {self.cognitive_status!r}"
            )
        missing = [r for r in REGIONS if r not in self.region_fractions]
        if missing:
            raise ValueError(f"missing region fractions: {missing}")
        for r in REGIONS:
            f = self.region_fractions[r]
            if not (0.0 <= f <= 1.0):
                raise ValueError(f"fraction for {r} outside [0,1]: {f}")
        object.__setattr__(
            self, "region_fractions", {r: float(self.region_fractions[r]) for r in REGIONS}
        )

    def with_fractions(self, fractions: Mapping[str, float]) -> "Covariates":
        return Covariates(self.age_years, self.sex, self.cognitive_status, fractions)


def embed_covariates(c: Covariates, scales: Mapping[str, float] | None = None) -> np.ndarray:
    """Encode covariates as the dense length-10 conditioning vector."""
    if scales is None:
        scales = DEFAULT_REGION_SCALES
    missing = [r for r in REGIONS if r not in scales]
    if missing:
        raise ValueError(f"missing region scales: {missing}")

    vec = np.zeros(COND_DIM, dtype=np.float64)
    vec[0] = c.age_years / 100.0
    vec[1] = float(SEXES.index(c.sex))
    vec[2 + STATUSES.index(c.cognitive_status)] = 1.0
    for i, r in enumerate(REGIONS):
        vec[5 + i] = min(max(c.region_fractions[r] / scales[r], 0.0), 1.0)
    return vec
