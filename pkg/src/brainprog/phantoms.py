"""Procedural phantom-brain cohorts with known progression dynamics.

Each subject is an ellipsoidal "brain" containing a ventricle ellipsoid
that grows with age, paired hippocampal spheres that shrink, paired
amygdala spheres, a cortex shell, and a white-matter interior. Region
dynamics are linear in age by default (fraction = base + rate * years
since baseline), with a logistic mode for trajectory-model experiments.
Ground-truth fractions are voxel counts over the label mask, so every
reported number is recountable.

Structure placement is expressed in brain-relative coordinates, which
keeps the geometry valid under per-subject anatomy jitter.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariates import REGIONS, SEXES, STATUSES
from .grids import VolumeGrid
from .volio import Manifest, ManifestRow, write_manifest, write_volume

LABELS = {
    "background": 0,
    "lateral_ventricles": 1,
    "hippocampus": 2,
    "amygdala": 3,
    "cerebral_cortex": 4,
    "cerebral_white_matter": 5,
}
LABEL_NAMES = {v: k for k, v in LABELS.items()}

# Brain-relative placement: offsets in units of the brain semi-axes, sized
# so worst-case structures (max base fraction + max dynamics over a default
# visit span) keep |offset| + r/min_axis below the cortex shell with margin,
# and stay mutually separated by > 1.5 voxels for the blob-matched
# measurement below.
_VENTRICLE_CENTER = (0.0, -0.42, 0.0)
_VENTRICLE_AXES = (0.9, 1.2, 0.9)  # shape ratios, scaled to the target volume
_HIPPO_CENTERS = ((0.0, 0.36, 0.34), (0.0, 0.36, -0.34))
_AMYGDALA_CENTERS = ((-0.54, 0.0, 0.24), (-0.54, 0.0, -0.24))
_CORTEX_INNER_RHO = 0.85  # structures must stay strictly inside this shell
_DYNAMIC_REGIONS = ("lateral_ventricles", "hippocampus", "amygdala")


class GeometryError(Exception):
    """Raised when a requested structure no longer fits inside the brain."""


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity, and dynamics parameters of the phantom cohort."""

    grid_size: int = 32
    # Static tissue sits low, dynamic structures high: any blur ramp between
    # background, cortex, and white matter then stays below the dynamic
    # bins, which keeps smoothed reconstructions measurable.
    intensities: dict[str, float] = field(
        default_factory=lambda: {
            "background": 0.0,
            "cerebral_cortex": 0.20,
            "cerebral_white_matter": 0.35,
            "amygdala": 0.55,
            "hippocampus": 0.75,
            "lateral_ventricles": 0.95,
        }
    )
    # fraction-of-brain change per year, by diagnosis
    ventricle_growth: dict[str, float] = field(
        default_factory=lambda: {"CN": 0.0005, "MCI": 0.0020, "AD": 0.0040}
    )
    hippocampus_shrink: dict[str, float] = field(
        default_factory=lambda: {"CN": 0.0008, "MCI": 0.0022, "AD": 0.0040}
    )
    amygdala_shrink_ratio: float = 0.4  # amygdala rate = ratio * hippocampus rate
    noise_std: float = 0.01
    dynamics: str = "linear"  # or "logistic"
    logistic_rate: float = 0.25  # 1/years, logistic mode only
    logistic_midpoint_age: float = 74.0

    def __post_init__(self):
        if self.grid_size < 16:
            raise ValueError("grid_size must be >= 16")
        if set(self.intensities) != set(LABELS):
            raise ValueError(f"intensities must cover exactly {sorted(LABELS)}")
        vals = sorted(self.intensities.values())
        gaps = [b - a for a, b in zip(vals, vals[1:])]
        if any(g < 0.1 for g in gaps):
            raise ValueError(f"tissue intensities must be distinct by >= 0.1, gaps {gaps}")
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError("intensities must lie in [0, 1]")
        for rates in (self.ventricle_growth, self.hippocampus_shrink):
            if set(rates) != set(STATUSES):
                raise ValueError(f"rates must cover {STATUSES}")
            if not (rates["CN"] <= rates["MCI"] <= rates["AD"]):
                raise ValueError(f"rates must be ordered CN <= MCI <= AD, got {rates}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.dynamics not in ("linear", "logistic"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")


@dataclass(frozen=True)
class RegionMask:
    """Label volume partitioning the grid into background + 5 structures."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError("mask labels must be 3D")
        if arr.max(initial=0) > max(LABELS.values()):
            raise ValueError("mask contains labels outside the declared set")
        object.__setattr__(self, "labels", arr.astype(np.uint8))

    def region(self, name: str) -> np.ndarray:
        return self.labels == LABELS[name]

    @property
    def brain(self) -> np.ndarray:
        return self.labels != LABELS["background"]


@dataclass(frozen=True)
class SubjectRecipe:
    """Everything needed to deterministically render one subject at any age."""

    subject_id: str
    sex: str
    diagnosis: str
    baseline_age: float
    brain_axes: tuple[float, float, float]
    ventricle_base: float
    hippocampus_base: float
    amygdala_base: float
    logistic_midpoint: float = 74.0


@dataclass
class Cohort:
    manifest: Manifest
    volumes: list[VolumeGrid]
    masks: list[RegionMask]
    recipes: list[SubjectRecipe]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def target_fractions(spec: PhantomSpec, recipe: SubjectRecipe, age: float) -> dict[str, float]:
    """Analytic region-fraction targets for a subject at a given age."""
    dx = recipe.diagnosis
    v_rate = spec.ventricle_growth[dx]
    h_rate = spec.hippocampus_shrink[dx]
    a_rate = spec.amygdala_shrink_ratio * h_rate
    if spec.dynamics == "linear":
        dt = age - recipe.baseline_age
        dv, dh, da = v_rate * dt, h_rate * dt, a_rate * dt
    else:
        # accumulated change follows a logistic in age, anchored at baseline
        k, mid = spec.logistic_rate, recipe.logistic_midpoint
        span = 25.0  # years of progression the logistic transition represents
        prog = _sigmoid(k * (age - mid)) - _sigmoid(k * (recipe.baseline_age - mid))
        dv, dh, da = v_rate * span * prog, h_rate * span * prog, a_rate * span * prog
    return {
        "lateral_ventricles": recipe.ventricle_base + dv,
        "hippocampus": recipe.hippocampus_base - dh,
        "amygdala": recipe.amygdala_base - da,
    }


def _sphere_radius(frac: float, brain_volume: float, n_parts: int = 1) -> float:
    return ((frac / n_parts) * brain_volume * 3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)


def render_subject(
    spec: PhantomSpec, recipe: SubjectRecipe, age: float, noise_seed: int | None = None
) -> tuple[VolumeGrid, RegionMask]:
    """Render intensity volume and exact label mask for one subject visit."""
    g = spec.grid_size
    az, ay, ax = recipe.brain_axes
    c = (g - 1) / 2.0
    zz, yy, xx = np.meshgrid(
        np.arange(g) - c, np.arange(g) - c, np.arange(g) - c, indexing="ij"
    )
    rho2 = (zz / az) ** 2 + (yy / ay) ** 2 + (xx / ax) ** 2

    labels = np.zeros((g, g, g), dtype=np.uint8)
    brain = rho2 <= 1.0
    labels[brain] = LABELS["cerebral_white_matter"]
    labels[(rho2 > _CORTEX_INNER_RHO**2) & brain] = LABELS["cerebral_cortex"]

    fracs = target_fractions(spec, recipe, age)
    for name, f in fracs.items():
        if f <= 0.0:
            raise GeometryError(
                f"{recipe.subject_id}: {name} fraction {f:.4f} non-positive at age {age:.1f}"
            )
    brain_volume = (4.0 / 3.0) * math.pi * az * ay * ax

    structures: list[tuple[str, np.ndarray]] = []

    s = (fracs["lateral_ventricles"] * brain_volume * 3.0 / (4.0 * math.pi * np.prod(_VENTRICLE_AXES))) ** (1.0 / 3.0)
    vz, vy, vx = (_VENTRICLE_CENTER[0] * az, _VENTRICLE_CENTER[1] * ay, _VENTRICLE_CENTER[2] * ax)
    vent = (
        ((zz - vz) / (_VENTRICLE_AXES[0] * s)) ** 2
        + ((yy - vy) / (_VENTRICLE_AXES[1] * s)) ** 2
        + ((xx - vx) / (_VENTRICLE_AXES[2] * s)) ** 2
    ) <= 1.0
    structures.append(("lateral_ventricles", vent))

    for name, centers in (("hippocampus", _HIPPO_CENTERS), ("amygdala", _AMYGDALA_CENTERS)):
        r = _sphere_radius(fracs[name], brain_volume, n_parts=len(centers))
        mask = np.zeros_like(vent)
        for oz, oy, ox in centers:
            mask |= ((zz - oz * az) ** 2 + (yy - oy * ay) ** 2 + (xx - ox * ax) ** 2) <= r**2
        structures.append((name, mask))

    painted = np.zeros_like(vent)
    for name, mask in structures:
        if not mask.any():
            raise GeometryError(f"{recipe.subject_id}: {name} vanished at age {age:.1f}")
        if rho2[mask].max() > _CORTEX_INNER_RHO**2:
            raise GeometryError(
                f"{recipe.subject_id}: {name} exceeds the brain interior at age {age:.1f}"
            )
        if (painted & mask).any():
            raise GeometryError(
                f"{recipe.subject_id}: {name} collides with another structure at age {age:.1f}"
            )
        painted |= mask
        labels[mask] = LABELS[name]

    intensity = np.zeros((g, g, g), dtype=np.float64)
    for name, label in LABELS.items():
        intensity[labels == label] = spec.intensities[name]
    if spec.noise_std > 0 and noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        intensity = intensity + spec.noise_std * rng.standard_normal(intensity.shape)
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)

    return VolumeGrid(data=intensity), RegionMask(labels=labels)


def region_fractions(volume: VolumeGrid, mask: RegionMask) -> dict[str, float]:
    """Region voxel counts over brain voxel count, in [0, 1]."""
    if volume.shape != mask.labels.shape:
        raise ValueError(f"volume/mask shape mismatch {volume.shape} vs {mask.labels.shape}")
    brain_count = int(mask.brain.sum())
    if brain_count == 0:
        raise ValueError("empty brain mask")
    return {r: float(mask.region(r).sum()) / brain_count for r in REGIONS}


def segment_volume(volume: VolumeGrid, spec: PhantomSpec) -> RegionMask:
    """Nearest-intensity classification; the by-construction segmenter.

    Stands in for the external segmentation tool when labeling sharp
    volumes. Valid because the spec guarantees tissue intensities separated
    by >= 0.1.
    """
    names = sorted(LABELS, key=LABELS.get)
    levels = np.array([spec.intensities[n] for n in names], dtype=np.float64)
    dist = np.abs(volume.data.astype(np.float64)[..., None] - levels[None, None, None, :])
    codes = np.argmin(dist, axis=-1).astype(np.uint8)
    label_ids = np.array([LABELS[n] for n in names], dtype=np.uint8)
    return RegionMask(labels=label_ids[codes])


def _bin_edges(spec: PhantomSpec, name: str) -> tuple[float, float]:
    levels = sorted(spec.intensities.values())
    v = spec.intensities[name]
    i = levels.index(v)
    lo = -np.inf if i == 0 else 0.5 * (levels[i - 1] + v)
    hi = np.inf if i == len(levels) - 1 else 0.5 * (v + levels[i + 1])
    return lo, hi


def measure_fractions(volume: VolumeGrid, spec: PhantomSpec) -> dict[str, float]:
    """Fraction measurement that tolerates reconstruction blur.

    Generated volumes are piecewise constant, but decoded predictions
    smear structure boundaries over 1-2 voxels. This estimator (the
    phantom-domain stand-in for the external segmentation tool on
    predicted scans):

    * counts brain voxels by thresholding at half the cortex intensity
      (every blur ramp at the rim stays below the dynamic-structure bins
      by intensity design);
    * locates each dynamic structure as the intensity-bin component(s)
      nearest its canonical brain-relative position, rejecting the shells
      that boundary blur paints around *other* structures;
    * integrates partial-volume weights (x - wm) / (level - wm) over the
      matched blob plus a 2-voxel margin, which is invariant to symmetric
      blur of the structure/white-matter interface.

    On noise-free rendered phantoms this agrees with mask voxel counting
    to sub-voxel accuracy.
    """
    from scipy import ndimage

    x = volume.data.astype(np.float64)
    intens = spec.intensities
    brain = x > 0.5 * intens["cerebral_cortex"]
    brain_count = int(brain.sum())
    if brain_count == 0:
        raise ValueError("no brain voxels found")

    idx = np.nonzero(brain)
    center = np.array([c.mean() for c in idx])
    axes = np.array([max(np.sqrt(5.0 * c.var()), 1.0) for c in idx])
    mean_axis = float(axes.mean())

    canonical = {
        "lateral_ventricles": [np.array(_VENTRICLE_CENTER)],
        "hippocampus": [np.array(c) for c in _HIPPO_CENTERS],
        "amygdala": [np.array(c) for c in _AMYGDALA_CENTERS],
    }

    lo_c, hi_c = _bin_edges(spec, "cerebral_cortex")
    cortex_count = float(((x > lo_c) & (x <= hi_c) & brain).sum())

    lo_w, hi_w = _bin_edges(spec, "cerebral_white_matter")
    wm_bin = (x > lo_w) & (x <= hi_w)
    wm_level = float(np.median(x[wm_bin])) if wm_bin.any() else intens["cerebral_white_matter"]

    blobs: dict[str, np.ndarray] = {}
    for name in _DYNAMIC_REGIONS:
        lo, hi = _bin_edges(spec, name)
        cand = (x > lo) & (x <= hi)
        labels, n_comp = ndimage.label(cand)
        targets = [center + rel * axes for rel in canonical[name]]
        accepted = np.zeros_like(cand)
        for comp in range(1, n_comp + 1):
            mask = labels == comp
            centroid = np.array([c.mean() for c in np.nonzero(mask)])
            if min(np.linalg.norm(centroid - t) for t in targets) <= 0.30 * mean_axis:
                accepted |= mask
        blobs[name] = accepted

    volumes: dict[str, float] = {}
    for name in _DYNAMIC_REGIONS:
        accepted = blobs[name]
        if not accepted.any():
            volumes[name] = 0.0
            continue
        core_level = float(np.median(x[accepted]))
        denom = max(core_level - wm_level, 0.05)
        roi = ndimage.binary_dilation(accepted, iterations=2)
        roi &= x > lo_w  # keep the WM/structure interface; drop cortex spill
        for other, other_blob in blobs.items():
            if other != name:
                roi &= ~other_blob
        w = np.minimum((x[roi] - wm_level) / denom, 1.5)
        volumes[name] = float(max(w.sum(), 0.0))

    fractions = {name: volumes[name] / brain_count for name in _DYNAMIC_REGIONS}
    fractions["cerebral_cortex"] = cortex_count / brain_count
    fractions["cerebral_white_matter"] = max(
        1.0 - sum(fractions.values()), 0.0
    )
    return {r: float(np.clip(fractions[r], 0.0, 1.0)) for r in REGIONS}


def _make_recipe(spec: PhantomSpec, index: int, rng: np.random.Generator, age_range) -> SubjectRecipe:
    base_axes = np.array([12.0, 13.0, 12.0]) * (spec.grid_size / 32.0)
    jitter = rng.uniform(0.97, 1.03, size=3)
    return SubjectRecipe(
        subject_id=f"S{index:04d}",
        sex=str(rng.choice(SEXES)),
        diagnosis=str(rng.choice(STATUSES)),
        baseline_age=float(rng.uniform(age_range[0], age_range[1])),
        brain_axes=tuple(float(v) for v in base_axes * jitter),
        ventricle_base=float(rng.uniform(0.016, 0.022)),
        hippocampus_base=float(rng.uniform(0.038, 0.048)),
        amygdala_base=float(rng.uniform(0.012, 0.016)),
        logistic_midpoint=float(spec.logistic_midpoint_age + rng.uniform(-3.0, 3.0)),
    )


def _visit_ages(recipe: SubjectRecipe, n_visits: int, rng: np.random.Generator) -> list[float]:
    # first follow-up is pinned at +2 years so every subject has a 2-year
    # ground truth for selection experiments
    ages = [recipe.baseline_age]
    if n_visits >= 2:
        ages.append(recipe.baseline_age + 2.0)
    while len(ages) < n_visits:
        ages.append(ages[-1] + float(rng.uniform(1.3, 1.8)))
    return ages


def generate_cohort(
    spec: PhantomSpec,
    n_subjects: int,
    visits_per_subject: int,
    age_range: tuple[float, float] = (62.0, 72.0),
    seed: int = 0,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> Cohort:
    """Generate a deterministic cohort; optionally write volumes + manifest.

    Subject streams are seeded as ``seed ^ subject_index`` so generation can
    parallelize across subjects without changing any output.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if visits_per_subject < 2:
        raise ValueError("visits_per_subject must be >= 2 (longitudinal cohort)")
    if not (age_range[0] < age_range[1]):
        raise ValueError(f"bad age range {age_range}")

    def build_subject(i: int):
        rng = np.random.default_rng(seed ^ i)
        recipe = _make_recipe(spec, i, rng, age_range)
        ages = _visit_ages(recipe, visits_per_subject, rng)
        noise_seeds = [int(rng.integers(0, 2**31 - 1)) for _ in ages]
        rendered = [
            render_subject(spec, recipe, age, noise_seed=ns)
            for age, ns in zip(ages, noise_seeds)
        ]
        return recipe, ages, rendered

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            built = list(pool.map(build_subject, range(n_subjects)))
    else:
        built = [build_subject(i) for i in range(n_subjects)]

    rows: list[ManifestRow] = []
    volumes: list[VolumeGrid] = []
    masks: list[RegionMask] = []
    recipes: list[SubjectRecipe] = []
    for recipe, ages, rendered in built:
        recipes.append(recipe)
        for j, (age, (vol, mask)) in enumerate(zip(ages, rendered)):
            rel = f"vols/{recipe.subject_id}_v{j}.vol"
            rows.append(
                ManifestRow(
                    subject_id=recipe.subject_id,
                    visit_age=age,
                    sex=recipe.sex,
                    diagnosis=recipe.diagnosis,
                    volume_path=rel,
                    fractions=region_fractions(vol, mask),
                )
            )
            volumes.append(vol)
            masks.append(mask)

    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = Manifest(rows=rows, root=root)
    cohort = Cohort(manifest=manifest, volumes=volumes, masks=masks, recipes=recipes)

    if out_dir is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "vols").mkdir(exist_ok=True)
        for row, vol, mask in zip(rows, volumes, masks):
            write_volume(vol, root / row.volume_path)
            mask_vol = VolumeGrid(data=mask.labels.astype(np.float32))
            write_volume(mask_vol, root / row.volume_path.replace(".vol", "_mask.vol"))
        write_manifest(manifest, root / "manifest.csv")
    return cohort
