"""Diffusion-process mathematics: schedules, forward noising, loss, DDIM.

Everything here is a pure function of its inputs and is independent of any
particular denoiser. Array arguments may be numpy arrays or torch tensors;
the per-timestep coefficients are plain Python floats taken from a float64
schedule, so the arithmetic works identically (and differentiably, for
torch) on either kind.

Timestep convention: t runs 1..T, with alpha_bar[0] := 1 so t=0 is the
identity (clean data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionConfig:
    """Step count and beta-range of the forward process."""

    T: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0205
    schedule_kind: str = "scaled_linear"  # or "linear"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"({self.beta_start}, {self.beta_end})"
            )
        if self.schedule_kind not in ("scaled_linear", "linear"):
            raise ValueError(f"unknown schedule_kind {self.schedule_kind!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables, indexed 1..T (index 0 is the t=0 slot).

    alpha_bars[t] is the sequential product alpha_bars[t-1] * alphas[t], so
    the recurrence holds bit-exactly.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        b, a, ab = self.betas, self.alphas, self.alpha_bars
        if not (b.shape == a.shape == ab.shape) or b.ndim != 1 or len(b) < 3:
            raise ValueError("schedule tables must be 1D arrays of length T+1")
        if not (np.all(b[1:] > 0.0) and np.all(b[1:] < 1.0)):
            raise ValueError("every beta_t must lie in (0, 1)")
        if ab[0] != 1.0 or a[0] != 1.0:
            raise ValueError("index 0 must carry the t=0 convention (alpha_bar=1)")
        if not np.all(np.diff(ab) < 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if not np.all(ab > 0.0):
            raise ValueError("alpha_bars must stay positive")

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class SamplerConfig:
    """DDIM sampler settings. eta=0 gives the deterministic sampler."""

    num_inference_steps: int = 25
    eta: float = 0.0

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if self.eta < 0.0:
            raise ValueError("eta must be >= 0")


def build_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Construct the beta/alpha/alpha_bar tables for a config.

    "scaled_linear" interpolates linearly in sqrt(beta) and squares
    (the convention of the major latent-diffusion libraries); "linear"
    interpolates beta directly. Both are pinned to the exact endpoints.
    """
    T = cfg.T
    if cfg.schedule_kind == "scaled_linear":
        betas_body = np.linspace(math.sqrt(cfg.beta_start), math.sqrt(cfg.beta_end), T) ** 2
    else:
        betas_body = np.linspace(cfg.beta_start, cfg.beta_end, T)
    betas_body[0] = cfg.beta_start
    betas_body[-1] = cfg.beta_end

    betas = np.concatenate([[0.0], betas_body])
    alphas = 1.0 - betas
    alphas[0] = 1.0
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_t(t: int, sched: NoiseSchedule, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not (lo <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form noising q(x_t | x_0): sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    _check_t(t, sched, allow_zero=True)
    _check_shapes(x0, eps, "forward_marginal")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev, t: int, eps, sched: NoiseSchedule):
    """Single forward kernel q(x_t | x_{t-1}): sqrt(1-b_t)*x + sqrt(b_t)*eps."""
    _check_t(t, sched)
    _check_shapes(x_prev, eps, "forward_step")
    b = float(sched.betas[t])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


def noise_loss(eps_true, eps_pred):
    """Element-mean squared error between true and predicted noise.

    Returns a Python float for numpy inputs and a differentiable 0-d tensor
    for torch inputs.
    """
    _check_shapes(eps_true, eps_pred, "noise_loss")
    diff = eps_pred - eps_true
    out = (diff * diff).mean()
    if isinstance(out, np.floating) or isinstance(out, np.ndarray):
        return float(out)
    return out


def predict_x0(x_t, t: int, eps_pred, sched: NoiseSchedule):
    """Invert the forward marginal: (x_t - sqrt(1-ab_t)*eps) / sqrt(ab_t)."""
    _check_t(t, sched, allow_zero=True)
    _check_shapes(x_t, eps_pred, "predict_x0")
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def timestep_subsequence(T: int, num_steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps from T down to 1.

    Rounded to integers and deduplicated; always ends at t=1 (a single-step
    sequence queries the denoiser once at t=1 and jumps straight to the
    clean state).
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if num_steps > T:
        raise ValueError(f"num_steps {num_steps} exceeds T={T}")
    if num_steps == 1:
        return [1]
    raw = np.linspace(T, 1, num_steps)
    steps: list[int] = []
    for v in np.rint(raw).astype(int):
        if not steps or v < steps[-1]:
            steps.append(int(v))
    return steps


def ddim_sample(denoiser, z_T, cond, sched: NoiseSchedule, scfg: SamplerConfig, seed: int = 0):
    """Run the DDIM reverse loop from z_T down to the clean state.

    ``denoiser(z_t, t, cond)`` must return a same-shape noise estimate.
    With eta=0 the result is a deterministic function of (z_T, cond); for
    eta>0 the extra noise is drawn from a generator seeded by ``seed``.
    """
    steps = timestep_subsequence(sched.T, scfg.num_inference_steps)
    rng = np.random.default_rng(seed) if scfg.eta > 0.0 else None

    z = z_T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps_hat = denoiser(z, t, cond)
        _check_shapes(z, eps_hat, "ddim_sample denoiser output")
        x0_hat = predict_x0(z, t, eps_hat, sched)

        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t_prev)
        sigma_t = 0.0
        if scfg.eta > 0.0:
            sigma_t = (
                scfg.eta
                * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                * math.sqrt(1.0 - ab_t / ab_prev)
            )
        dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma_t**2, 0.0))
        z = math.sqrt(ab_prev) * x0_hat + dir_coeff * eps_hat
        if sigma_t > 0.0:
            xi = rng.standard_normal(tuple(z.shape))
            if not isinstance(z, np.ndarray):  # torch path
                import torch

                xi = torch.from_numpy(xi).to(dtype=z.dtype)
            else:
                xi = xi.astype(z.dtype, copy=False)
            z = z + sigma_t * xi
    return z
