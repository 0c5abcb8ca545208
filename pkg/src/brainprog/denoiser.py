"""Conditional noise predictor for the latent diffusion model.

A compact 3-level UNet over latent grids. Covariates enter through
cross-attention (each of the 10 conditioning entries becomes a token);
the timestep enters as a sinusoidal embedding added inside every residual
block. The decoder half accepts optional additive control residuals, which
is the attachment point for the control module.

The denoiser operates in "diffusion space": latents standardized by the
scalar ``latent_scale`` computed from the training set (stored with the
weights), so z_T ~ N(0, I) matches the data scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoints import CheckpointBlob, checkpoint_content_hash, state_dict_to_tensors
from .covariates import COND_DIM, COND_LAYOUT_VERSION, Covariates, embed_covariates
from .diffusion import NoiseSchedule, forward_marginal, noise_loss
from .errors import NumericError
from .grids import LatentGrid


@dataclass(frozen=True)
class DenoiserDescriptor:
    latent_shape: tuple[int, int, int, int] = (3, 4, 4, 4)
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    ctx_dim: int = 32
    time_dim: int = 64
    attn_levels: tuple[int, ...] = (1, 2)  # lowest-resolution levels attend to covariates
    cond_dim: int = COND_DIM

    def __post_init__(self):
        sizes = self.latent_shape[1:]
        if any(s % (2 ** (len(self.channel_mults) - 1)) != 0 for s in sizes):
            raise ValueError(
                f"latent spatial dims {sizes} not divisible by the UNet depth "
                f"({len(self.channel_mults)} levels)"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "ctx_dim": self.ctx_dim,
            "time_dim": self.time_dim,
            "attn_levels": list(self.attn_levels),
            "cond_dim": self.cond_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserDescriptor":
        return DenoiserDescriptor(
            latent_shape=tuple(d["latent_shape"]),
            base_channels=int(d["base_channels"]),
            channel_mults=tuple(d["channel_mults"]),
            ctx_dim=int(d["ctx_dim"]),
            time_dim=int(d["time_dim"]),
            attn_levels=tuple(d["attn_levels"]),
            cond_dim=int(d["cond_dim"]),
        )


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb


class _ResBlockT(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(torch.nn.functional.silu(temb))[:, :, None, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class _CrossAttention(nn.Module):
    """Voxel queries attend to covariate tokens."""

    def __init__(self, ch: int, ctx_dim: int):
        super().__init__()
        self.norm = _norm(ch)
        self.to_q = nn.Conv3d(ch, ch, 1)
        self.to_k = nn.Linear(ctx_dim, ch)
        self.to_v = nn.Linear(ctx_dim, ch)
        self.proj = nn.Conv3d(ch, ch, 1)
        self.scale = ch**-0.5

    def forward(self, x, ctx):
        b, c, d, h, w = x.shape
        q = self.to_q(self.norm(x)).reshape(b, c, -1).transpose(1, 2)  # (B, N, C)
        k = self.to_k(ctx)  # (B, n_tok, C)
        v = self.to_v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, d, h, w)
        return x + self.proj(out)


class _CondTokens(nn.Module):
    """Lift the dense conditioning vector into per-entry tokens."""

    def __init__(self, cond_dim: int, ctx_dim: int):
        super().__init__()
        self.value = nn.Linear(1, ctx_dim)
        self.position = nn.Parameter(torch.randn(cond_dim, ctx_dim) * 0.02)

    def forward(self, cond):
        return self.value(cond[..., None]) + self.position[None]


class CondUNet3D(nn.Module):
    def __init__(self, desc: DenoiserDescriptor):
        super().__init__()
        self.desc = desc
        chs = desc.channels
        c_in = desc.latent_shape[0]

        self.tokens = _CondTokens(desc.cond_dim, desc.ctx_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(desc.time_dim, 4 * desc.time_dim),
            nn.SiLU(),
            nn.Linear(4 * desc.time_dim, desc.time_dim),
        )
        self.in_conv = nn.Conv3d(c_in, chs[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i, ch in enumerate(chs):
            self.down_res.append(_ResBlockT(ch, ch, desc.time_dim))
            self.down_attn.append(
                _CrossAttention(ch, desc.ctx_dim) if i in desc.attn_levels else nn.Identity()
            )
            if i + 1 < len(chs):
                self.downsample.append(nn.Conv3d(ch, chs[i + 1], 2, stride=2))

        self.mid1 = _ResBlockT(chs[-1], chs[-1], desc.time_dim)
        self.mid_attn = _CrossAttention(chs[-1], desc.ctx_dim)
        self.mid2 = _ResBlockT(chs[-1], chs[-1], desc.time_dim)

        self.up_res = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.up_res.append(_ResBlockT(2 * chs[i], chs[i], desc.time_dim))
            if i > 0:
                self.upsample.append(nn.ConvTranspose3d(chs[i], chs[i - 1], 2, stride=2))

        out_conv = nn.Conv3d(chs[0], c_in, 3, padding=1)
        nn.init.zeros_(out_conv.weight)  # start from the zero prediction
        nn.init.zeros_(out_conv.bias)
        self.out = nn.Sequential(_norm(chs[0]), nn.SiLU(), out_conv)

    def forward(self, z, t, cond, control=None):
        """control, when given, is (skip_residuals: list per level, mid_residual)."""
        temb = self.time_mlp(sinusoidal_embedding(t, self.desc.time_dim).to(z.dtype))
        ctx = self.tokens(cond)

        h = self.in_conv(z)
        skips = []
        for i in range(len(self.desc.channels)):
            h = self.down_res[i](h, temb)
            attn = self.down_attn[i]
            h = attn(h, ctx) if isinstance(attn, _CrossAttention) else h
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        h = self.mid1(h, temb)
        h = self.mid_attn(h, ctx)
        h = self.mid2(h, temb)
        if control is not None:
            h = h + control[1]

        for j, i in enumerate(reversed(range(len(self.desc.channels)))):
            skip = skips[i]
            if control is not None:
                skip = skip + control[0][i]
            h = self.up_res[j](torch.cat([h, skip], dim=1), temb)
            if i > 0:
                h = self.upsample[j](h)
        return self.out(h)


@dataclass
class DenoiserParams:
    """Trained noise-predictor weights plus diffusion-space metadata."""

    module: CondUNet3D
    descriptor: DenoiserDescriptor
    T: int = 1000
    latent_scale: float = 1.0
    history: list[tuple[int, float]] = field(default_factory=list)

    def to_blob(self) -> CheckpointBlob:
        return CheckpointBlob(
            kind="denoiser",
            descriptor=self.descriptor.to_dict(),
            extra={
                "T": self.T,
                "latent_scale": self.latent_scale,
                "cond_layout_version": COND_LAYOUT_VERSION,
            },
            tensors=state_dict_to_tensors(self.module.state_dict()),
        )

    def content_hash(self) -> str:
        return checkpoint_content_hash(self.to_blob())

    @staticmethod
    def from_blob(blob: CheckpointBlob) -> "DenoiserParams":
        if blob.extra.get("cond_layout_version") != COND_LAYOUT_VERSION:
            raise ValueError(
                f"checkpoint uses conditioning layout "
                f"v{blob.extra.get('cond_layout_version')}, code expects v{COND_LAYOUT_VERSION}"
            )
        desc = DenoiserDescriptor.from_dict(blob.descriptor)
        module = CondUNet3D(desc)
        module.load_state_dict({k: torch.from_numpy(v) for k, v in blob.tensors.items()})
        module.eval()
        return DenoiserParams(
            module=module,
            descriptor=desc,
            T=int(blob.extra["T"]),
            latent_scale=float(blob.extra["latent_scale"]),
        )


def init_denoiser(descriptor: DenoiserDescriptor, seed: int, T: int = 1000) -> DenoiserParams:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = CondUNet3D(descriptor)
    return DenoiserParams(module=module, descriptor=descriptor, T=T)


def denoise(params: DenoiserParams, z_t: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
    """Noise estimate for a single diffusion-space latent (C, D, H, W)."""
    if tuple(z_t.shape) != tuple(params.descriptor.latent_shape):
        raise ValueError(
            f"latent shape {tuple(z_t.shape)} != trained shape {params.descriptor.latent_shape}"
        )
    if not (1 <= t <= params.T):
        raise ValueError(f"timestep {t} outside [1, {params.T}]")
    if cond.shape != (params.descriptor.cond_dim,):
        raise ValueError(f"conditioning vector must have shape ({params.descriptor.cond_dim},)")
    params.module.eval()
    with torch.no_grad():
        out = params.module(
            torch.from_numpy(np.ascontiguousarray(z_t, dtype=np.float32))[None],
            torch.tensor([t], dtype=torch.float32),
            torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float32))[None],
        )
    return out[0].numpy()


@dataclass(frozen=True)
class LdmTrainConfig:
    iterations: int = 4000
    batch_size: int = 16
    lr: float = 2.5e-5
    log_every: int = 100


def _probe_loss(module, latents_t, conds_t, sched, T, seed) -> float:
    """Deterministic loss probe on a fixed noising of the first samples."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    n = min(16, len(latents_t))
    idx = rng.integers(0, len(latents_t), size=n)
    zs, ts, eps = [], [], []
    for i in idx:
        t = int(rng.integers(1, T + 1))
        e = torch.randn(latents_t[int(i)].shape, generator=gen)
        zs.append(forward_marginal(latents_t[int(i)], t, e, sched))
        ts.append(t)
        eps.append(e)
    with torch.no_grad():
        pred = module(
            torch.stack(zs), torch.tensor(ts, dtype=torch.float32), conds_t[np.asarray(idx)]
        )
        return float(noise_loss(torch.stack(eps), pred))


def train_ldm(
    params: DenoiserParams,
    dataset: list[tuple[LatentGrid, Covariates]],
    sched: NoiseSchedule,
    cfg: LdmTrainConfig,
    seed: int,
) -> DenoiserParams:
    """Noise-prediction training over encoded latents with covariates."""
    if not dataset:
        raise ValueError("empty training dataset")
    module = params.module
    T = sched.T

    values = np.concatenate([z.data.ravel() for z, _ in dataset])
    scale = 1.0 / max(float(values.std()), 1e-8)
    params.latent_scale = scale

    latents_t = [
        torch.from_numpy(z.data.astype(np.float32)) * scale for z, _ in dataset
    ]
    conds_t = torch.from_numpy(
        np.stack([embed_covariates(c) for _, c in dataset]).astype(np.float32)
    )

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(module.parameters(), lr=cfg.lr)

    init_probe = _probe_loss(module, latents_t, conds_t, sched, T, seed + 2)
    history: list[tuple[int, float]] = [(0, init_probe)]

    module.train()
    for step in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(latents_t), size=cfg.batch_size)
        zs, ts, eps = [], [], []
        for i in idx:
            t = int(rng.integers(1, T + 1))
            e = torch.randn(latents_t[int(i)].shape, generator=gen)
            zs.append(forward_marginal(latents_t[int(i)], t, e, sched))
            ts.append(t)
            eps.append(e)
        pred = module(
            torch.stack(zs), torch.tensor(ts, dtype=torch.float32), conds_t[np.asarray(idx)]
        )
        loss = noise_loss(torch.stack(eps), pred)
        if not torch.isfinite(loss):
            raise NumericError(f"LDM training diverged at step {step} (loss NaN)")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.iterations:
            history.append((step, float(loss.detach())))

    module.eval()
    final_probe = _probe_loss(module, latents_t, conds_t, sched, T, seed + 2)
    history.append((cfg.iterations, final_probe))
    if not (final_probe < init_probe):
        raise NumericError(
            f"LDM training did not reduce the probe loss ({final_probe:.6f} vs {init_probe:.6f})"
        )
    params.history = history
    params.T = T
    return params
