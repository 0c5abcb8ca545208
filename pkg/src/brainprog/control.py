"""Control module: conditioning generation on a subject's own latent.

A trainable copy of the denoiser's encoder path processes the noisy latent
plus a "hint" built from the subject's source latent concatenated with a
constant source-age channel (age / 100). Zero-initialized 1x1x1 connector
convolutions feed the copy's features into the frozen base UNet's decoder,
so at initialization the controlled prediction equals the plain one
exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoints import CheckpointBlob, checkpoint_content_hash, state_dict_to_tensors
from .covariates import COND_LAYOUT_VERSION, Covariates, embed_covariates
from .denoiser import CondUNet3D, DenoiserDescriptor, DenoiserParams, sinusoidal_embedding
from .diffusion import NoiseSchedule, forward_marginal, noise_loss
from .errors import NumericError
from .grids import LatentGrid


@dataclass(frozen=True)
class ControlContext:
    """The subject's source latent and the age it was acquired at."""

    source_latent: LatentGrid
    source_age_years: float


class ControlNetModule(nn.Module):
    """Trainable encoder copy + hint path + zero connectors."""

    def __init__(self, base: CondUNet3D):
        super().__init__()
        desc = base.desc
        self.desc = desc
        chs = desc.channels

        self.tokens = copy.deepcopy(base.tokens)
        self.time_mlp = copy.deepcopy(base.time_mlp)
        self.in_conv = copy.deepcopy(base.in_conv)
        self.down_res = copy.deepcopy(base.down_res)
        self.down_attn = copy.deepcopy(base.down_attn)
        self.downsample = copy.deepcopy(base.downsample)
        self.mid1 = copy.deepcopy(base.mid1)
        self.mid_attn = copy.deepcopy(base.mid_attn)
        self.mid2 = copy.deepcopy(base.mid2)

        self.hint_conv = nn.Conv3d(desc.latent_shape[0] + 1, chs[0], 3, padding=1)

        self.skip_connectors = nn.ModuleList(nn.Conv3d(ch, ch, 1) for ch in chs)
        self.mid_connector = nn.Conv3d(chs[-1], chs[-1], 1)
        for conv in list(self.skip_connectors) + [self.mid_connector]:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, z, t, cond, hint):
        from .denoiser import _CrossAttention  # local: avoid import cycle at module top

        temb = self.time_mlp(sinusoidal_embedding(t, self.desc.time_dim).to(z.dtype))
        ctx = self.tokens(cond)
        h = self.in_conv(z) + self.hint_conv(hint)
        skip_res = []
        for i in range(len(self.desc.channels)):
            h = self.down_res[i](h, temb)
            attn = self.down_attn[i]
            h = attn(h, ctx) if isinstance(attn, _CrossAttention) else h
            skip_res.append(self.skip_connectors[i](h))
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h, ctx)
        h = self.mid2(h, temb)
        return skip_res, self.mid_connector(h)


@dataclass
class ControlParams:
    """Control weights plus the hash of the base weights they were trained with."""

    module: ControlNetModule
    descriptor: DenoiserDescriptor
    theta_hash: str = ""
    history: list[tuple[int, float]] = field(default_factory=list)

    def to_blob(self) -> CheckpointBlob:
        return CheckpointBlob(
            kind="controlnet",
            descriptor=self.descriptor.to_dict(),
            extra={"theta_hash": self.theta_hash, "cond_layout_version": COND_LAYOUT_VERSION},
            tensors=state_dict_to_tensors(self.module.state_dict()),
        )

    def content_hash(self) -> str:
        return checkpoint_content_hash(self.to_blob())

    @staticmethod
    def from_blob(blob: CheckpointBlob) -> "ControlParams":
        desc = DenoiserDescriptor.from_dict(blob.descriptor)
        module = ControlNetModule(CondUNet3D(desc))
        module.load_state_dict({k: torch.from_numpy(v) for k, v in blob.tensors.items()})
        module.eval()
        return ControlParams(
            module=module, descriptor=desc, theta_hash=str(blob.extra["theta_hash"])
        )


def init_controlnet(theta: DenoiserParams) -> ControlParams:
    """Fresh control module copied from (and bound to) the given base weights."""
    module = ControlNetModule(theta.module)
    return ControlParams(module=module, descriptor=theta.descriptor, theta_hash=theta.content_hash())


def _hint_tensor(theta: DenoiserParams, ctx: ControlContext) -> torch.Tensor:
    z_a = ctx.source_latent.data.astype(np.float32) * theta.latent_scale
    age_channel = np.full((1,) + z_a.shape[1:], ctx.source_age_years / 100.0, dtype=np.float32)
    return torch.from_numpy(np.concatenate([z_a, age_channel], axis=0))[None]


def controlled_denoise(
    theta: DenoiserParams,
    phi: ControlParams,
    z_t: np.ndarray,
    t: int,
    cond: np.ndarray,
    ctx: ControlContext,
) -> np.ndarray:
    """Noise estimate for z_t under both covariate and anatomy conditioning."""
    if tuple(ctx.source_latent.shape) != tuple(theta.descriptor.latent_shape):
        raise ValueError(
            f"source latent shape {ctx.source_latent.shape} != model latent "
            f"{theta.descriptor.latent_shape}"
        )
    if tuple(z_t.shape) != tuple(theta.descriptor.latent_shape):
        raise ValueError(f"latent shape {tuple(z_t.shape)} != {theta.descriptor.latent_shape}")
    if not (1 <= t <= theta.T):
        raise ValueError(f"timestep {t} outside [1, {theta.T}]")

    theta.module.eval()
    phi.module.eval()
    z = torch.from_numpy(np.ascontiguousarray(z_t, dtype=np.float32))[None]
    tt = torch.tensor([t], dtype=torch.float32)
    cc = torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float32))[None]
    with torch.no_grad():
        residuals = phi.module(z, tt, cc, _hint_tensor(theta, ctx))
        out = theta.module(z, tt, cc, control=residuals)
    return out[0].numpy()


@dataclass(frozen=True)
class VisitPair:
    """Same-subject latent pair with the follow-up's ground-truth covariates."""

    z_a: LatentGrid
    age_a: float
    z_b: LatentGrid
    cov_b: Covariates

    def __post_init__(self):
        if self.age_a >= self.cov_b.age_years:
            raise ValueError(
                f"visit pair must have A < B, got A={self.age_a}, B={self.cov_b.age_years}"
            )


@dataclass(frozen=True)
class ControlTrainConfig:
    iterations: int = 4000
    batch_size: int = 16
    lr: float = 2.5e-5
    log_every: int = 100


def train_controlnet(
    theta: DenoiserParams,
    phi: ControlParams,
    pairs: list[VisitPair],
    sched: NoiseSchedule,
    cfg: ControlTrainConfig,
    seed: int,
) -> ControlParams:
    """Train the control weights on visit pairs; the base weights stay fixed."""
    if not pairs:
        raise ValueError("empty pair dataset")
    if phi.theta_hash != theta.content_hash():
        raise ValueError("control module was initialized against different base weights")

    T = sched.T
    scale = theta.latent_scale
    z_b = [torch.from_numpy(p.z_b.data.astype(np.float32)) * scale for p in pairs]
    hints = torch.cat(
        [_hint_tensor(theta, ControlContext(p.z_a, p.age_a)) for p in pairs], dim=0
    )
    conds = torch.from_numpy(
        np.stack([embed_covariates(p.cov_b) for p in pairs]).astype(np.float32)
    )

    frozen_flags = [p.requires_grad for p in theta.module.parameters()]
    theta.module.requires_grad_(False)
    theta.module.eval()

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(phi.module.parameters(), lr=cfg.lr)

    def probe_loss() -> float:
        prng = np.random.default_rng(seed + 2)
        pgen = torch.Generator().manual_seed(seed + 2)
        idx = prng.integers(0, len(pairs), size=16)
        zs, ts, eps = [], [], []
        for i in idx:
            t = int(prng.integers(1, T + 1))
            e = torch.randn(z_b[int(i)].shape, generator=pgen)
            zs.append(forward_marginal(z_b[int(i)], t, e, sched))
            ts.append(t)
            eps.append(e)
        phi.module.eval()
        with torch.no_grad():
            residuals = phi.module(
                torch.stack(zs), torch.tensor(ts, dtype=torch.float32),
                conds[np.asarray(idx)], hints[np.asarray(idx)],
            )
            pred = theta.module(
                torch.stack(zs), torch.tensor(ts, dtype=torch.float32),
                conds[np.asarray(idx)], control=residuals,
            )
            return float(noise_loss(torch.stack(eps), pred))

    init_probe = probe_loss()
    history: list[tuple[int, float]] = [(0, init_probe)]

    phi.module.train()
    try:
        for step in range(1, cfg.iterations + 1):
            idx = rng.integers(0, len(pairs), size=cfg.batch_size)
            zs, ts, eps = [], [], []
            for i in idx:
                t = int(rng.integers(1, T + 1))
                e = torch.randn(z_b[int(i)].shape, generator=gen)
                zs.append(forward_marginal(z_b[int(i)], t, e, sched))
                ts.append(t)
                eps.append(e)
            z_batch = torch.stack(zs)
            t_batch = torch.tensor(ts, dtype=torch.float32)
            c_batch = conds[np.asarray(idx)]
            residuals = phi.module(z_batch, t_batch, c_batch, hints[np.asarray(idx)])
            pred = theta.module(z_batch, t_batch, c_batch, control=residuals)
            loss = noise_loss(torch.stack(eps), pred)
            if not torch.isfinite(loss):
                raise NumericError(f"control training diverged at step {step} (loss NaN)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % cfg.log_every == 0 or step == cfg.iterations:
                history.append((step, float(loss.detach())))
    finally:
        for p, flag in zip(theta.module.parameters(), frozen_flags):
            p.requires_grad_(flag)

    phi.module.eval()
    final_probe = probe_loss()
    history.append((cfg.iterations, final_probe))
    if not (final_probe < init_probe):
        raise NumericError(
            f"control training did not reduce the probe loss "
            f"({final_probe:.6f} vs {init_probe:.6f})"
        )
    phi.history = history
    return phi
