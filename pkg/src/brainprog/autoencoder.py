"""Volume <-> latent autoencoder.

A small 3D conv VAE: the encoder emits a posterior mean and log-variance,
training samples the posterior, and `encode` returns the mean so the
deployed mapping is deterministic. Inputs are symmetrically zero-padded up
to a multiple of 2*factor per axis (so the deepest feature map keeps even
dims) and decoding crops back; with factor 8 this maps 122x146x122 volumes
to 16x20x16 latent grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoints import CheckpointBlob, checkpoint_content_hash, state_dict_to_tensors
from .errors import NumericError
from .grids import LatentGrid, VolumeGrid


@dataclass(frozen=True)
class AeDescriptor:
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    factor: int = 8
    latent_channels: int = 3
    base_channels: int = 16

    def __post_init__(self):
        if self.factor < 2 or (self.factor & (self.factor - 1)) != 0:
            raise ValueError(f"factor must be a power of two >= 2, got {self.factor}")
        if any(n < 4 for n in self.volume_shape):
            raise ValueError(f"volume dims must be >= 4, got {self.volume_shape}")

    @property
    def n_levels(self) -> int:
        return int(math.log2(self.factor))

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        m = 2 * self.factor
        return tuple(int(math.ceil(n / m)) * m for n in self.volume_shape)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels,) + tuple(n // self.factor for n in self.padded_shape)

    def to_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "spacing_mm": list(self.spacing_mm),
            "factor": self.factor,
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "AeDescriptor":
        return AeDescriptor(
            volume_shape=tuple(d["volume_shape"]),
            spacing_mm=tuple(d["spacing_mm"]),
            factor=int(d["factor"]),
            latent_channels=int(d["latent_channels"]),
            base_channels=int(d["base_channels"]),
        )


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            _norm(ch), nn.SiLU(), nn.Conv3d(ch, ch, 3, padding=1),
            _norm(ch), nn.SiLU(), nn.Conv3d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class VolumeAutoencoder(nn.Module):
    """Strided-conv encoder / transposed-conv decoder.

    Each level downsamples first and runs its residual block at the reduced
    resolution, which keeps full-resolution compute to a single conv at
    either end (the dominant cost for CPU training).
    """

    def __init__(self, desc: AeDescriptor):
        super().__init__()
        self.desc = desc
        chs = [desc.base_channels * min(2**i, 4) for i in range(desc.n_levels)]

        enc = []
        prev = 1
        for ch in chs:
            enc.append(nn.Conv3d(prev, ch, 3, stride=2, padding=1))
            enc.append(_ResBlock(ch))
            prev = ch
        enc += [_norm(chs[-1]), nn.SiLU(), nn.Conv3d(chs[-1], 2 * desc.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv3d(desc.latent_channels, chs[-1], 3, padding=1)]
        for i in reversed(range(len(chs))):
            dec.append(_ResBlock(chs[i]))
            prev = chs[i - 1] if i > 0 else max(chs[0] // 2, 4)
            dec.append(nn.ConvTranspose3d(chs[i], prev, 2, stride=2))
        dec += [_norm(prev), nn.SiLU(), nn.Conv3d(prev, 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder(x)
        c = self.desc.latent_channels
        return out[:, :c], out[:, c:]

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


@dataclass
class AutoencoderParams:
    """Trained weights plus the architecture descriptor they assume."""

    module: VolumeAutoencoder
    descriptor: AeDescriptor
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def to_blob(self) -> CheckpointBlob:
        return CheckpointBlob(
            kind="autoencoder",
            descriptor=self.descriptor.to_dict(),
            extra={},
            tensors=state_dict_to_tensors(self.module.state_dict()),
        )

    def content_hash(self) -> str:
        return checkpoint_content_hash(self.to_blob())

    @staticmethod
    def from_blob(blob: CheckpointBlob) -> "AutoencoderParams":
        desc = AeDescriptor.from_dict(blob.descriptor)
        module = VolumeAutoencoder(desc)
        module.load_state_dict(
            {name: torch.from_numpy(arr) for name, arr in blob.tensors.items()}
        )
        module.eval()
        return AutoencoderParams(module=module, descriptor=desc)


def _pad_amounts(desc: AeDescriptor) -> list[tuple[int, int]]:
    pads = []
    for n, p in zip(desc.volume_shape, desc.padded_shape):
        extra = p - n
        pads.append((extra // 2, extra - extra // 2))
    return pads


def _to_padded_tensor(desc: AeDescriptor, x: VolumeGrid) -> torch.Tensor:
    if tuple(x.shape) != tuple(desc.volume_shape):
        raise ValueError(f"volume shape {x.shape} != descriptor shape {desc.volume_shape}")
    arr = np.pad(x.data.astype(np.float32), _pad_amounts(desc))
    return torch.from_numpy(arr)[None, None]


def encode(params: AutoencoderParams, x: VolumeGrid) -> LatentGrid:
    """Posterior mean of the input volume; deterministic given params."""
    params.module.eval()
    with torch.no_grad():
        mean, _ = params.module.encode_stats(_to_padded_tensor(params.descriptor, x))
    return LatentGrid(data=mean[0].numpy())


def decode(params: AutoencoderParams, z: LatentGrid) -> VolumeGrid:
    """Decode a latent back to a volume, cropped and clamped to [0, 1]."""
    desc = params.descriptor
    if tuple(z.shape) != tuple(desc.latent_shape):
        raise ValueError(f"latent shape {z.shape} != descriptor latent {desc.latent_shape}")
    params.module.eval()
    with torch.no_grad():
        out = params.module.decode_raw(torch.from_numpy(z.data.astype(np.float32))[None])
    arr = out[0, 0].numpy()
    crops = [(lo, lo + n) for (lo, _), n in zip(_pad_amounts(desc), desc.volume_shape)]
    arr = arr[crops[0][0] : crops[0][1], crops[1][0] : crops[1][1], crops[2][0] : crops[2][1]]
    return VolumeGrid(data=np.clip(arr, 0.0, 1.0), spacing_mm=desc.spacing_mm)


@dataclass(frozen=True)
class AeTrainConfig:
    iterations: int = 1500
    batch_size: int = 8
    lr: float = 1e-4
    kl_weight: float = 1e-6
    val_fraction: float = 0.1
    val_every: int = 50


def train_autoencoder(
    volumes: list[VolumeGrid],
    cfg: AeTrainConfig,
    seed: int,
    descriptor: AeDescriptor | None = None,
) -> AutoencoderParams:
    """Train from scratch on a volume list; returns best-validation params.

    Loss is L1 reconstruction plus a small KL-style latent regularizer.
    Raises NumericError on divergence or if validation loss fails to improve
    over the initial weights.
    """
    if len(volumes) < 2:
        raise ValueError("need >= 2 volumes to form a train/validation split")
    if descriptor is None:
        first = volumes[0]
        descriptor = AeDescriptor(volume_shape=first.shape, spacing_mm=first.spacing_mm)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(volumes))
    n_val = max(1, int(round(cfg.val_fraction * len(volumes))))
    if n_val >= len(volumes):
        n_val = len(volumes) - 1
    val_idx, train_idx = order[:n_val], order[n_val:]

    tensors = torch.stack(
        [_to_padded_tensor(descriptor, v)[0] for v in volumes]
    )  # (N, 1, D, H, W)
    train_x, val_x = tensors[train_idx], tensors[val_idx]

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = VolumeAutoencoder(descriptor)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)

    def val_loss() -> float:
        module.eval()
        with torch.no_grad():
            mean, _ = module.encode_stats(val_x)
            recon = module.decode_raw(mean)
            return float(torch.mean(torch.abs(recon - val_x)))

    init_val = val_loss()
    best_val, best_state = init_val, {k: v.clone() for k, v in module.state_dict().items()}
    history: list[tuple[int, float, float]] = []

    module.train()
    for step in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(train_x), size=cfg.batch_size)
        batch = train_x[np.asarray(idx)]
        mean, logvar = module.encode_stats(batch)
        eps = torch.randn(mean.shape, generator=gen)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = module.decode_raw(z)
        rec_loss = torch.mean(torch.abs(recon - batch))
        kl = 0.5 * torch.mean(mean**2 + torch.exp(logvar) - 1.0 - logvar)
        loss = rec_loss + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericError(f"autoencoder training diverged at step {step} (loss NaN)")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.val_every == 0 or step == cfg.iterations:
            v = val_loss()
            history.append((step, float(loss.detach()), v))
            if v < best_val:
                best_val = v
                best_state = {k: t.clone() for k, t in module.state_dict().items()}
            module.train()

    if not (best_val < init_val):
        raise NumericError(
            f"autoencoder training did not improve validation loss "
            f"({best_val:.6f} vs initial {init_val:.6f})"
        )
    module.load_state_dict(best_state)
    module.eval()
    return AutoencoderParams(module=module, descriptor=descriptor, history=history)
