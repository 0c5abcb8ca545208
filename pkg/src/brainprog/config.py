"""Run configuration: one sectioned key-value file drives every command.

Defaults carry the reference hyperparameters (T=1000, beta 0.0015->0.0205,
25 DDIM steps, m=64, 5000 trajectory-fit iterations, Huber delta 1.35);
experiment files override the desk-scale knobs. Unknown sections or keys
are rejected by name, and every command writes its fully resolved config
into the run directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 42),
        "output_root": (str, "runs"),
        "jobs": (int, 1),
    },
    "data": {
        "n_subjects": (int, 120),
        "visits_per_subject": (int, 3),
        "age_min": (float, 62.0),
        "age_max": (float, 72.0),
        "grid_size": (int, 32),
        "noise_std": (float, 0.01),
        "dynamics": (str, "linear"),
        "train_fraction": (float, 0.6),
    },
    "autoencoder": {
        "iterations": (int, 1500),
        "batch_size": (int, 8),
        "lr": (float, 1e-4),
        "kl_weight": (float, 1e-6),
        "val_fraction": (float, 0.1),
        "base_channels": (int, 16),
        "latent_channels": (int, 3),
        "factor": (int, 8),
    },
    "ldm": {
        "T": (int, 1000),
        "beta_start": (float, 0.0015),
        "beta_end": (float, 0.0205),
        "schedule": (str, "scaled_linear"),
        "iterations": (int, 4000),
        "batch_size": (int, 16),
        "lr": (float, 2.5e-5),
        "base_channels": (int, 32),
        "time_dim": (int, 64),
        "ctx_dim": (int, 32),
    },
    "controlnet": {
        "iterations": (int, 4000),
        "batch_size": (int, 16),
        "lr": (float, 2.5e-5),
    },
    "aux": {
        "huber_delta": (float, 1.35),
        "dcm_iterations": (int, 5000),
    },
    "inference": {
        "ddim_steps": (int, 25),
        "eta": (float, 0.0),
        "las_m": (int, 64),
        "mode": (str, "single"),
        "aux_mode": (str, "auto"),
    },
    "evaluation": {
        "ssim_window": (int, 7),
        "strata": (str, "all"),
        "select_sizes": (str, "10,20"),
        "horizon_years": (float, 2.0),
    },
}

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _cast(section: str, key: str, raw: str):
    typ, _ = SCHEMA[section][key]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}") from exc


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        merged = {
            sec: {k: default for k, (_, default) in keys.items()}
            for sec, keys in SCHEMA.items()
        }
        for sec, kv in self.values.items():
            merged[sec].update(kv)
        self.values = merged

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key: {section}.{key}")
        self.values[section][key] = value

    def write(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec in SCHEMA:
            cp[sec] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.values[sec].items()}
        with open(path, "w") as fh:
            cp.write(fh)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Parse the config file, apply section.key=value overrides, validate."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    values: dict[str, dict[str, object]] = {}

    if path is not None:
        read = cp.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        bad = []
        for sec in cp.sections():
            if sec not in SCHEMA:
                bad.append(sec)
                continue
            for key in cp[sec]:
                if key not in SCHEMA[sec]:
                    bad.append(f"{sec}.{key}")
        if bad:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(bad))}")
        for sec in cp.sections():
            values[sec] = {k: _cast(sec, k, cp[sec][k]) for k in cp[sec]}

    cfg = RunConfig(values=values)
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        target, raw = ov.split("=", 1)
        sec, key = target.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown configuration key: {sec}.{key}")
        cfg.set(sec, key, _cast(sec, key, raw))
    return cfg
