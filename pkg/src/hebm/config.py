"""Flat JSON run configuration.  Unknown keys are rejected so a config
file plus a seed pins a run exactly."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # model
    dims: list = field(default_factory=lambda: [8, 4, 2])  # bottom -> top
    hidden: int = 64
    inference_hidden: int = 0  # 0 = same as hidden
    energy_hidden: int = 32
    obs_model: str = "gaussian"
    # diffusion / Langevin
    T: int = 3
    alpha_bar_T: float = 0.01
    K: int = 50
    step_a: float = 0.05
    temperature: float = 1.0
    # optimization
    lr: float = 1e-3
    ebm_lr: float = 2e-3
    batch: int = 128
    gen_iters: int = 2000
    ebm_iters: int = 600
    ce_weight: float = 1.0
    # dataset
    data_kind: str = "pinwheel"
    data_size: int = 4000
    data_noise: float = 0.1
    data_labels: int = 0
    data_path: str = ""

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = set(cls().__dict__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if len(self.dims) < 2:
            raise ConfigError("dims needs at least 2 latent layers")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0.0 < self.alpha_bar_T < 1.0:
            raise ConfigError("alpha_bar_T must lie in (0, 1)")
        if self.K < 1 or self.step_a <= 0:
            raise ConfigError("K must be >= 1 and step_a > 0")
        if self.obs_model not in ("gaussian", "bernoulli"):
            raise ConfigError(f"unknown obs_model {self.obs_model!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def thread_cap() -> int:
    """HEBM_THREADS caps parallelism; 0 = auto.  The current implementation
    is single-process, so this only validates the setting."""
    raw = os.environ.get("HEBM_THREADS", "0")
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"HEBM_THREADS must be an integer, got {raw!r}")
    if val < 0:
        raise ConfigError("HEBM_THREADS must be >= 0")
    return val
