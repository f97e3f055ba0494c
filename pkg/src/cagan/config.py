"""Run configuration: profiles, overrides and the ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gan import DEFAULT_LOCAL_PLACEMENT, ModelVariant

PROFILES = ("desk", "smoke", "paper-cub", "paper-coco")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    variant: str = "se"
    r: int = 1
    lam: float = 0.1
    stage_h0: int = 16
    placement: tuple[str, ...] = ()
    nz: int = 100
    text_dim: int = 32
    base_channels: int = 32
    n_res: int = 2
    local_k: int = 3
    max_len: int = 12
    kl_weight: float = 1.0
    # GAN optimisation
    epochs: int = 8
    max_steps: int = 0
    batch: int = 20
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    ndf: int = 16
    n_power_iterations: int = 1
    # DAMSM pre-training
    damsm_epochs: int = 3
    damsm_max_steps: int = 0
    damsm_batch: int = 20
    damsm_lr: float = 0.001
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    # data
    n_train: int = 2000
    n_test: int = 400
    # evaluation
    evalnet_epochs: int = 8
    evalnet_lr: float = 0.001
    eval_every: int = 2
    eval_samples: int = 1000
    n_splits: int = 10
    data_dir: str = "data"

    @property
    def resolution(self) -> int:
        return 4 * self.stage_h0

    def model_variant(self) -> ModelVariant:
        return ModelVariant(self.variant, self.r, self.lam, self.stage_h0, self.placement)

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        try:
            self.model_variant()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.batch < 2 or self.damsm_batch < 2:
            raise ConfigError("batch sizes must be at least 2")
        if self.lr <= 0 or self.damsm_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if min(self.epochs, self.damsm_epochs, self.evalnet_epochs) < 0 or self.max_steps < 0:
            raise ConfigError("schedule lengths must be non-negative")
        if self.base_channels % self.r or (self.base_channels // 2) % self.r:
            raise ConfigError(f"r={self.r} must divide every generator channel count")
        if self.eval_samples % self.n_splits or self.eval_samples < 2 * self.n_splits:
            raise ConfigError("eval_samples must be a multiple of n_splits and at least 2 * n_splits")
        if self.text_dim % 2:
            raise ConfigError("text_dim must be even")
        return self

    # -- serialisation ------------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return dataclasses.replace(cls(), **parse_overrides(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_text(text).validate()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _TYPES.get(name)
    if kind is None:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {name}: {raw!r}") from err


def parse_overrides(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        if key == "lambda":
            key = "lam"
        out[key] = _coerce(key, value.strip())
    return out


def variant_defaults(profile: str, variant: str) -> dict:
    """r, lambda and local-attention placement for a variant under a profile."""
    local = variant == "l+se"
    coco = profile == "paper-coco"
    return {
        "r": 4 if local else 1,
        "lam": 50.0 if coco else (5.0 if local else 0.1),
        "placement": DEFAULT_LOCAL_PLACEMENT if local else (),
    }


_PROFILE_VALUES = {
    "desk": {},
    "smoke": dict(n_train=200, n_test=40, epochs=0, max_steps=200, batch=4, damsm_max_steps=200,
                  damsm_batch=8, damsm_epochs=100, evalnet_epochs=30, eval_every=1, eval_samples=100),
    "paper-cub": dict(stage_h0=64, text_dim=256, base_channels=64, max_len=18, epochs=600,
                      damsm_epochs=30, eval_every=10, eval_samples=30000),
    "paper-coco": dict(stage_h0=64, text_dim=256, base_channels=64, max_len=12, epochs=200,
                       damsm_epochs=30, eval_every=10, eval_samples=30000),
}


def resolve(profile: str = "desk", variant: str = "se", file_values: dict | None = None,
            overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then variant defaults, then config-file values, then explicit flags."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    values = {"profile": profile, "variant": variant}
    values.update(_PROFILE_VALUES[profile])
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    chosen = overrides.get("variant", file_values.get("variant", variant))
    if chosen not in ("se", "l+se"):
        raise ConfigError(f"unknown variant {chosen!r}")
    values.update(variant_defaults(profile, chosen))
    values.update(file_values)
    values.update(overrides)
    try:
        cfg = dataclasses.replace(RunConfig(), **values)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    return cfg.validate()
