"""Run configuration: nested dataclasses with strict JSON (de)serialization.

Unknown keys are rejected, missing keys take the defaults below. Defaults
are the desk-scale preset (64x64 images, half-width networks) with the
latent sizes and category counts used for Textured Multi-dSprites.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 64
    z_fg: int = 256
    z_bg: int = 4
    z_pix: int = 1024
    k_fg: int = 30
    k_bg: int = 10
    ebm_hidden: int = 200
    ebm_slope: float = 0.2
    gen_base_channels: int = 64
    gen_channels: tuple = (512, 256, 128, 64)
    gen_slope: float = 0.01
    cls_channels: tuple = (32, 64, 128, 256)
    cls_slope: float = 0.2

    def validate(self):
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 8, got {self.image_size}")
        n_blocks = (self.image_size // 4).bit_length() - 1
        if len(self.gen_channels) != n_blocks:
            raise ConfigurationError(
                f"gen_channels needs {n_blocks} entries for image_size {self.image_size}, "
                f"got {len(self.gen_channels)}"
            )
        if len(self.cls_channels) != n_blocks:
            raise ConfigurationError(
                f"cls_channels needs {n_blocks} entries for image_size {self.image_size}, "
                f"got {len(self.cls_channels)}"
            )
        if min(self.z_fg, self.z_bg, self.z_pix) < 1:
            raise ConfigurationError("latent dimensions must be positive")
        if self.k_fg < 2 or self.k_bg < 2:
            raise ConfigurationError("symbolic category counts must be >= 2")


@dataclass
class ReconConfig:
    sigma: float = 0.3
    norm: str = "l1"
    epsilon: float = 1e-8

    def validate(self):
        if self.sigma <= 0 or self.epsilon <= 0:
            raise ConfigurationError("sigma and epsilon must be positive")
        if self.norm not in ("l1", "l2"):
            raise ConfigurationError(f"recon norm must be 'l1' or 'l2', got {self.norm!r}")


@dataclass
class LangevinConfig:
    # step sizes are stored as the noise scale delta; the Langevin step is delta**2 / 2
    prior_steps: int = 60
    posterior_steps: int = 40
    prior_delta: float = 0.4
    posterior_delta: float = 0.1
    test_steps: int = 500
    noise: bool = True
    divergence_bound: float = 1e3

    def validate(self):
        if min(self.prior_steps, self.posterior_steps, self.test_steps) < 0:
            raise ConfigurationError("Langevin step counts must be >= 0")
        if self.prior_delta <= 0 or self.posterior_delta <= 0:
            raise ConfigurationError("Langevin step sizes must be > 0")


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 16
    lr_generators: float = 1e-4
    lr_ebm: float = 2e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_pseudo: float = 0.1
    weight_tv: float = 0.01
    weight_ortho: float = 1.0
    # "pixel_mean" divides the generator-loss TV term by H*W so it keeps the
    # same ratio to the likelihood terms as in the posterior objective
    tv_reduction: str = "pixel_mean"
    disable_reassignment: bool = False
    disable_pseudo: bool = False
    disable_tv: bool = False
    disable_ortho: bool = False
    short_run_chains: bool = False
    checkpoint_every: int = 500
    keep_checkpoints: int = 3
    strict_deterministic: bool = True
    dtype: str = "float32"

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch_size >= 1")
        if self.lr_generators < 0 or self.lr_ebm < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if min(self.weight_pseudo, self.weight_tv, self.weight_ortho) < 0:
            raise ConfigurationError("regularizer weights must be >= 0")
        if self.tv_reduction not in ("pixel_mean", "sum"):
            raise ConfigurationError(f"unknown tv_reduction {self.tv_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.checkpoint_every < 1 or self.keep_checkpoints < 1:
            raise ConfigurationError("checkpoint_every and keep_checkpoints must be >= 1")

    @property
    def effective_weight_tv(self):
        return 0.0 if self.disable_tv else self.weight_tv

    @property
    def effective_weight_pseudo(self):
        return 0.0 if self.disable_pseudo else self.weight_pseudo

    @property
    def effective_weight_ortho(self):
        return 0.0 if self.disable_ortho else self.weight_ortho


@dataclass
class DataConfig:
    resolution: int = 64
    n_textures: int = 20
    texture_bank_seed: int = 0
    freq_range: tuple = (2.0, 8.0)
    sprite_count_range: tuple = (2, 3)
    scale_range: tuple = (0.1, 0.25)
    max_tries: int = 1000

    def validate(self):
        lo, hi = self.sprite_count_range
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad sprite_count_range {self.sprite_count_range}")
        slo, shi = self.scale_range
        if not 0 < slo <= shi < 1:
            raise ConfigurationError(f"bad scale_range {self.scale_range}")
        if self.n_textures < 1 or self.resolution < 4:
            raise ConfigurationError("n_textures must be >= 1 and resolution >= 4")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    permute: bool = False

    def validate(self):
        if not 0 <= self.threshold < 1:
            raise ConfigurationError(f"threshold must lie in [0, 1), got {self.threshold}")


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {self.version}")
        for section in (self.model, self.recon, self.langevin, self.train, self.data, self.eval):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Return a copy with per-section overrides, e.g. ``train={"iterations": 2}``."""
        d = self.to_dict()
        for name, values in sections.items():
            if isinstance(values, dict):
                d[name].update(values)
            else:
                d[name] = values
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d, "config").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default
        if default is dataclasses.MISSING:
            default = fields[name].default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"{where}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}.{name}: expected a number")
        elif isinstance(default, float):
            kwargs[name] = float(value)
        elif isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigurationError(f"{where}.{name}: expected an integer")
            kwargs[name] = int(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
