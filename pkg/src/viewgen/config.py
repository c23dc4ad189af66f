"""Run configuration: ``key = value`` lines grouped under ``[section]`` headers.

Every tunable of the pipeline lives in one of the sections below.  Unknown
sections or keys are rejected with a message naming them, and values are
coerced to the type of the default.  Seeds are deliberately absent: all
randomness flows from the command-line seed through ``stage_seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .codec import CodecConfig
from .model import ModelConfig, TrainConfig
from .sampling import SamplerConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """A configuration file is malformed or names an unknown key."""


@dataclass
class DataSection:
    n_train: int = 2000
    n_test: int = 200
    image_side: int = 16
    omission_prob: float = 0.3
    view_weights: tuple[float, ...] = (0.5, 0.4, 0.1)
    jitter: float = 0.03


@dataclass
class CodecSection:
    codebook_size: int = 32
    code_dim: int = 16
    downsample: int = 4
    channels: tuple[int, ...] = (16, 32)
    disc_channels: tuple[int, ...] = (16, 32)
    beta: float = 0.25
    gan_weight: float = 0.1
    feature_weight: float = 1.0
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 16
    train_images: int = 512  # random subset of training images; 0 uses all


@dataclass
class BpeSection:
    vocab_size: int = 512  # byte tokens plus merges; three specials are added on top
    min_frequency: int = 2


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    text_len: int = 30
    max_views: int = 3
    attention: str = "favor"
    n_features: int = 0
    attn_eps: float = 1e-6
    init_std: float = 0.02


@dataclass
class TrainSection:
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    epochs: int = 12
    max_steps: int = 0
    batch_size: int = 16
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0


@dataclass
class SamplerSection:
    top_p: float = 0.9
    temperature: float = 0.7


@dataclass
class EvalSection:
    conditions: tuple[str, ...] = ("report-only", "report+1view", "1view", "2view")
    resamples: int = 1000
    alpha: float = 0.05
    sample_figures: int = 8


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    bpe: BpeSection = field(default_factory=BpeSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived component configs ------------------------------------------------------

    def codec_config(self, seed: int) -> CodecConfig:
        c = self.codec
        return CodecConfig(codebook_size=c.codebook_size, code_dim=c.code_dim, downsample=c.downsample,
                           channels=tuple(c.channels), disc_channels=tuple(c.disc_channels),
                           image_side=self.data.image_side, beta=c.beta, gan_weight=c.gan_weight,
                           feature_weight=c.feature_weight, lr=c.lr, steps=c.steps,
                           batch_size=c.batch_size, seed=seed)

    def model_config(self, text_vocab: int, seed: int) -> ModelConfig:
        m = self.model
        grid = self.data.image_side // self.codec.downsample
        return ModelConfig(text_vocab=text_vocab, codebook_size=self.codec.codebook_size, grid=grid,
                           text_len=m.text_len, max_views=m.max_views, d_model=m.d_model,
                           n_layers=m.n_layers, n_heads=m.n_heads, mlp_ratio=m.mlp_ratio,
                           attention=m.attention, n_features=m.n_features, feature_seed=seed,
                           attn_eps=m.attn_eps, init_std=m.init_std, seed=seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train), seed=seed)

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(p=self.sampler.top_p, temperature=self.sampler.temperature, seed=seed)

    def validate(self) -> None:
        """Build every component config once so that bad values surface as ConfigError."""
        try:
            self.codec_config(0)
            self.model_config(self.bpe.vocab_size + 3, 0)
            self.train_config(0)
            self.sampler_config(0)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.bpe.vocab_size < 256:
            raise ConfigError("bpe.vocab_size must be at least 256 (the byte alphabet)")
        if len(self.data.view_weights) != 3:
            raise ConfigError("data.view_weights needs three weights (1, 2 and 3 views)")
        if self.data.n_train < 1 or self.data.n_test < 0:
            raise ConfigError("data.n_train must be positive and data.n_test non-negative")
        from .evaluation import ALL_CONDITIONS

        bad = [c for c in self.eval.conditions if c not in ALL_CONDITIONS]
        if bad:
            raise ConfigError(f"eval.conditions: unknown condition(s) {bad}")

    # -- serialisation --------------------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for f in fields(getattr(self, sec.name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, sec.name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(default, text: str, where: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(float(t)) if kind is int and _is_integral(t) else kind(t) for t in items)
        if isinstance(default, int):
            if not _is_integral(text):
                raise ValueError(text)
            return int(float(text))
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type(default).__name__}") from None


def _is_integral(text: str) -> bool:
    try:
        value = float(text)
    except ValueError:
        return False
    return value.is_integer()


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from err
    cfg = RunConfig()
    known = {f.name for f in fields(cfg)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
        section = getattr(cfg, name)
        keys = {f.name: f for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            setattr(section, key, _coerce(getattr(section, key), raw, f"{source}: {name}.{key}"))
    if parser.defaults():
        raise ConfigError(f"{source}: keys outside any section: {sorted(parser.defaults())}")
    cfg.validate()
    return cfg


def load(path: str | Path | None) -> RunConfig:
    """Load a file, or a packaged preset by name (``desk`` or ``paper``); None means defaults."""
    if path is None:
        return RunConfig()
    if str(path) in PRESETS:
        return loads(preset_text(str(path)), f"{path}.cfg")
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {p}: {err.strerror}") from err
    return loads(text, str(p))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"no preset named {name!r}; choose from {PRESETS}")
    return resources.files("viewgen").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")


def stage_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed per pipeline stage, derived from the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])
