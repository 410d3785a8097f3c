"""Dataclass configuration with YAML/JSON loading and strict validation.

Every knob the CLI exposes lives here.  Validation reports the dotted
path of the offending field so config errors are actionable; the CLI
maps ConfigurationError to exit code 2.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigurationError(ValueError):
    """A config value is missing, mistyped, or out of range."""


VARIANT_BASE_TAGS = ("sdtp", "fpn_baseline", "dilated_c5", "no_interaction")
ARF_MODES = ("softmax", "tanh", "arf")
POS_EMBED_MODES = ("sinusoidal", "learned", "none")
PRECISIONS = ("double", "single")


@dataclass
class ArfConfig:
    tau: float = 2.0
    mode: str = "arf"


@dataclass
class IspConfig:
    rates: tuple[int, ...] = (1, 3, 6)
    heads: int = 8
    pos_embed: str = "sinusoidal"
    blocks: int = 1


@dataclass
class CdiConfig:
    heads: int = 8
    lam: float = 0.01  # serialized as "lambda"
    levels: tuple[int, ...] = (2, 3, 4, 5)


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.1
    channels: int = 8
    base_hw: tuple[int, int] = (8, 8)
    levels: tuple[int, ...] = (4, 5)


@dataclass
class GradCheckConfig:
    points: int = 10
    tolerance: float = 1e-4
    step: float = 1e-5
    channels: int = 8
    base_hw: tuple[int, int] = (8, 8)
    levels: tuple[int, ...] = (4, 5)
    heads: int = 2


@dataclass
class ComplexityConfig:
    """Dims for the analytic attention-cost report; defaults are the
    standard detection setting (800x1344 input, strides 4/8/16/32, c=256)."""

    dims: tuple[tuple[int, int], ...] = ((200, 336), (100, 168), (50, 84), (25, 42))
    channels: int = 256
    strides: tuple[int, ...] = (8, 4, 2, 1)


@dataclass
class PipelineConfig:
    variant: str = "sdtp"
    seed: int = 0
    channels: int = 256
    in_channels: int = 256
    base_hw: tuple[int, int] = (64, 64)
    precision: str = "double"
    arf: ArfConfig = field(default_factory=ArfConfig)
    isp: IspConfig = field(default_factory=IspConfig)
    cdi: CdiConfig = field(default_factory=CdiConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)
    complexity: ComplexityConfig = field(default_factory=ComplexityConfig)

    def __post_init__(self):
        self.validate()

    # -- derived views ----------------------------------------------------

    def level_dims(self) -> dict[int, tuple[int, int]]:
        """Spatial dims per level: base_hw at the shallowest level, then
        ceil-halved per deeper level."""
        dims: dict[int, tuple[int, int]] = {}
        h, w = self.base_hw
        for lvl in self.cdi.levels:
            dims[lvl] = (h, w)
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return dims

    def single_input_level(self) -> int | None:
        if self.variant.startswith("single_input_"):
            return int(self.variant.rsplit("_", 1)[1])
        return None

    @classmethod
    def for_gradcheck(cls, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Shrink a config to the dims used for gradient checking, keeping
        the structural knobs (rates, activation mode, tau, pos embed)."""
        base = base or cls()
        gc = base.gradcheck
        return cls(
            variant="sdtp",
            seed=base.seed,
            channels=gc.channels,
            in_channels=gc.channels,
            base_hw=gc.base_hw,
            precision="double",
            arf=dataclasses.replace(base.arf),
            isp=dataclasses.replace(base.isp, heads=gc.heads),
            cdi=dataclasses.replace(base.cdi, heads=gc.heads, levels=gc.levels),
            train=dataclasses.replace(base.train),
            gradcheck=dataclasses.replace(gc),
            complexity=dataclasses.replace(base.complexity),
        )

    @classmethod
    def for_train(cls, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Shrink a config to the toy-training dims (identity regression)."""
        base = base or cls()
        tr = base.train
        heads = min(base.isp.heads, tr.channels)
        while tr.channels % heads:
            heads -= 1
        return cls(
            variant="sdtp",
            seed=base.seed,
            channels=tr.channels,
            in_channels=tr.channels,
            base_hw=tr.base_hw,
            precision="double",
            arf=dataclasses.replace(base.arf),
            isp=dataclasses.replace(base.isp, heads=heads),
            cdi=dataclasses.replace(base.cdi, heads=heads, levels=tr.levels),
            train=dataclasses.replace(tr),
            gradcheck=dataclasses.replace(base.gradcheck),
            complexity=dataclasses.replace(base.complexity),
        )

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        if self.variant not in VARIANT_BASE_TAGS and not self.variant.startswith("single_input_"):
            raise ConfigurationError(
                f"variant: {self.variant!r} is not one of {VARIANT_BASE_TAGS} or single_input_<level>")
        _check_int("seed", self.seed, low=0)
        _check_int("channels", self.channels, low=1)
        _check_int("in_channels", self.in_channels, low=1)
        self.base_hw = _check_hw("base_hw", self.base_hw)
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision: {self.precision!r} not in {PRECISIONS}")

        if self.arf.mode not in ARF_MODES:
            raise ConfigurationError(f"arf.mode: {self.arf.mode!r} not in {ARF_MODES}")
        if not math.isfinite(self.arf.tau) or self.arf.tau < 0:
            raise ConfigurationError(f"arf.tau: must be finite and >= 0, got {self.arf.tau}")

        self.isp.rates = _check_int_tuple("isp.rates", self.isp.rates, low=1)
        if not self.isp.rates or self.isp.rates[0] != 1:
            raise ConfigurationError(f"isp.rates: first rate must be 1, got {list(self.isp.rates)}")
        _check_int("isp.heads", self.isp.heads, low=1)
        if self.channels % self.isp.heads:
            raise ConfigurationError(
                f"isp.heads: {self.isp.heads} does not divide channels={self.channels}")
        if self.isp.pos_embed not in POS_EMBED_MODES:
            raise ConfigurationError(f"isp.pos_embed: {self.isp.pos_embed!r} not in {POS_EMBED_MODES}")
        _check_int("isp.blocks", self.isp.blocks, low=0)

        _check_int("cdi.heads", self.cdi.heads, low=1)
        if self.channels % self.cdi.heads:
            raise ConfigurationError(
                f"cdi.heads: {self.cdi.heads} does not divide channels={self.channels}")
        if not math.isfinite(self.cdi.lam) or self.cdi.lam < 0:
            raise ConfigurationError(f"cdi.lambda: must be finite and >= 0, got {self.cdi.lam}")
        self.cdi.levels = _check_levels("cdi.levels", self.cdi.levels)

        lvl = self.single_input_level()
        if lvl is not None and lvl not in self.cdi.levels:
            raise ConfigurationError(
                f"variant: single_input level {lvl} not in cdi.levels={list(self.cdi.levels)}")

        _check_int("train.steps", self.train.steps, low=1)
        if not math.isfinite(self.train.lr) or self.train.lr < 0:
            raise ConfigurationError(f"train.lr: must be finite and >= 0, got {self.train.lr}")
        _check_int("train.channels", self.train.channels, low=1)
        self.train.base_hw = _check_hw("train.base_hw", self.train.base_hw)
        self.train.levels = _check_levels("train.levels", self.train.levels)

        _check_int("gradcheck.points", self.gradcheck.points, low=1)
        _check_int("gradcheck.channels", self.gradcheck.channels, low=1)
        _check_int("gradcheck.heads", self.gradcheck.heads, low=1)
        if self.gradcheck.channels % self.gradcheck.heads:
            raise ConfigurationError(
                f"gradcheck.heads: {self.gradcheck.heads} does not divide "
                f"gradcheck.channels={self.gradcheck.channels}")
        self.gradcheck.base_hw = _check_hw("gradcheck.base_hw", self.gradcheck.base_hw)
        self.gradcheck.levels = _check_levels("gradcheck.levels", self.gradcheck.levels)
        if self.gradcheck.tolerance <= 0 or self.gradcheck.step <= 0:
            raise ConfigurationError("gradcheck.tolerance and gradcheck.step must be positive")

        _check_int("complexity.channels", self.complexity.channels, low=1)
        dims = tuple(_check_hw(f"complexity.dims[{k}]", d) for k, d in enumerate(self.complexity.dims))
        self.complexity.dims = dims
        self.complexity.strides = _check_int_tuple("complexity.strides", self.complexity.strides, low=1)
        if len(self.complexity.strides) != len(dims):
            raise ConfigurationError(
                f"complexity.strides: expected {len(dims)} entries, got {len(self.complexity.strides)}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "channels": self.channels,
            "in_channels": self.in_channels,
            "base_hw": list(self.base_hw),
            "precision": self.precision,
            "arf": {"tau": self.arf.tau, "mode": self.arf.mode},
            "isp": {
                "rates": list(self.isp.rates),
                "heads": self.isp.heads,
                "pos_embed": self.isp.pos_embed,
                "blocks": self.isp.blocks,
            },
            "cdi": {
                "heads": self.cdi.heads,
                "lambda": self.cdi.lam,
                "levels": list(self.cdi.levels),
            },
            "train": {
                "steps": self.train.steps,
                "lr": self.train.lr,
                "channels": self.train.channels,
                "base_hw": list(self.train.base_hw),
                "levels": list(self.train.levels),
            },
            "gradcheck": {
                "points": self.gradcheck.points,
                "tolerance": self.gradcheck.tolerance,
                "step": self.gradcheck.step,
                "channels": self.gradcheck.channels,
                "base_hw": list(self.gradcheck.base_hw),
                "levels": list(self.gradcheck.levels),
                "heads": self.gradcheck.heads,
            },
            "complexity": {
                "dims": [list(d) for d in self.complexity.dims],
                "channels": self.complexity.channels,
                "strides": list(self.complexity.strides),
            },
        }


def _check_int(path: str, v, low: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigurationError(f"{path}: expected an integer, got {v!r}")
    if low is not None and v < low:
        raise ConfigurationError(f"{path}: must be >= {low}, got {v}")
    return v


def _check_int_tuple(path: str, v, low: int) -> tuple[int, ...]:
    if not isinstance(v, (list, tuple)):
        raise ConfigurationError(f"{path}: expected a list of integers, got {v!r}")
    return tuple(_check_int(f"{path}[{k}]", x, low=low) for k, x in enumerate(v))


def _check_hw(path: str, v) -> tuple[int, int]:
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigurationError(f"{path}: expected [h, w], got {v!r}")
    return (_check_int(f"{path}[0]", v[0], low=1), _check_int(f"{path}[1]", v[1], low=1))


def _check_levels(path: str, v) -> tuple[int, ...]:
    levels = _check_int_tuple(path, v, low=2)
    if any(lvl > 5 for lvl in levels):
        raise ConfigurationError(f"{path}: levels live in 2..5, got {list(levels)}")
    if list(levels) != sorted(set(levels)):
        raise ConfigurationError(f"{path}: levels must be strictly ascending, got {list(levels)}")
    if any(b - a != 1 for a, b in zip(levels, levels[1:])):
        raise ConfigurationError(f"{path}: levels must be consecutive, got {list(levels)}")
    return levels


_SECTION_TYPES = {
    "arf": ArfConfig,
    "isp": IspConfig,
    "cdi": CdiConfig,
    "train": TrainConfig,
    "gradcheck": GradCheckConfig,
    "complexity": ComplexityConfig,
}

# YAML key -> dataclass field for names Python reserves
_KEY_ALIASES = {"lambda": "lam"}


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(raw).__name__}")
    kwargs = {}
    top_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{key}: expected a mapping, got {value!r}")
            cls = _SECTION_TYPES[key]
            sect_fields = {f.name for f in dataclasses.fields(cls)}
            sect_kwargs = {}
            for sk, sv in value.items():
                fk = _KEY_ALIASES.get(sk, sk)
                if fk not in sect_fields:
                    raise ConfigurationError(f"{key}.{sk}: unknown config key")
                if isinstance(sv, list):
                    sv = _tuplify(sv)
                sect_kwargs[fk] = sv
            kwargs[key] = cls(**sect_kwargs)
        elif key in top_fields:
            if isinstance(value, list):
                value = _tuplify(value)
            kwargs[key] = value
        else:
            raise ConfigurationError(f"{key}: unknown config key")
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _tuplify(v):
    return tuple(_tuplify(x) if isinstance(x, list) else x for x in v)


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load a YAML (or JSON: it parses as YAML) config file; None -> defaults."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {p} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)
