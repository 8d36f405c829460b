"""Configuration records and the TOML config-file loader."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import tomli

DEFAULT_LEVELS = (("P3", 8), ("P4", 16), ("P5", 32), ("P6", 64), ("P7", 128))
DEFAULT_RANGES = (0.0, 64.0, 128.0, 256.0, 512.0, math.inf)


class ConfigError(ValueError):
    """Raised for invalid configuration values; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class LevelSpec:
    index: int
    name: str
    stride: int
    lower: float  # exclusive
    upper: float  # inclusive


@dataclass(frozen=True)
class FpnConfig:
    """Feature-pyramid layout and assignment options.

    ``range_thresholds`` has one more entry than ``levels``: level ``i`` takes
    locations whose largest regression distance lies in
    ``(range_thresholds[i], range_thresholds[i + 1]]``.

    ``single_level`` names one level that then receives every object
    regardless of size (the no-FPN setting).
    """

    levels: tuple = DEFAULT_LEVELS
    range_thresholds: tuple = DEFAULT_RANGES
    center_sampling: bool = False
    radius_factor: float = 1.5
    normalize_targets: bool = False
    single_level: Optional[str] = None

    def __post_init__(self):
        levels = tuple((str(n), int(s)) for n, s in self.levels)
        ranges = tuple(float(m) for m in self.range_thresholds)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "range_thresholds", ranges)
        self.validate()

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("levels", "at least one level required")
        strides = [s for _, s in self.levels]
        if any(s < 1 for s in strides):
            raise ConfigError("levels", "strides must be >= 1")
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigError("levels", "strides must be strictly increasing")
        names = [n for n, _ in self.levels]
        if len(set(names)) != len(names):
            raise ConfigError("levels", "level names must be unique")
        m = self.range_thresholds
        if len(m) != len(self.levels) + 1:
            raise ConfigError(
                "range_thresholds",
                f"need {len(self.levels) + 1} thresholds for {len(self.levels)} levels, got {len(m)}",
            )
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigError("range_thresholds", "thresholds must be strictly increasing")
        if not math.isinf(m[-1]):
            raise ConfigError("range_thresholds", "last threshold must be +inf")
        if m[0] < 0:
            raise ConfigError("range_thresholds", "thresholds must be non-negative")
        if not self.radius_factor > 0:
            raise ConfigError("radius_factor", "must be > 0")
        if self.single_level is not None and self.single_level not in names:
            raise ConfigError("single_level", f"unknown level {self.single_level!r}; known: {names}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s for _, s in self.levels)

    def active_levels(self) -> list[LevelSpec]:
        """Levels that receive targets, with their (lower, upper] size ranges."""
        specs = []
        for i, (name, stride) in enumerate(self.levels):
            if self.single_level is not None:
                if name != self.single_level:
                    continue
                specs.append(LevelSpec(i, name, stride, 0.0, math.inf))
            else:
                specs.append(
                    LevelSpec(i, name, stride, self.range_thresholds[i], self.range_thresholds[i + 1])
                )
        return specs

    @classmethod
    def no_fpn(cls, level: str = "P4", **kwargs) -> "FpnConfig":
        return cls(single_level=level, **kwargs)


@dataclass(frozen=True)
class ResizeSpec:
    shorter_target: int = 800
    longer_cap: int = 1333

    def __post_init__(self):
        if not 0 < self.shorter_target <= self.longer_cap:
            raise ConfigError("resize", "need 0 < shorter_target <= longer_cap")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("focal.gamma", "must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("focal.alpha", "must lie in (0, 1)")


@dataclass(frozen=True)
class InferenceOptions:
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    per_class_nms: bool = True
    pre_nms_top_k: Optional[int] = 1000
    fuse_centerness: bool = True
    max_detections: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.score_threshold < 1:
            raise ConfigError("inference.score_threshold", "must lie in [0, 1)")
        if not 0 < self.nms_threshold < 1:
            raise ConfigError("inference.nms_threshold", "must lie in (0, 1)")
        if self.pre_nms_top_k is not None and self.pre_nms_top_k < 1:
            raise ConfigError("inference.pre_nms_top_k", "must be >= 1")


@dataclass(frozen=True)
class LossOptions:
    focal: FocalParams = field(default_factory=FocalParams)
    reg_weight: float = 1.0
    giou: bool = False
    use_centerness: bool = True


@dataclass(frozen=True)
class AnchorConfig:
    """RetinaNet-style anchors: 3 aspect ratios x 3 octave scales per location."""

    levels: tuple = DEFAULT_LEVELS
    base_sizes: tuple = (32.0, 64.0, 128.0, 256.0, 512.0)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    octave_scales: tuple = (2.0 ** 0, 2.0 ** (1 / 3), 2.0 ** (2 / 3))

    def __post_init__(self):
        if len(self.base_sizes) != len(self.levels):
            raise ConfigError("anchors.base_sizes", "one base size per level required")

    @property
    def anchors_per_location(self) -> int:
        return len(self.aspect_ratios) * len(self.octave_scales)

    def shapes(self, level_index: int) -> list[tuple[float, float]]:
        """(width, height) of each anchor at a level; ratio is height / width, area preserved."""
        base = self.base_sizes[level_index]
        out = []
        for ratio in self.aspect_ratios:
            for scale in self.octave_scales:
                size = base * scale
                out.append((size / math.sqrt(ratio), size * math.sqrt(ratio)))
        return out


@dataclass(frozen=True)
class CliConfig:
    fpn: FpnConfig = field(default_factory=FpnConfig)
    resize: ResizeSpec = field(default_factory=ResizeSpec)
    loss: LossOptions = field(default_factory=LossOptions)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    threads: Optional[int] = None
    output_dir: str = "."
    include_crowd: bool = False


_SECTIONS = {
    "fpn": FpnConfig,
    "resize": ResizeSpec,
    "focal": FocalParams,
    "inference": InferenceOptions,
}


def _build(cls, section: str, values: dict[str, Any]):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    kwargs = dict(values)
    if cls is FpnConfig and "levels" in kwargs:
        levels = kwargs["levels"]
        if isinstance(levels, dict):
            kwargs["levels"] = tuple(levels.items())
    if cls is FpnConfig and "range_thresholds" in kwargs:
        kwargs["range_thresholds"] = tuple(
            math.inf if (isinstance(m, str) and m.lower() in ("inf", "+inf")) else m
            for m in kwargs["range_thresholds"]
        )
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def parse_config(data: dict[str, Any]) -> CliConfig:
    """Build a :class:`CliConfig` from a parsed TOML mapping."""
    cfg = CliConfig()
    top = {}
    for key, value in data.items():
        if key in _SECTIONS:
            continue
        if key in ("loss",):
            continue
        top[key] = value
    fpn = _build(FpnConfig, "fpn", data.get("fpn", {}))
    resize = _build(ResizeSpec, "resize", data.get("resize", {}))
    focal = _build(FocalParams, "focal", data.get("focal", {}))
    inference = _build(InferenceOptions, "inference", data.get("inference", {}))
    loss_values = dict(data.get("loss", {}))
    unknown = set(loss_values) - {"reg_weight", "giou", "use_centerness"}
    if unknown:
        raise ConfigError(f"loss.{sorted(unknown)[0]}", "unknown key")
    loss = LossOptions(focal=focal, **loss_values)
    cfg = replace(cfg, fpn=fpn, resize=resize, loss=loss, inference=inference)
    for key, value in top.items():
        if key == "threads":
            if value is not None and int(value) < 1:
                raise ConfigError("threads", "must be >= 1")
            cfg = replace(cfg, threads=value)
        elif key == "output_dir":
            cfg = replace(cfg, output_dir=str(value))
        elif key == "include_crowd":
            cfg = replace(cfg, include_crowd=bool(value))
        else:
            raise ConfigError(key, "unknown key")
    return cfg


def load_config(path) -> CliConfig:
    path = Path(path)
    with path.open("rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    return parse_config(data)
