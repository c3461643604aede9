"""Experiment configuration: typed INI sections mapped onto dataclasses.

Every section mirrors one config dataclass; keys are its field names. Values
are parsed by the field's annotated type. Unknown sections or keys are errors.
The effective configuration is written back with :func:`dump_config` and
reloads to the same object.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .search import IndicatorConfig, total_search_epochs
from .space import NetworkConfig
from .trainer import CPLossConfig, TrainSchedule

MODES = ("search", "train", "eval", "report", "selftest", "sweep")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10
    path: str = ""
    classes: int = 10
    samples: int = 50000
    test_samples: int = 10000
    size: int = 32
    separation: float = 1.0
    noise: float = 1.0
    jitter: int = 1
    seed: int = 0  # fixed across experiment seeds so runs share one dataset and split
    search_fraction: float = 0.5

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.source must be 'synthetic' or 'cifar10', got {self.source!r}")


@dataclass
class ExperimentConfig:
    mode: str = "search"
    seed: int | None = None
    out: str = "runs/default"
    desk_scale: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    search_network: NetworkConfig = field(default_factory=NetworkConfig.search)
    eval_network: NetworkConfig = field(default_factory=NetworkConfig.evaluation)
    indicator: IndicatorConfig = field(default_factory=IndicatorConfig)
    search_schedule: TrainSchedule = field(default_factory=TrainSchedule.search)
    train_schedule: TrainSchedule = field(default_factory=TrainSchedule.evaluation)
    cp_loss: CPLossConfig = field(default_factory=CPLossConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def validate(self) -> None:
        if self.mode in ("search", "train") and self.seed is None:
            raise ConfigError(f"a seed is mandatory for mode {self.mode!r}")
        if self.data.source == "cifar10" and not self.data.path:
            raise ConfigError("data.path is required for the cifar10 source")

    @property
    def search_epochs(self) -> int:
        return total_search_epochs(self.indicator.num_ops, self.indicator.repetitions)


SECTIONS = ("data", "search_network", "eval_network", "indicator", "search_schedule", "train_schedule", "cp_loss")
TOP_KEYS = ("mode", "seed", "out", "desk_scale")


def desk_profile(**overrides) -> ExperimentConfig:
    """4 cells, 8 channels, batch 64, 16x16 synthetic images, T = 2."""
    net = dict(num_cells=4, channels=8, reduction_cells=(2, 3), num_classes=10)
    cfg = ExperimentConfig(
        desk_scale=True,
        data=DataConfig(classes=10, samples=1280, test_samples=512, size=16, separation=0.6, noise=1.0, jitter=2),
        search_network=NetworkConfig(**net),
        eval_network=NetworkConfig(**net),
        indicator=IndicatorConfig(beta_p=2.0, repetitions=2),
        search_schedule=TrainSchedule.search(batch_size=64, epochs=total_search_epochs(8, 2)),
        train_schedule=TrainSchedule.evaluation(epochs=10, batch_size=64, cutout_size=8),
    )
    return dataclasses.replace(cfg, **overrides)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _parse_value(text: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if text.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_value(text, inner[0], where)
    if origin is tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(_parse_value(p, args[0], where) for p in parts)
    try:
        if tp is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text.strip()
        if isinstance(tp, type) and issubclass(tp, str):  # str-valued enums
            return tp(text.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def _build(cls, values: dict[str, str], base, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}; expected one of {sorted(names)}")
        kwargs[key] = _parse_value(text, hints[key], f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = base or ExperimentConfig()
    # a desk_scale switch in the file selects the desk profile as the base
    top = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    if _parse_value(top.get("desk_scale", "false"), bool, "[experiment] desk_scale") and not base.desk_scale:
        base = desk_profile()
    kwargs = {}
    for section in parser.sections():
        if section == "experiment":
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {('experiment',) + SECTIONS}")
        cls = type(getattr(base, section))
        kwargs[section] = _build(cls, dict(parser[section]), getattr(base, section), section)
    hints = typing.get_type_hints(ExperimentConfig)
    for key, text in top.items():
        if key not in TOP_KEYS:
            raise ConfigError(f"[experiment] unknown key {key!r}; expected one of {TOP_KEYS}")
        kwargs[key] = _parse_value(text, hints[key], f"[experiment] {key}")
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base)


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {k: _format_value(getattr(cfg, k)) for k in TOP_KEYS}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply CLI overrides: seed, out, mode, beta_p, lam."""
    top = {k: v for k, v in kw.items() if k in ("seed", "out", "mode") and v is not None}
    cfg = dataclasses.replace(cfg, **top)
    if kw.get("beta_p") is not None:
        try:
            cfg = dataclasses.replace(cfg, indicator=dataclasses.replace(cfg.indicator, beta_p=kw["beta_p"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if kw.get("lam") is not None:
        try:
            cfg = dataclasses.replace(cfg, cp_loss=dataclasses.replace(cfg.cp_loss, lam=kw["lam"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def selftest_profile(**overrides) -> ExperimentConfig:
    """A seconds-long end-to-end configuration: 2 cells, 4 channels, 8x8 images, T = 1."""
    net = dict(num_cells=2, channels=4, reduction_cells=(2,), num_classes=4)
    cfg = ExperimentConfig(
        mode="selftest",
        seed=0,
        out="runs/selftest",
        data=DataConfig(classes=4, samples=256, test_samples=64, size=8, separation=1.0, noise=1.0, jitter=1),
        search_network=NetworkConfig(**net),
        eval_network=NetworkConfig(**net),
        indicator=IndicatorConfig(beta_p=2.0, repetitions=1, val_fraction=0.25),
        search_schedule=TrainSchedule.search(batch_size=64, epochs=total_search_epochs(8, 1)),
        train_schedule=TrainSchedule.evaluation(epochs=2, batch_size=64, cutout_size=4),
    )
    return dataclasses.replace(cfg, **overrides)
