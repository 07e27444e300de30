"""Experiment configuration: flat ``key = value`` files with typed fields."""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, fields, replace

from .trainer import TrainConfig

DATASETS = ("two_moons", "idx")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    dataset: str = "two_moons"
    n_points: int = 1000
    noise_std: float = 0.1
    rotation_deg: float = 35.0
    translation: tuple[float, ...] = ()
    scaling: tuple[float, ...] = ()
    shift_noise: float = 0.0
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    image_side: int = 28
    desk_rows: int = 2000
    desk_side: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    save_model: bool = True
    export_embeddings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "idx" and not (self.source_images and self.target_images):
            raise ConfigError("dataset = idx needs source_images and target_images")
        if self.n_points < 2 or self.desk_rows < 1 or self.desk_side < 1:
            raise ConfigError("n_points, desk_rows and desk_side must be positive")

    def items(self) -> list[tuple[str, object]]:
        """Every setting as one flat list, training fields first."""
        flat = list(asdict(self.train).items())
        flat += [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "train"]
        return flat

    def echo(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def _field_types() -> dict[str, object]:
    hints = {**typing.get_type_hints(TrainConfig), **typing.get_type_hints(ExperimentConfig)}
    hints.pop("train")
    return hints


FIELD_TYPES = _field_types()
TRAIN_FIELDS = frozenset(f.name for f in fields(TrainConfig))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if typing.get_origin(kind) is tuple:
            (elem, *_) = typing.get_args(kind)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_scalar(elem, p) for p in parts)
        return _scalar(kind, text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def _scalar(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
        raise ValueError("expected true/false")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_lines(text: str, source: str = "<config>") -> dict[str, object]:
    """``key = value`` per line; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def parse_overrides(pairs) -> dict[str, object]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def build_config(values: dict[str, object], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    train_kw = {k: v for k, v in values.items() if k in TRAIN_FIELDS}
    rest = {k: v for k, v in values.items() if k not in TRAIN_FIELDS}
    unknown = set(rest) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return replace(base, train=replace(base.train, **train_kw), **rest)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File values first, then ``overrides`` on top."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_lines(fh.read(), str(path)))
    values.update(overrides or {})
    return build_config(values)
