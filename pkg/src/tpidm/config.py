"""Experiment configuration: one flat INI file, validated on load.

Every key has a type and a default; unknown sections or keys are rejected.
``dump`` writes every key, so a dumped config re-parses to an equal object.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(",", " ").split())


def _segments(text: str) -> tuple[tuple[int, int, float], ...]:
    # "start:length:scale; start:length:scale"
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise ValueError(f"segment {part!r} is not start:length[:scale]")
        out.append((int(bits[0]), int(bits[1]), float(bits[2]) if len(bits) == 3 else 1.5))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(f"{a}:{b}:{c!r}" for a, b, c in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class DatasetSection:
    generator: str = "lv"  # lv | emps | gas | csv
    path: str = ""
    columns: tuple[str, ...] = ()
    n: int = 20_000
    dt: float = 0.01
    seed: int = 0
    lv_params: tuple[float, ...] = (1.1, 0.4, 0.4, 0.1)
    lv_init: tuple[float, ...] = (10.0, 2.0)
    segments: tuple[tuple[int, int, float], ...] = ((13_000, 2_000, 1.5), (17_000, 2_000, 1.5))
    train_end: int = 12_000
    window: int = 100
    train_stride: int = 1
    split_ratio: float = 0.9
    eval_seed: int = 0
    eval_normal: int = 700
    eval_anomalous: int = 300


@dataclass(frozen=True)
class ModelSection:
    encoder: tuple[int, ...] = (8, 16, 32)
    decoder: tuple[int, ...] = (16, 8, 2)
    mode: str = "eps"
    steps: int = 100
    sigma_1: float = 1e-4
    sigma_T: float = 0.05


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 80
    batch_size: int = 128
    lr: float = 1e-4
    l2: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class PhysicsSection:
    enabled: bool = True
    model: str = "lv"  # lv | ohm | emps | gas
    params: tuple[float, ...] = ()
    channels: tuple[int, ...] = ()
    schedule: str = "log-sigmoid"
    m: float = math.nan
    n: float = math.nan
    l: float = math.nan


@dataclass(frozen=True)
class DetectionSection:
    trim: float = 0.1
    k: float = 1.5
    elbo_seed: int = 0
    elbo_steps: int = 0  # 0 means every step


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    detection: DetectionSection = field(default_factory=DetectionSection)

    def __post_init__(self):
        validate(self)

    def __eq__(self, other):
        # nan defaults in the physics section would otherwise never compare equal
        return isinstance(other, ExperimentConfig) and dump(self) == dump(other)

    def __hash__(self):
        return hash(dump(self))

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, training=replace(self.training, seed=seed))


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "training": TrainingSection,
    "physics": PhysicsSection,
    "detection": DetectionSection,
}
_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _bool,
    "tuple[int, ...]": _ints,
    "tuple[float, ...]": _floats,
    "tuple[str, ...]": lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
    "tuple[tuple[int, int, float], ...]": _segments,
}


def validate(cfg: ExperimentConfig) -> None:
    d, m, t, p, det = cfg.dataset, cfg.model, cfg.training, cfg.physics, cfg.detection
    problems = []
    if d.generator not in ("lv", "emps", "gas", "csv"):
        problems.append(f"dataset.generator must be lv, emps, gas or csv (got {d.generator!r})")
    if d.generator == "csv" and not d.path:
        problems.append("dataset.path is required for the csv generator")
    if not (d.dt > 0 and math.isfinite(d.dt)):
        problems.append(f"dataset.dt must be positive (got {d.dt})")
    if d.n < 2 or d.window < 3 or d.train_stride < 1:
        problems.append("dataset.n >= 2, dataset.window >= 3 and dataset.train_stride >= 1 are required")
    if not 0.0 < d.split_ratio < 1.0:
        problems.append(f"dataset.split_ratio must lie in (0, 1) (got {d.split_ratio})")
    if d.eval_normal < 0 or d.eval_anomalous < 0:
        problems.append("eval counts must be non-negative")
    if len(d.lv_params) != 4 or len(d.lv_init) != 2:
        problems.append("dataset.lv_params needs 4 values and dataset.lv_init needs 2")
    if m.mode not in ("eps", "x0"):
        problems.append(f"model.mode must be eps or x0 (got {m.mode!r})")
    if m.steps < 2 or not 0.0 < m.sigma_1 < m.sigma_T < 1.0:
        problems.append("model needs steps >= 2 and 0 < sigma_1 < sigma_T < 1")
    if not m.encoder or not m.decoder or any(w <= 0 for w in m.encoder + m.decoder):
        problems.append("model widths must be positive")
    if t.epochs < 0 or t.batch_size < 1 or not t.lr > 0 or t.l2 < 0:
        problems.append("training needs epochs >= 0, batch_size >= 1, lr > 0, l2 >= 0")
    if p.model not in ("lv", "ohm", "emps", "gas"):
        problems.append(f"physics.model must be lv, ohm, emps or gas (got {p.model!r})")
    if p.schedule not in ("log-sigmoid", "hard-sigmoid", "sigmoid", "relu"):
        problems.append(f"physics.schedule is unknown (got {p.schedule!r})")
    if not 0.0 <= det.trim < 0.5 or det.k < 0 or det.elbo_steps < 0:
        problems.append("detection needs 0 <= trim < 0.5, k >= 0, elbo_steps >= 0")
    if problems:
        raise ConfigError("; ".join(problems))


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{name}]")
        cls = _SECTION_TYPES[name]
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            kind = known[key].type
            try:
                values[key] = _PARSERS[kind](raw)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from exc
        sections[name] = cls(**values)
    return ExperimentConfig(**sections)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def dump(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in to_dict(cfg).items():
        parser[name] = values
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    """Section -> key -> value text, as written by :func:`dump`."""
    return {name: {f.name: _fmt(getattr(getattr(cfg, name), f.name)) for f in fields(getattr(cfg, name))} for name in _SECTION_TYPES}


def desk_preset() -> ExperimentConfig:
    """Desk-scale Predator-Prey experiment."""
    return ExperimentConfig()


def full_preset() -> ExperimentConfig:
    """Full-scale Predator-Prey run: 100,000 points, ten anomalous segments, 500 epochs.

    The first 9,900 points are anomaly-free and form the training region.
    """
    segments = tuple((start, 2_000, 1.5) for start in range(10_000, 100_000, 9_000))
    return ExperimentConfig(
        dataset=DatasetSection(n=100_000, segments=segments, train_end=10_000 - 100),
        training=TrainingSection(epochs=500),
    )
