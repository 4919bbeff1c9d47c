"""Experiment configuration: flat ``key = <JSON value>`` files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .objectives import EstimatorSpec
from .rollout import ADV_MODES
from .transforms import TransformSpec

SCENARIOS = ("toy_unified", "minimal_prefix", "clip_break")
MODES = ("replay", "sampled")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "toy_unified"
    mode: str = "replay"
    variant: str = "default"
    family: str = "gspo_seq"
    clip_eps: float = 0.2
    length_norm: bool = True
    transform: str = "identity"
    floor_eps: float = 1e-8
    adv_mode: str = "mean"
    G: int = 3
    T_max: int = 6
    eta: float = 1e-2
    steps: int = 200
    seed: int = 0
    refresh_interval: int = 0
    reward: str = "final_token_equals:20|10+10=20"
    threshold: float = 0.5
    lambdas: tuple = (0.9, 1.1)
    rhos: tuple = (1.0, 1.0)
    adv_scale: float = 1.0
    w_grid: tuple = (0.5, 0.7, 0.79, 0.8, 1.0, 1.2, 1.21, 1.5)
    out: str | None = None

    def __post_init__(self):
        for name in ("lambdas", "rhos", "w_grid"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; registered: {SCENARIOS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.adv_mode not in ADV_MODES:
            raise ConfigError(f"adv_mode must be one of {ADV_MODES}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.G < 2:
            raise ConfigError("G must be >= 2")
        if self.refresh_interval < 0:
            raise ConfigError("refresh_interval must be >= 0")
        if self.mode == "sampled" and self.refresh_interval == 0:
            raise ConfigError("sampled mode draws a new group at every refresh; refresh_interval must be >= 1")
        # validate the nested specs eagerly so bad files fail at parse time
        self.estimator
        self.transform_spec

    @property
    def estimator(self) -> EstimatorSpec:
        return EstimatorSpec(self.family, self.clip_eps, self.length_norm)

    @property
    def transform_spec(self) -> TransformSpec:
        return TransformSpec(self.transform, self.floor_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("lambdas", "rhos", "w_grid"):
            d[name] = list(d[name])
        return d

    def with_field(self, name: str, value) -> ExperimentConfig:
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field {name!r}")
        return replace(self, **{name: _coerce(name, value)})


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "tuple":
            return tuple(float(v) for v in value)
        if value is not None and not isinstance(value, str):
            raise TypeError
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {name!r} expects {kind}, got {value!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; values are JSON, ``#`` starts a comment line."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rhs = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown field {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate field {key!r}")
        try:
            value = json.loads(rhs.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: value for {key!r} is not valid JSON") from exc
        values[key] = _coerce(key, value)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.to_dict().items() if v is not None)
