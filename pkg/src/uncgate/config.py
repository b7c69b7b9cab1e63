"""Run configuration: one YAML file, validated against a fixed schema.

Unknown keys are rejected so a typo cannot silently fall back to a
default.  ``effective_yaml`` renders the fully resolved configuration,
which the pipeline writes next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidSpec
from .gating import GateConfig
from .mapper import MapperConfig
from .predictor import PredictorArch, PredictorConfig
from .scenegen import BenchmarkConfig
from .uncertainty import LOSSES

STREAM_TAGS = ("base", "unc", "gated")


@dataclass
class EvalConfig:
    streams: tuple[str, ...] = STREAM_TAGS
    fusion: str = "convex"  # or "hard": keep the stream with the larger weight
    svg_scenes: int = 0  # render the first N test scenes


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("laplace_indep", "gaussian_indep", "gaussian_cov")
    # Overrides applied to the benchmark for the distribution ablation.
    benchmark: dict = field(default_factory=lambda: {"noise_along": 0.5, "noise_cross": 0.05,
                                                     "occlusion_gain": 2.0, "noise_corr_length": 0.0,
                                                     "occlusion_floor": 0.2, "occlusion_bump_prob": 0.6})


def default_benchmark() -> BenchmarkConfig:
    # Correlated, strongly heteroscedastic map noise: clean stretches with
    # occasional badly occluded ones, so the uncertainty channel carries signal.
    return BenchmarkConfig(noise_along=0.5, noise_cross=0.5, occlusion_gain=15.0, noise_corr_length=8.0,
                           occlusion_floor=0.02, occlusion_bump_prob=0.7)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    benchmark: BenchmarkConfig = field(default_factory=default_benchmark)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        try:
            self.benchmark.validate()
        except InvalidSpec as exc:
            raise ConfigError(str(exc)) from exc
        positive = {
            "mapper.lr": self.mapper.lr, "predictor.lr": self.predictor.lr, "gate.lr": self.gate.lr,
            "gate.temperature": self.gate.temperature,
            "gate.target_temperature": self.gate.target_temperature,
            "mapper.clip_norm": self.mapper.clip_norm, "predictor.clip_norm": self.predictor.clip_norm,
            "gate.clip_norm": self.gate.clip_norm, "mapper.loss_weight": self.mapper.loss_weight,
            "predictor.arch.output_scale": self.predictor.arch.output_scale,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name, value in {"mapper.batch_size": self.mapper.batch_size,
                            "predictor.batch_size": self.predictor.batch_size,
                            "gate.batch_size": self.gate.batch_size}.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")
        for name, value in {"mapper.epochs": self.mapper.epochs, "predictor.epochs": self.predictor.epochs,
                            "gate.epochs": self.gate.epochs}.items():
            if int(value) < 0:
                raise ConfigError(f"{name} must be non-negative, got {value}")
        if self.mapper.lambda_reg < 0:
            raise ConfigError("mapper.lambda_reg must be non-negative")
        if not 0 <= self.predictor.arch.dropout < 1 or not 0 <= self.gate.dropout < 1:
            raise ConfigError("dropout rates must lie in [0, 1)")
        for kind in (self.mapper.loss_kind, *self.ablate.variants):
            if kind not in LOSSES:
                raise ConfigError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}")
        for sched in (self.predictor.lr_schedule, self.gate.lr_schedule):
            if sched not in ("cosine", "constant"):
                raise ConfigError(f"unknown lr schedule {sched!r}")
        bad = set(self.eval.streams) - set(STREAM_TAGS)
        if bad or not self.eval.streams:
            raise ConfigError(f"streams must be a non-empty subset of {STREAM_TAGS}, got {self.eval.streams}")
        if self.eval.fusion not in ("convex", "hard"):
            raise ConfigError(f"unknown fusion mode {self.eval.fusion!r}")
        if not self.ablate.seeds:
            raise ConfigError("ablate.seeds must not be empty")
        bench_fields = {f.name for f in dataclasses.fields(BenchmarkConfig)}
        if set(self.ablate.benchmark) - bench_fields:
            raise ConfigError(f"unknown ablation benchmark keys {sorted(set(self.ablate.benchmark) - bench_fields)}")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seeded from ``seed``."""
        c = dataclasses.replace(self, seed=seed)
        c.benchmark = dataclasses.replace(self.benchmark, master_seed=seed * 100_000)
        c.mapper = dataclasses.replace(self.mapper, seed=seed)
        c.predictor = dataclasses.replace(self.predictor, seed=seed)
        c.gate = dataclasses.replace(self.gate, seed=seed)
        return c

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def effective_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(current, value, where: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(current, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        if isinstance(current, int) and not float(value).is_integer():
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return type(current)(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(value)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return {**current, **value}
    return value


def _build(default, data, path: str):
    """Copy of dataclass instance ``default`` with ``data`` applied, recursing into nested dataclasses."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) under {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, where)
        else:
            kwargs[name] = _coerce(current, value, where)
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig(), data or {}, "").validate()


def load_config(path=None) -> RunConfig:
    """Read and validate a YAML run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p} is not valid YAML: {exc}") from exc
    return from_dict(data)


__all__ = ["RunConfig", "EvalConfig", "AblationConfig", "PredictorArch", "load_config", "from_dict",
           "default_benchmark", "STREAM_TAGS"]
