"""Run configuration: one YAML file, validated section by section."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .editor import ValueSolveConfig
from .errors import ConfigError
from .model import ModelConfig
from .store import atomic_write_text, config_hash
from .trainer import TrainConfig

# 0-based block indices spread over the 8-block desk model: four single layers, four redundant sets
DESK_LAYER_SETS = ((1,), (3,), (5,), (7,), (1, 5), (1, 7), (1, 3, 7), (1, 3, 5, 7))


@dataclass(frozen=True)
class CorpusConfig:
    n_entities: int = 50
    n_relations: int = 4
    n_two_hop: int = 40
    n_cases: int = 20
    n_context: int = 8
    range_size: int | None = None
    max_neighbors: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_entities", "n_relations"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        for name in ("n_two_hop", "n_cases", "n_context", "max_neighbors"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", name)


@dataclass(frozen=True)
class ModelSection:
    """ModelConfig fields; ``vocab_size`` left unset means "size of the corpus vocabulary"."""

    n_layers: int = 8
    d_model: int = 128
    d_mlp: int = 512
    n_heads: int = 4
    vocab_size: int | None = None
    max_seq_len: int = 128
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        self.build(self.vocab_size or 1)

    def build(self, vocab_size: int) -> ModelConfig:
        d = asdict(self)
        d["vocab_size"] = self.vocab_size or vocab_size
        return ModelConfig(**d)


@dataclass(frozen=True)
class EditConfig:
    layers: tuple[int, ...] = (1,)
    instance: int = 0
    covariance_positions: int = 1000
    covariance_seed: int = 0
    lam: float | None = None
    max_steps: int = 200
    target_loss: float = 5e-2
    lr: float = 0.1
    penalty_fraction: float = 0.1

    def __post_init__(self):
        layers = tuple(sorted(set(int(x) for x in _as_layers(self.layers, "layers"))))
        object.__setattr__(self, "layers", layers)
        if not layers or layers[0] < 0:
            raise ConfigError("need at least one non-negative layer", "layers")
        if self.instance < 0:
            raise ConfigError("must be >= 0", "instance")
        if self.covariance_positions < 1:
            raise ConfigError("must be >= 1", "covariance_positions")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("must be >= 0", "lam")
        if self.max_steps < 1 or self.target_loss <= 0 or self.lr <= 0 or self.penalty_fraction < 0:
            raise ConfigError("solver settings must be positive", "max_steps")

    def solve_config(self) -> ValueSolveConfig:
        return ValueSolveConfig(self.max_steps, self.target_loss, self.lr, self.penalty_fraction)


@dataclass(frozen=True)
class EvalConfig:
    n_instances: int | None = None
    n_cases: int | None = None
    generation_tokens: int = 50
    top_k: int = 10

    def __post_init__(self):
        if self.generation_tokens < 1:
            raise ConfigError("must be >= 1", "generation_tokens")
        if self.top_k < 1:
            raise ConfigError("must be >= 1", "top_k")


@dataclass(frozen=True)
class SweepConfig:
    layer_sets: tuple[tuple[int, ...], ...] = DESK_LAYER_SETS
    probe_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.layer_sets:
            raise ConfigError("need at least one layer set", "layer_sets")
        sets = tuple(tuple(sorted(set(int(x) for x in _as_layers(s, "layer_sets")))) for s in self.layer_sets)
        object.__setattr__(self, "layer_sets", sets)
        if self.probe_layers is not None:
            object.__setattr__(self, "probe_layers", tuple(int(x) for x in _as_layers(self.probe_layers, "probe_layers")))


@dataclass(frozen=True)
class ReportConfig:
    plot_format: str = "csv"

    def __post_init__(self):
        if self.plot_format not in ("csv", "jsonl"):
            raise ConfigError("must be 'csv' or 'jsonl'", "plot_format")


SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "edit": EditConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "report": ReportConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        depth = self.model.n_layers
        bad = [x for x in self.edit.layers if x >= depth]
        if bad:
            raise ConfigError(f"layers {bad} exceed model depth {depth}", "edit.layers")
        for s in self.sweep.layer_sets:
            if max(s) >= depth:
                raise ConfigError(f"layer set {list(s)} exceeds model depth {depth}", "sweep.layer_sets")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edit"]["layers"] = list(self.edit.layers)
        d["sweep"]["layer_sets"] = [list(s) for s in self.sweep.layer_sets]
        if self.sweep.probe_layers is not None:
            d["sweep"]["probe_layers"] = list(self.sweep.probe_layers)
        return d

    def content_dict(self) -> dict:
        """Everything that affects results; the run directory is excluded."""
        d = self.to_dict()
        d.pop("run_dir")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.content_dict())

    @property
    def seeds(self) -> dict[str, int]:
        return {"corpus": self.corpus.seed, "model": self.model.seed, "train": self.train.seed,
                "covariance": self.edit.covariance_seed}

    def with_run_dir(self, run_dir: str | Path) -> "RunConfig":
        return replace(self, run_dir=str(run_dir))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_yaml())

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown section {unknown[0]!r}", unknown[0])
        kwargs = {}
        if "run_dir" in data:
            if not isinstance(data["run_dir"], str):
                raise ConfigError("must be a string", "run_dir")
            kwargs["run_dir"] = data["run_dir"]
        for name, section in SECTIONS.items():
            if name in data and data[name] is not None:
                kwargs[name] = _build_section(name, section, data[name])
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            if exc.field and "." in exc.field:
                raise
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from None
        if data is not None and not isinstance(data, Mapping):
            raise ConfigError("top level must be a mapping")
        return cls.from_dict(data)


def _as_layers(value, name: str):
    if isinstance(value, str):
        value = [x for x in value.replace(" ", "").split(",") if x]
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    try:
        return [int(x) for x in value]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a list of integer layers, got {value!r}", name) from None


def _build_section(name: str, section: type, raw) -> object:
    if not isinstance(raw, Mapping):
        raise ConfigError("must be a mapping", name)
    known = {f.name: f for f in fields(section)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown field {key!r}", f"{name}.{key}")
    for key, value in raw.items():
        _check_type(f"{name}.{key}", known[key].default, value)
    try:
        return section(**raw)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{name}.{exc.field}" if exc.field else name) from None
    except TypeError as exc:
        raise ConfigError(str(exc), name) from None


def _check_type(path: str, default, value) -> None:
    """Reject obvious type mismatches against the field default before construction."""
    if value is None or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        return
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}", path)


SMOKE = {
    "run_dir": "runs/smoke",
    "corpus": {"n_entities": 10, "n_relations": 2, "n_two_hop": 6, "n_cases": 4, "n_context": 4, "seed": 0},
    "model": {"n_layers": 2, "d_model": 32, "d_mlp": 64, "n_heads": 2, "max_seq_len": 96, "seed": 0},
    "train": {"epochs": 100, "batch_size": 8, "learning_rate": 0.1, "eval_every": 5, "recall_target": 0.99, "seed": 0},
    "edit": {"layers": [0], "covariance_positions": 300},
    "eval": {"generation_tokens": 20},
    "sweep": {"layer_sets": [[0], [1], [0, 1]]},
}


def smoke_config(run_dir: str | Path | None = None) -> RunConfig:
    cfg = RunConfig.from_dict(SMOKE)
    return cfg.with_run_dir(run_dir) if run_dir is not None else cfg
