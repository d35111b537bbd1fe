"""Experiment configuration (strict JSON) and seed splitting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abft import ABFTConfig, PretrainSchedule
from .data import CorpusConfig
from .model import ModelConfig


class ConfigKeyError(ValueError):
    """Unknown or mistyped configuration field; ``field`` holds its dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ArchConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 96
    max_seq_len: int = 128


@dataclass
class CorpusSection:
    size: int = 50000
    heldout: int = 512
    seq_len: int = 64
    frac_markov: float = 0.05
    frac_repeat: float = 0.6
    frac_triples: float = 0.35
    segment_len: list = field(default_factory=lambda: [20, 32])
    markov_branching: int = 4
    triple_span: list = field(default_factory=lambda: [2, 4])
    triple_patterns: list = field(default_factory=lambda: [2, 6])
    triple_end_prob: float = 0.5
    markov_seed: int = 0
    frac_task: float = 0.0
    task_shuffle: float = 0.5

    def corpus_config(self) -> CorpusConfig:
        d = dataclasses.asdict(self)
        d.pop("size")
        d.pop("heldout")
        for key in ("segment_len", "triple_span", "triple_patterns"):
            d[key] = tuple(d[key])
        return CorpusConfig(**d)


@dataclass
class PretrainSection:
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    max_steps: int | None = None
    eval_every: int = 200
    patience: int = 0
    min_delta: float = 1e-3

    def schedule(self) -> PretrainSchedule:
        return PretrainSchedule(**dataclasses.asdict(self))


@dataclass
class TaskSection:
    n_classes: int = 4
    span_len: int = 4
    variant: int = 0
    marker_index: int = 0
    ood_variants: list = field(default_factory=lambda: [1, 2])
    n_train_pool: int = 1024
    n_demo_pool: int = 4096
    n_query_pool: int = 512
    test_per_query: int = 2
    val_size: int = 64


@dataclass
class TrainerSection:
    method: str = "abft"
    A0: float = 0.5
    B0: float = 1.0
    lr: float = 2e-5
    n_b: int = 32
    n_steps: int = 32
    n_d: int = 512
    k: int = 4
    pid_enabled: bool = True
    C_p: float = 0.03
    C_i: float = 0.005
    C_d: float = 0.005
    head_filter_enabled: bool = True
    log_base: object = "e"

    def abft_config(self) -> ABFTConfig:
        d = dataclasses.asdict(self)
        d.pop("method")
        d.pop("n_d")
        return ABFTConfig(**d)


@dataclass
class AnalysisSection:
    analyses: list = field(default_factory=lambda: ["acc"])
    grid_min: float = -0.25
    grid_max: float = 1.5
    grid_step: float = 0.25
    grid_queries: int = 256
    consistency_queries: int = 256
    consistency_resamples: int = 3
    unseen_queries: int = 512
    gate_samples: int = 256

    def grid_values(self) -> np.ndarray:
        n = int(round((self.grid_max - self.grid_min) / self.grid_step)) + 1
        return np.round(self.grid_min + self.grid_step * np.arange(n), 10)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ArchConfig = field(default_factory=ArchConfig)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        """Digest of the run-defining fields (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("out")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self.model), seed=subseed_int(self.seed, "init"))


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _check_type(path: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigKeyError(path, f"expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigKeyError(prefix, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    obj = cls()
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigKeyError(path, "unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, path)
        elif current is not None:
            value = _check_type(path, current, value)
        setattr(obj, key, value)
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if cfg.trainer.method not in ("abft", "e2e"):
        raise ConfigKeyError("trainer.method", f"must be abft or e2e, got {cfg.trainer.method!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigKeyError(str(path), f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``section.key=value`` where value is parsed as JSON (bare words are strings)."""
    if "=" not in assignment:
        raise ConfigKeyError(assignment, "override must look like section.key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data: dict = {}
    node = data
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    merged = _merge(cfg.to_dict(), data)
    return config_from_dict(merged)


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# --- seeds ---------------------------------------------------------------------

PURPOSES = {"init": 0, "data": 1, "shuffle": 2}
DATA_STREAMS = {"corpus": 0, "heldout": 1, "split": 2, "train": 3, "test": 4, "val": 5, "analysis": 6, "gate": 7}


def subseed(seed: int, purpose: str, stream: str | None = None) -> np.random.Generator:
    """Generator for one purpose (init, data, shuffle) and, for data, one named stream."""
    key = [seed, PURPOSES[purpose]]
    if stream is not None:
        key.append(DATA_STREAMS[stream])
    return np.random.default_rng(np.random.SeedSequence(key))


def subseed_int(seed: int, purpose: str) -> int:
    return int(np.random.SeedSequence([seed, PURPOSES[purpose]]).generate_state(1)[0])
