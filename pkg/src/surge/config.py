"""Experiment configuration: YAML (or JSON) file -> validated ExperimentConfig."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from surge.dpgc import SCOPES
from surge.models import MODES, canonical_mode

TASKS = ("beale", "classifier", "theory")
OPTIMIZERS = ("sgd", "adam")
MODEL_KINDS = ("mlp", "cnn")
DATASETS = ("moons", "blobs", "stripes")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "beale"
    methods: list = field(default_factory=lambda: ["FP", "STE", "STE+SURGE", "BiReal", "BiReal+SURGE"])
    seeds: list = field(default_factory=lambda: list(range(10)))
    steps: int = 2000
    # plain SGD at 0.01 overshoots on the steep Beale surface and kills every unit
    optimizer: str = "adam"
    lr: float = 0.001
    eta: float = 0.01
    eps: float = 1e-8
    scope: str = "all"
    surge_star: bool = False
    fixed_lambda: float | None = None
    # beale toy model
    hidden_size: int = 16
    input_dim: int = 4
    # classifier
    model_kind: str = "mlp"
    layer_sizes: list = field(default_factory=lambda: [2, 32, 32, 2])
    dataset: str = "moons"
    data_path: str | None = None
    n_samples: int = 1000
    data_noise: float = 0.2
    test_fraction: float = 0.3
    batch_size: int = 64
    # theory lab
    d: int = 32
    samples: int = 100_000
    n_models: int = 1
    # harness
    output_dir: str = "runs"
    log_every: int = 1
    workers: int = 1
    record_grads_layer: int | None = None
    write_checkpoint: bool = True

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _need(cond, key, expected, value):
    if not cond:
        raise ConfigError(f"invalid value for {key!r}: {value!r} (expected {expected})")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _need(cfg.task in TASKS, "task", f"one of {TASKS}", cfg.task)
    _need(isinstance(cfg.methods, list) and len(cfg.methods) > 0, "methods", "a nonempty list of modes", cfg.methods)
    try:
        cfg.methods = [canonical_mode(m) for m in cfg.methods]
    except ValueError:
        raise ConfigError(f"invalid value for 'methods': {cfg.methods!r} (expected modes from {MODES})") from None
    _need(isinstance(cfg.seeds, list) and len(cfg.seeds) > 0
          and all(isinstance(s, int) and s >= 0 for s in cfg.seeds),
          "seeds", "a nonempty list of non-negative integers", cfg.seeds)
    _need(isinstance(cfg.steps, int) and cfg.steps >= 1, "steps", "an integer >= 1", cfg.steps)
    cfg.optimizer = str(cfg.optimizer).lower()
    _need(cfg.optimizer in OPTIMIZERS, "optimizer", f"one of {OPTIMIZERS}", cfg.optimizer)
    _need(isinstance(cfg.lr, (int, float)) and cfg.lr >= 0, "lr", "a number >= 0", cfg.lr)
    _need(isinstance(cfg.eta, (int, float)) and cfg.eta > 0, "eta", "a number > 0", cfg.eta)
    _need(isinstance(cfg.eps, (int, float)) and cfg.eps > 0, "eps", "a number > 0", cfg.eps)
    _need(cfg.scope in SCOPES, "scope", f"one of {SCOPES}", cfg.scope)
    _need(isinstance(cfg.surge_star, bool), "surge_star", "true or false", cfg.surge_star)
    _need(cfg.fixed_lambda is None or (isinstance(cfg.fixed_lambda, (int, float)) and cfg.fixed_lambda >= 0),
          "fixed_lambda", "null or a number >= 0", cfg.fixed_lambda)
    for key in ("hidden_size", "input_dim", "n_samples", "batch_size", "d", "samples", "n_models",
                "log_every", "workers"):
        v = getattr(cfg, key)
        _need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, key, "an integer >= 1", v)
    _need(cfg.model_kind in MODEL_KINDS, "model_kind", f"one of {MODEL_KINDS}", cfg.model_kind)
    _need(isinstance(cfg.layer_sizes, list) and len(cfg.layer_sizes) >= 3
          and all(isinstance(s, int) and s >= 1 for s in cfg.layer_sizes),
          "layer_sizes", "a list of >= 3 positive integers", cfg.layer_sizes)
    _need(cfg.dataset in DATASETS or cfg.data_path is not None, "dataset", f"one of {DATASETS}", cfg.dataset)
    _need(isinstance(cfg.data_noise, (int, float)) and cfg.data_noise >= 0, "data_noise", "a number >= 0", cfg.data_noise)
    _need(isinstance(cfg.test_fraction, (int, float)) and 0 < cfg.test_fraction < 1,
          "test_fraction", "a number in (0, 1)", cfg.test_fraction)
    _need(cfg.record_grads_layer is None or (isinstance(cfg.record_grads_layer, int) and cfg.record_grads_layer >= 1),
          "record_grads_layer", "null or an integer >= 1", cfg.record_grads_layer)
    _need(isinstance(cfg.write_checkpoint, bool), "write_checkpoint", "true or false", cfg.write_checkpoint)
    return cfg


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}" + (f" (and {len(unknown) - 1} more)" if len(unknown) > 1 else ""))
    return validate(ExperimentConfig(**raw))


def parse_config(path) -> ExperimentConfig:
    """Read a YAML/JSON config; missing keys take defaults, unknown keys are errors."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)
