"""Experiment configuration: JSON schema, validation, round-tripping.

One structured file drives a whole run.  Parsing is strict: unknown keys,
missing keys and out-of-range values all fail with the offending field named,
before any data is generated.  parse -> serialize -> parse is the identity.
"""

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .data import TaskSpec
from .errors import ConfigError, ParameterError
from .model import ACTIVATIONS
from .toy_sim import SweepConfig, default_sweep_config

BYTES_PER_PARAM_CHOICES = (4, 8)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a federated run needs.

    task_count is the number of downstream tasks and therefore the number of
    clusters the server forms; participation is the fraction of clients
    drawn each round; local_steps is the per-adapter step count per round.
    """

    seed: int
    task_count: int
    client_count: int
    rounds: int
    local_steps: int
    eta: float
    batch_size: int | None  # None trains each step on the full shard
    rank: int
    model_dims: tuple[int, ...]
    activation: str
    tasks: tuple[TaskSpec, ...]
    alpha: float = 0.5
    threshold: float = 0.01
    participation: float = 1.0
    # scalar applies to every layer; a per-layer tuple pins each one.
    # weight_std None (or a None entry) picks 1/sqrt(fan_in).
    weight_std: float | None | tuple[float | None, ...] = None
    bias_std: float | tuple[float, ...] = 0.0
    adapted_layers: tuple[int, ...] | None = None  # None adapts every layer
    weighted_aggregation: bool = False
    bytes_per_param: int = 8
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "model_dims", tuple(self.model_dims))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        _check(self.seed >= 0, "seed", "must be >= 0")
        for name in ("task_count", "client_count", "rounds", "local_steps",
                     "rank"):
            _check(getattr(self, name) >= 1, name, "must be >= 1")
        _check(self.batch_size is None or self.batch_size >= 1,
               "batch_size", "must be >= 1 or null for full batch")
        _check(self.eta > 0, "eta", "must be > 0")
        _check(self.alpha > 0, "alpha", "must be > 0")
        _check(0 <= self.threshold < 1, "threshold", "must be in [0, 1)")
        _check(0 < self.participation <= 1, "participation",
               "must be in (0, 1]")
        _check(len(self.model_dims) >= 2, "model_dims",
               "needs an input and an output dimension")
        _check(all(d >= 1 for d in self.model_dims), "model_dims",
               "dimensions must be >= 1")
        _check(self.activation in ACTIVATIONS, "activation",
               f"must be one of {ACTIVATIONS}")
        _check(len(self.tasks) == self.task_count, "tasks",
               f"expected {self.task_count} specs, got {len(self.tasks)}")
        ids = [t.task_id for t in self.tasks]
        _check(len(set(ids)) == len(ids), "tasks", "task_id values repeat")
        for i, t in enumerate(self.tasks):
            _check(t.input_dim == self.model_dims[0], f"tasks[{i}]",
                   f"input_dim {t.input_dim} != model input "
                   f"{self.model_dims[0]}")
            _check(t.output_dim == self.model_dims[-1], f"tasks[{i}]",
                   f"output_dim {t.output_dim} != model output "
                   f"{self.model_dims[-1]}")
        n_layers = len(self.model_dims) - 1
        if isinstance(self.weight_std, (list, tuple)):
            object.__setattr__(self, "weight_std", tuple(self.weight_std))
            _check(len(self.weight_std) == n_layers, "weight_std",
                   f"needs {n_layers} per-layer entries")
            _check(all(v is None or v > 0 for v in self.weight_std),
                   "weight_std", "entries must be > 0 or null")
        else:
            _check(self.weight_std is None or self.weight_std > 0,
                   "weight_std", "must be > 0 or null for 1/sqrt(fan_in)")
        if isinstance(self.bias_std, (list, tuple)):
            object.__setattr__(self, "bias_std", tuple(self.bias_std))
            _check(len(self.bias_std) == n_layers, "bias_std",
                   f"needs {n_layers} per-layer entries")
            _check(all(v >= 0 for v in self.bias_std), "bias_std",
                   "entries must be >= 0")
        else:
            _check(self.bias_std >= 0, "bias_std", "must be >= 0")
        if self.adapted_layers is not None:
            object.__setattr__(self, "adapted_layers",
                               tuple(self.adapted_layers))
            _check(len(self.adapted_layers) > 0, "adapted_layers",
                   "must be null or a non-empty layer list")
            _check(all(0 <= l < n_layers for l in self.adapted_layers),
                   "adapted_layers", f"layer indices must be in [0, "
                   f"{n_layers - 1}]")
            _check(len(set(self.adapted_layers)) == len(self.adapted_layers),
                   "adapted_layers", "layer indices repeat")
        _check(self.bytes_per_param in BYTES_PER_PARAM_CHOICES,
               "bytes_per_param",
               f"must be one of {BYTES_PER_PARAM_CHOICES}")
        _check(self.out_dir is None or isinstance(self.out_dir, str),
               "out_dir", "must be a string path or null")


def _check(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {message}")


def _need(raw: dict, name: str, kind, where: str):
    if name not in raw:
        raise ConfigError(f"{where}: missing field {name!r}")
    value = raw[name]
    # bool passes isinstance(int) checks; it is never a valid count here
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}.{name}: expected an integer")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name}: expected a number")
        value = float(value)
    if kind in (str, bool, dict, list) and not isinstance(value, kind):
        raise ConfigError(f"{where}.{name}: expected {kind.__name__}")
    return value


def _reject_unknown(raw: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(raw) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown field {extra[0]!r}")


def _std_field(model: dict, name: str, allow_null_entries: bool):
    """Init-scale fields accept a number, null, or a per-layer list."""
    value = model.get(name)
    if value is None:
        return None
    where = f"config.model.{name}"
    if isinstance(value, list):
        out = []
        for v in value:
            if v is None and allow_null_entries:
                out.append(None)
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}: list entries must be numbers"
                                  + (" or null" if allow_null_entries
                                     else ""))
            else:
                out.append(float(v))
        return tuple(out)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, list, or null")
    return float(value)


# --- task specs ---

def task_to_dict(spec: TaskSpec) -> dict:
    return {"task_id": spec.task_id, "kind": spec.kind,
            "input_dim": spec.input_dim, "output_dim": spec.output_dim,
            "sample_count": spec.sample_count,
            "params": dict(spec.params)}


_TASK_KEYS = {"task_id", "kind", "input_dim", "output_dim", "sample_count",
              "params"}


def task_from_dict(raw: dict, where: str = "task") -> TaskSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(raw, _TASK_KEYS, where)
    params = _need(raw, "params", dict, where)
    for key, value in params.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.params.{key}: expected a number")
    try:
        return TaskSpec(
            task_id=_need(raw, "task_id", int, where),
            kind=_need(raw, "kind", str, where),
            input_dim=_need(raw, "input_dim", int, where),
            output_dim=_need(raw, "output_dim", int, where),
            sample_count=_need(raw, "sample_count", int, where),
            params=params)
    except ParameterError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- experiment config ---

_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - {
    "model_dims", "activation", "weight_std", "bias_std"} | {"model"}


def experiment_to_dict(config: ExperimentConfig) -> dict:
    return {
        "seed": config.seed,
        "task_count": config.task_count,
        "client_count": config.client_count,
        "rounds": config.rounds,
        "local_steps": config.local_steps,
        "eta": config.eta,
        "batch_size": config.batch_size,
        "rank": config.rank,
        "model": {"dims": list(config.model_dims),
                  "activation": config.activation,
                  "weight_std": list(config.weight_std)
                  if isinstance(config.weight_std, tuple)
                  else config.weight_std,
                  "bias_std": list(config.bias_std)
                  if isinstance(config.bias_std, tuple)
                  else config.bias_std,
                  "adapted_layers": list(config.adapted_layers)
                  if config.adapted_layers is not None else None},
        "tasks": [task_to_dict(t) for t in config.tasks],
        "alpha": config.alpha,
        "threshold": config.threshold,
        "participation": config.participation,
        "weighted_aggregation": config.weighted_aggregation,
        "bytes_per_param": config.bytes_per_param,
        "out_dir": config.out_dir,
    }


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    _reject_unknown(raw, _EXPERIMENT_KEYS, "config")
    model = _need(raw, "model", dict, "config")
    _reject_unknown(model, {"dims", "activation", "weight_std", "bias_std",
                            "adapted_layers"}, "config.model")
    dims = _need(model, "dims", list, "config.model")
    if not all(isinstance(d, int) and not isinstance(d, bool) for d in dims):
        raise ConfigError("config.model.dims: expected a list of integers")
    weight_std = _std_field(model, "weight_std", allow_null_entries=True)
    bias_std = _std_field(model, "bias_std", allow_null_entries=False)
    if bias_std is None:
        bias_std = 0.0
    adapted_layers = model.get("adapted_layers")
    if adapted_layers is not None:
        if (not isinstance(adapted_layers, list)
                or not all(isinstance(l, int) and not isinstance(l, bool)
                           for l in adapted_layers)):
            raise ConfigError(
                "config.model.adapted_layers: expected a list of integers "
                "or null")
        adapted_layers = tuple(adapted_layers)
    tasks_raw = _need(raw, "tasks", list, "config")
    tasks = tuple(task_from_dict(t, f"config.tasks[{i}]")
                  for i, t in enumerate(tasks_raw))
    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("config.out_dir: must be a string path or null")
    if "batch_size" not in raw:
        raise ConfigError("config: missing field 'batch_size'")
    batch_size = raw["batch_size"]
    if batch_size is not None:
        batch_size = _need(raw, "batch_size", int, "config")
    kwargs = dict(
        seed=_need(raw, "seed", int, "config"),
        task_count=_need(raw, "task_count", int, "config"),
        client_count=_need(raw, "client_count", int, "config"),
        rounds=_need(raw, "rounds", int, "config"),
        local_steps=_need(raw, "local_steps", int, "config"),
        eta=_need(raw, "eta", float, "config"),
        batch_size=batch_size,
        rank=_need(raw, "rank", int, "config"),
        model_dims=tuple(dims),
        activation=_need(model, "activation", str, "config.model"),
        weight_std=weight_std,
        bias_std=bias_std,
        adapted_layers=adapted_layers,
        tasks=tasks,
        out_dir=out_dir,
    )
    for name, kind in (("alpha", float), ("threshold", float),
                       ("participation", float),
                       ("weighted_aggregation", bool),
                       ("bytes_per_param", int)):
        if name in raw:
            kwargs[name] = _need(raw, name, kind, "config")
    return ExperimentConfig(**kwargs)


# --- toy sweep config ---

_SWEEP_KEYS = {f.name for f in fields(SweepConfig)}


def sweep_to_dict(config: SweepConfig) -> dict:
    out = {"task_one": task_to_dict(config.task_one),
           "task_two": task_to_dict(config.task_two)}
    for f in fields(SweepConfig):
        if f.name in ("task_one", "task_two"):
            continue
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def sweep_from_dict(raw: dict) -> SweepConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    _reject_unknown(raw, _SWEEP_KEYS, "config")
    kwargs = {
        "task_one": task_from_dict(_need(raw, "task_one", dict, "config"),
                                   "config.task_one"),
        "task_two": task_from_dict(_need(raw, "task_two", dict, "config"),
                                   "config.task_two"),
    }
    if "ranks" in raw:
        ranks = _need(raw, "ranks", list, "config")
        if not all(isinstance(r, int) and not isinstance(r, bool)
                   for r in ranks):
            raise ConfigError("config.ranks: expected a list of integers")
        kwargs["ranks"] = tuple(ranks)
    for name, kind in (("epochs", int), ("eta", float),
                       ("repetitions", int), ("heldout_count", int),
                       ("hidden_dim", int), ("embed_weight_std", float),
                       ("embed_bias_std", float), ("readout_std", float)):
        if name in raw:
            kwargs[name] = _need(raw, name, kind, "config")
    if "batch_size" in raw and raw["batch_size"] is not None:
        kwargs["batch_size"] = _need(raw, "batch_size", int, "config")
    try:
        return SweepConfig(**kwargs)
    except ParameterError as exc:
        raise ConfigError(f"config: {exc}") from exc


# --- file I/O ---

def _loads(text: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc


def load_experiment(path: str | Path) -> ExperimentConfig:
    return experiment_from_dict(_loads(Path(path).read_text()))


def load_sweep(path: str | Path) -> SweepConfig:
    return sweep_from_dict(_loads(Path(path).read_text()))


def serialize(raw: dict) -> str:
    return json.dumps(raw, indent=2) + "\n"


def save_experiment(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(experiment_to_dict(config)))


def save_sweep(config: SweepConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(sweep_to_dict(config)))


def default_sweep_dict() -> dict:
    return sweep_to_dict(default_sweep_config())
