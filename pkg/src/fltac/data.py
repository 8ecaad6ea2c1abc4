"""Synthetic tasks and non-IID partitioning of their samples onto clients.

Two task families are provided: scalar sinusoid regression (labels are a
phase-shifted sine of the input plus Gaussian noise) and Gaussian-blob
classification (class centers sit on a scaled simplex, labels are one-hot).
A task's full sample pool is split across clients by drawing per-client
proportions from a symmetric Dirichlet, zeroing any share below a floor
threshold, and apportioning samples to the survivors with largest-remainder
rounding so totals are conserved exactly.

Samples are column-major throughout: X is input_dim x n, Y output_dim x n.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import ParameterError, PartitionError, ShapeError
from .numeric import Matrix, Rng

TASK_KINDS = ("sinusoid_regression", "gaussian_blob_classification")

# Parameters each kind requires; extras are rejected to catch config typos.
_SINUSOID_PARAMS = ("phase", "noise_std", "amplitude")
_BLOB_PARAMS = ("class_count", "center_separation", "noise_std")

_REDRAW_LIMIT = 100


@dataclass(frozen=True)
class TaskSpec:
    """One downstream task: distribution family, its constants, pool size."""

    task_id: int
    kind: str
    input_dim: int
    output_dim: int
    sample_count: int
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.task_id < 1:
            raise ParameterError(f"task_id must be >= 1, got {self.task_id}")
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"unknown task kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be >= 1")
        if self.sample_count < 1:
            raise ParameterError("sample_count must be >= 1")
        required = (_SINUSOID_PARAMS if self.kind == "sinusoid_regression"
                    else _BLOB_PARAMS)
        missing = [p for p in required if p not in self.params]
        if missing:
            raise ParameterError(f"{self.kind} spec missing params {missing}")
        extra = [p for p in self.params if p not in required]
        if extra:
            raise ParameterError(f"{self.kind} spec has unknown params {extra}")
        if self.params["noise_std"] < 0:
            raise ParameterError("noise_std must be >= 0")
        if self.kind == "sinusoid_regression":
            if self.input_dim != 1 or self.output_dim != 1:
                raise ParameterError("sinusoid tasks are scalar to scalar")
        else:
            c = int(self.params["class_count"])
            if c < 2:
                raise ParameterError("class_count must be >= 2")
            if c != self.params["class_count"]:
                raise ParameterError("class_count must be an integer")
            if c > self.input_dim:
                raise ParameterError(
                    f"class_count {c} exceeds input_dim {self.input_dim}; "
                    "centers need one axis per class")
            if c != self.output_dim:
                raise ParameterError("output_dim must equal class_count")
            if self.params["center_separation"] <= 0:
                raise ParameterError("center_separation must be > 0")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


def sinusoid_task(task_id: int, sample_count: int, phase: float,
                  noise_std: float, amplitude: float = 1.0) -> TaskSpec:
    return TaskSpec(task_id, "sinusoid_regression", 1, 1, sample_count,
                    {"phase": phase, "noise_std": noise_std,
                     "amplitude": amplitude})


def blob_task(task_id: int, sample_count: int, class_count: int,
              input_dim: int, center_separation: float,
              noise_std: float) -> TaskSpec:
    return TaskSpec(task_id, "gaussian_blob_classification", input_dim,
                    class_count, sample_count,
                    {"class_count": class_count,
                     "center_separation": center_separation,
                     "noise_std": noise_std})


@dataclass(frozen=True)
class Shard:
    """One client's slice of one task's pool.  Never empty."""

    client_id: int
    task_id: int
    X: Matrix
    Y: Matrix

    def __post_init__(self):
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise ShapeError("shard X and Y must be 2-d")
        if self.X.shape[1] != self.Y.shape[1]:
            raise ShapeError(
                f"shard X has {self.X.shape[1]} samples, Y has "
                f"{self.Y.shape[1]}")
        if self.X.shape[1] < 1:
            raise ParameterError("shards must hold at least one sample")
        self.X.setflags(write=False)
        self.Y.setflags(write=False)

    @property
    def size(self) -> int:
        return self.X.shape[1]


def blob_centers(spec: TaskSpec) -> Matrix:
    """Class centers: separation-scaled standard basis vectors, one column
    per class.  Placement is deterministic given the spec alone."""
    c = int(spec.params["class_count"])
    centers = np.zeros((spec.input_dim, c))
    for j in range(c):
        centers[j, j] = spec.params["center_separation"]
    return centers


def generate_task(spec: TaskSpec, rng: Rng) -> tuple[Matrix, Matrix]:
    """Draw the task's full sample pool (X input_dim x n, Y output_dim x n)."""
    n = spec.sample_count
    if spec.kind == "sinusoid_regression":
        x = 2.0 * rng.uniform(n) - 1.0
        y = spec.params["amplitude"] * np.sin(
            2.0 * np.pi * (x + spec.params["phase"]))
        if spec.params["noise_std"] > 0:
            y = y + spec.params["noise_std"] * rng.normal(n)
        return x.reshape(1, n), y.reshape(1, n)
    centers = blob_centers(spec)
    c = centers.shape[1]
    labels = rng.integers(0, c, n)
    X = centers[:, labels]
    if spec.params["noise_std"] > 0:
        X = X + spec.params["noise_std"] * rng.normal(
            (spec.input_dim, n))
    Y = np.zeros((c, n))
    Y[labels, np.arange(n)] = 1.0
    return X, Y


def apportion(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing exactly to `total`, proportional to
    `proportions` under largest-remainder rounding.  Ties on the remainder
    go to the lower index.  Zero proportions always get zero."""
    p = np.asarray(proportions, dtype=float)
    if total < 0:
        raise ParameterError("total must be >= 0")
    if p.ndim != 1 or p.size == 0:
        raise ParameterError("proportions must be a non-empty vector")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ParameterError("proportions must be finite and >= 0")
    s = p.sum()
    if s <= 0:
        raise ParameterError("proportions must not all be zero")
    quotas = total * (p / s)
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    # remainder sort: largest fraction first, index ascending on ties
    order = sorted(range(p.size), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def dirichlet_proportions(m: int, alpha: float, threshold: float,
                          rng: Rng) -> np.ndarray:
    """One task's client shares: Dir(alpha) via normalized gammas, entries
    below `threshold` zeroed, survivors renormalized.  Redraws when the
    floor wipes out every client; gives up after 100 attempts."""
    if m < 1:
        raise ParameterError("client count must be >= 1")
    if alpha <= 0:
        raise ParameterError("alpha must be > 0")
    if not 0 <= threshold < 1:
        raise ParameterError("threshold must be in [0, 1)")
    for _ in range(_REDRAW_LIMIT):
        g = rng.gamma(alpha, m)
        p = g / g.sum()
        p[p < threshold] = 0.0
        s = p.sum()
        if s > 0:
            return p / s
    raise PartitionError(
        f"no client share survived the {threshold} floor after "
        f"{_REDRAW_LIMIT} draws (m={m}, alpha={alpha})")


def dirichlet_partition(task_samples: Mapping[int, tuple[Matrix, Matrix]],
                        m: int, alpha: float, threshold: float,
                        rng: Rng) -> list[Shard]:
    """Split every task's pool across m clients.

    Per task: draw thresholded Dirichlet shares, shuffle the pool, then hand
    out contiguous blocks sized by largest-remainder apportionment.  Clients
    rounded down to zero samples simply get no shard for that task.
    """
    shards: list[Shard] = []
    for task_id in sorted(task_samples):
        X, Y = task_samples[task_id]
        n = X.shape[1]
        p = dirichlet_proportions(m, alpha, threshold, rng)
        counts = apportion(n, p)
        order = rng.permutation(n)
        start = 0
        for client_id in range(m):
            c = counts[client_id]
            if c == 0:
                continue
            idx = order[start:start + c]
            start += c
            shards.append(Shard(client_id, task_id,
                                np.ascontiguousarray(X[:, idx]),
                                np.ascontiguousarray(Y[:, idx])))
    return shards


def minibatch(shard: Shard, batch_size: int, rng: Rng) -> tuple[Matrix, Matrix]:
    """Uniform batch from a shard: without replacement when it fits, with
    replacement when batch_size exceeds the shard."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    n = shard.size
    if batch_size > n:
        idx = rng.integers(0, n, batch_size)
    else:
        idx = rng.subset(n, batch_size)
    return shard.X[:, idx], shard.Y[:, idx]


def client_task_sets(shards: Sequence[Shard]) -> dict[int, tuple[int, ...]]:
    """Map client_id -> sorted tuple of task ids it holds data for."""
    tasks: dict[int, set[int]] = {}
    for s in shards:
        tasks.setdefault(s.client_id, set()).add(s.task_id)
    return {c: tuple(sorted(ts)) for c, ts in sorted(tasks.items())}


def export_shards_csv(f: IO[str], shards: Sequence[Shard]) -> None:
    """Write shards as one row per sample.  All shards must share dims so
    the header (client_id, task_id, x0.., y0..) is well formed."""
    if shards:
        d = shards[0].X.shape[0]
        k = shards[0].Y.shape[0]
        for s in shards:
            if s.X.shape[0] != d or s.Y.shape[0] != k:
                raise ShapeError("all shards must share input/output dims")
    else:
        d = k = 0
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["client_id", "task_id"]
                    + [f"x{i}" for i in range(d)]
                    + [f"y{i}" for i in range(k)])
    for s in shards:
        for j in range(s.size):
            writer.writerow([s.client_id, s.task_id]
                            + [repr(float(v)) for v in s.X[:, j]]
                            + [repr(float(v)) for v in s.Y[:, j]])


def import_shards_csv(f: IO[str]) -> list[Shard]:
    """Inverse of export_shards_csv; groups rows by (client_id, task_id) in
    first-appearance order."""
    reader = csv.reader(f)
    try:
        header = next(reader)
    except StopIteration:
        raise ParameterError("shard CSV is empty") from None
    if header[:2] != ["client_id", "task_id"]:
        raise ParameterError("shard CSV header must start with client_id, task_id")
    d = sum(1 for h in header if h.startswith("x"))
    k = sum(1 for h in header if h.startswith("y"))
    if 2 + d + k != len(header):
        raise ParameterError("shard CSV header has unrecognized columns")
    groups: dict[tuple[int, int], tuple[list, list]] = {}
    for row in reader:
        if len(row) != len(header):
            raise ParameterError(f"shard CSV row has {len(row)} fields, "
                                 f"expected {len(header)}")
        key = (int(row[0]), int(row[1]))
        xs, ys = groups.setdefault(key, ([], []))
        xs.append([float(v) for v in row[2:2 + d]])
        ys.append([float(v) for v in row[2 + d:]])
    return [Shard(c, t, np.array(xs).T.reshape(d, len(xs)),
                  np.array(ys).T.reshape(k, len(ys)))
            for (c, t), (xs, ys) in groups.items()]
