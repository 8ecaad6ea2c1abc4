"""Approximation-error study: one shared adapter vs per-task adapters.

The question probed: given a fixed budget of trainable low-rank parameters,
is it better to train a single rank-r adapter on a mixture of two tasks or
one rank-(r/2) adapter per task?  The study sweeps the rank, trains both
arrangements from identical frozen bases, and reports held-out MSE per task
averaged over repetitions.

The backbone is a frozen random-feature network: a wide random embedding
with random biases feeds a zero-initialized square hidden layer (the only
adapted one) followed by a frozen random readout.  The adapter therefore
carries the entire learned function, and its rank is the sole capacity
knob.  The embedding scale is deliberately large, which saturates most
tanh features and makes extra rank pay off slowly; see the default config.

All training is plain gradient descent, full batch unless a batch size is
configured.  Every random draw hangs off (master seed, repetition index,
role) so sweep points can run in any order, on any number of threads, and
merge into an identical table.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import TaskSpec, generate_task, minibatch, Shard, sinusoid_task
from .errors import ParameterError
from .model import (Adapter, BaseModel, batch_loss, init_adapter,
                    loss_and_grad, sgd_step)
from .numeric import Matrix, Rng, gaussian_fill

MODES = ("shared", "per_task")


@dataclass(frozen=True)
class SweepConfig:
    """Everything the sweep needs except the master seed."""

    task_one: TaskSpec
    task_two: TaskSpec
    ranks: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    epochs: int = 1000
    eta: float = 0.11
    batch_size: int | None = None  # None trains full batch
    repetitions: int = 10
    heldout_count: int = 512
    hidden_dim: int = 32
    embed_weight_std: float = 16.0
    embed_bias_std: float = 10.0
    readout_std: float = 1.0

    def __post_init__(self):
        if len(self.ranks) == 0:
            raise ParameterError("ranks must be non-empty")
        if any(r < 1 for r in self.ranks):
            raise ParameterError("ranks must be >= 1")
        if any(a >= b for a, b in zip(self.ranks, self.ranks[1:])):
            raise ParameterError("ranks must be strictly ascending")
        if self.epochs < 1 or self.repetitions < 1 or self.heldout_count < 1:
            raise ParameterError(
                "epochs, repetitions and heldout_count must be >= 1")
        if self.eta <= 0:
            raise ParameterError("eta must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1 when given")
        if self.hidden_dim < 1:
            raise ParameterError("hidden_dim must be >= 1")
        for std in (self.embed_weight_std, self.embed_bias_std,
                    self.readout_std):
            if std < 0:
                raise ParameterError("feature scales must be >= 0")
        for spec in (self.task_one, self.task_two):
            if spec.kind != "sinusoid_regression":
                raise ParameterError("the sweep handles sinusoid tasks only")


def default_sweep_config() -> SweepConfig:
    """Two sinusoid tasks, phase-shifted by 0.5, second noisier."""
    return SweepConfig(
        task_one=sinusoid_task(1, 64, phase=0.0, noise_std=0.05),
        task_two=sinusoid_task(2, 64, phase=0.5, noise_std=0.15),
    )


@dataclass(frozen=True)
class SweepPoint:
    """Held-out MSE of one (rank, mode) cell in one repetition."""

    rank: int
    mode: str
    seed: int
    mse: float


@dataclass(frozen=True)
class SweepRow:
    """Aggregate over repetitions.  per_adapter_rank records the actual
    rank each trained adapter carried; note flags the floor at rank 1."""

    rank: int
    mode: str
    per_adapter_rank: int
    mean_mse: float
    std_mse: float
    note: str = ""


def per_adapter_rank(rank: int, mode: str) -> int:
    """Shared mode spends the whole budget on one adapter; per-task splits
    it in half, never below rank 1."""
    if mode == "shared":
        return rank
    return max(1, rank // 2)


def build_toy_base(config: SweepConfig, rng: Rng) -> BaseModel:
    """Frozen backbone: scaled random embedding, zero square hidden layer
    (the adapted one), scaled random readout, tanh throughout."""
    d = config.hidden_dim
    w0 = gaussian_fill(rng, d, 1, std=config.embed_weight_std)
    b0 = gaussian_fill(rng, d, 1, std=config.embed_bias_std)
    w1 = np.zeros((d, d))
    b1 = np.zeros((d, 1))
    w2 = gaussian_fill(rng, 1, d, std=config.readout_std / np.sqrt(d))
    b2 = np.zeros((1, 1))
    return BaseModel(((w0, b0), (w1, b1), (w2, b2)), activation="tanh")


ADAPTED_LAYER = 1  # only the square hidden layer carries the adapter


def _train(model: BaseModel, config: SweepConfig, rank: int,
           X: Matrix, Y: Matrix, init_rng: Rng, batch_rng: Rng) -> Adapter:
    adapter = init_adapter(model, rank, init_rng,
                           adapted_layers=[ADAPTED_LAYER])
    if config.batch_size is None:
        for _ in range(config.epochs):
            grad = loss_and_grad(model, adapter, (X, Y), "mse")
            adapter = sgd_step(adapter, grad, config.eta)
        return adapter
    shard = Shard(0, 1, X, Y)
    steps = -(-X.shape[1] // config.batch_size)  # ceil: one pass per epoch
    for _ in range(config.epochs):
        for _ in range(steps):
            batch = minibatch(shard, config.batch_size, batch_rng)
            grad = loss_and_grad(model, adapter, batch, "mse")
            adapter = sgd_step(adapter, grad, config.eta)
    return adapter


def _heldout_spec(spec: TaskSpec, count: int) -> TaskSpec:
    return replace(spec, sample_count=count)


def _repetition_data(config: SweepConfig, seed: int, k: int):
    """Training pools and held-out pools for repetition k.  Shared across
    all ranks and modes of the repetition so comparisons are paired."""
    out = []
    for j, spec in enumerate((config.task_one, config.task_two), start=1):
        train = generate_task(spec, Rng.for_stream(seed, "toy", k, "train", j))
        held = generate_task(_heldout_spec(spec, config.heldout_count),
                             Rng.for_stream(seed, "toy", k, "held", j))
        out.append((train, held))
    return out


def _cell_mse(config: SweepConfig, base: BaseModel, seed: int, k: int,
              rank: int, mode: str) -> float:
    """Train one (rank, mode) cell of repetition k and return its held-out
    MSE averaged over the two tasks."""
    (tr1, he1), (tr2, he2) = _repetition_data(config, seed, k)
    r = per_adapter_rank(rank, mode)
    if mode == "shared":
        X = np.concatenate([tr1[0], tr2[0]], axis=1)
        Y = np.concatenate([tr1[1], tr2[1]], axis=1)
        adapter = _train(
            model=base, config=config, rank=r, X=X, Y=Y,
            init_rng=Rng.for_stream(seed, "toy", k, "init", mode, rank),
            batch_rng=Rng.for_stream(seed, "toy", k, "batch", mode, rank))
        return 0.5 * (batch_loss(base, adapter, he1[0], he1[1])
                      + batch_loss(base, adapter, he2[0], he2[1]))
    total = 0.0
    for j, (tr, he) in enumerate(((tr1, he1), (tr2, he2)), start=1):
        adapter = _train(
            model=base, config=config, rank=r, X=tr[0], Y=tr[1],
            init_rng=Rng.for_stream(seed, "toy", k, "init", mode, rank, j),
            batch_rng=Rng.for_stream(seed, "toy", k, "batch", mode, rank, j))
        total += batch_loss(base, adapter, he[0], he[1])
    return total / 2.0


def run_sweep(config: SweepConfig, seed: int,
              threads: int = 1) -> list[SweepPoint]:
    """Train every (rank, mode, repetition) cell and return the per-cell
    held-out MSEs sorted by (rank, mode, seed).  The same frozen base is
    reused everywhere; repetitions differ only in data and adapter init."""
    if threads < 1:
        raise ParameterError("threads must be >= 1")
    base = build_toy_base(config, Rng.for_stream(seed, "toy", "base"))
    cells = [(rank, mode, k)
             for rank in config.ranks
             for mode in MODES
             for k in range(config.repetitions)]

    def work(cell):
        rank, mode, k = cell
        return SweepPoint(rank, mode, k,
                          _cell_mse(config, base, seed, k, rank, mode))

    if threads == 1:
        points = [work(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(work, cells))
    # merge by key: output order never depends on scheduling
    return sorted(points, key=lambda p: (p.rank, MODES.index(p.mode), p.seed))


def aggregate_sweep(config: SweepConfig,
                    points: list[SweepPoint]) -> list[SweepRow]:
    """Collapse per-repetition points into one row per (rank, mode)."""
    rows = []
    for rank in config.ranks:
        for mode in MODES:
            mses = np.array(sorted(
                p.mse for p in points if p.rank == rank and p.mode == mode))
            if mses.size != config.repetitions:
                raise ParameterError(
                    f"expected {config.repetitions} points for "
                    f"({rank}, {mode}), got {mses.size}")
            r = per_adapter_rank(rank, mode)
            note = ("rank floor applied"
                    if mode == "per_task" and rank // 2 < 1 else "")
            rows.append(SweepRow(rank, mode, r, float(mses.mean()),
                                 float(mses.std()), note))
    return rows


def write_points_csv(f, points: list[SweepPoint]) -> None:
    f.write("rank,mode,seed,mse\n")
    for p in points:
        f.write(f"{p.rank},{p.mode},{p.seed},{repr(p.mse)}\n")


def write_aggregate_csv(f, rows: list[SweepRow]) -> None:
    f.write("rank,mode,per_adapter_rank,mean_mse,std_mse,note\n")
    for r in rows:
        f.write(f"{r.rank},{r.mode},{r.per_adapter_rank},"
                f"{repr(r.mean_mse)},{repr(r.std_mse)},{r.note}\n")


def mode_means(rows: list[SweepRow], mode: str) -> dict[int, float]:
    return {r.rank: r.mean_mse for r in rows if r.mode == mode}
