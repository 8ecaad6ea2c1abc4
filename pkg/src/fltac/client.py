"""Client-side simulation: local state and per-task adapter fine-tuning.

A client holds one shard and one adapter per local task.  Fine-tuning runs
tau SGD steps on each task's adapter using minibatches drawn from that
task's shard only; adapters never see another task's data.  Every stream
of randomness is keyed by (seed, round, client, task), so the order in
which clients execute, or the thread they execute on, cannot change any
result.

Uploads deliberately hide task identity: each adapter travels under a
fresh random nonce, and the nonce-to-task mapping stays on the client
side.  Aggregation quality must come from the geometry of the vectors,
not from labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .data import Shard, minibatch
from .errors import ConfigError, ProtocolError
from .model import (Adapter, AdapterShape, BaseModel, flatten, loss_and_grad,
                    sgd_step)
from .numeric import Rng


@dataclass(frozen=True)
class ClientState:
    """One client's task shards and their adapters, keyed by task id."""

    client_id: int
    shards: Mapping[int, Shard]
    adapters: Mapping[int, Adapter]

    def __post_init__(self):
        if not self.shards:
            raise ConfigError(f"client {self.client_id} has no shards")
        if set(self.shards) != set(self.adapters):
            raise ConfigError(
                f"client {self.client_id}: adapter keys {sorted(self.adapters)} "
                f"!= shard keys {sorted(self.shards)}")
        object.__setattr__(self, "shards",
                           MappingProxyType(dict(self.shards)))
        object.__setattr__(self, "adapters",
                           MappingProxyType(dict(self.adapters)))

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.shards))


@dataclass(frozen=True)
class Upload:
    """One adapter in flight to the server.  The handle is an opaque nonce;
    nothing here names the task."""

    client_id: int
    handle: str
    shape: AdapterShape
    vector: np.ndarray
    size: int  # sample count backing this adapter, for weighted aggregation

    def __post_init__(self):
        self.vector.setflags(write=False)


def group_shards(shards: Sequence[Shard]) -> dict[int, dict[int, Shard]]:
    """client_id -> task_id -> Shard, both levels sorted by key."""
    grouped: dict[int, dict[int, Shard]] = {}
    for s in shards:
        grouped.setdefault(s.client_id, {})[s.task_id] = s
    return {c: dict(sorted(tasks.items()))
            for c, tasks in sorted(grouped.items())}


def _copy_adapter(adapter: Adapter) -> Adapter:
    return Adapter(tuple((a.copy(), b.copy()) for a, b in adapter.pairs))


def init_client(client_id: int, shards: Mapping[int, Shard],
                global_adapter: Adapter) -> ClientState:
    """Every local task starts from its own copy of the global adapter."""
    if not shards:
        raise ConfigError(f"client {client_id} has no shards")
    adapters = {tid: _copy_adapter(global_adapter) for tid in shards}
    return ClientState(client_id, dict(shards), adapters)


def local_finetune(state: ClientState, model: BaseModel, tau: int, eta: float,
                   batch_size: int | None, seed: int,
                   round_index: int) -> ClientState:
    """Run tau SGD steps on each local task's adapter independently.

    batch_size None means full batch.  Minibatch draws come from a stream
    keyed by (seed, round, client, task), never from shared state.
    """
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    if eta <= 0:
        raise ConfigError(f"eta must be > 0, got {eta}")
    updated = {}
    for task_id in state.task_ids:
        shard = state.shards[task_id]
        adapter = state.adapters[task_id]
        rng = Rng.for_stream(seed, "local", round_index, state.client_id,
                             task_id)
        for _ in range(tau):
            if batch_size is None:
                batch = shard.X, shard.Y
            else:
                batch = minibatch(shard, batch_size, rng)
            grad = loss_and_grad(model, adapter, batch, "mse")
            adapter = sgd_step(adapter, grad, eta)
        updated[task_id] = adapter
    return ClientState(state.client_id, dict(state.shards), updated)


def upload(state: ClientState,
           rng: Rng) -> tuple[list[Upload], dict[int, str]]:
    """Package every local adapter under a fresh opaque handle.

    Returns the uploads plus the client's private task-to-handle map; the
    caller keeps the map for the write-back and for evaluation ledgers.
    Server-side code only ever sees the Upload list.
    """
    uploads = []
    handle_by_task = {}
    for task_id in state.task_ids:
        adapter = state.adapters[task_id]
        handle = rng.nonce_hex()
        handle_by_task[task_id] = handle
        uploads.append(Upload(state.client_id, handle, adapter.shape(),
                              flatten(adapter), state.shards[task_id].size))
    return uploads, handle_by_task


def receive(state: ClientState, handle_by_task: Mapping[int, str],
            assignments: Mapping[str, Adapter]) -> ClientState:
    """Replace each local adapter with the aggregate assigned to its handle."""
    updated = {}
    for task_id in state.task_ids:
        handle = handle_by_task.get(task_id)
        if handle is None:
            raise ProtocolError(
                f"client {state.client_id}: no handle for task {task_id}")
        aggregate = assignments.get(handle)
        if aggregate is None:
            raise ProtocolError(
                f"client {state.client_id}: server returned nothing for "
                f"handle {handle[:8]}..")
        updated[task_id] = aggregate
    return ClientState(state.client_id, dict(state.shards), updated)
