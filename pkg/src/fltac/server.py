"""Server side: client selection, adapter clustering, per-cluster averaging.

The server never learns which task produced an uploaded adapter.  It sees
opaque handles and raw vectors, groups them by K-means into a configured
number of clusters, averages within each cluster, and hands every member
its cluster's mean back.  If the adapters of a task really do concentrate,
the clusters recover the tasks; nothing in this module could cheat even if
it wanted to, because the APIs carry no task information.

run_round drives one full communication round against a set of client
states.  It is transactional: any exception propagates before the caller's
state map is replaced, and unselected clients' states are returned
untouched (the object identity is preserved, so staleness is observable).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .client import ClientState, Upload, local_finetune, receive, upload
from .errors import InfeasibleError, ParameterError, ProtocolError, ShapeError
from .model import Adapter, BaseModel, unflatten
from .numeric import Rng

KMEANS_MAX_ITERS = 100
KMEANS_TOL = 1e-6
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class UploadSet:
    """All adapters received in one round.  Homogeneous by construction."""

    entries: tuple[Upload, ...]
    round_index: int

    def __post_init__(self):
        if not self.entries:
            raise ProtocolError("a round produced no uploads")
        shape = self.entries[0].shape
        handles = set()
        for e in self.entries:
            if e.shape != shape:
                raise ShapeError("uploads must share one adapter shape")
            if e.handle in handles:
                raise ProtocolError(f"duplicate upload handle {e.handle[:8]}..")
            handles.add(e.handle)

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])


@dataclass(frozen=True)
class Clustering:
    """K-means outcome over one round's uploads."""

    k: int
    assignment: Mapping[str, int]
    centroids: tuple[np.ndarray, ...]
    inertia: float
    trace: tuple[float, ...]  # inertia after every assignment pass

    def members(self, cluster: int) -> tuple[str, ...]:
        return tuple(sorted(h for h, c in self.assignment.items()
                            if c == cluster))


def select_clients(client_ids: Sequence[int], fraction: float,
                   rng: Rng) -> tuple[int, ...]:
    """Uniform subset of max(1, round(fraction * m)) distinct clients."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"participation fraction must be in (0, 1], "
                             f"got {fraction}")
    ids = sorted(client_ids)
    if not ids:
        raise ParameterError("no clients to select from")
    count = max(1, int(np.floor(fraction * len(ids) + 0.5)))
    picked = rng.subset(len(ids), count)
    return tuple(sorted(ids[i] for i in picked))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # (n, k) matrix of squared Euclidean distances, numerically plain
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_init(X: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """Greedy k-means++: each new center is the best of a handful of
    D^2-weighted candidate draws, judged by the potential it leaves.  The
    greedy variant avoids the outlier-capture inits that plain ++ seeding
    falls into often enough to matter at 10 restarts."""
    n = X.shape[0]
    first = int(rng.integers(0, n))
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    centers = [first]
    trials = 2 + int(np.log(k)) if k > 1 else 0
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on already-chosen points
            centers.append(int(rng.integers(0, n)))
            continue
        cum = np.cumsum(d2)
        best_cand = None
        best_d2 = None
        for _ in range(trials):
            u = rng.uniform() * total
            cand = int(np.searchsorted(cum, u, side="right"))
            cand_d2 = np.minimum(d2, ((X - X[cand]) ** 2).sum(axis=1))
            if best_cand is None or cand_d2.sum() < best_d2.sum():
                best_cand, best_d2 = cand, cand_d2
        centers.append(best_cand)
        d2 = best_d2
    return X[centers].copy()


def _hartigan_refine(X: np.ndarray, labels: np.ndarray,
                     max_passes: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Single-point relocation passes over a converged Lloyd solution.

    Lloyd stops at Voronoi fixed points; a relocation can still pay off
    because moving a point also moves both cluster means.  The exact gain
    of moving x from cluster c (size m) to t (size p) is
    m/(m-1) |x-mu_c|^2 - p/(p+1) |x-mu_t|^2; any positive-gain move is
    taken, scanning points in index order until none remains.  Every move
    strictly lowers the objective, so this terminates, and the end state
    is again Voronoi-consistent.  Clusters never empty: a sole member is
    never moved."""
    k = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k).astype(float)
    sums = np.zeros((k, X.shape[1]))
    for c in range(k):
        sums[c] = X[labels == c].sum(axis=0)
    for _ in range(max_passes):
        moved = False
        for i in range(X.shape[0]):
            c = int(labels[i])
            if counts[c] <= 1:
                continue
            mu_c = sums[c] / counts[c]
            leave = ((X[i] - mu_c) ** 2).sum() * counts[c] / (counts[c] - 1)
            best_gain = 1e-12  # strict improvement only, avoids cycling
            best_t = -1
            for t in range(k):
                if t == c:
                    continue
                mu_t = sums[t] / counts[t]
                enter = ((X[i] - mu_t) ** 2).sum() * counts[t] / (counts[t] + 1)
                if leave - enter > best_gain:
                    best_gain = leave - enter
                    best_t = t
            if best_t >= 0:
                sums[c] -= X[i]
                counts[c] -= 1
                sums[best_t] += X[i]
                counts[best_t] += 1
                labels[i] = best_t
                moved = True
        if not moved:
            break
    return labels, sums / counts[:, None]


def _lloyd(X: np.ndarray, k: int, centroids: np.ndarray, max_iters: int,
           tol: float) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    trace: list[float] = []
    labels = np.zeros(X.shape[0], dtype=int)
    for _ in range(max_iters):
        d2 = _sq_dists(X, centroids)
        labels = d2.argmin(axis=1)  # argmin ties go to the lowest index
        # repair: hand each empty cluster the point farthest from its centroid
        for empty in range(k):
            if np.any(labels == empty):
                continue
            dist_own = d2[np.arange(X.shape[0]), labels]
            counts = np.bincount(labels, minlength=k)
            dist_own[counts[labels] <= 1] = -1.0  # never empty a singleton
            victim = int(dist_own.argmax())
            labels[victim] = empty
            centroids[empty] = X[victim]
            d2 = _sq_dists(X, centroids)
        inertia = float(d2[np.arange(X.shape[0]), labels].sum())
        trace.append(inertia)
        new_centroids = centroids.copy()
        for c in range(k):
            new_centroids[c] = X[labels == c].mean(axis=0)
        move = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if move < tol:
            break
    # relocation refinement can improve past the Lloyd fixed point
    labels, centroids = _hartigan_refine(X, labels)
    # final inertia pairs the last (repaired, all-nonempty) labels with
    # their own means: exactly the partition objective
    d2 = _sq_dists(X, centroids)
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    trace.append(inertia)
    return labels, centroids, inertia, trace


def kmeans(X: np.ndarray, k: int, rng: Rng,
           max_iters: int = KMEANS_MAX_ITERS, tol: float = KMEANS_TOL,
           restarts: int = KMEANS_RESTARTS
           ) -> tuple[np.ndarray, np.ndarray, float, tuple[float, ...]]:
    """Best-of-restarts k-means++ plus Lloyd.

    Returns (labels, centroids, inertia, trace) of the restart with the
    lowest final inertia; earlier restart wins ties.  The trace lists the
    inertia after every assignment pass of the winning restart and is
    non-increasing.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeError("kmeans expects an (n, dim) matrix")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1, got {restarts}")
    if X.shape[0] < k:
        raise InfeasibleError(
            f"cannot split {X.shape[0]} vectors into {k} clusters")
    best = None
    for _ in range(restarts):
        centroids = _plus_plus_init(X, k, rng)
        labels, cents, inertia, trace = _lloyd(X, k, centroids, max_iters, tol)
        if best is None or inertia < best[2]:
            best = (labels, cents, inertia, trace)
    labels, cents, inertia, trace = best
    return labels, cents, inertia, tuple(trace)


def cluster_uploads(uploads: UploadSet, k: int, rng: Rng,
                    max_iters: int = KMEANS_MAX_ITERS,
                    tol: float = KMEANS_TOL,
                    restarts: int = KMEANS_RESTARTS) -> Clustering:
    """K-means over the round's upload vectors, keyed back to handles."""
    labels, cents, inertia, trace = kmeans(uploads.matrix(), k, rng,
                                           max_iters, tol, restarts)
    assignment = {e.handle: int(c) for e, c in zip(uploads.entries, labels)}
    return Clustering(k, assignment, tuple(cents), inertia, trace)


def cluster_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean anchored at the first member: computing
    v0 + mean(v - v0) makes the mean of identical vectors exact, which the
    write-back contract requires.  This is the single averaging convention
    for adapter aggregation; oracles must share it to compare bytewise."""
    first = vectors[0]
    acc = np.zeros_like(first)
    for v in vectors:
        acc = acc + (v - first)
    return first + acc / len(vectors)


def aggregate(uploads: UploadSet, clustering: Clustering,
              weighted: bool = False
              ) -> tuple[dict[int, Adapter], dict[str, Adapter]]:
    """Mean adapter per cluster, plus the write-back map handle -> mean.

    Unweighted by default: every member counts once.  The weighted variant
    scales members by their backing sample counts.
    """
    missing = [e.handle for e in uploads.entries
               if e.handle not in clustering.assignment]
    if missing:
        raise ProtocolError(f"clustering misses {len(missing)} handles")
    shape = uploads.entries[0].shape
    globals_: dict[int, Adapter] = {}
    writebacks: dict[str, Adapter] = {}
    for c in range(clustering.k):
        members = [e for e in uploads.entries
                   if clustering.assignment[e.handle] == c]
        if not members:
            continue
        if weighted:
            w = np.array([float(e.size) for e in members])
            mean = (w[:, None] * np.stack([e.vector for e in members])
                    ).sum(axis=0) / w.sum()
        else:
            mean = cluster_mean([e.vector for e in members])
        adapter = unflatten(shape, mean)
        globals_[c] = adapter
        for e in members:
            writebacks[e.handle] = adapter
    return globals_, writebacks


@dataclass(frozen=True)
class RoundResult:
    """Everything one round produced, in simulator space.

    `truth` (handle -> (client_id, task_id)) is the evaluation ledger; it
    is assembled from client-side handle maps and never crosses into the
    clustering or aggregation calls above.
    """

    round_index: int
    selected: tuple[int, ...]
    states: dict[int, ClientState]
    uploads: UploadSet
    clustering: Clustering
    cluster_adapters: dict[int, Adapter]
    truth: dict[str, tuple[int, int]]
    bytes_up: int
    bytes_down: int


def run_round(model: BaseModel, states: Mapping[int, ClientState],
              round_index: int, seed: int, *, n_clusters: int,
              fraction: float, tau: int, eta: float,
              batch_size: int | None, weighted: bool = False,
              threads: int = 1, restarts: int = KMEANS_RESTARTS,
              max_iters: int = KMEANS_MAX_ITERS, tol: float = KMEANS_TOL,
              bytes_per_param: int = 8) -> RoundResult:
    """One communication round: select, fine-tune, upload, cluster,
    aggregate, write back.  Pure function of (states, seed, round_index)."""
    if threads < 1:
        raise ParameterError("threads must be >= 1")
    selected = select_clients(list(states), fraction,
                              Rng.for_stream(seed, "select", round_index))

    def tune(cid: int) -> tuple[int, ClientState]:
        return cid, local_finetune(states[cid], model, tau, eta, batch_size,
                                   seed, round_index)

    if threads == 1:
        tuned = dict(tune(cid) for cid in selected)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tuned = dict(pool.map(tune, selected))

    entries: list[Upload] = []
    handle_maps: dict[int, dict[int, str]] = {}
    truth: dict[str, tuple[int, int]] = {}
    for cid in selected:  # barrier passed; collection order is fixed
        ups, handle_by_task = upload(
            tuned[cid], Rng.for_stream(seed, "upload", round_index, cid))
        entries.extend(ups)
        handle_maps[cid] = handle_by_task
        for task_id, handle in handle_by_task.items():
            truth[handle] = (cid, task_id)

    uploads = UploadSet(tuple(entries), round_index)
    clustering = cluster_uploads(uploads, n_clusters,
                                 Rng.for_stream(seed, "kmeans", round_index),
                                 max_iters, tol, restarts)
    cluster_adapters, writebacks = aggregate(uploads, clustering, weighted)

    new_states = dict(states)
    for cid in selected:
        new_states[cid] = receive(tuned[cid], handle_maps[cid], writebacks)

    bytes_up = sum(e.vector.size for e in uploads.entries) * bytes_per_param
    # every upload gets exactly one same-shaped adapter written back
    bytes_down = sum(e.vector.size for e in uploads.entries) * bytes_per_param
    return RoundResult(round_index, selected, new_states, uploads, clustering,
                       cluster_adapters, truth, bytes_up, bytes_down)
