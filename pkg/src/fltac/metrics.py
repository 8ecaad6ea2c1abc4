"""Evaluation: clustering quality against ground truth, held-out task loss,
communication accounting, and a 2-D projection for plotting.

Nothing in here feeds back into training: all functions are pure, and the
true task identities they consume exist only in the simulator's evaluation
ledger, never in server state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import permutations
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError
from .model import Adapter, BaseModel, batch_loss
from .numeric import Matrix

# exact bijection search is cheap up to this many tasks; Hungarian beyond
_EXACT_SEARCH_LIMIT = 8

BYTES_PER_PARAM = 8  # 64-bit floats on the wire


@dataclass(frozen=True)
class RoundRecord:
    """One communication round's evaluation snapshot."""

    round_index: int
    per_task_eval_loss: Mapping[int, float]
    cluster_accuracy: float
    purity: float
    inertia: float
    bytes_up: int
    bytes_down: int
    cumulative_bytes: int

    def to_json(self) -> str:
        d = asdict(self)
        d["per_task_eval_loss"] = {str(k): v for k, v
                                   in sorted(self.per_task_eval_loss.items())}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RoundRecord":
        d = json.loads(line)
        d["per_task_eval_loss"] = {int(k): float(v) for k, v
                                   in d["per_task_eval_loss"].items()}
        return cls(**d)


def _contingency(assignment: Mapping[str, int],
                 truth: Mapping[str, int]) -> tuple[np.ndarray, list, list]:
    if set(assignment) != set(truth):
        raise ParameterError("assignment and truth must cover the same handles")
    if not assignment:
        raise ParameterError("cannot score an empty assignment")
    clusters = sorted(set(assignment.values()))
    tasks = sorted(set(truth.values()))
    counts = np.zeros((len(clusters), len(tasks)), dtype=int)
    c_idx = {c: i for i, c in enumerate(clusters)}
    t_idx = {t: i for i, t in enumerate(tasks)}
    for handle, cluster in assignment.items():
        counts[c_idx[cluster], t_idx[truth[handle]]] += 1
    return counts, clusters, tasks


def cluster_accuracy(assignment: Mapping[str, int],
                     truth: Mapping[str, int], n: int) -> float:
    """Best-bijection agreement between clusters and true tasks.

    Exhaustive search over all n! cluster-to-task bijections when n is
    small; Hungarian assignment on the contingency matrix otherwise.  The
    two agree; the small-n path exists to keep the oracle independent.
    """
    counts, clusters, tasks = _contingency(assignment, truth)
    if len(clusters) > n or len(tasks) > n:
        raise ParameterError(
            f"got {len(clusters)} clusters / {len(tasks)} tasks with n={n}")
    # pad to n x n so the bijection is total even with missing labels
    padded = np.zeros((n, n), dtype=int)
    padded[:counts.shape[0], :counts.shape[1]] = counts
    total = counts.sum()
    if n <= _EXACT_SEARCH_LIMIT:
        best = max(sum(padded[c, perm[c]] for c in range(n))
                   for perm in permutations(range(n)))
    else:
        rows, cols = linear_sum_assignment(padded, maximize=True)
        best = padded[rows, cols].sum()
    return float(best) / float(total)


def purity(assignment: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Majority-task mass per cluster over the total count."""
    counts, _, _ = _contingency(assignment, truth)
    return float(counts.max(axis=1).sum()) / float(counts.sum())


def comm_bytes(param_counts: Iterable[int],
               bytes_per_param: int = BYTES_PER_PARAM) -> int:
    """Exact bytes for a set of transmitted vectors.  The one-time base
    model broadcast is out of scope on purpose: only adapters move."""
    if bytes_per_param < 1:
        raise ParameterError("bytes_per_param must be >= 1")
    total = 0
    for c in param_counts:
        if c < 0:
            raise ParameterError("parameter counts must be >= 0")
        total += int(c) * bytes_per_param
    return total


def eval_task_loss(model: BaseModel, adapter: Adapter, X: Matrix, Y: Matrix,
                   loss_kind: str = "mse") -> float:
    """Forward-only held-out loss; consumes no randomness."""
    return batch_loss(model, adapter, X, Y, loss_kind)


def _power_top_eigen(G: np.ndarray, iters: int = 500,
                     tol: float = 1e-13) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration.

    The start vector is a fixed deterministic ramp, normalized; a ramp is
    never exactly orthogonal to the dominant eigenvector in practice and
    keeps runs reproducible.
    """
    n = G.shape[0]
    v = 1.0 + np.arange(n) / n
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-300:
            return 0.0, v * 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    lam = float(v @ G @ v)
    return lam, v


def project_2d(vectors: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates of the rows of `vectors`.

    Works on the centered Gram matrix, so the cost scales with the number
    of points, not their dimension.  Sign convention: within each
    component, the coordinate of largest magnitude is made positive.
    Near-zero components (rank-deficient inputs) come back as zeros.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ParameterError("project_2d needs at least 2 vectors")
    Z = X - X.mean(axis=0, keepdims=True)
    G = Z @ Z.T
    coords = np.zeros((X.shape[0], 2))
    scale = float(np.trace(G))
    for comp in range(2):
        lam, v = _power_top_eigen(G)
        if lam <= 1e-12 * max(scale, 1.0):
            break  # remaining variance is numerically zero
        c = np.sqrt(lam) * v
        if c[np.argmax(np.abs(c))] < 0:
            c = -c
        coords[:, comp] = c
        G = G - lam * np.outer(v, v)
    return coords


def write_projection_csv(f: IO[str], round_index: int,
                         rows: Sequence[tuple[int, str, int, int]],
                         coords: np.ndarray) -> None:
    """Evaluation ledger for one round: the only artifact pairing handles
    with true task ids.  `rows` carries (client_id, handle, true_task_id,
    cluster_id) aligned with `coords`."""
    if len(rows) != coords.shape[0]:
        raise ParameterError("rows and coords must align")
    f.write("round,client_id,handle,true_task_id,cluster_id,x,y\n")
    for (client_id, handle, task_id, cluster_id), (x, y) in zip(rows, coords):
        f.write(f"{round_index},{client_id},{handle},{task_id},"
                f"{cluster_id},{repr(float(x))},{repr(float(y))}\n")
