"""Clustering-quality scores, byte accounting, held-out loss, projections."""

import io
from itertools import permutations

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fltac.errors import ParameterError
from fltac.metrics import (RoundRecord, cluster_accuracy, comm_bytes,
                           eval_task_loss, project_2d, purity,
                           write_projection_csv)
from fltac.model import BaseModel, init_adapter, init_base_model, zero_adapter_like
from fltac.numeric import Rng


def test_cluster_accuracy_perfect_and_collapsed():
    assignment = {"a": 0, "b": 0, "c": 1, "d": 1}
    truth_perfect = {"a": 1, "b": 1, "c": 2, "d": 2}
    assert cluster_accuracy(assignment, truth_perfect, 2) == 1.0
    collapsed = {h: 0 for h in "abcd"}
    assert cluster_accuracy(collapsed, truth_perfect, 2) == 0.5
    assert purity(assignment, truth_perfect) == 1.0
    assert purity(collapsed, truth_perfect) == 0.5


def test_cluster_accuracy_matches_hungarian_cross_oracle():
    rng = Rng.for_stream(1, "acc")
    for trial in range(30):
        handles = [f"h{i}" for i in range(int(rng.integers(3, 15)))]
        assignment = {h: int(rng.integers(0, 3)) for h in handles}
        truth = {h: int(rng.integers(1, 4)) for h in handles}
        got = cluster_accuracy(assignment, truth, 3)
        # independent oracle: scipy assignment on the padded contingency
        counts = np.zeros((3, 3), dtype=int)
        clusters = sorted(set(assignment.values()))
        tasks = sorted(set(truth.values()))
        for h in handles:
            counts[clusters.index(assignment[h]), tasks.index(truth[h])] += 1
        rows, cols = linear_sum_assignment(counts, maximize=True)
        assert got == pytest.approx(counts[rows, cols].sum() / len(handles))


def test_cluster_accuracy_hungarian_branch_matches_exhaustive():
    # n=9 exceeds the exact-search limit, exercising the scipy path; the
    # test's own 9! search is the oracle
    rng = Rng.for_stream(2, "big")
    handles = [f"h{i}" for i in range(40)]
    assignment = {h: int(rng.integers(0, 9)) for h in handles}
    truth = {h: int(rng.integers(1, 10)) for h in handles}
    got = cluster_accuracy(assignment, truth, 9)
    counts = np.zeros((9, 9), dtype=int)
    for h in handles:
        counts[assignment[h], truth[h] - 1] += 1
    best = max(sum(counts[c, p[c]] for c in range(9))
               for p in permutations(range(9)))
    assert got == pytest.approx(best / 40)


def test_cluster_accuracy_permutation_invariant():
    rng = Rng.for_stream(3, "perm")
    handles = [f"h{i}" for i in range(12)]
    assignment = {h: int(rng.integers(0, 3)) for h in handles}
    truth = {h: int(rng.integers(1, 4)) for h in handles}
    relabel = {0: 2, 1: 0, 2: 1}
    shuffled = {h: relabel[c] for h, c in assignment.items()}
    assert cluster_accuracy(assignment, truth, 3) == cluster_accuracy(
        shuffled, truth, 3)
    assert purity(assignment, truth) == purity(shuffled, truth)


def test_cluster_accuracy_validation():
    with pytest.raises(ParameterError):
        cluster_accuracy({"a": 0}, {"b": 1}, 2)
    with pytest.raises(ParameterError):
        cluster_accuracy({}, {}, 2)
    with pytest.raises(ParameterError):
        cluster_accuracy({"a": 0, "b": 1, "c": 2}, {"a": 1, "b": 1, "c": 1}, 2)


def test_purity_hand_case():
    # contingency [[3,1],[0,2]]: majorities 3 and 2 of 6 total
    assignment = {}
    truth = {}
    for i in range(3):
        assignment[f"a{i}"] = 0
        truth[f"a{i}"] = 1
    assignment["b"] = 0
    truth["b"] = 2
    for i in range(2):
        assignment[f"c{i}"] = 1
        truth[f"c{i}"] = 2
    assert purity(assignment, truth) == pytest.approx(5.0 / 6.0)


def test_comm_bytes():
    assert comm_bytes([16]) == 128
    assert comm_bytes([16, 16, 32]) == 512
    assert comm_bytes([10], bytes_per_param=4) == 40
    assert comm_bytes([]) == 0
    with pytest.raises(ParameterError):
        comm_bytes([-1])
    with pytest.raises(ParameterError):
        comm_bytes([1], bytes_per_param=0)


def test_comm_parity_per_task_vs_single():
    # two rank-r/2 adapters move exactly as many scalars as one rank-r
    # adapter of the same layer dims
    d, k, r = 12, 20, 8
    single = r * (d + k)
    per_task = 2 * (r // 2) * (d + k)
    assert comm_bytes([single]) == comm_bytes([per_task // 2, per_task // 2])


def test_eval_task_loss_zero_adapter_moment():
    # base with a zeroed readout predicts 0; mse then estimates
    # E[y^2] = amplitude^2 / 2 + noise^2 for a sinusoid task
    rng = Rng.for_stream(4, "m")
    layers = ((rng.normal((8, 1)), rng.normal((8, 1))),
              (np.zeros((1, 8)), np.zeros((1, 1))))
    model = BaseModel(layers, "tanh")
    adapter = zero_adapter_like(init_adapter(model, 2, rng))
    data_rng = Rng.for_stream(4, "d")
    x = 2.0 * data_rng.uniform(4000) - 1.0
    amp, noise = 1.5, 0.2
    y = amp * np.sin(2 * np.pi * x) + noise * data_rng.normal(4000)
    loss = eval_task_loss(model, adapter, x.reshape(1, -1), y.reshape(1, -1))
    expect = amp * amp / 2.0 + noise * noise
    assert abs(loss - expect) / expect < 0.1
    again = eval_task_loss(model, adapter, x.reshape(1, -1), y.reshape(1, -1))
    assert loss == again


def test_project_2d_preserves_2d_geometry():
    rng = Rng.for_stream(5, "p")
    X = rng.normal((10, 2)) * np.array([3.0, 1.0])
    X = X - X.mean(axis=0)
    P = project_2d(X)
    orig = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    proj = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
    assert np.max(np.abs(orig - proj)) < 1e-9


def test_project_2d_duplicates_and_rank_deficiency():
    X = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    P = project_2d(X)
    assert np.array_equal(P[0], P[1])
    # three collinear points: all variance on one axis
    line = np.outer([0.0, 1.0, 2.0], [1.0, 1.0, 0.0])
    Q = project_2d(line)
    assert np.all(Q[:, 1] == 0.0)
    with pytest.raises(ParameterError):
        project_2d(np.zeros((1, 4)))


def test_project_2d_matches_eigendecomposition_oracle():
    rng = Rng.for_stream(6, "p")
    X = rng.normal((40, 5)) @ np.diag([4.0, 2.0, 1.0, 0.5, 0.25])
    P = project_2d(X)
    Z = X - X.mean(axis=0)
    evals = np.linalg.eigvalsh(Z.T @ Z)[::-1]
    v1 = P[:, 0] @ P[:, 0]
    v2 = P[:, 1] @ P[:, 1]
    assert abs(v1 - evals[0]) / evals[0] < 1e-9
    assert abs(v2 - evals[1]) / evals[1] < 1e-9
    assert v1 >= v2 >= evals[2] - 1e-9


def test_project_2d_sign_convention():
    X = np.array([[5.0, 0.0], [-1.0, 0.0], [-4.0, 0.0]])
    P = project_2d(X)
    # the largest-magnitude coordinate of each used component is positive
    assert P[np.argmax(np.abs(P[:, 0])), 0] > 0


def test_round_record_json_round_trip():
    rec = RoundRecord(3, {1: 0.5, 2: 0.25}, 0.75, 0.8, 12.5, 1024, 2048,
                      10240)
    back = RoundRecord.from_json(rec.to_json())
    assert back == rec
    assert '"round_index": 3' in rec.to_json()


def test_write_projection_csv():
    buf = io.StringIO()
    coords = np.array([[1.0, 2.0], [3.0, 4.0]])
    rows = [(0, "aa", 1, 0), (1, "bb", 2, 1)]
    write_projection_csv(buf, 5, rows, coords)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "round,client_id,handle,true_task_id,cluster_id,x,y"
    assert lines[1] == "5,0,aa,1,0,1.0,2.0"
    assert len(lines) == 3
    with pytest.raises(ParameterError):
        write_projection_csv(io.StringIO(), 0, rows, coords[:1])
