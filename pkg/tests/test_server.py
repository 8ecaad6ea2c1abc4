"""Selection, k-means against an exhaustive-partition oracle, aggregation,
full-round orchestration, and the server-blindness audit."""

import inspect

import numpy as np
import pytest

from fltac.client import Upload, group_shards, init_client, local_finetune
from fltac.data import Shard
from fltac.errors import (InfeasibleError, ParameterError, ProtocolError,
                          ShapeError)
from fltac.model import (flatten, init_adapter, init_base_model,
                         loss_and_grad, sgd_step, unflatten)
from fltac.numeric import Rng
from fltac.server import (Clustering, UploadSet, aggregate, cluster_uploads,
                          kmeans, run_round, select_clients)


def exhaustive_partition_cost(X, k):
    """Minimum k-means objective over all partitions of the rows of X into
    exactly k non-empty groups, by dynamic programming over subsets."""
    n = X.shape[0]
    full = (1 << n) - 1
    cost = np.full(1 << n, np.inf)
    for s in range(1, full + 1):
        idx = [i for i in range(n) if s >> i & 1]
        pts = X[idx]
        mu = pts.mean(axis=0)
        cost[s] = ((pts - mu) ** 2).sum()
    best = {0: 0.0}
    for _ in range(k):
        nxt = {}
        for done, c in best.items():
            rest = full & ~done
            # iterate non-empty subsets of the remaining points that
            # contain the lowest remaining point (canonical block order)
            low = rest & -rest
            t = rest
            while t:
                if t & low:
                    val = c + cost[t]
                    key = done | t
                    if val < nxt.get(key, np.inf):
                        nxt[key] = val
                t = (t - 1) & rest
        best = nxt
    return best[full]


def _uploads(vectors, shape, sizes=None):
    sizes = sizes or [1] * len(vectors)
    entries = tuple(
        Upload(i, f"{i:032x}", shape, np.asarray(v, dtype=float), s)
        for i, (v, s) in enumerate(zip(vectors, sizes)))
    return UploadSet(entries, round_index=0)


def test_select_clients_basic():
    rng = Rng.for_stream(0, "sel")
    assert select_clients(range(10), 1.0, rng) == tuple(range(10))
    picked = select_clients(range(10), 0.5, rng)
    assert len(picked) == 5 and len(set(picked)) == 5
    assert select_clients([3, 1, 2], 0.5, rng) != ()
    # half-up rounding: 0.5 * 3 = 1.5 rounds to 2
    assert len(select_clients(range(3), 0.5, rng)) == 2
    assert len(select_clients(range(10), 0.01, rng)) == 1
    with pytest.raises(ParameterError):
        select_clients(range(10), 0.0, rng)
    with pytest.raises(ParameterError):
        select_clients(range(10), 1.5, rng)
    with pytest.raises(ParameterError):
        select_clients([], 1.0, rng)


def test_select_clients_uniform_frequency():
    rng = Rng.for_stream(1, "freq")
    hits = np.zeros(10)
    draws = 10_000
    for _ in range(draws):
        for c in select_clients(range(10), 0.5, rng):
            hits[c] += 1
    freq = hits / draws
    assert np.all(np.abs(freq - 0.5) < 0.03)


def test_kmeans_each_point_its_own_cluster():
    X = np.array([[0.0], [5.0], [9.0]])
    labels, cents, inertia, trace = kmeans(X, 3, Rng.for_stream(2, "k"))
    assert inertia == 0.0
    assert sorted(labels.tolist()) == [0, 1, 2]
    assert len(trace) >= 2


def test_kmeans_k1_is_mean():
    rng = Rng.for_stream(3, "k")
    X = rng.normal((8, 4))
    labels, cents, inertia, _ = kmeans(X, 1, rng)
    assert np.allclose(cents[0], X.mean(axis=0), atol=1e-12)
    assert np.all(labels == 0)


def test_kmeans_separated_blobs():
    rng = Rng.for_stream(4, "k")
    a = rng.normal((6, 2)) * 0.5
    b = rng.normal((6, 2)) * 0.5 + 10.0
    X = np.vstack([a, b])
    labels, _, inertia, _ = kmeans(X, 2, Rng.for_stream(4, "init"))
    assert len(set(labels[:6].tolist())) == 1
    assert len(set(labels[6:].tolist())) == 1
    assert labels[0] != labels[6]
    assert abs(inertia - exhaustive_partition_cost(X, 2)) < 1e-9


def test_kmeans_matches_exhaustive_oracle():
    rng = Rng.for_stream(5, "cases")
    for trial in range(10):
        n = int(rng.integers(3, 11))
        k = int(rng.integers(1, 4))
        k = min(k, n)
        X = rng.normal((n, 2)) * (1.0 + trial % 3)
        labels, _, inertia, trace = kmeans(X, k, Rng.for_stream(5, "r", trial))
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
        opt = exhaustive_partition_cost(X, k)
        assert inertia <= opt + 1e-8
        assert inertia >= opt - 1e-8


def test_kmeans_duplicates_and_repair():
    X = np.zeros((3, 2))
    labels, cents, inertia, _ = kmeans(X, 3, Rng.for_stream(6, "k"))
    assert inertia == 0.0
    assert sorted(labels.tolist()) == [0, 1, 2]  # repair filled every cluster


def test_kmeans_validation():
    rng = Rng.for_stream(7, "k")
    with pytest.raises(InfeasibleError):
        kmeans(np.zeros((2, 3)), 5, rng)
    with pytest.raises(ParameterError):
        kmeans(np.zeros((2, 3)), 0, rng)
    with pytest.raises(ParameterError):
        kmeans(np.zeros((2, 3)), 1, rng, restarts=0)
    with pytest.raises(ShapeError):
        kmeans(np.zeros(5), 1, rng)


def _shape_for(dim):
    return ((1, dim, 0), (dim, dim, 1), (1, dim, 0))


def test_aggregate_single_and_opposite():
    shape = ((2, 2, 1),)
    v = np.array([1.0, -2.0, 3.0, 0.5])
    ups = _uploads([v], shape)
    clustering = Clustering(1, {ups.entries[0].handle: 0},
                            (v.copy(),), 0.0, (0.0,))
    globals_, writebacks = aggregate(ups, clustering)
    assert np.array_equal(flatten(globals_[0]), v)
    assert np.array_equal(flatten(writebacks[ups.entries[0].handle]), v)

    ups2 = _uploads([v, -v], shape)
    clustering2 = Clustering(1, {e.handle: 0 for e in ups2.entries},
                             (np.zeros(4),), 0.0, (0.0,))
    globals2, _ = aggregate(ups2, clustering2)
    assert np.array_equal(flatten(globals2[0]), np.zeros(4))


def test_aggregate_matches_loop_oracle():
    rng = Rng.for_stream(8, "agg")
    shape = ((3, 2, 2),)
    vecs = [rng.normal(10) for _ in range(7)]
    ups = _uploads(vecs, shape)
    clustering = Clustering(1, {e.handle: 0 for e in ups.entries},
                            (np.zeros(10),), 0.0, (0.0,))
    globals_, _ = aggregate(ups, clustering)
    acc = np.zeros(10)
    for v in vecs:
        acc = acc + (np.asarray(v) - vecs[0])
    oracle = vecs[0] + acc / 7.0
    assert np.max(np.abs(flatten(globals_[0]) - oracle)) < 1e-12


def test_aggregate_idempotent_on_identical_vectors():
    shape = ((2, 2, 1),)
    v = np.array([0.1, 0.2, 0.3, -0.7])
    ups = _uploads([v.copy() for _ in range(3)], shape)
    clustering = Clustering(1, {e.handle: 0 for e in ups.entries},
                            (v.copy(),), 0.0, (0.0,))
    globals_, _ = aggregate(ups, clustering)
    assert np.array_equal(flatten(globals_[0]), v)  # exact, not approximate


def test_aggregate_weighted():
    shape = ((1, 1, 1),)
    ups = _uploads([[2.0, 0.0], [8.0, 4.0]], shape, sizes=[3, 1])
    clustering = Clustering(1, {e.handle: 0 for e in ups.entries},
                            (np.zeros(2),), 0.0, (0.0,))
    globals_, _ = aggregate(ups, clustering, weighted=True)
    assert np.allclose(flatten(globals_[0]), [3.5, 1.0], atol=1e-12)


def test_upload_set_validation():
    shape = ((2, 2, 1),)
    with pytest.raises(ProtocolError):
        UploadSet((), 0)
    a = Upload(0, "a" * 32, shape, np.zeros(4), 1)
    with pytest.raises(ProtocolError):
        UploadSet((a, Upload(1, "a" * 32, shape, np.zeros(4), 1)), 0)
    with pytest.raises(ShapeError):
        UploadSet((a, Upload(1, "b" * 32, ((1, 1, 1),), np.zeros(2), 1)), 0)
    with pytest.raises(ProtocolError):
        aggregate(UploadSet((a,), 0),
                  Clustering(1, {}, (np.zeros(4),), 0.0, (0.0,)))


def _round_setup(seed, m=4, tasks=(1, 2), n=8):
    model = init_base_model((1, 4, 1), "tanh", Rng.for_stream(seed, "m"))
    g = init_adapter(model, 2, Rng.for_stream(seed, "g"))
    rng = Rng.for_stream(seed, "data")
    states = {}
    for cid in range(m):
        shards = {t: Shard(cid, t, rng.normal((1, n)), rng.normal((1, n)))
                  for t in tasks}
        states[cid] = init_client(cid, shards, g)
    return model, states


def test_run_round_deterministic_and_thread_invariant():
    model, states = _round_setup(10)
    kw = dict(n_clusters=2, fraction=1.0, tau=3, eta=0.05, batch_size=None)
    a = run_round(model, states, 0, 99, **kw)
    b = run_round(model, states, 0, 99, **kw)
    c = run_round(model, states, 0, 99, threads=3, **kw)
    for res in (b, c):
        assert res.selected == a.selected
        assert [e.handle for e in res.uploads.entries] == [
            e.handle for e in a.uploads.entries]
        for cid in states:
            for t in states[cid].task_ids:
                assert np.array_equal(flatten(res.states[cid].adapters[t]),
                                      flatten(a.states[cid].adapters[t]))
        assert res.clustering.assignment == a.clustering.assignment
        assert res.bytes_up == a.bytes_up


def test_run_round_unselected_states_untouched():
    model, states = _round_setup(11, m=6)
    res = run_round(model, states, 2, 5, n_clusters=2, fraction=0.5,
                    tau=2, eta=0.05, batch_size=4)
    assert len(res.selected) == 3
    for cid in states:
        if cid not in res.selected:
            assert res.states[cid] is states[cid]  # bit-identical by identity
        else:
            assert res.states[cid] is not states[cid]


def test_run_round_is_transactional():
    model, states = _round_setup(12)
    with pytest.raises(Exception):
        run_round(model, states, 0, 5, n_clusters=50, fraction=1.0,
                  tau=2, eta=0.05, batch_size=None)  # k > uploads: infeasible
    # caller's map never saw partial updates (run_round is pure)
    for cid, st in states.items():
        assert st.task_ids == (1, 2)


def test_run_round_single_cluster_is_fedavg():
    # one task, one cluster, full participation, full batch: the round must
    # reduce to plain adapter averaging
    model, states = _round_setup(13, m=3, tasks=(1,))
    res = run_round(model, states, 0, 77, n_clusters=1, fraction=1.0,
                    tau=4, eta=0.1, batch_size=None)
    tuned = []
    for cid in sorted(states):
        adapter = states[cid].adapters[1]
        shard = states[cid].shards[1]
        for _ in range(4):
            grad = loss_and_grad(model, adapter, (shard.X, shard.Y), "mse")
            adapter = sgd_step(adapter, grad, 0.1)
        tuned.append(flatten(adapter))
    acc = np.zeros_like(tuned[0])
    for v in tuned:
        acc = acc + (v - tuned[0])
    fedavg = tuned[0] + acc / len(tuned)
    for cid in states:
        assert np.array_equal(flatten(res.states[cid].adapters[1]), fedavg)
    assert np.array_equal(flatten(res.cluster_adapters[0]), fedavg)


def test_run_round_byte_accounting():
    model, states = _round_setup(14, m=3, tasks=(1, 2))
    res = run_round(model, states, 0, 7, n_clusters=2, fraction=1.0,
                    tau=1, eta=0.05, batch_size=None)
    per_adapter = res.uploads.entries[0].vector.size
    assert res.bytes_up == 3 * 2 * per_adapter * 8
    assert res.bytes_down == res.bytes_up


def test_server_apis_are_task_blind():
    # the audit: no server-side signature accepts task identity, and the
    # upload payload type carries none
    for fn in (select_clients, kmeans, cluster_uploads, aggregate):
        for name in inspect.signature(fn).parameters:
            assert "task" not in name.lower(), (fn.__name__, name)
    assert "task" not in {f.lower() for f in Upload.__dataclass_fields__}
    assert "task" not in str(inspect.signature(UploadSet)).lower()
    assert "task" not in str(inspect.signature(Clustering)).lower()


def test_clustering_members_sorted():
    c = Clustering(2, {"b": 0, "a": 0, "z": 1}, (np.zeros(1), np.zeros(1)),
                   0.0, (0.0,))
    assert c.members(0) == ("a", "b")
    assert c.members(1) == ("z",)
