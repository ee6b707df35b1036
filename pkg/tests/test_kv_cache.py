import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fifo_replay, full_sort_retained, replay_cache
from salkv.attention import softmax
from salkv.errors import CapacityError, ShapeError
from salkv.kv_cache import KvCache, fifo_evict, set_policy_scores, top_k_indices
from salkv.salience import BlockGeometry, component_maxima, fuse_salience


def kv(n, N=2, D=3, fill=None):
    base = np.arange(n, dtype=np.float64)[:, None, None] if fill is None else np.full((n, 1, 1), fill)
    arr = np.broadcast_to(base, (n, N, D)).copy()
    return arr, -arr


def push(cache, scores):
    k, v = kv(len(scores))
    return cache.append_chunk(k, v, np.asarray(scores, dtype=float))


def test_top_k_ties_favour_larger_id():
    assert list(top_k_indices(np.array([0.5, 0.5, 0.9, 0.5]), 2)) == [2, 3]
    assert list(top_k_indices(np.array([1.0, 1.0]), 1, ids=np.array([10, 3]))) == [0]


class TestAppend:
    def test_top_four_of_five(self):
        cache = KvCache(capacity=4)
        push(cache, [0.9, 0.1])
        report = push(cache, [0.5, 0.7, 0.3])
        assert sorted(cache.scores) == [0.3, 0.5, 0.7, 0.9]
        assert list(report.evicted) == [1]
        assert list(report.retained) == [0, 2, 3, 4]

    def test_under_capacity_keeps_all(self):
        cache = KvCache(capacity=10)
        report = push(cache, [0.1, 0.2, 0.3])
        assert len(report.evicted) == 0 and list(report.retained) == [0, 1, 2]
        keys, values, ids = cache.select()
        assert list(ids) == [0, 1, 2]
        np.testing.assert_array_equal(keys[:, 0, 0], [0, 1, 2])

    def test_select_empty(self):
        keys, values, ids = KvCache(capacity=3).select()
        assert keys.shape[0] == 0 and values.shape[0] == 0 and ids.size == 0

    def test_select_matches_report(self, rng):
        cache = KvCache(capacity=6, sink_count=1)
        for _ in range(4):
            report = push(cache, rng.random(3))
        _, _, ids = cache.select()
        assert list(ids) == list(report.retained)
        assert set(report.retained).isdisjoint(report.evicted)

    def test_two_chunks_to_one(self, rng):
        # 9360 -> 4680 at full size, i.e. two chunks of candidates and one chunk retained
        cache = KvCache(capacity=4680)
        first = rng.random(4680)
        second = rng.random(4680)
        push(cache, first)
        report = push(cache, second)
        assert len(report.retained) + len(report.evicted) == 9360
        entries = list(enumerate(np.concatenate([first, second])))
        assert list(report.retained) == full_sort_retained(entries, 4680, 0)

    def test_pins_survive_low_scores(self):
        cache = KvCache(capacity=5, sink_count=2)
        push(cache, [0.0, 0.0, 0.5])
        push(cache, [0.9, 0.8, 0.7])
        assert list(cache.token_ids) == [0, 1, 3, 4, 5]

    def test_chunk_too_large(self):
        cache = KvCache(capacity=4, sink_count=1)
        push(cache, [0.1] * 4)  # the pin is part of this chunk, so it fits
        with pytest.raises(CapacityError):
            push(cache, [0.1] * 4)
        assert len(cache) == 4 and cache.next_token_id == 4

    def test_shape_mismatch(self):
        cache = KvCache(capacity=4)
        k, v = kv(2)
        with pytest.raises(ShapeError):
            cache.append_chunk(k, v, [0.1, 0.2, 0.3])

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            KvCache(capacity=4, policy="lru")

    def test_pre_append_order(self):
        cache = KvCache(capacity=4, evict_order="pre-append")
        push(cache, [0.9, 0.1, 0.5])
        report = push(cache, [0.0, 0.0])
        # history trimmed to 2, new chunk admitted regardless of score
        assert list(report.retained) == [0, 2, 3, 4]

    def test_multi_layer_entries(self):
        cache = KvCache(capacity=3)
        cache.append_chunk(np.zeros((2, 2, 4, 8)), np.zeros((2, 2, 4, 8)), [0.1, 0.2])
        with pytest.raises(ShapeError):
            cache.append_chunk(np.zeros((1, 4, 8)), np.zeros((1, 4, 8)), [0.3])


class TestFifo:
    def test_evicts_oldest(self):
        cache = KvCache(capacity=3, policy="fifo")
        push(cache, [0.9, 0.9, 0.9])
        report = push(cache, [0.0])
        assert list(report.evicted) == [0] and list(cache.token_ids) == [1, 2, 3]

    def test_pin_precedes_recency(self):
        cache = KvCache(capacity=3, sink_count=1)
        push(cache, [0.9, 0.9, 0.9])
        k, v = kv(1)
        report = fifo_evict(cache, k, v)
        assert list(report.evicted) == [1] and list(cache.token_ids) == [0, 2, 3]
        assert cache.policy == "salience"

    def test_replay(self, rng):
        sizes = rng.integers(1, 5, 60)
        cache = KvCache(capacity=11, sink_count=3, policy="fifo")
        for n in sizes:
            push(cache, rng.random(n))
        assert list(cache.token_ids) == fifo_replay(sizes, 11, 3)


def test_random_policy_is_seeded(rng):
    chunks = [rng.random(4) for _ in range(10)]
    runs = []
    for _ in range(2):
        cache = KvCache(capacity=8, policy="random", seed=5)
        for c in chunks:
            push(cache, c)
        runs.append(list(cache.token_ids))
    assert runs[0] == runs[1]


@settings(max_examples=60, deadline=None)
@given(
    capacity=st.integers(2, 40),
    sink=st.integers(0, 5),
    chunk_sizes=st.lists(st.integers(1, 12), min_size=1, max_size=15),
    seed=st.integers(0, 2**32 - 1),
    coarse=st.booleans(),
)
def test_matches_full_sort_replay(capacity, sink, chunk_sizes, seed, coarse):
    sink = min(sink, capacity - 1)
    chunk_sizes = [min(c, capacity - sink) for c in chunk_sizes]
    rng = np.random.default_rng(seed)
    # coarse scores force ties
    chunks = [np.round(rng.random(n), 1) if coarse else rng.random(n) for n in chunk_sizes]
    cache = KvCache(capacity, sink_count=sink)
    expected = replay_cache(chunks, capacity, sink)
    for c, want in zip(chunks, expected):
        push(cache, c)
        assert len(cache) <= capacity
        assert len(cache.scores) == len(cache.token_ids) == len(cache.keys)
        assert list(cache.token_ids) == want
        assert np.all(np.diff(cache.token_ids) > 0)
        assert all(t in cache.token_ids for t in range(min(sink, cache.next_token_id)))


def test_snapshot_round_trip(tmp_path, rng):
    cache = KvCache(capacity=5, sink_count=1, policy="salience")
    for _ in range(3):
        push(cache, rng.random(2))
    cache.save(tmp_path / "snap")
    loaded = KvCache.load(tmp_path / "snap")
    assert list(loaded.token_ids) == list(cache.token_ids)
    np.testing.assert_array_equal(loaded.scores, cache.scores)
    np.testing.assert_array_equal(loaded.keys, cache.keys.astype(np.float32))
    # continues identically
    push(cache, [0.5, 0.5])
    push(loaded, [0.5, 0.5])
    assert list(loaded.token_ids) == list(cache.token_ids)


class TestPolicyScores:
    def test_uniform_constant(self):
        p = np.full((1, 2, 6, 6), 1 / 6)
        for policy in ("salience", "max", "avg"):
            s = set_policy_scores(policy, p, BlockGeometry(6, 2))
            np.testing.assert_allclose(s, s[0, 0])

    def test_identity(self):
        p = np.broadcast_to(np.eye(5), (1, 3, 5, 5))
        np.testing.assert_allclose(set_policy_scores("max", p), 1.0)
        np.testing.assert_allclose(set_policy_scores("avg", p), 0.2)

    def test_reduction_oracles(self, rng):
        p = softmax(rng.normal(size=(2, 3, 7, 7)))
        B, N, L, _ = p.shape
        want_max = [[sum(max(p[b, n, i, j] for i in range(L)) for n in range(N)) / N for j in range(L)] for b in range(B)]
        want_avg = [[sum(sum(p[b, n, i, j] for i in range(L)) / L for n in range(N)) / N for j in range(L)] for b in range(B)]
        np.testing.assert_allclose(set_policy_scores("max", p), want_max, atol=1e-12)
        np.testing.assert_allclose(set_policy_scores("avg", p), want_avg, atol=1e-12)
        geom = BlockGeometry(7, 3)
        np.testing.assert_array_equal(set_policy_scores("salience", p, geom), fuse_salience(component_maxima(p, geom), geom))

    def test_unknown(self):
        with pytest.raises(ValueError):
            set_policy_scores("fifo", np.full((1, 1, 2, 2), 0.5))
