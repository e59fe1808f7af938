import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_graph, complete_graph
from mipsroute.proxgraph import (GraphConfig, GraphError, ProximityGraph, SimilarityKind,
                                 build_graph, build_ipdg, build_ipnsw, build_mobius,
                                 distance_select, greedy_search, ipdg_select, load_graph,
                                 mobius_transform, save_graph, similarity)
from mipsroute.vecstore import Dataset


def _data(n, d, seed):
    return Dataset(np.random.default_rng(seed).standard_normal((n, d)))


def _assert_structure(g: ProximityGraph, M: int):
    assert g.out_degrees().max() <= M
    for v in range(g.n):
        nb = g.neighbors(v)
        assert v not in nb
        assert len(set(nb.tolist())) == len(nb)
        assert np.all((nb >= 0) & (nb < g.n))
    assert 0 <= g.entry_vertex < g.n


def test_config_validation():
    with pytest.raises(GraphError):
        GraphConfig(max_degree=8, candidate_size=4)
    with pytest.raises(GraphError):
        GraphConfig(max_degree=0)
    assert GraphConfig(8).search_width == 16
    assert GraphConfig(8, 32).search_width == 32


def test_similarity_kinds():
    pts = np.array([[1.0, 0.0], [0.0, 2.0]])
    q = np.array([1.0, 1.0])
    np.testing.assert_allclose(similarity(SimilarityKind.INNER_PRODUCT, pts, q), [1, 2])
    np.testing.assert_allclose(similarity(SimilarityKind.NEGATIVE_L2, pts, q), [-1, -np.sqrt(2)])
    np.testing.assert_allclose(similarity(SimilarityKind.COSINE, pts, q), [1 / np.sqrt(2)] * 2)
    with pytest.raises(GraphError):
        similarity(SimilarityKind.COSINE, np.zeros((1, 2)), q)


def test_ipnsw_tiny_cases():
    g1 = build_ipnsw(Dataset(np.ones((1, 3))), GraphConfig(16))
    assert g1.n == 1 and g1.num_edges == 0
    g3 = build_ipnsw(_data(3, 4, 0), GraphConfig(16))
    assert set(g3.neighbors(1).tolist()) == {0, 2}
    assert set(g3.neighbors(2).tolist()) == {0, 1}
    assert g3.reachable_from().all()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ipnsw_degree_and_reachability(seed):
    g = build_ipnsw(_data(200, 8, seed), GraphConfig(8))
    _assert_structure(g, 8)
    assert not g.directed
    for v in range(g.n):
        for w in g.neighbors(v):
            assert v in g.neighbors(w)
    assert g.reachable_from().mean() >= 0.99


@pytest.mark.parametrize("kind", list(SimilarityKind))
def test_ipnsw_similarity_variants(kind):
    g = build_ipnsw(_data(120, 6, 4), GraphConfig(6, similarity=kind))
    _assert_structure(g, 6)
    assert g.config.similarity is kind


def test_ipnsw_edges_replay_to_insertion_picks():
    log = []
    g = build_ipnsw(_data(150, 6, 5), GraphConfig(6), _insertions=log)
    picked = {frozenset((i, y)) for i, found in log for y in found}
    for v in range(g.n):
        for w in g.neighbors(v):
            assert frozenset((v, int(w))) in picked


def test_ipdg_select_examples():
    X = np.array([[2.0, 0.0], [1.0, 0.0]])
    assert ipdg_select([0], X, 4) == [0]
    assert ipdg_select([0, 1], X, 4) == [0]
    assert ipdg_select([1, 0], X, 4) == [1, 0]
    assert ipdg_select([1, 0], X, 1) == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20))
def test_ipdg_select_matches_reference_scan(seed, M):
    r = np.random.default_rng(seed)
    X = r.standard_normal((15, 3))
    order = r.permutation(15).tolist()
    ref = []
    for y in order:
        if len(ref) == M:
            break
        if all(X[y] @ X[y] >= X[y] @ X[z] for z in ref):
            ref.append(y)
    assert ipdg_select(order, X, M) == ref


def test_ipdg_small_n_predicate():
    ds = _data(6, 3, 2)
    g = build_ipdg(ds, GraphConfig(8))
    _assert_structure(g, 8)
    X = ds.items
    for v in range(g.n):
        kept = g.neighbors(v).tolist()
        for i, y in enumerate(kept):
            assert all(X[y] @ X[y] >= X[y] @ X[z] for z in kept[:i])


def test_ipdg_degree_and_refinement():
    snaps = []
    g = build_ipdg(_data(200, 8, 3), GraphConfig(8, 32), _snapshots=snaps)
    _assert_structure(g, 8)
    assert g.directed
    assert len(snaps) == 2 and snaps[0] != snaps[1]


def test_mobius_transform_example():
    np.testing.assert_allclose(mobius_transform(np.array([[3.0, 4.0]])), [[0.12, 0.16]])
    with pytest.raises(GraphError):
        mobius_transform(np.zeros((1, 2)))


def test_distance_select_keeps_nearest_and_prunes_shadowed():
    Y = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.5]])
    x = np.zeros(2)
    # node 1 is closer to node 0 than to x, so it is shadowed
    assert distance_select(x, [1, 0, 2], Y, 5) == [0, 2]
    assert distance_select(x, [1, 0, 2], Y, 1) == [0]


def test_mobius_structure():
    ds = _data(200, 8, 6)
    g = build_mobius(ds, GraphConfig(8, 32))
    assert g.n == 200
    _assert_structure(g, 8)
    assert g.entry_vertex == int(np.argmax(np.linalg.norm(ds.items, axis=1)))
    with pytest.raises(GraphError):
        build_mobius(_data(8, 3, 0), GraphConfig(8))
    with pytest.raises(GraphError):
        build_mobius(Dataset(np.vstack([np.zeros((1, 3)), np.ones((12, 3))])), GraphConfig(4))


def test_greedy_search_examples(rng):
    X = rng.standard_normal((64, 5))
    single = ProximityGraph.from_lists([[]], False, GraphConfig(1))
    assert greedy_search(single, X[:1], X[0], 0, 4, 3) == [0]
    chain = chain_graph(3)
    pts = np.array([[0.0], [1.0], [2.0]])
    assert greedy_search(chain, pts, np.array([1.0]), 0, 3, 3)[0] == 2


@pytest.mark.parametrize("kind", list(SimilarityKind))
def test_greedy_search_complete_graph_oracle(kind, rng):
    X = rng.standard_normal((64, 5))
    g = complete_graph(64)
    for q in rng.standard_normal((10, 5)):
        v0 = int(rng.integers(64))
        sims = similarity(kind, X, q)
        ref = np.argsort(-sims, kind="stable")[:10].tolist()
        assert greedy_search(g, X, q, v0, 64, 10, kind) == ref


def test_greedy_search_returns_short_list():
    g = chain_graph(3)
    assert len(greedy_search(g, np.eye(3), np.ones(3), 0, 8, 10)) == 3


@pytest.mark.parametrize("algo", ["ipnsw", "ipdg", "mobius"])
def test_build_determinism_and_round_trip(algo, tmp_path):
    ds = _data(80, 5, 9)
    cfg = GraphConfig(6, 12, seed=3)
    g = build_graph(algo, ds, cfg)
    assert g == build_graph(algo, ds, cfg)
    save_graph(g, tmp_path / "g.bin")
    back = load_graph(tmp_path / "g.bin")
    assert back == g
    assert back.entry_vertex == g.entry_vertex and back.config == g.config
    assert back.checksum == g.checksum


def test_graph_file_errors(tmp_path):
    g = build_ipnsw(_data(30, 4, 0), GraphConfig(4))
    save_graph(g, tmp_path / "g.bin")
    blob = (tmp_path / "g.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-8])
    with pytest.raises(GraphError):
        load_graph(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTAGRPH" + blob[8:])
    with pytest.raises(GraphError, match="magic"):
        load_graph(tmp_path / "m.bin")
    flipped = bytearray(blob)
    flipped[-1] ^= 1
    (tmp_path / "c.bin").write_bytes(bytes(flipped))
    with pytest.raises(GraphError):
        load_graph(tmp_path / "c.bin")


def test_checksum_in_header_matches_recompute(tmp_path):
    import struct
    g = build_ipnsw(_data(30, 4, 1), GraphConfig(4))
    save_graph(g, tmp_path / "g.bin")
    fields = struct.unpack_from("<8sQQQQQqQQ", (tmp_path / "g.bin").read_bytes())
    assert fields[-1] == g.checksum
