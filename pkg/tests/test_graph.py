"""Graph topology, connectivity values, consensus primitives."""

import math

import numpy as np
import pytest
import sympy

from splitback.data import PartitionScheme, RawDataset, partition_features
from splitback.errors import ConfigError, ConnectivityError, ContractError
from splitback.graph import (
    AdversaryGraph,
    algebraic_connectivity,
    bfs_collect,
    build_graph,
    degree_sweep,
    distribute_results,
    elect_leader,
    laplacian,
    majority_vote,
    share_features,
)


def test_topology_edge_counts():
    assert len(build_graph("complete", [3, 1, 5]).edges) == 3
    assert len(build_graph("line", [0, 1, 2, 3]).edges) == 3
    assert len(build_graph("ring", [0, 1, 2, 3, 4]).edges) == 5
    assert len(build_graph("ring", [0, 1]).edges) == 1
    assert len(build_graph("complete", [7]).edges) == 0


def test_line_follows_ascending_ids():
    g = build_graph("line", [4, 0, 2])
    assert frozenset((0, 2)) in g.edges and frozenset((2, 4)) in g.edges
    assert frozenset((0, 4)) not in g.edges


def test_graph_validation():
    with pytest.raises(ConfigError):
        build_graph("custom", [0, 1], edges=[(0, 0)])  # self loop
    with pytest.raises(ConfigError):
        build_graph("custom", [0, 1], edges=[(0, 2)])  # unknown node
    with pytest.raises(ConnectivityError):
        build_graph("custom", [0, 1, 2, 3], edges=[(0, 1), (2, 3)])  # disconnected
    with pytest.raises(ConfigError):
        build_graph("mesh", [0, 1])
    with pytest.raises(ConfigError):
        build_graph("degree-sweep", [0, 1, 2], step=9)


def test_connectivity_frozen_values():
    # Hand-checkable spectra: path P2 and P3, cycle C4, complete K4.
    assert algebraic_connectivity(build_graph("line", [0, 1])) == pytest.approx(2.0, abs=1e-9)
    assert algebraic_connectivity(build_graph("line", [0, 1, 2])) == pytest.approx(1.0, abs=1e-9)
    assert algebraic_connectivity(build_graph("ring", [0, 1, 2, 3])) == pytest.approx(2.0, abs=1e-9)
    assert algebraic_connectivity(build_graph("complete", [0, 1, 2, 3])) == pytest.approx(4.0, abs=1e-9)
    # normalized Laplacian of K_n has lambda_2 = n/(n-1)
    assert algebraic_connectivity(
        build_graph("complete", [0, 1, 2, 3]), normalized=True
    ) == pytest.approx(4.0 / 3.0, abs=1e-9)


def test_connectivity_needs_two_nodes():
    with pytest.raises(ContractError):
        algebraic_connectivity(build_graph("complete", [0]))


def _random_connected(rng, n):
    while True:
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.45]
        try:
            return build_graph("custom", list(range(n)), edges=edges)
        except ConnectivityError:
            continue


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_connectivity_matches_sympy_charpoly(seed):
    # independent route: exact characteristic polynomial roots
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    g = _random_connected(rng, n)
    lap = laplacian(g)
    poly = sympy.Matrix(lap.astype(int)).charpoly()
    roots = sorted(float(r) for r in poly.all_roots())  # exact real-root isolation
    assert len(roots) == g.num_nodes
    assert algebraic_connectivity(g) == pytest.approx(roots[1], abs=1e-8)


def test_degree_sweep_connectivity_strictly_increases():
    values = [algebraic_connectivity(g) for g in degree_sweep(list(range(6)))]
    assert len(values) == 5
    assert values[0] == pytest.approx(2 * (1 - math.cos(math.pi / 6)), abs=1e-9)  # path P6
    assert values[-1] == pytest.approx(6.0, abs=1e-9)  # complete K6
    assert all(b > a for a, b in zip(values, values[1:]))


def test_elect_leader_max_degree_then_lowest_id():
    star = build_graph("custom", [0, 1, 2, 3], edges=[(2, 0), (2, 1), (2, 3)])
    assert elect_leader(star) == 2
    assert elect_leader(build_graph("complete", [5, 3, 9])) == 3  # tie -> lowest id
    lopsided = build_graph("custom", [0, 1, 2, 3], edges=[(0, 1), (1, 2), (1, 3), (0, 2)])
    assert elect_leader(lopsided) == 1


def test_bfs_collect_order_and_errors():
    g = build_graph("custom", [0, 1, 2, 3], edges=[(0, 1), (0, 2), (1, 3)])
    order, collected = bfs_collect(g, 0, {0: "a", 1: "b", 2: "c", 3: "d"})
    assert order == [0, 1, 2, 3]  # neighbors ascending, then depth 2
    assert collected == ["a", "b", "c", "d"]
    with pytest.raises(ContractError):
        bfs_collect(g, 0, {0: "a"})
    with pytest.raises(ContractError):
        bfs_collect(g, 9, {})


def _brute_force_vote(proposals, inclusive):
    n = len(proposals)
    threshold = math.ceil(n / 2)
    union = set()
    for p in proposals:
        union |= set(int(i) for i in p)
    out = []
    for idx in union:
        count = sum(1 for p in proposals if idx in set(int(i) for i in p))
        if (count >= threshold) if inclusive else (count > threshold):
            out.append(idx)
    return sorted(out)


@pytest.mark.parametrize("inclusive", [False, True])
def test_majority_vote_matches_brute_force(inclusive):
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        proposals = [
            rng.choice(20, size=rng.integers(0, 12), replace=False).tolist() for _ in range(n)
        ]
        got = majority_vote(proposals, n, inclusive=inclusive)
        assert got.tolist() == _brute_force_vote(proposals, inclusive)


def test_majority_vote_examples():
    # 3 proposers, strict: only unanimous indices survive (> ceil(3/2) = 2)
    got = majority_vote([[1, 2, 5], [2, 5, 9], [2, 5]], 3)
    assert got.tolist() == [2, 5]
    # inclusive: 2 of 3 suffice
    got = majority_vote([[1, 2, 5], [2, 5, 9], [2, 7]], 3, inclusive=True)
    assert got.tolist() == [2, 5]
    with pytest.raises(ContractError):
        majority_vote([[1]], 2)


def test_majority_vote_duplicates_in_one_proposal_count_once():
    got = majority_vote([[4, 4, 4], [5]], 2)
    assert got.tolist() == []  # 4 appears in only one proposal


def test_distribute_results_copies():
    g = build_graph("complete", [0, 1, 2])
    out = distribute_results(g, 0, np.array([3, 1, 4]))
    assert set(out) == {0, 1, 2}
    out[1][0] = 99
    assert out[2][0] == 3  # isolated copies


def _view_fixture():
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, (6, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 4, 6).astype(np.int64)
    ds = RawDataset(images, labels, 4)
    vd = partition_features(ds, PartitionScheme.strips((1, 8, 8), 4))
    return images, vd


def test_share_features_views():
    images, vd = _view_fixture()
    g = build_graph("line", [0, 1, 2])  # adversaries 0, 1, 2 of 4 clients
    views = share_features(g, vd)
    assert views[0].client_ids == (0, 1)
    assert views[1].client_ids == (0, 1, 2)
    assert views[2].client_ids == (1, 2)
    mat = views[1].matrix()
    assert mat.shape == (6, 8 * 6)  # three 2-wide strips, 8 rows
    manual = np.concatenate([vd.client_view(k).reshape(6, -1) for k in (0, 1, 2)], axis=1)
    np.testing.assert_array_equal(mat, manual)
    sub = views[1].matrix(np.array([2, 4]))
    np.testing.assert_array_equal(sub, manual[[2, 4]])


def test_share_features_no_copy_and_no_labels():
    _, vd = _view_fixture()
    g = build_graph("complete", [0, 1])
    views = share_features(g, vd)
    assert views[0].blocks[1] is vd.client_view(1)  # reference, not copy
    assert not hasattr(views[0], "labels")


def test_graph_frozen_after_build():
    g = build_graph("complete", [0, 1])
    with pytest.raises(Exception):
        g.nodes = (0, 1, 2)
