import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from swarmql.graph import Digraph, in_degree, is_strongly_connected, laplacian, neighbors


def ring3() -> Digraph:
    adj = np.zeros((3, 3))
    adj[0, 2] = adj[1, 0] = adj[2, 1] = 1.0
    return Digraph(adj, np.array([1.0, 0.0, 0.0]))


class TestInDegree:
    def test_ring_single_unit_edge(self):
        assert in_degree(ring3(), 0) == 1.0

    def test_no_incoming_edges(self):
        g = Digraph(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, 0.0]))
        assert in_degree(g, 0) == 0.0

    def test_sum_of_weights(self):
        adj = np.zeros((3, 3))
        adj[0, 1] = 0.5
        adj[0, 2] = 0.25
        adj[1, 0] = adj[2, 1] = 1.0
        g = Digraph(adj, np.array([1.0, 0.0, 0.0]))
        assert in_degree(g, 0) == pytest.approx(0.75)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            in_degree(ring3(), 3)


class TestLaplacian:
    def test_two_node_mutual(self):
        g = Digraph(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1.0, 0.0]))
        assert np.array_equal(laplacian(g), np.array([[1.0, -1.0], [-1.0, 1.0]]))

    def test_ring_is_identity_minus_permutation(self):
        perm = np.zeros((3, 3))
        perm[0, 2] = perm[1, 0] = perm[2, 1] = 1.0
        assert np.array_equal(laplacian(ring3()), np.eye(3) - perm)

    def test_empty_adjacency(self):
        g = Digraph(np.zeros((2, 2)), np.array([1.0, 0.0]))
        assert np.array_equal(laplacian(g), np.zeros((2, 2)))


class TestStrongConnectivity:
    def test_directed_ring(self):
        assert is_strongly_connected(ring3())

    def test_one_way_edge(self):
        g = Digraph(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([1.0, 0.0]))
        assert not is_strongly_connected(g)

    def test_single_node(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        assert is_strongly_connected(g)


class TestNeighbors:
    def test_ring_first_node(self):
        assert neighbors(ring3(), 0) == [2]

    def test_isolated_input_node(self):
        g = Digraph(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, 0.0]))
        assert neighbors(g, 0) == []

    def test_ascending_order(self):
        adj = np.zeros((3, 3))
        adj[0, 1] = adj[0, 2] = 1.0
        adj[1, 0] = adj[2, 0] = 1.0
        g = Digraph(adj, np.array([1.0, 0.0, 0.0]))
        assert neighbors(g, 0) == [1, 2]


class TestConstruction:
    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self loops"):
            Digraph(np.eye(2), np.array([1.0, 0.0]))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            Digraph(np.array([[0.0, -1.0], [1.0, 0.0]]), np.array([1.0, 0.0]))

    def test_all_zero_pinning_rejected(self):
        with pytest.raises(ValueError, match="pinning"):
            Digraph(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.0, 0.0]))


# dyadic weights keep every partial sum exactly representable, so the
# row-sum cancellation is exact rather than merely close
adjacency_strategy = st.integers(2, 5).flatmap(
    lambda n: st.lists(
        st.lists(st.integers(0, 20).map(lambda v: v / 2.0), min_size=n, max_size=n),
        min_size=n,
        max_size=n,
    )
)


@given(adjacency_strategy)
def test_laplacian_annihilates_ones_and_diag_is_in_degree(rows):
    adj = np.array(rows)
    np.fill_diagonal(adj, 0.0)
    pin = np.zeros(adj.shape[0])
    pin[0] = 1.0
    g = Digraph(adj, pin)
    lap = laplacian(g)
    assert np.array_equal(lap @ np.ones(adj.shape[0]), np.zeros(adj.shape[0]))
    for i in range(adj.shape[0]):
        assert lap[i, i] == in_degree(g, i)
        assert i not in neighbors(g, i)


def _closure_reachable(mask: np.ndarray) -> bool:
    # independent oracle: boolean Floyd-Warshall over edges j -> i
    n = mask.shape[0]
    reach = mask.T | np.eye(n, dtype=bool)  # reach[a, b]: path a -> b
    for k in range(n):
        reach |= reach[:, k : k + 1] & reach[k : k + 1, :]
    return bool(reach.all())


def test_strong_connectivity_matches_transitive_closure_oracle():
    for n in (1, 2, 3, 4):
        off_diag = [(i, j) for i in range(n) for j in range(n) if i != j]
        for bits in itertools.product((0.0, 1.0), repeat=len(off_diag)):
            adj = np.zeros((n, n))
            for (i, j), w in zip(off_diag, bits):
                adj[i, j] = w
            pin = np.zeros(n)
            pin[0] = 1.0
            g = Digraph(adj, pin)
            assert is_strongly_connected(g) == _closure_reachable(adj > 0)
