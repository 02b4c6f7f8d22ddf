import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predsls import topology as tp


def test_chain_distances_and_diameter():
    g = tp.chain(16)
    assert g.diameter == 15
    assert g.dist[0, 15] == 15
    assert np.array_equal(tp.neighborhood(g, 0, 2), [0, 1, 2])
    assert np.array_equal(tp.neighborhood(g, 7, 1), [6, 7, 8])


def test_presets():
    assert tp.cycle(8).diameter == 4
    assert tp.star(5).diameter == 2
    assert tp.star(5).node_count == 6
    assert tp.mesh(3, 4).diameter == 5
    t = tp.tree(2, 3)
    assert t.node_count == 15
    assert t.diameter == 6


def test_expansion_bound_chain():
    # shells of size two exist only while both sides of the middle node are long enough
    g = tp.expansion_bound(tp.chain(16))
    assert np.array_equal(g, [1] + [2] * 7 + [1] * 8)


def test_from_spec_and_edge_list(tmp_path):
    assert tp.from_spec("chain:5").diameter == 4
    assert tp.from_spec("mesh:2,2").node_count == 4
    path = tmp_path / "g.txt"
    path.write_text("# comment\n1 2\n2 3\n")
    g = tp.from_spec(str(path))
    assert g.node_count == 3 and g.diameter == 2
    with pytest.raises(ValueError):
        tp.from_spec("tree:2")


def test_edge_list_rejects_zero_labels(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("0 1\n")
    with pytest.raises(ValueError):
        tp.read_edge_list(path)


def test_disconnected_graph():
    g = tp.Topology.from_edges(4, [(0, 1), (2, 3)])
    assert not g.connected
    assert g.diameter == 1
    assert np.array_equal(tp.neighborhood(g, 0, 10), [0, 1])


def test_block_mask_expands_nodes():
    mask = tp.block_mask(np.array([[True, False], [False, True]]), [2, 1], [1, 2])
    expected = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 1]], dtype=bool)
    assert np.array_equal(mask, expected)


def test_truncate_and_boundary_select_rows():
    g = tp.chain(6)
    M = np.arange(36.0).reshape(6, 6)
    inner = tp.truncate(M, g, 2, 1)
    shell = tp.boundary(M, g, 2, 1)
    assert np.array_equal(inner[[1, 2, 3]], M[[1, 2, 3]])
    assert not inner[[0, 4, 5]].any()
    assert np.array_equal(shell[[0, 4]], M[[0, 4]])
    assert not shell[[1, 2, 3, 5]].any()


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 9))
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    edges = draw(st.lists(st.sampled_from(pairs), max_size=15)) if pairs else []
    return tp.Topology.from_edges(n, edges)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_distance_is_a_metric(g):
    d = g.dist
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    finite = d != tp.UNREACHABLE
    n = g.node_count
    for k in range(n):
        via = np.where(finite[:, [k]] & finite[[k], :], d[:, [k]] + d[[k], :], tp.UNREACHABLE)
        assert np.all(d <= via)


@settings(max_examples=60, deadline=None)
@given(graphs(), st.integers(0, 6))
def test_neighborhoods_nested(g, kappa):
    for i in range(g.node_count):
        small = set(tp.neighborhood(g, i, kappa))
        big = set(tp.neighborhood(g, i, kappa + 1))
        assert i in small and small <= big


@settings(max_examples=40, deadline=None)
@given(graphs())
def test_expansion_bound_covers_every_shell(g):
    table = tp.expansion_bound(g)
    for i in range(g.node_count):
        for d in range(len(table)):
            assert (g.dist[i] == d).sum() <= table[d]
