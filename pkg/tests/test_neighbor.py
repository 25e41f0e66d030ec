import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from lgr.core import PeriodicBox, wrap_position
from lgr.errors import EmptyInput, RadiusTooLarge
from lgr.neighbor import (
    average_interparticle_distance,
    brute_force_pair_keys,
    brute_force_pairs,
    build_cell_grid,
    build_neighbor_list,
)


def kdtree_pairs(pos, box, radius):
    """Independent oracle: scipy's periodic k-d tree (closed ball, ties are measure zero)."""
    tree = cKDTree(pos, boxsize=box.extents)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    return {(int(i), int(j)) for i, j in pairs} | {(int(j), int(i)) for i, j in pairs}


def jittered_lattice(c, box, amp, rng):
    g = (np.arange(c) + 0.5) / c
    p = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) * box.extents
    return wrap_position(p + rng.uniform(-amp, amp, p.shape), box)


class TestExamples:
    def test_two_close_particles(self, unit_box):
        pos = np.array([[0.5, 0.5, 0.5], [0.55, 0.5, 0.5]])
        nl = build_neighbor_list(pos, unit_box, 0.075)
        assert list(nl.neighbors(0)) == [1] and list(nl.neighbors(1)) == [0]

    def test_pair_across_boundary(self, unit_box):
        pos = np.array([[0.01, 0.0, 0.0], [0.99, 0.0, 0.0]])
        nl = build_neighbor_list(pos, unit_box, 0.075)
        assert nl.as_pairs() == {(0, 1), (1, 0)}

    def test_lattice_mean_degree_in_band(self, unit_box, rng):
        pos = jittered_lattice(20, unit_box, 0.05 / 20, rng)
        nl = build_neighbor_list(pos, unit_box, 1.5 * 0.05)
        assert 10 <= nl.mean_degree() <= 20

    def test_strict_boundary(self, unit_box):
        pos = np.array([[0.25, 0.5, 0.5], [0.5, 0.5, 0.5]])
        assert build_neighbor_list(pos, unit_box, 0.25).n_pairs == 0
        assert build_neighbor_list(pos, unit_box, 0.2500001).n_pairs == 2


class TestErrors:
    def test_empty(self, unit_box):
        with pytest.raises(EmptyInput):
            build_neighbor_list(np.zeros((0, 3)), unit_box, 0.1)

    def test_radius_too_large(self):
        with pytest.raises(RadiusTooLarge):
            build_neighbor_list(np.zeros((2, 3)), PeriodicBox((1, 2, 0.5)), 0.26)

    def test_half_extent_allowed(self):
        build_neighbor_list(np.zeros((2, 3)), PeriodicBox((1, 1, 1)), 0.5)


class TestAverageDistance:
    @pytest.mark.parametrize("n, L, expected", [
        (8000, (1, 1, 1), 0.05), (1, (1, 1, 1), 1.0), (8000, (1, 2, 0.5), 0.05)])
    def test_examples(self, n, L, expected):
        assert average_interparticle_distance(n, PeriodicBox(L)) == pytest.approx(expected)


class TestCellGrid:
    @pytest.mark.parametrize("reach", [1, 2])
    def test_cells_cover_radius(self, unit_box, rng, reach):
        pos = rng.random((200, 3))
        g = build_cell_grid(pos, unit_box, 0.07, reach)
        assert np.all(g.cell_size * reach >= 0.07)
        assert g.cell_start[-1] == 200
        # every particle sits in the bucket it claims
        for c in range(len(g.cell_start) - 1):
            members = g.order[g.cell_start[c]:g.cell_start[c + 1]]
            assert np.all(g.cell_of[members] == c)


@pytest.mark.parametrize("L", [(1, 1, 1), (1, 2, 0.5), (0.3, 0.3, 0.3), (2.0, 0.7, 1.3)])
@pytest.mark.parametrize("frac", [0.05, 0.2, 0.35, 0.5])
def test_matches_oracles(L, frac, rng):
    """Fine cells, coarse cells and brute force all agree with both oracles."""
    box = PeriodicBox(L)
    pos = rng.random((300, 3)) * np.asarray(L)
    radius = frac * min(L)
    nl = build_neighbor_list(pos, box, radius)
    ref = brute_force_pairs(pos, box, radius)
    assert nl.as_pairs() == ref
    assert ref == kdtree_pairs(pos, box, radius)


@given(st.integers(1, 120), st.floats(0.02, 0.5), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_csr_invariants(n, frac, seed):
    box = PeriodicBox((1.0, 1.5, 0.8))
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 3)) * box.extents
    nl = build_neighbor_list(pos, box, frac * 0.8)
    assert nl.offsets[0] == 0 and nl.offsets[-1] == nl.n_pairs
    assert np.all(np.diff(nl.offsets) >= 0)
    pairs = nl.as_pairs()
    for i in range(n):
        row = nl.neighbors(i)
        assert np.all(np.diff(row) > 0)  # sorted and unique
        assert i not in row
    assert all((j, i) in pairs for i, j in pairs)  # symmetric


def test_translation_invariance(rng):
    box = PeriodicBox((1, 2, 0.5))
    pos = rng.random((500, 3)) * box.extents
    nl = build_neighbor_list(pos, box, 0.1)
    shifted = wrap_position(pos + np.array([0.37, -1.3, 0.21]), box)
    nl2 = build_neighbor_list(shifted, box, 0.1)
    assert nl.as_pairs() == nl2.as_pairs()


def test_deterministic(rng):
    box = PeriodicBox((1, 1, 1))
    pos = rng.random((800, 3))
    a = build_neighbor_list(pos, box, 0.09)
    b = build_neighbor_list(pos.copy(), box, 0.09)
    np.testing.assert_array_equal(a.offsets, b.offsets)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_dense_cluster_grows_capacity():
    # far more pairs than the uniform-density estimate allows for
    box = PeriodicBox((1, 1, 1))
    pos = np.random.default_rng(0).random((400, 3)) * 0.02 + 0.5
    nl = build_neighbor_list(pos, box, 0.05)
    assert nl.n_pairs == 400 * 399


def test_pair_keys_match_pair_sets(rng):
    box = PeriodicBox((1.0, 0.8, 1.3))
    pos = rng.random((700, 3)) * box.extents
    nl = build_neighbor_list(pos, box, 0.12)
    keys = nl.pair_keys()
    assert {(int(k) // 700, int(k) % 700) for k in keys} == nl.as_pairs()
    np.testing.assert_array_equal(keys, brute_force_pair_keys(pos, box, 0.12, block=64))
