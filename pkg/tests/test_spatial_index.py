import numpy as np
import pytest

from tokenmap3d.errors import InvalidInput
from tokenmap3d.spatial_index import SpatialIndex, brute_min_distance, brute_radius, point_distances


def test_empty_index():
    idx = SpatialIndex(np.zeros((0, 3)))
    assert len(idx) == 0
    assert idx.min_distance([0, 0, 0]) == (float("inf"), None)
    assert idx.radius_query([0, 0, 0], 5.0) == []
    d, ids = idx.min_distances(np.zeros((4, 3)))
    assert np.isinf(d).all() and (ids == -1).all()


def test_single_point():
    idx = SpatialIndex([[1.0, 2.0, 3.0]], cell_size=0.5)
    d, i = idx.min_distance([1.0, 2.0, 5.0])
    assert i == 0 and d == pytest.approx(2.0)


def test_query_on_stored_point():
    pts = np.random.default_rng(0).uniform(size=(50, 3))
    idx = SpatialIndex(pts, 0.1)
    assert idx.min_distance(pts[7]) == (0.0, 7)
    assert 7 in idx.radius_query(pts[7], 1e-9)


def test_huge_radius_returns_everything():
    pts = np.random.default_rng(1).uniform(-5, 5, size=(200, 3))
    assert SpatialIndex(pts, 0.2).radius_query([0, 0, 0], 1e6) == list(range(200))


def test_radius_below_min_pairwise_distance():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    idx = SpatialIndex(pts, 0.3)
    assert idx.radius_query([0.1, 0, 0], 0.5) == [0]
    assert idx.radius_query([0.5, 0.5, 0.5], 0.5) == []


def test_nan_rejected():
    with pytest.raises(InvalidInput):
        SpatialIndex([[0.0, np.nan, 0.0]])


def test_cells_partition_points():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(1000, 3)).astype(np.float32)
    cs = 0.3
    idx = SpatialIndex(pts, cs)
    cells = idx.cells()
    listed = sorted(i for ids in cells.values() for i in ids)
    assert listed == list(range(1000))
    expected = {}
    for i, p in enumerate(pts.astype(np.float64)):
        expected.setdefault(tuple(int(c) for c in np.floor(p / cs)), []).append(i)
    assert {k: sorted(v) for k, v in cells.items()} == expected


def test_adversarial_nearest_in_far_cell():
    # The only point sits several empty cells away from the query cell.
    pts = np.array([[5.05, 0.0, 0.0], [0.0, 9.0, 0.0]])
    idx = SpatialIndex(pts, cell_size=0.1)
    q = np.array([0.0, 0.0, 0.0])
    assert idx.min_distance(q) == brute_min_distance(pts, q)
    # A corner point in the first ring loses to a face point two rings out.
    pts = np.array([[0.19, 0.19, 0.19], [0.0, 0.0, 0.28]])
    idx = SpatialIndex(pts, cell_size=0.1)
    q = np.array([0.05, 0.05, 0.05])
    assert idx.min_distance(q) == brute_min_distance(pts, q)


def test_ties_resolve_to_lowest_id():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
    assert SpatialIndex(pts, 0.25).min_distance([0, 0, 0]) == (1.0, 0)


def test_max_distance_cutoff():
    pts = np.array([[0, 0, 0], [3, 0, 0]], dtype=float)
    idx = SpatialIndex(pts, 0.5)
    d, ids = idx.min_distances(np.array([[1.0, 0, 0], [2.5, 0, 0], [10, 0, 0]]), max_distance=0.6)
    assert np.isinf(d[0]) and ids[0] == -1
    assert d[1] == 0.5 and ids[1] == 1
    assert np.isinf(d[2])


@pytest.mark.parametrize("seed", range(20))
def test_exact_against_brute_force(seed):
    # 20 seeds x 500 queries = 10,000 (points, query, radius) triples.
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    spread = float(rng.choice([0.1, 1.0, 20.0]))
    pts = rng.normal(scale=spread, size=(n, 3)).astype(np.float32)
    if seed % 3 == 0:
        pts = np.round(pts * 4) / 4  # many duplicates and exact ties
    cell = float(rng.choice([0.01, 0.1, 0.5, 2.0]))
    idx = SpatialIndex(pts, cell)
    qs = rng.normal(scale=spread * 1.5, size=(500, 3))
    radii = rng.uniform(0, spread, size=500)

    d, ids = idx.min_distances(qs)
    qi, pid, dist = idx.radius_pairs(qs, float(radii[0]))
    for j, q in enumerate(qs):
        bd, bi = brute_min_distance(pts, q)
        assert (d[j], ids[j]) == (bd, bi)
        assert idx.radius_query(q, radii[j]) == brute_radius(pts, q, radii[j])
        assert pid[qi == j].tolist() == brute_radius(pts, q, radii[0])
    assert np.array_equal(dist, point_distances(qs[qi], pts[pid]))


def test_batched_and_single_queries_agree():
    rng = np.random.default_rng(9)
    pts = rng.uniform(size=(300, 3))
    qs = rng.uniform(-0.5, 1.5, size=(100, 3))
    idx = SpatialIndex(pts, 0.07)
    d, ids = idx.min_distances(qs)
    for j, q in enumerate(qs):
        assert idx.min_distance(q) == (d[j], ids[j])
