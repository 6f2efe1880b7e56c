"""Voxel map checks against brute force.  Shared by the unit and acceptance suites."""

import numpy as np

from gplio.voxel_map import MapConfig, VoxelMap

def brute_force_knn(points, query, k, size):
    """k nearest map points among those whose voxel is the query's or a face neighbor.

    The face stencil is exactly the set of voxels at L1 offset <= 1.
    """
    home = np.floor(np.asarray(query) / size)
    near = np.abs(np.floor(points / size) - home).sum(axis=1) <= 1
    cand = points[near]
    d2 = np.sum((cand - query) ** 2, axis=1)
    return cand[np.argsort(d2, kind="stable")[:k]]


def check_capacity(rng, capacity=20):
    """No voxel ever holds more than ``capacity`` points.  Returns the fullest voxel count."""
    m = VoxelMap(MapConfig(max_points_per_voxel=capacity, min_insert_spacing=0.0))
    one = rng.uniform(0.0, 0.5, size=(5 * capacity, 3))  # all in voxel (0, 0, 0)
    rep = m.insert(one)
    assert rep.inserted == capacity and rep.rejected_full == 4 * capacity
    for _ in range(5):
        m.insert(rng.normal(size=(2000, 3)) * 1.5)
    _, counts = np.unique(np.floor(m.points() / m.config.voxel_size), axis=0, return_counts=True)
    assert counts.max() <= capacity
    return int(counts.max())


def check_knn(rng, n_queries=1000, k=5):
    """Batched 7-voxel kNN equals a per-query brute-force search.  Returns the query count."""
    m = VoxelMap(MapConfig(min_insert_spacing=0.0))
    m.insert(rng.uniform(-3, 3, size=(4000, 3)))
    pts = m.points()
    q = rng.uniform(-3.5, 3.5, size=(n_queries, 3))
    nb = m.nearest_neighbors(q, k)
    for i in range(n_queries):
        ref = brute_force_knn(pts, q[i], k, m.config.voxel_size)
        assert nb.count[i] == len(ref)
        np.testing.assert_array_equal(nb.points[i, : len(ref)], ref)
        np.testing.assert_allclose(nb.dist2[i, : len(ref)], np.sum((ref - q[i]) ** 2, axis=1), rtol=1e-12)
        assert np.all(np.isnan(nb.points[i, len(ref):]))
    return n_queries


def check_cull(rng, radius=100.0):
    """Voxels with centers beyond ``radius`` are removed and all others kept,
    including one whose center lies exactly on the radius."""
    cfg = MapConfig(cull_radius=radius, min_insert_spacing=0.0)
    m = VoxelMap(cfg)
    size = cfg.voxel_size
    edge = (np.floor(rng.uniform(-5, 5, size=3) / size) + 0.5) * size
    center = edge - [radius, 0.0, 0.0]  # exact in binary floating point
    dirs = rng.normal(size=(3000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = center + dirs * rng.uniform(radius - 3, radius + 3, size=(3000, 1))
    m.insert(np.vstack([pts, edge + 0.1]))
    before = m.points()
    removed = m.cull(center)
    after = m.points()
    centers = (np.floor(before / size) + 0.5) * size
    keep = np.linalg.norm(centers - center, axis=1) <= radius
    assert removed == int((~keep).sum())
    np.testing.assert_array_equal(np.sort(after, axis=0), np.sort(before[keep], axis=0))
    assert np.any(np.all(after == edge + 0.1, axis=1))
    assert 0 < len(after) < len(before)
    return removed


def run_all(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "capacity": check_capacity(rng),
        "knn": check_knn(rng),
        "cull": check_cull(rng),
    }
