"""Spatially hashed world-frame point map.

Points live in cubic voxels keyed by ``floor(p / voxel_size)``.  The three
integer coordinates are packed into one ``int64`` (21 bits each, offset
binary), which is an exact, collision-free key for any map within about a
million voxels of the origin along every axis.

Neighbor queries are vectorized over a frozen, key-sorted snapshot: for each
query the search covers its own voxel plus the six face-adjacent ones.  Ties
in distance are broken by insertion order (older point first).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1

STENCIL = np.array(
    [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)


@dataclass(frozen=True)
class MapConfig:
    voxel_size: float = 0.5
    max_points_per_voxel: int = 20
    search_voxels: int = 7
    cull_radius: float = 100.0
    min_insert_spacing: float = 0.25
    n_neighbors: int = 5
    # planarity: smallest eigenvalue at most this fraction of the middle one
    planarity_ratio: float = 0.1
    max_plane_distance: float = 0.1

    def __post_init__(self):
        for name in ("voxel_size", "cull_radius", "max_plane_distance", "planarity_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_points_per_voxel < 1 or self.n_neighbors < 3:
            raise ValueError("max_points_per_voxel must be >= 1 and n_neighbors >= 3")
        if self.min_insert_spacing < 0:
            raise ValueError("min_insert_spacing must be non-negative")
        if self.search_voxels != 7:
            raise ValueError("only the 7-voxel face stencil is supported")


def voxel_coords(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < -_OFFSET or c.max() >= _OFFSET):
        raise ValueError("voxel coordinate outside the representable range")
    u = c + _OFFSET
    return (u[..., 0] << (2 * _BITS)) | (u[..., 1] << _BITS) | u[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    return np.stack([(k >> (2 * _BITS)) & _MASK, (k >> _BITS) & _MASK, k & _MASK], axis=-1) - _OFFSET


@dataclass
class InsertReport:
    inserted: int
    rejected_full: int
    rejected_spacing: int

    @property
    def rejected(self) -> int:
        return self.rejected_full + self.rejected_spacing


@dataclass
class Neighbors:
    """k-NN result for a batch of queries.

    ``points`` is ``(M, k, 3)`` sorted by ascending distance; rows with fewer
    than ``k`` neighbors are padded with NaN and ``count`` tells how many are real.
    """

    points: np.ndarray
    dist2: np.ndarray
    count: np.ndarray


@dataclass
class Planes:
    q: np.ndarray  # nearest neighbor
    n: np.ndarray
    valid: np.ndarray


class VoxelMap:
    def __init__(self, config: MapConfig = MapConfig()):
        self.config = config
        cap = 64
        m = config.max_points_per_voxel
        self._slot: dict[int, int] = {}
        self._keys = np.zeros(cap, dtype=np.int64)
        self._pts = np.zeros((cap, m, 3))
        self._seq = np.zeros((cap, m), dtype=np.int64)
        self._count = np.zeros(cap, dtype=np.int64)
        self._alive = np.zeros(cap, dtype=bool)
        self._used = 0
        self._next_seq = 0
        self._snapshot = None

    # -- bookkeeping ------------------------------------------------------------
    def __len__(self) -> int:
        return int(self._count[: self._used][self._alive[: self._used]].sum())

    @property
    def n_voxels(self) -> int:
        return len(self._slot)

    def _grow(self):
        cap = 2 * len(self._keys)
        m = self.config.max_points_per_voxel

        def extend(a, shape_tail, dtype):
            out = np.zeros((cap,) + shape_tail, dtype=dtype)
            out[: len(a)] = a
            return out

        self._keys = extend(self._keys, (), np.int64)
        self._pts = extend(self._pts, (m, 3), float)
        self._seq = extend(self._seq, (m,), np.int64)
        self._count = extend(self._count, (), np.int64)
        self._alive = extend(self._alive, (), bool)

    def _new_slot(self, key: int) -> int:
        if self._used == len(self._keys):
            self._compact()
            if self._used == len(self._keys):
                self._grow()
        s = self._used
        self._used += 1
        self._keys[s] = key
        self._count[s] = 0
        self._alive[s] = True
        self._slot[key] = s
        return s

    def _compact(self):
        live = np.flatnonzero(self._alive[: self._used])
        if len(live) == self._used:
            return
        n = len(live)
        for arr in (self._keys, self._pts, self._seq, self._count, self._alive):
            arr[:n] = arr[live]
        self._alive[n:] = False
        self._used = n
        self._slot = {int(k): i for i, k in enumerate(self._keys[:n])}

    def _invalidate(self):
        self._snapshot = None

    def points(self) -> np.ndarray:
        slots = np.flatnonzero(self._alive[: self._used])
        if len(slots) == 0:
            return np.zeros((0, 3))
        m = self.config.max_points_per_voxel
        mask = np.arange(m)[None, :] < self._count[slots][:, None]
        return self._pts[slots][mask]

    def content_hash(self) -> str:
        slots = np.flatnonzero(self._alive[: self._used])
        slots = slots[np.argsort(self._keys[slots])]
        h = hashlib.sha256()
        for s in slots:
            c = self._count[s]
            h.update(self._keys[s].tobytes())
            h.update(self._pts[s, :c].tobytes())
        return h.hexdigest()

    # -- mutation ---------------------------------------------------------------
    def insert(self, points) -> InsertReport:
        """Add world points, skipping full voxels and near-duplicates."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return InsertReport(0, 0, 0)
        if not np.all(np.isfinite(pts)):
            raise ValueError("cannot insert non-finite points")
        cfg = self.config
        keys = pack_keys(voxel_coords(pts, cfg.voxel_size))
        slots = np.array([self._slot.get(int(k), -1) for k in keys], dtype=np.int64)
        have = slots >= 0
        cnt = np.where(have, self._count[np.maximum(slots, 0)], 0)
        full = have & (cnt >= cfg.max_points_per_voxel)
        close = np.zeros(len(pts), dtype=bool)
        spacing2 = cfg.min_insert_spacing**2
        check = have & ~full
        if cfg.min_insert_spacing > 0 and np.any(check):
            idx = np.flatnonzero(check)
            vox = self._pts[slots[idx]]
            valid = np.arange(cfg.max_points_per_voxel)[None, :] < cnt[idx][:, None]
            d2 = np.sum((vox - pts[idx, None, :]) ** 2, axis=-1)
            d2 = np.where(valid, d2, np.inf)
            close[idx] = d2.min(axis=1) < spacing2
        n_full = int(full.sum())
        n_close = int(close.sum())
        n_ins = 0
        cand = np.flatnonzero(~full & ~close)
        # candidates may still conflict with each other inside a voxel: process in order
        order = cand[np.argsort(keys[cand], kind="stable")]
        i = 0
        while i < len(order):
            j = i
            key = keys[order[i]]
            while j < len(order) and keys[order[j]] == key:
                j += 1
            group = order[i:j]
            s = self._slot.get(int(key))
            if s is None:
                s = self._new_slot(int(key))
            for g in group:
                c = self._count[s]
                if c >= cfg.max_points_per_voxel:
                    n_full += 1
                    continue
                if spacing2 > 0 and c > 0 and np.min(np.sum((self._pts[s, :c] - pts[g]) ** 2, axis=1)) < spacing2:
                    n_close += 1
                    continue
                self._pts[s, c] = pts[g]
                self._seq[s, c] = self._next_seq
                self._next_seq += 1
                self._count[s] = c + 1
                n_ins += 1
            i = j
        if n_ins:
            self._invalidate()
        return InsertReport(n_ins, n_full, n_close)

    def cull(self, center) -> int:
        """Remove voxels whose centers are farther than ``cull_radius`` from ``center``.

        Returns the number of removed points.  A voxel exactly at the radius is kept.
        """
        slots = np.flatnonzero(self._alive[: self._used])
        if len(slots) == 0:
            return 0
        size = self.config.voxel_size
        centers = (unpack_keys(self._keys[slots]) + 0.5) * size
        d = np.linalg.norm(centers - np.asarray(center, dtype=float), axis=1)
        drop = slots[d > self.config.cull_radius]
        if len(drop) == 0:
            return 0
        removed = int(self._count[drop].sum())
        for s in drop:
            del self._slot[int(self._keys[s])]
        self._alive[drop] = False
        self._count[drop] = 0
        self._invalidate()
        return removed

    # -- queries ----------------------------------------------------------------
    def _snap(self):
        if self._snapshot is None:
            slots = np.flatnonzero(self._alive[: self._used])
            order = np.argsort(self._keys[slots])
            slots = slots[order]
            self._snapshot = (self._keys[slots], slots)
        return self._snapshot

    def nearest_neighbors(self, queries, k: int | None = None) -> Neighbors:
        """Exact k-NN over the 7-voxel stencil around each query (batched)."""
        k = self.config.n_neighbors if k is None else int(k)
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        M = len(q)
        skeys, sslots = self._snap()
        out_pts = np.full((M, k, 3), np.nan)
        out_d2 = np.full((M, k), np.inf)
        if len(skeys) == 0 or M == 0:
            return Neighbors(out_pts, out_d2, np.zeros(M, dtype=np.int64))
        coords = voxel_coords(q, self.config.voxel_size)[:, None, :] + STENCIL[None]
        nkeys = pack_keys(coords)  # (M, 7)
        pos = np.searchsorted(skeys, nkeys)
        pos_c = np.minimum(pos, len(skeys) - 1)
        found = skeys[pos_c] == nkeys
        slot = np.where(found, sslots[pos_c], 0)
        cnt = np.where(found, self._count[slot], 0)
        # only the occupied prefix of each voxel's slots is gathered
        m = max(int(cnt.max()), 1)
        cand = self._pts[slot, :m].reshape(M, 7 * m, 3)
        seq = self._seq[slot, :m].reshape(M, 7 * m)
        valid = (np.arange(m)[None, None, :] < cnt[:, :, None]).reshape(M, 7 * m)
        d2 = np.sum((cand - q[:, None, :]) ** 2, axis=-1)
        d2 = np.where(valid, d2, np.inf)
        seq = np.where(valid, seq, np.iinfo(np.int64).max)
        rows = np.arange(M)[:, None]
        if k < 7 * m:
            part = np.argpartition(d2, k - 1, axis=-1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(7 * m), (M, 7 * m))
        # ascending distance, ties broken by insertion order
        order = part[rows, np.lexsort((seq[rows, part], d2[rows, part]), axis=-1)]
        got_d2 = d2[rows, order]
        real = np.isfinite(got_d2)
        kk = order.shape[1]
        out_d2[:, :kk] = got_d2
        out_pts[:, :kk] = np.where(real[..., None], cand[rows, order], np.nan)
        return Neighbors(out_pts, out_d2, real.sum(axis=1))

    def plane_correspondences(self, queries, sensor_positions=None) -> Planes:
        """Nearest point and fitted plane normal for every query."""
        nb = self.nearest_neighbors(queries)
        n, valid = estimate_normals(nb.points, nb.count, self.config, queries, sensor_positions)
        q = np.where(nb.count[:, None] > 0, nb.points[:, 0], np.nan)
        return Planes(q, n, valid & (nb.count > 0))

    # -- export -----------------------------------------------------------------
    def write_ply(self, path, binary: bool = False) -> None:
        pts = self.points()
        header = (
            "ply\n"
            f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
            f"element vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        )
        path = Path(path)
        if binary:
            path.write_bytes(header.encode() + pts.astype("<f8").tobytes())
        else:
            body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts)
            path.write_text(header + body)


def estimate_normals(neighbors, count, config: MapConfig = MapConfig(), queries=None, sensor_positions=None):
    """PCA plane normals for batches of neighbor sets.

    ``neighbors`` is ``(M, k, 3)`` (NaN padded), ``count`` the number of real
    points per row.  A normal is valid when at least ``config.n_neighbors``
    points are present, the smallest covariance eigenvalue is at most
    ``planarity_ratio`` times the middle one, the points are not collinear, and
    every point lies within ``max_plane_distance`` of the fitted plane.

    Sign convention: towards the sensor when ``queries`` and
    ``sensor_positions`` are given, otherwise first non-zero component positive.
    """
    P = np.asarray(neighbors, dtype=float)
    if P.ndim == 2:
        P = P[None]
    count = np.broadcast_to(np.asarray(count), P.shape[:1])
    M, k, _ = P.shape
    mask = np.arange(k)[None, :] < count[:, None]
    enough = count >= config.n_neighbors
    X = np.where(mask[..., None], P, 0.0)
    w = np.maximum(count, 1)[:, None]
    mean = X.sum(axis=1) / w
    D = np.where(mask[..., None], P - mean[:, None, :], 0.0)
    cov = np.einsum("mki,mkj->mij", D, D) / w[..., None]
    lam, vec = np.linalg.eigh(cov)
    n = vec[:, :, 0]
    planar = lam[:, 0] <= config.planarity_ratio * lam[:, 1]
    spread = lam[:, 1] > 1e-12 + 1e-3 * lam[:, 2]  # rejects collinear sets
    dist = np.abs(np.einsum("mki,mi->mk", D, n))
    flat = np.where(mask, dist, 0.0).max(axis=1) < config.max_plane_distance
    valid = enough & planar & spread & flat
    if queries is not None and sensor_positions is not None:
        to_sensor = np.atleast_2d(sensor_positions) - np.atleast_2d(queries)
        flip = np.einsum("mi,mi->m", n, to_sensor) < 0
    else:
        first = np.argmax(np.abs(n) > 1e-12, axis=1)
        flip = n[np.arange(M), first] < 0
    n = np.where(flip[:, None], -n, n)
    return n, valid


def estimate_normal(neighbors, config: MapConfig = MapConfig(), query=None, sensor_position=None):
    """Single-set version of :func:`estimate_normals`; returns ``(n, valid)``."""
    P = np.atleast_2d(np.asarray(neighbors, dtype=float))
    q = None if query is None else np.atleast_2d(query)
    s = None if sensor_position is None else np.atleast_2d(sensor_position)
    n, valid = estimate_normals(P[None], np.array([len(P)]), config, q, s)
    return n[0], bool(valid[0])
