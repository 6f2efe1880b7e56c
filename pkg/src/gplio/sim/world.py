"""Worlds built from finite rectangular planar patches, with batched ray casting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Patch:
    """Rectangle ``corner + u e1 + v e2`` for ``u, v`` in ``[0, 1]``; ``e1`` orthogonal to ``e2``."""

    corner: tuple
    e1: tuple
    e2: tuple

    def __post_init__(self):
        e1 = np.asarray(self.e1, dtype=float)
        e2 = np.asarray(self.e2, dtype=float)
        if np.linalg.norm(np.cross(e1, e2)) < 1e-9 * max(1.0, np.linalg.norm(e1) * np.linalg.norm(e2)):
            raise ValueError("patch edges are degenerate")
        if abs(e1 @ e2) > 1e-9 * np.linalg.norm(e1) * np.linalg.norm(e2):
            raise ValueError("patch edges must be orthogonal")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class PlaneWorld:
    patches: tuple

    def __post_init__(self):
        if not self.patches:
            raise ValueError("world has no surfaces")

    def _arrays(self):
        c = np.array([p.corner for p in self.patches], dtype=float)
        e1 = np.array([p.e1 for p in self.patches], dtype=float)
        e2 = np.array([p.e2 for p in self.patches], dtype=float)
        n = np.array([p.normal for p in self.patches])
        return c, e1, e2, n

    def raycast(self, origins, dirs, max_range: float = np.inf):
        """First hit along each ray.

        Returns ``(range, patch_index)``; misses have ``inf`` range and index -1.
        ``dirs`` must be unit vectors.
        """
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        c, e1, e2, n = self._arrays()
        denom = d @ n.T  # (N, P)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("pi,pi->p", c, n)[None, :] - o @ n.T
            t = t / denom
            hit = o[:, None, :] + t[..., None] * d[:, None, :]
            rel = hit - c[None]
            u = np.einsum("npi,pi->np", rel, e1) / np.sum(e1 * e1, axis=1)
            v = np.einsum("npi,pi->np", rel, e2) / np.sum(e2 * e2, axis=1)
        ok = (np.abs(denom) > 1e-12) & (t > 0) & (t <= max_range) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        t = np.where(ok, t, np.inf)
        idx = np.argmin(t, axis=1)
        rng = t[np.arange(len(t)), idx]
        idx = np.where(np.isfinite(rng), idx, -1)
        return rng, idx


def floor_patch(size: float = 60.0, z: float = 0.0, center=(0.0, 0.0)) -> Patch:
    cx, cy = center
    return Patch((cx - size / 2, cy - size / 2, z), (size, 0.0, 0.0), (0.0, size, 0.0))


def room_corner(x_wall: float = -6.0, y_wall: float = -6.0, extent: float = 40.0, height: float = 10.0) -> PlaneWorld:
    """Floor plus two orthogonal walls (three mutually orthogonal planes)."""
    floor = Patch((x_wall, y_wall, 0.0), (extent, 0.0, 0.0), (0.0, extent, 0.0))
    wall_x = Patch((x_wall, y_wall, 0.0), (0.0, extent, 0.0), (0.0, 0.0, height))
    wall_y = Patch((x_wall, y_wall, 0.0), (0.0, 0.0, height), (extent, 0.0, 0.0))
    return PlaneWorld((floor, wall_x, wall_y))


def single_plane(size: float = 60.0) -> PlaneWorld:
    return PlaneWorld((floor_patch(size),))


def box_room(half_x: float = 8.0, half_y: float = 8.0, height: float = 5.0) -> PlaneWorld:
    """Closed rectangular room centered on the origin (floor, ceiling, four walls)."""
    x0, y0 = -half_x, -half_y
    lx, ly = 2 * half_x, 2 * half_y
    return PlaneWorld((
        Patch((x0, y0, 0.0), (lx, 0, 0), (0, ly, 0)),
        Patch((x0, y0, height), (0, ly, 0), (lx, 0, 0)),
        Patch((x0, y0, 0.0), (0, ly, 0), (0, 0, height)),
        Patch((-x0, y0, 0.0), (0, 0, height), (0, ly, 0)),
        Patch((x0, y0, 0.0), (0, 0, height), (lx, 0, 0)),
        Patch((x0, -y0, 0.0), (lx, 0, 0), (0, 0, height)),
    ))


WORLDS = {"room_corner": room_corner, "single_plane": single_plane, "box_room": box_room}


def make_world(name: str, **kwargs) -> PlaneWorld:
    try:
        return WORLDS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown world {name!r}; expected one of {sorted(WORLDS)}") from None
