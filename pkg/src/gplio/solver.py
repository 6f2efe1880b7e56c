"""Sliding-window MAP estimation over GP knots.

The module has two layers.

* Generic linear algebra on knot-blocked systems: accumulating factor blocks
  into normal equations, the block-tridiagonal solve, and Schur-complement
  marginalization.  These work on plain vectors and are what the
  linear-Gaussian tests exercise.
* :class:`Window`, which holds ``K + 1`` :class:`~gplio.trajectory.KnotState`
  objects plus the measurements of their ``K`` segments, and runs
  Gauss-Newton with a Levenberg fallback over them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import so3
from .factors import (
    NoiseModel,
    accel_residuals,
    body_points,
    gp_prior_residual,
    gyro_residuals,
    lidar_residuals,
    usable_imu,
)
from .gp_prior import HybridPrior
from .measurements import MeasurementBatch
from .trajectory import Extrinsics, Gravity, KnotState, interpolate_batch, propagate
from .voxel_map import estimate_normals

log = logging.getLogger(__name__)


# -- generic knot-blocked systems ---------------------------------------------------


@dataclass
class FactorBlock:
    """Linearized factor touching knots ``first .. first + m - 1``.

    ``J`` has shape ``(r, m * D)``, ``e`` shape ``(r,)`` and ``W`` ``(r, r)``
    (or ``None`` for identity).  Contributes ``0.5 e^T W e``.
    """

    first: int
    J: np.ndarray
    e: np.ndarray
    W: np.ndarray | None = None

    def info(self):
        JW = self.J.T if self.W is None else self.J.T @ self.W
        return JW @ self.J, JW @ self.e, 0.5 * float(self.e @ (self.e if self.W is None else self.W @ self.e))


@dataclass
class NormalEquations:
    """``H dx = -b`` over ``n`` knots of dimension ``D``.  ``energy`` is at ``dx = 0``."""

    H: np.ndarray
    b: np.ndarray
    D: int
    energy: float = 0.0

    @classmethod
    def zeros(cls, n_knots: int, D: int) -> "NormalEquations":
        return cls(np.zeros((n_knots * D, n_knots * D)), np.zeros(n_knots * D), D)

    @property
    def n_knots(self) -> int:
        return len(self.b) // self.D

    def block(self, i: int, j: int) -> np.ndarray:
        D = self.D
        return self.H[i * D:(i + 1) * D, j * D:(j + 1) * D]

    def add(self, first: int, H: np.ndarray, b: np.ndarray, energy: float = 0.0) -> None:
        s = slice(first * self.D, first * self.D + len(b))
        self.H[s, s] += H
        self.b[s] += b
        self.energy += energy

    def add_factor(self, f: FactorBlock) -> None:
        self.add(f.first, *f.info())


def accumulate(blocks, n_knots: int, D: int) -> NormalEquations:
    ne = NormalEquations.zeros(n_knots, D)
    for f in blocks:
        ne.add_factor(f)
    return ne


def solve_block_tridiagonal(H: np.ndarray, rhs: np.ndarray, D: int) -> np.ndarray:
    """Solve ``H x = rhs`` for SPD block-tridiagonal ``H`` (blocks of size ``D``).

    Block LDL^T forward elimination then back substitution; raises
    ``numpy.linalg.LinAlgError`` if a pivot block is not positive definite.
    """
    n = len(rhs) // D
    blk = lambda i, j: H[i * D:(i + 1) * D, j * D:(j + 1) * D]  # noqa: E731
    pivots = []
    y = []
    for i in range(n):
        Dii = blk(i, i).copy()
        yi = rhs[i * D:(i + 1) * D].copy()
        if i > 0:
            L = blk(i, i - 1)
            # C = H_{i,i-1} D_{i-1}^-1
            C = cho_solve(pivots[-1], L.T).T
            Dii -= C @ blk(i - 1, i)
            yi -= C @ y[-1]
        try:
            pivots.append(cho_factor(Dii, check_finite=False))
        except np.linalg.LinAlgError:
            raise
        if not np.all(np.diag(pivots[-1][0]) > 0):
            raise np.linalg.LinAlgError("pivot block is not positive definite")
        y.append(yi)
    x = np.zeros_like(rhs)
    for i in reversed(range(n)):
        r = y[i]
        if i < n - 1:
            r = r - blk(i, i + 1) @ x[(i + 1) * D:(i + 2) * D]
        x[i * D:(i + 1) * D] = cho_solve(pivots[i], r)
    return x


def solve_dense(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.linalg.solve(H, rhs)


def solve_step(ne: NormalEquations, damping: float = 0.0, dense: bool = False) -> np.ndarray:
    """Gauss-Newton increment ``-(H + damping I)^-1 b``."""
    H = ne.H if damping == 0 else ne.H + damping * np.eye(len(ne.b))
    if dense:
        return -solve_dense(H, ne.b)
    return -solve_block_tridiagonal(H, ne.b, ne.D)


def schur_marginalize(H: np.ndarray, b: np.ndarray, n_drop: int, clamp_tol: float = 0.0):
    """Eliminate the first ``n_drop`` variables from ``(H, b)``.

    ``H_m = H11 - H10 H00^-1 H01`` and ``b_m = b1 - H10 H00^-1 b0``.  Negative
    eigenvalues of the result (round-off or inconsistent linearization) are
    clamped to zero with a warning.
    """
    H00 = H[:n_drop, :n_drop]
    H01 = H[:n_drop, n_drop:]
    H11 = H[n_drop:, n_drop:]
    b0 = b[:n_drop]
    b1 = b[n_drop:]
    try:
        c = cho_factor(H00, check_finite=False)
        X = cho_solve(c, np.column_stack([H01, b0]))
    except np.linalg.LinAlgError:
        X = np.linalg.pinv(H00) @ np.column_stack([H01, b0])
    Hm = H11 - H01.T @ X[:, :-1]
    bm = b1 - H01.T @ X[:, -1]
    Hm = 0.5 * (Hm + Hm.T)
    lam, vec = np.linalg.eigh(Hm)
    if lam.min() < -clamp_tol * max(1.0, abs(lam.max())):
        log.warning("marginal information had negative eigenvalue %.3g; clamped", lam.min())
    if lam.min() < 0:
        Hm = (vec * np.maximum(lam, 0.0)) @ vec.T
    return Hm, bm


# -- marginal prior on one knot -------------------------------------------------------


@dataclass
class MarginalPrior:
    """Quadratic energy ``0.5 r^T H r + b^T r`` with ``r = x (-) x_lin``.

    ``x_lin`` is frozen when the prior is created (first-estimate linearization).
    For :class:`KnotState` the rotation part of ``r`` is ``Log(R_lin^T R)``.
    """

    lin: KnotState | np.ndarray
    H: np.ndarray
    b: np.ndarray

    def _residual(self, x, prior: HybridPrior | None):
        if isinstance(self.lin, KnotState):
            r = x.boxminus(self.lin, prior)
            J = np.eye(len(r))
            J[0:3, 0:3] = so3.right_jacobian_inv(r[0:3])
            return r, J
        r = np.asarray(x, dtype=float) - self.lin
        return r, np.eye(len(r))

    def energy(self, x, prior: HybridPrior | None = None) -> float:
        r, _ = self._residual(x, prior)
        return float(0.5 * r @ self.H @ r + self.b @ r)

    def linearize(self, x, prior: HybridPrior | None = None):
        """``(H, g, energy)`` in the tangent space at ``x``."""
        r, J = self._residual(x, prior)
        g = J.T @ (self.H @ r + self.b)
        return J.T @ self.H @ J, g, float(0.5 * r @ self.H @ r + self.b @ r)

    @classmethod
    def from_covariance(cls, mean, cov) -> "MarginalPrior":
        cov = np.asarray(cov, dtype=float)
        return cls(mean, np.linalg.inv(cov), np.zeros(len(cov)))

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.H)


# -- nonlinear window --------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 8
    # convergence: largest rotation (rad) or position (m) increment
    tolerance: float = 5e-4
    reassociate_every: int = 1
    damping_initial: float = 1e-4
    damping_factor: float = 10.0
    max_damping_attempts: int = 12
    # correspondence gating: nearest neighbor distance and point-to-plane distance
    max_neighbor_distance: float = 1.0
    max_plane_residual: float = 0.5
    dense_solve: bool = False

    def __post_init__(self):
        if self.max_iterations < 1 or self.reassociate_every < 1:
            raise ValueError("max_iterations and reassociate_every must be >= 1")
        for name in ("tolerance", "damping_initial", "max_neighbor_distance", "max_plane_residual"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.damping_factor <= 1:
            raise ValueError("damping_factor must exceed 1")


@dataclass
class Context:
    """Everything the factors need besides the window itself."""

    prior: HybridPrior
    ext: Extrinsics
    gravity: Gravity
    noise: NoiseModel
    map: object  # VoxelMap, read-only during optimization
    use_gyro: bool = True
    use_accel: bool = True


@dataclass
class SegmentLidar:
    """LiDAR points of one segment with their current plane correspondences."""

    t: np.ndarray
    pb: np.ndarray  # body frame
    q: np.ndarray
    n: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class Window:
    """``len(knots) - 1`` segments with their measurements and a prior on ``knots[0]``."""

    knots: list
    batches: list
    marginal: MarginalPrior

    @property
    def n_segments(self) -> int:
        return len(self.knots) - 1

    def copy_knots(self) -> list:
        return [k.copy() for k in self.knots]


def associate(window: Window, ctx: Context, cfg: SolverConfig) -> list:
    """Nearest-neighbor plane correspondences for every segment's LiDAR points.

    All segments are queried against the map in one batch.
    """
    empty = SegmentLidar(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    if ctx.map is None or ctx.map.n_voxels == 0:
        return [empty for _ in window.batches]
    offsets = _lidar_offsets(ctx.ext)
    parts = []
    for k, batch in enumerate(window.batches):
        lid = batch.lidar
        if len(lid) == 0:
            parts.append(None)
            continue
        pb = body_points(lid.points, lid.sensor, ctx.ext)
        s = interpolate_batch(window.knots[k], window.knots[k + 1], ctx.prior, lid.t)
        pw = np.einsum("nij,nj->ni", s.R, pb) + s.p
        sensor_pos = s.p + np.einsum("nij,nj->ni", s.R, offsets[lid.sensor])
        parts.append((lid.t, pb, pw, sensor_pos))
    live = [x for x in parts if x is not None]
    if not live:
        return [empty for _ in window.batches]
    pw = np.concatenate([x[2] for x in live])
    sensor_pos = np.concatenate([x[3] for x in live])
    nb = ctx.map.nearest_neighbors(pw)
    n, valid = estimate_normals(nb.points, nb.count, ctx.map.config, pw, sensor_pos)
    q = nb.points[:, 0]
    valid &= nb.count > 0
    valid &= nb.dist2[:, 0] < cfg.max_neighbor_distance**2
    with np.errstate(invalid="ignore"):
        valid &= np.abs(np.einsum("ni,ni->n", n, pw - q)) < cfg.max_plane_residual
    out = []
    start = 0
    for x in parts:
        if x is None:
            out.append(empty)
            continue
        t, pb = x[0], x[1]
        sl = slice(start, start + len(t))
        v = valid[sl]
        out.append(SegmentLidar(t[v], pb[v], q[sl][v], n[sl][v]))
        start += len(t)
    return out


def _lidar_offsets(ext: Extrinsics) -> np.ndarray:
    return np.stack([ext.lidar_transform(j)[:3, 3] for j in range(len(ext.lidar))])


@dataclass
class FactorCounts:
    lidar: int = 0
    gyro: int = 0
    accel: int = 0

    def as_dict(self):
        return {"lidar": self.lidar, "gyro": self.gyro, "accel": self.accel}


def build_normal_equations(window: Window, ctx: Context, corr: list, jacobians: bool = True):
    """Assemble ``H``, ``b`` and the energy for the whole window.

    With ``jacobians=False`` only the energy is computed (``H`` and ``b`` are
    left at zero).  Returns ``(NormalEquations, FactorCounts)``.
    """
    prior = ctx.prior
    D = prior.dim
    ne = NormalEquations.zeros(len(window.knots), D)
    counts = FactorCounts()

    if jacobians:
        ne.add(0, *window.marginal.linearize(window.knots[0], prior))
    else:
        ne.energy += window.marginal.energy(window.knots[0], prior)

    for k, batch in enumerate(window.batches):
        left, right = window.knots[k], window.knots[k + 1]
        Hs = np.zeros((2 * D, 2 * D))
        bs = np.zeros(2 * D)
        E = 0.0

        e, J0, J1, W = gp_prior_residual(left, right, prior)
        E += 0.5 * e @ W @ e
        if jacobians:
            J = np.hstack([J0, J1])
            JW = J.T @ W
            Hs += JW @ J
            bs += JW @ e

        # one interpolation for every measurement time of the segment
        seg = corr[k]
        gy = usable_imu(batch.gyro) if ctx.use_gyro and prior.n_gyro_bias else None
        ac = usable_imu(batch.accel) if ctx.use_accel and prior.n_accel_bias else None
        n_l = len(seg)
        n_g = len(gy) if gy is not None else 0
        n_a = len(ac) if ac is not None else 0
        if n_l + n_g + n_a:
            times = np.concatenate([seg.t, gy.t if n_g else [], ac.t if n_a else []])
            s_all = interpolate_batch(left, right, prior, times, jacobians=jacobians)

        if n_l:
            el, Jl = lidar_residuals(s_all.take(slice(0, n_l)), seg.pb, seg.q, seg.n, jacobians)
            w = ctx.noise.w_lidar
            E += 0.5 * w * float(el @ el)
            if jacobians:
                Hs += w * Jl.T @ Jl
                bs += w * Jl.T @ el
            counts.lidar += n_l

        if n_g:
            s = s_all.take(slice(n_l, n_l + n_g))
            eg, Jg = gyro_residuals(s, prior, ctx.ext, gy.values, gy.sensor, jacobians)
            w = ctx.noise.w_gyro
            E += 0.5 * w * float(np.sum(eg * eg))
            if jacobians:
                Jg = Jg.reshape(-1, 2 * D)
                Hs += w * Jg.T @ Jg
                bs += w * Jg.T @ eg.reshape(-1)
            counts.gyro += n_g

        if n_a:
            s = s_all.take(slice(n_l + n_g, n_l + n_g + n_a))
            ea, Ja = accel_residuals(s, prior, ctx.ext, ctx.gravity, ac.values, ac.sensor, jacobians)
            w = ctx.noise.w_accel
            E += 0.5 * w * float(np.sum(ea * ea))
            if jacobians:
                Ja = Ja.reshape(-1, 2 * D)
                Hs += w * Ja.T @ Ja
                bs += w * Ja.T @ ea.reshape(-1)
            counts.accel += n_a

        ne.add(k, Hs, bs, float(E))
    return ne, counts


def retract_window(knots: list, dx: np.ndarray, prior: HybridPrior) -> list:
    D = prior.dim
    return [k.retract(dx[i * D:(i + 1) * D], prior) for i, k in enumerate(knots)]


@dataclass
class OptimizationResult:
    converged: bool
    diverged: bool
    iterations: int
    energy: float
    step_norm: float
    counts: FactorCounts
    records: list = field(default_factory=list)
    correspondences: list | None = None  # from the last iteration


def optimize(window: Window, ctx: Context, cfg: SolverConfig = SolverConfig(), segment_id: int | None = None) -> OptimizationResult:
    """Gauss-Newton over the window, updating ``window.knots`` in place.

    Correspondences are refreshed every ``cfg.reassociate_every`` iterations;
    an iteration's trial energy is always compared using the same
    correspondences.  A step that raises the energy (or a failed
    factorization) switches to ``H + lambda I`` with ``lambda`` grown by
    ``damping_factor``.  On divergence the knots are restored.
    """
    prior = ctx.prior
    pose_cols = np.r_[prior.rot_slice.start:prior.rot_slice.start + 3, prior.trans_slice.start:prior.trans_slice.start + 3]
    start = window.copy_knots()
    records = []
    corr = None
    converged = False
    step_norms = []
    energy = math.nan
    counts = FactorCounts()
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if corr is None or (it - 1) % cfg.reassociate_every == 0:
            corr = associate(window, ctx, cfg)
        ne, counts = build_normal_equations(window, ctx, corr)
        energy = ne.energy
        lam = 0.0
        accepted = False
        dx = np.zeros_like(ne.b)
        for _ in range(cfg.max_damping_attempts + 1):
            try:
                dx = solve_step(ne, lam, dense=cfg.dense_solve)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                trial = retract_window(window.knots, dx, prior)
                trial_ne, _ = build_normal_equations(Window(trial, window.batches, window.marginal), ctx, corr, jacobians=False)
                if trial_ne.energy <= energy * (1 + 1e-12) + 1e-12:
                    window.knots = trial
                    new_energy = trial_ne.energy
                    accepted = True
                    break
            lam = cfg.damping_initial if lam == 0 else lam * cfg.damping_factor
        step = float(np.abs(dx.reshape(-1, prior.dim)[:, pose_cols]).max()) if accepted else 0.0
        step_norms.append(step)
        records.append({
            "segment": segment_id,
            "iteration": it,
            "energy": energy,
            "energy_after": new_energy if accepted else energy,
            "step_norm": step,
            "damping": lam,
            "accepted": accepted,
            "factors": counts.as_dict(),
        })
        if not accepted:
            # no decrease possible along any damped direction: at a minimum
            converged = True
            break
        if step < cfg.tolerance:
            converged = True
            break
    bad = not all(np.all(np.isfinite(k.R)) and np.all(np.isfinite(k.p)) for k in window.knots)
    growing = (
        not converged
        and len(step_norms) >= 3
        and all(b > a for a, b in zip(step_norms, step_norms[1:]))
    )
    diverged = bad or growing
    if diverged:
        log.warning("segment %s: optimization diverged, keeping the prediction", segment_id)
        window.knots = start
    return OptimizationResult(converged, diverged, it, energy, step_norms[-1] if step_norms else 0.0, counts, records,
                              None if diverged else corr)


def marginalize(window: Window, ctx: Context, cfg: SolverConfig = SolverConfig(),
                corr: list | None = None) -> MarginalPrior:
    """Prior on ``knots[1]`` from eliminating ``knots[0]`` with every factor of segment 0.

    The result is linearized at the current estimate of ``knots[1]``, which
    stays fixed as the prior's reference point from then on.  ``corr`` may
    pass segment 0's correspondences from the last optimization; otherwise
    they are recomputed.
    """
    if window.n_segments < 1:
        raise ValueError("nothing to marginalize")
    D = ctx.prior.dim
    sub = Window(window.knots[:2], window.batches[:1], window.marginal)
    if corr is None:
        corr = associate(sub, ctx, cfg)
    ne, _ = build_normal_equations(sub, ctx, corr[:1])
    Hm, bm = schur_marginalize(ne.H, ne.b, D)
    return MarginalPrior(window.knots[1].copy(), Hm, bm)


def slide_window(window: Window, batch: MeasurementBatch, dt: float, ctx: Context, K: int,
                 cfg: SolverConfig = SolverConfig(), segment_id: int | None = None):
    """Add a segment, optimize, and marginalize the oldest one once ``K`` are held.

    Returns ``(result, dropped)`` where ``dropped`` is ``None`` or a tuple
    ``(left_knot, right_knot, batch)`` describing the segment shifted out,
    at its final estimate.
    """
    new = propagate(window.knots[-1], dt, ctx.prior)
    window.knots.append(new)
    window.batches.append(batch)
    result = optimize(window, ctx, cfg, segment_id)
    dropped = None
    if window.n_segments >= K:
        window.marginal = marginalize(window, ctx, cfg, result.correspondences)
        dropped = (window.knots[0], window.knots[1], window.batches[0])
        window.knots = window.knots[1:]
        window.batches = window.batches[1:]
    return result, dropped
