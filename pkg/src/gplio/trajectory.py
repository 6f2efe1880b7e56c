"""Continuous-time trajectory over GP knots.

A knot carries the full kinematic state of the primary (body) sensor.  Which
parts of it are estimated is decided by :class:`StateConfig`; the remaining
fields stay at zero.  Knot times are integer nanoseconds, seconds at the API.

Tangent-space layout of one knot (see :class:`gplio.gp_prior.HybridPrior`)::

    [dtheta, (domega)] [dp, (dv), (da)] [dbg_1 .. dbg_Ng] [dba_1 .. dba_Na]

Rotations are perturbed on the right, ``R <- R Exp(dtheta)``.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import so3
from .gp_interp import coefficient_scalars
from .gp_prior import CA, CV, RW, HybridPrior, PriorKind, transition_scalar
from .measurements import ImuBatch

log = logging.getLogger(__name__)

ROTATION_CHOICES = ("rw", "cv", "gyro")
TRANSLATION_CHOICES = ("rw", "cv", "ca", "accel")


class OutOfWindowError(ValueError):
    """Query time outside ``[t_0, t_K)``."""


@dataclass(frozen=True)
class StateConfig:
    """One rotation part and one translation part (3 x 4 = 12 combinations)."""

    rotation: str = "gyro"
    translation: str = "accel"
    n_gyro: int = 1
    n_accel: int = 1
    n_lidar: int = 1

    def __post_init__(self):
        if self.rotation not in ROTATION_CHOICES:
            raise ValueError(f"rotation must be one of {ROTATION_CHOICES}, got {self.rotation!r}")
        if self.translation not in TRANSLATION_CHOICES:
            raise ValueError(f"translation must be one of {TRANSLATION_CHOICES}, got {self.translation!r}")
        if self.n_lidar < 1:
            raise ValueError("at least one LiDAR is required")
        if self.rotation == "gyro" and self.n_gyro < 1:
            raise ValueError("the gyro rotation state needs n_gyro >= 1")
        if self.translation == "accel" and self.n_accel < 1:
            raise ValueError("the accel translation state needs n_accel >= 1")

    @property
    def rotation_kind(self) -> PriorKind:
        return RW if self.rotation == "rw" else CV

    @property
    def translation_kind(self) -> PriorKind:
        return {"rw": RW, "cv": CV, "ca": CA, "accel": CA}[self.translation]

    @property
    def uses_gyro(self) -> bool:
        return self.rotation == "gyro"

    @property
    def uses_accel(self) -> bool:
        return self.translation == "accel"

    @property
    def n_gyro_bias(self) -> int:
        return self.n_gyro if self.uses_gyro else 0

    @property
    def n_accel_bias(self) -> int:
        return self.n_accel if self.uses_accel else 0

    @property
    def dim(self) -> int:
        return (
            3 * self.rotation_kind.order
            + 3 * self.translation_kind.order
            + 3 * (self.n_gyro_bias + self.n_accel_bias)
        )

    def hybrid_prior(self, qc_rotation=1e-2, qc_translation=1e-1, qc_gyro_bias=1e-5, qc_accel_bias=1e-5) -> HybridPrior:
        return HybridPrior(
            rotation=self.rotation_kind,
            translation=self.translation_kind,
            n_gyro_bias=self.n_gyro_bias,
            n_accel_bias=self.n_accel_bias,
            qc_rotation=qc_rotation,
            qc_translation=qc_translation,
            qc_gyro_bias=qc_gyro_bias,
            qc_accel_bias=qc_accel_bias,
        )

    @classmethod
    def all_combinations(cls, n_gyro=1, n_accel=1, n_lidar=1):
        return [
            cls(r, t, n_gyro, n_accel, n_lidar)
            for r in ROTATION_CHOICES
            for t in TRANSLATION_CHOICES
        ]


def _zeros3():
    return np.zeros(3)


@dataclass
class KnotState:
    t_ns: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    w: np.ndarray = field(default_factory=_zeros3)
    p: np.ndarray = field(default_factory=_zeros3)
    v: np.ndarray = field(default_factory=_zeros3)
    a: np.ndarray = field(default_factory=_zeros3)
    bg: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ba: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def t(self) -> float:
        return self.t_ns * 1e-9

    @classmethod
    def zero(cls, t_ns: int, prior: HybridPrior) -> "KnotState":
        return cls(int(t_ns), bg=np.zeros((prior.n_gyro_bias, 3)), ba=np.zeros((prior.n_accel_bias, 3)))

    def copy(self) -> "KnotState":
        return KnotState(
            self.t_ns, self.R.copy(), self.w.copy(), self.p.copy(), self.v.copy(),
            self.a.copy(), self.bg.copy(), self.ba.copy(),
        )

    def translation_blocks(self, order: int) -> np.ndarray:
        return np.stack([self.p, self.v, self.a][:order])

    def with_translation_blocks(self, blocks: np.ndarray) -> "KnotState":
        out = self.copy()
        names = ("p", "v", "a")
        for i, blk in enumerate(blocks):
            setattr(out, names[i], np.array(blk, dtype=float))
        return out

    def pose(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def retract(self, delta: np.ndarray, prior: HybridPrior) -> "KnotState":
        """``self (+) delta``: rotation on the right, everything else additive."""
        delta = np.asarray(delta, dtype=float)
        out = self.copy()
        out.R = self.R @ so3.exp(delta[0:3])
        if prior.rot_order == 2:
            out.w = self.w + delta[3:6]
        tb = self.translation_blocks(prior.trans_order) + delta[prior.trans_slice].reshape(-1, 3)
        out = out.with_translation_blocks(tb)
        for j in range(prior.n_gyro_bias):
            out.bg[j] = self.bg[j] + delta[prior.gyro_bias_slice(j)]
        for j in range(prior.n_accel_bias):
            out.ba[j] = self.ba[j] + delta[prior.accel_bias_slice(j)]
        return out

    def boxminus(self, other: "KnotState", prior: HybridPrior) -> np.ndarray:
        """``self (-) other`` so that ``other.retract(d) == self``."""
        d = np.zeros(prior.dim)
        d[0:3] = so3.log(other.R.T @ self.R)
        if prior.rot_order == 2:
            d[3:6] = self.w - other.w
        o = prior.trans_order
        d[prior.trans_slice] = (self.translation_blocks(o) - other.translation_blocks(o)).reshape(-1)
        for j in range(prior.n_gyro_bias):
            d[prior.gyro_bias_slice(j)] = self.bg[j] - other.bg[j]
        for j in range(prior.n_accel_bias):
            d[prior.accel_bias_slice(j)] = self.ba[j] - other.ba[j]
        return d


@dataclass(frozen=True)
class Extrinsics:
    """Pre-calibrated sensor-to-body transforms (held fixed during estimation)."""

    lidar: tuple = (np.eye(4),)
    gyro: tuple = (np.eye(3),)
    accel: tuple = (np.eye(3),)

    def __post_init__(self):
        for T in self.lidar:
            if np.asarray(T).shape != (4, 4) or not so3.is_rotation(np.asarray(T)[:3, :3], 1e-6):
                raise ValueError("lidar extrinsics must be 4x4 rigid transforms")
        for R in tuple(self.gyro) + tuple(self.accel):
            if not so3.is_rotation(np.asarray(R), 1e-6):
                raise ValueError("imu extrinsics must be rotation matrices")

    def lidar_transform(self, j: int) -> np.ndarray:
        if not 0 <= j < len(self.lidar):
            raise IndexError(f"unknown lidar index {j}")
        return np.asarray(self.lidar[j], dtype=float)


@dataclass(frozen=True)
class Gravity:
    """Gravity reaction in world coordinates (``[0, 0, 9.81]`` for z up)."""

    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))


def propagate(last: KnotState, dt: float, prior: HybridPrior) -> KnotState:
    """GP mean of the next knot ``dt`` seconds after ``last``.

    Rotation advances in the local tangent space of ``last`` (theta = dt * omega
    under the constant-velocity prior), vector blocks by the transition matrix,
    biases stay constant.
    """
    if dt <= 0:
        raise ValueError("propagation interval must be positive")
    out = last.copy()
    out.t_ns = last.t_ns + int(round(dt * 1e9))
    if prior.rot_order == 2:
        theta = dt * last.w
        out.R = last.R @ so3.exp(theta)
        out.w = so3.right_jacobian(theta) @ last.w
    phi = transition_scalar(prior.trans_order, dt)
    return out.with_translation_blocks(phi @ last.translation_blocks(prior.trans_order))


@dataclass
class InterpolatedStates:
    """Batch of interpolated states inside one segment.

    ``jac`` (when requested) maps names ``"R"``, ``"w"``, ``"p"``, ``"v"``,
    ``"a"`` to arrays of shape ``(N, 3, 2D)``: derivatives with respect to the
    stacked tangent increments ``[delta_left, delta_right]``.  ``"R"`` is the
    right-perturbation derivative of the interpolated rotation.
    """

    alpha: np.ndarray
    R: np.ndarray
    w: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    jac: dict | None = None

    def take(self, idx) -> "InterpolatedStates":
        """Subset of the batch (index array or slice)."""
        jac = None if self.jac is None else {k: v[idx] for k, v in self.jac.items()}
        return InterpolatedStates(self.alpha[idx], self.R[idx], self.w[idx], self.p[idx], self.v[idx], self.a[idx],
                                  self.bg[idx], self.ba[idx], jac)

    def bias_jacobian(self, prior: HybridPrior, kind: str, j: int) -> np.ndarray:
        """Derivative of an interpolated bias (random-walk coefficients)."""
        d = prior.dim
        sl = prior.gyro_bias_slice(j) if kind == "g" else prior.accel_bias_slice(j)
        out = np.zeros((len(self.alpha), 3, 2 * d))
        eye = np.eye(3)
        out[:, :, sl] = (1.0 - self.alpha)[:, None, None] * eye
        out[:, :, d + sl.start:d + sl.stop] = self.alpha[:, None, None] * eye
        return out


def interpolate_batch(left: KnotState, right: KnotState, prior: HybridPrior, taus, jacobians: bool = False) -> InterpolatedStates:
    """Interpolate the state at times ``taus`` (seconds) between two knots."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    dt = (right.t_ns - left.t_ns) * 1e-9
    alpha = (taus - left.t_ns * 1e-9) / dt
    n = len(taus)
    d = prior.dim
    eye = np.eye(3)

    # rotation through the local tangent state
    ro = prior.rot_order
    lam, psi = coefficient_scalars(ro, alpha, dt)
    th1 = so3.log(left.R.T @ right.R)
    jri1 = so3.right_jacobian_inv(th1)
    if ro == 2:
        thd1 = jri1 @ right.w
        th = lam[:, 0, 1, None] * left.w + psi[:, 0, 0, None] * th1 + psi[:, 0, 1, None] * thd1
        thd = lam[:, 1, 1, None] * left.w + psi[:, 1, 0, None] * th1 + psi[:, 1, 1, None] * thd1
    else:
        th = psi[:, 0, 0, None] * th1
        thd = np.zeros_like(th)
    exp_th = so3.exp(th)
    R = left.R @ exp_th
    jr = so3.right_jacobian(th)
    w = np.einsum("nij,nj->ni", jr, thd) if ro == 2 else np.zeros((n, 3))

    # translation blocks
    to = prior.trans_order
    lam_t, psi_t = coefficient_scalars(to, alpha, dt)
    xl = left.translation_blocks(to)
    xr = right.translation_blocks(to)
    trans = np.einsum("nij,jk->nik", lam_t, xl) + np.einsum("nij,jk->nik", psi_t, xr)
    zeros = np.zeros((n, 3))
    p = trans[:, 0]
    v = trans[:, 1] if to >= 2 else zeros
    a = trans[:, 2] if to >= 3 else zeros

    wl = (1.0 - alpha)[:, None, None]
    wr = alpha[:, None, None]
    bg = wl * left.bg[None] + wr * right.bg[None]
    ba = wl * left.ba[None] + wr * right.ba[None]

    jac = None
    if jacobians:
        # rotation derivatives only touch the rotation columns of each knot
        rd = prior.rot_dim
        rcols = np.r_[0:rd, d:d + rd]
        dth1_d0 = -so3.left_jacobian_inv(th1)
        dth1_d1 = jri1
        dth = np.zeros((n, 3, 2 * rd))
        if ro == 2:
            dthd = np.zeros((n, 3, 2 * rd))
            dthd1 = so3.right_jacobian_inv_times_derivative(th1, right.w)
            d0 = np.stack([dth1_d0, dthd1 @ dth1_d0])  # (2, 3, 3): d th1, d thd1 w.r.t. left rotation
            d1 = np.stack([dth1_d1, dthd1 @ dth1_d1])
            for out, r in ((dth, 0), (dthd, 1)):
                out[:, :, 0:3] = np.einsum("nk,kij->nij", psi[:, r, :], d0)
                out[:, :, 3:6] = lam[:, r, 1, None, None] * eye
                out[:, :, 6:9] = np.einsum("nk,kij->nij", psi[:, r, :], d1)
                out[:, :, 9:12] = psi[:, r, 1, None, None] * jri1
        else:
            dth[:, :, 0:3] = psi[:, 0, 0, None, None] * dth1_d0
            dth[:, :, 3:6] = psi[:, 0, 0, None, None] * dth1_d1
        dR_r = np.einsum("nij,njk->nik", jr, dth)
        dR_r[:, :, 0:3] += np.swapaxes(exp_th, -1, -2)
        dR = np.zeros((n, 3, 2 * d))
        dR[:, :, rcols] = dR_r
        dw = np.zeros((n, 3, 2 * d))
        if ro == 2:
            dw[:, :, rcols] = (np.einsum("nij,njk->nik", so3.right_jacobian_times_derivative(th, thd), dth)
                               + np.einsum("nij,njk->nik", jr, dthd))
        jac = {"R": dR, "w": dw}
        ts = prior.trans_slice.start
        tcols = np.r_[ts:ts + 3 * to, d + ts:d + ts + 3 * to]
        for r, name in enumerate(("p", "v", "a")):
            blk = np.zeros((n, 3, 2 * d))
            if r < to:
                coef = np.concatenate([lam_t[:, r, :], psi_t[:, r, :]], axis=1)  # (n, 2 to)
                blk[:, :, tcols] = (coef[:, None, :, None] * eye[None, :, None, :]).reshape(n, 3, 6 * to)
            jac[name] = blk
    return InterpolatedStates(alpha, R, w, p, v, a, bg, ba, jac)


class Trajectory:
    """Ordered knots with GP interpolation between them."""

    def __init__(self, prior: HybridPrior, knots=()):
        self.prior = prior
        self.knots: list[KnotState] = list(knots)
        times = [k.t_ns for k in self.knots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")

    @property
    def knot_times_ns(self) -> list[int]:
        return [k.t_ns for k in self.knots]

    @property
    def start(self) -> float:
        return self.knots[0].t

    @property
    def end(self) -> float:
        return self.knots[-1].t

    def segment_index(self, tau: float) -> int:
        """Index ``k`` of the segment ``[t_{k-1}, t_k)`` containing ``tau`` (1-based)."""
        if len(self.knots) < 2:
            raise OutOfWindowError("trajectory has no segments")
        t_ns = int(round(tau * 1e9))
        times = self.knot_times_ns
        if t_ns < times[0] or t_ns >= times[-1]:
            raise OutOfWindowError(f"time {tau:.9f} outside window [{self.start:.9f}, {self.end:.9f})")
        return bisect.bisect_right(times, t_ns)

    def query(self, tau: float) -> KnotState:
        k = self.segment_index(tau)
        s = interpolate_batch(self.knots[k - 1], self.knots[k], self.prior, [tau])
        return KnotState(int(round(tau * 1e9)), s.R[0], s.w[0], s.p[0], s.v[0], s.a[0], s.bg[0], s.ba[0])

    def query_many(self, taus) -> list[KnotState]:
        taus = np.asarray(taus, dtype=float)
        out = []
        idx = np.array([self.segment_index(t) for t in taus], dtype=int)
        for k in np.unique(idx):
            sel = np.flatnonzero(idx == k)
            s = interpolate_batch(self.knots[k - 1], self.knots[k], self.prior, taus[sel])
            for n, i in enumerate(sel):
                out.append((i, KnotState(int(round(taus[i] * 1e9)), s.R[n], s.w[n], s.p[n], s.v[n], s.a[n], s.bg[n], s.ba[n])))
        out.sort(key=lambda x: x[0])
        return [s for _, s in out]

    def pose(self, tau: float) -> np.ndarray:
        return self.query(tau).pose()

    def sensor_pose(self, tau: float, ext: Extrinsics, sensor_index: int) -> np.ndarray:
        """World pose of LiDAR ``sensor_index`` at ``tau``: ``T(tau) T^B_L``."""
        T_bl = ext.lidar_transform(sensor_index)
        return self.pose(tau) @ T_bl


def sensor_pose(traj: Trajectory, tau: float, ext: Extrinsics, sensor_index: int) -> np.ndarray:
    return traj.sensor_pose(tau, ext, sensor_index)


@dataclass(frozen=True)
class InitConfig:
    duration: float = 0.3
    gravity: float = 9.81
    gravity_tolerance: float = 0.5
    stationary_accel_std: float = 0.3
    # prior standard deviations on the first knot
    sigma_rotation: float = 1e-4
    sigma_rate: float = 1e-2
    sigma_position: float = 1e-4
    sigma_velocity: float = 1e-2
    sigma_acceleration: float = 1e-1
    sigma_gyro_bias: float = 5e-2
    sigma_accel_bias: float = 1e-1

    def k0(self, prior: HybridPrior) -> np.ndarray:
        sig = np.empty(prior.dim)
        sig[0:3] = self.sigma_rotation
        if prior.rot_order == 2:
            sig[3:6] = self.sigma_rate
        trans = [self.sigma_position, self.sigma_velocity, self.sigma_acceleration][:prior.trans_order]
        sig[prior.trans_slice] = np.repeat(trans, 3)
        for j in range(prior.n_gyro_bias):
            sig[prior.gyro_bias_slice(j)] = self.sigma_gyro_bias
        for j in range(prior.n_accel_bias):
            sig[prior.accel_bias_slice(j)] = self.sigma_accel_bias
        return np.diag(sig**2)


@dataclass
class Initialization:
    trajectory: Trajectory
    gravity: Gravity
    k0: np.ndarray
    stationary: bool


def initialize(accel: ImuBatch | None, t0: float, prior: HybridPrior, config: InitConfig = InitConfig(),
               accel_rotations=(np.eye(3),)) -> Initialization:
    """Set up the first knot at ``t0`` assuming a stationary start.

    The world frame is the initial body frame (identity pose, zero rates and
    biases).  Gravity is the mean accelerometer reading over the initialization
    span, rotated into the body frame and scaled to ``config.gravity``.  Without
    accelerometer data gravity defaults to ``[0, 0, g]``.
    """
    knot = KnotState.zero(int(round(t0 * 1e9)), prior)
    g = np.array([0.0, 0.0, config.gravity])
    stationary = True
    if accel is not None and len(accel):
        sel = (accel.t >= t0) & (accel.t < t0 + config.duration) & ~accel.saturated
        if np.any(sel):
            rots = np.asarray(accel_rotations, dtype=float)
            body = np.einsum("nij,nj->ni", rots[accel.sensor[sel]], accel.values[sel])
            mean = body.mean(axis=0)
            spread = body.std(axis=0).max() if len(body) > 1 else 0.0
            if spread > config.stationary_accel_std:
                stationary = False
                log.warning("start does not look stationary (accel std %.3f m/s^2); proceeding", spread)
            norm = np.linalg.norm(mean)
            if abs(norm - config.gravity) > config.gravity_tolerance:
                log.warning("mean specific force %.3f m/s^2 differs from gravity %.3f", norm, config.gravity)
            if norm > 0:
                g = mean / norm * config.gravity
    return Initialization(Trajectory(prior, [knot]), Gravity(g), config.k0(prior), stationary)


# -- TUM trajectory files -------------------------------------------------------


class TumFormatError(ValueError):
    pass


def format_tum_line(t: float, R: np.ndarray, p: np.ndarray) -> str:
    q = Rotation.from_matrix(R).as_quat()  # x, y, z, w
    vals = [t, *p, *q]
    return " ".join(f"{x:.9g}" if i else f"{x:.9f}" for i, x in enumerate(vals))


def write_tum(path, times, rotations, positions) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines (9 significant digits)."""
    lines = [format_tum_line(t, R, p) for t, R, p in zip(times, rotations, positions)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a TUM file into ``(t, R, p)``; ``#`` comments and blank lines skipped."""
    times, rots, pos = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise TumFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise TumFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(x) for x in vals):
            raise TumFormatError(f"{path}:{lineno}: non-finite value")
        q = np.array(vals[4:8])
        if not 0.5 < np.linalg.norm(q) < 1.5:
            raise TumFormatError(f"{path}:{lineno}: quaternion is not unit length")
        times.append(vals[0])
        pos.append(vals[1:4])
        rots.append(Rotation.from_quat(q).as_matrix())
    return np.array(times), np.array(rots).reshape(-1, 3, 3), np.array(pos).reshape(-1, 3)
