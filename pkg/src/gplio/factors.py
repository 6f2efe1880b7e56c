"""Residuals and analytic Jacobians for LiDAR, gyro, accelerometer and GP-prior factors.

Observation factors are evaluated in batches on the interpolated states of one
segment (see :func:`gplio.trajectory.interpolate_batch`).  Their Jacobians are
with respect to the stacked tangent increments ``[delta_left, delta_right]``
of the two bounding knots, so each row has length ``2 * prior.dim``.

Every factor contributes ``0.5 * e^T W e`` to the energy, ``W`` the inverse
noise covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .gp_prior import HybridPrior, transition_scalar
from .measurements import ImuBatch, LidarBatch, MeasurementBatch, SensorStreams, to_ns
from .trajectory import Extrinsics, Gravity, InterpolatedStates, KnotState, interpolate_batch


@dataclass(frozen=True)
class NoiseModel:
    """Measurement standard deviations (isotropic)."""

    sigma_lidar: float = 0.05  # point-to-plane, m
    sigma_gyro: float = 1e-2  # rad/s
    sigma_accel: float = 5e-2  # m/s^2

    def __post_init__(self):
        for name in ("sigma_lidar", "sigma_gyro", "sigma_accel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def w_lidar(self) -> float:
        return 1.0 / self.sigma_lidar**2

    @property
    def w_gyro(self) -> float:
        return 1.0 / self.sigma_gyro**2

    @property
    def w_accel(self) -> float:
        return 1.0 / self.sigma_accel**2


@dataclass
class PlaneCorrespondence:
    """Nearest map point ``q`` and unit normal ``n`` per LiDAR point."""

    q: np.ndarray
    n: np.ndarray
    valid: np.ndarray

    def select(self, mask) -> "PlaneCorrespondence":
        return PlaneCorrespondence(self.q[mask], self.n[mask], self.valid[mask])


# -- observation factors ------------------------------------------------------------


def body_points(points: np.ndarray, sensor: np.ndarray, ext: Extrinsics) -> np.ndarray:
    """LiDAR points mapped into the body frame with their sensor's extrinsic."""
    T = np.stack([ext.lidar_transform(j) for j in range(len(ext.lidar))])
    Ts = T[sensor]
    return np.einsum("nij,nj->ni", Ts[:, :3, :3], points) + Ts[:, :3, 3]


def world_points(states: InterpolatedStates, pb: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", states.R, pb) + states.p


def lidar_residuals(states: InterpolatedStates, pb: np.ndarray, q: np.ndarray, n: np.ndarray, jacobians=True):
    """Point-to-plane distances ``n^T (R pb + p - q)`` for body-frame points ``pb``.

    Returns ``e`` of shape ``(N,)`` and ``J`` of shape ``(N, 2D)`` (or ``None``).
    """
    pw = world_points(states, pb)
    e = np.einsum("ni,ni->n", n, pw - q)
    if not jacobians:
        return e, None
    # d(R pb)/d(dtheta) = -R hat(pb)  =>  n^T(-R hat(pb)) = cross(pb, R^T n)
    rn = np.einsum("nji,nj->ni", states.R, n)
    drot = np.cross(pb, rn)
    J = np.einsum("ni,nij->nj", drot, states.jac["R"]) + np.einsum("ni,nij->nj", n, states.jac["p"])
    return e, J


def gyro_residuals(states: InterpolatedStates, prior: HybridPrior, ext: Extrinsics, values: np.ndarray,
                   sensor: np.ndarray, jacobians=True):
    """``omega(tau) + b_g^j(tau) - R_G^j omega_meas``; returns ``(N, 3)`` and ``(N, 3, 2D)``."""
    RG = np.stack([np.asarray(r, dtype=float) for r in ext.gyro])
    meas = np.einsum("nij,nj->ni", RG[sensor], values)
    bias = states.bg[np.arange(len(sensor)), sensor]
    e = states.w + bias - meas
    if not jacobians:
        return e, None
    J = states.jac["w"].copy()
    for j in np.unique(sensor):
        sel = sensor == j
        J[sel] += states.bias_jacobian(prior, "g", int(j))[sel]
    return e, J


def accel_residuals(states: InterpolatedStates, prior: HybridPrior, ext: Extrinsics, gravity: Gravity,
                    values: np.ndarray, sensor: np.ndarray, jacobians=True):
    """``R(tau)^T (a(tau) + g) + b_a^j(tau) - R_A^j a_meas``."""
    RA = np.stack([np.asarray(r, dtype=float) for r in ext.accel])
    meas = np.einsum("nij,nj->ni", RA[sensor], values)
    bias = states.ba[np.arange(len(sensor)), sensor]
    f = np.einsum("nji,nj->ni", states.R, states.a + gravity.g)
    e = f + bias - meas
    if not jacobians:
        return e, None
    # right perturbation: Exp(-d) R^T x ~ R^T x + hat(R^T x) d
    J = so3.hat(f) @ states.jac["R"] + np.swapaxes(states.R, -1, -2) @ states.jac["a"]
    for j in np.unique(sensor):
        sel = sensor == j
        J[sel] += states.bias_jacobian(prior, "a", int(j))[sel]
    return e, J


# -- single-measurement conveniences --------------------------------------------------


def lidar_residual(left: KnotState, right: KnotState, prior: HybridPrior, ext: Extrinsics,
                   point, t: float, lidar: int, q, n):
    """Scalar point-to-plane residual and its ``(2D,)`` Jacobian for one point."""
    s = interpolate_batch(left, right, prior, [t], jacobians=True)
    pb = body_points(np.atleast_2d(point), np.array([lidar]), ext)
    e, J = lidar_residuals(s, pb, np.atleast_2d(q), np.atleast_2d(n))
    return float(e[0]), J[0]


def gyro_residual(left, right, prior, ext, value, t: float, sensor: int = 0):
    s = interpolate_batch(left, right, prior, [t], jacobians=True)
    e, J = gyro_residuals(s, prior, ext, np.atleast_2d(value), np.array([sensor]))
    return e[0], J[0]


def accel_residual(left, right, prior, ext, gravity, value, t: float, sensor: int = 0):
    s = interpolate_batch(left, right, prior, [t], jacobians=True)
    e, J = accel_residuals(s, prior, ext, gravity, np.atleast_2d(value), np.array([sensor]))
    return e[0], J[0]


# -- kinematic prior ----------------------------------------------------------------


def gp_prior_residual(prev: KnotState, nxt: KnotState, prior: HybridPrior):
    """Residual ``x_k - Phi x_{k-1}`` between consecutive knots, with Jacobians.

    The rotation block is expressed in the local tangent space of ``prev``:
    ``[theta_k - dt omega_{k-1}, J_r(theta_k)^-1 omega_k - omega_{k-1}]`` for the
    constant-velocity prior, ``theta_k`` for the random walk.  Returns
    ``(e, J_prev, J_next, W)`` with ``W = Q(dt)^-1``.
    """
    d = prior.dim
    dt = (nxt.t_ns - prev.t_ns) * 1e-9
    e = np.zeros(d)
    J0 = np.zeros((d, d))
    J1 = np.zeros((d, d))
    eye = np.eye(3)

    th = so3.log(prev.R.T @ nxt.R)
    dth0 = -so3.left_jacobian_inv(th)
    dth1 = so3.right_jacobian_inv(th)
    e[0:3] = th
    J0[0:3, 0:3] = dth0
    J1[0:3, 0:3] = dth1
    if prior.rot_order == 2:
        e[0:3] -= dt * prev.w
        J0[0:3, 3:6] = -dt * eye
        thd = dth1 @ nxt.w
        e[3:6] = thd - prev.w
        D = so3.right_jacobian_inv_times_derivative(th, nxt.w)
        J0[3:6, 0:3] = D @ dth0
        J1[3:6, 0:3] = D @ dth1
        J0[3:6, 3:6] = -eye
        J1[3:6, 3:6] = dth1

    o = prior.trans_order
    ts = prior.trans_slice
    phi = transition_scalar(o, dt)
    e[ts] = (nxt.translation_blocks(o) - phi @ prev.translation_blocks(o)).reshape(-1)
    J0[ts, ts] = -np.kron(phi, eye)
    J1[ts, ts] = np.eye(3 * o)

    for j in range(prior.n_gyro_bias):
        sl = prior.gyro_bias_slice(j)
        e[sl] = nxt.bg[j] - prev.bg[j]
        J0[sl, sl] = -eye
        J1[sl, sl] = eye
    for j in range(prior.n_accel_bias):
        sl = prior.accel_bias_slice(j)
        e[sl] = nxt.ba[j] - prev.ba[j]
        J0[sl, sl] = -eye
        J1[sl, sl] = eye
    return e, J0, J1, prior.process_noise_inv(dt)


def initial_prior_residual(knot: KnotState, mean: KnotState, prior: HybridPrior):
    """``x_0 (-) mu_0`` and its Jacobian (rotation block ``J_r^-1``)."""
    e = knot.boxminus(mean, prior)
    J = np.eye(prior.dim)
    J[0:3, 0:3] = so3.right_jacobian_inv(e[0:3])
    return e, J


# -- bucketing ----------------------------------------------------------------------


@dataclass
class Buckets:
    """Result of :func:`bucket_measurements`.

    ``batches[k]`` holds measurements with ``t`` in ``[t_k, t_{k+1})``;
    ``pending`` those at or after the last boundary (kept for later windows);
    ``late`` counts measurements before the first boundary (dropped).
    """

    batches: list
    pending: SensorStreams = field(default_factory=SensorStreams)
    late: int = 0


def _bin(t: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    # index k such that bounds[k] <= t < bounds[k + 1]; -1 before, K at/after the end
    return np.searchsorted(bounds, to_ns(t), side="right") - 1


def bucket_measurements(streams: SensorStreams, boundaries) -> Buckets:
    """Assign measurements to the segments ``[t_{k-1}, t_k)`` (boundaries in seconds).

    Comparisons use integer nanoseconds so a measurement stamped exactly at a
    knot belongs to the segment that starts there.
    """
    bounds = to_ns(np.asarray(boundaries, dtype=float))
    if np.any(np.diff(bounds) <= 0):
        raise ValueError("segment boundaries must be strictly increasing")
    K = len(bounds) - 1
    idx = {name: _bin(getattr(streams, name).t, bounds) for name in ("lidar", "gyro", "accel")}
    batches = [
        MeasurementBatch(
            streams.lidar.select(idx["lidar"] == k),
            streams.gyro.select(idx["gyro"] == k),
            streams.accel.select(idx["accel"] == k),
        )
        for k in range(K)
    ]
    pending = SensorStreams(
        streams.lidar.select(idx["lidar"] >= K),
        streams.gyro.select(idx["gyro"] >= K),
        streams.accel.select(idx["accel"] >= K),
    )
    late = int(sum(np.count_nonzero(v < 0) for v in idx.values()))
    return Buckets(batches, pending, late)


def usable_imu(batch: ImuBatch) -> ImuBatch:
    """Drop saturated samples; they carry no information about the true rate."""
    if len(batch) == 0 or not batch.saturated.any():
        return batch
    return batch.select(~batch.saturated)


__all__ = [
    "NoiseModel",
    "PlaneCorrespondence",
    "LidarBatch",
    "body_points",
    "world_points",
    "lidar_residuals",
    "gyro_residuals",
    "accel_residuals",
    "lidar_residual",
    "gyro_residual",
    "accel_residual",
    "gp_prior_residual",
    "initial_prior_residual",
    "Buckets",
    "bucket_measurements",
    "usable_imu",
]
