"""Analytic ground-truth trajectories with closed-form derivatives.

Every trajectory is written as ``R(t) = R0 Rz(psi(t)) Exp(phi(t))`` and
``p(t)``, where ``psi`` is a heading angle, ``phi`` a small attitude wobble and
``R0`` a constant mounting rotation.  The body angular rate then has the closed
form ``omega = Exp(phi)^T e_z psi' + J_r(phi) phi'``.

Motion is driven through a time warp ``s(t)``: the body is at rest until
``t_still``, then ``s`` ramps up smoothly over ``t_ramp`` seconds to unit rate,
so every kind starts stationary (which the estimator's initialization needs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .. import so3

KINDS = ("stationary", "line", "spin", "figure_eight", "spline")


@dataclass(frozen=True)
class TimeWarp:
    """``s(t)``: zero until ``t_still``, smoothstep-accelerated to rate 1 after ``t_ramp``."""

    t_still: float = 0.5
    t_ramp: float = 1.0

    def __call__(self, t):
        """Return ``(s, s', s'')`` at ``t``."""
        t = np.asarray(t, dtype=float)
        if self.t_ramp <= 0:
            tau = np.clip(t - self.t_still, 0.0, None)
            return tau, (t >= self.t_still).astype(float), np.zeros_like(t)
        Tr = self.t_ramp
        u = np.clip((t - self.t_still) / Tr, 0.0, None)
        ramp = u < 1.0
        ur = np.minimum(u, 1.0)
        s_r = Tr * (ur**3 - 0.5 * ur**4)
        ds_r = 3 * ur**2 - 2 * ur**3
        dds_r = (6 * ur - 6 * ur**2) / Tr
        s_c = 0.5 * Tr + (t - self.t_still - Tr)
        s = np.where(ramp, s_r, s_c)
        ds = np.where(ramp, ds_r, 1.0)
        dds = np.where(ramp, dds_r, 0.0)
        return s, ds, dds


def _rz(psi):
    c, s = np.cos(psi), np.sin(psi)
    out = np.zeros(np.shape(psi) + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


@dataclass
class TruthState:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    w: np.ndarray  # body frame
    v: np.ndarray  # world frame
    a: np.ndarray  # world frame


@dataclass
class TruthTrajectory:
    """Ground-truth motion of the body frame.

    Parameters
    ----------
    kind
        One of ``stationary``, ``line``, ``spin``, ``figure_eight``, ``spline``.
    params
        Kind-specific parameters (read in :meth:`_path`); unspecified
        ones take defaults.
    """

    kind: str = "stationary"
    params: dict = field(default_factory=dict)
    warp: TimeWarp = field(default_factory=TimeWarp)
    origin: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.5]))
    R0: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {KINDS}")
        self.origin = np.asarray(self.origin, dtype=float)
        self.R0 = np.asarray(self.R0, dtype=float)
        self._spline = None
        if self.kind == "spline":
            wp = np.asarray(self.params.get("waypoints", [[0, 0, 0], [1, 0, 0], [2, 1, 0], [3, 1, 0.5]]), dtype=float)
            times = np.asarray(self.params.get("times", np.arange(len(wp), dtype=float) * 2.0), dtype=float)
            if len(wp) < 2 or len(times) != len(wp) or np.any(np.diff(times) <= 0):
                raise ValueError("spline needs >= 2 waypoints with increasing times")
            yaw = np.asarray(self.params.get("yaw", np.zeros(len(wp))), dtype=float)
            self._spline = (
                CubicSpline(times - times[0], wp, bc_type="clamped"),
                CubicSpline(times - times[0], yaw, bc_type="clamped"),
                times[-1] - times[0],
            )

    # -- path in warped time ---------------------------------------------------
    def _path(self, s):
        """Position offset, heading and wobble with their s-derivatives.

        Returns ``P, P1, P2`` (n,3), ``psi, psi1`` (n,) and ``phi, phi1`` (n,3).
        """
        n = len(s)
        z3 = np.zeros((n, 3))
        z1 = np.zeros(n)
        P = P1 = P2 = z3
        psi = psi1 = z1
        phi = phi1 = z3
        pr = self.params
        if self.kind == "line":
            vel = np.asarray(pr.get("velocity", [1.0, 0.0, 0.0]), dtype=float)
            P = s[:, None] * vel
            P1 = np.broadcast_to(vel, (n, 3)).copy()
        elif self.kind == "spin":
            rate = float(pr.get("rate", 20.0))
            psi = rate * s
            psi1 = np.full(n, rate)
        elif self.kind == "figure_eight":
            A = float(pr.get("ax", 3.0))
            B = float(pr.get("ay", 1.5))
            Cz = float(pr.get("az", 0.2))
            w = 2 * np.pi / float(pr.get("period", 15.0))
            ws = w * s
            P = np.stack([A * np.sin(ws), B * np.sin(2 * ws), Cz * np.sin(ws) ** 2], axis=1)
            P1 = np.stack([A * w * np.cos(ws), 2 * B * w * np.cos(2 * ws), Cz * w * np.sin(2 * ws)], axis=1)
            P2 = np.stack([-A * w * w * np.sin(ws), -4 * B * w * w * np.sin(2 * ws), 2 * Cz * w * w * np.cos(2 * ws)], axis=1)
            # heading along the horizontal tangent
            x1, y1 = P1[:, 0], P1[:, 1]
            x2, y2 = P2[:, 0], P2[:, 1]
            psi = np.arctan2(y1, x1)
            h = x1 * x1 + y1 * y1
            psi1 = (x1 * y2 - y1 * x2) / h
            amp = float(pr.get("wobble", 0.1))
            fw = 2 * np.pi * float(pr.get("wobble_freq", 0.3))
            phi = amp * np.stack([np.sin(fw * s), 0.5 * np.sin(1.3 * fw * s + 0.4), np.zeros(n)], axis=1)
            phi1 = amp * np.stack([fw * np.cos(fw * s), 0.65 * fw * np.cos(1.3 * fw * s + 0.4), np.zeros(n)], axis=1)
        elif self.kind == "spline":
            sp, yaw, end = self._spline
            sc = np.clip(s, 0.0, end)
            inside = (s <= end)[:, None]
            P = sp(sc)
            P1 = np.where(inside, sp(sc, 1), 0.0)
            P2 = np.where(inside, sp(sc, 2), 0.0)
            psi = yaw(sc)
            psi1 = np.where(inside[:, 0], yaw(sc, 1), 0.0)
        return P, P1, P2, psi, psi1, phi, phi1

    def state(self, t) -> TruthState:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s, ds, dds = self.warp(t)
        P, P1, P2, psi, psi1, phi, phi1 = self._path(s)
        p = self.origin + P
        v = P1 * ds[:, None]
        a = P2 * (ds * ds)[:, None] + P1 * dds[:, None]
        E = so3.exp(phi)
        R = self.R0 @ _rz(psi) @ E
        dpsi = psi1 * ds
        dphi = phi1 * ds[:, None]
        w = np.swapaxes(E, -1, -2)[:, :, 2] * dpsi[:, None] + np.einsum("nij,nj->ni", so3.right_jacobian(phi), dphi)
        return TruthState(t, R, p, w, v, a)

    def pose(self, t):
        st = self.state(t)
        return st.R, st.p


def sample_times(t0: float, t1: float, rate: float, phase: float = 0.0) -> np.ndarray:
    """Regular sample times in ``[t0, t1)`` at ``rate`` Hz, offset by ``phase`` seconds."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    n0 = int(np.ceil((t0 - phase) * rate - 1e-9))
    n1 = int(np.ceil((t1 - phase) * rate - 1e-9))
    return phase + np.arange(n0, n1) / rate
