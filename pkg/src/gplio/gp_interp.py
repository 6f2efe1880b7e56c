"""Constant-time GP interpolation between two consecutive knots.

For a query at normalized time ``alpha = (tau - t_{k-1}) / dt`` the posterior
mean is ``x(tau) = Lam x(t_{k-1}) + Psi x(t_k)``.  The coefficient matrices are
Kronecker products ``lam (x) I_n`` of small ``order x order`` scalar matrices,
so this module works with the scalar matrices and applies them blockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import so3
from .gp_prior import CV, PriorKind, process_noise, transition


@dataclass(frozen=True)
class InterpCoeffs:
    """Scalar interpolation coefficients for one query time.

    ``lam`` and ``psi`` are ``order x order``; :meth:`full` expands them to the
    ``n``-dimensional block form.
    """

    lam: np.ndarray
    psi: np.ndarray
    alpha: float
    dt: float

    @property
    def order(self) -> int:
        return self.lam.shape[-1]

    def full(self, dim: int = 3) -> tuple[np.ndarray, np.ndarray]:
        eye = np.eye(dim)
        return np.kron(self.lam, eye), np.kron(self.psi, eye)


def coefficient_scalars(order: int, alpha, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``(lam, psi)`` for an array of ``alpha`` values.

    Returns arrays of shape ``alpha.shape + (order, order)``.  These are
    independent of the noise density.
    """
    a = np.asarray(alpha, dtype=float)
    b = 1.0 - a
    shape = a.shape + (order, order)
    lam = np.empty(shape)
    psi = np.empty(shape)
    if order == 1:
        lam[..., 0, 0] = b
        psi[..., 0, 0] = a
    elif order == 2:
        a2, a3 = a * a, a * a * a
        lam[..., 0, 0] = (1 + 2 * a) * b * b
        lam[..., 0, 1] = a * b * b * dt
        lam[..., 1, 0] = -6 * a * b / dt
        lam[..., 1, 1] = (1 - 3 * a) * b
        psi[..., 0, 0] = 3 * a2 - 2 * a3
        psi[..., 0, 1] = (a3 - a2) * dt
        psi[..., 1, 0] = 6 * a * b / dt
        psi[..., 1, 1] = 3 * a2 - 2 * a
    elif order == 3:
        a2, a3 = a * a, a * a * a
        b2, b3 = b * b, b * b * b
        dt2 = dt * dt
        lam[..., 0, 0] = (1 + 3 * a + 6 * a2) * b3
        lam[..., 0, 1] = (a + 3 * a2) * b3 * dt
        lam[..., 0, 2] = 0.5 * a2 * b3 * dt2
        lam[..., 1, 0] = -30 * a2 * b2 / dt
        lam[..., 1, 1] = (1 + 2 * a - 15 * a2) * b2
        lam[..., 1, 2] = 0.5 * (2 * a - 5 * a2) * b2 * dt
        lam[..., 2, 0] = -60 * a * (1 - 2 * a) * b / dt2
        lam[..., 2, 1] = -12 * a * (3 - 5 * a) * b / dt
        lam[..., 2, 2] = (1 - 8 * a + 10 * a2) * b
        psi[..., 0, 0] = (10 - 15 * a + 6 * a2) * a3
        psi[..., 0, 1] = (-4 + 7 * a - 3 * a2) * a3 * dt
        psi[..., 0, 2] = 0.5 * b2 * a3 * dt2
        psi[..., 1, 0] = 30 * b2 * a2 / dt
        psi[..., 1, 1] = (-12 + 28 * a - 15 * a2) * a2
        psi[..., 1, 2] = 0.5 * (3 - 8 * a + 5 * a2) * a2 * dt
        psi[..., 2, 0] = 60 * (a - 3 * a2 + 2 * a3) / dt2
        psi[..., 2, 1] = -12 * (2 * a - 7 * a2 + 5 * a3) / dt
        psi[..., 2, 2] = 3 * a - 12 * a2 + 10 * a3
    else:
        raise ValueError(f"unsupported prior order {order}")
    return lam, psi


def interp_coeffs(kind: PriorKind, dt: float, tau_offset: float, qc=None) -> InterpCoeffs:
    """Interpolation coefficients for a query ``tau_offset`` seconds into a segment.

    ``qc`` is accepted for interface symmetry with :func:`general_coeffs`; the
    closed forms do not depend on it.
    """
    if dt <= 0:
        raise ValueError("segment length must be positive")
    if not 0.0 <= tau_offset <= dt:
        raise ValueError(f"query offset {tau_offset} outside [0, {dt}]")
    alpha = tau_offset / dt
    lam, psi = coefficient_scalars(kind.order, alpha, dt)
    return InterpCoeffs(lam, psi, alpha, dt)


def general_coeffs(kind: PriorKind, dt: float, tau_offset: float, qc) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients from ``Psi = Q(tau) Phi(t_k, tau)^T Q(dt)^-1`` and
    ``Lam = Phi(tau) - Psi Phi(dt)`` (full block matrices, for checking)."""
    qc = np.atleast_2d(np.asarray(qc, dtype=float))
    n = qc.shape[0]
    phi_tau = transition(kind, tau_offset, n)
    phi_full = transition(kind, dt, n)
    phi_rest = transition(kind, dt - tau_offset, n)
    if tau_offset == 0.0:
        q_tau = np.zeros_like(phi_tau)
    else:
        q_tau = process_noise(kind, tau_offset, qc)
    psi = q_tau @ phi_rest.T @ np.linalg.inv(process_noise(kind, dt, qc))
    lam = phi_tau - psi @ phi_full
    return lam, psi


def interp_vector(x_left, x_right, c: InterpCoeffs) -> np.ndarray:
    """Interpolate a stacked Markov state ``[p, p', ...]`` (flat or ``(order, n)``)."""
    xl = np.asarray(x_left, dtype=float)
    xr = np.asarray(x_right, dtype=float)
    if xl.shape != xr.shape:
        raise ValueError(f"knot shapes differ: {xl.shape} vs {xr.shape}")
    m = c.order
    flat = xl.ndim == 1
    if flat:
        if xl.size % m:
            raise ValueError(f"state of size {xl.size} is not a multiple of order {m}")
        xl = xl.reshape(m, -1)
        xr = xr.reshape(m, -1)
    elif xl.shape[0] != m:
        raise ValueError(f"expected {m} derivative blocks, got {xl.shape[0]}")
    out = c.lam @ xl + c.psi @ xr
    return out.reshape(-1) if flat else out


def interp_rotation(R_left, w_left, R_right, w_right, c: InterpCoeffs):
    """Interpolate ``(R, omega)`` through the local tangent state of the segment.

    The endpoints are mapped to local states ``[0, w_left]`` and
    ``[theta_k, J_r(theta_k)^-1 w_right]`` with ``theta_k = Log(R_left^T R_right)``,
    interpolated with the (constant-velocity) coefficients and mapped back via
    ``R = R_left Exp(theta)`` and ``omega = J_r(theta) theta'``.
    """
    if c.order != CV.order:
        raise ValueError("rotation interpolation uses the constant-velocity prior")
    R_left = np.asarray(R_left, dtype=float)
    theta_k = so3.log(R_left.T @ np.asarray(R_right, dtype=float))
    if np.linalg.norm(theta_k) >= np.pi:
        raise ValueError("relative rotation across the segment reaches pi")
    left = np.stack([np.zeros(3), np.asarray(w_left, dtype=float)])
    right = np.stack([theta_k, so3.right_jacobian_inv(theta_k) @ np.asarray(w_right, dtype=float)])
    theta, theta_dot = interp_vector(left, right, c)
    return R_left @ so3.exp(theta), so3.right_jacobian(theta) @ theta_dot
