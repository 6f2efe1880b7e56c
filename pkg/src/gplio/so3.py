"""Rotation-group primitives on SO(3).

All functions accept a single 3-vector / 3x3 matrix or a stack of them
(leading batch dimensions) and broadcast accordingly.

Conventions
-----------
* ``exp(theta)`` is the Rodrigues map
  ``I + sin(phi)/phi hat(theta) + (1 - cos(phi))/phi^2 hat(theta)^2``.
* Perturbations are applied on the right, ``R <- R @ exp(delta)``, so the
  right Jacobian ``J_r`` relates tangent increments: for small ``d``,
  ``exp(theta + d) ~= exp(theta) @ exp(J_r(theta) @ d)``.
* ``log`` returns the axis-angle vector with norm in ``[0, pi]``.  At exactly
  ``pi`` the axis is chosen as the lexicographically non-negative unit
  eigenvector (first non-zero component positive).
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-6
# Below this angle the derivative coefficients switch to their power series;
# the closed forms lose ~eps / phi**2 relative precision.
_SERIES_ANGLE = 1e-2
_ORTHO_TOL = 1e-6
_EYE = np.eye(3)
_EYE.flags.writeable = False


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix, ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (uses the antisymmetric part of ``m``)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def _cross(a, b):
    # np.cross has a large fixed overhead for single vectors
    return np.stack(
        [a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
         a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
         a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]],
        axis=-1,
    )


def _angle(theta: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(theta * theta, axis=-1))


def _a(phi):
    # (1 - cos phi) / phi^2, written with the half angle to avoid cancellation
    small = phi < SMALL_ANGLE
    p = np.where(small, 1.0, phi)
    s = np.sin(0.5 * p) / (0.5 * p)
    return np.where(small, 0.5 - phi**2 / 24.0, 0.5 * s * s)


def _b(phi):
    # (phi - sin phi) / phi^3
    small = phi < _SERIES_ANGLE
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    series = 1.0 / 6.0 - p2 / 120.0 + p2 * p2 / 5040.0 - p2**3 / 362880.0
    return np.where(small, series, (p - np.sin(p)) / p**3)


def _c(phi):
    # 1/phi^2 - (1 + cos phi) / (2 phi sin phi), the J_r^{-1} quadratic coefficient
    small = phi < _SERIES_ANGLE
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    series = 1.0 / 12.0 + p2 / 720.0 + p2 * p2 / 30240.0 + p2**3 / 1209600.0
    exact = 1.0 / p**2 - (1.0 + np.cos(p)) / (2.0 * p * np.sin(p))
    return np.where(small, series, exact)


def _da_over_phi(phi):
    small = phi < _SERIES_ANGLE
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    series = -1.0 / 12.0 + p2 / 180.0 - p2 * p2 / 6720.0 + p2**3 / 453600.0
    exact = (p * np.sin(p) - 2.0 * (1.0 - np.cos(p))) / p**4
    return np.where(small, series, exact)


def _db_over_phi(phi):
    small = phi < _SERIES_ANGLE
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    series = -1.0 / 60.0 + p2 / 1260.0 - p2 * p2 / 60480.0 + p2**3 / 4989600.0
    exact = (3.0 * np.sin(p) - 2.0 * p - p * np.cos(p)) / p**5
    return np.where(small, series, exact)


def _dc_over_phi(phi):
    small = phi < _SERIES_ANGLE
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    series = 1.0 / 360.0 + p2 / 7560.0 + p2 * p2 / 201600.0 + p2**3 / 5987520.0
    half = 0.5 * p
    cot = np.cos(half) / np.sin(half)
    csc2 = 1.0 / np.sin(half) ** 2
    exact = (-2.0 / p**3 + csc2 / (4.0 * p) + cot / (2.0 * p**2)) / p
    return np.where(small, series, exact)


def exp(theta: np.ndarray) -> np.ndarray:
    """Exponential map R^3 -> SO(3) (Rodrigues formula).

    Below ``SMALL_ANGLE`` the second-order Taylor series
    ``I + hat(theta) + hat(theta)^2 / 2`` is used.
    """
    theta = np.asarray(theta, dtype=float)
    phi = _angle(theta)
    small = phi < SMALL_ANGLE
    p = np.where(small, 1.0, phi)
    sinc = np.where(small, 1.0 - phi**2 / 6.0, np.sin(p) / p)
    a = _a(phi)
    k = hat(theta)
    k2 = k @ k
    return _EYE + sinc[..., None, None] * k + a[..., None, None] * k2


def log(R: np.ndarray, check: bool = True) -> np.ndarray:
    """Logarithm map SO(3) -> R^3 with ``|theta| <= pi``.

    The angle is recovered with ``atan2`` of the antisymmetric and trace parts,
    which stays well conditioned near both 0 and pi.  When the antisymmetric part
    is too small to define the axis (angles within ~1e-6 of pi) the axis is the
    eigenvector of the symmetric part with eigenvalue 1.

    Raises
    ------
    ValueError
        If ``check`` and the input is not a proper rotation (tolerance 1e-6).
    """
    R = np.asarray(R, dtype=float)
    if check:
        _check_rotation(R)
    w = vee(R)  # sin(phi) * axis
    s = _angle(w)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    phi = np.arctan2(s, c)
    small = phi < SMALL_ANGLE
    ps = np.where(small, 1.0, phi)
    ss = np.where(s == 0.0, 1.0, s)
    scale = np.where(small, 1.0 + phi**2 / 6.0, ps / ss)
    theta = scale[..., None] * w
    near_pi = (s < 1e-6) & (c < 0.0)
    if np.any(near_pi):
        theta = np.array(theta, copy=True)
        flat_R = R.reshape(-1, 3, 3)
        flat_t = theta.reshape(-1, 3)
        flat_w = w.reshape(-1, 3)
        flat_phi = np.reshape(phi, -1)
        for i in np.flatnonzero(np.reshape(near_pi, -1)):
            sym = 0.5 * (flat_R[i] + flat_R[i].T)
            _, vecs = np.linalg.eigh(sym)
            axis = vecs[:, -1]
            if flat_w[i] @ axis < 0.0 or (np.linalg.norm(flat_w[i]) == 0.0 and _lex_negative(axis)):
                axis = -axis
            flat_t[i] = flat_phi[i] * axis
        theta = flat_t.reshape(theta.shape)
    return theta


def _lex_negative(v: np.ndarray) -> bool:
    for x in v:
        if abs(x) > 1e-12:
            return x < 0.0
    return False


def _check_rotation(R: np.ndarray) -> None:
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) rotation, got shape {R.shape}")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - _EYE).max(initial=0.0)
    if not np.isfinite(err) or err > _ORTHO_TOL:
        raise ValueError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3g})")
    if np.any(np.linalg.det(R) <= 0.0):
        raise ValueError("matrix has non-positive determinant")


def right_jacobian(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian ``J_r(theta) = I - a hat + b hat^2``."""
    theta = np.asarray(theta, dtype=float)
    phi = _angle(theta)
    k = hat(theta)
    return _EYE - _a(phi)[..., None, None] * k + _b(phi)[..., None, None] * (k @ k)


def right_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian ``I + hat/2 + c hat^2``, valid for ``|theta| < pi``."""
    theta = np.asarray(theta, dtype=float)
    phi = _angle(theta)
    if np.any(phi >= np.pi):
        raise ValueError("right_jacobian_inv is only defined for |theta| < pi")
    k = hat(theta)
    return _EYE + 0.5 * k + _c(phi)[..., None, None] * (k @ k)


def left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    """``J_l(theta)^{-1} = J_r(-theta)^{-1}``."""
    return right_jacobian_inv(-np.asarray(theta, dtype=float))


def _quadratic_term_derivative(theta, v):
    # d/dtheta [theta x (theta x v)] = (theta.v) I + theta v^T - 2 v theta^T
    tv = np.sum(theta * v, axis=-1)
    return (
        tv[..., None, None] * _EYE
        + theta[..., :, None] * v[..., None, :]
        - 2.0 * v[..., :, None] * theta[..., None, :]
    )


def right_jacobian_times_derivative(theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Derivative of ``J_r(theta) @ v`` with respect to ``theta`` (3x3)."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    theta, v = np.broadcast_arrays(theta, v)
    phi = _angle(theta)
    txv = _cross(theta, v)
    txtxv = _cross(theta, txv)
    radial = -_da_over_phi(phi)[..., None] * txv + _db_over_phi(phi)[..., None] * txtxv
    return (
        _a(phi)[..., None, None] * hat(v)
        + _b(phi)[..., None, None] * _quadratic_term_derivative(theta, v)
        + radial[..., :, None] * theta[..., None, :]
    )


def right_jacobian_inv_times_derivative(theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Derivative of ``J_r(theta)^{-1} @ v`` with respect to ``theta`` (3x3)."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    theta, v = np.broadcast_arrays(theta, v)
    phi = _angle(theta)
    txtxv = _cross(theta, _cross(theta, v))
    radial = _dc_over_phi(phi)[..., None] * txtxv
    return (
        -0.5 * hat(v)
        + _c(phi)[..., None, None] * _quadratic_term_derivative(theta, v)
        + radial[..., :, None] * theta[..., None, :]
    )


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - _EYE).max(initial=0.0)
    return bool(err < tol and np.all(np.abs(np.linalg.det(R) - 1.0) < tol))


def normalize(R: np.ndarray) -> np.ndarray:
    """Project onto SO(3) via SVD (removes accumulated round-off)."""
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    u[..., :, -1] *= d[..., None]
    return u @ vt
