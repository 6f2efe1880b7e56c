"""Linear time-invariant SDE motion priors.

Three white-noise driven priors are supported, each acting on an ``N``-dimensional
base variable ``p``:

============  ================  =============  ===========
kind          SDE               Markov state   order ``m``
============  ================  =============  ===========
random walk   ``p' = w``        ``p``          1
const. vel.   ``p'' = w``       ``p, p'``      2
const. acc.   ``p''' = w``      ``p, p', p''`` 3
============  ================  =============  ===========

For all three the transition matrix and process-noise covariance have the
closed forms ``Phi[i, j] = dt^(j-i) / (j-i)!`` and
``Q[i, j] = dt^(2m-1-i-j) / ((2m-1-i-j) (m-1-i)! (m-1-j)!) * Qc``
(the Kronecker factor ``Qc`` is the power-spectral density of ``w``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.linalg import block_diag


class PriorKind(enum.Enum):
    RANDOM_WALK = 1
    CONSTANT_VELOCITY = 2
    CONSTANT_ACCELERATION = 3

    @property
    def order(self) -> int:
        return self.value

    @classmethod
    def parse(cls, name: str | "PriorKind") -> "PriorKind":
        if isinstance(name, PriorKind):
            return name
        aliases = {
            "rw": cls.RANDOM_WALK,
            "random_walk": cls.RANDOM_WALK,
            "cv": cls.CONSTANT_VELOCITY,
            "constant_velocity": cls.CONSTANT_VELOCITY,
            "ca": cls.CONSTANT_ACCELERATION,
            "constant_acceleration": cls.CONSTANT_ACCELERATION,
        }
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown prior kind {name!r}") from None


RW = PriorKind.RANDOM_WALK
CV = PriorKind.CONSTANT_VELOCITY
CA = PriorKind.CONSTANT_ACCELERATION


def transition_scalar(order: int, dt: float) -> np.ndarray:
    """``order x order`` transition matrix for a scalar base variable."""
    phi = np.zeros((order, order))
    for i in range(order):
        for j in range(i, order):
            phi[i, j] = dt ** (j - i) / factorial(j - i)
    return phi


def process_noise_scalar(order: int, dt: float) -> np.ndarray:
    """``order x order`` process noise for a scalar base variable and ``Qc = 1``."""
    q = np.empty((order, order))
    m = order
    for i in range(m):
        for j in range(m):
            p = 2 * m - 1 - i - j
            q[i, j] = dt**p / (p * factorial(m - 1 - i) * factorial(m - 1 - j))
    return q


def check_noise_density(qc: np.ndarray) -> np.ndarray:
    qc = np.atleast_2d(np.asarray(qc, dtype=float))
    if qc.shape[0] != qc.shape[1]:
        raise ValueError(f"Qc must be square, got {qc.shape}")
    if not np.allclose(qc, qc.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(qc).max())):
        raise ValueError("Qc must be symmetric")
    try:
        np.linalg.cholesky(qc)
    except np.linalg.LinAlgError:
        raise ValueError("Qc must be positive definite") from None
    return qc


def transition(kind: PriorKind, dt: float, dim: int = 3) -> np.ndarray:
    """Transition matrix ``Phi(dt)`` for a ``dim``-dimensional base variable.

    Raises ``ValueError`` for negative ``dt``.
    """
    if dt < 0:
        raise ValueError(f"transition needs dt >= 0, got {dt}")
    return np.kron(transition_scalar(kind.order, dt), np.eye(dim))


def process_noise(kind: PriorKind, dt: float, qc: np.ndarray) -> np.ndarray:
    """Process-noise covariance ``Q(dt)`` for power-spectral density ``qc``."""
    if dt <= 0:
        raise ValueError(f"process_noise needs dt > 0, got {dt}")
    qc = check_noise_density(qc)
    return np.kron(process_noise_scalar(kind.order, dt), qc)


def system_matrices(kind: PriorKind, dim: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """``(A, F)`` of ``x' = A x + F w`` for the stacked Markov state."""
    m = kind.order
    a = np.kron(np.eye(m, k=1), np.eye(dim))
    f = np.kron(np.eye(m)[:, -1:], np.eye(dim))
    return a, f


def _as_density(value, dim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.ndim == 1:
        return np.diag(arr)
    return arr


@dataclass(frozen=True)
class HybridPrior:
    """Block-diagonal prior over ``[rotation, translation, gyro biases, accel biases]``.

    The rotation block lives in the local tangent space of the segment start
    (``theta``, and ``theta'`` for the constant-velocity prior).  Each bias is a
    3-vector random walk; biases are ordered by sensor registration.

    Noise densities may be given as scalars (times identity), diagonals or full
    3x3 matrices.
    """

    rotation: PriorKind = CV
    translation: PriorKind = CA
    n_gyro_bias: int = 0
    n_accel_bias: int = 0
    qc_rotation: object = 1e-2
    qc_translation: object = 1e-1
    qc_gyro_bias: object = 1e-5
    qc_accel_bias: object = 1e-5
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.rotation not in (RW, CV):
            raise ValueError("rotation prior must be random walk or constant velocity")
        if self.n_gyro_bias < 0 or self.n_accel_bias < 0:
            raise ValueError("bias counts must be non-negative")
        for name in ("qc_rotation", "qc_translation", "qc_gyro_bias", "qc_accel_bias"):
            check_noise_density(_as_density(getattr(self, name), 3))

    # -- layout -------------------------------------------------------------
    @property
    def rot_order(self) -> int:
        return self.rotation.order

    @property
    def trans_order(self) -> int:
        return self.translation.order

    @property
    def rot_dim(self) -> int:
        return 3 * self.rotation.order

    @property
    def trans_dim(self) -> int:
        return 3 * self.translation.order

    @property
    def dim(self) -> int:
        return self.rot_dim + self.trans_dim + 3 * (self.n_gyro_bias + self.n_accel_bias)

    @property
    def rot_slice(self) -> slice:
        return slice(0, self.rot_dim)

    @property
    def trans_slice(self) -> slice:
        return slice(self.rot_dim, self.rot_dim + self.trans_dim)

    def gyro_bias_slice(self, j: int) -> slice:
        if not 0 <= j < self.n_gyro_bias:
            raise IndexError(f"gyro bias index {j} out of range")
        s = self.rot_dim + self.trans_dim + 3 * j
        return slice(s, s + 3)

    def accel_bias_slice(self, j: int) -> slice:
        if not 0 <= j < self.n_accel_bias:
            raise IndexError(f"accel bias index {j} out of range")
        s = self.rot_dim + self.trans_dim + 3 * (self.n_gyro_bias + j)
        return slice(s, s + 3)

    def blocks(self):
        """``(kind, Qc)`` for each diagonal block in state order."""
        out = [
            (self.rotation, _as_density(self.qc_rotation, 3)),
            (self.translation, _as_density(self.qc_translation, 3)),
        ]
        out += [(RW, _as_density(self.qc_gyro_bias, 3))] * self.n_gyro_bias
        out += [(RW, _as_density(self.qc_accel_bias, 3))] * self.n_accel_bias
        return out

    # -- matrices -----------------------------------------------------------
    def transition(self, dt: float) -> np.ndarray:
        return hybrid_transition(self, dt)

    def process_noise(self, dt: float) -> np.ndarray:
        return hybrid_process_noise(self, dt)

    def process_noise_inv(self, dt: float) -> np.ndarray:
        key = ("qinv", round(dt * 1e9))
        if key not in self._cache:
            q = hybrid_process_noise(self, dt)
            self._cache[key] = np.linalg.inv(q)
        return self._cache[key]


def hybrid_transition(prior: HybridPrior, dt: float) -> np.ndarray:
    return block_diag(*(transition(kind, dt) for kind, _ in prior.blocks()))


def hybrid_process_noise(prior: HybridPrior, dt: float) -> np.ndarray:
    return block_diag(*(process_noise(kind, dt, qc) for kind, qc in prior.blocks()))


def kernel_matrix(prior: HybridPrior, knot_times, k0: np.ndarray) -> np.ndarray:
    """Dense prior covariance over all knots (diagnostics and tests only).

    ``K(t_i, t_j) = Phi(t_i, t_j) K(t_j, t_j)`` for ``i >= j`` with
    ``K(t, t) = Phi(t, t0) K0 Phi(t, t0)^T + Q(t, t0)``.
    """
    times = np.asarray(knot_times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    d = prior.dim
    k0 = np.asarray(k0, dtype=float)
    if k0.shape != (d, d):
        raise ValueError(f"K0 must be {d}x{d}")
    n = len(times)
    marg = []
    for t in times:
        dt = t - times[0]
        phi = hybrid_transition(prior, dt)
        cov = phi @ k0 @ phi.T
        if dt > 0:
            cov = cov + hybrid_process_noise(prior, dt)
        marg.append(cov)
    out = np.zeros((n * d, n * d))
    for i in range(n):
        for j in range(i + 1):
            blk = hybrid_transition(prior, times[i] - times[j]) @ marg[j]
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = blk
            out[j * d:(j + 1) * d, i * d:(i + 1) * d] = blk.T
    return out
