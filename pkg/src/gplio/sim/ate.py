"""Absolute trajectory error after a single rigid alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import so3


class EmptyOverlapError(ValueError):
    """No estimate pose has a truth pose within the association gap."""


@dataclass
class AteResult:
    rmse: float
    mean: float
    max: float
    rmse_xyz: tuple
    rotation_rmse_deg: float
    n_pairs: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d["rmse_xyz"] = list(self.rmse_xyz)
        return d


def associate(t_est, t_ref, max_gap: float = 5e-3):
    """Index pairs ``(i_est, i_ref)`` matching each estimate time to the nearest reference time."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_est) == 0 or len(t_ref) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(t_ref, kind="stable")
    ts = t_ref[order]
    pos = np.searchsorted(ts, t_est)
    lo = np.clip(pos - 1, 0, len(ts) - 1)
    hi = np.clip(pos, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[hi] - t_est) < np.abs(ts[lo] - t_est), hi, lo)
    ok = np.abs(ts[pick] - t_est) <= max_gap
    return np.flatnonzero(ok), order[pick[ok]]


def umeyama(src: np.ndarray, dst: np.ndarray):
    """Rigid ``(R, t)`` minimizing ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate(t_est, R_est, p_est, t_ref, R_ref, p_ref, max_gap: float = 5e-3) -> AteResult:
    """Align the estimate to the reference and report translation/rotation errors."""
    i, j = associate(t_est, t_ref, max_gap)
    if len(i) == 0:
        raise EmptyOverlapError("estimate and reference share no timestamps within the gap")
    pe = np.asarray(p_est, dtype=float)[i]
    pr = np.asarray(p_ref, dtype=float)[j]
    if len(i) >= 3:
        R, t = umeyama(pe, pr)
    else:
        R, t = np.eye(3), pr.mean(axis=0) - pe.mean(axis=0)
    err = pe @ R.T + t - pr
    d = np.linalg.norm(err, axis=1)
    rot_err = so3.log(np.swapaxes(np.asarray(R_ref)[j], -1, -2) @ (R @ np.asarray(R_est)[i]), check=False)
    ang = np.degrees(np.linalg.norm(rot_err, axis=1))
    return AteResult(
        rmse=float(np.sqrt(np.mean(d * d))),
        mean=float(d.mean()),
        max=float(d.max()),
        rmse_xyz=tuple(float(x) for x in np.sqrt(np.mean(err * err, axis=0))),
        rotation_rmse_deg=float(np.sqrt(np.mean(ang * ang))),
        n_pairs=int(len(i)),
    )
