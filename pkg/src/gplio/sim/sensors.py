"""LiDAR and IMU sampling from a ground-truth trajectory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..measurements import ImuBatch, LidarBatch
from .truth import TruthTrajectory, sample_times
from .world import PlaneWorld

GRAVITY = np.array([0.0, 0.0, 9.81])


@dataclass(frozen=True)
class LidarSpec:
    """Scanning LiDAR.

    ``pattern="spinning"`` sweeps ``columns`` azimuth steps per scan, firing all
    ``channels`` elevations at once per step; ``"random"`` draws
    ``channels * columns`` directions uniformly in the field of view at
    uniformly spread times.  Either way timestamps cover the whole scan period.
    """

    rate: float = 10.0
    pattern: str = "spinning"
    channels: int = 16
    columns: int = 90
    hfov: tuple = (-180.0, 180.0)  # degrees, azimuth about sensor z
    vfov: tuple = (-15.0, 15.0)  # degrees, elevation
    noise: float = 0.02
    min_range: float = 0.3
    max_range: float = 60.0
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.rate <= 0 or self.channels < 1 or self.columns < 1:
            raise ValueError("lidar rate, channels and columns must be positive")
        if self.pattern not in ("spinning", "random"):
            raise ValueError(f"unknown lidar pattern {self.pattern!r}")

    @property
    def points_per_second(self) -> float:
        return self.rate * self.channels * self.columns


@dataclass(frozen=True)
class ImuSpec:
    rate: float = 200.0
    noise: float = 1e-3
    bias: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # sensor-to-body
    limit: float = np.inf
    phase: float = 0.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("imu rate must be positive")


def _directions(spec: LidarSpec, n_scans: int, rng: np.random.Generator):
    """Unit directions (sensor frame) and time fractions within each scan."""
    h0, h1 = np.radians(spec.hfov)
    v0, v1 = np.radians(spec.vfov)
    per_scan = spec.channels * spec.columns
    if spec.pattern == "spinning":
        full = np.isclose(h1 - h0, 2 * np.pi)
        az = h0 + (h1 - h0) * np.arange(spec.columns) / (spec.columns if full else max(spec.columns - 1, 1))
        el = np.linspace(v0, v1, spec.channels) if spec.channels > 1 else np.array([0.5 * (v0 + v1)])
        A, E = np.meshgrid(az, el, indexing="ij")
        frac = np.repeat(np.arange(spec.columns) / spec.columns, spec.channels)
        A = np.tile(A.reshape(-1), n_scans)
        E = np.tile(E.reshape(-1), n_scans)
        frac = np.tile(frac, n_scans)
    else:
        A = rng.uniform(h0, h1, n_scans * per_scan)
        E = np.arcsin(rng.uniform(np.sin(v0), np.sin(v1), n_scans * per_scan))
        frac = np.sort(rng.uniform(0.0, 1.0, (n_scans, per_scan)), axis=1).reshape(-1)
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)
    return d, frac


def sample_lidar(world: PlaneWorld, truth: TruthTrajectory, spec: LidarSpec, t0: float, t1: float,
                 rng: np.random.Generator, sensor: int = 0, chunk: int = 20) -> LidarBatch:
    """Cast rays from the true sensor pose at every point's own timestamp.

    Scans start at multiples of ``1 / rate``; only points with timestamps in
    ``[t0, t1)`` are kept.  Returned points are in the sensor frame with range
    noise along the ray; rays that miss every surface are skipped.
    """
    scan_starts = sample_times(t0 - 1.0 / spec.rate, t1, spec.rate)
    T = np.asarray(spec.extrinsic, dtype=float)
    out = []
    for i in range(0, len(scan_starts), chunk):
        starts = scan_starts[i:i + chunk]
        d, frac = _directions(spec, len(starts), rng)
        per = len(d) // len(starts)
        t = np.repeat(starts, per) + frac / spec.rate
        keep = (t >= t0) & (t < t1)
        d, t = d[keep], t[keep]
        if len(t) == 0:
            continue
        st = truth.state(t)
        Rs = st.R @ T[:3, :3]
        origin = st.p + np.einsum("nij,j->ni", st.R, T[:3, 3])
        dw = np.einsum("nij,nj->ni", Rs, d)
        r, _ = world.raycast(origin, dw, spec.max_range)
        hit = np.isfinite(r) & (r >= spec.min_range)
        rn = r[hit] + spec.noise * rng.standard_normal(int(hit.sum()))
        out.append(LidarBatch(rn[:, None] * d[hit], t[hit], np.full(int(hit.sum()), sensor)))
    return LidarBatch.concat(out)


def sample_imu(truth: TruthTrajectory, spec: ImuSpec, kind: str, t0: float, t1: float,
               rng: np.random.Generator, sensor: int = 0, gravity=GRAVITY) -> ImuBatch:
    """Gyro (``kind="gyro"``) or accelerometer samples in the sensor frame.

    ``w_meas = R_G^T (w + b_g) + n`` and ``a_meas = R_A^T (R^T (a + g) + b_a) + n``.
    Components beyond ``spec.limit`` are clamped and the sample flagged.
    """
    if kind not in ("gyro", "accel"):
        raise ValueError(f"unknown imu kind {kind!r}")
    t = sample_times(t0, t1, spec.rate, spec.phase)
    st = truth.state(t) if len(t) else None
    if st is None:
        return ImuBatch()
    if kind == "gyro":
        body = st.w
    else:
        body = np.einsum("nji,nj->ni", st.R, st.a + np.asarray(gravity))
    body = body + np.asarray(spec.bias, dtype=float)
    vals = body @ np.asarray(spec.rotation, dtype=float)  # R^T x for each row
    vals = vals + spec.noise * rng.standard_normal(vals.shape)
    sat = np.any(np.abs(vals) >= spec.limit, axis=1)
    vals = np.clip(vals, -spec.limit, spec.limit)
    return ImuBatch(vals, t, np.full(len(t), sensor), sat)
