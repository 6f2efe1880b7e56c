"""End-to-end sliding-window estimator over recorded sensor streams."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ScenarioConfig
from .factors import body_points
from .measurements import ImuBatch, LidarBatch, MeasurementBatch, SensorStreams, to_ns
from .solver import Context, MarginalPrior, Window, slide_window
from .trajectory import KnotState, initialize, interpolate_batch
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Input streams unusable (for example no LiDAR data)."""


@dataclass
class RunReport:
    segments: int = 0
    iterations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    factor_counts: list = field(default_factory=list)
    diverged_segments: list = field(default_factory=list)
    dropouts: list = field(default_factory=list)
    saturated_samples: dict = field(default_factory=dict)
    late_measurements: int = 0
    total_wall_time: float = 0.0
    duration: float = 0.0
    map_points: int = 0
    gravity: list = field(default_factory=list)
    ate: dict | None = None
    seed: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EstimateResult:
    t: np.ndarray
    states: list  # KnotState per output time
    knot_times: np.ndarray
    report: RunReport
    records: list

    @property
    def R(self) -> np.ndarray:
        return np.array([s.R for s in self.states]).reshape(-1, 3, 3)

    @property
    def p(self) -> np.ndarray:
        return np.array([s.p for s in self.states]).reshape(-1, 3)

    @property
    def w(self) -> np.ndarray:
        return np.array([s.w for s in self.states]).reshape(-1, 3)


def find_dropouts(t: np.ndarray, sensor: np.ndarray, index: int, rate: float, span: tuple, name: str,
                  factor: float = 5.0) -> list:
    """Gaps longer than ``factor / rate`` in one sensor's timestamps within ``span``."""
    ts = np.concatenate([[span[0]], np.sort(t[sensor == index]), [span[1]]])
    gaps = np.flatnonzero(np.diff(ts) > factor / rate)
    return [{"sensor": f"{name}:{index}", "t_start": float(ts[g]), "t_end": float(ts[g + 1])} for g in gaps]


def _split(batch, bins, n):
    """Partition ``batch`` by integer bin index into ``n`` consecutive pieces."""
    order = np.argsort(bins, kind="stable")
    b = bins[order]
    edges = np.searchsorted(b, np.arange(n + 1))
    return [batch.select(order[edges[k]:edges[k + 1]]) for k in range(n)]


def _subsample(lid: LidarBatch, n_max: int) -> LidarBatch:
    """Evenly spaced (in time order) subset of at most ``n_max`` points, shared by all LiDARs."""
    if len(lid) <= n_max:
        return lid
    idx = np.round(np.linspace(0, len(lid) - 1, n_max)).astype(int)
    return lid.select(idx)


class Estimator:
    """Runs initialization, the sliding window and map maintenance over full streams."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.state_cfg = cfg.state_config()
        self.prior = cfg.hybrid_prior()
        self.ext = cfg.extrinsics()
        self.dt_ns = int(round(cfg.window.dt * 1e9))

    def _prepare(self, streams: SensorStreams) -> SensorStreams:
        s = streams.sorted()
        if len(s.lidar) == 0:
            raise DataError("no LiDAR measurements: at least one LiDAR stream is required")
        n_l = len(self.cfg.sensors.lidar)
        if np.any(s.lidar.sensor >= n_l):
            raise DataError(f"LiDAR sensor id {int(s.lidar.sensor.max())} not configured")
        gyro, accel = s.gyro, s.accel
        if len(gyro) and np.any(gyro.sensor >= len(self.cfg.sensors.gyro)):
            raise DataError("gyro sensor id not configured")
        if len(accel) and np.any(accel.sensor >= len(self.cfg.sensors.accel)):
            raise DataError("accel sensor id not configured")
        if len(gyro):
            gyro = gyro.flag_saturation([g.limit for g in self.cfg.sensors.gyro])
        if len(accel):
            accel = accel.flag_saturation([a.limit for a in self.cfg.sensors.accel])
        return SensorStreams(s.lidar, gyro, accel)

    def run(self, streams: SensorStreams) -> EstimateResult:
        cfg = self.cfg
        prior = self.prior
        wall0 = time.perf_counter()
        s = self._prepare(streams)
        report = RunReport(seed=cfg.seed)
        t_first, t_last = s.time_span()
        t0_ns = int(to_ns(t_first))
        end_ns = int(to_ns(t_last))
        n_seg = max(1, -(-(end_ns - t0_ns + 1) // self.dt_ns))
        report.duration = (end_ns - t0_ns) * 1e-9
        report.saturated_samples = {"gyro": int(s.gyro.saturated.sum()), "accel": int(s.accel.saturated.sum())}
        for name, batch, confs in (("lidar", s.lidar, cfg.sensors.lidar), ("gyro", s.gyro, cfg.sensors.gyro),
                                   ("accel", s.accel, cfg.sensors.accel)):
            for j, c in enumerate(confs):
                sel = batch.sensor == j
                report.dropouts += find_dropouts(batch.t[sel], batch.sensor[sel], j, c.rate, (t_first, t_last), name)

        # initialization: stationary start, map from the first points at the identity pose
        init = initialize(s.accel if self.state_cfg.uses_accel or len(s.accel) else None, t_first, prior, cfg.init,
                          [a.matrix() for a in cfg.sensors.accel] or [np.eye(3)])
        gravity = init.gravity
        report.gravity = [float(x) for x in gravity.g]
        vmap = VoxelMap(cfg.map)
        first = s.lidar.select(s.lidar.t < t_first + cfg.init.duration)
        vmap.insert(body_points(first.points, first.sensor, self.ext))

        x0 = init.trajectory.knots[0]
        window = Window([x0], [], MarginalPrior.from_covariance(x0.copy(), init.k0))
        ctx = Context(prior, self.ext, gravity, cfg.noise, vmap,
                      use_gyro=self.state_cfg.uses_gyro, use_accel=self.state_cfg.uses_accel)

        # per-segment measurement split (integer nanosecond bins)
        def bins(t):
            return (to_ns(t) - t0_ns) // self.dt_ns

        lid_parts = _split(s.lidar, bins(s.lidar.t), n_seg)
        gyr_parts = _split(s.gyro, bins(s.gyro.t), n_seg) if len(s.gyro) else [ImuBatch()] * n_seg
        acc_parts = _split(s.accel, bins(s.accel.t), n_seg) if len(s.accel) else [ImuBatch()] * n_seg

        out_states = []
        records = []
        K = cfg.window.segments
        out_period_ns = int(round(1e9 / cfg.estimator.output_rate))

        def emit(left: KnotState, right: KnotState, batch: MeasurementBatch):
            # outputs on the global output grid inside [left, right), plus the left knot
            first_q = -(-left.t_ns // out_period_ns) * out_period_ns
            q_ns = np.arange(first_q, right.t_ns, out_period_ns, dtype=np.int64)
            q_ns = np.union1d(q_ns, [left.t_ns])
            si = interpolate_batch(left, right, prior, q_ns * 1e-9)
            for i, tn in enumerate(q_ns):
                out_states.append(KnotState(int(tn), si.R[i], si.w[i], si.p[i], si.v[i], si.a[i], si.bg[i], si.ba[i]))
            lid = batch.lidar
            if len(lid):
                sl = interpolate_batch(left, right, prior, lid.t)
                pb = body_points(lid.points, lid.sensor, self.ext)
                vmap.insert(np.einsum("nij,nj->ni", sl.R, pb) + sl.p)
                vmap.cull(right.p)

        for k in range(n_seg):
            tic = time.perf_counter()
            batch = MeasurementBatch(
                _subsample(lid_parts[k], cfg.estimator.max_points_per_segment), gyr_parts[k], acc_parts[k]
            )
            result, dropped = slide_window(window, batch, cfg.window.dt, ctx, K, cfg.solver, segment_id=k)
            if dropped is not None:
                emit(*dropped)
            records += result.records
            report.iterations.append(result.iterations)
            report.factor_counts.append(result.counts.as_dict())
            if result.diverged:
                report.diverged_segments.append(k)
            report.wall_time.append(time.perf_counter() - tic)
        # flush the segments still held in the window
        for i in range(window.n_segments):
            emit(window.knots[i], window.knots[i + 1], window.batches[i])
        out_states.append(window.knots[-1].copy())

        report.segments = n_seg
        report.map_points = len(vmap)
        report.total_wall_time = time.perf_counter() - wall0
        t_out = np.array([st.t for st in out_states])
        knot_times = (t0_ns + self.dt_ns * np.arange(n_seg + 1)) * 1e-9
        return EstimateResult(t_out, out_states, knot_times, report, records)


def estimate(cfg: ScenarioConfig, streams: SensorStreams) -> EstimateResult:
    return Estimator(cfg).run(streams)
