"""Turn a scenario configuration into sensor streams and ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import so3
from ..config import ScenarioConfig
from ..measurements import ImuBatch, LidarBatch, SensorStreams
from .faults import Fault, apply_faults, validate_schedule
from .sensors import GRAVITY, ImuSpec, LidarSpec, sample_imu, sample_lidar
from .truth import TimeWarp, TruthTrajectory, sample_times
from .world import PlaneWorld, make_world

TRUTH_RATE = 200.0


@dataclass
class Simulation:
    streams: SensorStreams
    truth: TruthTrajectory
    world: PlaneWorld
    faults: list = field(default_factory=list)

    def truth_samples(self, duration: float, rate: float = TRUTH_RATE):
        t = sample_times(0.0, duration, rate)
        return self.truth.state(t)


def build_truth(cfg: ScenarioConfig) -> TruthTrajectory:
    tc = cfg.trajectory
    return TruthTrajectory(
        tc.kind,
        dict(tc.params),
        TimeWarp(tc.t_still, tc.t_ramp),
        np.asarray(tc.origin, dtype=float),
        so3.exp(np.asarray(tc.rotation, dtype=float)),
    )


def lidar_specs(cfg: ScenarioConfig):
    return [
        LidarSpec(l.rate, l.pattern, l.channels, l.columns, tuple(l.hfov), tuple(l.vfov), l.noise,
                  l.min_range, l.max_range, l.extrinsic.matrix())
        for l in cfg.sensors.lidar
    ]


def imu_specs(imus):
    return [ImuSpec(c.rate, c.noise, tuple(c.bias), c.matrix(), c.limit, c.phase) for c in imus]


def simulate(cfg: ScenarioConfig) -> Simulation:
    """Sample every configured sensor over ``[0, duration)`` and apply the fault schedule.

    Each sensor draws from its own child generator of ``cfg.seed`` so adding a
    sensor does not change the others' noise.
    """
    truth = build_truth(cfg)
    world = make_world(cfg.world.kind, **cfg.world.params)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    lid_rngs = [np.random.default_rng(s) for s in seeds[0].spawn(max(len(cfg.sensors.lidar), 1))]
    gyr_rngs = [np.random.default_rng(s) for s in seeds[1].spawn(max(len(cfg.sensors.gyro), 1))]
    acc_rngs = [np.random.default_rng(s) for s in seeds[2].spawn(max(len(cfg.sensors.accel), 1))]
    T = cfg.duration
    lidar = LidarBatch.concat(
        sample_lidar(world, truth, spec, 0.0, T, lid_rngs[j], j) for j, spec in enumerate(lidar_specs(cfg))
    )
    gyro = ImuBatch.concat(
        sample_imu(truth, spec, "gyro", 0.0, T, gyr_rngs[j], j) for j, spec in enumerate(imu_specs(cfg.sensors.gyro))
    )
    accel = ImuBatch.concat(
        sample_imu(truth, spec, "accel", 0.0, T, acc_rngs[j], j, GRAVITY)
        for j, spec in enumerate(imu_specs(cfg.sensors.accel))
    )
    schedule = [Fault(f.sensor, f.t_start, f.t_end, f.mode, f.limit) for f in cfg.faults]
    validate_schedule(schedule, T)
    streams, records = apply_faults(SensorStreams(lidar, gyro, accel), schedule)
    return Simulation(streams.sorted(), truth, world, records)
