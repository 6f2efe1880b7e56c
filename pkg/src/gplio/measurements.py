"""Timestamped sensor measurements, stored column-wise for vectorized use."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LidarPoint:
    point: np.ndarray  # sensor frame, meters
    t: float
    lidar: int = 0


@dataclass(frozen=True)
class ImuSample:
    value: np.ndarray  # rad/s or m/s^2, sensor frame
    t: float
    sensor: int = 0
    saturated: bool = False


def to_ns(t) -> np.ndarray:
    return np.rint(np.asarray(t, dtype=float) * 1e9).astype(np.int64)


@dataclass
class LidarBatch:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sensor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.sensor = np.asarray(self.sensor, dtype=np.int64).reshape(-1)
        if not len(self.points) == len(self.t) == len(self.sensor):
            raise ValueError("lidar batch columns have different lengths")

    def __len__(self) -> int:
        return len(self.t)

    def select(self, mask) -> "LidarBatch":
        return LidarBatch(self.points[mask], self.t[mask], self.sensor[mask])

    @classmethod
    def concat(cls, batches) -> "LidarBatch":
        batches = list(batches)
        if not batches:
            return cls()
        return cls(
            np.concatenate([b.points for b in batches]),
            np.concatenate([b.t for b in batches]),
            np.concatenate([b.sensor for b in batches]),
        )

    @classmethod
    def from_points(cls, pts) -> "LidarBatch":
        pts = list(pts)
        return cls(
            np.array([p.point for p in pts]).reshape(-1, 3),
            np.array([p.t for p in pts]),
            np.array([p.lidar for p in pts], dtype=np.int64),
        )


@dataclass
class ImuBatch:
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sensor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    saturated: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.sensor = np.asarray(self.sensor, dtype=np.int64).reshape(-1)
        if self.saturated is None:
            self.saturated = np.zeros(len(self.t), dtype=bool)
        self.saturated = np.asarray(self.saturated, dtype=bool).reshape(-1)
        if not len(self.values) == len(self.t) == len(self.sensor) == len(self.saturated):
            raise ValueError("imu batch columns have different lengths")

    def __len__(self) -> int:
        return len(self.t)

    def select(self, mask) -> "ImuBatch":
        return ImuBatch(self.values[mask], self.t[mask], self.sensor[mask], self.saturated[mask])

    @classmethod
    def concat(cls, batches) -> "ImuBatch":
        batches = list(batches)
        if not batches:
            return cls()
        return cls(
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.t for b in batches]),
            np.concatenate([b.sensor for b in batches]),
            np.concatenate([b.saturated for b in batches]),
        )

    @classmethod
    def from_samples(cls, samples) -> "ImuBatch":
        samples = list(samples)
        return cls(
            np.array([s.value for s in samples]).reshape(-1, 3),
            np.array([s.t for s in samples]),
            np.array([s.sensor for s in samples], dtype=np.int64),
            np.array([s.saturated for s in samples], dtype=bool),
        )

    def flag_saturation(self, limits) -> "ImuBatch":
        """Return a copy with ``saturated`` set where any component reaches its
        sensor's range (``limits[sensor]``, ``inf`` for unlimited)."""
        limits = np.asarray(limits, dtype=float)
        if len(self) == 0:
            return self
        lim = limits[self.sensor]
        sat = self.saturated | np.any(np.abs(self.values) >= lim[:, None], axis=1)
        return ImuBatch(self.values, self.t, self.sensor, sat)


@dataclass
class MeasurementBatch:
    """All measurements falling in one segment ``[t_{k-1}, t_k)``."""

    lidar: LidarBatch = field(default_factory=LidarBatch)
    gyro: ImuBatch = field(default_factory=ImuBatch)
    accel: ImuBatch = field(default_factory=ImuBatch)

    def counts(self) -> dict:
        return {"lidar": len(self.lidar), "gyro": len(self.gyro), "accel": len(self.accel)}


@dataclass
class SensorStreams:
    """Complete recordings of every sensor, in arbitrary (per-sensor sorted) order."""

    lidar: LidarBatch = field(default_factory=LidarBatch)
    gyro: ImuBatch = field(default_factory=ImuBatch)
    accel: ImuBatch = field(default_factory=ImuBatch)

    def sorted(self) -> "SensorStreams":
        return SensorStreams(
            self.lidar.select(np.argsort(self.lidar.t, kind="stable")),
            self.gyro.select(np.argsort(self.gyro.t, kind="stable")),
            self.accel.select(np.argsort(self.accel.t, kind="stable")),
        )

    def time_span(self) -> tuple[float, float]:
        ts = [b.t for b in (self.lidar, self.gyro, self.accel) if len(b)]
        if not ts:
            raise ValueError("no measurements")
        return float(min(t.min() for t in ts)), float(max(t.max() for t in ts))
