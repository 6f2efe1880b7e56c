"""Sensor fault injection: dropouts and range saturation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..measurements import ImuBatch, SensorStreams

MODES = ("dropout", "saturate")
STREAMS = ("gyro", "accel", "imu", "lidar")


@dataclass(frozen=True)
class Fault:
    """``sensor`` is ``"<stream>:<index>"`` (``imu`` means gyro and accel of that index)."""

    sensor: str
    t_start: float
    t_end: float
    mode: str = "dropout"
    limit: float | None = None

    def __post_init__(self):
        stream, _, idx = self.sensor.partition(":")
        if stream not in STREAMS or not idx.isdigit():
            raise ValueError(f"bad fault sensor {self.sensor!r}; expected e.g. 'gyro:0'")
        if self.mode not in MODES:
            raise ValueError(f"bad fault mode {self.mode!r}; expected one of {MODES}")
        if not self.t_end > self.t_start:
            raise ValueError("fault interval must have t_end > t_start")
        if self.mode == "saturate":
            if stream == "lidar":
                raise ValueError("lidar cannot saturate")
            if self.limit is None or self.limit <= 0:
                raise ValueError("saturate faults need a positive limit")

    @property
    def stream(self) -> str:
        return self.sensor.partition(":")[0]

    @property
    def index(self) -> int:
        return int(self.sensor.partition(":")[2])

    def targets(self):
        return ("gyro", "accel") if self.stream == "imu" else (self.stream,)


def validate_schedule(schedule, duration: float) -> None:
    for f in schedule:
        if f.t_start < 0 or f.t_end > duration + 1e-9:
            raise ValueError(f"fault {f.sensor} [{f.t_start}, {f.t_end}] outside scenario duration {duration}")


def _in(f: Fault, t: np.ndarray, sensor: np.ndarray) -> np.ndarray:
    return (sensor == f.index) & (t >= f.t_start) & (t < f.t_end)


def apply_faults(streams: SensorStreams, schedule) -> tuple[SensorStreams, list]:
    """Apply every fault; overlapping dropouts act as a union.

    Returns the modified streams and one record per fault with the number of
    samples it affected.
    """
    lidar, gyro, accel = streams.lidar, streams.gyro, streams.accel
    drop = {"lidar": np.zeros(len(lidar), bool), "gyro": np.zeros(len(gyro), bool), "accel": np.zeros(len(accel), bool)}
    imu = {"gyro": gyro, "accel": accel}
    records = []
    for f in schedule:
        n = 0
        for name in f.targets():
            batch = lidar if name == "lidar" else imu[name]
            hit = _in(f, batch.t, batch.sensor)
            if f.mode == "dropout":
                drop[name] |= hit
            else:
                vals = batch.values.copy()
                vals[hit] = np.clip(vals[hit], -f.limit, f.limit)
                sat = batch.saturated | (hit & np.any(np.abs(batch.values) >= f.limit, axis=1))
                imu[name] = ImuBatch(vals, batch.t, batch.sensor, sat)
            n += int(hit.sum())
        records.append({"sensor": f.sensor, "t_start": f.t_start, "t_end": f.t_end, "mode": f.mode, "samples": n})
    out = SensorStreams(
        lidar.select(~drop["lidar"]) if drop["lidar"].any() else lidar,
        imu["gyro"].select(~drop["gyro"]) if drop["gyro"].any() else imu["gyro"],
        imu["accel"].select(~drop["accel"]) if drop["accel"].any() else imu["accel"],
    )
    return out, records


__all__ = ["Fault", "apply_faults", "validate_schedule"]
