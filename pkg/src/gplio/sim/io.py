"""Line-oriented sensor stream files.

One record per line, ``type sensor_id t v1 v2 v3`` with ``type`` in
``lidar``/``gyro``/``accel``, times in seconds and SI values (LiDAR points in
the sensor frame, meters).  Records are written in time order; ``#`` starts a
comment.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..measurements import ImuBatch, LidarBatch, SensorStreams

TYPES = ("lidar", "gyro", "accel")


class StreamFormatError(ValueError):
    pass


def write_streams(path, streams: SensorStreams) -> None:
    parts = []
    for code, batch in enumerate((streams.lidar, streams.gyro, streams.accel)):
        vals = batch.points if code == 0 else batch.values
        parts.append((np.full(len(batch), code), batch.sensor, batch.t, vals))
    code = np.concatenate([p[0] for p in parts]).astype(int)
    sensor = np.concatenate([p[1] for p in parts]).astype(int)
    t = np.concatenate([p[2] for p in parts])
    vals = np.concatenate([p[3] for p in parts]).reshape(-1, 3)
    order = np.lexsort((sensor, code, t))
    lines = [
        f"{TYPES[c]} {s} {ti:.9f} {x:.9g} {y:.9g} {z:.9g}"
        for c, s, ti, (x, y, z) in zip(code[order], sensor[order], t[order], vals[order])
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_streams(path) -> SensorStreams:
    """Parse a stream file; malformed lines raise :class:`StreamFormatError` with the line number."""
    cols = {name: ([], [], []) for name in TYPES}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        f = s.split()
        if len(f) != 6:
            raise StreamFormatError(f"{path}:{lineno}: expected 6 fields, got {len(f)}")
        if f[0] not in cols:
            raise StreamFormatError(f"{path}:{lineno}: unknown record type {f[0]!r}")
        try:
            sid = int(f[1])
            vals = [float(x) for x in f[2:]]
        except ValueError:
            raise StreamFormatError(f"{path}:{lineno}: malformed number") from None
        if sid < 0 or not np.all(np.isfinite(vals)):
            raise StreamFormatError(f"{path}:{lineno}: invalid sensor id or non-finite value")
        sensor, t, v = cols[f[0]]
        sensor.append(sid)
        t.append(vals[0])
        v.append(vals[1:])

    def arrays(name):
        sensor, t, v = cols[name]
        return np.array(v, dtype=float).reshape(-1, 3), np.array(t, dtype=float), np.array(sensor, dtype=np.int64)

    pts, tl, sl = arrays("lidar")
    gv, gt, gs = arrays("gyro")
    av, at, as_ = arrays("accel")
    return SensorStreams(LidarBatch(pts, tl, sl), ImuBatch(gv, gt, gs), ImuBatch(av, at, as_))
