"""Scenario configuration: YAML <-> dataclasses.

Every section maps to a dataclass; unknown keys and ill-typed values are
rejected with a ``file:line: field.path: message`` diagnostic.  A config may
name a ``preset`` (``defaults`` or ``extreme``) whose values it then overrides
key by key.

Default values: three-segment window of 0.04 s (0.01 s for extreme motion),
20-point voxels searched over 7 voxels, map culling at 100 m, gyro range
17.5 rad/s.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import so3
from .factors import NoiseModel
from .solver import SolverConfig
from .trajectory import Extrinsics, InitConfig, StateConfig
from .voxel_map import MapConfig


class ConfigError(ValueError):
    pass


# -- sections --------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # axis-angle, rad

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = so3.exp(np.asarray(self.rotation, dtype=float))
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class LidarConfig:
    rate: float = 10.0
    pattern: str = "spinning"
    channels: int = 16
    columns: int = 90
    hfov: tuple[float, float] = (-180.0, 180.0)
    vfov: tuple[float, float] = (-15.0, 15.0)
    noise: float = 0.02
    min_range: float = 0.3
    max_range: float = 60.0
    extrinsic: Pose = field(default_factory=Pose)


@dataclass(frozen=True)
class ImuConfig:
    rate: float = 200.0
    noise: float = 1e-3
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # sensor-to-body, axis-angle
    limit: float = float("inf")
    phase: float = 0.0

    def matrix(self) -> np.ndarray:
        return so3.exp(np.asarray(self.rotation, dtype=float))


def _default_gyros():
    return [ImuConfig(noise=1e-3, limit=17.5)]


def _default_accels():
    return [ImuConfig(noise=1e-2, limit=160.0)]


@dataclass(frozen=True)
class SensorsConfig:
    lidar: list[LidarConfig] = field(default_factory=lambda: [LidarConfig()])
    gyro: list[ImuConfig] = field(default_factory=_default_gyros)
    accel: list[ImuConfig] = field(default_factory=_default_accels)


@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "figure_eight"
    params: dict = field(default_factory=dict)
    t_still: float = 0.5
    t_ramp: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 1.5)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class WorldConfig:
    kind: str = "room_corner"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StateSection:
    rotation: str = "gyro"
    translation: str = "accel"


@dataclass(frozen=True)
class PriorConfig:
    qc_rotation: float = 1e-2
    qc_translation: float = 1e-1
    qc_gyro_bias: float = 1e-5
    qc_accel_bias: float = 1e-5


@dataclass(frozen=True)
class WindowConfig:
    segments: int = 3
    dt: float = 0.04

    def __post_init__(self):
        if self.segments < 1:
            raise ValueError("segments must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class EstimatorConfig:
    max_points_per_segment: int = 250  # across all LiDARs
    output_rate: float = 100.0

    def __post_init__(self):
        if self.max_points_per_segment < 1 or not self.output_rate > 0:
            raise ValueError("max_points_per_segment and output_rate must be positive")


@dataclass(frozen=True)
class FaultConfig:
    sensor: str
    t_start: float
    t_end: float
    mode: str = "dropout"
    limit: typing.Optional[float] = None


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration: float = 30.0
    output: typing.Optional[str] = None
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    sensors: SensorsConfig = field(default_factory=SensorsConfig)
    state: StateSection = field(default_factory=StateSection)
    prior: PriorConfig = field(default_factory=PriorConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    map: MapConfig = field(default_factory=MapConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    init: InitConfig = field(default_factory=InitConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    faults: list[FaultConfig] = field(default_factory=list)

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        self.state_config()

    # -- derived objects -------------------------------------------------------
    def state_config(self) -> StateConfig:
        s = self.sensors
        return StateConfig(self.state.rotation, self.state.translation, len(s.gyro), len(s.accel), max(len(s.lidar), 1))

    def hybrid_prior(self):
        p = self.prior
        return self.state_config().hybrid_prior(p.qc_rotation, p.qc_translation, p.qc_gyro_bias, p.qc_accel_bias)

    def extrinsics(self) -> Extrinsics:
        s = self.sensors
        return Extrinsics(
            tuple(l.extrinsic.matrix() for l in s.lidar) or (np.eye(4),),
            tuple(g.matrix() for g in s.gyro) or (np.eye(3),),
            tuple(a.matrix() for a in s.accel) or (np.eye(3),),
        )


# -- presets --------------------------------------------------------------------

PRESETS = {
    # segment interval 0.04 s with three segments per window, 20-point voxels,
    # 7-voxel search, 100 m culling, 17.5 rad/s gyro range
    "defaults": {},
    # extreme motion: 0.01 s segments; a looser rotation prior lets the GP
    # follow fast spins when the gyro saturates
    "extreme": {"window": {"dt": 0.01}, "prior": {"qc_rotation": 10.0}},
}


# -- (de)serialization ---------------------------------------------------------------


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _fail(path, msg, lines, source):
    line = lines.get(path)
    where = f"{source}:{line}: " if source and line else (f"{source}: " if source else "")
    raise ConfigError(f"{where}{path}: {msg}")


def _convert(tp, value, path, lines, source):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(types, "UnionType", ())):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path, lines, source)
    if _is_dataclass_type(tp):
        return _build(tp, value, path, lines, source)
    if origin is list:
        if not isinstance(value, list):
            _fail(path, "expected a list", lines, source)
        return [_convert(args[0], v, f"{path}[{i}]", lines, source) for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            _fail(path, f"expected a list of {len(args)} numbers", lines, source)
        return tuple(_convert(a, v, f"{path}[{i}]", lines, source) for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            if isinstance(value, str) and value.strip().lower() in ("inf", ".inf", "infinity"):
                return float("inf")
            _fail(path, f"expected a number, got {value!r}", lines, source)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}", lines, source)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            _fail(path, f"expected true/false, got {value!r}", lines, source)
        return value
    if tp is str:
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}", lines, source)
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            _fail(path, "expected a mapping", lines, source)
        return dict(value)
    return value


def _build(cls, data, path, lines, source):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        _fail(path, "expected a mapping", lines, source)
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")]
    for key in data:
        if key not in names:
            _fail(f"{path}.{key}" if path else str(key), f"unknown key (expected one of {', '.join(names)})", lines, source)
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k, lines, source) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        _fail(path or "<root>", str(e), lines, source)


def _line_index(node, path="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = f"{path}.{k.value}" if path else str(k.value)
            out[p] = k.start_mark.line + 1
            _line_index(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            p = f"{path}[{i}]"
            out[p] = item.start_mark.line + 1
            _line_index(item, p, out)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("params",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(data: dict, source: str | None = None, lines: dict | None = None) -> ScenarioConfig:
    data = dict(data or {})
    preset = data.pop("preset", "defaults")
    if preset not in PRESETS:
        _fail("preset", f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}", lines or {}, source)
    return _build(ScenarioConfig, _merge(PRESETS[preset], data), "", lines or {}, source)


def loads(text: str, source: str | None = None) -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None and source else (source or "<config>")
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{source or '<config>'}: top level must be a mapping")
    return from_dict(data or {}, source, _line_index(node) if node is not None else {})


def load(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    return loads(text, str(path))


def preset(name: str = "defaults") -> ScenarioConfig:
    return from_dict({"preset": name})


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value) if f.init and not f.name.startswith("_")}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def to_dict(config: ScenarioConfig) -> dict:
    return _plain(config)


def dumps(config: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)
