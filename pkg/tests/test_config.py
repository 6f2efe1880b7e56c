import math

import numpy as np
import pytest
import yaml

from gplio import config, so3
from gplio.config import ConfigError


def test_defaults():
    cfg = config.preset()
    assert cfg.window.segments == 3 and cfg.window.dt == 0.04
    assert cfg.map.max_points_per_voxel == 20 and cfg.map.search_voxels == 7
    assert cfg.map.cull_radius == 100.0
    assert cfg.sensors.gyro[0].limit == 17.5
    assert cfg.state_config().dim == 21
    assert cfg.hybrid_prior().dim == 21


def test_extreme_preset_overrides_and_user_keys_win():
    cfg = config.preset("extreme")
    assert cfg.window.dt == 0.01 and cfg.window.segments == 3
    cfg = config.from_dict({"preset": "extreme", "window": {"dt": 0.02}})
    assert cfg.window.dt == 0.02
    assert cfg.prior.qc_rotation == config.preset("extreme").prior.qc_rotation


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        config.from_dict({"preset": "turbo"})


def test_roundtrip_through_yaml():
    cfg = config.from_dict({
        "seed": 7,
        "sensors": {"gyro": [{"limit": 17.5}, {"rotation": [0, 0, 1.5708], "phase": 0.002}]},
        "faults": [{"sensor": "imu:0", "t_start": 1.0, "t_end": 2.0}],
        "trajectory": {"kind": "spline", "params": {"waypoints": [[0, 0, 0], [1, 1, 0]]}},
    })
    back = config.loads(config.dumps(cfg))
    assert back == cfg
    assert config.to_dict(back) == config.to_dict(cfg)


def test_infinite_limit_roundtrips():
    cfg = config.from_dict({"sensors": {"accel": [{}]}})
    assert math.isinf(cfg.sensors.accel[0].limit)
    assert math.isinf(config.loads(config.dumps(cfg)).sensors.accel[0].limit)
    assert math.isinf(config.from_dict({"sensors": {"accel": [{"limit": "inf"}]}}).sensors.accel[0].limit)


def test_dumps_is_plain_yaml():
    data = yaml.safe_load(config.dumps(config.preset()))
    assert data["window"]["segments"] == 3
    assert isinstance(data["sensors"]["lidar"][0]["extrinsic"]["translation"], list)


def test_unknown_key_reports_file_line_and_path(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 1\nwindow:\n  segments: 2\n  dtt: 0.1\n")
    with pytest.raises(ConfigError) as e:
        config.load(p)
    msg = str(e.value)
    assert msg.startswith(f"{p}:4: window.dtt: unknown key")
    assert "dt" in msg


def test_nested_list_error_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("sensors:\n  gyro:\n    - noise: 0.1\n    - noise: lots\n")
    with pytest.raises(ConfigError, match=r"bad.yaml:4: sensors.gyro\[1\].noise: expected a number"):
        config.load(p)


@pytest.mark.parametrize("data, match", [
    ({"duration": -1}, "duration must be positive"),
    ({"duration": True}, "expected a number"),
    ({"seed": 1.5}, "expected an integer"),
    ({"window": {"segments": 0}}, "segments must be >= 1"),
    ({"window": {"dt": 0}}, "dt must be positive"),
    ({"window": []}, "expected a mapping"),
    ({"sensors": {"lidar": {}}}, "expected a list"),
    ({"sensors": {"lidar": [{"hfov": [1, 2, 3]}]}}, "expected a list of 2 numbers"),
    ({"state": {"rotation": "magic"}}, "rotation must be one of"),
    ({"state": {"rotation": "gyro"}, "sensors": {"gyro": []}}, "n_gyro >= 1"),
    ({"solver": {"dense_solve": "yes"}}, "expected true/false"),
    ({"trajectory": {"kind": 3}}, "expected a string"),
    ({"map": {"search_voxels": 27}}, "7-voxel"),
    ({"estimator": {"output_rate": 0}}, "must be positive"),
])
def test_bad_values(data, match):
    with pytest.raises(ConfigError, match=match):
        config.from_dict(data)


def test_invalid_yaml_and_top_level(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("window: {segments: 2\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        config.load(p)
    with pytest.raises(ConfigError, match="top level must be a mapping"):
        config.loads("- 1\n- 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        config.load(tmp_path / "nope.yaml")


def test_empty_document_is_defaults():
    assert config.loads("") == config.preset()


def test_extrinsics_from_pose():
    cfg = config.from_dict({"sensors": {
        "lidar": [{"extrinsic": {"translation": [0.1, 0, 0.2], "rotation": [0, 0, 0.5]}}],
        "gyro": [{"rotation": [0.1, 0, 0]}],
    }})
    ext = cfg.extrinsics()
    T = ext.lidar_transform(0)
    np.testing.assert_allclose(T[:3, :3], so3.exp(np.array([0, 0, 0.5])))
    np.testing.assert_allclose(T[:3, 3], [0.1, 0, 0.2])
    np.testing.assert_allclose(ext.gyro[0], so3.exp(np.array([0.1, 0, 0])))


def test_lidar_only_config():
    cfg = config.from_dict({"state": {"rotation": "cv", "translation": "cv"}, "sensors": {"gyro": [], "accel": []}})
    assert cfg.state_config().dim == 12
