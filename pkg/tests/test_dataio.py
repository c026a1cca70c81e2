import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarfuse import dataio
from lidarfuse.dataio import Config, LabelRecord
from lidarfuse.errors import ConfigError, FormatError
from lidarfuse.geometry import PointCloud
from lidarfuse.synth import default_calibration

f32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


@given(arrays(np.float32, (7, 4), elements=f32))
def test_points_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("p") / "x.bin"
    pc = PointCloud(arr[:, :3].astype(np.float64), arr[:, 3].astype(np.float64))
    dataio.write_points(path, pc)
    back = dataio.read_points(path)
    assert np.array_equal(back.coords, pc.coords) and np.array_equal(back.intensity, pc.intensity)


def test_truncated_points_report_offset(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"\0" * 37)
    with pytest.raises(FormatError, match="offset 32"):
        dataio.read_points(path)
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        dataio.read_points(path)


@given(st.lists(st.tuples(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF)), min_size=1, max_size=30))
def test_labels_round_trip(tmp_path_factory, pairs):
    sem, inst = np.array(pairs).T
    path = tmp_path_factory.mktemp("l") / "x.label"
    dataio.write_labels(path, dataio.join_labels(sem, inst))
    s2, i2 = dataio.split_labels(dataio.read_labels(path))
    np.testing.assert_array_equal(s2, sem)
    np.testing.assert_array_equal(i2, inst)
    rec = LabelRecord.encode(int(sem[0]), int(inst[0]))
    assert (rec.semantic, rec.instance) == (sem[0], inst[0])


def test_truncated_labels(tmp_path):
    path = tmp_path / "x.label"
    path.write_bytes(b"\0" * 10)
    with pytest.raises(FormatError, match="offset 8"):
        dataio.read_labels(path)


def test_calibration_round_trip(tmp_path):
    calib = default_calibration(64, 192)
    dataio.write_calibration(tmp_path / "c.txt", calib)
    back = dataio.read_calibration(tmp_path / "c.txt")
    assert np.array_equal(back.intrinsic, calib.intrinsic)
    assert np.array_equal(back.extrinsic, calib.extrinsic)
    assert (back.height, back.width) == (64, 192)


def test_calibration_errors(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("P2: " + " ".join(["1"] * 12) + "\n")
    with pytest.raises(ConfigError, match="Tr"):
        dataio.read_calibration(path, (10, 10))
    path.write_text("P2: " + " ".join(["1"] * 12) + "\nTr: " + " ".join(["2"] * 12) + "\n")
    with pytest.raises(ConfigError):
        dataio.read_calibration(path, (10, 10))


def test_checkpoint_round_trip_and_corruption(tmp_path, rng):
    state = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=5), "s": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    dataio.write_checkpoint(path, state)
    back = dataio.read_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert np.array_equal(back[k], state[k]) and back[k].shape == state[k].shape
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="offset"):
        dataio.read_checkpoint(path)
    path.write_bytes(raw + b"x")
    with pytest.raises(FormatError, match="trailing"):
        dataio.read_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        dataio.read_checkpoint(path)


def test_rgb_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    dataio.write_rgb(tmp_path / "i.rgb", img)
    assert np.array_equal(dataio.read_rgb(tmp_path / "i.rgb"), img)
    (tmp_path / "i.rgb").write_bytes((tmp_path / "i.rgb").read_bytes()[:-1])
    with pytest.raises(FormatError):
        dataio.read_rgb(tmp_path / "i.rgb")


def test_config_layers(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.5\nthing_classes = 2, 3\ncosine = true\n")
    cfg = dataio.parse_config(path)
    assert cfg.lr == 0.5 and cfg.thing_classes == (2, 3) and cfg.cosine is True
    cfg = dataio.env_overrides(cfg, {"UNISEG_STEPS": "7", "OTHER": "x"})
    assert cfg.steps == 7
    assert dataio.parse_config_text(dataio.format_config(cfg)) == cfg
    with pytest.raises(ConfigError, match=":1"):
        dataio.parse_config_text("nope = 1")
    with pytest.raises(ConfigError):
        dataio.parse_config_text("steps = many")
    with pytest.raises(ConfigError):
        dataio.env_overrides(Config(), {"UNISEG_NOPE": "1"})


def test_published_training_defaults():
    cfg = Config()
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (1.0, 100.0, 10.0)
    assert (cfg.lr, cfg.momentum, cfg.weight_decay) == (0.12, 0.9, 1e-4)
    assert cfg.voxel_size == 0.05
