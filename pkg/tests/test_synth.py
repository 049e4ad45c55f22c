import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxformer import synth as S
from auxformer.model import MotionSequence


def bone_errors(x, spec):
    worst = 0.0
    for j in range(1, spec.J):
        d = np.linalg.norm(x.coords[:, j] - x.coords[:, spec.parent[j]], axis=-1)
        worst = max(worst, np.abs(d - spec.bone_length[j]).max())
    return worst


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_bone_lengths_preserved(seed):
    spec = S.default_skeleton()
    x = S.generate_motion(spec, S.SynthConfig(), seed)
    assert x.coords.shape == (20, 9, 3)
    assert bone_errors(x, spec) < 1e-9


@pytest.mark.parametrize("J", [1, 2, 5, 12])
def test_chain_skeletons(J):
    spec = S.chain_skeleton(J)
    x = S.generate_motion(spec, S.SynthConfig(J=J, amp_band=(0.5, 1.5)), 3)
    assert x.J == J and bone_errors(x, spec) < 1e-9


def test_zero_amplitude_is_rigid_translation():
    spec = S.default_skeleton()
    cfg = S.SynthConfig(amp_band=(0.0, 0.0), speed_band=(200.0, 400.0))
    x = S.generate_motion(spec, cfg, 11)
    step = np.diff(x.coords, axis=0)
    root_step = step[:, :1]
    np.testing.assert_allclose(step, np.broadcast_to(root_step, step.shape), atol=1e-9)
    speed = np.linalg.norm(root_step[0, 0]) * cfg.frame_rate
    assert 200.0 <= speed <= 400.0
    np.testing.assert_allclose(x.coords[0] - x.coords[0, 0], _rest_pose(spec), atol=1e-9)


def _rest_pose(spec):
    pos = np.zeros((spec.J, 3))
    for j in range(1, spec.J):
        pos[j] = pos[spec.parent[j]] + spec.offsets[j]
    return pos


def test_determinism_and_seed_sensitivity():
    spec, cfg = S.default_skeleton(), S.SynthConfig()
    a, b = S.generate_motion(spec, cfg, 5), S.generate_motion(spec, cfg, 5)
    assert np.array_equal(a.coords, b.coords)
    assert np.abs(a.coords - S.generate_motion(spec, cfg, 6).coords).max() > 0


def test_coordinates_bounded():
    spec, cfg = S.default_skeleton(), S.SynthConfig()
    reach = sum(spec.bone_length) + cfg.speed_band[1] * cfg.T / cfg.frame_rate
    for x in S.generate_dataset(spec, cfg, 50, 0, "bound"):
        assert np.linalg.norm(x.coords, axis=-1).max() <= reach


def test_dataset_purposes_differ():
    spec, cfg = S.default_skeleton(), S.SynthConfig()
    a = S.generate_dataset(spec, cfg, 3, 0, "train")
    b = S.generate_dataset(spec, cfg, 3, 0, "test")
    assert all(not np.array_equal(x.coords, y.coords) for x, y in zip(a, b))
    again = S.generate_dataset(spec, cfg, 3, 0, "train")
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a, again))


def test_config_validation():
    with pytest.raises(ValueError):
        S.SynthConfig(frame_rate=0)
    with pytest.raises(ValueError):
        S.SynthConfig(freq_band=(2.0, 1.0))
    with pytest.raises(ValueError):
        S.SkeletonSpec((0, 2, 1), (0.0, 1.0, 1.0), ((0, 0, 1),) * 3)
    with pytest.raises(ValueError):
        S.generate_motion(S.default_skeleton(), S.SynthConfig(J=4), 0)


# ---------------------------------------------------------------------------
# motion files


@pytest.mark.parametrize("trial", range(20))
def test_motion_roundtrip(tmp_path, trial):
    rng = np.random.default_rng(trial)
    T, J = int(rng.integers(2, 12)), int(rng.integers(1, 6))
    t_past = int(rng.integers(1, T))
    x = MotionSequence(rng.normal(size=(T, J, 3)) * 10.0 ** rng.integers(-3, 4), t_past, T - t_past)
    path = tmp_path / "m.motn"
    S.write_motion(path, x)
    y = S.read_motion(path)
    assert np.array_equal(x.coords, y.coords)
    assert (y.t_past, y.t_future) == (x.t_past, x.t_future)


def test_motion_byte_layout(tmp_path):
    x = MotionSequence(np.arange(12, dtype=float).reshape(2, 2, 3), 1, 1)
    path = tmp_path / "m.motn"
    S.write_motion(path, x)
    raw = path.read_bytes()
    assert raw[:5] == b"MOTN1"
    assert struct.unpack_from("<III", raw, 5) == (2, 2, 1)
    assert np.frombuffer(raw[17:], "<f8").tolist() == list(range(12))


def test_motion_errors(tmp_path):
    path = tmp_path / "bad.motn"
    path.write_bytes(b"")
    with pytest.raises(S.MotionHeaderError):
        S.read_motion(path)
    path.write_bytes(b"XXXXX" + struct.pack("<III", 2, 1, 1) + bytes(48))
    with pytest.raises(S.MotionHeaderError):
        S.read_motion(path)
    path.write_bytes(b"MOTN1" + struct.pack("<III", 2, 2, 1) + bytes(8 * 11))
    with pytest.raises(S.MotionTruncatedError):
        S.read_motion(path)
    path.write_bytes(b"MOTN1" + struct.pack("<III", 1 << 20, 1 << 10, 1))
    with pytest.raises(S.MotionDimensionError):
        S.read_motion(path)
    path.write_bytes(b"MOTN1" + struct.pack("<III", 2, 1, 1) + bytes(56))
    with pytest.raises(S.MotionFileError):
        S.read_motion(path)


def test_error_classes_are_distinct():
    kinds = {S.MotionHeaderError, S.MotionTruncatedError, S.MotionDimensionError}
    assert len(kinds) == 3 and all(issubclass(k, S.MotionFileError) for k in kinds)


def test_csv_roundtrip_and_order(tmp_path, rng):
    x = MotionSequence(rng.normal(size=(4, 3, 3)), 2, 2)
    path = tmp_path / "m.csv"
    S.write_motion_csv(path, x)
    assert np.array_equal(S.read_motion_csv(path, 2).coords, x.coords)
    lines = path.read_text().splitlines()
    shuffled = tmp_path / "s.csv"
    shuffled.write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
    assert np.array_equal(S.read_motion_csv(shuffled, 2).coords, x.coords)


def test_csv_errors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(S.MotionHeaderError):
        S.read_motion_csv(path, 1)
    path.write_text("t,j,x,y,z\n0,0,1,2,3\n1,1,1,2,3\n")
    with pytest.raises(S.MotionTruncatedError):
        S.read_motion_csv(path, 1)
    path.write_text("t,j,x,y,z\n0,0,1,2,3\n0,0,1,2,3\n1,0,0,0,0\n")
    with pytest.raises(S.MotionFileError):
        S.read_motion_csv(path, 1)
