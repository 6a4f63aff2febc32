import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_pose
from videopose import io
from videopose.errors import FormatError
from videopose.geometry import Intrinsics
from videopose.metrics import Trajectory
from videopose.residuals import TrackSet


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6), elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("t") / "a.vpe"
    io.write_tensor(p, a)
    assert np.array_equal(io.read_tensor(p, squeeze=False), a)


def test_single_channel_tensor_squeezes(tmp_path):
    io.write_tensor(tmp_path / "a.vpe", np.arange(6.0).reshape(2, 3))
    assert io.read_tensor(tmp_path / "a.vpe").shape == (2, 3)
    with pytest.raises(ValueError):
        io.write_tensor(tmp_path / "b.vpe", np.zeros(3))


def test_corrupt_tensors_rejected(tmp_path):
    p = tmp_path / "a.vpe"
    io.write_tensor(p, np.zeros((2, 2)))
    data = p.read_bytes()
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        io.read_tensor(p)
    p.write_bytes(data[:-1])
    with pytest.raises(FormatError, match="payload"):
        io.read_tensor(p)
    p.write_bytes(data[:5])
    with pytest.raises(FormatError):
        io.read_tensor(p)


def test_mask_round_trip_with_comment(tmp_path, rng):
    m = (rng.uniform(size=(5, 7)) > 0.5).astype(float)
    p = tmp_path / "m.pgm"
    io.write_mask(p, m)
    assert np.array_equal(io.read_mask(p), m)
    raw = p.read_bytes().replace(b"P5\n", b"P5\n# made by hand\n", 1)
    p.write_bytes(raw)
    assert np.array_equal(io.read_mask(p), m)
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        io.read_mask(p)


def test_tracks_round_trip_is_exact(tmp_path, rng):
    n = 25
    t = TrackSet(rng.integers(0, 9, n), rng.uniform(0, 300, (n, 2)), rng.integers(0, 9, n), rng.uniform(0, 300, (n, 2)), rng.uniform(0, 1, n))
    io.write_tracks(tmp_path / "t.txt", t)
    back = io.read_tracks(tmp_path / "t.txt")
    for a, b in ((t.frame_i, back.frame_i), (t.p_i, back.p_i), (t.p_j, back.p_j), (t.confidence, back.confidence)):
        assert np.array_equal(a, b)


def test_track_errors_name_the_line(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# header\n0 1 2 1 3 4 1\n0 1 2 1 3\n")
    with pytest.raises(FormatError) as info:
        io.read_tracks(p)
    assert info.value.line == 3
    p.write_text("0 1 nan 1 3 4 1\n")
    with pytest.raises(FormatError):
        io.read_tracks(p)


def test_split_tracks_groups_pairs():
    t = TrackSet(np.array([0, 1, 0]), np.zeros((3, 2)), np.array([1, 2, 1]), np.ones((3, 2)), np.ones(3))
    groups = io.split_tracks(t)
    assert sorted(groups) == [(0, 1), (1, 2)]
    assert len(groups[(0, 1)]) == 2


def test_tum_round_trip(tmp_path, rng):
    traj = Trajectory(np.arange(6) * 0.5, [random_pose(rng) for _ in range(6)])
    io.write_tum(tmp_path / "t.txt", traj)
    back = io.read_tum(tmp_path / "t.txt")
    assert np.array_equal(back.timestamps, traj.timestamps)
    for a, b in zip(back.poses, traj.poses):
        assert a.allclose(b, 1e-15)


def test_tum_stores_scalar_last(tmp_path):
    from videopose.geometry import Pose

    io.write_tum(tmp_path / "t.txt", Trajectory([0.0], [Pose.identity()]))
    assert io.read_tum(tmp_path / "t.txt").poses[0].q.tolist() == [1, 0, 0, 0]
    fields = (tmp_path / "t.txt").read_text().splitlines()[1].split()
    assert fields[-1] == "1"


def test_key_values_reject_duplicates_and_garbage():
    kv = io.parse_key_values("a = 1\n# note\n\nb = x y  # trailing\n")
    assert kv == {"a": ("1", 1), "b": ("x y", 4)}
    with pytest.raises(FormatError) as info:
        io.parse_key_values("a = 1\na = 2\n", "cfg.txt")
    assert info.value.line == 2
    with pytest.raises(FormatError):
        io.parse_key_values("just words\n")


def test_intrinsics_round_trip(tmp_path):
    for k in (Intrinsics.pinhole(221.5, 256, 192), Intrinsics.unified(180.0, 0.35, 320, 240)):
        io.write_intrinsics(tmp_path / "k.txt", k)
        back = io.read_intrinsics(tmp_path / "k.txt")
        assert back.model == k.model and np.array_equal(back.params, k.params)
    (tmp_path / "k.txt").write_text("camera.f = 1\ncamera.width = 2\ncamera.height = 2\ncamera.skew = 0\n")
    with pytest.raises(FormatError, match="skew"):
        io.read_intrinsics(tmp_path / "k.txt")
