import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vdguide.errors import InvalidInputError
from vdguide.geom import DepthSequence, Pose
from vdguide.io import (read_container, read_depth, read_normals, read_pgm, read_tracks, read_trajectory,
                        write_container, write_depth, write_pgm, write_tracks, write_trajectory)
from vdguide.losses import TrackSet
from vdguide.pose import Trajectory

floats32 = st.floats(width=32, allow_nan=False)


@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)), elements=floats32),
       st.booleans(), st.data())
def test_depth_container_bit_exact(tmp_path_factory, values, with_mask, data):
    mask = data.draw(arrays(bool, values.shape)) if with_mask else None
    p = tmp_path_factory.mktemp("d") / "x.dsyn"
    write_container(p, values, mask)
    v, m, _ = read_container(p)
    assert v.tobytes() == values.tobytes()
    if with_mask:
        np.testing.assert_array_equal(m, mask)
    else:
        assert m is None


def test_normal_container_round_trip(tmp_path):
    n = np.random.default_rng(0).standard_normal((2, 3, 4, 3)).astype(np.float32)
    write_container(tmp_path / "n.dsyn", n)
    v, _ = read_normals(tmp_path / "n.dsyn")
    np.testing.assert_array_equal(v, n)
    with pytest.raises(InvalidInputError):
        read_depth(tmp_path / "n.dsyn")


def test_container_length_checked(tmp_path):
    p = tmp_path / "d.dsyn"
    write_depth(p, DepthSequence(np.ones((2, 3, 3))))
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(InvalidInputError, match="length"):
        read_container(p)
    p.write_bytes(data + b"\0")
    with pytest.raises(InvalidInputError, match="length"):
        read_container(p)
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(InvalidInputError, match="magic"):
        read_container(p)


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    poses = [Pose.from_rotvec(rng.normal(0, 0.5, 3), rng.normal(0, 1, 3)) for _ in range(5)]
    write_trajectory(tmp_path / "p.txt", Trajectory(poses))
    back = read_trajectory(tmp_path / "p.txt")
    assert back.frames == list(range(5))
    for a, b in zip(poses, back.poses):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_tum_bad_line(tmp_path):
    (tmp_path / "p.txt").write_text("# header\n0 1 2 3\n")
    with pytest.raises(InvalidInputError, match=":2:"):
        read_trajectory(tmp_path / "p.txt")


def test_tracks_round_trip(tmp_path):
    t = TrackSet([0, 1], [1, 2], [[1.5, 2.25], [3, 4]], [[5, 6], [7.125, 8]], [0.5, 1.0], [False, True])
    write_tracks(tmp_path / "t.jsonl", t)
    b = read_tracks(tmp_path / "t.jsonl")
    for f in ("frame_a", "frame_b", "pixel_a", "pixel_b", "confidence", "outlier"):
        np.testing.assert_array_equal(getattr(t, f), getattr(b, f))
    (tmp_path / "bad.jsonl").write_text('{"frame_a": 0}\n')
    with pytest.raises(InvalidInputError):
        read_tracks(tmp_path / "bad.jsonl")


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, (5, 7)) / 255.0
    write_pgm(tmp_path / "i.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "i.pgm"), img, atol=1e-12)
