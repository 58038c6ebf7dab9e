from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semdepth.depth_head import DepthMap
from semdepth.errors import ValidationError
from semdepth.pointcloud import CameraIntrinsics, PointCloud, backproject, reproject, write_ply


def read_ply(path):
    """Minimal independent ASCII PLY reader."""
    lines = path.read_text().splitlines()
    assert lines[0] == "ply" and lines[1] == "format ascii 1.0"
    end = lines.index("end_header")
    header = lines[:end]
    count = int(next(ln for ln in header if ln.startswith("element vertex")).split()[-1])
    props = [ln.split()[1:] for ln in header if ln.startswith("property")]
    body = lines[end + 1:]
    pts = np.array([[np.float32(t) for t in ln.split()[:3]] for ln in body], dtype=np.float32).reshape(-1, 3)
    cols = np.array([[int(t) for t in ln.split()[3:]] for ln in body], dtype=np.int64).reshape(-1, 3)
    return count, props, pts, cols, len(body)


def full(values, rng=(0.01, 100)):
    v = np.asarray(values, dtype=np.float64)
    return DepthMap(v, np.ones(v.shape, bool), rng)


def test_principal_point_lands_on_axis():
    K = CameraIntrinsics(80, 90, 3, 2)
    depth = np.full((5, 7), 4.0)
    pc = backproject(full(depth), np.zeros((5, 7, 3)), K)
    i = np.flatnonzero((pc.pixels[:, 0] == 3) & (pc.pixels[:, 1] == 2))[0]
    np.testing.assert_array_equal(pc.points[i], [0, 0, 4.0])


def test_hand_pinhole_example():
    K = CameraIntrinsics(100, 100, 50, 50)
    depth = np.zeros((101, 101))
    mask = np.zeros((101, 101), bool)
    depth[50, 60], mask[50, 60] = 2.0, True
    pc = backproject(DepthMap(depth, mask, (0.1, 10)), np.zeros((101, 101, 3)), K)
    assert len(pc) == 1
    np.testing.assert_allclose(pc.points[0], [0.2, 0.0, 2.0], rtol=1e-15, atol=1e-15)


def test_reprojection_round_trip_and_exact_z():
    rng = np.random.default_rng(0)
    h, w = 100, 100
    K = CameraIntrinsics(123.4, 98.7, 49.3, 51.8)
    depth = rng.uniform(0.1, 80, (h, w))
    pc = backproject(full(depth), rng.random((h, w, 3)), K)
    assert len(pc) == 10_000
    uv = reproject(pc.points, K)
    assert np.abs(uv - pc.pixels).max() < 1e-9
    np.testing.assert_array_equal(pc.points[:, 2], depth[pc.pixels[:, 1], pc.pixels[:, 0]])


def test_invalid_pixels_are_skipped_and_colors_copied():
    rng = np.random.default_rng(1)
    depth = rng.uniform(1, 5, (4, 6))
    mask = rng.random((4, 6)) > 0.4
    rgb = rng.random((4, 6, 3))
    pc = backproject(DepthMap(depth, mask, (0.1, 10)), rgb, CameraIntrinsics.centered(6, 4))
    assert len(pc) == mask.sum()
    np.testing.assert_array_equal(pc.colors, rgb[mask])
    assert np.all(pc.points[:, 2] > 0)


def test_backproject_errors():
    K = CameraIntrinsics(1, 1, 0, 0)
    with pytest.raises(ValidationError):
        backproject(full(np.ones((3, 3))), np.zeros((3, 4, 3)), K)
    bad = SimpleNamespace(values=np.array([[0.0, 1.0]]), valid_mask=np.ones((1, 2), bool))
    with pytest.raises(ValidationError):
        backproject(bad, np.zeros((1, 2, 3)), K)
    with pytest.raises(ValidationError):
        CameraIntrinsics(0, 1, 0, 0)
    with pytest.raises(ValidationError):
        CameraIntrinsics.from_dict({"fx": 1, "fy": 1, "cx": 0, "cy": 0, "skew": 0})


def test_intrinsics_dict_round_trip():
    K = CameraIntrinsics(1.5, 2.5, 3.0, 4.0)
    assert CameraIntrinsics.from_dict(K.to_dict()) == K


def test_single_point_ply(tmp_path):
    path = tmp_path / "one.ply"
    write_ply(PointCloud(np.array([[0.1, -0.2, 3.0]]), np.array([[1.0, 0.5, 0.0]])), path)
    count, props, pts, cols, n_lines = read_ply(path)
    assert "element vertex 1" in path.read_text()
    assert count == n_lines == 1
    assert props == [["float", "x"], ["float", "y"], ["float", "z"],
                     ["uchar", "red"], ["uchar", "green"], ["uchar", "blue"]]
    np.testing.assert_array_equal(pts[0], np.float32([0.1, -0.2, 3.0]))
    np.testing.assert_array_equal(cols[0], [255, 128, 0])


def test_empty_cloud_rejected(tmp_path):
    with pytest.raises(ValidationError):
        write_ply(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "x.ply")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_ply_round_trip_is_float32_exact(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 10, (n, 3)) * 10.0 ** rng.integers(-4, 4, (n, 1))
    cols = rng.random((n, 3))
    path = tmp_path_factory.mktemp("ply") / "cloud.ply"
    write_ply(PointCloud(pts, cols), path)
    count, _, back, back_cols, n_lines = read_ply(path)
    assert count == n_lines == n
    np.testing.assert_array_equal(back, pts.astype(np.float32))
    np.testing.assert_array_equal(back_cols, np.round(cols * 255).astype(int))
