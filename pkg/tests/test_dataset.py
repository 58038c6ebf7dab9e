import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from semdepth import dataset as ds
from semdepth.depth_head import DepthMap
from semdepth.errors import ValidationError
from semdepth.imageio import write_depth_png, write_rgb_png
from semdepth.pointcloud import CameraIntrinsics


def _write_pair(tmp_path, raw, name="x"):
    (tmp_path / "rgb").mkdir(exist_ok=True)
    (tmp_path / "depth").mkdir(exist_ok=True)
    h, w = raw.shape
    write_rgb_png(tmp_path / "rgb" / f"{name}.png", np.zeros((h, w, 3)))
    Image.fromarray(raw.astype(np.uint16)).save(tmp_path / "depth" / f"{name}.png")
    return tmp_path / "rgb" / f"{name}.png", tmp_path / "depth" / f"{name}.png"


def test_nyu_scale_and_invalid_sentinel(tmp_path):
    rgb, depth = _write_pair(tmp_path, np.array([[5000, 0], [100, 65535]]))
    s = ds.load_sample(rgb, depth, "nyu")
    assert s.depth.values[0, 0] == 5.0
    assert not s.depth.valid_mask[0, 1]
    assert s.depth.valid_mask[1, 0] and s.depth.values[1, 0] == 0.1
    assert not s.depth.valid_mask[1, 1]  # 65.535 m is beyond the NYU range
    assert s.id == "x"


def test_kitti_scale(tmp_path):
    rgb, depth = _write_pair(tmp_path, np.array([[2560, 256]]))
    s = ds.load_sample(rgb, depth, ds.get_profile("kitti"))
    np.testing.assert_array_equal(s.depth.values, [[10.0, 1.0]])
    assert s.depth.range == (0.1, 80.0)


def test_load_errors(tmp_path):
    rgb, depth = _write_pair(tmp_path, np.ones((4, 4)))
    with pytest.raises(FileNotFoundError):
        ds.load_sample(tmp_path / "missing.png", depth, "nyu")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "eight.png")
    with pytest.raises(ValidationError):
        ds.load_sample(rgb, tmp_path / "eight.png", "nyu")
    Image.fromarray(np.ones((3, 4), np.uint16)).save(tmp_path / "small.png")
    with pytest.raises(ValidationError):
        ds.load_sample(rgb, tmp_path / "small.png", "nyu")
    with pytest.raises(ValidationError):
        ds.get_profile("cityscapes")
    with pytest.raises(ValidationError):
        ds.load_dataset_dir(tmp_path / "nowhere")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["nyu", "kitti"]), st.integers(0, 2**31 - 1))
def test_depth_png_round_trip_within_half_unit(tmp_path_factory, profile, seed):
    p = ds.get_profile(profile)
    rng = np.random.default_rng(seed)
    meters = rng.uniform(*p.depth_range, size=(6, 5))
    tmp = tmp_path_factory.mktemp("rt")
    rgb, _ = _write_pair(tmp, np.zeros((6, 5)))
    write_depth_png(tmp / "depth" / "x.png", meters, p.depth_png_scale)
    s = ds.load_sample(rgb, tmp / "depth" / "x.png", p)
    assert np.abs(s.depth.values - meters).max() <= 0.5 / p.depth_png_scale + 1e-12


def test_dataset_dir_round_trip(tmp_path, small_corpus):
    samples = small_corpus.all[:4]
    ds.write_dataset_dir(tmp_path, samples, "synthetic")
    back = ds.load_dataset_dir(tmp_path)
    assert [s.id for s in back] == sorted(s.id for s in samples)
    by_id = {s.id: s for s in samples}
    for s in back:
        ref = by_id[s.id]
        np.testing.assert_array_equal(s.image, ref.image)
        assert np.abs(s.depth.values - ref.depth.values).max() <= 0.0005 + 1e-12
        assert s.dominant_class == ref.dominant_class
    assert json.loads((tmp_path / "profile.json").read_text())["name"] == "synthetic"


def test_profile_dict_round_trip():
    p = ds.DatasetProfile("cam", (0.5, 20.0), 500.0, 32, 24, CameraIntrinsics(30, 31, 15.5, 11.5))
    assert ds.DatasetProfile.from_dict(p.to_dict()) == p
    with pytest.raises(ValidationError):
        ds.DatasetProfile.from_dict({**p.to_dict(), "extra": 1})
    with pytest.raises(ValidationError):
        ds.DatasetProfile("bad", (1.0, 1.0), 1.0, 1, 1)


def test_same_seed_gives_identical_scene():
    a = ds.generate_synthetic_scene(ds.scene_seed(3, 1), 32, 32)
    b = ds.generate_synthetic_scene(ds.scene_seed(3, 1), 32, 32)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.depth.values, b.depth.values)
    assert np.array_equal(a.labels, b.labels) and a.dominant_class == b.dominant_class
    c = ds.generate_synthetic_scene(ds.scene_seed(3, 2), 32, 32)
    assert not np.array_equal(a.depth.values, c.depth.values)


def test_scene_validation():
    with pytest.raises(ValidationError):
        ds.generate_synthetic_scene(0, 8, 32)


def test_frontoparallel_plane_gives_constant_depth():
    K = CameraIntrinsics.centered(24, 16)
    plane = ds.Plane(np.array([0.0, 0.0, 1.0]), 3.7, "wall")
    _, depth, labels, _ = ds.render_scene([plane], K, 24, 16)
    assert np.all(depth == 3.7)
    assert np.all(labels == 0)


def test_tilted_plane_matches_ray_plane_oracle():
    w, h = 20, 30
    K = CameraIntrinsics(25.0, 25.0, 9.5, 14.5)
    angle = 0.3  # tilt about the camera X axis
    n = np.array([0.0, math.sin(angle), math.cos(angle)])
    plane = ds.Plane(n, 4.0, "floor")
    _, depth, _, _ = ds.render_scene([plane], K, w, h)
    for v in range(h):
        for u in range(w):
            ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            # depth along Z where n . (z * ray) = offset
            assert abs(depth[v, u] - 4.0 / float(n @ ray)) < 1e-9
    # rows further down hit the plane sooner: strictly monotone along every column
    assert np.all(np.diff(depth, axis=0) < 0)
    assert np.allclose(np.diff(depth, axis=1), 0)


def _oracle_depth(prims, K, w, h):
    out = np.full((h, w), np.inf)
    for v in range(h):
        for u in range(w):
            r = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            for p in prims:
                if isinstance(p, ds.Plane):
                    den = float(p.normal @ r)
                    z = p.offset / den if den > 1e-12 else np.inf
                else:
                    # smallest t > 0 with |t r - c| = R, reported as Z = t
                    a, b = r @ r, -2 * (r @ p.center)
                    c = p.center @ p.center - p.radius**2
                    disc = b * b - 4 * a * c
                    z = np.inf
                    if disc >= 0:
                        t = (-b - math.sqrt(disc)) / (2 * a)
                        z = t if t > 0 else np.inf
                out[v, u] = min(out[v, u], z)
    return out


@pytest.mark.parametrize("index", range(4))
def test_synthetic_depth_matches_analytic_oracle(index):
    rng = np.random.default_rng(ds.scene_seed(11, index))
    prims = ds.sample_primitives(rng)
    assert 2 <= len(prims) <= 5
    K = CameraIntrinsics.centered(24, 24)
    _, depth, _, _ = ds.render_scene(prims, K, 24, 24)
    np.testing.assert_allclose(depth, _oracle_depth(prims, K, 24, 24), rtol=0, atol=1e-6)


def test_generated_scene_contract(small_corpus):
    for s in small_corpus.all:
        assert s.image.shape == (32, 32, 3) and s.depth.shape == (32, 32)
        assert s.depth.valid_mask.all()
        assert 0.1 <= s.depth.values.min() and s.depth.values.max() <= 10
        assert s.dominant_class in ds.SCENE_CLASSES
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)
        counts = np.bincount(s.labels.ravel())
        assert counts.argmax() == ds.ADE20K_CLASSES.index(s.dominant_class)


def test_corpus_covers_several_dominant_classes():
    classes = {s.dominant_class for s in ds.corpus("synthetic", 40, 0, 32, 32).all}
    assert {"wall", "floor", "ball"} <= classes


def test_split_sizes_and_disjointness():
    parts = ds.split_ids([f"id{i}" for i in range(100)], seed=0)
    assert [len(parts[k]) for k in ("train", "val", "test")] == [80, 10, 10]
    sets = [set(parts[k]) for k in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert set().union(*sets) == {f"id{i}" for i in range(100)}
    assert parts == ds.split_ids([f"id{i}" for i in reversed(range(100))], seed=0)
    assert parts != ds.split_ids([f"id{i}" for i in range(100)], seed=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.integers(0, 1000))
def test_split_properties(n, seed):
    ids = [f"s{i}" for i in range(n)]
    parts = ds.split_ids(ids, seed)
    assert sorted(parts["train"] + parts["val"] + parts["test"]) == sorted(ids)
    assert len(parts["train"]) == round(0.8 * n) and len(parts["val"]) == round(0.1 * n)


def test_corpus_is_seed_stable():
    a = ds.corpus("synthetic", 10, 5, 16, 16)
    b = ds.corpus("synthetic", 10, 5, 16, 16)
    for k in ("train", "val", "test"):
        assert [s.id for s in a[k]] == [s.id for s in b[k]]
    assert len(a.train) == 8 and len(a.val) == 1 and len(a.test) == 1
    with pytest.raises(ValidationError):
        ds.corpus("synthetic", 5, 0)


def test_downscale_sample():
    s = ds.generate_synthetic_scene(ds.scene_seed(0, 0), 32, 32)
    d = ds.downscale_sample(s)
    assert d.image.shape == (16, 16, 3) and d.depth.shape == (16, 16)
    np.testing.assert_array_equal(d.depth.values, s.depth.values[::2, ::2])
    assert d.intrinsics.fx == s.intrinsics.fx / 2
    assert d.dominant_class == s.dominant_class
