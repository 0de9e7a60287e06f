import json

import cv2
import numpy as np
import pytest
from conftest import random_pose
from hypothesis import given, settings
from hypothesis import strategies as st

from deftrack.datasets import (
    DynamicMask,
    SequenceConfig,
    dilate_mask,
    disc_offsets,
    load_sequence,
    read_depth_png,
    write_depth_png,
    write_sequence,
)
from deftrack.errors import FrameError, SequenceError
from deftrack.geometry import Intrinsics
from deftrack.image import GrayImage
from deftrack.synthetic import SyntheticSceneConfig, camera_pose, generate_synthetic_sequence


def point_mask(h=41, w=41, y=20, x=20):
    m = np.zeros((h, w), dtype=bool)
    m[y, x] = True
    return DynamicMask(m)


class TestMask:
    def test_radius_zero_identity(self):
        m = point_mask()
        out = dilate_mask(m, 0)
        np.testing.assert_array_equal(out.bitmap, m.bitmap)
        assert out.bitmap is not m.bitmap

    @pytest.mark.parametrize("r", [1, 2, 3, 6])
    def test_disc_area(self, r):
        assert dilate_mask(point_mask(), r).area == len(disc_offsets(r))

    def test_disc_radius_three(self):
        assert dilate_mask(point_mask(), 3).area == 29

    def test_full_mask_stays_full(self):
        out = dilate_mask(DynamicMask.full(30, 20), 5)
        assert out.area == 600

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            dilate_mask(point_mask(), -1)

    @settings(max_examples=30)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 5))
    def test_dilation_contains_input_and_reach(self, seed, r):
        rng = np.random.default_rng(seed)
        m = DynamicMask(rng.random((30, 40)) < 0.05)
        out = dilate_mask(m, r)
        assert np.all(out.bitmap[m.bitmap])
        # Every dilated pixel lies within r of a seed pixel.
        dist = cv2.distanceTransform((~m.bitmap).astype(np.uint8), cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
        if m.area:
            assert np.all(dist[out.bitmap] <= r + 1e-6)

    def test_uint8_round_trip(self):
        m = point_mask()
        np.testing.assert_array_equal(DynamicMask.from_uint8(m.to_uint8()).bitmap, m.bitmap)

    def test_contains(self):
        m = point_mask()
        np.testing.assert_array_equal(m.contains(np.array([[20.2, 19.8], [5.0, 5.0]])), [True, False])


@pytest.fixture
def K():
    return Intrinsics(30.0, 30.0, 15.5, 11.5)


def frames(n, rng):
    return [GrayImage.from_uint8(rng.integers(0, 256, (24, 32), dtype=np.uint8)) for _ in range(n)]


class TestSequenceIO:
    def test_three_frames_no_masks(self, tmp_path, K, rng):
        imgs = frames(3, rng)
        write_sequence(tmp_path, imgs, K)
        out = list(load_sequence(SequenceConfig.from_directory(tmp_path)))
        assert [f.index for f in out] == [0, 1, 2]
        for f, img in zip(out, imgs):
            assert f.mask is None and f.depth is None
            np.testing.assert_array_equal(f.image.to_uint8(), img.to_uint8())

    def test_missing_mask_is_none(self, tmp_path, K, rng):
        imgs = frames(3, rng)
        masks = [point_mask(24, 32, 5, 5), None, DynamicMask.full(32, 24)]
        write_sequence(tmp_path, imgs, K, masks=masks)
        out = list(load_sequence(SequenceConfig.from_directory(tmp_path)))
        np.testing.assert_array_equal(out[0].mask.bitmap, masks[0].bitmap)
        assert out[1].mask is None
        assert out[2].mask.area == 32 * 24

    def test_intrinsics_and_poses(self, tmp_path, K, rng):
        poses = [random_pose(rng) for _ in range(2)]
        write_sequence(tmp_path, frames(2, rng), K, poses=poses, fps=15.0)
        cfg = SequenceConfig.from_directory(tmp_path)
        assert cfg.intrinsics == K and cfg.fps == 15.0
        for f, p in zip(load_sequence(cfg), poses):
            np.testing.assert_allclose(f.pose.matrix(), p.matrix(), atol=1e-12)

    def test_depth_round_trip(self, tmp_path, rng):
        depth = rng.uniform(0.3, 2.0, (24, 32))
        depth[3, 4] = np.nan
        write_depth_png(tmp_path / "d.png", depth)
        back = read_depth_png(tmp_path / "d.png")
        assert np.isnan(back[3, 4])
        ok = np.isfinite(depth)
        assert np.max(np.abs(back[ok] - depth[ok])) <= 0.5e-3

    def test_corrupt_frame(self, tmp_path, K, rng):
        write_sequence(tmp_path, frames(2, rng), K)
        (tmp_path / "frame_000001.png").write_bytes(b"not a png")
        it = load_sequence(SequenceConfig.from_directory(tmp_path))
        next(it)
        with pytest.raises(FrameError) as exc:
            next(it)
        assert exc.value.frame_id == 1

    def test_empty_directory(self, tmp_path, K):
        with pytest.raises(SequenceError):
            list(load_sequence(SequenceConfig(tmp_path, K)))

    def test_missing_metadata(self, tmp_path):
        with pytest.raises(SequenceError):
            SequenceConfig.from_directory(tmp_path)

    def test_lexicographic_order(self, tmp_path, K, rng):
        write_sequence(tmp_path, frames(12, rng), K)
        assert [f.index for f in load_sequence(SequenceConfig.from_directory(tmp_path))] == list(range(12))

    def test_principal_point_outside(self, tmp_path):
        with pytest.raises(ValueError):
            SequenceConfig(tmp_path, Intrinsics(300.0, 300.0, 500.0, 119.5), image_size=(320, 240))

    def test_metadata_is_json(self, tmp_path, K, rng):
        write_sequence(tmp_path, frames(1, rng), K)
        meta = json.loads((tmp_path / "sequence.json").read_text())
        assert meta["image_size"] == [32, 24]


SMALL = dict(width=160, height=120, focal=150.0, frames=4)


class TestGenerator:
    def test_deterministic(self):
        a = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL))
        b = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL))
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.data, fb.data)
        np.testing.assert_array_equal(a.ground_truth[3].depth, b.ground_truth[3].depth)

    def test_seed_changes_noise(self):
        a = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, seed=1))
        b = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, seed=2))
        assert not np.array_equal(a.frames[1].data, b.frames[1].data)

    def test_zero_amplitude_is_rigid(self):
        seq = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, amplitude=0.0))
        x = np.linspace(-0.3, 0.3, 7)
        for k in range(4):
            np.testing.assert_allclose(seq.surface_height(x, x, k), seq.surface_height(x, x, 0), atol=0)

    def test_first_pose_identity(self):
        np.testing.assert_allclose(camera_pose(SyntheticSceneConfig(), 0).matrix(), np.eye(4), atol=1e-15)

    def test_illumination_keeps_geometry(self):
        on = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, illumination=True))
        off = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, illumination=False))
        for a, b in zip(on.ground_truth, off.ground_truth):
            np.testing.assert_array_equal(a.depth, b.depth)
            np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())
        assert not np.array_equal(on.frames[2].data, off.frames[2].data)

    def test_depth_consistent_with_surface(self):
        cfg = SyntheticSceneConfig(**SMALL)
        seq = generate_synthetic_sequence(cfg)
        gt = seq.ground_truth[2]
        K = seq.intrinsics
        ys, xs = np.mgrid[10:110:20, 10:150:20]
        px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        z = gt.depth[ys.ravel(), xs.ravel()]
        Xw = gt.pose.inverse().transform(K.backproject(px, z))
        np.testing.assert_allclose(Xw[:, 2], seq.surface_height(Xw[:, 0], Xw[:, 1], 2), atol=1e-6)

    def test_flow_points_to_same_material(self):
        cfg = SyntheticSceneConfig(**SMALL, amplitude=0.0)
        seq = generate_synthetic_sequence(cfg)
        gt0, gt1 = seq.ground_truth[0], seq.ground_truth[1]
        K = seq.intrinsics
        y, x = 60, 80
        Xw = gt0.pose.inverse().transform(K.backproject(np.array([[x, y]], dtype=float), np.array([gt0.depth[y, x]])))
        target = K.project(gt1.pose.transform(Xw))[0]
        np.testing.assert_allclose(np.array([x, y]) + gt0.flow[y, x], target, atol=1e-6)

    def test_tool_mask_nonempty(self):
        seq = generate_synthetic_sequence(SyntheticSceneConfig(**SMALL, tool=True, tool_start=(20.0, 60.0)))
        assert all(m is not None and m.area > 0 for m in seq.masks)

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticSceneConfig(amplitude=-1.0)
        with pytest.raises(ValueError):
            SyntheticSceneConfig(frames=1)
