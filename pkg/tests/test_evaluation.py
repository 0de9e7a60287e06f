import numpy as np
import pytest
from conftest import random_pose
from hypothesis import given, settings
from hypothesis import strategies as st

from deftrack.errors import ConfigError, InsufficientDataError
from deftrack.evaluation import (
    METRICS_HEADER,
    FrameMetrics,
    ground_truth_points,
    read_csv,
    read_tum,
    rmse_scale_corrected,
    scale_drift,
    to_csv,
    track_percentages,
    track_quality_report,
    trajectory_error,
    tum_line,
)
from deftrack.geometry import CameraPose, Intrinsics
from deftrack.pipeline import RunConfig, run_pipeline
from deftrack.synthetic import SyntheticSceneConfig
from deftrack.tracking import TrackingState, TrackingStatus


class TestScaleCorrectedRMSE:
    def test_identity(self, rng):
        g = rng.normal(size=(20, 3))
        assert rmse_scale_corrected(g, g) == pytest.approx((0.0, 1.0))

    def test_half_scale(self, rng):
        g = rng.normal(size=(20, 3))
        r, s = rmse_scale_corrected(0.5 * g, g)
        assert r == pytest.approx(0.0, abs=1e-12) and s == pytest.approx(2.0)

    def test_matches_brute_force_scan(self, rng):
        g = rng.normal(size=(50, 3))
        p = 0.8 * g + rng.normal(scale=0.05, size=g.shape)
        r, s = rmse_scale_corrected(p, g)
        grid = np.linspace(0.5, 2.0, 150001)
        errs = [np.sqrt(np.mean(np.sum((c * p - g) ** 2, axis=1))) for c in grid[::100]]
        coarse = grid[::100][int(np.argmin(errs))]
        assert abs(s - coarse) <= 1e-3
        assert r <= min(errs) + 1e-12

    @settings(max_examples=40)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(10, 3))
        p = g + rng.normal(scale=0.1, size=g.shape)
        r1, s1 = rmse_scale_corrected(p, g)
        r2, s2 = rmse_scale_corrected(c * p, g)
        assert r2 == pytest.approx(r1, rel=1e-9, abs=1e-12)
        assert s2 == pytest.approx(s1 / c, rel=1e-9)

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientDataError):
            rmse_scale_corrected(np.ones((2, 3)), np.ones((2, 3)))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse_scale_corrected(np.ones((4, 3)), np.ones((3, 3)))


class TestScaleDrift:
    def test_constant(self):
        assert scale_drift([1.3] * 50) == pytest.approx(1.0)

    def test_ramp(self):
        s = np.linspace(1.0, 2.0, 100)
        assert scale_drift(s) == pytest.approx(np.median(s[-10:]) / np.median(s[:10]))

    def test_short_sequence_single_frame_windows(self):
        assert scale_drift([2.0, 5.0, 3.0]) == pytest.approx(1.5)

    def test_skips_invalid(self):
        assert scale_drift([1.0, float("nan"), None, 2.0]) == pytest.approx(2.0)

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            scale_drift([1.0])


class TestPercentages:
    def test_example(self):
        assert track_percentages(50, 40, 200) == (25.0, 20.0)

    def test_empty_local_map(self):
        assert track_percentages(5, 5, 0) == (0.0, 0.0)

    def test_lost_reports_zero(self):
        lost = TrackingState(3, CameraPose.identity(), TrackingStatus.LOST)
        rows, _ = track_quality_report([lost], [100])
        assert rows == [(3, 0.0, 0.0, "Lost")]

    def test_metrics_ordering_enforced(self):
        with pytest.raises(ValueError):
            FrameMetrics(0, 1.0, 1.0, 10.0, 20.0, "Tracking")


class TestFormats:
    def test_csv_layout(self, tmp_path):
        text = to_csv(METRICS_HEADER, [(0, 1.5, float("nan"), 25.0, 20.0, "Tracking"), (1, 2.0 / 3.0, 1.0, 0.0, 0.0, "Lost")])
        lines = text.split("\n")
        assert lines[0] == "frame,rmse_mm,scale_s,matched_pct,inlier_pct,status"
        assert lines[1] == "0,1.5,nan,25,20,Tracking"
        assert lines[2].startswith("1,0.666666667,")
        assert "\r" not in text
        (tmp_path / "m.csv").write_text(text)
        assert read_csv(tmp_path / "m.csv")[1]["status"] == "Lost"

    def test_tum_round_trip(self, tmp_path, rng):
        poses = [random_pose(rng) for _ in range(5)]
        path = tmp_path / "traj.txt"
        path.write_text("".join(tum_line(k / 30.0, p) + "\n" for k, p in enumerate(poses)))
        ts, back = read_tum(path)
        np.testing.assert_allclose(ts, np.arange(5) / 30.0, atol=1e-9)
        for a, b in zip(poses, back):
            np.testing.assert_allclose(b.matrix(), a.matrix(), atol=1e-8)

    def test_tum_stores_camera_center(self, rng):
        pose = random_pose(rng)
        values = [float(v) for v in tum_line(0.0, pose).split()]
        np.testing.assert_allclose(values[1:4], pose.center, atol=1e-8)


def test_ground_truth_points_backproject():
    K = Intrinsics(100.0, 100.0, 10.0, 10.0)
    depth = np.full((21, 21), 2.0)
    depth[0, 0] = np.nan
    pts, valid = ground_truth_points(np.array([[10.0, 10.0], [15.0, 10.0], [0.0, 0.0], [30.0, 5.0]]), depth, K)
    np.testing.assert_array_equal(valid, [True, True, False, False])
    np.testing.assert_allclose(pts[:2], [[0, 0, 2], [0.1, 0, 2]], atol=1e-12)


def test_trajectory_error_similarity_invariant(rng):
    gt = [random_pose(rng) for _ in range(8)]
    T = random_pose(rng)
    # A similarity of the world maps camera centers c to s R c + t.
    s = 1.7
    est = []
    for p in gt:
        c = s * T.rotation @ p.center + T.translation
        R = p.rotation @ T.rotation.T
        est.append(CameraPose(R, -R @ c))
    report = trajectory_error(est, gt)
    assert report["ate_rmse"] == pytest.approx(0.0, abs=1e-9)


@pytest.fixture(scope="module")
def rigid_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("rigid")
    scene = SyntheticSceneConfig(frames=15, amplitude=0.0)
    return out, run_pipeline(RunConfig(output_dir=out, synthetic=scene), write=True)


class TestPipeline:
    def test_rigid_sequence(self, rigid_run):
        _, rigid_run = rigid_run
        assert rigid_run.summary["lost_frames"] == 0
        report = trajectory_error([s.pose for s in rigid_run.states], rigid_run.gt_poses)
        assert report["ate_rmse"] < 0.005 * report["path_length"]

    def test_outputs_written(self, rigid_run):
        out, res = rigid_run
        rows = read_csv(out / "metrics.csv")
        assert [int(r["frame"]) for r in rows] == list(range(15))
        assert len(read_tum(out / "traj.txt")[1]) == 15
        assert len(read_csv(out / "track_quality.csv")) == 15
        assert {"summary.json", "config.json"} <= {p.name for p in out.iterdir()}
        assert res.summary["scale_drift"] == pytest.approx(1.0, abs=0.05)

    def test_single_frame(self, tmp_path, monkeypatch):
        import deftrack.pipeline as pipeline

        real = pipeline._synthetic_frames

        def one_frame(cfg):
            K, fps, frames = real(cfg)
            return K, fps, iter([next(frames)])

        monkeypatch.setattr(pipeline, "_synthetic_frames", one_frame)
        res = run_pipeline(RunConfig(output_dir=tmp_path, synthetic=SyntheticSceneConfig(frames=2)))
        assert res.summary["frames"] == 1
        assert (tmp_path / "traj.txt").read_text().count("\n") == 1

    def test_bad_config(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig(output_dir=tmp_path)
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"output_dir": str(tmp_path), "synthetic": {}, "bogus": 1})
