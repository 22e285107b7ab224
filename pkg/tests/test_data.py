import numpy as np
import pytest
import torch

from recdepth.data import (
    DEPTH_SCALE,
    DatasetIndex,
    SyntheticScene,
    color_jitter,
    generate_synthetic,
    load_depth,
    load_image,
    load_kitti_index,
    load_sequence_index,
    materialize_dataset,
    save_depth_png,
    save_image_png,
    split_subsequences,
    write_sequence,
)
from recdepth.geometry import inverse_warp, matrix_to_pose

SCENE = SyntheticScene(num_frames=6, height=48, width=160, seed=3)


def relative_pose(poses, t, s):
    """Transform taking frame-t camera coordinates into frame-s coordinates."""
    return np.linalg.inv(poses[s]) @ poses[t]


class TestSyntheticGenerator:
    def test_static_camera_gives_identical_frames(self):
        scene = SyntheticScene(num_frames=4, height=32, width=64, seed=1, max_translation=0.0, max_rotation=0.0)
        seq = generate_synthetic(scene)
        for t in range(1, 4):
            assert np.array_equal(seq.images[t], seq.images[0])
            assert np.array_equal(seq.depths[t], seq.depths[0])

    def test_flat_wall_gives_constant_depth(self):
        scene = SyntheticScene(
            num_frames=1, height=32, width=64, seed=2,
            relief_amplitude=1e-9, max_translation=0.0, max_rotation=0.0,
        )
        seq = generate_synthetic(scene)
        assert np.allclose(seq.depths[0], scene.base_distance, atol=1e-6)

    def test_depth_is_exact_ray_surface_intersection(self):
        seq = generate_synthetic(SCENE)
        intr = seq.intrinsics
        ys, xs = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
        for t in (0, 3):
            rot = seq.poses[t][:3, :3]
            origin = seq.poses[t][:3, 3]
            dirs = np.stack(
                [(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)],
                axis=-1,
            ) @ rot.T
            pts = origin + seq.depths[t][..., None] * dirs
            resid = pts[..., 2] - seq.world.height(pts[..., 0], pts[..., 1])
            assert np.max(np.abs(resid)) < 1e-6

    def test_texture_has_gradient_almost_everywhere(self):
        seq = generate_synthetic(SCENE)
        img = seq.images[0]
        gx = np.abs(np.diff(img, axis=2)).mean(axis=0)
        flat = (gx < 1e-5).mean()
        assert flat < 0.02

    def test_warp_self_consistency_oracle(self):
        # warping frame t+1 into frame t with TRUE depth and TRUE pose must
        # reproduce frame t up to bilinear error on in-bounds pixels; this
        # validates the renderer and the warp jointly
        for seed in (0, 1):
            scene = SyntheticScene(num_frames=4, height=48, width=160, seed=seed)
            seq = generate_synthetic(scene)
            intr = seq.intrinsics
            for t in (0, 2):
                rel = relative_pose(seq.poses, t, t + 1)
                aa, tr = matrix_to_pose(torch.tensor(rel, dtype=torch.float64))
                warped, mask = inverse_warp(
                    torch.tensor(seq.images[t + 1], dtype=torch.float64).unsqueeze(0),
                    torch.tensor(seq.depths[t], dtype=torch.float64).view(1, 1, 48, 160),
                    aa,
                    tr,
                    intr,
                )
                target = torch.tensor(seq.images[t], dtype=torch.float64).unsqueeze(0)
                m = mask.expand_as(target)
                l1 = (warped - target).abs()[m].mean().item()
                assert mask.float().mean() > 0.8
                assert l1 < 2e-2

    def test_degenerate_camera_pose_rejected(self):
        from recdepth.data import render_frame

        seq = generate_synthetic(SCENE)
        inside = np.eye(4)
        inside[2, 3] = SCENE.base_distance  # camera sits on the surface
        with pytest.raises(ValueError):
            render_frame(seq.world, inside, seq.intrinsics)
        turned = np.eye(4)
        turned[:3, :3] = np.diag([1.0, -1.0, -1.0])  # facing away from the wall
        with pytest.raises(ValueError):
            render_frame(seq.world, turned, seq.intrinsics)

    def test_scene_validation(self):
        with pytest.raises(ValueError):
            SyntheticScene(base_distance=1.0, relief_amplitude=1.5)
        with pytest.raises(ValueError):
            SyntheticScene(num_frames=0)

    def test_generation_deterministic(self):
        a = generate_synthetic(SCENE)
        b = generate_synthetic(SCENE)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.poses, b.poses)

    def test_trajectory_seed_gives_new_path_through_same_world(self):
        import dataclasses

        base = dataclasses.replace(SCENE, trajectory_seed=50)
        other = dataclasses.replace(SCENE, trajectory_seed=51)
        a, b = generate_synthetic(base), generate_synthetic(other)
        assert not np.array_equal(a.poses, b.poses)
        # identical world: rendering the same pose gives identical frames
        from recdepth.data import render_frame

        img_a, dep_a = render_frame(a.world, np.eye(4), a.intrinsics)
        img_b, dep_b = render_frame(b.world, np.eye(4), b.intrinsics)
        assert np.array_equal(img_a, img_b)
        assert np.array_equal(dep_a, dep_b)


class TestFileIO:
    def test_depth_png_round_trip_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.5, 80.0, size=(24, 32)).astype(np.float32)
        path = tmp_path / "d.png"
        save_depth_png(path, depth)
        back = load_depth(path)
        assert np.max(np.abs(back - depth)) <= 1.0 / DEPTH_SCALE
        # zeros stay invalid
        depth[0, :] = 0.0
        save_depth_png(path, depth)
        assert (load_depth(path)[0] == 0).all()

    def test_image_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(3, 16, 20)).astype(np.float32)
        path = tmp_path / "i.png"
        save_image_png(path, img)
        back = load_image(path)
        assert back.shape == (3, 16, 20)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-6


class TestNativeIndex:
    def test_materialize_and_reload(self, tmp_path):
        root = tmp_path / "ds"
        materialize_dataset(root, {"train": [SCENE], "val": []})
        index = load_sequence_index(root, "train")
        assert len(index.records) == 1
        rec = index.records[0]
        assert len(rec) == 6
        assert rec.intrinsics.width == 160
        assert rec.poses is not None and rec.poses.shape == (6, 4, 4)
        img = load_image(rec.image_paths[0])
        assert img.shape == (3, 48, 160)
        empty = load_sequence_index(root, "val")
        assert empty.records == []

    def test_existing_nonempty_requires_force(self, tmp_path):
        root = tmp_path / "ds"
        materialize_dataset(root, {"train": [SCENE]})
        with pytest.raises(FileExistsError):
            materialize_dataset(root, {"train": [SCENE]})
        materialize_dataset(root, {"train": [SCENE]}, force=True)

    def test_missing_split_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sequence_index(tmp_path, "train")

    def test_order_deterministic(self, tmp_path):
        root = tmp_path / "ds"
        scenes = [SyntheticScene(num_frames=3, height=32, width=64, seed=s) for s in (1, 2)]
        materialize_dataset(root, {"train": scenes})
        a = load_sequence_index(root, "train")
        b = load_sequence_index(root, "train")
        assert [r.sequence_id for r in a.records] == [r.sequence_id for r in b.records]


def _make_kitti_tree(root, frames=(0, 1, 2, 3, 10, 11), missing=(), with_gt=True):
    date = "2011_09_26"
    drive = f"{date}/{date}_drive_0001_sync"
    (root / date).mkdir(parents=True, exist_ok=True)
    calib = (
        "S_rect_02: 1242 375\n"
        "P_rect_02: 721.5377 0.0 609.5593 44.857 0.0 721.5377 172.854 0.2163791 0.0 0.0 1.0 0.002745884\n"
    )
    (root / date / "calib_cam_to_cam.txt").write_text(calib)
    img_dir = root / drive / "image_02" / "data"
    gt_dir = root / drive / "proj_depth" / "groundtruth" / "image_02"
    img_dir.mkdir(parents=True)
    gt_dir.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for f in frames:
        if f in missing:
            continue
        save_image_png(img_dir / f"{f:010d}.png", rng.uniform(size=(3, 8, 16)).astype(np.float32))
        if with_gt:
            save_depth_png(gt_dir / f"{f:010d}.png", rng.uniform(1, 50, size=(8, 16)).astype(np.float32))
    lines = [f"{drive} {f:010d} l" for f in frames]
    split = root / "split.txt"
    split.write_text("\n".join(lines) + "\n")
    return split, drive


class TestKittiIndex:
    def test_empty_split_gives_empty_index(self, tmp_path):
        split = tmp_path / "empty.txt"
        split.write_text("")
        index = load_kitti_index(tmp_path, split)
        assert index.records == []

    def test_groups_consecutive_frames_and_parses_calibration(self, tmp_path):
        split, drive = _make_kitti_tree(tmp_path)
        index = load_kitti_index(tmp_path, split)
        # frames 0-3 and 10-11 form two consecutive runs
        assert [len(r) for r in index.records] == [4, 2]
        intr = index.records[0].intrinsics
        assert intr.fx == pytest.approx(721.5377)
        assert intr.cx == pytest.approx(609.5593)
        assert intr.width == 1242 and intr.height == 375
        assert all(p is not None for p in index.records[0].depth_paths)

    def test_missing_frames_are_skipped_with_warning(self, tmp_path, caplog):
        split, _ = _make_kitti_tree(tmp_path, missing=(2,))
        with caplog.at_level("WARNING"):
            index = load_kitti_index(tmp_path, split)
        assert "skipping missing frame" in caplog.text
        # 0-1, 3, 10-11 -> three runs
        assert [len(r) for r in index.records] == [2, 1, 2]

    def test_missing_calibration_raises(self, tmp_path):
        split, drive = _make_kitti_tree(tmp_path)
        (tmp_path / "2011_09_26" / "calib_cam_to_cam.txt").unlink()
        with pytest.raises(FileNotFoundError):
            load_kitti_index(tmp_path, split)

    def test_missing_gt_tolerated(self, tmp_path):
        split, _ = _make_kitti_tree(tmp_path, with_gt=False)
        index = load_kitti_index(tmp_path, split)
        assert all(p is None for r in index.records for p in r.depth_paths)


class TestSplitSubsequences:
    def _index(self, lengths):
        from pathlib import Path

        from recdepth.data import SequenceRecord
        from recdepth.geometry import Intrinsics

        intr = Intrinsics(fx=10.0, fy=10.0, cx=1.0, cy=1.0, width=4, height=4)
        recs = [
            SequenceRecord(
                sequence_id=f"s{i}",
                image_paths=[Path(f"s{i}/{t}.png") for t in range(n)],
                depth_paths=[None] * n,
                intrinsics=intr,
            )
            for i, n in enumerate(lengths)
        ]
        return DatasetIndex(records=recs)

    def test_window_arithmetic(self):
        index = self._index([90])
        subs = split_subsequences(index, 30, seed=0)
        assert len(subs) == 3
        assert sorted(s.start for s in subs) == [0, 30, 60]

    def test_short_remainder_dropped(self):
        subs = split_subsequences(self._index([31]), 30, seed=0)
        assert len(subs) == 1 and subs[0].length == 30

    def test_long_remainder_kept(self):
        subs = split_subsequences(self._index([35]), 30, seed=0)
        assert sorted(s.length for s in subs) == [5, 30]

    def test_windows_partition_without_duplicates(self):
        subs = split_subsequences(self._index([64]), 10, seed=1)
        frames = sorted(
            f for s in subs for f in range(s.start, s.start + s.length)
        )
        assert len(frames) == len(set(frames))
        assert set(frames) <= set(range(64))

    def test_min_length_validated(self):
        with pytest.raises(ValueError):
            split_subsequences(self._index([10]), 2, seed=0)

    def test_shuffle_deterministic(self):
        idx = self._index([50, 50])
        a = split_subsequences(idx, 10, seed=5)
        b = split_subsequences(idx, 10, seed=5)
        c = split_subsequences(idx, 10, seed=6)
        assert [(s.record.sequence_id, s.start) for s in a] == [
            (s.record.sequence_id, s.start) for s in b
        ]
        assert [(s.record.sequence_id, s.start) for s in a] != [
            (s.record.sequence_id, s.start) for s in c
        ]


class TestColorJitter:
    def test_same_transform_across_frames(self):
        rng = np.random.default_rng(2)
        frames = np.stack([np.full((3, 8, 8), 0.4, np.float32)] * 5)
        out = color_jitter(frames, rng)
        for t in range(1, 5):
            assert np.array_equal(out[t], out[0])

    def test_stays_in_unit_range(self):
        rng = np.random.default_rng(3)
        frames = rng.uniform(size=(4, 3, 8, 8)).astype(np.float32)
        out = color_jitter(frames, rng, strength=0.4)
        assert out.min() >= 0.0 and out.max() <= 1.0
