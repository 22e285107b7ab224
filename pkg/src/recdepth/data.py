"""Synthetic sequence generation with exact ground truth, dataset
materialization and ingestion (native layout and KITTI raw), and sub-sequence
splitting for recurrent training.

On-disk native layout (synthetic datasets are materialized to it, so every
downstream path is format-agnostic):

    root/
      sequences/<name>/image/000000.png     8-bit RGB
      sequences/<name>/depth/000000.png     16-bit, value = depth * 256, 0 invalid
      sequences/<name>/cam.txt              fx fy cx cy width height
      sequences/<name>/poses.txt            camera-to-world 3x4, row-major
      splits/{train,val,test}.txt           newline-separated sequence names
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0  # stored 16-bit value v encodes v / 256 meters; 0 = invalid


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class SyntheticScene:
    """A textured height-field wall observed by a smoothly moving camera."""

    num_frames: int = 100
    height: int = 48
    width: int = 160
    seed: int = 0
    base_distance: float = 6.0  # mean wall distance (m)
    relief_amplitude: float = 1.8  # peak-to-mean surface relief (m)
    max_translation: float = 0.12  # per-frame camera translation (m)
    max_rotation: float = 0.006  # per-frame camera rotation (rad)
    focal_scale: float = 0.8  # fx = focal_scale * width
    trajectory_seed: int | None = None  # new camera path through the same world

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")
        if self.base_distance <= self.relief_amplitude:
            raise ValueError("the camera would start inside the surface relief")

    def intrinsics(self) -> Intrinsics:
        f = self.focal_scale * self.width
        return Intrinsics(
            fx=f,
            fy=f,
            cx=(self.width - 1) / 2.0,
            cy=(self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )


class HeightFieldWorld:
    """Analytic world: surface z = h(x, y) (sum of sinusoids) carrying a
    multi-octave sinusoidal RGB texture. Smooth everywhere, with bounded
    slope so every camera ray has a unique intersection."""

    MAX_SLOPE = 0.3

    def __init__(self, scene: SyntheticScene, rng: np.random.Generator):
        self.base = scene.base_distance
        extent = scene.base_distance * scene.width / (scene.focal_scale * scene.width)
        # surface relief: a few random low-frequency waves, slope-capped
        n_waves = 4
        wavelengths = rng.uniform(extent / 3.0, extent / 1.2, size=n_waves)
        angles = rng.uniform(0, 2 * np.pi, size=n_waves)
        self._k = (2 * np.pi / wavelengths)[:, None] * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
        amps = rng.uniform(0.5, 1.0, size=n_waves)
        amps *= scene.relief_amplitude / amps.sum()
        slope = float(np.sum(amps * np.linalg.norm(self._k, axis=1)))
        if slope > self.MAX_SLOPE:
            amps *= self.MAX_SLOPE / slope
        self._amps = amps
        self._phases = rng.uniform(0, 2 * np.pi, size=n_waves)

        # texture octaves: finest wavelength ~10 px footprints so bilinear
        # resampling during warps stays well under the photometric tolerance
        pixel = scene.base_distance / (scene.focal_scale * scene.width)
        wl = np.array([40.0, 20.0, 10.0]) * pixel
        t_angles = rng.uniform(0, 2 * np.pi, size=(3, 3))  # (octave, channel)
        self._tk = (2 * np.pi / wl)[:, None, None] * np.stack(
            [np.cos(t_angles), np.sin(t_angles)], axis=-1
        )  # (octave, channel, 2)
        self._tamps = np.array([0.22, 0.13, 0.08])
        self._tphases = rng.uniform(0, 2 * np.pi, size=(3, 3))

    def height(self, x, y):
        z = np.full_like(np.asarray(x, dtype=np.float64), self.base)
        for a, k, p in zip(self._amps, self._k, self._phases):
            z = z + a * np.sin(k[0] * x + k[1] * y + p)
        return z

    def height_grad(self, x, y):
        gx = np.zeros_like(np.asarray(x, dtype=np.float64))
        gy = np.zeros_like(gx)
        for a, k, p in zip(self._amps, self._k, self._phases):
            c = a * np.cos(k[0] * x + k[1] * y + p)
            gx += c * k[0]
            gy += c * k[1]
        return gx, gy

    def texture(self, x, y):
        """RGB texture in (0, 1) at world coordinates; shape (..., 3)."""
        rgb = np.full((*np.shape(x), 3), 0.5)
        for o in range(3):
            for c in range(3):
                k = self._tk[o, c]
                rgb[..., c] += self._tamps[o] * np.sin(
                    k[0] * x + k[1] * y + self._tphases[o, c]
                )
        return np.clip(rgb, 0.02, 0.98)


@dataclass
class SyntheticSequence:
    images: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    depths: np.ndarray  # (T, H, W) float32, meters
    poses: np.ndarray  # (T, 4, 4) float64, camera-to-world
    intrinsics: Intrinsics
    world: HeightFieldWorld


def _camera_trajectory(scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    """Smooth mean-reverting random walk of camera-to-world transforms."""
    from .geometry import pose_to_matrix
    import torch

    poses = np.zeros((scene.num_frames, 4, 4))
    rot = np.eye(3)
    pos = np.zeros(3)
    vel = rng.normal(size=3)
    ang = np.zeros(3)
    ang_vel = rng.normal(size=3)
    for t in range(scene.num_frames):
        transform = np.eye(4)
        transform[:3, :3] = rot
        transform[:3, 3] = pos
        poses[t] = transform
        if scene.max_translation > 0:
            # AR(1) velocity with a pull toward the start position
            vel = 0.9 * vel + 0.35 * rng.normal(size=3) - 0.08 * pos / scene.max_translation
            step = vel / max(np.linalg.norm(vel), 1.0)
            pos = pos + scene.max_translation * step
        if scene.max_rotation > 0:
            # mean-reverting angular walk, applied as a fresh absolute
            # axis-angle so the attitude stays near the forward direction
            ang_vel = 0.85 * ang_vel + 0.3 * rng.normal(size=3) - 0.1 * ang / scene.max_rotation
            ang = np.clip(ang + scene.max_rotation * ang_vel, -0.12, 0.12)
            mat = pose_to_matrix(
                torch.as_tensor(ang[None], dtype=torch.float64),
                torch.zeros(1, 3, dtype=torch.float64),
            )[0].numpy()
            rot = mat[:3, :3]
    return poses


def render_frame(
    world: HeightFieldWorld, pose_cam_to_world: np.ndarray, intr: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one frame: returns (image (3, H, W) float32, depth (H, W) float32).

    Depth is the camera-frame Z of the ray-surface intersection, solved by
    Newton iteration to < 1e-9 residual.
    """
    h, w = intr.height, intr.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs_cam = np.stack(
        [(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)], axis=-1
    )
    rot = pose_cam_to_world[:3, :3]
    origin = pose_cam_to_world[:3, 3]
    d = dirs_cam @ rot.T
    if np.any(d[..., 2] <= 0.2):
        raise ValueError("degenerate trajectory: camera turned away from the surface")
    if origin[2] >= world.height(origin[0], origin[1]) - 0.5:
        raise ValueError("degenerate trajectory: camera at or below the surface")

    s = (world.base - origin[2]) / d[..., 2]
    for _ in range(50):
        px = origin[0] + s * d[..., 0]
        py = origin[1] + s * d[..., 1]
        pz = origin[2] + s * d[..., 2]
        f = pz - world.height(px, py)
        if np.max(np.abs(f)) < 1e-10:
            break
        gx, gy = world.height_grad(px, py)
        fp = d[..., 2] - gx * d[..., 0] - gy * d[..., 1]
        s = s - f / fp
    else:
        raise RuntimeError("ray casting did not converge")
    if np.any(s <= 0.3):
        raise ValueError("degenerate trajectory: surface too close to the camera")

    px = origin[0] + s * d[..., 0]
    py = origin[1] + s * d[..., 1]
    image = world.texture(px, py).transpose(2, 0, 1).astype(np.float32)
    return image, s.astype(np.float32)


def generate_synthetic(scene: SyntheticScene) -> SyntheticSequence:
    """Render a full sequence with exact depth and exactly known poses."""
    rng = np.random.default_rng(scene.seed)
    world = HeightFieldWorld(scene, rng)
    if scene.trajectory_seed is not None:
        rng = np.random.default_rng(scene.trajectory_seed)
    poses = _camera_trajectory(scene, rng)
    intr = scene.intrinsics()
    images = np.empty((scene.num_frames, 3, intr.height, intr.width), dtype=np.float32)
    depths = np.empty((scene.num_frames, intr.height, intr.width), dtype=np.float32)
    for t in range(scene.num_frames):
        images[t], depths[t] = render_frame(world, poses[t], intr)
    return SyntheticSequence(
        images=images, depths=depths, poses=poses, intrinsics=intr, world=world
    )


# ---------------------------------------------------------------------------
# image / depth file IO


def save_image_png(path, image: np.ndarray):
    """image (3, H, W) float in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_depth_png(path, depth: np.ndarray):
    """depth (H, W) meters -> 16-bit PNG with v = round(depth * 256), 0 invalid."""
    v = np.round(np.clip(depth, 0.0, 65535.0 / DEPTH_SCALE) * DEPTH_SCALE)
    img = Image.fromarray(v.astype(np.uint16))
    img.save(path)


def load_depth(path) -> np.ndarray:
    v = np.asarray(Image.open(path), dtype=np.float64)
    return (v / DEPTH_SCALE).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class SequenceRecord:
    sequence_id: str
    image_paths: list[Path]
    depth_paths: list[Path | None]
    intrinsics: Intrinsics
    poses: np.ndarray | None = None  # (T, 4, 4) camera-to-world, when known

    def __len__(self):
        return len(self.image_paths)


@dataclass
class DatasetIndex:
    records: list[SequenceRecord]
    split: str = "train"

    @property
    def num_frames(self):
        return sum(len(r) for r in self.records)


def sequence_key(sequence_id: str) -> int:
    """Stable integer for per-sequence seed derivation."""
    return zlib.crc32(sequence_id.encode())


def write_sequence(root, name: str, seq: SyntheticSequence):
    seq_dir = Path(root) / "sequences" / name
    (seq_dir / "image").mkdir(parents=True, exist_ok=True)
    (seq_dir / "depth").mkdir(parents=True, exist_ok=True)
    for t in range(seq.images.shape[0]):
        save_image_png(seq_dir / "image" / f"{t:06d}.png", seq.images[t])
        save_depth_png(seq_dir / "depth" / f"{t:06d}.png", seq.depths[t])
    intr = seq.intrinsics
    (seq_dir / "cam.txt").write_text(
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height}\n"
    )
    lines = [" ".join(f"{v:.17g}" for v in pose[:3].reshape(-1)) for pose in seq.poses]
    (seq_dir / "poses.txt").write_text("\n".join(lines) + "\n")


def materialize_dataset(root, scenes_per_split: dict[str, list[SyntheticScene]], force=False):
    """Render and write sequences plus split files under `root`."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty; pass force to overwrite")
    (root / "splits").mkdir(parents=True, exist_ok=True)
    for split, scenes in scenes_per_split.items():
        names = []
        for i, scene in enumerate(scenes):
            name = f"{split}_{i:03d}"
            write_sequence(root, name, generate_synthetic(scene))
            names.append(name)
        (root / "splits" / f"{split}.txt").write_text("\n".join(names) + "\n")


def _read_intrinsics_file(path) -> Intrinsics:
    vals = Path(path).read_text().split()
    return Intrinsics(
        fx=float(vals[0]),
        fy=float(vals[1]),
        cx=float(vals[2]),
        cy=float(vals[3]),
        width=int(vals[4]),
        height=int(vals[5]),
    )


def load_sequence_index(root, split: str) -> DatasetIndex:
    """Index a native-layout dataset for one split."""
    root = Path(root)
    split_file = root / "splits" / f"{split}.txt"
    if not split_file.exists():
        raise FileNotFoundError(f"missing split file {split_file}")
    records = []
    for name in split_file.read_text().split():
        seq_dir = root / "sequences" / name
        cam = seq_dir / "cam.txt"
        if not cam.exists():
            raise FileNotFoundError(f"missing calibration {cam}")
        image_paths = sorted((seq_dir / "image").glob("*.png"))
        depth_dir = seq_dir / "depth"
        depth_paths = []
        for p in image_paths:
            d = depth_dir / p.name
            depth_paths.append(d if d.exists() else None)
        poses = None
        pose_file = seq_dir / "poses.txt"
        if pose_file.exists():
            rows = np.loadtxt(pose_file).reshape(-1, 3, 4)
            poses = np.concatenate(
                [rows, np.tile(np.array([[[0.0, 0, 0, 1]]]), (rows.shape[0], 1, 1))],
                axis=1,
            )
        records.append(
            SequenceRecord(
                sequence_id=name,
                image_paths=image_paths,
                depth_paths=depth_paths,
                intrinsics=_read_intrinsics_file(cam),
                poses=poses,
            )
        )
    return DatasetIndex(records=records, split=split)


# ---------------------------------------------------------------------------
# KITTI raw ingestion


def _parse_kitti_calibration(calib_file) -> tuple[float, float, float, float, int, int]:
    entries = {}
    for line in Path(calib_file).read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            entries[key.strip()] = val.split()
    if "P_rect_02" not in entries:
        raise ValueError(f"no P_rect_02 entry in {calib_file}")
    p = [float(v) for v in entries["P_rect_02"]]
    size = entries.get("S_rect_02")
    width, height = (int(float(size[0])), int(float(size[1]))) if size else (1242, 375)
    return p[0], p[5], p[2], p[6], width, height


def load_kitti_index(root, split_file) -> DatasetIndex:
    """Index KITTI raw drives listed in an Eigen-style split file.

    Lines look like "2011_09_26/2011_09_26_drive_0002_sync 0000000069 l".
    Frames are grouped per drive, sorted, and broken at index gaps so each
    record holds consecutively timestamped frames. Missing image files are
    skipped with a warning; missing calibration is an error; missing ground
    truth is tolerated (self-supervised prediction does not need it).
    """
    root = Path(root)
    split_file = Path(split_file)
    by_drive: dict[str, set[int]] = {}
    for line in split_file.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        drive = parts[0]
        frame = int(parts[1]) if len(parts) > 1 else 0
        by_drive.setdefault(drive, set()).add(frame)

    records = []
    for drive in sorted(by_drive):
        date = drive.split("/")[0]
        calib = root / date / "calib_cam_to_cam.txt"
        if not calib.exists():
            raise FileNotFoundError(f"missing calibration {calib}")
        fx, fy, cx, cy, width, height = _parse_kitti_calibration(calib)
        intr = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

        frames = []
        for idx in sorted(by_drive[drive]):
            img = root / drive / "image_02" / "data" / f"{idx:010d}.png"
            if not img.exists():
                log.warning("skipping missing frame %s", img)
                continue
            gt = root / drive / "proj_depth" / "groundtruth" / "image_02" / f"{idx:010d}.png"
            frames.append((idx, img, gt if gt.exists() else None))

        # break at gaps: each run of consecutive indices is one sequence
        run: list[tuple[int, Path, Path | None]] = []
        for item in frames:
            if run and item[0] != run[-1][0] + 1:
                records.append(_kitti_record(drive, run, intr))
                run = []
            run.append(item)
        if run:
            records.append(_kitti_record(drive, run, intr))
    return DatasetIndex(records=records, split=split_file.stem)


def _kitti_record(drive, run, intr) -> SequenceRecord:
    start, end = run[0][0], run[-1][0]
    return SequenceRecord(
        sequence_id=f"{drive}/{start:010d}-{end:010d}",
        image_paths=[item[1] for item in run],
        depth_paths=[item[2] for item in run],
        intrinsics=intr,
    )


# ---------------------------------------------------------------------------
# sub-sequences and augmentation


@dataclass
class Subsequence:
    record: SequenceRecord
    start: int
    length: int


def split_subsequences(index: DatasetIndex, subseq_length: int, seed: int) -> list[Subsequence]:
    """Non-overlapping contiguous windows, shuffled; remainders >= 3 frames are
    kept as shorter windows, shorter remainders are dropped."""
    if subseq_length < 3:
        raise ValueError("subseq_length must be at least 3")
    windows = []
    for rec in index.records:
        start = 0
        while len(rec) - start >= subseq_length:
            windows.append(Subsequence(rec, start, subseq_length))
            start += subseq_length
        rem = len(rec) - start
        if rem >= 3:
            windows.append(Subsequence(rec, start, rem))
    rng = np.random.default_rng(seed)
    rng.shuffle(windows)
    return windows


def color_jitter(
    images: np.ndarray, rng: np.random.Generator, strength: float = 0.2
) -> np.ndarray:
    """Brightness/contrast/saturation jitter with one factor set shared by all
    frames, keeping the photometric loss consistent across the window."""
    b, c, s = 1.0 + rng.uniform(-strength, strength, size=3)
    out = images * b
    out = (out - 0.5) * c + 0.5
    gray = out.mean(axis=-3, keepdims=True)
    out = gray + (out - gray) * s
    return np.clip(out, 0.0, 1.0).astype(np.float32)
