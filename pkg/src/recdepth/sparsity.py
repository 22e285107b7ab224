"""Sparse input patterns sub-sampled from ground-truth depth: random points,
scanning lines at constant stride, and the full (still sparse) map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATTERN_KINDS = ("random", "lines", "full")


@dataclass(frozen=True)
class SparsePattern:
    kind: str = "random"
    count: int = 500  # points kept by the random pattern
    num_lines: int = 8  # rows kept by the line pattern
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if self.num_lines < 1:
            raise ValueError("num_lines must be at least 1")


def sample_random(
    gt: np.ndarray, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Keep min(count, #valid) distinct valid pixels, uniform without replacement."""
    valid = np.flatnonzero(gt > 0)
    keep = min(count, valid.size)
    mask = np.zeros(gt.size, dtype=np.float32)
    if keep > 0:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(valid.size, size=keep, replace=False)
        mask[valid[chosen]] = 1.0
    mask = mask.reshape(gt.shape)
    return (gt * mask).astype(np.float32), mask


def sample_lines(
    gt: np.ndarray, num_lines: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Keep all valid pixels on num_lines rows at constant stride.

    Rows span the vertical extent of valid depth; stride = band // num_lines,
    with a seeded offset inside the remaining slack. num_lines equal to the
    band height selects every row.
    """
    valid_rows = np.flatnonzero((gt > 0).any(axis=1))
    if num_lines > valid_rows.size:
        raise ValueError(
            f"num_lines={num_lines} exceeds the {valid_rows.size} rows carrying valid depth"
        )
    row_lo, row_hi = int(valid_rows[0]), int(valid_rows[-1])
    band = row_hi - row_lo + 1
    stride = max(1, band // num_lines)
    span = stride * (num_lines - 1)
    slack = band - 1 - span
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, slack + 1))
    rows = row_lo + offset + stride * np.arange(num_lines)
    mask = np.zeros_like(gt, dtype=np.float32)
    mask[rows] = (gt[rows] > 0).astype(np.float32)
    return (gt * mask).astype(np.float32), mask


def sample_full(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pass-through copy: the dense ground truth used as the sparse input."""
    mask = (gt > 0).astype(np.float32)
    return gt.astype(np.float32).copy(), mask


def apply_pattern(
    gt: np.ndarray, pattern: SparsePattern, frame_index: int = 0, sequence_key: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Apply a pattern to one frame with a per-frame derived seed."""
    seed = np.random.SeedSequence(
        entropy=pattern.seed, spawn_key=(sequence_key, frame_index)
    )
    frame_seed = int(seed.generate_state(1)[0])
    if pattern.kind == "random":
        return sample_random(gt, pattern.count, frame_seed)
    if pattern.kind == "lines":
        return sample_lines(gt, pattern.num_lines, frame_seed)
    return sample_full(gt)
