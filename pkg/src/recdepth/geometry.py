"""Pinhole camera model, SE(3) poses, and differentiable inverse warping.

Conventions used throughout the package:
  * images are (B, C, H, W) tensors, depth maps (B, 1, H, W), all channels-first
  * pixel (x, y) sits at integer coordinates (no half-pixel offset); x indexes
    columns (width), y indexes rows (height)
  * poses are (axis_angle, translation) pairs of (B, 3) tensors; the rigid
    transform maps target-camera coordinates into source-camera coordinates
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

# Z below this is treated as behind/degenerate: clamped for the division and
# masked out of in_bounds.
Z_MIN = 1e-3

_GRID_CACHE: dict[tuple, torch.Tensor] = {}


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels for a fixed image resolution."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for the same camera at a resolution scaled by `factor`."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def matrix(self) -> torch.Tensor:
        k = torch.eye(3, dtype=torch.float64)
        k[0, 0], k[1, 1] = self.fx, self.fy
        k[0, 2], k[1, 2] = self.cx, self.cy
        return k


def pixel_grid(height: int, width: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Homogeneous pixel coordinates (1, 3, H, W) with rows (x, y, 1); cached."""
    key = (height, width, str(device), dtype)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        ys, xs = torch.meshgrid(
            torch.arange(height, device=device, dtype=dtype),
            torch.arange(width, device=device, dtype=dtype),
            indexing="ij",
        )
        grid = torch.stack([xs, ys, torch.ones_like(xs)], dim=0).unsqueeze(0)
        _GRID_CACHE[key] = grid
    return grid


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[:, 0])
    return torch.stack(
        [
            torch.stack([zero, -v[:, 2], v[:, 1]], dim=-1),
            torch.stack([v[:, 2], zero, -v[:, 0]], dim=-1),
            torch.stack([-v[:, 1], v[:, 0], zero], dim=-1),
        ],
        dim=-2,
    )


def pose_to_matrix(
    axis_angle: torch.Tensor, translation: torch.Tensor, invert: bool = False
) -> torch.Tensor:
    """Axis-angle + translation -> (B, 4, 4) rigid transform, Rodrigues rotation.

    Differentiable everywhere including the zero-rotation limit (Taylor branch
    for small angles). With invert=True returns the inverse transform.
    """
    if axis_angle.dim() == 1:
        axis_angle = axis_angle.unsqueeze(0)
    if translation.dim() == 1:
        translation = translation.unsqueeze(0)
    theta_sq = (axis_angle * axis_angle).sum(dim=-1)
    small = theta_sq < 1e-12
    # replace the small-angle argument so sqrt/sin never see 0/0; `where`
    # then picks the Taylor branch there
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = safe_sq.sqrt()
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    k = _skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    rot = eye + a[:, None, None] * k + b[:, None, None] * (k @ k)
    if invert:
        rot = rot.transpose(-1, -2)
        t = -(rot @ translation.unsqueeze(-1))
    else:
        t = translation.unsqueeze(-1)
    out = torch.zeros(
        axis_angle.shape[0], 4, 4, dtype=axis_angle.dtype, device=axis_angle.device
    )
    out[:, :3, :3] = rot
    out[:, :3, 3:] = t
    out[:, 3, 3] = 1.0
    return out


def matrix_to_pose(transform: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, 4, 4) rigid transform -> (axis_angle, translation), log of Rodrigues.

    Handles the small-angle limit; rotations near pi are recovered from the
    diagonal. Not meant to be differentiated through.
    """
    if transform.dim() == 2:
        transform = transform.unsqueeze(0)
    rot = transform[:, :3, :3]
    trace = rot.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    skew_part = torch.stack(
        [
            rot[:, 2, 1] - rot[:, 1, 2],
            rot[:, 0, 2] - rot[:, 2, 0],
            rot[:, 1, 0] - rot[:, 0, 1],
        ],
        dim=-1,
    )
    sin = torch.sin(theta)
    axis_angle = torch.empty_like(skew_part)
    for i in range(transform.shape[0]):
        th = theta[i]
        if th < 1e-7:
            axis_angle[i] = 0.5 * skew_part[i]
        elif sin[i].abs() > 1e-6:
            axis_angle[i] = skew_part[i] * (th / (2.0 * sin[i]))
        else:
            # theta ~ pi: axis from R = 2 aa^T - I
            diag = rot[i].diagonal()
            axis = ((diag + 1.0) / 2.0).clamp(min=0.0).sqrt()
            # fix signs from off-diagonals relative to the largest component
            j = int(torch.argmax(axis))
            for m in range(3):
                if m != j and rot[i, j, m] + rot[i, m, j] < 0:
                    axis[m] = -axis[m]
            axis_angle[i] = axis / axis.norm() * th
    return axis_angle, transform[:, :3, 3]


def _intr_fields(intr, ref: torch.Tensor):
    """Normalize an Intrinsics or a (B, 4) [fx, fy, cx, cy] tensor to
    broadcastable per-sample fields (image size comes from `ref`)."""
    h, w = ref.shape[-2:]
    if isinstance(intr, Intrinsics):
        if (intr.height, intr.width) != (h, w):
            raise ValueError("intrinsics resolution does not match the images")
        return intr.fx, intr.fy, intr.cx, intr.cy, w, h
    t = torch.as_tensor(intr, device=ref.device, dtype=ref.dtype)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    fx, fy, cx, cy = (t[:, i].view(-1, 1, 1) for i in range(4))
    return fx, fy, cx, cy, w, h


def backproject(depth: torch.Tensor, intr) -> torch.Tensor:
    """Depth (B, 1, H, W) -> camera-frame points (B, 3, H, W) with Z = depth.

    `intr` is an Intrinsics or a per-sample (B, 4) tensor [fx, fy, cx, cy].
    """
    if (depth <= 0).any():
        raise ValueError("backproject requires strictly positive depth")
    b, _, h, w = depth.shape
    fx, fy, cx, cy, _, _ = _intr_fields(intr, depth)
    grid = pixel_grid(h, w, device=depth.device, dtype=depth.dtype)
    x = (grid[:, 0] - cx) / fx
    y = (grid[:, 1] - cy) / fy
    ones = torch.ones(b, h, w, device=depth.device, dtype=depth.dtype)
    dirs = torch.stack([x.expand(b, h, w), y.expand(b, h, w), ones], dim=1)
    return dirs * depth


def transform_points(points: torch.Tensor, transform: torch.Tensor) -> torch.Tensor:
    """Apply (B, 4, 4) rigid transforms to points (B, 3, H, W)."""
    b, _, h, w = points.shape
    flat = points.reshape(b, 3, -1)
    moved = transform[:, :3, :3] @ flat + transform[:, :3, 3:]
    return moved.reshape(b, 3, h, w)


def project(points: torch.Tensor, intr) -> tuple[torch.Tensor, torch.Tensor]:
    """Camera points (B, 3, H, W) -> pixel coords (B, H, W, 2) + bool mask (B, 1, H, W).

    Z is clamped to Z_MIN for the division so outputs stay finite; clamped or
    out-of-frame pixels are masked out.
    """
    fx, fy, cx, cy, w, h = _intr_fields(intr, points)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    z_safe = z.clamp(min=Z_MIN)
    u = fx * x / z_safe + cx
    v = fy * y / z_safe + cy
    # sub-nanopixel slack so exact border pixels survive float roundoff
    eps = 1e-6
    in_bounds = (
        (z > Z_MIN)
        & (u >= -eps)
        & (u <= w - 1.0 + eps)
        & (v >= -eps)
        & (v <= h - 1.0 + eps)
    )
    return torch.stack([u, v], dim=-1), in_bounds.unsqueeze(1)


def bilinear_sample(source: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample source (B, C, H, W) at pixel coords (B, H', W', 2), border-clamped.

    Differentiable w.r.t. both the source values and the coordinates. Callers
    are expected to carry the in_bounds mask produced by `project` alongside.
    Far-out or non-finite coordinates (already masked out by `project`) are
    folded onto the border: the CPU grid_sample backward kernel corrupts
    memory when fed non-finite grid values.
    """
    h, w = source.shape[-2:]
    gx = 2.0 * coords[..., 0] / (w - 1) - 1.0
    gy = 2.0 * coords[..., 1] / (h - 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    grid = torch.nan_to_num(grid, nan=2.0, posinf=2.0, neginf=-2.0).clamp(-2.0, 2.0)
    return F.grid_sample(
        source, grid, mode="bilinear", padding_mode="border", align_corners=True
    )


def inverse_warp(
    source: torch.Tensor,
    depth_target: torch.Tensor,
    axis_angle: torch.Tensor,
    translation: torch.Tensor,
    intr,
    invert_pose: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Synthesize the target view by sampling `source` through depth and pose.

    backproject -> rigid transform -> project -> bilinear sample. Returns the
    warped image and the in_bounds mask; fully differentiable w.r.t. depth and
    the 6 pose parameters.
    """
    if source.shape[-2:] != depth_target.shape[-2:]:
        raise ValueError("source and depth_target must share the same resolution")
    points = backproject(depth_target, intr)
    transform = pose_to_matrix(axis_angle, translation, invert=invert_pose)
    coords, in_bounds = project(transform_points(points, transform), intr)
    return bilinear_sample(source, coords), in_bounds
