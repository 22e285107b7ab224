"""Training objectives: berHu regression, SSIM+L1 view synthesis with per-pixel
minimum over source frames, auto-masking, edge-aware smoothness, and the
combined per-mode objectives with the ramped sparsity weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .geometry import Intrinsics, inverse_warp
from .model import disp_to_depth

MODES = ("supervised", "self_pred", "self_comp")

# additive surrogate pushing out-of-bounds pixels out of the per-pixel minimum;
# such pixels are also excluded from the reduction
OOB_SURROGATE = 1e6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85  # SSIM share of the photometric term
    nu: float = 1e-3  # smoothness weight
    lambda_max: float = 1e-2  # sparsity weight ceiling
    lambda_ramp: float = 1000.0  # iterations until the ceiling is reached

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.nu < 0 or self.lambda_max < 0:
            raise ValueError("nu and lambda_max must be nonnegative")
        if self.lambda_ramp <= 0:
            raise ValueError("lambda_ramp must be positive")


def lambda_schedule(
    iteration: int, lambda_max: float = 1e-2, lambda_ramp: float = 1000.0
) -> float:
    """Sparsity weight ramp: lambda_max * min(1, iteration / lambda_ramp)."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return lambda_max * min(1.0, iteration / lambda_ramp)


def berhu(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Reverse-Huber loss over valid pixels, threshold 0.2 * max masked residual.

    L1 below the threshold, (r^2 + delta^2) / (2 delta) above; the threshold
    stays inside the autograd graph. Returns 0 when no pixel is valid.
    """
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    valid = mask.to(pred.dtype)
    count = valid.sum()
    if count.item() == 0:
        return pred.new_zeros(())
    resid = (pred - gt).abs() * valid
    delta = 0.2 * resid.max()
    if delta.item() == 0.0:
        return pred.new_zeros(())
    quad = (resid * resid + delta * delta) / (2.0 * delta)
    per_pixel = torch.where(resid <= delta, resid, quad)
    return (per_pixel * valid).sum() / count


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM map with 3x3 mean filtering and reflective padding.

    Same shape as the inputs (per channel); values lie in [-1, 1].
    """
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    c1, c2 = 0.01**2, 0.03**2

    def local_mean(t):
        return F.avg_pool2d(F.pad(t, (1, 1, 1, 1), mode="reflect"), 3, 1)

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def photometric(
    target: torch.Tensor, warped: torch.Tensor, alpha: float = 0.85
) -> torch.Tensor:
    """Per-pixel view-synthesis loss map (B, 1, H, W): SSIM and L1 mix.

    (alpha / 2) * (1 - SSIM) + (1 - alpha) * L1, both reduced over channels.
    Out-of-bounds pixels are excluded later, at reduction time.
    """
    l1 = (target - warped).abs().mean(dim=1, keepdim=True)
    sim = ssim(target, warped).mean(dim=1, keepdim=True)
    return alpha / 2.0 * (1.0 - sim) + (1.0 - alpha) * l1


def min_reprojection(loss_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Element-wise minimum over per-source photometric loss maps."""
    if len(loss_maps) == 0:
        raise ValueError("min_reprojection needs at least one loss map")
    if len(loss_maps) == 1:
        return loss_maps[0]
    return torch.stack(tuple(loss_maps), dim=0).min(dim=0).values


def auto_mask(
    warped_losses: torch.Tensor, identity_losses: torch.Tensor
) -> torch.Tensor:
    """mu = 1 where warping explains the pixel strictly better than not warping."""
    if warped_losses.shape != identity_losses.shape:
        raise ValueError("auto_mask inputs must share a shape")
    return (warped_losses < identity_losses).to(warped_losses.dtype)


def smoothness(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of the mean-normalized disparity.

    Forward differences; image gradients averaged over channels gate the
    penalty. Invariant to positive global scaling of the disparity.
    """
    mean = disp.mean(dim=(1, 2, 3), keepdim=True)
    if (mean <= 0).any():
        raise ValueError("smoothness requires a positive disparity mean")
    norm = disp / mean
    grad_dx = (norm[..., :, 1:] - norm[..., :, :-1]).abs()
    grad_dy = (norm[..., 1:, :] - norm[..., :-1, :]).abs()
    img_dx = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=1, keepdim=True)
    img_dy = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=1, keepdim=True)
    return (grad_dx * torch.exp(-img_dx)).mean() + (grad_dy * torch.exp(-img_dy)).mean()


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count.item() == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / count


def _scale_stride(full_hw, disp_hw) -> int:
    stride = round(math.log2(full_hw[0] / disp_hw[0]))
    return max(stride, 0)


def total_loss(
    mode: str,
    disps: Sequence[torch.Tensor],
    *,
    weights: LossWeights | None = None,
    iteration: int = 0,
    min_depth: float = 0.1,
    max_depth: float = 100.0,
    target: torch.Tensor | None = None,
    sources: Sequence[torch.Tensor] = (),
    poses: Sequence[tuple[torch.Tensor, torch.Tensor, bool]] = (),
    intrinsics: Intrinsics | None = None,
    gt_depth: torch.Tensor | None = None,
    gt_mask: torch.Tensor | None = None,
    sparse_depth: torch.Tensor | None = None,
    sparse_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combined objective for one frame, averaged over decoder scales.

    supervised: berHu against ground truth.
    self_pred:  auto-masked mean of the per-pixel minimum reprojection over the
                available source frames + nu-weighted smoothness per scale.
    self_comp:  self_pred plus lambda(iteration) * berHu on the sparse input.

    `poses` holds one (axis_angle, translation, invert) triple per source,
    mapping target-camera to source-camera coordinates when composed with the
    invert flag. Each scale's disparity is upsampled to full resolution before
    any loss; smoothness is divided by 2^scale. Returns the scalar loss and a
    float breakdown whose components sum to the total.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if len(disps) == 0:
        raise ValueError("total_loss needs at least one disparity scale")
    weights = weights or LossWeights()

    if mode == "supervised":
        if gt_depth is None or gt_mask is None:
            raise ValueError("supervised mode requires gt_depth and gt_mask")
        full_hw = gt_depth.shape[-2:]
    else:
        if target is None or len(sources) == 0 or intrinsics is None:
            raise ValueError(f"{mode} mode requires target, sources, and intrinsics")
        if len(sources) != len(poses):
            raise ValueError("one pose per source frame is required")
        full_hw = target.shape[-2:]
    if mode == "self_comp" and (sparse_depth is None or sparse_mask is None):
        raise ValueError("self_comp mode requires sparse_depth and sparse_mask")

    if mode == "supervised":
        sup_terms = []
        for disp in disps:
            up = F.interpolate(disp, size=full_hw, mode="bilinear", align_corners=False)
            depth = disp_to_depth(up, min_depth, max_depth)
            sup_terms.append(berhu(depth, gt_depth, gt_mask))
        total = torch.stack(sup_terms).mean()
        return total, {"berhu": total.item(), "total": total.item()}

    identity_min = min_reprojection(
        [photometric(target, src, weights.alpha) for src in sources]
    )

    lam = (
        lambda_schedule(iteration, weights.lambda_max, weights.lambda_ramp)
        if mode == "self_comp"
        else 0.0
    )

    vs_terms, smooth_terms, sparse_terms = [], [], []
    for disp in disps:
        stride = _scale_stride(full_hw, disp.shape[-2:])
        up = F.interpolate(disp, size=full_hw, mode="bilinear", align_corners=False)
        depth = disp_to_depth(up, min_depth, max_depth)

        maps = []
        any_in_bounds = None
        for src, (axis_angle, translation, invert) in zip(sources, poses):
            warped, in_bounds = inverse_warp(
                src, depth, axis_angle, translation, intrinsics, invert_pose=invert
            )
            pm = photometric(target, warped, weights.alpha)
            oob = 1.0 - in_bounds.to(pm.dtype)
            maps.append(pm + oob * OOB_SURROGATE)
            any_in_bounds = in_bounds if any_in_bounds is None else any_in_bounds | in_bounds
        warped_min = min_reprojection(maps)
        mu = auto_mask(warped_min, identity_min)
        vs_terms.append(_masked_mean(warped_min, mu * any_in_bounds.to(mu.dtype)))

        smooth_terms.append(smoothness(up, target) * (weights.nu / 2.0**stride))
        if mode == "self_comp":
            sparse_terms.append(lam * berhu(depth, sparse_depth, sparse_mask))

    vs_total = torch.stack(vs_terms).mean()
    smooth_total = torch.stack(smooth_terms).mean()
    total = vs_total + smooth_total
    breakdown = {
        "view_synthesis": vs_total.item(),
        "smoothness": smooth_total.item(),
    }
    if mode == "self_comp":
        sparse_total = torch.stack(sparse_terms).mean()
        total = total + sparse_total
        breakdown["sparsity"] = sparse_total.item()
    breakdown["total"] = total.item()
    return total, breakdown
