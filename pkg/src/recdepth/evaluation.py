"""Depth metric suite: standard error/accuracy metrics with prediction capping,
per-frame median scaling, the temporal-consistency metric (ARTE), accumulated
average RMSE curves, and report/plot emission.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

REPORT_COLUMNS = (
    "mode",
    "pattern",
    "rmse",
    "rmse_log",
    "abs_rel",
    "sq_rel",
    "d1",
    "d2",
    "d3",
    "arte",
)


@dataclass(frozen=True)
class EvalConfig:
    cap_m: float = 80.0  # predictions clamped to this ceiling
    min_eval_depth: float = 1e-3
    median_scaling: bool = True
    arte_epsilon: float = 0.001

    def __post_init__(self):
        if self.cap_m <= self.min_eval_depth:
            raise ValueError("cap_m must exceed min_eval_depth")


@dataclass
class DepthMetrics:
    rmse: float
    rmse_log: float
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "rmse_log": self.rmse_log,
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "d1": self.delta1,
            "d2": self.delta2,
            "d3": self.delta3,
        }


def median_scale(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, float]:
    """Rescale the prediction by median(gt) / median(pred) over valid pixels."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("median_scale needs at least one valid pixel")
    scale = float(np.median(gt[m]) / np.median(pred[m]))
    return pred * scale, scale


def depth_metrics(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, cfg: EvalConfig = EvalConfig()
) -> DepthMetrics:
    """Standard per-frame metrics over masked pixels; predictions are clamped
    to [min_eval_depth, cap_m] before comparison."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("depth_metrics needs at least one valid pixel")
    p = np.clip(np.asarray(pred, dtype=np.float64)[m], cfg.min_eval_depth, cfg.cap_m)
    g = np.asarray(gt, dtype=np.float64)[m]
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean(err**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def arte(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cfg: EvalConfig = EvalConfig(),
) -> float:
    """Absolute Relative Temporal Error over consecutive frame pairs.

    Per pair, the per-pixel term | |dPred| - |dGt| | / (|dGt| + eps) is averaged
    over pixels valid in BOTH frames, then averaged over pairs. Pairs with no
    co-valid pixel are skipped; an error is raised if every pair is skipped.
    """
    if len(preds) < 2:
        raise ValueError("arte needs at least two frames")
    terms = []
    for i in range(1, len(preds)):
        co = np.asarray(masks[i], dtype=bool) & np.asarray(masks[i - 1], dtype=bool)
        if not co.any():
            continue
        dp = np.abs(
            np.asarray(preds[i], dtype=np.float64) - np.asarray(preds[i - 1], dtype=np.float64)
        )
        dg = np.abs(
            np.asarray(gts[i], dtype=np.float64) - np.asarray(gts[i - 1], dtype=np.float64)
        )
        term = np.abs(dp - dg) / (dg + cfg.arte_epsilon)
        terms.append(float(np.mean(term[co])))
    if not terms:
        raise ValueError("no frame pair has co-valid pixels")
    return float(np.mean(terms))


def accumulated_rmse(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
) -> np.ndarray:
    """Running mean of per-frame RMSE: curve[k] = mean(rmse[0..k]).

    Frames without any valid pixel are excluded from the running mean."""
    if len(preds) == 0:
        raise ValueError("accumulated_rmse needs at least one frame")
    per_frame = []
    for p, g, m in zip(preds, gts, masks):
        mb = np.asarray(m, dtype=bool)
        if mb.any():
            err = np.asarray(p, dtype=np.float64)[mb] - np.asarray(g, dtype=np.float64)[mb]
            per_frame.append(np.sqrt(np.mean(err**2)))
        else:
            per_frame.append(np.nan)
    per_frame = np.asarray(per_frame)
    valid = ~np.isnan(per_frame)
    sums = np.cumsum(np.where(valid, per_frame, 0.0))
    counts = np.maximum(np.cumsum(valid), 1)
    return sums / counts


def evaluate_sequence(
    preds: np.ndarray,
    gts: np.ndarray,
    cfg: EvalConfig = EvalConfig(),
    masks: np.ndarray | None = None,
) -> dict:
    """Full-sequence protocol: optional per-frame median scaling, per-frame
    metrics averaged over frames, plus ARTE and the accumulated RMSE curve."""
    if masks is None:
        masks = [g > 0 for g in gts]
    scaled = []
    for p, g, m in zip(preds, gts, masks):
        if cfg.median_scaling:
            p, _ = median_scale(p, g, m)
        scaled.append(np.clip(p, cfg.min_eval_depth, cfg.cap_m))
    frame_metrics = [
        depth_metrics(p, g, m, cfg).as_dict() for p, g, m in zip(scaled, gts, masks)
    ]
    out = {k: float(np.mean([fm[k] for fm in frame_metrics])) for k in frame_metrics[0]}
    if len(scaled) >= 2:
        out["arte"] = arte(scaled, gts, masks, cfg)
    out["accumulated_rmse"] = accumulated_rmse(scaled, gts, masks)
    return out


# ---------------------------------------------------------------------------
# report emission


def emit_report(
    rows: Sequence[dict],
    out_dir,
    curves: dict[str, np.ndarray] | None = None,
    sweep: Sequence[tuple[float, float]] | None = None,
    sweep_label: str = "sparse points",
) -> dict[str, Path]:
    """Write the metric table (fixed, documented columns) and plot images.

    `curves` maps labels to accumulated-RMSE curves; `sweep` holds
    (parameter, rmse) pairs for the sparsity sweep plot. Re-emission
    overwrites deterministically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    table = out_dir / "report.csv"
    with open(table, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in REPORT_COLUMNS:
                val = row.get(col)
                if isinstance(val, float):
                    cells.append(f"{val:.6g}")
                else:
                    cells.append("" if val is None else str(val))
            fh.write(",".join(cells) + "\n")
    paths["table"] = table

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if curves:
        fig, ax = plt.subplots(figsize=(7, 4))
        for label, curve in curves.items():
            ax.plot(np.arange(1, len(curve) + 1), curve, label=label)
        ax.set_xlabel("frame")
        ax.set_ylabel("accumulated average RMSE (m)")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "accumulated_rmse.png"
        fig.savefig(path)
        plt.close(fig)
        paths["curves"] = path

    if sweep:
        xs, ys = zip(*sorted(sweep))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(sweep_label)
        ax.set_ylabel("RMSE (m)")
        fig.tight_layout()
        path = out_dir / "sparsity_sweep.png"
        fig.savefig(path)
        plt.close(fig)
        paths["sweep"] = path

    return paths


def plot_training_log(log_path, out_path) -> Path:
    """Loss curves from the training log CSV."""
    from .training import read_training_log

    rows = [r for r in read_training_log(log_path) if r["kind"] == "train"]
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    iters = [r["iteration"] for r in rows]
    for key in ("total", "view_synthesis", "smoothness", "sparsity", "berhu"):
        vals = [(i, r[key]) for i, r in zip(iters, rows) if r[key] is not None]
        if vals:
            ax.plot([v[0] for v in vals], [v[1] for v in vals], label=key)
    stage_starts = [
        r["iteration"] for prev, r in zip(rows, rows[1:]) if prev["stage"] != r["stage"]
    ]
    for x in stage_starts:
        ax.axvline(x, color="gray", linestyle=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
