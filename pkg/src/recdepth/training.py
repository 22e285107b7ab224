"""Two-stage ConvLSTM training: stage 1 learns the initial hidden state on
randomized frame triplets, stage 2 finetunes on sub-sequences with truncated
backpropagation through time (window 1, per-frame weight updates), for all
three regimes. Also full-sequence recurrent inference.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import evaluation
from .data import (
    DatasetIndex,
    SequenceRecord,
    Subsequence,
    color_jitter,
    load_depth,
    load_image,
    sequence_key,
    split_subsequences,
)
from .errors import ConfigurationError
from .losses import MODES, LossWeights, lambda_schedule, total_loss
from .model import (
    ModelConfig,
    PoseNetwork,
    RecurrentDepthModel,
    disp_to_depth,
    load_checkpoint,
    save_checkpoint,
)
from .sparsity import SparsePattern, apply_pattern

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "self_pred"
    batch_size: int = 12
    learning_rate: float = 1e-4
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    subseq_length: int = 30
    seed: int = 0
    augment: bool = True
    grad_clip: float = 10.0  # global-norm safety net for the recurrent training

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.subseq_length < 3:
            raise ValueError("subseq_length must be at least 3 (needs t-1, t, t+1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


LOG_COLUMNS = (
    "iteration",
    "epoch",
    "stage",
    "kind",
    "total",
    "view_synthesis",
    "smoothness",
    "sparsity",
    "berhu",
    "lambda_weight",
    "abs_rel",
)


class TrainingLog:
    """Append-only delimited log of per-iteration losses and validation rows."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = self.path.exists()
        self._fh = open(self.path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not (append and exists):
            self._writer.writerow(LOG_COLUMNS)
            self._fh.flush()

    def row(
        self,
        iteration: int,
        epoch: int,
        stage: str,
        kind: str = "train",
        components: dict | None = None,
        lambda_weight: float = 0.0,
        abs_rel: float | None = None,
    ):
        comp = components or {}
        fmt = lambda v: "" if v is None else f"{v:.8g}"
        self._writer.writerow(
            [
                iteration,
                epoch,
                stage,
                kind,
                fmt(comp.get("total")),
                fmt(comp.get("view_synthesis")),
                fmt(comp.get("smoothness")),
                fmt(comp.get("sparsity")),
                fmt(comp.get("berhu")),
                fmt(lambda_weight),
                fmt(abs_rel),
            ]
        )
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_training_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for key in LOG_COLUMNS:
                if key in ("stage", "kind"):
                    continue
                row[key] = float(row[key]) if row[key] not in ("", None) else None
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class FrameBatch:
    images: torch.Tensor  # (B, T, 3, H, W)
    intrinsics: torch.Tensor  # (B, 4) fx fy cx cy
    gt_depth: torch.Tensor | None = None  # (B, T, 1, H, W)
    gt_mask: torch.Tensor | None = None
    sparse_depth: torch.Tensor | None = None
    sparse_mask: torch.Tensor | None = None


def _check_modalities(mode: str, index: DatasetIndex, pattern: SparsePattern | None):
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode in ("supervised", "self_comp"):
        for rec in index.records:
            if any(p is None for p in rec.depth_paths):
                raise ConfigurationError(
                    f"mode {mode} requires ground-truth depth, but sequence "
                    f"{rec.sequence_id} has frames without it"
                )
    if mode == "self_comp" and pattern is None:
        raise ConfigurationError("mode self_comp requires a sparse pattern")


def _load_window(
    rec: SequenceRecord,
    start: int,
    length: int,
    mode: str,
    pattern: SparsePattern | None,
    jitter_rng: np.random.Generator | None,
) -> dict:
    images = np.stack([load_image(rec.image_paths[i]) for i in range(start, start + length)])
    if jitter_rng is not None:
        images = color_jitter(images, jitter_rng)
    out = {"images": images, "intrinsics": np.array(
        [rec.intrinsics.fx, rec.intrinsics.fy, rec.intrinsics.cx, rec.intrinsics.cy],
        dtype=np.float32,
    )}
    if mode != "self_pred":
        gt = np.stack([load_depth(rec.depth_paths[i]) for i in range(start, start + length)])
        out["gt_depth"] = gt[:, None]
        out["gt_mask"] = (gt[:, None] > 0).astype(np.float32)
    if mode == "self_comp":
        key = sequence_key(rec.sequence_id)
        sp, sm = zip(
            *(
                apply_pattern(out["gt_depth"][i, 0], pattern, start + i, key)
                for i in range(length)
            )
        )
        out["sparse_depth"] = np.stack(sp)[:, None]
        out["sparse_mask"] = np.stack(sm)[:, None]
    return out


def _collate(samples: Sequence[dict]) -> FrameBatch:
    def stack(key):
        if key not in samples[0]:
            return None
        return torch.from_numpy(np.stack([s[key] for s in samples]))

    return FrameBatch(
        images=stack("images"),
        intrinsics=stack("intrinsics"),
        gt_depth=stack("gt_depth"),
        gt_mask=stack("gt_mask"),
        sparse_depth=stack("sparse_depth"),
        sparse_mask=stack("sparse_mask"),
    )


def _frame_inputs(batch: FrameBatch, t: int, mode: str):
    sparse = batch.sparse_depth[:, t] if mode == "self_comp" else None
    smask = batch.sparse_mask[:, t] if mode == "self_comp" else None
    return batch.images[:, t], sparse, smask


def _frame_loss(
    mode: str,
    disps,
    batch: FrameBatch,
    t: int,
    pose_net: PoseNetwork | None,
    weights: LossWeights,
    iteration: int,
    model_cfg: ModelConfig,
):
    """Mode-specific objective for window position t; the min-reprojection uses
    whichever of t-1 / t+1 exists inside the window."""
    if mode == "supervised":
        return total_loss(
            "supervised",
            disps,
            gt_depth=batch.gt_depth[:, t],
            gt_mask=batch.gt_mask[:, t],
            min_depth=model_cfg.min_depth,
            max_depth=model_cfg.max_depth,
            weights=weights,
        )
    n_frames = batch.images.shape[1]
    sources, poses = [], []
    if t > 0:
        aa, tr = pose_net(batch.images[:, t - 1], batch.images[:, t])
        sources.append(batch.images[:, t - 1])
        poses.append((aa, tr, True))
    if t < n_frames - 1:
        aa, tr = pose_net(batch.images[:, t], batch.images[:, t + 1])
        sources.append(batch.images[:, t + 1])
        poses.append((aa, tr, False))
    kwargs = {}
    if mode == "self_comp":
        kwargs = {
            "sparse_depth": batch.sparse_depth[:, t],
            "sparse_mask": batch.sparse_mask[:, t],
        }
    return total_loss(
        mode,
        disps,
        target=batch.images[:, t],
        sources=sources,
        poses=poses,
        intrinsics=batch.intrinsics,
        weights=weights,
        iteration=iteration,
        min_depth=model_cfg.min_depth,
        max_depth=model_cfg.max_depth,
        **kwargs,
    )


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stage, epoch))
    )


def _trainable(model, pose_net, include_init: bool):
    frozen = () if include_init else ("init_h", "init_c")
    params = [p for n, p in model.named_parameters() if n not in frozen]
    if pose_net is not None:
        params += list(pose_net.parameters())
    return params


def _optim_step(params, opt, loss, grad_clip) -> bool:
    """One clipped update; skipped entirely when the loss or the global
    gradient norm is non-finite (a transient recurrent-state spike must not
    poison every parameter through the shared clipping factor)."""
    if not torch.isfinite(loss):
        log.warning("skipping optimizer step: non-finite loss")
        return False
    opt.zero_grad()
    loss.backward()
    total = torch.nn.utils.clip_grad_norm_(params, grad_clip if grad_clip > 0 else 1e12)
    if not torch.isfinite(total):
        log.warning("skipping optimizer step: non-finite gradient norm")
        opt.zero_grad()
        return False
    opt.step()
    return True


# ---------------------------------------------------------------------------
# stage 1: learn the initial hidden state on randomized triplets


def stage1_train(
    model: RecurrentDepthModel,
    pose_net: PoseNetwork | None,
    index: DatasetIndex,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    pattern: SparsePattern | None = None,
    train_log: TrainingLog | None = None,
    *,
    start_iteration: int = 0,
    epoch_offset: int = 0,
    epochs: int | None = None,
    epoch_end: Callable[[int, int], None] | None = None,
) -> int:
    """Fully randomized batches of frame triplets (t-1, t, t+1); a single
    recurrent step on frame t starting from the learnable initial state, which
    receives gradients along with all weights. Returns the global iteration."""
    weights = weights or LossWeights()
    _check_modalities(cfg.mode, index, pattern)
    model.train()
    if pose_net is not None:
        pose_net.train()
    params = _trainable(model, pose_net, include_init=True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    triplets = [
        (rec, t) for rec in index.records if len(rec) >= 3 for t in range(1, len(rec) - 1)
    ]
    if not triplets:
        raise ConfigurationError("no sequence long enough for frame triplets")
    iteration = start_iteration
    n_epochs = cfg.stage1_epochs if epochs is None else epochs
    for epoch in range(epoch_offset, epoch_offset + n_epochs):
        rng = _epoch_rng(cfg.seed, 1, epoch)
        order = rng.permutation(len(triplets))
        for lo in range(0, len(order), cfg.batch_size):
            chosen = [triplets[i] for i in order[lo : lo + cfg.batch_size]]
            samples = [
                _load_window(rec, t - 1, 3, cfg.mode, pattern, rng if cfg.augment else None)
                for rec, t in chosen
            ]
            batch = _collate(samples)
            state = model.initial_state(batch.images.shape[0])
            image, sparse, smask = _frame_inputs(batch, 1, cfg.mode)
            disps, _ = model.step(model.encode(image, sparse, smask), state)
            try:
                loss, comps = _frame_loss(
                    cfg.mode, disps, batch, 1, pose_net, weights, iteration, model.config
                )
            except ValueError as exc:
                log.warning("skipping degenerate batch: %s", exc)
                iteration += 1
                continue
            _optim_step(params, opt, loss, cfg.grad_clip)
            if train_log is not None:
                lam = lambda_schedule(iteration, weights.lambda_max, weights.lambda_ramp)
                train_log.row(iteration, epoch, "stage1", components=comps, lambda_weight=lam)
            iteration += 1
        if epoch_end is not None:
            epoch_end(epoch, iteration)
    return iteration


# ---------------------------------------------------------------------------
# stage 2: sequence finetuning with TBPTT window 1


@dataclass
class Stage2Frame:
    """Probe payload handed to `frame_hook` before the backward pass."""

    iteration: int
    frame: int
    loss: torch.Tensor
    state: tuple  # this frame's pre-detach (H, C)
    prev_state: tuple | None  # previous frame's pre-detach (H, C)


def stage2_train(
    model: RecurrentDepthModel,
    pose_net: PoseNetwork | None,
    index: DatasetIndex,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    pattern: SparsePattern | None = None,
    train_log: TrainingLog | None = None,
    *,
    start_iteration: int = 0,
    epoch_offset: int = 0,
    epochs: int | None = None,
    epoch_end: Callable[[int, int], None] | None = None,
    frame_hook: Callable[[Stage2Frame], None] | None = None,
) -> int:
    """B random sub-sequences advance in lockstep; every frame gets a forward
    pass, a loss, and a weight update, then the hidden state is detached from
    the graph and carried to the next frame. The learned initial state is
    frozen and loaded at frame 1 of every sub-sequence."""
    weights = weights or LossWeights()
    _check_modalities(cfg.mode, index, pattern)
    model.train()
    if pose_net is not None:
        pose_net.train()
    params = _trainable(model, pose_net, include_init=False)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    for rec in index.records:
        if len(rec) < 3:
            log.warning(
                "sequence %s is shorter than 3 frames and will be skipped",
                rec.sequence_id,
            )
    iteration = start_iteration
    n_epochs = cfg.stage2_epochs if epochs is None else epochs
    for epoch in range(epoch_offset, epoch_offset + n_epochs):
        rng = _epoch_rng(cfg.seed, 2, epoch)
        subseqs = split_subsequences(index, cfg.subseq_length, int(rng.integers(2**31)))
        by_length: dict[int, list[Subsequence]] = {}
        for ss in subseqs:
            by_length.setdefault(ss.length, []).append(ss)
        batches = []
        for length in sorted(by_length):
            items = by_length[length]
            batches += [items[i : i + cfg.batch_size] for i in range(0, len(items), cfg.batch_size)]
        rng.shuffle(batches)
        for group in batches:
            samples = [
                _load_window(
                    ss.record, ss.start, ss.length, cfg.mode, pattern,
                    rng if cfg.augment else None,
                )
                for ss in group
            ]
            batch = _collate(samples)
            n_frames = batch.images.shape[1]
            state = tuple(s.detach() for s in model.initial_state(batch.images.shape[0]))
            prev_probe = None
            for t in range(n_frames):
                image, sparse, smask = _frame_inputs(batch, t, cfg.mode)
                disps, new_state = model.step(model.encode(image, sparse, smask), state)
                try:
                    loss, comps = _frame_loss(
                        cfg.mode, disps, batch, t, pose_net, weights, iteration, model.config
                    )
                except ValueError as exc:
                    log.warning("skipping degenerate frame and resetting state: %s", exc)
                    state = tuple(s.detach() for s in model.initial_state(len(group)))
                    iteration += 1
                    continue
                if frame_hook is not None:
                    frame_hook(
                        Stage2Frame(
                            iteration=iteration,
                            frame=t,
                            loss=loss,
                            state=new_state,
                            prev_state=prev_probe,
                        )
                    )
                    prev_probe = new_state
                _optim_step(params, opt, loss, cfg.grad_clip)
                state = tuple(s.detach() for s in new_state)
                if not all(torch.isfinite(s).all() for s in state):
                    log.warning("resetting non-finite hidden state mid-window")
                    state = tuple(s.detach() for s in model.initial_state(len(group)))
                if train_log is not None:
                    lam = lambda_schedule(iteration, weights.lambda_max, weights.lambda_ramp)
                    train_log.row(
                        iteration, epoch, "stage2", components=comps, lambda_weight=lam
                    )
                iteration += 1
        if epoch_end is not None:
            epoch_end(epoch, iteration)
    return iteration


# ---------------------------------------------------------------------------
# orchestration


def build_models(
    model_config: ModelConfig, mode: str
) -> tuple[RecurrentDepthModel, PoseNetwork | None]:
    """Networks for a regime; supervised mode never constructs a pose network."""
    if mode == "self_comp" and not model_config.use_sparse_input:
        raise ConfigurationError("self_comp requires a model with use_sparse_input")
    model = RecurrentDepthModel(model_config)
    pose_net = None
    if mode in ("self_pred", "self_comp"):
        pose_net = PoseNetwork(model_config.bottleneck_channels, model_config.encoder_layers)
    return model, pose_net


def train(
    index: DatasetIndex,
    *,
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_weights: LossWeights | None = None,
    pattern: SparsePattern | None = None,
    out_dir,
    val_index: DatasetIndex | None = None,
    resume=None,
    extra_metadata: dict | None = None,
) -> Path:
    """Stage 1 then stage 2, with per-epoch checkpoints and an append-only
    training log; returns the checkpoint path. `resume` continues epoch and
    global-iteration counters from an earlier checkpoint (the lambda schedule
    keeps ramping where it left off)."""
    weights = loss_weights or LossWeights()
    mode = train_config.mode
    _check_modalities(mode, index, pattern)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"

    torch.manual_seed(train_config.seed)
    if resume is not None:
        loaded = load_checkpoint(resume)
        model, pose_net = loaded.model, loaded.pose_net
        meta = dict(loaded.metadata)
        if meta.get("mode") != mode:
            raise ConfigurationError(
                f"checkpoint was trained in mode {meta.get('mode')!r}, not {mode!r}"
            )
        iteration = int(meta["global_iteration"])
        stage1_done = int(meta["stage1_epochs_done"])
        stage2_done = int(meta["stage2_epochs_done"])
    else:
        model, pose_net = build_models(model_config, mode)
        iteration = 0
        stage1_done = stage2_done = 0
    meta = {
        "mode": mode,
        "train_config": asdict(train_config),
        "loss_weights": asdict(weights),
        "pattern": asdict(pattern) if pattern is not None else None,
        "global_iteration": iteration,
        "stage1_epochs_done": stage1_done,
        "stage2_epochs_done": stage2_done,
        **(extra_metadata or {}),
    }

    def save(stage_key: str, epoch: int, it: int):
        meta[stage_key] = epoch + 1
        meta["global_iteration"] = it
        save_checkpoint(ckpt_path, model, pose_net, metadata=meta)

    with TrainingLog(out_dir / "training_log.csv", append=resume is not None) as tlog:

        def validate(epoch: int, it: int, stage: str):
            if val_index is None or not val_index.records:
                return
            metrics = validation_metrics(model, val_index, pattern, mode, model.config)
            tlog.row(it, epoch, stage, kind="val", abs_rel=metrics["abs_rel"])

        remaining1 = train_config.stage1_epochs - stage1_done
        if remaining1 > 0:
            iteration = stage1_train(
                model, pose_net, index, train_config, weights, pattern, tlog,
                start_iteration=iteration,
                epoch_offset=stage1_done,
                epochs=remaining1,
                epoch_end=lambda e, it: (save("stage1_epochs_done", e, it), validate(e, it, "stage1")),
            )
        remaining2 = train_config.stage2_epochs - stage2_done
        if remaining2 > 0:
            iteration = stage2_train(
                model, pose_net, index, train_config, weights, pattern, tlog,
                start_iteration=iteration,
                epoch_offset=stage2_done,
                epochs=remaining2,
                epoch_end=lambda e, it: (save("stage2_epochs_done", e, it), validate(e, it, "stage2")),
            )
    if not ckpt_path.exists():
        save_checkpoint(ckpt_path, model, pose_net, metadata=meta)
    return ckpt_path


@torch.no_grad()
def infer_sequence(
    model: RecurrentDepthModel,
    images,
    sparse_depth=None,
    sparse_mask=None,
) -> np.ndarray:
    """Recurrent inference over a whole sequence of any length: the hidden
    state starts from the learned initial state and is carried across all
    frames. images (T, 3, H, W) -> depth (T, H, W) float32 at full resolution."""
    was_training = model.training
    model.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n_frames = images.shape[0]
    state = model.initial_state(1)
    depths = []
    for t in range(n_frames):
        sp = sm = None
        if sparse_depth is not None:
            sp = torch.as_tensor(np.asarray(sparse_depth[t]), dtype=torch.float32).view(
                1, 1, *images.shape[-2:]
            )
            if sparse_mask is not None:
                sm = torch.as_tensor(np.asarray(sparse_mask[t]), dtype=torch.float32).view_as(sp)
        feats = model.encode(images[t : t + 1], sp, sm)
        disps, state = model.step(feats, state)
        depth = disp_to_depth(disps[-1], model.config.min_depth, model.config.max_depth)
        depths.append(depth[0, 0].numpy())
    if was_training:
        model.train()
    return np.stack(depths)


def validation_metrics(
    model: RecurrentDepthModel,
    index: DatasetIndex,
    pattern: SparsePattern | None,
    mode: str,
    model_config: ModelConfig,
    max_frames: int = 30,
) -> dict:
    """Cheap held-out check: mean abs_rel over the first frames of the first
    validation sequence (median-scaled except for scale-aware completion)."""
    rec = index.records[0]
    n = min(max_frames, len(rec))
    images = np.stack([load_image(p) for p in rec.image_paths[:n]])
    gts = np.stack([load_depth(p) for p in rec.depth_paths[:n]])
    sparse = masks = None
    if mode == "self_comp":
        key = sequence_key(rec.sequence_id)
        pairs = [apply_pattern(gts[t], pattern, t, key) for t in range(n)]
        sparse = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
    preds = infer_sequence(model, images, sparse, masks)
    cfg = evaluation.EvalConfig(median_scaling=(mode != "self_comp"))
    rows = evaluation.evaluate_sequence(preds, gts, cfg)
    return {"abs_rel": rows["abs_rel"]}
