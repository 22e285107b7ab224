"""Command-line entry points: dataset synthesis, training, evaluation, and
prediction.

Commands: synth | train | eval | predict. Configuration comes from one YAML
file (--config) with flag overrides (flags win). The RECDEPTH_DATA_ROOT
environment variable overrides the dataset root. Exit codes: 0 success,
1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import evaluation
from .config import RunConfig, load_config, save_config, smoke_profile
from .data import SyntheticScene, load_sequence_index, materialize_dataset
from .errors import ConfigurationError
from .model import load_checkpoint
from .sparsity import SparsePattern, apply_pattern
from .training import infer_sequence, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "RECDEPTH_DATA_ROOT"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the documented contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recdepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--smoke", action="store_true", help="tiny CI-speed profile")

    p_synth = sub.add_parser("synth", help="materialize a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--force", action="store_true", help="overwrite a non-empty target")

    p_train = sub.add_parser("train", help="run stage-1 + stage-2 training")
    common(p_train)
    p_train.add_argument("--mode", choices=("supervised", "self_pred", "self_comp"))
    p_train.add_argument("--pattern", choices=("random", "lines", "full"))
    p_train.add_argument("--points", type=int, help="random-pattern point count")
    p_train.add_argument("--lines", type=int, help="line-pattern line count")
    p_train.add_argument("--resume", help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="full-sequence evaluation of a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--baseline", help="non-recurrent checkpoint to compare against")
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--pattern", choices=("random", "lines", "full"))
    p_eval.add_argument("--points", type=_int_list, help="point count(s); commas sweep")
    p_eval.add_argument("--lines", type=_int_list, help="line count(s); commas sweep")

    p_pred = sub.add_parser("predict", help="write 16-bit depth PNGs for frames")
    common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--frames", required=True, help="directory of RGB frames")
    p_pred.add_argument("--sparse", help="directory of 16-bit sparse depth PNGs")
    p_pred.add_argument("--out", required=True, help="output directory")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.smoke:
        cfg = smoke_profile(cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed)
        )
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=args.mode))
    sparse_over = {}
    if getattr(args, "pattern", None):
        sparse_over["kind"] = args.pattern
    points = getattr(args, "points", None)
    lines = getattr(args, "lines", None)
    if isinstance(points, int):
        sparse_over["count"] = points
    if isinstance(lines, int):
        sparse_over["num_lines"] = lines
    if sparse_over:
        cfg = dataclasses.replace(
            cfg, sparse=dataclasses.replace(cfg.sparse, **sparse_over)
        )
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        cfg = dataclasses.replace(cfg, dataset_root=root)
    return cfg


def cmd_synth(cfg: RunConfig, force: bool = False) -> Path:
    root = Path(cfg.dataset_root)
    h, w = cfg.model.resolution
    scenes: dict[str, list[SyntheticScene]] = {}
    counts = {
        "train": cfg.synth.train_sequences,
        "val": cfg.synth.val_sequences,
        "test": cfg.synth.test_sequences,
    }
    for split_idx, (split, n) in enumerate(counts.items()):
        seeds = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(split_idx,))
        state = seeds.generate_state(max(n, 1))
        scenes[split] = [
            SyntheticScene(
                num_frames=cfg.synth.frames_per_sequence,
                height=h,
                width=w,
                seed=int(state[i]),
                base_distance=cfg.synth.base_distance,
                relief_amplitude=cfg.synth.relief_amplitude,
                max_translation=cfg.synth.max_translation,
                max_rotation=cfg.synth.max_rotation,
            )
            for i in range(n)
        ]
    try:
        materialize_dataset(root, scenes, force=force)
    except FileExistsError as exc:
        raise ConfigurationError(str(exc)) from exc
    total = sum(counts.values()) * cfg.synth.frames_per_sequence
    print(f"wrote {sum(counts.values())} sequences ({total} frames) under {root}")
    return root


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    mode = cfg.train.mode
    index = load_sequence_index(cfg.dataset_root, "train")
    try:
        val_index = load_sequence_index(cfg.dataset_root, "val")
    except FileNotFoundError:
        val_index = None
    model_config = dataclasses.replace(
        cfg.model, use_sparse_input=(mode == "self_comp")
    )
    pattern = cfg.sparse if mode == "self_comp" else None
    out_dir = Path(cfg.output_dir)
    ckpt = train(
        index,
        model_config=model_config,
        train_config=cfg.train,
        loss_weights=cfg.loss,
        pattern=pattern,
        out_dir=out_dir,
        val_index=val_index,
        resume=resume,
        extra_metadata={"config_hash": cfg.config_hash(), "run_config": cfg.to_dict()},
    )
    save_config(cfg, out_dir / "config.yaml")
    evaluation.plot_training_log(out_dir / "training_log.csv", out_dir / "loss_curves.png")
    print(f"checkpoint: {ckpt}")
    return ckpt


def _sequence_arrays(record, pattern: SparsePattern | None):
    images = np.stack([datamod.load_image(p) for p in record.image_paths])
    gts = np.stack(
        [
            datamod.load_depth(p) if p is not None else np.zeros(images.shape[-2:], np.float32)
            for p in record.depth_paths
        ]
    )
    sparse = masks = None
    if pattern is not None:
        key = datamod.sequence_key(record.sequence_id)
        pairs = [apply_pattern(gts[t], pattern, t, key) for t in range(len(gts))]
        sparse = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
    return images, gts, sparse, masks


def _eval_checkpoint(ckpt_path, cfg, index, pattern, label):
    if not Path(ckpt_path).exists():
        raise ConfigurationError(f"checkpoint {ckpt_path} does not exist")
    loaded = load_checkpoint(ckpt_path)
    model = loaded.model
    mode = loaded.metadata.get("mode", "unknown")
    res = tuple(model.config.resolution)
    for rec in index.records:
        if (rec.intrinsics.height, rec.intrinsics.width) != res:
            raise ConfigurationError(
                f"dataset resolution {(rec.intrinsics.height, rec.intrinsics.width)} "
                f"does not match the checkpoint resolution {res}"
            )
    use_sparse = model.config.use_sparse_input
    eval_cfg = dataclasses.replace(
        cfg.eval, median_scaling=cfg.eval.median_scaling and mode != "self_comp"
    )
    per_seq = []
    curves = {}
    for rec in index.records:
        images, gts, sparse, masks = _sequence_arrays(rec, pattern if use_sparse else None)
        preds = infer_sequence(model, images, sparse, masks)
        result = evaluation.evaluate_sequence(preds, gts, eval_cfg)
        curves[f"{label}:{rec.sequence_id}"] = result.pop("accumulated_rmse")
        per_seq.append(result)
    row = {k: float(np.mean([r[k] for r in per_seq])) for k in per_seq[0]}
    row["mode"] = f"{mode}:{label}" if label else mode
    row["pattern"] = _pattern_label(pattern) if use_sparse else ""
    return row, curves


def _pattern_label(pattern: SparsePattern | None) -> str:
    if pattern is None:
        return ""
    if pattern.kind == "random":
        return f"random:{pattern.count}"
    if pattern.kind == "lines":
        return f"lines:{pattern.num_lines}"
    return "full"


def cmd_eval(cfg: RunConfig, args) -> Path:
    index = load_sequence_index(cfg.dataset_root, args.split)
    if not index.records:
        raise ConfigurationError(f"split {args.split!r} is empty")

    sweep_values: list[SparsePattern] = []
    points = args.points if isinstance(args.points, list) else None
    lines = args.lines if isinstance(args.lines, list) else None
    if points and len(points) > 0:
        sweep_values = [
            dataclasses.replace(cfg.sparse, kind="random", count=c) for c in points
        ]
    elif lines and len(lines) > 0:
        sweep_values = [
            dataclasses.replace(cfg.sparse, kind="lines", num_lines=n) for n in lines
        ]
    else:
        sweep_values = [cfg.sparse]

    rows, all_curves, sweep_points = [], {}, []
    for pattern in sweep_values:
        row, curves = _eval_checkpoint(args.checkpoint, cfg, index, pattern, "recurrent")
        rows.append(row)
        all_curves.update(curves)
        if row["pattern"].startswith("random:"):
            sweep_points.append((pattern.count, row["rmse"]))
        elif row["pattern"].startswith("lines:"):
            sweep_points.append((pattern.num_lines, row["rmse"]))
        if args.baseline:
            brow, bcurves = _eval_checkpoint(
                args.baseline, cfg, index, pattern, "image-based"
            )
            rows.append(brow)
            all_curves.update(bcurves)
    out_dir = Path(cfg.output_dir) / "eval"
    paths = evaluation.emit_report(
        rows,
        out_dir,
        curves=all_curves,
        sweep=sweep_points if len(sweep_points) > 1 else None,
    )
    print(f"report: {paths['table']}")
    return paths["table"]


def cmd_predict(cfg: RunConfig, args) -> Path:
    if not Path(args.checkpoint).exists():
        raise ConfigurationError(f"checkpoint {args.checkpoint} does not exist")
    loaded = load_checkpoint(args.checkpoint)
    model = loaded.model
    frames_dir = Path(args.frames)
    frame_paths = sorted(frames_dir.glob("*.png"))
    if not frame_paths:
        raise ConfigurationError(f"no PNG frames found in {frames_dir}")
    images = np.stack([datamod.load_image(p) for p in frame_paths])
    sparse = masks = None
    if args.sparse:
        sparse_dir = Path(args.sparse)
        sparse_list = []
        for p in frame_paths:
            sp = sparse_dir / p.name
            if not sp.exists():
                raise ConfigurationError(f"missing sparse depth for frame {p.name}")
            sparse_list.append(datamod.load_depth(sp))
        sparse = np.stack(sparse_list)
        masks = (sparse > 0).astype(np.float32)
    elif model.config.use_sparse_input:
        raise ConfigurationError("this checkpoint expects --sparse inputs")
    preds = infer_sequence(model, images, sparse, masks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, depth in zip(frame_paths, preds):
        datamod.save_depth_png(out_dir / p.name, depth)
    print(f"wrote {len(frame_paths)} depth maps to {out_dir}")
    return out_dir


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_run_config(args)
        if args.command == "synth":
            cmd_synth(cfg, force=args.force)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args)
        elif args.command == "predict":
            cmd_predict(cfg, args)
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
