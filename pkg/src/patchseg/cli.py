"""Command-line entry point: dataset generation, training, inference,
evaluation, cross-validation, ablation grids, saliency, and overlays."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import CtStack, load_scores, load_stack, save_scores, split_folds
from .harness import (
    GRID_BUILDERS,
    grid_from_json,
    render_overlay,
    run_cell,
    run_grid,
    saliency,
    select_component,
)
from .harness import ExperimentCell
from .inference import fullconv_infer, sliding_infer, summarize
from .metrics import cross_validate, evaluate
from .model import LossConfig, load_checkpoint
from .sampler import BatchSpec, TrainingSet
from .synthdata import PhantomParams, generate_dataset
from .trainer import TrainConfig, train


def _write_run_json(out_dir: Path, command: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()}
    echo.pop("func", None)
    provenance = {
        "command": command,
        "config": echo,
        "versions": {
            "patchseg": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": sys.version.split()[0],
        },
    }
    (out_dir / "run.json").write_text(json.dumps(provenance, indent=2))


def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise SystemExit(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def _load_corpus(data_dir: Path, ids=None):
    manifest = _load_manifest(data_dir)
    labels = {e["stack_id"]: e["label"] for e in manifest["stacks"]}
    wanted = list(ids) if ids else list(labels)
    stacks = [load_stack(data_dir / sid) for sid in wanted]
    return stacks, labels


def cmd_synth(args):
    params = PhantomParams(
        height=args.height,
        width=args.height,
        positive_rate=args.positive_rate,
        seed=args.seed,
    )
    out = Path(args.out)
    manifest = generate_dataset(params, args.n_stacks, out)
    _write_run_json(out, "synth", args)
    print(f"wrote {len(manifest['stacks'])} stacks to {out}")


def cmd_train(args):
    data_dir = Path(args.data)
    ids = Path(args.ids).read_text().split() if args.ids else None
    stacks, _ = _load_corpus(data_dir, ids)
    cfg = TrainConfig(
        spec=BatchSpec(args.crop, args.images_per_batch, args.patches_per_image),
        total_steps=args.steps,
        lr0=args.lr,
        loss=LossConfig(alpha=args.alpha),
        seed=args.seed,
        width_preset=args.width,
        checkpoint_every=args.checkpoint_every,
    )
    out = Path(args.out)
    _write_run_json(out, "train", args)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    _, records = train(TrainingSet(stacks), cfg, out)
    print(f"trained {args.steps} steps; final loss {records[-1]['loss']:.4f}")
    print(f"checkpoint: {out / 'ckpt_final'}")


def cmd_infer(args):
    data_dir = Path(args.data)
    ids = Path(args.ids).read_text().split() if args.ids else None
    stacks, _ = _load_corpus(data_dir, ids)
    models = [load_checkpoint(p) for p in args.ckpt]
    out = Path(args.out)
    _write_run_json(out, "infer", args)
    for stack in stacks:
        if args.mode == "sliding":
            vol = sliding_infer(stack, models, args.crop, args.beta)
        else:
            vol = fullconv_infer(stack, models)
        stack_dir = out / stack.stack_id
        save_scores(vol, stack_dir)
        summary = summarize(vol, args.p).to_dict()
        summary.update(
            {"beta": args.beta, "crop_size": args.crop, "mode": args.mode,
             "ensemble_size": len(models)}
        )
        (stack_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"scored {len(stacks)} stacks -> {out}")


def cmd_eval(args):
    data_dir = Path(args.data)
    scores_dir = Path(args.scores)
    stacks, labels = _load_corpus(data_dir)
    volumes, stack_scores, kept = [], {}, []
    for stack in stacks:
        stack_dir = scores_dir / stack.stack_id
        if not (stack_dir / "header.json").is_file():
            continue
        volumes.append(load_scores(stack_dir))
        kept.append(stack)
        summary_path = stack_dir / "summary.json"
        if summary_path.is_file():
            stack_scores[stack.stack_id] = json.loads(summary_path.read_text())[
                "stack_score"
            ]
    if not volumes:
        raise SystemExit(f"no score volumes found under {scores_dir}")
    report = evaluate(
        volumes, kept, labels, stack_scores=stack_scores or None
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_cv(args):
    data_dir = Path(args.data)
    stacks, labels = _load_corpus(data_dir)
    by_id = {s.stack_id: s for s in stacks}
    out = Path(args.out)
    _write_run_json(out, "cv", args)

    def run_fold(train_ids, test_ids, fold):
        cell = ExperimentCell(
            name=f"fold{fold}",
            crop_size=args.crop,
            images_per_batch=args.images_per_batch,
            patches_per_image=1,
            total_steps=args.steps,
            seed=args.seed + fold,
        )
        reports = run_cell(
            cell,
            [by_id[i] for i in train_ids],
            [by_id[i] for i in test_ids],
            out / f"fold{fold}",
            labels,
            beta=args.beta,
            p=args.p,
            width_preset=args.width,
        )
        return reports["sliding"]

    result = cross_validate(sorted(by_id), args.folds, args.seed, run_fold)
    (out / "cv.json").write_text(json.dumps(result, indent=2))
    for name, stat in result["summary"].items():
        print(f"{name}: {stat['mean']:.3f} +/- {stat['std']:.3f}")


def cmd_ablate(args):
    data_dir = Path(args.data)
    stacks, labels = _load_corpus(data_dir)
    if args.grid in GRID_BUILDERS:
        grid = GRID_BUILDERS[args.grid](total_steps=args.steps, seed=args.seed)
    else:
        grid = grid_from_json(args.grid)
    split = split_folds(sorted(s.stack_id for s in stacks), 4, args.seed)
    test_ids = set(split.fold_ids(0))
    train_stacks = [s for s in stacks if s.stack_id not in test_ids]
    test_stacks = [s for s in stacks if s.stack_id in test_ids]
    out = Path(args.out)
    _write_run_json(out, "ablate", args)
    results = run_grid(
        grid, train_stacks, test_stacks, out, labels,
        beta=args.beta, p=args.p, width_preset=args.width,
    )
    print((out / "results.txt").read_text())
    if results["failed"]:
        raise SystemExit(f"{len(results['failed'])} cell(s) failed")


def cmd_saliency(args):
    stack = load_stack(Path(args.data) / args.stack)
    if stack.mask is None:
        raise SystemExit("stack has no ground-truth mask")
    model = load_checkpoint(args.ckpt)
    region = select_component(stack.mask[args.frame], args.component)
    result = saliency(model, stack, args.frame, region)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_json(out, "saliency", args)
    np.savez(
        out / f"{args.stack}_frame{args.frame:03d}.npz",
        grad=result["grad"],
        magnitude=result["magnitude"],
        region=region,
    )
    mag = result["magnitude"]
    if mag.max() > 0:
        mag = mag / mag.max()
    from PIL import Image

    Image.fromarray((mag * 255).astype(np.uint8)).save(
        out / f"{args.stack}_frame{args.frame:03d}.png"
    )
    print(f"saliency written to {out}")


def cmd_overlay(args):
    stack = load_stack(Path(args.data) / args.stack)
    volume = load_scores(Path(args.scores) / args.stack)
    out = Path(args.out)
    _write_run_json(out, "overlay", args)
    paths = render_overlay(stack, volume, out, threshold=args.threshold)
    print(f"wrote {len(paths)} overlay frames to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchseg",
        description="Patch-based segmentation pipeline: phantom data, training, "
        "sliding-window inference, metrics, and ablation grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-stacks", type=int, default=40)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--positive-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="optional file of stack ids to train on")
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--images-per-batch", type=int, default=16)
    p.add_argument("--patches-per-image", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", default="small")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score stacks with trained checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids")
    p.add_argument("--ckpt", nargs="+", required=True,
                   help="one or more checkpoints (ensemble averages scores)")
    p.add_argument("--mode", choices=("sliding", "fullconv"), default="sliding")
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--beta", type=float, default=3.0)
    p.add_argument("--p", type=float, default=256.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate score volumes against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--images-per-batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--beta", type=float, default=3.0)
    p.add_argument("--p", type=float, default=256.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", default="small")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", required=True,
                   help="table1|table2|table3|table4 or a custom grid JSON file")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--beta", type=float, default=3.0)
    p.add_argument("--p", type=float, default=256.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", default="small")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("saliency", help="input-gradient map for a mask region")
    p.add_argument("--data", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--component", type=int, default=0)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("overlay", help="render prediction/ground-truth overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
