"""Operator command line.

Subcommands: synth (generate a synthetic scene with analytic ground truth),
train, render, gradcheck, eval, probe. Every figure-like output is an emitted
file; human-readable text goes to stdout only.

Exit codes: 0 success, 1 invalid usage or input, 2 check failure (gradcheck
or eval metrics below a requested tolerance).
"""

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, PipelineStageError
from . import fileio
from .gradcheck import run_gradcheck
from .pipeline import (TrainConfig, config_from_dict, evaluate_gt_scene,
                       evaluate_scene, fit, render_views, similarity_probe)
from .voxelizer import GridSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on stdout with exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def print_usage(self, file=None):
        super().print_usage(file or sys.stdout)

    def print_help(self, file=None):
        super().print_help(file or sys.stdout)


def _build_parser():
    parser = _Parser(prog="cubesplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--blobs", type=int, required=True)
    p.add_argument("--grid", default="16,16,16")
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--points-per-blob", type=int, default=512)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--scenes", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", choices=["SMALL", "FULL"], default="SMALL")

    p = sub.add_parser("eval", help="evaluate a checkpoint against scene targets")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--use-ground-truth", action="store_true",
                   help="evaluate stored ground-truth Gaussians instead of a checkpoint")
    p.add_argument("--min-psnr", type=float, default=None)
    p.add_argument("--max-depth-mae", type=float, default=None)
    p.add_argument("--min-cosine", type=float, default=None)

    p = sub.add_parser("probe", help="cosine-similarity spatial probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    return parser


def _fmt(x):
    return repr(float(x))


def cmd_synth(args):
    if args.blobs < 1:
        raise UsageError("--blobs must be at least 1")
    if args.views < 1:
        raise UsageError("--views must be at least 1")
    spec = fileio.SynthSpec(n_blobs=args.blobs, grid=fileio.parse_grid(args.grid),
                            views=args.views, seed=args.seed, width=args.width,
                            height=args.height, points_per_blob=args.points_per_blob)
    sample, gt, gt_ids = fileio.synth_scene(spec)
    written = fileio.write_scene_dir(args.out, sample, gt=gt, gt_ids=gt_ids)
    print(f"synth: {len(written)} files in {args.out} "
          f"(blobs={args.blobs} views={args.views} points={len(sample.cloud)} "
          f"seed={args.seed})")
    return EXIT_OK


def _load_train_config(path):
    return config_from_dict(fileio.parse_config(path))


def cmd_train(args):
    cfg = _load_train_config(args.config)
    scene_dirs = fileio.find_scene_dirs(args.scenes)
    if not scene_dirs:
        raise InvalidInputError(f"no scenes found under {args.scenes}")
    scenes = [fileio.load_scene_sample(d) for d in scene_dirs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = state = None
    start_epoch = 0
    if args.resume:
        model, state, grid = fileio.checkpoint_load(args.resume)
        if grid is not None and grid != cfg.grid:
            raise InvalidInputError(
                f"checkpoint grid {grid} does not match config grid {cfg.grid}")
        if state.step % len(scenes) != 0:
            raise InvalidInputError("checkpoint step is not at an epoch boundary")
        start_epoch = state.step // len(scenes)

    rows = []

    def on_step(step, report):
        rows.append([step, _fmt(report.l_img), _fmt(report.l_dep), _fmt(report.l_sem),
                     _fmt(report.total), _fmt(report.step_psnr)])

    model, state, records = fit(scenes, cfg, out_dir=out_dir, model=model,
                                state=state, start_epoch=start_epoch,
                                step_callback=on_step)
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_img", "l_dep", "l_sem", "total", "psnr"])
        writer.writerows(rows)

    # full-cloud evaluation of the final model on every scene
    eval_rows = []
    for scene in scenes:
        for m in evaluate_scene(model, scene, cfg):
            eval_rows.append([scene.name, m.view, _fmt(m.psnr), _fmt(m.depth_mae),
                              _fmt(m.cosine)])
    with open(out_dir / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "view", "psnr", "depth_mae", "cosine"])
        writer.writerows(eval_rows)
    if eval_rows:
        psnrs = [float(r[2]) for r in eval_rows]
        maes = [float(r[3]) for r in eval_rows]
        coss = [float(r[4]) for r in eval_rows]
        print(f"train: {len(rows)} steps; eval psnr={np.mean(psnrs):.2f} "
              f"depth_mae={np.mean(maes):.5f} cosine={np.mean(coss):.4f}")
    else:
        print(f"train: {len(rows)} steps")
    return EXIT_OK


def _config_for_checkpoint(model, grid):
    if grid is None:
        grid = GridSpec(16, 16, 16)
    return TrainConfig(grid=grid, dims=model.dims, tau=model.decoder.prune_threshold,
                       offset_cap=model.decoder.offset_cap)


def cmd_render(args):
    model, _, grid = fileio.checkpoint_load(args.checkpoint)
    scene = fileio.load_scene_sample(args.scene)
    if not 0 <= args.view < len(scene.views):
        raise InvalidInputError(
            f"view {args.view} out of range [0, {len(scene.views)})")
    cfg = _config_for_checkpoint(model, grid)
    renders, lifted, _, _ = render_views(model, scene, cfg, view_indices=[args.view])
    out = renders[0]
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_image_ppm(np.clip(out.color, 0.0, 1.0), f"{prefix}.ppm")
    fileio.write_tensor(out.depth, f"{prefix}_depth.f32t")
    fileio.write_tensor(out.feature, f"{prefix}_feat.f32t")
    print(f"render: view {args.view} -> {prefix}.ppm, {prefix}_depth.f32t, "
          f"{prefix}_feat.f32t")
    return EXIT_OK


def cmd_gradcheck(args):
    perturb = bool(os.environ.get("CUBESPLAT_GRADCHECK_PERTURB"))
    rows = run_gradcheck(size=args.size.lower(), seed=args.seed, perturb=perturb)
    width = max(len(r.component) for r in rows)
    print(f"{'component'.ljust(width)}  max_rel_err  tolerance  status")
    ok = True
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        ok &= r.ok
        print(f"{r.component.ljust(width)}  {r.max_rel_err:11.3e}  {r.tolerance:9.0e}  {status}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_eval(args):
    scene_dirs = fileio.find_scene_dirs(args.scenes)
    if not scene_dirs:
        raise InvalidInputError(f"no scenes found under {args.scenes}")
    if not args.use_ground_truth and not args.checkpoint:
        raise UsageError("eval requires --checkpoint or --use-ground-truth")
    model = grid = None
    if not args.use_ground_truth:
        model, _, grid = fileio.checkpoint_load(args.checkpoint)
    rows = []
    for d in scene_dirs:
        scene = fileio.load_scene_sample(d)
        if args.use_ground_truth:
            gaussians, gt_ids = fileio.load_gt_gaussians(d)
            metrics = evaluate_gt_scene(gaussians, gt_ids, scene)
        else:
            metrics = evaluate_scene(model, scene, _config_for_checkpoint(model, grid))
        for m in metrics:
            rows.append([scene.name, m.view, _fmt(m.psnr), _fmt(m.depth_mae),
                         _fmt(m.cosine)])
    agg_psnr = float(np.mean([float(r[2]) for r in rows]))
    agg_mae = float(np.mean([float(r[3]) for r in rows]))
    agg_cos = float(np.mean([float(r[4]) for r in rows]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "view", "psnr", "depth_mae", "cosine"])
        writer.writerows(rows)
        writer.writerow(["aggregate", "", _fmt(agg_psnr), _fmt(agg_mae), _fmt(agg_cos)])
    print(f"eval: {len(rows)} views; psnr={agg_psnr:.2f} depth_mae={agg_mae:.5f} "
          f"cosine={agg_cos:.4f} -> {out}")
    failed = ((args.min_psnr is not None and agg_psnr < args.min_psnr)
              or (args.max_depth_mae is not None and agg_mae > args.max_depth_mae)
              or (args.min_cosine is not None and agg_cos < args.min_cosine))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_probe(args):
    model, _, grid = fileio.checkpoint_load(args.checkpoint)
    scene = fileio.load_scene_sample(args.scene)
    cfg = _config_for_checkpoint(model, grid)
    scores = similarity_probe(model, scene, args.query, cfg)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_tensor(scores, f"{prefix}.f32t")
    # top-down grayscale projection: brightest score per cell wins
    res = 256
    coords = scene.cloud.coords
    lo = coords.min(axis=0)
    span = np.maximum(coords.max(axis=0) - lo, 1e-9)
    px = np.clip(((coords[:, 0] - lo[0]) / span[0] * (res - 1)).astype(int), 0, res - 1)
    py = np.clip(((coords[:, 1] - lo[1]) / span[1] * (res - 1)).astype(int), 0, res - 1)
    img = np.zeros((res, res))
    np.maximum.at(img, (py, px), (scores + 1.0) / 2.0)
    fileio.write_gray_ppm(img, f"{prefix}.ppm")
    print(f"probe: query {args.query} score[query]={scores[args.query]:.6f} "
          f"-> {prefix}.f32t, {prefix}.ppm")
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "probe": cmd_probe,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}")
        return EXIT_USAGE
    except (InvalidInputError, FormatError, PipelineStageError) as exc:
        print(f"error: {exc}")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
