"""Operator surface: dataset generation, canonical build, training, rendering,
evaluation, track export, and PnP solving, over the on-disk formats."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import alignment, evaluation, formats
from .canonical import (build_all_dedup_sets, build_grids, compute_fg_bbox,
                        make_virtual_cameras, refine_canonical)
from .config import TrainConfig, LossWeights, default_hyperparameters
from .core import Camera
from .motion import MotionModel
from .renderer import RenderOptions, splat_forward
from .synthdata import SceneSpec, build_object, generate_scene
from .trainer import Checkpoint, TrainData, Trainer, config_hash

REFINE_LR = 5e-4




def cmd_gen(args) -> int:
    spec = SceneSpec(name=args.scene, seed=args.seed,
                     timesteps=args.timesteps, prescan_views=args.prescan_views,
                     track_count=args.tracks, noise_tracks=args.noise_tracks,
                     noise_depth=args.noise_depth,
                     resolution=(args.resolution, args.resolution))
    prescan, dynamic, test, tracks, _ = generate_scene(spec)
    formats.write_dataset(args.out, spec, prescan, dynamic, test, tracks)
    print(f"wrote dataset {args.out}: T={spec.timesteps} R={spec.prescan_views} "
          f"tracks={len(tracks.query_px)}")
    return 0


def cmd_canonical(args) -> int:
    spec, prescan, dynamic, _, _ = formats.read_dataset(args.data)
    obj = build_object(spec.name, spec.spacing)
    fg = obj.gaussians_at(1, spec.timesteps)
    box = compute_fg_bbox(fg)
    cams = make_virtual_cameras(box, count=args.views,
                                resolution=(args.grid_res, args.grid_res))
    opts = RenderOptions(cull_sigma=args.cull_sigma)
    grids = build_grids(fg, cams, options=opts)
    dedup = build_all_dedup_sets(grids, options=opts)
    if args.refine_iters > 0:
        refine_canonical(grids, prescan, LossWeights(), iters=args.refine_iters,
                         lr=REFINE_LR, seed=args.seed, options=opts,
                         dedup_sets=dedup)
    ckpt = Checkpoint(grids=grids, dedup_sets=dedup, model_variant="none",
                      model_state={}, optimizer_state={}, iteration=0,
                      config_hash="canonical", rng_state={"seed": args.seed},
                      total_timesteps=spec.timesteps, seed=args.seed)
    formats.save_checkpoint(args.out, ckpt)
    n = sum(int(g.validity.sum()) for g in grids)
    print(f"wrote canonical checkpoint {args.out}: {len(grids)} grids, {n} Gaussians")
    return 0


def _trainer_from(args, ckpt, data: TrainData, iterations: int,
                  seed: int, ablation: str) -> Trainer:
    config = TrainConfig(learning_rate=args.lr, iterations=iterations,
                         seed=seed, ablation=ablation)
    trainer = Trainer(config, ckpt.grids, ckpt.dedup_sets, data)
    if ckpt.model_state:
        trainer.restore(ckpt)
    return trainer


def cmd_train(args) -> int:
    _, _, dynamic, _, tracks = formats.read_dataset(args.data)
    ckpt = formats.load_checkpoint(args.canonical)
    data = TrainData(frames=dynamic.frames, tracks=tracks)
    trainer = _trainer_from(args, ckpt, data, args.iters, args.seed, args.ablation)
    log_path = args.log or (str(args.out) + ".metrics.jsonl")
    trainer.train(log_path=log_path)
    formats.save_checkpoint(args.out, trainer.checkpoint())
    print(f"trained {trainer.iteration} iterations; checkpoint {args.out}; "
          f"metrics {log_path}")
    return 0


def _restore_trainer(args, need_tracks=False) -> tuple[Trainer, tuple]:
    bundle = formats.read_dataset(args.data)
    _, _, dynamic, _, tracks = bundle
    ckpt = formats.load_checkpoint(args.ckpt)
    data = TrainData(frames=dynamic.frames, tracks=tracks if need_tracks or True else None)
    config = TrainConfig(iterations=0, seed=ckpt.seed,
                         ablation={"cnn": "none", "mlp": "mlp",
                                   "direct_grid": "no_dmp_direct",
                                   "none": "none"}[ckpt.model_variant])
    trainer = Trainer(config, ckpt.grids, ckpt.dedup_sets, data)
    if ckpt.model_state:
        trainer.restore(ckpt)
    return trainer, bundle


def cmd_render(args) -> int:
    trainer, bundle = _restore_trainer(args)
    spec, _, dynamic, test, _ = bundle
    t_total = trainer.t_total
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cameras == "test":
        cams = [f.camera for f in test.frames]
        times = [(i % t_total) + 1 for i in range(len(cams))]
    elif args.cameras == "orbit":
        box = compute_fg_bbox(trainer.canonical)
        cams = make_virtual_cameras(box, count=max(4, t_total),
                                    resolution=spec.resolution)
        times = [min(i + 1, t_total) for i in range(len(cams))]
    else:
        cam_list = json.loads(Path(args.cameras).read_text())
        cams = [formats.camera_from_json(c) for c in cam_list]
        times = [min(i + 1, t_total) for i in range(len(cams))]
    for i, (cam, t) in enumerate(zip(cams, times)):
        batch = trainer.deformed_batch(t)
        with torch.no_grad():
            render, _ = splat_forward(batch, cam, options=trainer.render_opts)
        formats.write_ppm(out / f"render_{i:05d}.ppm", render.color.numpy())
    print(f"wrote {len(cams)} renders to {out}")
    return 0


def evaluate_checkpoint(trainer: Trainer, test, tracks) -> evaluation.MetricsReport:
    t_total = trainer.t_total
    per_psnr, per_ssim = [], []
    for i, frame in enumerate(test.frames):
        t = (i % t_total) + 1
        batch = trainer.deformed_batch(t)
        with torch.no_grad():
            render, _ = splat_forward(batch, frame.camera, options=trainer.render_opts)
        mask = frame.mask
        if mask.any():
            per_psnr.append(evaluation.masked_psnr(render.color.numpy(),
                                                   frame.image, mask))
            per_ssim.append(evaluation.masked_ssim(render.color.numpy(),
                                                   frame.image, mask))
    deformed = [trainer.deformed_batch(t).means.numpy() for t in range(1, t_total + 1)]
    pred = evaluation.extract_tracks(deformed, tracks.query_p3d)
    epe, deltas = evaluation.tracking_metrics(pred, tracks.p3d)
    return evaluation.MetricsReport(
        mpsnr=float(np.mean(per_psnr)), mssim=float(np.mean(per_ssim)),
        epe=epe, delta_005=deltas[0], delta_01=deltas[1],
        n_frames=len(per_psnr), n_tracks=int(tracks.p3d.shape[1]),
        per_view_psnr=[float(v) for v in per_psnr],
        per_view_ssim=[float(v) for v in per_ssim])


def cmd_eval(args) -> int:
    trainer, bundle = _restore_trainer(args, need_tracks=True)
    _, _, _, test, tracks = bundle
    report = evaluate_checkpoint(trainer, test, tracks)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    print(f"mPSNR {report.mpsnr:.2f} dB  mSSIM {report.mssim:.4f}  "
          f"EPE {report.epe:.4f}  d0.05 {report.delta_005:.3f}  d0.1 {report.delta_01:.3f}")
    return 0


def cmd_tracks(args) -> int:
    trainer, _ = _restore_trainer(args)
    queries = json.loads(Path(args.queries).read_text())
    pts = np.array([q["p3d1"] for q in queries["queries"]], dtype=np.float64)
    deformed = [trainer.deformed_batch(t).means.numpy()
                for t in range(1, trainer.t_total + 1)]
    pred = evaluation.extract_tracks(deformed, pts)
    out = {"tracks": [[[float(x) for x in pred[t, k]]
                       for t in range(pred.shape[0])]
                      for k in range(pred.shape[1])]}
    Path(args.out).write_text(json.dumps(out))
    print(f"wrote {pred.shape[1]} tracks over {pred.shape[0]} timesteps to {args.out}")
    return 0


def cmd_pnp(args) -> int:
    corr = json.loads(Path(args.corr).read_text())
    pairs = [(np.array(c["px"], dtype=np.float64),
              np.array(c["p3d"], dtype=np.float64)) for c in corr]
    intr = json.loads(Path(args.intrinsics).read_text())
    cam = Camera(focal=float(intr["focal"]),
                 principal_point=np.array(intr["pp"], dtype=np.float64),
                 resolution=tuple(intr["resolution"]))
    params = alignment.RansacParams(iterations=args.ransac_iters,
                                    inlier_px=args.inlier_px, seed=args.seed)
    pose, inliers = alignment.solve_pnp(pairs, cam, params)
    rmse = alignment.reprojection_rmse(pose, pairs, cam, inliers)
    out = {"quat": [float(v) for v in pose.rotation],
           "t": [float(v) for v in pose.translation],
           "inliers": [int(i) for i in inliers], "rmse_px": rmse}
    Path(args.out).write_text(json.dumps(out, indent=1))
    print(f"pose solved: {len(inliers)}/{len(pairs)} inliers, RMSE {rmse:.4f} px")
    return 0


def cmd_hyperparams(args) -> int:
    dump = json.dumps(default_hyperparameters(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(dump)
    else:
        print(dump)
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    p = argparse.ArgumentParser(prog="dynsplat",
                                description="pre-scan + monocular dynamic reconstruction")
    sub = p.add_subparsers(dest="command", required=True)
    subparsers = {}

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--timesteps", type=int, default=30)
    g.add_argument("--prescan-views", type=int, default=12)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--tracks", type=int, default=96)
    g.add_argument("--noise-tracks", type=float, default=0.0)
    g.add_argument("--noise-depth", type=float, default=0.0)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("canonical", help="build and refine the canonical model")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--views", type=int, default=8)
    c.add_argument("--grid-res", type=int, default=48)
    c.add_argument("--refine-iters", type=int, default=200)
    c.add_argument("--cull-sigma", type=float, default=5.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--config")
    c.set_defaults(fn=cmd_canonical)

    t = sub.add_parser("train", help="optimize the motion model")
    t.add_argument("--data", required=True)
    t.add_argument("--canonical", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", default="none",
                   choices=["none", "no_dmp_direct", "mlp", "no_crs_iso",
                            "no_dense_iso", "no_rigid"])
    t.add_argument("--log")
    t.add_argument("--config")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render a trained model")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--cameras", default="test",
                   help="'test', 'orbit', or a camera JSON file")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    k = sub.add_parser("tracks", help="export 3D tracks for query points")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--queries", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--config")
    k.set_defaults(fn=cmd_tracks)

    n = sub.add_parser("pnp", help="solve a pose from 2D-3D correspondences")
    n.add_argument("--corr", required=True)
    n.add_argument("--intrinsics", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--ransac-iters", type=int, default=200)
    n.add_argument("--inlier-px", type=float, default=2.0)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--config")
    n.set_defaults(fn=cmd_pnp)

    h = sub.add_parser("hyperparams", help="dump pinned defaults as JSON")
    h.add_argument("--out")
    h.set_defaults(fn=cmd_hyperparams)
    subparsers.update(gen=g, canonical=c, train=t, render=r, eval=e,
                      tracks=k, pnp=n, hyperparams=h)
    return p, subparsers


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        config_path = getattr(args, "config", None)
        if config_path:
            # config values become subcommand defaults; explicit flags win
            overrides = {k.replace("-", "_"): v for k, v in
                         json.loads(Path(config_path).read_text()).items()}
            subparsers[args.command].set_defaults(**overrides)
            args = parser.parse_args(argv)
        return args.fn(args)
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
