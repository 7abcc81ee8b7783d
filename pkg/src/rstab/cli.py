"""Command-line entry point.

Subcommands: synth, stabilize, train, eval, gradcheck. Every command is
deterministic given the same inputs, seed and flags; reports echo the full
configuration. Exit codes: 0 success, 1 computation failure, 2 I/O or
configuration failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from dataclasses import asdict, replace

import numpy as np

from . import dataio, density, metrics, renderer, report, synthdata
from .dataio import Dataset, FormatError


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("RSTAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit2(f"bad RSTAB_THREADS value: {env!r}")
    return 1


class SystemExit2(Exception):
    """I/O or configuration failure (exit code 2)."""


def _build_config(args) -> renderer.RenderConfig:
    return renderer.RenderConfig(
        window_size=args.window,
        samples=args.samples,
        lam=args.lam,
        gamma=args.gamma,
        s_min=args.smin,
        sigma_smooth=args.sigma_smooth,
        smooth_window=args.smooth_window,
        no_arr=args.no_arr,
        no_cc=args.no_cc,
        blend_only=args.blend_only,
        literal_tw=args.literal_tw,
        threads=_threads(args),
    )


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=13, help="temporal window size")
    p.add_argument("--samples", type=int, default=3, help="samples per ray")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5,
                   help="temporal weight decay")
    p.add_argument("--sigma-smooth", dest="sigma_smooth", type=float, default=2.0,
                   help="trajectory smoothing sigma in frames (0 disables)")
    p.add_argument("--smooth-window", dest="smooth_window", type=int, default=13)
    p.add_argument("--gamma", type=float, default=1.0,
                   help="color-blend feature-affinity sharpness")
    p.add_argument("--smin", type=float, default=None,
                   help="absolute ray-range deviation floor in meters")
    p.add_argument("--no-arr", action="store_true",
                   help="even global depth sampling instead of adaptive ranges")
    p.add_argument("--no-cc", action="store_true",
                   help="disable flow-based color correction")
    p.add_argument("--blend-only", action="store_true",
                   help="warp-and-average baseline, no volume rendering")
    p.add_argument("--literal-tw", action="store_true",
                   help="asymmetric exp(lambda (t - T)) temporal weights")
    p.add_argument("--head", default="analytic",
                   help="density head file, or 'analytic'")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=7)


def _load_head(spec: str):
    if spec == "analytic":
        return density.AnalyticHead()
    if not os.path.exists(spec):
        warnings.warn(f"head file {spec!r} not found; falling back to the "
                      "analytic head")
        return density.AnalyticHead()
    return density.load_head(spec)


def _config_items(cfg: renderer.RenderConfig, seed: int) -> dict:
    items = {f"config.{k}": v for k, v in asdict(cfg).items()}
    items["config.seed"] = seed
    return items


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.spec:
        try:
            with open(args.spec) as f:
                spec = synthdata.scene_from_json(f.read())
        except (OSError, ValueError, KeyError) as exc:
            raise SystemExit2(f"bad scene spec {args.spec}: {exc}")
    else:
        spec = synthdata.preset_scene(args.preset, seed=args.seed,
                                      n_frames=args.frames, size=args.size)
    ds, _ = synthdata.synth_scene(spec)
    out = args.out
    try:
        report.ensure_dir(out)
        with open(os.path.join(out, "scene.json"), "w") as f:
            f.write(synthdata.scene_to_json(spec) + "\n")
        ds.extras["scene"] = "scene.json"
        dataio.save_dataset(ds, out)
    except OSError as exc:
        raise SystemExit2(f"cannot write dataset: {exc}")
    print(f"wrote {len(ds)} frames ({spec.width}x{spec.height}) to {out}")
    print(f"  seed={spec.seed} planes={len(spec.planes)} quads={len(spec.quads)}")
    return 0


# ---------------------------------------------------------------- stabilize


def _load_dataset(path) -> Dataset:
    try:
        return dataio.load_dataset(path)
    except (FormatError, OSError, ValueError) as exc:
        raise SystemExit2(f"cannot load dataset {path}: {exc}")


def _load_scene(ds_dir, ds: Dataset):
    rel = ds.extras.get("scene")
    if not rel:
        return None
    path = os.path.join(ds_dir, rel)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return synthdata.scene_from_json(f.read())


def cmd_stabilize(args) -> int:
    ds = _load_dataset(args.dataset)
    cfg = _build_config(args)
    head = _load_head(args.head)
    result = renderer.stabilize(ds, cfg, head=head)

    out = report.ensure_dir(args.out)
    frames_dir = report.ensure_dir(os.path.join(out, "frames"))
    masks_dir = report.ensure_dir(os.path.join(out, "masks"))
    figs_dir = report.ensure_dir(os.path.join(out, "figures"))
    for t, rf in enumerate(result.frames):
        dataio.save_png(os.path.join(frames_dir, f"frame_{t:04d}.png"), rf.image)
        dataio.save_png(
            os.path.join(masks_dir, f"mask_{t:04d}.png"),
            np.repeat(rf.valid[:, :, None].astype(np.uint8) * 255, 3, axis=2),
        )
    dataio.save_poses(os.path.join(out, "smoothed_poses.txt"), result.smoothed,
                      ds.timestamps())

    items = _config_items(cfg, args.seed)
    items["cropping_ratio"] = metrics.cropping_ratio(
        [rf.valid for rf in result.frames]
    )
    scene = _load_scene(args.dataset, ds)
    if scene is not None:
        vals = []
        for t, rf in enumerate(result.frames):
            gt, _ = synthdata.render_ground_truth(scene, result.smoothed[t],
                                                  float(t))
            vals.append(metrics.psnr(rf.image, gt))
        items["psnr_vs_ground_truth"] = float(np.mean(vals))
    report.write_keyvalues(os.path.join(out, "report.tsv"), items)
    report.write_aligned(os.path.join(out, "report.txt"), items,
                         title="stabilization report")
    report.write_table(
        os.path.join(out, "frames.tsv"), result.per_frame,
        ["frame", "weight_min", "weight_mean", "weight_max", "valid_fraction"],
    )
    report.trajectory_figure(os.path.join(figs_dir, "trajectory.png"),
                             ds.poses(), result.smoothed)
    report.weight_stats_figure(os.path.join(figs_dir, "weights.png"),
                               result.per_frame)
    print(f"stabilized {len(ds)} frames -> {out}")
    print(f"  cropping_ratio={items['cropping_ratio']:.4f}", end="")
    if "psnr_vs_ground_truth" in items:
        print(f" psnr={items['psnr_vs_ground_truth']:.2f} dB", end="")
    print()
    return 0


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    ds = _load_dataset(args.dataset)
    cfg = _build_config(args)
    # Training renders each input frame from its own window, so flow
    # correction would pin every view to the same target pixel and the
    # samples would carry no depth signal. Gather colors geometrically and
    # spread samples over the global depth range so off-surface samples
    # exist for the head to suppress.
    tcfg_render = replace(cfg, no_cc=True, no_arr=True,
                          samples=max(cfg.samples, 8))
    bank = renderer.build_ray_bank(ds, tcfg_render)
    head = density.DensityHead.create(seed=args.seed)
    tcfg = density.TrainConfig(
        learning_rate=args.lr, iterations=args.iterations,
        batch_size=args.batch, seed=args.seed,
    )
    try:
        head, curve = density.train(head, bank, tcfg)
    except density.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        density.save_head(args.out, head)
    except OSError as exc:
        raise SystemExit2(f"cannot write head: {exc}")
    curve_path = os.path.splitext(args.out)[0] + "_loss.tsv"
    report.write_table(curve_path,
                       [{"iteration": i, "loss": l} for i, l in curve],
                       ["iteration", "loss"])
    report.loss_curve_figure(os.path.splitext(args.out)[0] + "_loss.png", curve)
    if curve:
        print(f"trained {tcfg.iterations} iters: loss {curve[0][1]:.5f} -> "
              f"{curve[-1][1]:.5f}; head -> {args.out}")
    return 0


# ---------------------------------------------------------------- eval


def _read_output_poses(out_dir, ds: Dataset):
    path = os.path.join(out_dir, "smoothed_poses.txt")
    if os.path.exists(path):
        poses, _ = dataio.load_poses(path)
        return poses
    return ds.poses()


def _read_output_masks(out_dir, ds: Dataset):
    masks = []
    for t in range(len(ds)):
        path = os.path.join(out_dir, "masks", f"mask_{t:04d}.png")
        if os.path.exists(path):
            masks.append(dataio.load_image_u8(path)[:, :, 0] > 127)
        else:
            masks.append(np.ones_like(ds.frames[t].depth, dtype=bool))
    return masks


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    out_poses = _read_output_poses(args.output, ds)
    if len(out_poses) != len(ds):
        raise SystemExit2("output pose count does not match the dataset")
    masks = _read_output_masks(args.output, ds)
    k = ds.intrinsics

    pts = metrics.default_track_points(ds)
    in_tracks = metrics.tracks_from_poses(ds.poses(), pts, k)
    out_tracks = metrics.tracks_from_poses(out_poses, pts, k)

    corrs = []
    from .geometry import project_world

    for t in range(len(ds)):
        uv_in, _, v1 = project_world(pts, ds.frames[t].pose, k)
        uv_out, _, v2 = project_world(pts, out_poses[t], k)
        keep = v1 & v2
        corrs.append((uv_in[keep], uv_out[keep]))

    items = {
        "cropping_ratio": metrics.cropping_ratio(masks),
        "distortion_value": metrics.distortion_value(corrs),
        "stability_input": metrics.stability_score(in_tracks),
        "stability_output": metrics.stability_score(out_tracks),
    }
    scene = _load_scene(args.dataset, ds)
    frames_dir = os.path.join(args.output, "frames")
    if scene is not None and os.path.isdir(frames_dir):
        vals = []
        for t in range(len(ds)):
            path = os.path.join(frames_dir, f"frame_{t:04d}.png")
            if not os.path.exists(path):
                break
            img = dataio.load_image(path)
            gt, _ = synthdata.render_ground_truth(scene, out_poses[t], float(t))
            vals.append(metrics.psnr(img, gt))
        if len(vals) == len(ds):
            items["psnr_vs_ground_truth"] = float(np.mean(vals))

    out = report.ensure_dir(args.out or args.output)
    report.write_keyvalues(os.path.join(out, "eval.tsv"), items)
    report.write_aligned(os.path.join(out, "eval.txt"), items,
                         title="evaluation report")
    report.metrics_figure(os.path.join(out, "eval.png"), items)
    for key, val in items.items():
        print(f"{key} = {val:.4f}")
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    err = density.gradcheck(n_trials=args.trials, seed=args.seed)
    print(f"gradcheck max relative error: {err:.3e} "
          f"({'PASS' if err < 1e-4 else 'FAIL'})")
    return 0 if err < 1e-4 else 1


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rstab",
        description="Full-frame video stabilization by volume-rendered "
                    "multi-frame fusion, with a synthetic test bench.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("out")
    ps.add_argument("--preset", choices=["static", "dynamic", "parallax"],
                    default="static")
    ps.add_argument("--spec", default=None, help="scene spec JSON file")
    ps.add_argument("--seed", type=int, default=7)
    ps.add_argument("--frames", type=int, default=30)
    ps.add_argument("--size", type=int, default=64)
    ps.set_defaults(func=cmd_synth)

    pst = sub.add_parser("stabilize", help="stabilize a dataset")
    pst.add_argument("dataset")
    pst.add_argument("out")
    _add_render_flags(pst)
    pst.set_defaults(func=cmd_stabilize)

    pt = sub.add_parser("train", help="train the density head")
    pt.add_argument("dataset")
    pt.add_argument("out", help="output head file")
    _add_render_flags(pt)
    pt.add_argument("--iterations", type=int, default=5000)
    pt.add_argument("--lr", type=float, default=5e-4)
    pt.add_argument("--batch", type=int, default=128)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a stabilized output")
    pe.add_argument("dataset", help="input dataset directory")
    pe.add_argument("output", help="stabilized output directory")
    pe.add_argument("--out", default=None, help="report directory "
                    "(defaults to the output directory)")
    pe.set_defaults(func=cmd_eval)

    pg = sub.add_parser("gradcheck", help="verify density head gradients")
    pg.add_argument("--trials", type=int, default=100)
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
