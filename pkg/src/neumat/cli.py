"""Command-line surface tying the pipeline together: generate sequences,
fit materials, evaluate metrics, score RPC, and export diagnostic images.

Every command exits 0 on success; failures print a one-line JSON error to
stderr and exit nonzero. The --seed flag is the single source of randomness
and is recorded in every sequence manifest.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import formats
from .errors import InputError, NeumatError
from .fitter import FitConfig, evaluate, fit, fit_universal
from .material import FeatureTexture, NeuralMaterial, random_material
from .renderer import PointLight, render, render_offset_map, render_sequence
from .rpc import DEFAULT_LAGS, rpc_score
from .synthref import make_test_materials, render_reference_sequence
from .trajectory import (
    DEFAULT_CAMERA_DISTANCE,
    DEFAULT_ORBIT_RADIUS,
    ELEVATION_DEG,
    Kind,
    Trajectory,
    TrajectoryFrame,
    Phase,
    make_gonio_trajectory,
    make_validation_grid,
    orbit_position,
    subsample_frames,
    top_down_camera,
)

CATALOG_RESOLUTION = 256


def _make_trajectory(name: str, resolution: int, orbit_radius: float,
                     camera_distance: float) -> Trajectory:
    if name == "gonio81":
        return make_gonio_trajectory(orbit_radius, camera_distance, resolution)
    if name == "grid81":
        return make_validation_grid(orbit_radius, camera_distance, resolution)
    raise InputError(f"unknown trajectory {name!r} (expected gonio81 or grid81)")


def _load_material(spec: str, seed: int):
    """Resolve a material argument: catalog name or NMAT path.

    Returns ("analytic", AnalyticMaterial) or ("neural", NeuralMaterial).
    """
    catalog = make_test_materials(seed, CATALOG_RESOLUTION)
    if spec in catalog:
        return "analytic", catalog[spec]
    if spec.endswith(".nmat"):
        return "neural", formats.read_nmat(spec)
    raise InputError(
        f"unknown material {spec!r}: expected one of {sorted(catalog)} or an .nmat path"
    )


def _emit(payload: dict):
    json.dump(payload, sys.stdout, indent=1)
    sys.stdout.write("\n")


def cmd_gen(args) -> int:
    traj = _make_trajectory(args.traj, args.res, args.orbit_radius, args.camera_distance)
    kind, mat = _load_material(args.material, args.seed)
    if kind == "analytic":
        images = render_reference_sequence(mat, traj, threads=args.threads)
    else:
        images = render_sequence(mat, traj, threads=args.threads)
    manifest = formats.write_sequence(args.out, images, traj, seed=args.seed,
                                      previews=not args.no_png)
    _emit({"out": args.out, "manifest": manifest})
    return 0


def _progress_printer(verbose: bool):
    if not verbose:
        return None
    printed = {"header": False}

    def emit(row):
        if not printed["header"]:
            print("iter, train_mse, val_psnr, elapsed_s", file=sys.stderr)
            printed["header"] = True
        val = "" if row["val_psnr"] is None else f"{row['val_psnr']:.3f}"
        print(f"{row['iter']}, {row['train_mse']:.6g}, {val}, {row['elapsed_s']:.1f}",
              file=sys.stderr)

    return emit


def _slice_sequence(seq, count):
    frames = seq.trajectory.frames
    if count is None:
        return seq.images, frames
    idx = subsample_frames(seq.trajectory, count)
    return [seq.images[i] for i in idx], [frames[i] for i in idx]


def cmd_fit(args) -> int:
    seq = formats.read_sequence(args.seq)
    images, frames = _slice_sequence(seq, args.frames)

    cfg = FitConfig(
        iterations=args.iters,
        lr_textures=args.lr_textures,
        lr_mlps=args.lr_mlps,
        rays_per_step=args.rays,
        seed=args.seed,
        freeze_mlps=args.freeze_mlps,
        tex_size=args.tex_size,
        checkpoint_every=args.checkpoint_every,
    )
    init = None
    if args.mlps:
        donor = formats.read_nmat(args.mlps)
        fresh = random_material(args.seed, args.tex_size, max_offset=donor.max_offset)
        init = NeuralMaterial(fresh.t_off, fresh.t_rgb, donor.m_off, donor.m_rgb,
                              donor.max_offset)
    validation = None
    if args.val:
        vseq = formats.read_sequence(args.val)
        validation = (vseq.images, vseq.trajectory)

    mat, report = fit(images, frames, cfg, init=init, validation=validation,
                      progress=_progress_printer(args.verbose))
    formats.write_nmat(args.out, mat)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)
    _emit({"out": args.out, **report.to_dict()})
    return 0


def cmd_fit_universal(args) -> int:
    targets = []
    for d in args.seqs:
        seq = formats.read_sequence(d)
        images, frames = _slice_sequence(seq, args.frames)
        targets.append((images, frames))
    cfg = FitConfig(
        iterations=args.iters,
        lr_textures=args.lr_textures,
        lr_mlps=args.lr_mlps,
        rays_per_step=args.rays,
        seed=args.seed,
        tex_size=args.tex_size,
        checkpoint_every=args.checkpoint_every,
    )
    (m_off, m_rgb), textures, report = fit_universal(
        targets, cfg, progress=_progress_printer(args.verbose)
    )
    blank = np.zeros((args.tex_size, args.tex_size, m_off.in_dim - 2), dtype=np.float32)
    universal = NeuralMaterial(FeatureTexture(blank.copy()), FeatureTexture(blank.copy()),
                               m_off, m_rgb, cfg.max_offset)
    formats.write_nmat(args.out, universal)
    per_paths = []
    for d, (t_off, t_rgb) in zip(args.seqs, textures):
        mat = NeuralMaterial(t_off, t_rgb, m_off, m_rgb, cfg.max_offset)
        path = args.out.replace(".nmat", f"_{len(per_paths):02d}.nmat")
        formats.write_nmat(path, mat)
        per_paths.append({"seq": d, "nmat": path})
    _emit({"out": args.out, "materials": per_paths, **report.to_dict()})
    return 0


def cmd_eval(args) -> int:
    mat = formats.read_nmat(args.nmat)
    seq = formats.read_sequence(args.seq)
    metrics = evaluate(mat, seq.images, seq.trajectory)
    _emit(metrics)
    return 0


def cmd_rpc(args) -> int:
    seq = formats.read_sequence(args.seq)
    lags = tuple(int(x) for x in args.lags.split(",")) if args.lags else DEFAULT_LAGS
    key = None
    h = seq.manifest.get("trajectory_hash")
    if h:
        key = f"{h[:16]}_{args.res or seq.manifest['resolution'][1]}"
    report = rpc_score(seq.images, seq.trajectory, lags=lags, resolution=args.res,
                       threads=args.threads, cache_key=key)
    _emit(report.to_dict())
    return 0


def _save_image(path: str, image: np.ndarray):
    if path.endswith(".fimg"):
        formats.write_fimg(path, image)
    else:
        formats.write_png(path, image)


def cmd_relight(args) -> int:
    kind, mat = _load_material(args.nmat, args.seed)
    cam = top_down_camera(args.camera_distance, (args.res, args.res))
    light = PointLight(
        orbit_position(np.deg2rad(args.light_az), args.light_dist, args.light_el),
        args.power,
    )
    frame = TrajectoryFrame(0, Phase.LIGHT_MOTION, cam, light)
    if kind == "analytic":
        image = render_reference_sequence(mat, [frame])[0]
    else:
        image = render(mat, frame, threads=args.threads)
    _save_image(args.out, image)
    _emit({"out": args.out})
    return 0


def cmd_offsetmap(args) -> int:
    mat = formats.read_nmat(args.nmat)
    cam_pos = orbit_position(np.deg2rad(args.cam_az), args.camera_distance, args.cam_el)
    from .renderer import CameraPose

    cam = CameraPose(cam_pos, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 45.0,
                     (args.res, args.res))
    light = PointLight((0.0, 0.0, DEFAULT_ORBIT_RADIUS), 1.0)
    frame = TrajectoryFrame(0, Phase.CAMERA_MOTION, cam, light)
    _save_image(args.out, render_offset_map(mat, frame, threads=args.threads))
    _emit({"out": args.out})
    return 0


def cmd_subsample(args) -> int:
    if args.seq:
        seq = formats.read_sequence(args.seq)
        total = len(seq.trajectory.frames)
    else:
        total = args.total
    _emit({"total": total, "count": args.count, "indices": subsample_frames(total, args.count)})
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap (1 = deterministic mode)")
    common.add_argument("--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neumat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="render a material over a trajectory")
    g.add_argument("--material", required=True, help="catalog name or .nmat path")
    g.add_argument("--traj", default="gonio81", choices=["gonio81", "grid81"])
    g.add_argument("--res", type=int, default=256)
    g.add_argument("--orbit-radius", type=float, default=DEFAULT_ORBIT_RADIUS)
    g.add_argument("--camera-distance", type=float, default=DEFAULT_CAMERA_DISTANCE)
    g.add_argument("--out", required=True)
    g.add_argument("--no-png", action="store_true", help="skip preview PNGs")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", parents=[common], help="fit a neural material to a sequence")
    f.add_argument("seq")
    f.add_argument("--out", required=True, help="output .nmat path")
    f.add_argument("--iters", type=int, default=20000)
    f.add_argument("--frames", type=int, default=None, help="subsample to N uniformly spaced frames")
    f.add_argument("--tex-size", type=int, default=64)
    f.add_argument("--lr-textures", type=float, default=5e-3)
    f.add_argument("--lr-mlps", type=float, default=5e-4)
    f.add_argument("--rays", type=int, default=16384)
    f.add_argument("--checkpoint-every", type=int, default=250)
    f.add_argument("--freeze-mlps", action="store_true")
    f.add_argument("--mlps", default=None, help=".nmat providing pretrained decoder MLPs")
    f.add_argument("--val", default=None, help="validation sequence directory")
    f.add_argument("--report", default=None, help="write FitReport JSON here")
    f.set_defaults(func=cmd_fit)

    u = sub.add_parser("fit-universal", parents=[common],
                       help="jointly fit shared MLPs over several sequences")
    u.add_argument("seqs", nargs="+")
    u.add_argument("--out", required=True, help="output .nmat for the shared decoders")
    u.add_argument("--iters", type=int, default=20000)
    u.add_argument("--frames", type=int, default=None)
    u.add_argument("--tex-size", type=int, default=64)
    u.add_argument("--lr-textures", type=float, default=5e-3)
    u.add_argument("--lr-mlps", type=float, default=5e-4)
    u.add_argument("--rays", type=int, default=16384)
    u.add_argument("--checkpoint-every", type=int, default=250)
    u.set_defaults(func=cmd_fit_universal)

    e = sub.add_parser("eval", parents=[common], help="MSE/PSNR/MAPE of a material vs a sequence")
    e.add_argument("nmat")
    e.add_argument("seq")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rpc", parents=[common], help="residual parallax coherence score")
    r.add_argument("seq")
    r.add_argument("--lags", default=None, help="comma-separated lags (default 1,2,4,8,16)")
    r.add_argument("--res", type=int, default=None, help="canonical rectification resolution")
    r.set_defaults(func=cmd_rpc)

    l = sub.add_parser("relight", parents=[common], help="single frame under a chosen light")
    l.add_argument("nmat", help="catalog name or .nmat path")
    l.add_argument("--light-az", type=float, default=0.0, help="light azimuth, degrees")
    l.add_argument("--light-el", type=float, default=ELEVATION_DEG, help="light elevation, degrees")
    l.add_argument("--light-dist", type=float, default=DEFAULT_ORBIT_RADIUS)
    l.add_argument("--camera-distance", type=float, default=DEFAULT_CAMERA_DISTANCE)
    l.add_argument("--power", type=float, default=1.0)
    l.add_argument("--res", type=int, default=256)
    l.add_argument("--out", required=True, help=".png or .fimg path")
    l.set_defaults(func=cmd_relight)

    o = sub.add_parser("offsetmap", parents=[common], help="red/blue U-offset visualization")
    o.add_argument("nmat")
    o.add_argument("--cam-az", type=float, default=0.0)
    o.add_argument("--cam-el", type=float, default=ELEVATION_DEG)
    o.add_argument("--camera-distance", type=float, default=DEFAULT_CAMERA_DISTANCE)
    o.add_argument("--res", type=int, default=256)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_offsetmap)

    s = sub.add_parser("subsample", parents=[common], help="uniform frame index selection")
    s.add_argument("count", type=int)
    s.add_argument("--seq", default=None, help="sequence directory to take the total from")
    s.add_argument("--total", type=int, default=81)
    s.set_defaults(func=cmd_subsample)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NeumatError as exc:
        json.dump({"error": {"type": type(exc).__name__, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except OSError as exc:
        json.dump({"error": {"type": "OSError", "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
