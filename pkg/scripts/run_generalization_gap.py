"""Measure how much capture-path-only fitting overfits the capture views.

Fits the plateau material twice at the same budget: once on the 81-frame
capture path alone, once on the capture path plus the 81-frame validation
grid. Both runs are scored on the grid; training on it directly sets the
ceiling, and the difference to the capture-only run is the generalization
gap of the capture slice.

Usage: python3 scripts/run_generalization_gap.py [--res 128] [--iters 12000]
"""

import argparse
import time

import neumat
from neumat import synthref
from neumat.fitter import FitConfig, evaluate, fit
from neumat.trajectory import Kind, Trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--material", default="plateau")
    ap.add_argument("--res", type=int, default=128)
    ap.add_argument("--iters", type=int, default=12000)
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--tex-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    traj = neumat.make_gonio_trajectory(resolution=args.res)
    grid = neumat.make_validation_grid(resolution=args.res)
    amat = synthref.make_test_materials(args.seed, resolution=256)[args.material]

    t0 = time.perf_counter()
    capture_imgs = synthref.render_reference_sequence(amat, traj)
    grid_imgs = synthref.render_reference_sequence(amat, grid)
    print(f"rendered {len(capture_imgs) + len(grid_imgs)} reference frames "
          f"in {time.perf_counter() - t0:.0f}s")

    cfg = FitConfig(iterations=args.iters, rays_per_step=args.rays,
                    tex_size=args.tex_size, checkpoint_every=2000, seed=args.seed)

    results = {}
    for label, imgs, frames in (
        ("capture-only", capture_imgs, traj),
        ("capture+grid", capture_imgs + grid_imgs,
         Trajectory(list(traj.frames) + list(grid.frames), Kind.CUSTOM)),
    ):
        t0 = time.perf_counter()
        nmat, _ = fit(imgs, frames, cfg)
        m = evaluate(nmat, grid_imgs, grid)
        results[label] = m["psnr"]
        print(f"{label:13s}  grid PSNR {m['psnr']:6.2f} dB  "
              f"(fit {time.perf_counter() - t0:.0f}s)")

    gap = results["capture+grid"] - results["capture-only"]
    print(f"\ngeneralization gap: {gap:+.2f} dB "
          f"(grid-trained ceiling minus capture-only)")


if __name__ == "__main__":
    main()
