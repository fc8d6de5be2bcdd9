"""Shared-decoder experiment: jointly fit one MLP pair across the whole
analytic catalog (per-material feature textures, universal decoders), then
compare held-out quality against individual fits given the same per-material
iteration budget.

Usage: python3 scripts/run_universal.py [--res 64] [--iters-per-material 4000]
"""

import argparse
import time

import numpy as np

import neumat
from neumat import synthref
from neumat.fitter import FitConfig, evaluate, fit, fit_universal
from neumat.material import NeuralMaterial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--materials", nargs="+", default=list(synthref.CATALOG_NAMES))
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--iters-per-material", type=int, default=4000)
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--tex-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional .nmat for the shared decoders")
    args = ap.parse_args()

    traj = neumat.make_gonio_trajectory(resolution=args.res)
    grid = neumat.make_validation_grid(resolution=args.res)
    catalog = synthref.make_test_materials(args.seed, resolution=256)

    print(f"rendering {len(args.materials)} materials @{args.res}^2 ...")
    targets, grids = [], []
    for name in args.materials:
        targets.append(synthref.render_reference_sequence(catalog[name], traj))
        grids.append(synthref.render_reference_sequence(catalog[name], grid))

    n = len(args.materials)
    cfg_joint = FitConfig(iterations=args.iters_per_material * n,
                          rays_per_step=args.rays, tex_size=args.tex_size,
                          checkpoint_every=2000, seed=args.seed)
    t0 = time.perf_counter()
    (m_off, m_rgb), textures, _ = fit_universal(
        [(imgs, traj) for imgs in targets], cfg_joint)
    print(f"joint fit: {cfg_joint.iterations} iters in {time.perf_counter()-t0:.0f}s")

    cfg_solo = FitConfig(iterations=args.iters_per_material,
                         rays_per_step=args.rays, tex_size=args.tex_size,
                         checkpoint_every=2000, seed=args.seed)
    print(f"\n{'material':16s}  {'shared-MLP PSNR':>16s}  {'individual PSNR':>16s}")
    for name, imgs, grid_imgs, (t_off, t_rgb) in zip(
            args.materials, targets, grids, textures):
        shared_mat = NeuralMaterial(t_off, t_rgb, m_off, m_rgb, cfg_joint.max_offset)
        shared = evaluate(shared_mat, grid_imgs, grid)["psnr"]
        solo_mat, _ = fit(imgs, traj, cfg_solo)
        solo = evaluate(solo_mat, grid_imgs, grid)["psnr"]
        print(f"{name:16s}  {shared:16.2f}  {solo:16.2f}")

    if args.out:
        blank = np.zeros((args.tex_size, args.tex_size, m_off.in_dim - 2), np.float32)
        from neumat.material import FeatureTexture
        universal = NeuralMaterial(FeatureTexture(blank.copy()),
                                   FeatureTexture(blank.copy()),
                                   m_off, m_rgb, cfg_joint.max_offset)
        neumat.formats.write_nmat(args.out, universal)
        print(f"\nwrote shared decoders to {args.out}")


if __name__ == "__main__":
    main()
