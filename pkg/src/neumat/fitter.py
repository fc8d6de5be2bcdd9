"""Direct optimization: fit neural-material parameters to rendered sequences
by stochastic gradient descent through the differentiable renderer.

Each step draws a batch of valid pixels pooled across all target frames,
compares the predicted radiance against the target under an L2 loss, and
applies Adam with split learning rates (textures vs MLPs). A held-out
validation sequence, when provided, selects the returned snapshot.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import FitDivergenceError, InputError
from .material import (
    GradBuffer,
    NeuralMaterial,
    _backward_from_state,
    _reflectance_forward,
    random_material,
)
from .renderer import PIXEL_CHUNK, frame_samples

PSNR_CAP = 99.0
MAPE_STABILIZER = 0.01


@dataclass
class FitConfig:
    iterations: int = 20000
    lr_textures: float = 5e-3
    lr_mlps: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rays_per_step: int = 16384
    seed: int = 0
    freeze_mlps: bool = False
    loss: str = "L2"
    tex_size: int = 64
    max_offset: float = 0.15
    checkpoint_every: int = 250
    full_frames: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if self.lr_textures <= 0 or self.lr_mlps <= 0:
            raise InputError("learning rates must be positive")
        if self.rays_per_step < 1 or self.tex_size < 2 or self.checkpoint_every < 1:
            raise InputError("counts must be positive")
        if self.loss != "L2":
            raise InputError(f"unsupported loss {self.loss!r}")


@dataclass
class FitReport:
    checkpoints: list = field(default_factory=list)
    iterations: int = 0
    best_iteration: int = 0
    wall_clock: float = 0.0
    val_mse: float = None
    val_psnr: float = None

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "best_iteration": self.best_iteration,
            "wall_clock": self.wall_clock,
            "val_mse": self.val_mse,
            "val_psnr": self.val_psnr,
            "checkpoints": self.checkpoints,
        }


@dataclass
class SamplePool:
    """Flattened valid pixels of a whole sequence, ready for batched eval."""

    u: np.ndarray
    wi: np.ndarray
    wo: np.ndarray
    weight: np.ndarray
    target: np.ndarray
    frame_id: np.ndarray

    def __len__(self):
        return self.u.shape[0]


def build_sample_pool(images, frames, dtype=np.float32) -> SamplePool:
    us, wis, wos, wgts, tgts, fids = [], [], [], [], [], []
    for k, (img, fr) in enumerate(zip(images, frames)):
        w, h = fr.camera.resolution
        img = np.asarray(img)
        if img.shape != (h, w, 3):
            raise InputError(f"frame {k}: image shape {img.shape} != camera {(h, w, 3)}")
        rs = frame_samples(fr.camera, fr.light)
        idx = np.nonzero(rs.valid)[0]
        us.append(rs.u[idx])
        wis.append(rs.wi[idx].astype(dtype))
        wos.append(rs.wo[idx].astype(dtype))
        wgts.append(rs.weight[idx].astype(dtype))
        tgts.append(img.reshape(-1, 3)[idx].astype(dtype))
        fids.append(np.full(idx.size, k, dtype=np.int32))
    if not us or sum(a.shape[0] for a in us) == 0:
        raise InputError("no valid pixels in the target sequence")
    return SamplePool(
        np.concatenate(us),
        np.concatenate(wis),
        np.concatenate(wos),
        np.concatenate(wgts),
        np.concatenate(tgts),
        np.concatenate(fids),
    )


class _Adam:
    """Plain Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, arrays, lr, beta1, beta2, eps):
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= scale * m / (np.sqrt(v) + self.eps)


def _check_finite_params(mat: NeuralMaterial, iteration: int):
    """Adam moments can overflow f32 and poison parameters with NaN; catch
    that here so callers always see FitDivergenceError, never index crashes."""
    arrays = _texture_arrays(mat) + _mlp_arrays(mat)
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FitDivergenceError(
                f"non-finite parameters at iteration {iteration}",
                iteration=iteration,
            )


def _texture_arrays(mat: NeuralMaterial):
    return [mat.t_off.data, mat.t_rgb.data]


def _mlp_arrays(mat: NeuralMaterial):
    out = []
    for mlp in (mat.m_off, mat.m_rgb):
        for w, b in zip(mlp.weights, mlp.biases):
            out.extend([w, b])
    return out


def _texture_grads(g: GradBuffer):
    return [g.t_off, g.t_rgb]


def _mlp_grads(g: GradBuffer):
    out = []
    for w, b in zip(g.m_off_w, g.m_off_b):
        out.extend([w, b])
    for w, b in zip(g.m_rgb_w, g.m_rgb_b):
        out.extend([w, b])
    return out


def _batch_loss(mat: NeuralMaterial, pool: SamplePool, sel: np.ndarray,
                grads: GradBuffer = None, iteration: int = -1) -> float:
    """Mean squared radiance error over the selected samples; optionally
    accumulates parameter gradients of that mean."""
    n_terms = sel.size * 3
    sq_sum = 0.0
    for a in range(0, sel.size, PIXEL_CHUNK):
        c = sel[a : a + PIXEL_CHUNK]
        try:
            rgb, state = _reflectance_forward(
                mat, pool.u[c], pool.wi[c].astype(np.float64),
                pool.wo[c].astype(np.float64), keep_cache=grads is not None,
            )
        except FloatingPointError as exc:
            frame = int(pool.frame_id[c[0]])
            raise FitDivergenceError(
                f"{exc} at iteration {iteration} (frame {frame})",
                iteration=iteration, frame=frame,
            ) from exc
        w = pool.weight[c][:, None]
        resid = rgb * w - pool.target[c]
        chunk_sq = float(np.sum(resid.astype(np.float64) ** 2))
        if not np.isfinite(chunk_sq):
            bad = ~np.all(np.isfinite(resid), axis=1)
            frame = int(pool.frame_id[c[bad][0]]) if bad.any() else -1
            raise FitDivergenceError(
                f"non-finite loss at iteration {iteration} (frame {frame})",
                iteration=iteration, frame=frame,
            )
        sq_sum += chunk_sq
        if grads is not None:
            d_rgb = (2.0 / n_terms) * w * resid
            _backward_from_state(mat, state, d_rgb.astype(mat.dtype), grads)
    return sq_sum / n_terms


def _pool_metrics(mat: NeuralMaterial, pool: SamplePool) -> dict:
    n_terms = len(pool) * 3
    sq_sum = 0.0
    ape_sum = 0.0
    peak = float(pool.target.max()) if len(pool) else 0.0
    # Mirror the renderer's f32 pipeline and its per-frame chunk grid exactly:
    # BLAS rounding varies with batch shape, and evaluating a material against
    # its own renders must come out as exactly zero error.
    cuts = np.flatnonzero(np.diff(pool.frame_id)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(pool)]])
    for s, e in zip(starts, ends):
        for a in range(s, e, PIXEL_CHUNK):
            c = slice(a, min(a + PIXEL_CHUNK, e))
            rgb, _ = _reflectance_forward(mat, pool.u[c], pool.wi[c], pool.wo[c])
            pred = rgb.astype(np.float32) * pool.weight[c][:, None].astype(np.float32)
            pred = pred.astype(np.float64)
            gt = pool.target[c].astype(np.float64)
            sq_sum += float(np.sum((pred - gt) ** 2))
            ape_sum += float(np.sum(np.abs(pred - gt) / (gt + MAPE_STABILIZER)))
    mse = sq_sum / n_terms
    if mse <= 0.0 or peak <= 0.0:
        psnr = PSNR_CAP
    else:
        psnr = min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))
    return {"mse": mse, "psnr": float(psnr), "mape": ape_sum / n_terms, "peak": peak}


def evaluate(mat: NeuralMaterial, target, traj) -> dict:
    """MSE / PSNR / MAPE of a material against a target sequence.

    Metrics cover valid pixels only; PSNR uses the target's own peak value
    and caps at 99 dB for exact matches.
    """
    images = getattr(target, "images", target)
    frames = list(getattr(traj, "frames", traj))
    if len(images) != len(frames):
        raise InputError(f"{len(images)} images for {len(frames)} trajectory frames")
    pool = build_sample_pool(images, frames, mat.dtype)
    return _pool_metrics(mat, pool)


def _unpack_target(target, traj):
    images = getattr(target, "images", target)
    frames = list(getattr(traj, "frames", traj))
    if len(images) != len(frames):
        raise InputError(f"{len(images)} images for {len(frames)} trajectory frames")
    return images, frames


def fit(target, traj, cfg: FitConfig = None, init: NeuralMaterial = None,
        validation=None, progress=None):
    """Optimize a material against a rendered sequence.

    validation is an optional (images, trajectory) pair; when present, the
    returned material is the checkpoint with the lowest validation MSE.
    progress, when given, is called with each checkpoint row (dict).
    """
    cfg = cfg or FitConfig()
    images, frames = _unpack_target(target, traj)
    mat = init.copy() if init is not None else random_material(
        cfg.seed, cfg.tex_size, max_offset=cfg.max_offset
    )
    pool = build_sample_pool(images, frames, mat.dtype)
    val_pool = None
    if validation is not None:
        val_images, val_frames = _unpack_target(*validation)
        val_pool = build_sample_pool(val_images, val_frames, mat.dtype)

    rng = np.random.default_rng(cfg.seed)
    adam_tex = _Adam(_texture_arrays(mat), cfg.lr_textures, cfg.beta1, cfg.beta2, cfg.eps)
    adam_mlp = None
    if not cfg.freeze_mlps:
        adam_mlp = _Adam(_mlp_arrays(mat), cfg.lr_mlps, cfg.beta1, cfg.beta2, cfg.eps)

    grads = GradBuffer.zeros_like(mat)
    report = FitReport(iterations=cfg.iterations)
    best_mse = np.inf
    best_mat = None
    best_iter = 0
    t0 = time.perf_counter()
    probe = rng.integers(0, len(pool), min(cfg.rays_per_step, len(pool)))

    def checkpoint(iteration, train_mse):
        row = {
            "iter": iteration,
            "train_mse": float(train_mse),
            "val_psnr": None,
            "elapsed_s": time.perf_counter() - t0,
        }
        nonlocal best_mse, best_mat, best_iter
        if val_pool is not None:
            m = _pool_metrics(mat, val_pool)
            row["val_psnr"] = m["psnr"]
            row["val_mse"] = m["mse"]
            if m["mse"] < best_mse:
                best_mse, best_mat, best_iter = m["mse"], mat.copy(), iteration
        report.checkpoints.append(row)
        if progress is not None:
            progress(row)

    checkpoint(0, _batch_loss(mat, pool, probe))

    recent = []
    for it in range(1, cfg.iterations + 1):
        if cfg.full_frames:
            sel = np.arange(len(pool))
        else:
            sel = rng.integers(0, len(pool), min(cfg.rays_per_step, len(pool)))
        grads.zero_()
        loss = _batch_loss(mat, pool, sel, grads, iteration=it)
        recent.append(loss)
        adam_tex.step(_texture_grads(grads))
        if adam_mlp is not None:
            adam_mlp.step(_mlp_grads(grads))
        _check_finite_params(mat, it)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            checkpoint(it, np.mean(recent))
            recent = []

    report.wall_clock = time.perf_counter() - t0
    if best_mat is not None:
        mat = best_mat
        report.best_iteration = best_iter
        report.val_mse = best_mse
        final = _pool_metrics(mat, val_pool)
        report.val_psnr = final["psnr"]
    else:
        report.best_iteration = cfg.iterations
    return mat, report


def fit_universal(targets, cfg: FitConfig = None, progress=None):
    """Jointly fit shared decoder MLPs plus per-material feature textures.

    targets is a list of (images, trajectory) pairs (at least two). Steps
    round-robin over materials; the shared MLPs receive every gradient while
    each texture pair only sees its own material's steps.

    Returns ((m_off, m_rgb), [(t_off, t_rgb), ...], report).
    """
    cfg = cfg or FitConfig()
    if len(targets) < 2:
        raise InputError("universal fitting needs at least 2 materials")

    mats, pools = [], []
    shared = random_material(cfg.seed, cfg.tex_size, max_offset=cfg.max_offset)
    for target, traj in targets:
        images, frames = _unpack_target(target, traj)
        # identical texture inits: the init carries no per-material content,
        # and identical targets then stay symmetric through training
        per = random_material(cfg.seed, cfg.tex_size, max_offset=cfg.max_offset)
        mats.append(NeuralMaterial(per.t_off, per.t_rgb, shared.m_off, shared.m_rgb,
                                   cfg.max_offset))
        pools.append(build_sample_pool(images, frames, shared.dtype))

    rng = np.random.default_rng(cfg.seed)
    adam_tex = [
        _Adam(_texture_arrays(m), cfg.lr_textures, cfg.beta1, cfg.beta2, cfg.eps)
        for m in mats
    ]
    adam_mlp = None
    if not cfg.freeze_mlps:
        adam_mlp = _Adam(_mlp_arrays(mats[0]), cfg.lr_mlps, cfg.beta1, cfg.beta2, cfg.eps)

    grads = GradBuffer.zeros_like(mats[0])
    report = FitReport(iterations=cfg.iterations)
    t0 = time.perf_counter()
    recent = []
    # shared-MLP gradients are pooled over each round-robin cycle and applied
    # once per round: every material in a round then sees the same decoder,
    # which keeps identical targets exactly symmetric
    mlp_acc = None
    acc_steps = 0
    batch_pos = None
    for it in range(1, cfg.iterations + 1):
        k = (it - 1) % len(mats)
        if k == 0:
            batch_pos = rng.random(cfg.rays_per_step)
        n_k = len(pools[k])
        sel = (batch_pos[: min(cfg.rays_per_step, n_k)] * n_k).astype(np.int64)
        grads.zero_()
        loss = _batch_loss(mats[k], pools[k], sel, grads, iteration=it)
        recent.append(loss)
        adam_tex[k].step(_texture_grads(grads))
        if adam_mlp is not None:
            g = _mlp_grads(grads)
            if mlp_acc is None:
                mlp_acc = [a.copy() for a in g]
            else:
                for acc, a in zip(mlp_acc, g):
                    acc += a
            acc_steps += 1
            if k == len(mats) - 1 or it == cfg.iterations:
                adam_mlp.step([a / acc_steps for a in mlp_acc])
                mlp_acc = None
                acc_steps = 0
        _check_finite_params(mats[k], it)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            row = {
                "iter": it,
                "train_mse": float(np.mean(recent)),
                "val_psnr": None,
                "elapsed_s": time.perf_counter() - t0,
            }
            report.checkpoints.append(row)
            if progress is not None:
                progress(row)
            recent = []

    report.wall_clock = time.perf_counter() - t0
    report.best_iteration = cfg.iterations
    textures = [(m.t_off, m.t_rgb) for m in mats]
    return (mats[0].m_off, mats[0].m_rgb), textures, report
