"""Residual parallax coherence: a sequence-level score of whether residual
image motion grows with camera baseline the way real parallax must.

Pipeline: rectify every camera-motion frame into canonical UV space, mask
out unreliable texels (intensity-percentile mask after bilateral filtering),
measure residual motion between lagged frame pairs with Dual TV-L1 optical
flow, and correlate the per-pair median flow magnitude against a composite
camera baseline. The loss is 1 - max(0, Spearman rho): sequences whose
residual motion is monotone in baseline score near zero.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError
from .material import Addressing, FeatureTexture, _interpolate, _resolve_taps
from .renderer import CameraPose
from .trajectory import Phase

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_LAGS = (1, 2, 4, 8, 16)
MIN_MASK_TEXELS = 100
MIN_PAIRS = 5
DEGENERATE_FLOW_PX = 0.3
BILATERAL_SIGMA_SPATIAL = 3.0
BILATERAL_SIGMA_RANGE = 0.1
MASK_PERCENTILES = (10.0, 90.0)

TVL1_LAMBDA = 0.15
TVL1_THETA = 0.3
TVL1_TAU = 0.25
TVL1_WARPS = 5
TVL1_ITERS = 30
TVL1_SCALES = 5
TVL1_ZOOM = 0.5


@dataclass
class RectifiedFrame:
    """Canonical-UV resample of a frame plus its validity mask."""

    image: np.ndarray
    mask: np.ndarray


@dataclass
class PairSample:
    t: int
    lag: int
    b: float
    m: float


@dataclass
class RpcReport:
    samples: list
    rho: float
    loss: float
    lags: tuple
    dropped_pairs: int = 0
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "pairs": [{"t": s.t, "lag": s.lag, "b": s.b, "m": s.m} for s in self.samples],
            "rho": self.rho,
            "loss": self.loss,
            "lags": list(self.lags),
            "dropped_pairs": self.dropped_pairs,
            "degenerate_flag": self.degenerate,
        }


# ---------------------------------------------------------------------------
# rectification


def rectify(image: np.ndarray, camera: CameraPose, resolution: int = None) -> RectifiedFrame:
    """Resample a frame so texel (i, j) shows a fixed sample-surface point.

    Each canonical texel's UV maps to its world point on the z=0 plane,
    projects into the source camera, and bilinearly samples the source
    image. The mask marks texels whose projection stays inside the frame.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError("rectify expects an RGB image")
    h_src, w_src = image.shape[:2]
    r = int(resolution) if resolution else h_src

    cols = (np.arange(r) + 0.5) / r
    rows = 1.0 - (np.arange(r) + 0.5) / r
    ux, uy = np.meshgrid(cols, rows)
    world = np.stack([ux - 0.5, uy - 0.5, np.zeros_like(ux)], axis=-1).reshape(-1, 3)

    right, up, forward = camera.basis()
    d = world - camera.position
    x = d @ right
    y = d @ up
    z = d @ forward
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    half = np.tan(np.deg2rad(camera.vertical_fov) / 2.0)
    aspect = w_src / h_src
    px = ((x / (zs * half * aspect)) + 1.0) * 0.5 * w_src - 0.5
    py = (1.0 - (y / (zs * half))) * 0.5 * h_src - 0.5
    inside = in_front & (px >= 0.0) & (px <= w_src - 1.0) & (py >= 0.0) & (py <= h_src - 1.0)

    tex = FeatureTexture(image, Addressing.CLAMP_TO_EDGE)
    uv = np.stack([(px + 0.5) / w_src, (py + 0.5) / h_src], axis=1)
    uv = np.where(inside[:, None], uv, 0.5)
    vals = _interpolate(tex, _resolve_taps(tex, uv))
    out = np.where(inside[:, None], vals, 0.0).astype(np.float32)
    return RectifiedFrame(out.reshape(r, r, 3), inside.reshape(r, r))


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.709 luma on linear RGB."""
    return np.asarray(image, dtype=np.float64) @ LUMA_WEIGHTS


# ---------------------------------------------------------------------------
# composite pose baseline


def _rotation_rows(camera: CameraPose) -> np.ndarray:
    right, up, forward = camera.basis()
    return np.stack([right, up, forward])


def baseline(pose_a: CameraPose, pose_b: CameraPose, s: float = 1.0) -> float:
    """Quadrature of relative rotation angle and translation normalized by s."""
    if s <= 0.0:
        raise InputError("world extent s must be positive")
    rel = _rotation_rows(pose_a) @ _rotation_rows(pose_b).T
    dtheta = np.arccos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0))
    dt = np.linalg.norm(pose_a.position - pose_b.position)
    return float(np.hypot(dtheta, dt / s))


# ---------------------------------------------------------------------------
# robust mask


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Zero-padded translate of a 2-D array."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys, yd = (dy, 0) if dy >= 0 else (0, -dy)
    xs, xd = (dx, 0) if dx >= 0 else (0, -dx)
    out[yd : h - ys, xd : w - xs] = a[ys : h - yd, xs : w - xd]
    return out


def bilateral_filter(lum: np.ndarray, mask: np.ndarray,
                     sigma_spatial: float = BILATERAL_SIGMA_SPATIAL,
                     sigma_range: float = BILATERAL_SIGMA_RANGE) -> np.ndarray:
    """Masked bilateral filter (window radius 2 sigma_spatial)."""
    radius = max(1, int(round(2.0 * sigma_spatial)))
    lum = np.asarray(lum, dtype=np.float64)
    m = mask.astype(np.float64)
    lm = lum * m
    acc = np.zeros_like(lum)
    wsum = np.zeros_like(lum)
    inv_s = 1.0 / (2.0 * sigma_spatial**2)
    inv_r = 1.0 / (2.0 * sigma_range**2)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ws = np.exp(-(dx * dx + dy * dy) * inv_s)
            sl = _shifted(lm, dy, dx)
            sm = _shifted(m, dy, dx)
            w = ws * sm * np.exp(-((sl - lum) ** 2) * inv_r)
            acc += w * sl
            wsum += w
    return np.where(wsum > 0.0, acc / np.maximum(wsum, 1e-300), lum)


def robust_mask(rect: RectifiedFrame, lum: np.ndarray = None) -> np.ndarray:
    """Valid texels strictly inside the filtered 10th..90th intensity band."""
    if not rect.mask.any():
        raise InputError("rectified frame has an empty validity mask")
    if lum is None:
        lum = luminance(rect.image)
    filt = bilateral_filter(lum, rect.mask)
    lo, hi = np.percentile(filt[rect.mask], MASK_PERCENTILES)
    return rect.mask & (filt > lo) & (filt < hi)


# ---------------------------------------------------------------------------
# Dual TV-L1 optical flow


def _resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    tex = FeatureTexture(img[..., None], Addressing.CLAMP_TO_EDGE)
    cols = (np.arange(new_w) + 0.5) / new_w
    rows = (np.arange(new_h) + 0.5) / new_h
    u, v = np.meshgrid(cols, rows)
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    return _interpolate(tex, _resolve_taps(tex, uv))[:, 0].reshape(new_h, new_w)


def _downscale(img: np.ndarray, zoom: float) -> np.ndarray:
    # Mild gaussian before decimation to keep the pyramid alias-free.
    new_h = max(1, int(round(img.shape[0] * zoom)))
    new_w = max(1, int(round(img.shape[1] * zoom)))
    return _resize_bilinear(gaussian_filter(img, 0.8, mode="nearest"), new_h, new_w)


def _sample_at(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape
    uv = np.stack(
        [(np.clip(xs, 0.0, w - 1.0).ravel() + 0.5) / w,
         (np.clip(ys, 0.0, h - 1.0).ravel() + 0.5) / h],
        axis=1,
    )
    tex = FeatureTexture(img[..., None], Addressing.CLAMP_TO_EDGE)
    return _interpolate(tex, _resolve_taps(tex, uv))[:, 0].reshape(img.shape)


def _forward_grad(a: np.ndarray):
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    div = np.zeros_like(p1)
    div[:, 0] += p1[:, 0]
    div[:, 1:] += p1[:, 1:] - p1[:, :-1]
    div[0, :] += p2[0, :]
    div[1:, :] += p2[1:, :] - p2[:-1, :]
    return div


def _tvl1_one_scale(i0, i1, u1, u2, lam, theta, tau, warps, iters):
    h, w = i0.shape
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    gy_full, gx_full = np.gradient(i1)
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    taut = tau / theta
    lt = lam * theta

    for _ in range(warps):
        xs = grid_x + u1
        ys = grid_y + u2
        i1w = _sample_at(i1, xs, ys)
        gx = _sample_at(gx_full, xs, ys)
        gy = _sample_at(gy_full, xs, ys)
        # Zero the linearization where the warp left the frame.
        oob = (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)
        gx[oob] = 0.0
        gy[oob] = 0.0
        grad_sq = gx * gx + gy * gy
        rho_c = i1w - gx * u1 - gy * u2 - i0

        for _ in range(iters):
            rho = rho_c + gx * u1 + gy * u2
            th = lt * grad_sq
            d1 = np.where(
                rho < -th, lt * gx,
                np.where(rho > th, -lt * gx, -rho * gx / np.maximum(grad_sq, 1e-12)),
            )
            d2 = np.where(
                rho < -th, lt * gy,
                np.where(rho > th, -lt * gy, -rho * gy / np.maximum(grad_sq, 1e-12)),
            )
            small = grad_sq < 1e-12
            v1 = u1 + np.where(small & (np.abs(rho) <= th), 0.0, d1)
            v2 = u2 + np.where(small & (np.abs(rho) <= th), 0.0, d2)

            u1 = v1 + theta * _divergence(p11, p12)
            u2 = v2 + theta * _divergence(p21, p22)

            ux, uy = _forward_grad(u1)
            den = 1.0 + taut * np.sqrt(ux * ux + uy * uy)
            p11 = (p11 + taut * ux) / den
            p12 = (p12 + taut * uy) / den
            ux, uy = _forward_grad(u2)
            den = 1.0 + taut * np.sqrt(ux * ux + uy * uy)
            p21 = (p21 + taut * ux) / den
            p22 = (p22 + taut * uy) / den
    return u1, u2


def tvl1_flow(img_a: np.ndarray, img_b: np.ndarray,
              lam: float = TVL1_LAMBDA, theta: float = TVL1_THETA,
              tau: float = TVL1_TAU, warps: int = TVL1_WARPS,
              iters: int = TVL1_ITERS, scales: int = TVL1_SCALES,
              zoom: float = TVL1_ZOOM) -> np.ndarray:
    """Coarse-to-fine primal-dual TV-L1 flow f with img_b(p + f(p)) ~ img_a(p).

    Inputs are single-channel; output is (h, w, 2) with x-flow in channel 0.
    """
    i0 = np.asarray(img_a, dtype=np.float64)
    i1 = np.asarray(img_b, dtype=np.float64)
    if i0.ndim != 2 or i0.shape != i1.shape:
        raise InputError("flow inputs must be equal-size single-channel images")

    # The data-term step size scales with image gradient magnitude, so the
    # standard lambda assumes a [0, 255] intensity range. Rescale both images
    # jointly; this also makes the flow contrast-invariant.
    lo = min(i0.min(), i1.min())
    hi = max(i0.max(), i1.max())
    if hi - lo > 1e-12:
        scale = 255.0 / (hi - lo)
        i0 = (i0 - lo) * scale
        i1 = (i1 - lo) * scale

    pyr0, pyr1 = [i0], [i1]
    for _ in range(scales - 1):
        if min(pyr0[-1].shape) * zoom < 8:
            break
        pyr0.append(_downscale(pyr0[-1], zoom))
        pyr1.append(_downscale(pyr1[-1], zoom))

    u1 = np.zeros_like(pyr0[-1])
    u2 = np.zeros_like(pyr0[-1])
    for s in range(len(pyr0) - 1, -1, -1):
        u1, u2 = _tvl1_one_scale(pyr0[s], pyr1[s], u1, u2, lam, theta, tau, warps, iters)
        if s > 0:
            nh, nw = pyr0[s - 1].shape
            fy = nh / u1.shape[0]
            fx = nw / u1.shape[1]
            u1 = _resize_bilinear(u1, nh, nw) * fx
            u2 = _resize_bilinear(u2, nh, nw) * fy
    return np.stack([u1, u2], axis=-1)


# ---------------------------------------------------------------------------
# Spearman rank correlation


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    s = a[order]
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i + 1
        while j < a.size and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average-rank tie handling; 0 for constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InputError("spearman needs two equal-length 1-D arrays (n >= 2)")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputError("spearman inputs must be finite")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if den == 0.0:
        return 0.0
    return float(np.sum(rx * ry) / den)


# ---------------------------------------------------------------------------
# score assembly


def _load_rect_cache(key: str, count: int):
    root = os.environ.get("NEUMAT_CACHE")
    if not root or not key:
        return None
    path = Path(root) / f"rect_{key}.npz"
    if not path.exists():
        return None
    try:
        data = np.load(path)
        images, masks = data["images"], data["masks"]
        if images.shape[0] != count:
            return None
        return [RectifiedFrame(images[k], masks[k]) for k in range(count)]
    except Exception:
        return None


def _store_rect_cache(key: str, rects):
    root = os.environ.get("NEUMAT_CACHE")
    if not root or not key:
        return
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path / f"rect_{key}.npz",
        images=np.stack([r.image for r in rects]),
        masks=np.stack([r.mask for r in rects]),
    )


def rpc_score(sequence, trajectory=None, lags=DEFAULT_LAGS, resolution: int = None,
              threads: int = 1, cache_key: str = None) -> RpcReport:
    """Score the camera-motion phase of a sequence.

    sequence is either a FrameSequence-like object (with .images and
    .trajectory) or a list of images with the trajectory passed separately.
    Luminance is normalized by its sequence-wide mean before masking and
    flow, making the score invariant to uniform brightness scaling.
    """
    images = getattr(sequence, "images", sequence)
    traj = trajectory if trajectory is not None else getattr(sequence, "trajectory", None)
    if traj is None:
        raise InputError("rpc_score needs a trajectory (pass one or use a FrameSequence)")
    frames = list(getattr(traj, "frames", traj))
    if len(images) != len(frames):
        raise InputError(f"{len(images)} images for {len(frames)} trajectory frames")

    phase2 = [(img, fr) for img, fr in zip(images, frames) if fr.phase is Phase.CAMERA_MOTION]
    if len(phase2) < 2:
        raise InputError("sequence has fewer than 2 camera-motion (phase 2) frames")
    lags = tuple(sorted(set(int(l) for l in lags)))
    if any(l < 1 for l in lags):
        raise InputError("lags must be positive")

    n = len(phase2)
    rects = _load_rect_cache(cache_key, n)
    if rects is None:
        rects = [rectify(img, fr.camera, resolution) for img, fr in phase2]
        _store_rect_cache(cache_key, rects)

    lums = [luminance(r.image) for r in rects]
    total = sum(float(l[r.mask].sum()) for l, r in zip(lums, rects))
    count = sum(int(r.mask.sum()) for r in rects)
    mean_lum = total / max(count, 1)
    scale = mean_lum if mean_lum > 0.0 else 1.0
    lums = [l / scale for l in lums]

    masks = [robust_mask(r, l) for r, l in zip(rects, lums)]

    tasks = []
    dropped = 0
    for lag in lags:
        for t in range(n - lag):
            pm = masks[t] & masks[t + lag]
            if int(pm.sum()) < MIN_MASK_TEXELS:
                dropped += 1
                continue
            tasks.append((t, lag, pm))

    def solve(task):
        t, lag, pm = task
        flow = tvl1_flow(lums[t], lums[t + lag])
        mag = np.sqrt(flow[..., 0] ** 2 + flow[..., 1] ** 2)
        m = float(np.median(mag[pm]))
        b = baseline(phase2[t][1].camera, phase2[t + lag][1].camera)
        return PairSample(t=t, lag=lag, b=b, m=m)

    if threads <= 1 or len(tasks) <= 1:
        samples = [solve(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(solve, tasks))

    if len(samples) < MIN_PAIRS:
        raise InputError(
            f"only {len(samples)} usable pairs after masking (< {MIN_PAIRS}); "
            f"{dropped} dropped"
        )
    b_arr = np.array([s.b for s in samples])
    m_arr = np.array([s.m for s in samples])
    rho = spearman(b_arr, m_arr)
    loss = 1.0 - max(0.0, rho)
    degenerate = bool(m_arr.max() < DEGENERATE_FLOW_PX)
    return RpcReport(samples, rho, loss, lags, dropped, degenerate)
