"""Differentiable renderer for a flat unit material sample.

The sample occupies [-0.5, 0.5]^2 on the z=0 plane (world extent 1, the same
extent the RPC baseline normalizes by). A perspective camera and a point
light define each frame; per-pixel radiance is the material's reflectance
scaled by a distance-corrected inverse-square falloff chosen so the sample
center always receives the light's reference irradiance. That keeps overall
brightness constant while the light orbits.

Rays are one per pixel at the pixel center (optional 2x2 supersampling for
previews). All geometry runs in float64; images are float32 linear RGB.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .material import (
    GradBuffer,
    NeuralMaterial,
    eval_offset,
    eval_reflectance,
    eval_reflectance_backward,
)

# Fixed evaluation chunk so accumulation order (and therefore every bit of
# the result) is independent of the worker count.
PIXEL_CHUNK = 16384

SUPERSAMPLE_OFFSETS = ((-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25))


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise InputError(f"{name} must be a finite 3-vector")
    return a


@dataclass(eq=False)
class CameraPose:
    """Perspective camera: position, aim point, up hint, vertical FOV, resolution."""

    position: np.ndarray
    look_at: np.ndarray = (0.0, 0.0, 0.0)
    up: np.ndarray = (0.0, 1.0, 0.0)
    vertical_fov: float = 45.0
    resolution: tuple = (256, 256)

    def __post_init__(self):
        self.position = _vec3(self.position, "position")
        self.look_at = _vec3(self.look_at, "look_at")
        self.up = _vec3(self.up, "up")
        self.vertical_fov = float(self.vertical_fov)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not 0.0 < self.vertical_fov < 180.0:
            raise InputError("vertical_fov must lie in (0, 180) degrees")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise InputError("resolution must be positive")
        fwd = self.look_at - self.position
        n = np.linalg.norm(fwd)
        if n == 0.0:
            raise InputError("camera position must differ from look_at")
        if np.linalg.norm(np.cross(fwd / n, self.up)) < 1e-12:
            raise InputError("up vector parallel to view direction")

    def basis(self):
        """Right-handed (right, up, forward) orthonormal frame."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward


@dataclass(eq=False)
class PointLight:
    """Point light; power is the irradiance delivered at unit distance."""

    position: np.ndarray
    power: float = 1.0

    def __post_init__(self):
        self.position = _vec3(self.position, "position")
        self.power = float(self.power)
        if not self.position[2] > 0.0:
            raise InputError("light must sit above the sample plane (z > 0)")
        if not (np.isfinite(self.power) and self.power >= 0.0):
            raise InputError("power must be finite and non-negative")


@dataclass
class RenderSample:
    """Per-pixel shading inputs; arrays are flat over pixels (or scalars).

    weight folds the light power and the brightness-constancy falloff, so a
    pixel's radiance is eval_reflectance(u, wi, wo) * weight.
    """

    u: np.ndarray
    wi: np.ndarray
    wo: np.ndarray
    light_distance: np.ndarray
    weight: np.ndarray
    valid: np.ndarray


def default_camera_distance(vertical_fov: float = 45.0, coverage: float = 0.95) -> float:
    """Top-down distance at which the unit sample spans `coverage` of image height."""
    half = np.tan(np.deg2rad(vertical_fov) / 2.0)
    return 1.0 / (2.0 * coverage * half)


def _pixel_dirs(cam: CameraPose, px, py, offset=(0.0, 0.0)):
    """World-space ray directions through the given pixel coordinates."""
    w, h = cam.resolution
    right, up, forward = cam.basis()
    half = np.tan(np.deg2rad(cam.vertical_fov) / 2.0)
    aspect = w / h
    ndc_x = 2.0 * (np.asarray(px, dtype=np.float64) + 0.5 + offset[0]) / w - 1.0
    ndc_y = 1.0 - 2.0 * (np.asarray(py, dtype=np.float64) + 0.5 + offset[1]) / h
    d = (
        forward
        + (half * aspect) * ndc_x[..., None] * right
        + half * ndc_y[..., None] * up
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _samples_for_dirs(cam: CameraPose, light: PointLight, dirs: np.ndarray) -> RenderSample:
    pos = cam.position
    dz = dirs[..., 2]
    # Approach must come from above: camera over the plane, ray heading down.
    hits_plane = (dz < 0.0) & (pos[2] > 0.0)
    t = np.where(hits_plane, -pos[2] / np.where(dz == 0.0, -1.0, dz), np.nan)
    hit = pos + t[..., None] * dirs
    u = hit[..., :2] + 0.5
    valid = hits_plane & np.all((u >= 0.0) & (u <= 1.0), axis=-1)
    u = np.where(valid[..., None], u, 0.5)
    hit = np.where(valid[..., None], hit, 0.0)

    to_cam = pos - hit
    wo = to_cam[..., :2] / np.linalg.norm(to_cam, axis=-1, keepdims=True)
    to_light = light.position - hit
    dist = np.linalg.norm(to_light, axis=-1)
    wi = to_light[..., :2] / dist[..., None]
    r_ref = np.linalg.norm(light.position)
    weight = np.where(valid, light.power * (r_ref / dist) ** 2, 0.0)
    return RenderSample(u, wi, wo, dist, weight, valid)


def trace_pixel(cam: CameraPose, light: PointLight, px: int, py: int) -> RenderSample:
    """Shading inputs for a single pixel-center ray (scalar-shaped fields)."""
    w, h = cam.resolution
    if not (0 <= px < w and 0 <= py < h):
        raise InputError(f"pixel ({px}, {py}) outside resolution {cam.resolution}")
    dirs = _pixel_dirs(cam, np.float64(px), np.float64(py))
    return _samples_for_dirs(cam, light, dirs)


def frame_samples(cam: CameraPose, light: PointLight, offset=(0.0, 0.0)) -> RenderSample:
    """Shading inputs for every pixel, flattened row-major (y-major, then x)."""
    w, h = cam.resolution
    py, px = np.mgrid[0:h, 0:w]
    dirs = _pixel_dirs(cam, px.ravel(), py.ravel(), offset)
    return _samples_for_dirs(cam, light, dirs)


def _chunk_bounds(n: int):
    return [(s, min(s + PIXEL_CHUNK, n)) for s in range(0, n, PIXEL_CHUNK)]


def _run_chunks(fn, bounds, threads: int):
    """Apply fn to each chunk, returning results in chunk order."""
    if threads <= 1 or len(bounds) <= 1:
        return [fn(b) for b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, bounds))


def _shade_samples(mat: NeuralMaterial, rs: RenderSample, background: float, threads: int):
    n = rs.valid.shape[0]
    out = np.full((n, 3), background, dtype=np.float32)
    idx = np.nonzero(rs.valid)[0]
    if idx.size == 0:
        return out
    u, wi, wo = rs.u[idx], rs.wi[idx], rs.wo[idx]
    wgt = rs.weight[idx].astype(np.float32)

    def shade(bounds):
        a, b = bounds
        rgb = eval_reflectance(mat, u[a:b], wi[a:b], wo[a:b])
        out[idx[a:b]] = rgb.astype(np.float32) * wgt[a:b, None]

    _run_chunks(shade, _chunk_bounds(idx.size), threads)
    return out


def render(
    mat: NeuralMaterial,
    frame,
    background: float = 0.0,
    supersample: bool = False,
    threads: int = 1,
) -> np.ndarray:
    """Render one trajectory frame to a (height, width, 3) float32 image."""
    cam, light = frame.camera, frame.light
    w, h = cam.resolution
    offsets = SUPERSAMPLE_OFFSETS if supersample else ((0.0, 0.0),)
    acc = np.zeros((h * w, 3), dtype=np.float32)
    for off in offsets:
        rs = frame_samples(cam, light, off)
        acc += _shade_samples(mat, rs, background, threads)
    acc /= len(offsets)
    return acc.reshape(h, w, 3)


def render_backward(
    mat: NeuralMaterial,
    frame,
    d_image: np.ndarray,
    grads: GradBuffer = None,
    threads: int = 1,
) -> GradBuffer:
    """Back-propagate an image cotangent into material parameter gradients.

    Chunks are fixed-size and reduced in index order, so the result is
    bit-identical for any thread count.
    """
    cam, light = frame.camera, frame.light
    w, h = cam.resolution
    d_image = np.asarray(d_image)
    if d_image.shape != (h, w, 3):
        raise InputError(f"cotangent shape {d_image.shape} != image shape {(h, w, 3)}")
    if grads is None:
        grads = GradBuffer.zeros_like(mat)

    rs = frame_samples(cam, light)
    idx = np.nonzero(rs.valid)[0]
    if idx.size == 0:
        return grads
    u, wi, wo = rs.u[idx], rs.wi[idx], rs.wo[idx]
    d_rgb = d_image.reshape(h * w, 3)[idx] * rs.weight[idx, None]

    bounds = _chunk_bounds(idx.size)
    if threads <= 1 or len(bounds) == 1:
        for a, b in bounds:
            eval_reflectance_backward(mat, u[a:b], wi[a:b], wo[a:b], d_rgb[a:b], grads)
        return grads

    def chunk_grads(bnd):
        a, b = bnd
        g = GradBuffer.zeros_like(mat)
        eval_reflectance_backward(mat, u[a:b], wi[a:b], wo[a:b], d_rgb[a:b], g)
        return g

    for g in _run_chunks(chunk_grads, bounds, threads):
        grads.iadd(g)
    return grads


def render_offset_map(mat: NeuralMaterial, frame, threads: int = 1) -> np.ndarray:
    """Visualize the learned parallax shift: red = -u offset, blue = +u offset."""
    cam, light = frame.camera, frame.light
    w, h = cam.resolution
    rs = frame_samples(cam, light)
    out = np.zeros((h * w, 3), dtype=np.float32)
    idx = np.nonzero(rs.valid)[0]
    if idx.size:
        u, wo = rs.u[idx], rs.wo[idx]

        def shade(bnd):
            a, b = bnd
            du = eval_offset(mat, u[a:b], wo[a:b])[:, 0] / mat.max_offset
            out[idx[a:b], 0] = np.maximum(0.0, -du)
            out[idx[a:b], 2] = np.maximum(0.0, du)

        _run_chunks(shade, _chunk_bounds(idx.size), threads)
    return out.reshape(h, w, 3)


def render_sequence(
    mat: NeuralMaterial,
    trajectory,
    background: float = 0.0,
    supersample: bool = False,
    threads: int = 1,
) -> list:
    """Render every frame of a trajectory; parallelism is over whole frames."""
    frames = list(getattr(trajectory, "frames", trajectory))
    if threads <= 1 or len(frames) <= 1:
        return [render(mat, f, background, supersample) for f in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda f: render(mat, f, background, supersample), frames))
