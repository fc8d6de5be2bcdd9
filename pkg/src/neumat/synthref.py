"""Analytic reference materials: the ground-truth oracle the fitter and RPC
tests measure against.

A reference material is a trio of maps (albedo, roughness, height) shaded
with a Lambertian + GGX microfacet model. Geometry is a heightfield over the
unit sample traced by fixed-step ray marching with bisection refinement, so
reference renders exhibit true parallax and cast shadows, the two effects a
neural material has to explain with its offset module.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .material import Addressing, FeatureTexture, _interpolate, _resolve_taps
from .renderer import _pixel_dirs

MARCH_STEPS = 512
MARCH_BISECTIONS = 8
SHADOW_STEPS = 128
SHADOW_BIAS = 1e-4
DEFAULT_H_MAX = 0.03
MIN_ROUGHNESS = 0.02

CATALOG_NAMES = ("flat-lambert", "checker-albedo", "plateau", "sine-ridges", "rock")


@dataclass(eq=False)
class AnalyticMaterial:
    """Albedo/roughness/height maps plus Fresnel f0 and the height scale."""

    albedo: np.ndarray
    roughness: np.ndarray
    height: np.ndarray
    f0: float = 0.04
    h_max: float = DEFAULT_H_MAX

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float32)
        self.roughness = np.asarray(self.roughness, dtype=np.float32)
        self.height = np.asarray(self.height, dtype=np.float32)
        if self.albedo.ndim != 3 or self.albedo.shape[2] != 3:
            raise InputError("albedo must be (height, width, 3)")
        if self.roughness.shape != self.albedo.shape[:2]:
            raise InputError("roughness resolution must match albedo")
        if self.height.shape != self.albedo.shape[:2]:
            raise InputError("height resolution must match albedo")
        if np.any(self.height < 0.0):
            raise InputError("height map must be non-negative")
        if not 0.0 <= self.f0 <= 1.0:
            raise InputError("f0 must lie in [0, 1]")
        if self.h_max <= 0.0:
            raise InputError("h_max must be positive")
        self.roughness = np.clip(self.roughness, MIN_ROUGHNESS, 1.0)
        self.height = np.minimum(self.height, np.float32(self.h_max))

        res_y, res_x = self.height.shape
        gy, gx = np.gradient(self.height.astype(np.float64), 1.0 / res_y, 1.0 / res_x)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)

        clamp = Addressing.CLAMP_TO_EDGE
        self._albedo_tex = FeatureTexture(self.albedo, clamp)
        self._rough_tex = FeatureTexture(self.roughness[..., None], clamp)
        self._height_tex = FeatureTexture(self.height[..., None].astype(np.float64), clamp)
        self._normal_tex = FeatureTexture(n.astype(np.float32), clamp)
        self._has_relief = bool(np.any(self.height > 0.0))

    @property
    def resolution(self) -> tuple:
        return (self.height.shape[1], self.height.shape[0])


def _sample(tex: FeatureTexture, uv: np.ndarray) -> np.ndarray:
    return _interpolate(tex, _resolve_taps(tex, uv))


def _height_at(mat: AnalyticMaterial, uv: np.ndarray) -> np.ndarray:
    """Heightfield over sample UV; zero outside the unit sample."""
    h = _sample(mat._height_tex, uv)[:, 0]
    inside = np.all((uv >= 0.0) & (uv <= 1.0), axis=1)
    return np.where(inside, h, 0.0)


def _lift(d2: np.ndarray) -> np.ndarray:
    """Direction2 -> unit 3-vector with the implied non-negative z."""
    z2 = 1.0 - d2[:, 0] ** 2 - d2[:, 1] ** 2
    z = np.sqrt(np.maximum(z2, 0.0))
    return np.concatenate([d2, z[:, None]], axis=1)


def shade(mat: AnalyticMaterial, u, wi, wo) -> np.ndarray:
    """Lambert + GGX/Smith/Schlick shading of the maps at sample UV u.

    wi and wo are Direction2 (plane projections of unit vectors). The normal
    comes from the height-map gradient; output includes the cos(theta_i)
    term and is zero when the light falls below the local horizon.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    u, wi, wo = np.broadcast_arrays(u, wi, wo)

    alb = _sample(mat._albedo_tex, u).astype(np.float64)
    rough = _sample(mat._rough_tex, u)[:, 0].astype(np.float64)
    n = _sample(mat._normal_tex, u).astype(np.float64)
    n /= np.linalg.norm(n, axis=1, keepdims=True)

    l = _lift(wi)
    v = _lift(wo)
    nl = np.einsum("ij,ij->i", n, l)
    nv = np.einsum("ij,ij->i", n, v)
    lit = (nl > 0.0) & (nv > 0.0)
    nl_c = np.maximum(nl, 1e-9)
    nv_c = np.maximum(nv, 1e-9)

    hv = l + v
    hv /= np.maximum(np.linalg.norm(hv, axis=1, keepdims=True), 1e-12)
    nh = np.clip(np.einsum("ij,ij->i", n, hv), 0.0, 1.0)
    lh = np.clip(np.einsum("ij,ij->i", l, hv), 0.0, 1.0)

    # perceptual roughness maps to the GGX width by squaring (glTF/Disney
    # convention for standard PBR roughness maps); the D/G formulas then use
    # the square of that width
    alpha = rough * rough
    a2 = alpha * alpha
    denom = nh * nh * (a2 - 1.0) + 1.0
    d_ggx = a2 / (np.pi * denom * denom)
    g1_l = 2.0 * nl_c / (nl_c + np.sqrt(a2 + (1.0 - a2) * nl_c * nl_c))
    g1_v = 2.0 * nv_c / (nv_c + np.sqrt(a2 + (1.0 - a2) * nv_c * nv_c))
    fresnel = mat.f0 + (1.0 - mat.f0) * (1.0 - lh) ** 5
    spec = d_ggx * g1_l * g1_v * fresnel / (4.0 * nl_c * nv_c)

    rgb = (alb / np.pi + spec[:, None]) * nl_c[:, None]
    rgb = np.where(lit[:, None], rgb, 0.0).astype(np.float32)
    return rgb[0] if single else rgb


def _slab_range(mat: AnalyticMaterial, oz, dz):
    """Ray-parameter interval over which the ray can cross the heightfield slab."""
    tiny = 1e-12
    dz_safe = np.where(np.abs(dz) < tiny, tiny, dz)
    t_top = (mat.h_max - oz) / dz_safe
    t_bot = -oz / dz_safe
    down = dz < 0.0
    t0 = np.where(down, np.maximum(t_top, 0.0), 0.0)
    t1 = np.where(down, t_bot, t_top)
    feasible = (np.abs(dz) >= tiny) & (t1 > t0)
    return t0, t1, feasible


def _march(mat: AnalyticMaterial, origins, dirs, steps=MARCH_STEPS):
    """First heightfield crossing per ray: (t_hit, hit mask).

    Fixed-step march over the slab interval, then MARCH_BISECTIONS rounds of
    bisection between the last sample above and the first at-or-below.
    """
    n = origins.shape[0]
    t_hit = np.zeros(n)
    hit = np.zeros(n, dtype=bool)

    if not mat._has_relief:
        # Flat sample: crossing is the z=0 plane itself.
        dz = dirs[:, 2]
        down = dz < 0.0
        t = np.where(down, -origins[:, 2] / np.where(down, dz, -1.0), 0.0)
        ok = down & (t >= 0.0)
        t_hit[ok] = t[ok]
        hit[ok] = True
        return t_hit, hit

    t0, t1, feasible = _slab_range(mat, origins[:, 2], dirs[:, 2])
    act = np.nonzero(feasible)[0]
    if act.size == 0:
        return t_hit, hit

    def f_of(idx, t):
        p = origins[idx] + t[:, None] * dirs[idx]
        return p[:, 2] - _height_at(mat, p[:, :2] + 0.5)

    t_lo = np.zeros(n)
    t_hi = np.zeros(n)
    below0 = f_of(act, t0[act]) <= 0.0
    started_inside = act[below0]
    t_hit[started_inside] = t0[started_inside]
    hit[started_inside] = True
    act = act[~below0]

    for k in range(1, steps + 1):
        if act.size == 0:
            break
        t_cur = t0[act] + (t1[act] - t0[act]) * (k / steps)
        crossed = f_of(act, t_cur) <= 0.0
        newly = act[crossed]
        t_lo[newly] = t0[newly] + (t1[newly] - t0[newly]) * ((k - 1) / steps)
        t_hi[newly] = t_cur[crossed]
        hit[newly] = True
        act = act[~crossed]

    ref = np.nonzero(hit & (t_hi > t_lo))[0]
    lo, hi = t_lo[ref], t_hi[ref]
    for _ in range(MARCH_BISECTIONS):
        mid = 0.5 * (lo + hi)
        fm = f_of(ref, mid) <= 0.0
        hi = np.where(fm, mid, hi)
        lo = np.where(fm, lo, mid)
    t_hit[ref] = hi
    return t_hit, hit


def _as_rays(a):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    return np.atleast_2d(a), single


def trace_heightfield(mat: AnalyticMaterial, origin, direction, steps=MARCH_STEPS):
    """Intersect ray(s) with the heightfield: (u, hit).

    hit is False when the ray never crosses the surface inside the unit
    sample; u is filled with the sample center for misses.
    """
    o, single = _as_rays(origin)
    d, _ = _as_rays(direction)
    o, d = np.broadcast_arrays(o, d)
    t, hit = _march(mat, o, d, steps)
    p = o + t[:, None] * d
    u = p[:, :2] + 0.5
    hit = hit & np.all((u >= 0.0) & (u <= 1.0), axis=1)
    u = np.where(hit[:, None], u, 0.5)
    return (u[0], bool(hit[0])) if single else (u, hit)


def render_reference(mat: AnalyticMaterial, frame, background: float = 0.0,
                     steps: int = MARCH_STEPS) -> np.ndarray:
    """Ground-truth render of one frame: march, shade, shadow, falloff."""
    cam, light = frame.camera, frame.light
    w, h = cam.resolution
    py, px = np.mgrid[0:h, 0:w]
    dirs = _pixel_dirs(cam, px.ravel(), py.ravel())
    origins = np.broadcast_to(cam.position, dirs.shape)

    t, hit = _march(mat, origins, dirs, steps)
    p = origins + t[:, None] * dirs
    u = p[:, :2] + 0.5
    valid = hit & np.all((u >= 0.0) & (u <= 1.0), axis=1) & (dirs[:, 2] < 0.0)

    img = np.full((h * w, 3), background, dtype=np.float32)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return img.reshape(h, w, 3)

    pv = p[idx]
    to_light = light.position - pv
    dist = np.linalg.norm(to_light, axis=1)
    wi3 = to_light / dist[:, None]
    to_cam = cam.position - pv
    wo3 = to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True)

    rgb = shade(mat, u[idx], wi3[:, :2], wo3[:, :2])

    if mat._has_relief:
        shadow_o = pv + np.array([0.0, 0.0, SHADOW_BIAS])
        _, occluded = _march(mat, shadow_o, wi3, SHADOW_STEPS)
    else:
        occluded = np.zeros(idx.size, dtype=bool)

    r_ref = np.linalg.norm(light.position)
    weight = light.power * (r_ref / dist) ** 2
    img[idx] = rgb * (weight * ~occluded)[:, None].astype(np.float32)
    return img.reshape(h, w, 3)


def render_reference_sequence(mat: AnalyticMaterial, trajectory,
                              background: float = 0.0, steps: int = MARCH_STEPS,
                              threads: int = 1) -> list:
    frames = list(getattr(trajectory, "frames", trajectory))
    if threads <= 1 or len(frames) <= 1:
        return [render_reference(mat, f, background, steps) for f in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda f: render_reference(mat, f, background, steps), frames))


# ---------------------------------------------------------------------------
# procedural catalog


def _pixel_grid(res: int):
    """Sample-space (u, v) coordinates of every texel center."""
    c = (np.arange(res, dtype=np.float64) + 0.5) / res
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng: np.random.Generator, res: int, cells: int, octaves: int = 3):
    """Seeded multi-octave value noise in [0, 1]."""
    out = np.zeros((res, res))
    total = 0.0
    amp = 1.0
    for o in range(octaves):
        c = cells * 2**o
        lattice = rng.random((c + 1, c + 1))
        u, v = _pixel_grid(res)
        x = u * c
        y = v * c
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx = _smoothstep(0.0, 1.0, x - x0)
        fy = _smoothstep(0.0, 1.0, y - y0)
        x0 = np.clip(x0, 0, c - 1)
        y0 = np.clip(y0, 0, c - 1)
        top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
        bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
        out += amp * (top * (1 - fy) + bot * fy)
        total += amp
        amp *= 0.5
    return out / total


def make_test_materials(seed: int = 0, resolution: int = 256) -> dict:
    """Fixed five-material catalog keyed by name; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    res = int(resolution)
    u, v = _pixel_grid(res)
    flat = np.zeros((res, res))
    mats = {}

    # Pure Lambertian with zero relief: the no-parallax null case.
    mats["flat-lambert"] = AnalyticMaterial(
        albedo=np.full((res, res, 3), 0.8),
        roughness=np.full((res, res), 1.0),
        height=flat,
        f0=0.0,
    )

    checker = ((np.floor(u * 8) + np.floor(v * 8)) % 2).astype(bool)
    alb = np.where(checker[..., None], [0.75, 0.2, 0.15], [0.15, 0.25, 0.7])
    mats["checker-albedo"] = AnalyticMaterial(
        albedo=alb,
        roughness=np.full((res, res), 0.5),
        height=flat,
    )

    box = (
        _smoothstep(0.33, 0.37, u)
        * (1.0 - _smoothstep(0.63, 0.67, u))
        * _smoothstep(0.33, 0.37, v)
        * (1.0 - _smoothstep(0.63, 0.67, v))
    )
    mats["plateau"] = AnalyticMaterial(
        albedo=np.stack([0.35 + 0.35 * box] * 3, axis=-1),
        roughness=np.full((res, res), 0.4),
        height=DEFAULT_H_MAX * box,
    )

    # Ridges run along v; height is zero at u = 0 and has period 1/8.
    ridges = 0.5 * (1.0 - np.cos(2.0 * np.pi * 8.0 * u))
    mats["sine-ridges"] = AnalyticMaterial(
        albedo=np.broadcast_to([0.70, 0.52, 0.30], (res, res, 3)),
        roughness=np.full((res, res), 0.3),
        height=DEFAULT_H_MAX * ridges,
    )

    rock_h = _value_noise(rng, res, 8, octaves=3)
    tint = _value_noise(rng, res, 4, octaves=2)
    rock_alb = np.stack(
        [0.30 + 0.30 * tint, 0.26 + 0.24 * tint, 0.22 + 0.18 * tint], axis=-1
    )
    mats["rock"] = AnalyticMaterial(
        albedo=rock_alb,
        roughness=0.45 + 0.35 * _value_noise(rng, res, 8, octaves=2),
        height=DEFAULT_H_MAX * rock_h,
    )
    return mats
