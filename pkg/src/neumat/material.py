"""NeuMIP-style neural material: latent feature textures + tiny MLP decoders.

A material is two 12-channel feature textures (offset and reflectance) and two
small MLPs. The offset module turns the offset features and the view direction
into a UV shift that fakes parallax; the reflectance module decodes the shifted
reflectance features plus light/view directions into RGB. Forward evaluation
and exact reverse-mode gradients are implemented here directly on numpy
arrays so the fitter has full control over precision and determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError

FEATURE_CHANNELS = 12
HIDDEN_SLOPE = 0.01
DEFAULT_HIDDEN = (64, 64, 64, 64)
DEFAULT_MAX_OFFSET = 0.15


class Addressing(Enum):
    CLAMP_TO_EDGE = "clamp"
    WRAP = "wrap"


@dataclass
class FeatureTexture:
    """Dense float grid sampled by bilinear interpolation.

    data has shape (height, width, channels), row-major.
    """

    data: np.ndarray
    addressing: Addressing = Addressing.CLAMP_TO_EDGE

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InputError("texture data must be (height, width, channels)")
        h, w, _ = self.data.shape
        if h < 2 or w < 2:
            raise InputError("texture must be at least 2x2 for bilinear sampling")
        if not np.all(np.isfinite(self.data)):
            raise InputError("texture contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def astype(self, dtype) -> "FeatureTexture":
        return FeatureTexture(self.data.astype(dtype), self.addressing)


@dataclass
class Mlp:
    """Fully connected net, leaky-ReLU(0.01) hidden, tagged output activation.

    weights[k] has shape (out_dim, in_dim); layer k maps layer_dims[k] ->
    layer_dims[k+1]. out_activation is one of 'identity', 'tanh', 'softplus'.
    """

    weights: list
    biases: list
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InputError("weights and biases must pair up")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InputError(f"layer {k}: weight/bias shapes incompatible")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise InputError(f"layer {k}: input dim mismatch with layer {k-1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {k}: non-finite parameters")
        if self.out_activation not in ("identity", "tanh", "softplus"):
            raise InputError(f"unknown output activation {self.out_activation!r}")

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.out_activation,
        )

    @staticmethod
    def random(
        rng: np.random.Generator,
        in_dim: int,
        out_dim: int,
        hidden=DEFAULT_HIDDEN,
        out_activation: str = "identity",
        dtype=np.float32,
    ) -> "Mlp":
        """He-uniform weights, zero biases."""
        dims = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / a)
            weights.append(rng.uniform(-bound, bound, size=(b, a)).astype(dtype))
            biases.append(np.zeros(b, dtype=dtype))
        return Mlp(weights, biases, out_activation)


@dataclass
class NeuralMaterial:
    """Offset/reflectance feature textures plus their MLP decoders."""

    t_off: FeatureTexture
    t_rgb: FeatureTexture
    m_off: Mlp
    m_rgb: Mlp
    max_offset: float = DEFAULT_MAX_OFFSET

    def __post_init__(self):
        if not 0.0 < self.max_offset <= 1.0:
            raise InputError("max_offset must lie in (0, 1]")
        if self.m_off.in_dim != self.t_off.channels + 2:
            raise InputError("offset MLP input must be offset features + projected view")
        if self.m_rgb.in_dim != self.t_rgb.channels + 4:
            raise InputError("reflectance MLP input must be features + light + view")
        if self.m_off.out_dim != 2 or self.m_rgb.out_dim != 3:
            raise InputError("offset MLP outputs 2 values, reflectance MLP 3")

    @property
    def dtype(self):
        return self.t_off.data.dtype

    def astype(self, dtype) -> "NeuralMaterial":
        return NeuralMaterial(
            self.t_off.astype(dtype),
            self.t_rgb.astype(dtype),
            self.m_off.astype(dtype),
            self.m_rgb.astype(dtype),
            self.max_offset,
        )

    def param_arrays(self):
        """(name, array) pairs for every trainable parameter, fixed order."""
        out = [("t_off", self.t_off.data), ("t_rgb", self.t_rgb.data)]
        for tag, mlp in (("m_off", self.m_off), ("m_rgb", self.m_rgb)):
            for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out.append((f"{tag}.w{k}", w))
                out.append((f"{tag}.b{k}", b))
        return out

    def copy(self) -> "NeuralMaterial":
        return self.astype(self.dtype)


@dataclass
class GradBuffer:
    """Gradient accumulator mirroring a NeuralMaterial's parameter layout.

    Not safe for concurrent accumulation; use one buffer per worker and
    reduce with iadd in a fixed order.
    """

    t_off: np.ndarray
    t_rgb: np.ndarray
    m_off_w: list
    m_off_b: list
    m_rgb_w: list
    m_rgb_b: list

    @staticmethod
    def zeros_like(mat: NeuralMaterial, dtype=None) -> "GradBuffer":
        dt = dtype or mat.dtype
        return GradBuffer(
            np.zeros_like(mat.t_off.data, dtype=dt),
            np.zeros_like(mat.t_rgb.data, dtype=dt),
            [np.zeros_like(w, dtype=dt) for w in mat.m_off.weights],
            [np.zeros_like(b, dtype=dt) for b in mat.m_off.biases],
            [np.zeros_like(w, dtype=dt) for w in mat.m_rgb.weights],
            [np.zeros_like(b, dtype=dt) for b in mat.m_rgb.biases],
        )

    def arrays(self):
        out = [self.t_off, self.t_rgb]
        for w, b in zip(self.m_off_w, self.m_off_b):
            out.extend([w, b])
        for w, b in zip(self.m_rgb_w, self.m_rgb_b):
            out.extend([w, b])
        return out

    def zero_(self):
        for a in self.arrays():
            a.fill(0)

    def iadd(self, other: "GradBuffer"):
        for a, b in zip(self.arrays(), other.arrays()):
            a += b

    def scale_(self, s: float):
        for a in self.arrays():
            a *= s


def random_material(
    seed: int,
    tex_size: int = 64,
    channels: int = FEATURE_CHANNELS,
    hidden=DEFAULT_HIDDEN,
    max_offset: float = DEFAULT_MAX_OFFSET,
    addressing: Addressing = Addressing.CLAMP_TO_EDGE,
    dtype=np.float32,
) -> NeuralMaterial:
    """Seeded fresh material: textures ~ N(0, 0.1^2), He-uniform MLPs.

    Small texture magnitudes keep the initial offset near zero so early
    optimization behaves like offset-free fitting.
    """
    rng = np.random.default_rng(seed)
    t_off = FeatureTexture(
        (rng.standard_normal((tex_size, tex_size, channels)) * 0.1).astype(dtype),
        addressing,
    )
    t_rgb = FeatureTexture(
        (rng.standard_normal((tex_size, tex_size, channels)) * 0.1).astype(dtype),
        addressing,
    )
    m_off = Mlp.random(rng, channels + 2, 2, hidden, "tanh", dtype)
    m_rgb = Mlp.random(rng, channels + 4, 3, hidden, "softplus", dtype)
    return NeuralMaterial(t_off, t_rgb, m_off, m_rgb, max_offset)


# ---------------------------------------------------------------------------
# bilinear sampling


def _as_batch(a, dim: int):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != dim:
        raise InputError(f"expected trailing dimension {dim}, got {a.shape[1]}")
    return a, single


@dataclass
class _TapRecord:
    """Everything needed to re-derive a bilinear lookup in the backward pass."""

    iy0: np.ndarray
    iy1: np.ndarray
    ix0: np.ndarray
    ix1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    dxdu: np.ndarray  # d(continuous x)/d(u), zero where the clamp is active
    dydv: np.ndarray


def _resolve_taps(tex: FeatureTexture, uv64: np.ndarray) -> _TapRecord:
    # Coordinate math in float64 so wrap-by-one is exact for representable u.
    h, w = tex.height, tex.width
    u, v = uv64[:, 0], uv64[:, 1]
    if tex.addressing is Addressing.WRAP:
        u = u - np.floor(u)
        v = v - np.floor(v)
        x = u * w - 0.5
        y = v * h - 0.5
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        ix0 = x0.astype(np.int64) % w
        iy0 = y0.astype(np.int64) % h
        ix1 = (ix0 + 1) % w
        iy1 = (iy0 + 1) % h
        dxdu = np.full_like(x, float(w))
        dydv = np.full_like(y, float(h))
    else:
        x_raw = u * w - 0.5
        y_raw = v * h - 0.5
        x = np.clip(x_raw, 0.0, w - 1.0)
        y = np.clip(y_raw, 0.0, h - 1.0)
        ix0 = np.minimum(np.floor(x), w - 2).astype(np.int64)
        iy0 = np.minimum(np.floor(y), h - 2).astype(np.int64)
        fx = x - ix0
        fy = y - iy0
        ix1 = ix0 + 1
        iy1 = iy0 + 1
        dxdu = np.where((x_raw > 0.0) & (x_raw < w - 1.0), float(w), 0.0)
        dydv = np.where((y_raw > 0.0) & (y_raw < h - 1.0), float(h), 0.0)
    return _TapRecord(iy0, iy1, ix0, ix1, fx, fy, dxdu, dydv)


def _gather(tex: FeatureTexture, rec: _TapRecord):
    d = tex.data
    c00 = d[rec.iy0, rec.ix0]
    c01 = d[rec.iy0, rec.ix1]
    c10 = d[rec.iy1, rec.ix0]
    c11 = d[rec.iy1, rec.ix1]
    return c00, c01, c10, c11


def _interpolate(tex: FeatureTexture, rec: _TapRecord) -> np.ndarray:
    c00, c01, c10, c11 = _gather(tex, rec)
    dt = tex.data.dtype
    fx = rec.fx.astype(dt)[:, None]
    fy = rec.fy.astype(dt)[:, None]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def sample_bilinear(tex: FeatureTexture, uv) -> np.ndarray:
    """Bilinearly interpolated feature vector(s) at continuous UV.

    Texel (i, j) sits at ((i+0.5)/width, (j+0.5)/height). Out-of-range
    coordinates are resolved by the texture's addressing mode.
    """
    uv64, single = _as_batch(uv, 2)
    if not np.all(np.isfinite(uv64)):
        raise InputError("uv coordinates must be finite")
    out = _interpolate(tex, _resolve_taps(tex, uv64))
    return out[0] if single else out


def _sample_backward_texel(tex_grad: np.ndarray, rec: _TapRecord, d_out: np.ndarray):
    """Scatter-add d_out into the four touched texels per sample."""
    h, w, c = tex_grad.shape
    dt = tex_grad.dtype
    fx = rec.fx.astype(dt)[:, None]
    fy = rec.fy.astype(dt)[:, None]
    flat = tex_grad.reshape(h * w, c)
    np.add.at(flat, rec.iy0 * w + rec.ix0, d_out * (1 - fx) * (1 - fy))
    np.add.at(flat, rec.iy0 * w + rec.ix1, d_out * fx * (1 - fy))
    np.add.at(flat, rec.iy1 * w + rec.ix0, d_out * (1 - fx) * fy)
    np.add.at(flat, rec.iy1 * w + rec.ix1, d_out * fx * fy)


def _sample_backward_uv(tex: FeatureTexture, rec: _TapRecord, d_out: np.ndarray):
    """Gradient of the interpolated value w.r.t. the UV coordinate."""
    c00, c01, c10, c11 = _gather(tex, rec)
    dt = tex.data.dtype
    fx = rec.fx.astype(dt)[:, None]
    fy = rec.fy.astype(dt)[:, None]
    d_dx = (c01 - c00) * (1 - fy) + (c11 - c10) * fy
    d_dy = (c10 - c00) * (1 - fx) + (c11 - c01) * fx
    du = (d_out * d_dx).sum(axis=1) * rec.dxdu.astype(dt)
    dv = (d_out * d_dy).sum(axis=1) * rec.dydv.astype(dt)
    return np.stack([du, dv], axis=1)


# ---------------------------------------------------------------------------
# MLP forward/backward


def _leaky(z):
    return np.where(z > 0, z, HIDDEN_SLOPE * z)


def _softplus(z):
    return np.logaddexp(np.zeros((), dtype=z.dtype), z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mlp_forward(mlp: Mlp, x: np.ndarray, keep_cache: bool = False):
    """Raw (pre-output-activation) forward pass; cache holds layer inputs + preacts."""
    cache = [] if keep_cache else None
    h = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        if keep_cache:
            cache.append((h, z))
        h = z if k == last else _leaky(z)
    return h, cache


def _mlp_backward(mlp: Mlp, cache, d_raw: np.ndarray):
    """Returns (d_input, [dW...], [db...]) for cotangent d_raw on the raw output."""
    dws = [None] * len(mlp.weights)
    dbs = [None] * len(mlp.biases)
    dz = d_raw
    for k in range(len(mlp.weights) - 1, -1, -1):
        h_in, z = cache[k]
        if k < len(mlp.weights) - 1:
            dz = dz * np.where(z > 0, 1.0, HIDDEN_SLOPE).astype(dz.dtype)
        dws[k] = dz.T @ h_in
        dbs[k] = dz.sum(axis=0)
        dz = dz @ mlp.weights[k]
    return dz, dws, dbs


# ---------------------------------------------------------------------------
# material evaluation


def _check_directions(d64: np.ndarray, name: str):
    if not np.all(np.isfinite(d64)):
        raise InputError(f"{name} must be finite")
    if np.any(d64[:, 0] ** 2 + d64[:, 1] ** 2 > 1.0 + 1e-9):
        raise InputError(f"{name} must satisfy x^2 + y^2 <= 1")


def _head_forward(raw: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(raw)
    if activation == "softplus":
        return _softplus(raw)
    return raw


def _head_derivative(raw: np.ndarray, act: np.ndarray, activation: str) -> np.ndarray:
    """d(act)/d(raw) given both pre- and post-activation values."""
    if activation == "tanh":
        return 1 - act * act
    if activation == "softplus":
        return _sigmoid(raw)
    return np.ones_like(raw)


def _offset_forward(mat: NeuralMaterial, uv64, wo64, keep_cache=False):
    rec = _resolve_taps(mat.t_off, uv64)
    feats = _interpolate(mat.t_off, rec)
    dt = mat.dtype
    x = np.concatenate([feats, wo64.astype(dt)], axis=1)
    raw, cache = _mlp_forward(mat.m_off, x, keep_cache)
    act = _head_forward(raw, mat.m_off.out_activation)
    delta = np.asarray(mat.max_offset, dtype=dt) * act
    # a non-finite offset would become a texture lookup coordinate; fail loudly
    # instead of indexing with floor(NaN) garbage (diverged parameters)
    if not np.all(np.isfinite(delta)):
        raise FloatingPointError("non-finite neural offset (diverged material parameters?)")
    return delta, (rec, cache, raw, act) if keep_cache else (rec, None, raw, act)


def eval_offset(mat: NeuralMaterial, uv, wo) -> np.ndarray:
    """Parallax UV shift: max_offset * head(m_off(t_off[uv], wo)).

    With the default tanh head, strictly inside (-max_offset, max_offset)^2.
    """
    uv64, single = _as_batch(uv, 2)
    wo64, _ = _as_batch(wo, 2)
    if not np.all(np.isfinite(uv64)):
        raise InputError("uv coordinates must be finite")
    _check_directions(wo64, "wo")
    uv64, wo64 = np.broadcast_arrays(uv64, wo64)
    delta, _ = _offset_forward(mat, uv64, wo64)
    return delta[0] if single else delta


def _reflectance_forward(mat: NeuralMaterial, uv64, wi64, wo64, keep_cache=False):
    delta, off_state = _offset_forward(mat, uv64, wo64, keep_cache)
    uv2 = uv64 + delta.astype(np.float64)
    rec2 = _resolve_taps(mat.t_rgb, uv2)
    feats2 = _interpolate(mat.t_rgb, rec2)
    dt = mat.dtype
    x2 = np.concatenate([feats2, wi64.astype(dt), wo64.astype(dt)], axis=1)
    raw2, cache2 = _mlp_forward(mat.m_rgb, x2, keep_cache)
    rgb = _head_forward(raw2, mat.m_rgb.out_activation)
    state = (off_state, rec2, cache2, raw2, rgb) if keep_cache else None
    return rgb, state


def eval_reflectance(mat: NeuralMaterial, uv, wi, wo) -> np.ndarray:
    """Full decode: offset the lookup, sample t_rgb, run the reflectance MLP.

    With the default softplus head the output is always >= 0.
    """
    uv64, single = _as_batch(uv, 2)
    wi64, _ = _as_batch(wi, 2)
    wo64, _ = _as_batch(wo, 2)
    if not np.all(np.isfinite(uv64)):
        raise InputError("uv coordinates must be finite")
    _check_directions(wi64, "wi")
    _check_directions(wo64, "wo")
    uv64, wi64, wo64 = np.broadcast_arrays(uv64, wi64, wo64)
    rgb, _ = _reflectance_forward(mat, uv64, wi64, wo64)
    return rgb[0] if single else rgb


def _backward_from_state(mat: NeuralMaterial, state, d_rgb: np.ndarray, grads: GradBuffer):
    """Reverse pass from a cached forward state; d_rgb already in mat dtype."""
    (rec_off, cache_off, raw_off, off_act), rec2, cache2, raw2, rgb = state

    d_raw2 = d_rgb * _head_derivative(raw2, rgb, mat.m_rgb.out_activation)
    d_x2, dws, dbs = _mlp_backward(mat.m_rgb, cache2, d_raw2)
    for k in range(len(dws)):
        grads.m_rgb_w[k] += dws[k]
        grads.m_rgb_b[k] += dbs[k]

    c = mat.t_rgb.channels
    d_feats2 = d_x2[:, :c]
    _sample_backward_texel(grads.t_rgb, rec2, d_feats2)

    d_uv2 = _sample_backward_uv(mat.t_rgb, rec2, d_feats2)
    d_raw_off = (
        d_uv2
        * np.asarray(mat.max_offset, dtype=mat.dtype)
        * _head_derivative(raw_off, off_act, mat.m_off.out_activation)
    )
    d_x_off, dws, dbs = _mlp_backward(mat.m_off, cache_off, d_raw_off)
    for k in range(len(dws)):
        grads.m_off_w[k] += dws[k]
        grads.m_off_b[k] += dbs[k]

    _sample_backward_texel(grads.t_off, rec_off, d_x_off[:, : mat.t_off.channels])


def eval_reflectance_backward(mat: NeuralMaterial, uv, wi, wo, d_rgb, grads: GradBuffer):
    """Accumulate exact parameter gradients for a batch of reflectance queries.

    Covers every MLP weight/bias and the up-to-eight texels touched by the
    two bilinear lookups, including the chain through the offset into the
    t_rgb sampling coordinates. Returns the forward RGB (handy for losses).
    """
    uv64, single = _as_batch(uv, 2)
    wi64, _ = _as_batch(wi, 2)
    wo64, _ = _as_batch(wo, 2)
    d_rgb = np.atleast_2d(np.asarray(d_rgb, dtype=mat.dtype))
    if not np.all(np.isfinite(d_rgb)):
        raise InputError("loss cotangent must be finite")
    uv64, wi64, wo64 = np.broadcast_arrays(uv64, wi64, wo64)
    if d_rgb.shape[0] != uv64.shape[0]:
        raise InputError("cotangent batch size must match query batch size")

    rgb, state = _reflectance_forward(mat, uv64, wi64, wo64, keep_cache=True)
    _backward_from_state(mat, state, d_rgb, grads)
    return rgb[0] if single else rgb
