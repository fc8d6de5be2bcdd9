"""Binary artifacts: NMAT materials, FIMG float images, PNG previews, and
frame-sequence directories with validated manifests.

NMAT and FIMG are little-endian and must round-trip byte-exactly; PNG is the
lossy display path using the standard sRGB transfer. A frame sequence is a
directory of frame_%04d images plus a trajectory sidecar and a manifest that
pins resolution, frame count, and a hash of the trajectory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, InputError
from .material import FeatureTexture, Mlp, NeuralMaterial
from .trajectory import Trajectory

NMAT_MAGIC = b"NMAT"
FIMG_MAGIC = b"FIMG"
NMAT_VERSION = 1
SEQUENCE_SCHEMA = 1

_ACTIVATION_TAGS = {"identity": 0, "tanh": 1, "softplus": 2}
_TAG_ACTIVATIONS = {v: k for k, v in _ACTIVATION_TAGS.items()}


# ---------------------------------------------------------------------------
# NMAT


def _pack_texture(tex: FeatureTexture) -> bytes:
    head = struct.pack("<III", tex.width, tex.height, tex.channels)
    return head + np.ascontiguousarray(tex.data, dtype="<f4").tobytes()


def _pack_mlp(mlp: Mlp) -> bytes:
    dims = mlp.layer_dims
    out = struct.pack("<I", len(mlp.weights))
    out += struct.pack(f"<{len(dims)}I", *dims)
    for w, b in zip(mlp.weights, mlp.biases):
        out += np.ascontiguousarray(w, dtype="<f4").tobytes()
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    out += struct.pack("<B", _ACTIVATION_TAGS[mlp.out_activation])
    return out


def write_nmat(path, mat: NeuralMaterial):
    """Serialize a material; parameters are stored as f32 regardless of build."""
    buf = bytearray()
    buf += NMAT_MAGIC
    buf += struct.pack("<I", NMAT_VERSION)
    buf += struct.pack("<f", mat.max_offset)
    buf += _pack_texture(mat.t_off)
    buf += _pack_texture(mat.t_rgb)
    buf += _pack_mlp(mat.m_off)
    buf += _pack_mlp(mat.m_rgb)
    Path(path).write_bytes(bytes(buf))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.off} (wanted {n} more)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def _read_texture(cur: _Cursor) -> FeatureTexture:
    w, h, c = cur.unpack("<III")
    if w < 2 or h < 2 or c < 1 or w * h * c > 1 << 28:
        raise FormatError(f"{cur.path}: implausible texture header {w}x{h}x{c}")
    data = cur.floats(w * h * c).reshape(h, w, c)
    return FeatureTexture(data)


def _read_mlp(cur: _Cursor) -> Mlp:
    (layers,) = cur.unpack("<I")
    if not 1 <= layers <= 64:
        raise FormatError(f"{cur.path}: implausible MLP layer count {layers}")
    dims = cur.unpack(f"<{layers + 1}I")
    if any(d < 1 or d > 1 << 16 for d in dims):
        raise FormatError(f"{cur.path}: implausible MLP dims {dims}")
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(cur.floats(a * b).reshape(b, a))
        biases.append(cur.floats(b))
    (tag,) = cur.unpack("<B")
    if tag not in _TAG_ACTIVATIONS:
        raise FormatError(f"{cur.path}: unknown activation tag {tag}")
    return Mlp(weights, biases, _TAG_ACTIVATIONS[tag])


def read_nmat(path) -> NeuralMaterial:
    cur = _Cursor(Path(path).read_bytes(), path)
    if cur.take(4) != NMAT_MAGIC:
        raise FormatError(f"{path}: not an NMAT file (bad magic)")
    (version,) = cur.unpack("<I")
    if version != NMAT_VERSION:
        raise FormatError(f"{path}: unsupported NMAT version {version}")
    (max_offset,) = cur.unpack("<f")
    try:
        t_off = _read_texture(cur)
        t_rgb = _read_texture(cur)
        m_off = _read_mlp(cur)
        m_rgb = _read_mlp(cur)
        mat = NeuralMaterial(t_off, t_rgb, m_off, m_rgb, float(max_offset))
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if cur.off != len(cur.data):
        raise FormatError(f"{path}: {len(cur.data) - cur.off} trailing bytes")
    return mat


# ---------------------------------------------------------------------------
# FIMG


def write_fimg(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError("FIMG stores (height, width, 3) images")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FIMG_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_fimg(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FIMG_MAGIC:
        raise FormatError(f"{path}: not a FIMG file (bad magic)")
    w, h = struct.unpack("<II", data[4:12])
    expect = 12 + 4 * w * h * 3
    if len(data) != expect:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {expect} for {w}x{h}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# PNG display path


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def write_png(path, image: np.ndarray):
    """Linear RGB -> 8-bit sRGB PNG."""
    arr = np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, "RGB").save(path)


def read_png(path, srgb: bool = True) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if srgb:
        arr = srgb_to_linear(arr)
    return arr.astype(np.float32)


def load_map(path, srgb: bool = False) -> np.ndarray:
    """Read a texture map: FIMG stays linear; PNG is optionally sRGB-decoded.

    Grayscale PNGs come back as 2-D arrays, color images as (h, w, 3).
    """
    p = Path(path)
    if p.suffix.lower() == ".fimg":
        return read_fimg(p)
    img = PILImage.open(p)
    if img.mode in ("L", "I", "I;16"):
        arr = np.asarray(img.convert("I"), dtype=np.float64)
        arr /= 65535.0 if img.mode == "I;16" else 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if srgb:
        arr = srgb_to_linear(arr)
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# frame sequences


def trajectory_hash(traj) -> str:
    """sha256 of the canonical (sorted, compact) trajectory JSON."""
    d = traj.to_dict() if isinstance(traj, Trajectory) else traj
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class FrameSequence:
    """In-memory view of a sequence directory: images + trajectory + manifest."""

    images: list
    trajectory: Trajectory
    manifest: dict

    def __len__(self):
        return len(self.images)


def write_sequence(directory, images, trajectory: Trajectory, seed=None,
                   previews: bool = True) -> dict:
    """Write frames, trajectory sidecar and manifest; returns the manifest."""
    images = list(images)
    frames = trajectory.frames
    if len(images) != len(frames):
        raise InputError(f"{len(images)} images for {len(frames)} trajectory frames")
    if not images:
        raise InputError("refusing to write an empty sequence")
    h, w = images[0].shape[:2]
    for k, img in enumerate(images):
        if img.shape != (h, w, 3):
            raise InputError(f"frame {k} shape {img.shape} differs from frame 0 {(h, w, 3)}")

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        write_fimg(out / f"frame_{k:04d}.fimg", img)
        if previews:
            write_png(out / f"frame_{k:04d}.png", img)
    trajectory.save(out / "trajectory.json")
    manifest = {
        "schema": SEQUENCE_SCHEMA,
        "kind": trajectory.kind.value,
        "resolution": [w, h],
        "frame_count": len(images),
        "format": "fimg",
        "color_space": "linear",
        "seed": seed,
        "trajectory_hash": trajectory_hash(trajectory),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_sequence(directory) -> FrameSequence:
    """Load and validate a sequence directory; any mismatch is a FormatError."""
    root = Path(directory)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise FormatError(f"{root}: manifest.json missing (not a sequence directory?)")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{man_path}: invalid JSON ({exc})") from exc
    if manifest.get("schema") != SEQUENCE_SCHEMA:
        raise FormatError(f"{man_path}: unsupported schema {manifest.get('schema')!r}")

    traj_path = root / "trajectory.json"
    if not traj_path.exists():
        raise FormatError(f"{root}: trajectory.json missing")
    trajectory = Trajectory.load(traj_path)
    if manifest.get("trajectory_hash") != trajectory_hash(trajectory):
        raise FormatError(f"{traj_path}: trajectory hash mismatch with manifest "
                          "(sequence or sidecar modified after writing)")

    count = manifest.get("frame_count")
    if count != len(trajectory.frames):
        raise FormatError(f"{man_path}: frame_count {count} != trajectory frames "
                          f"{len(trajectory.frames)}")
    w, h = manifest.get("resolution", [0, 0])
    fmt = manifest.get("format", "fimg")
    if fmt not in ("fimg", "png"):
        raise FormatError(f"{man_path}: unknown frame format {fmt!r}")

    images = []
    for k in range(count):
        fp = root / f"frame_{k:04d}.{fmt}"
        if not fp.exists():
            raise FormatError(f"{root}: {fp.name} missing (manifest says {count} frames)")
        img = read_fimg(fp) if fmt == "fimg" else read_png(fp)
        if img.shape != (h, w, 3):
            raise FormatError(f"{fp}: resolution {img.shape[1]}x{img.shape[0]} != "
                              f"manifest {w}x{h}")
        images.append(img)
    return FrameSequence(images, trajectory, manifest)
