"""Measurement trajectories: the two-phase gonioreflectometer orbit and the
held-out validation grid.

The standard 81-frame path has two phases: 41 frames where the camera stays
top-down while the light orbits at 56.31 degrees elevation, then 40 frames
where the light sits top-down and the camera orbits at the same elevation.
The validation grid crosses 3x3 camera directions with 3x3 light directions
(projected coordinates in {-0.6, 0, +0.6}) for 81 held-out view/light pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import FormatError, InputError
from .renderer import CameraPose, PointLight

ELEVATION_DEG = 56.31
GONIO_SPLIT = (41, 40)
GRID_COORDS = (-0.6, 0.0, 0.6)
DEFAULT_ORBIT_RADIUS = 2.0
DEFAULT_CAMERA_DISTANCE = 1.6
DEFAULT_VFOV = 45.0
TRAJECTORY_SCHEMA = 1


class Phase(Enum):
    LIGHT_MOTION = "light_motion"
    CAMERA_MOTION = "camera_motion"
    GRID = "grid"


class Kind(Enum):
    GONIO81 = "gonio81"
    GRID81 = "grid81"
    CUSTOM = "custom"


@dataclass(eq=False)
class TrajectoryFrame:
    index: int
    phase: Phase
    camera: CameraPose
    light: PointLight


@dataclass(eq=False)
class Trajectory:
    frames: list
    kind: Kind = Kind.CUSTOM
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind in (Kind.GONIO81, Kind.GRID81) and len(self.frames) != 81:
            raise InputError(f"{self.kind.value} requires 81 frames, got {len(self.frames)}")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def phase2_frames(self):
        """Camera-motion frames (the ones the RPC metric consumes)."""
        return [f for f in self.frames if f.phase is Phase.CAMERA_MOTION]

    def to_dict(self) -> dict:
        return {
            "schema": TRAJECTORY_SCHEMA,
            "kind": self.kind.value,
            **self.meta,
            "frame_count": len(self.frames),
            "frames": [
                {
                    "index": f.index,
                    "phase": f.phase.value,
                    "camera": {
                        "position": list(f.camera.position),
                        "look_at": list(f.camera.look_at),
                        "up": list(f.camera.up),
                        "vertical_fov": f.camera.vertical_fov,
                        "resolution": list(f.camera.resolution),
                    },
                    "light": {
                        "position": list(f.light.position),
                        "power": f.light.power,
                    },
                }
                for f in self.frames
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "Trajectory":
        try:
            kind = Kind(d.get("kind", "custom"))
            frames = [
                TrajectoryFrame(
                    index=int(fd["index"]),
                    phase=Phase(fd["phase"]),
                    camera=CameraPose(
                        position=fd["camera"]["position"],
                        look_at=fd["camera"]["look_at"],
                        up=fd["camera"]["up"],
                        vertical_fov=fd["camera"]["vertical_fov"],
                        resolution=tuple(fd["camera"]["resolution"]),
                    ),
                    light=PointLight(fd["light"]["position"], fd["light"]["power"]),
                )
                for fd in d["frames"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed trajectory dict: {exc}") from exc
        if d.get("frame_count", len(frames)) != len(frames):
            raise FormatError("trajectory frame_count disagrees with frames list")
        meta = {
            k: d[k]
            for k in ("orbit_radius", "camera_distance", "vfov", "resolution", "split")
            if k in d
        }
        return Trajectory(frames, kind, meta)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def load(path) -> "Trajectory":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        return Trajectory.from_dict(d)


def orbit_position(azimuth: float, radius: float, elevation_deg: float = ELEVATION_DEG):
    """World position at the given azimuth (radians) on the elevated orbit circle."""
    el = np.deg2rad(elevation_deg)
    return radius * np.array(
        [np.cos(el) * np.cos(azimuth), np.cos(el) * np.sin(azimuth), np.sin(el)]
    )


def top_down_camera(distance: float, resolution, vfov: float = DEFAULT_VFOV) -> CameraPose:
    return CameraPose(
        position=(0.0, 0.0, float(distance)),
        look_at=(0.0, 0.0, 0.0),
        up=(0.0, 1.0, 0.0),
        vertical_fov=vfov,
        resolution=_as_resolution(resolution),
    )


def _as_resolution(resolution) -> tuple:
    if np.isscalar(resolution):
        return (int(resolution), int(resolution))
    return (int(resolution[0]), int(resolution[1]))


def make_gonio_trajectory(
    orbit_radius: float = DEFAULT_ORBIT_RADIUS,
    camera_distance: float = DEFAULT_CAMERA_DISTANCE,
    resolution=256,
    vfov: float = DEFAULT_VFOV,
    power: float = 1.0,
) -> Trajectory:
    """The standard 81-frame capture path (41 light-motion + 40 camera-motion)."""
    if orbit_radius <= 0 or camera_distance <= 0:
        raise InputError("radii must be positive")
    res = _as_resolution(resolution)
    n1, n2 = GONIO_SPLIT
    frames = []

    cam1 = top_down_camera(camera_distance, res, vfov)
    for i in range(n1):
        light = PointLight(orbit_position(2.0 * np.pi * i / n1, orbit_radius), power)
        frames.append(TrajectoryFrame(i, Phase.LIGHT_MOTION, cam1, light))

    light2 = PointLight((0.0, 0.0, orbit_radius), power)
    for j in range(n2):
        cam = CameraPose(
            position=orbit_position(2.0 * np.pi * j / n2, camera_distance),
            look_at=(0.0, 0.0, 0.0),
            up=(0.0, 1.0, 0.0),
            vertical_fov=vfov,
            resolution=res,
        )
        frames.append(TrajectoryFrame(n1 + j, Phase.CAMERA_MOTION, cam, light2))

    meta = {
        "orbit_radius": float(orbit_radius),
        "camera_distance": float(camera_distance),
        "vfov": float(vfov),
        "resolution": list(res),
        "split": list(GONIO_SPLIT),
    }
    return Trajectory(frames, Kind.GONIO81, meta)


def make_validation_grid(
    orbit_radius: float = DEFAULT_ORBIT_RADIUS,
    camera_distance: float = DEFAULT_CAMERA_DISTANCE,
    resolution=256,
    vfov: float = DEFAULT_VFOV,
    power: float = 1.0,
) -> Trajectory:
    """Held-out 3^4 grid: 9 camera x 9 light directions, camera-major order."""
    if orbit_radius <= 0 or camera_distance <= 0:
        raise InputError("radii must be positive")
    res = _as_resolution(resolution)
    dirs = []
    for x in GRID_COORDS:
        for y in GRID_COORDS:
            dirs.append(np.array([x, y, np.sqrt(1.0 - x * x - y * y)]))

    frames = []
    for ci, cdir in enumerate(dirs):
        cam = CameraPose(
            position=camera_distance * cdir,
            look_at=(0.0, 0.0, 0.0),
            up=(0.0, 1.0, 0.0),
            vertical_fov=vfov,
            resolution=res,
        )
        for li, ldir in enumerate(dirs):
            light = PointLight(orbit_radius * ldir, power)
            frames.append(TrajectoryFrame(9 * ci + li, Phase.GRID, cam, light))

    meta = {
        "orbit_radius": float(orbit_radius),
        "camera_distance": float(camera_distance),
        "vfov": float(vfov),
        "resolution": list(res),
    }
    return Trajectory(frames, Kind.GRID81, meta)


def subsample_frames(traj, count: int) -> list:
    """Uniformly spaced frame indices including both endpoints.

    When (N-1) is not divisible by (count-1), spacing rounds to the nearest
    integer index.
    """
    n = len(traj.frames) if hasattr(traj, "frames") else int(traj)
    if not 2 <= count <= n:
        raise InputError(f"count must lie in [2, {n}], got {count}")
    step = (n - 1) / (count - 1)
    idx = [int(round(i * step)) for i in range(count)]
    return idx
