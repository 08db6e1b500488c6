"""Frame inputs: the binary frame file format and a synthetic scene renderer.

The renderer stands in for a learned pointmap/feature estimator. It ray casts
axis-aligned boxes and infinite planes from a pinhole camera and emits
world-frame pointmaps, per-surface semantic features and normal-derived
geometric features.

Frame file layout (little-endian)::

    magic "C3DF" | version u32 | H u32 | W u32 | D_f u32 | D_g u32 | timestep u32 | flags u32
    pointmap  H*W*3   f32, row-major
    semantic  H*W*D_f f32
    geometric H*W*D_g f32
    valid mask, ceil(H*W/8) bytes, bit-packed LSB first
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError
from .patching import DEFAULT_PATCH_SIZE, FrameBundle

FRAME_MAGIC = b"C3DF"
FRAME_VERSION = 1
_HEADER = struct.Struct("<4s7I")


# -- frame files ------------------------------------------------------------


def frame_to_bytes(frame: FrameBundle) -> bytes:
    frame.validate()
    h, w = frame.height, frame.width
    d_f, d_g = frame.dims
    header = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, h, w, d_f, d_g, frame.timestep, 0)
    mask = np.packbits(frame.valid_mask.reshape(-1), bitorder="little")
    return b"".join(
        [
            header,
            frame.pointmap.astype("<f4").tobytes(),
            frame.semantic_map.astype("<f4").tobytes(),
            frame.geometric_map.astype("<f4").tobytes(),
            mask.tobytes(),
        ]
    )


def frame_from_bytes(data: bytes, patch_size: int = DEFAULT_PATCH_SIZE) -> FrameBundle:
    if len(data) < _HEADER.size:
        raise FormatError("truncated frame header", offset=len(data))
    magic, version, h, w, d_f, d_g, timestep, flags = _HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}", offset=0)
    if version != FRAME_VERSION:
        raise FormatError(f"unsupported frame version {version}", offset=4)
    if flags != 0:
        raise FormatError(f"unknown frame flags {flags:#x}", offset=28)

    n = h * w
    sections = [
        ("pointmap", n * 3 * 4),
        ("semantic", n * d_f * 4),
        ("geometric", n * d_g * 4),
        ("mask", (n + 7) // 8),
    ]
    arrays = {}
    offset = _HEADER.size
    for name, size in sections:
        if offset + size > len(data):
            raise FormatError(f"frame payload ends inside {name} section", offset=offset)
        arrays[name] = data[offset : offset + size]
        offset += size
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after frame payload", offset=offset)

    mask = np.unpackbits(np.frombuffer(arrays["mask"], np.uint8), count=n, bitorder="little")
    return FrameBundle(
        pointmap=np.frombuffer(arrays["pointmap"], "<f4").reshape(h, w, 3),
        semantic_map=np.frombuffer(arrays["semantic"], "<f4").reshape(h, w, d_f),
        geometric_map=np.frombuffer(arrays["geometric"], "<f4").reshape(h, w, d_g),
        valid_mask=mask.reshape(h, w).astype(bool),
        timestep=timestep,
        patch_size=patch_size,
    )


def save_frame(frame: FrameBundle, path) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame(path, patch_size: int = DEFAULT_PATCH_SIZE) -> FrameBundle:
    return frame_from_bytes(Path(path).read_bytes(), patch_size)


def iter_frame_dir(path, patch_size: int = DEFAULT_PATCH_SIZE) -> Iterator[FrameBundle]:
    """Frames of a directory in file-name order."""
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"frame directory {root} does not exist")
    files = sorted(root.glob("*.c3df"))
    if not files:
        raise FormatError(f"no .c3df frames in {root}")
    for f in files:
        try:
            yield load_frame(f, patch_size)
        except FormatError as exc:
            raise FormatError(f"{f.name}: {exc}") from exc


# -- scene description ------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; face ``2 * axis + is_max`` gets semantic id ``surface_id + face``."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]
    surface_id: int = 0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    kind: str = "box"


@dataclass(frozen=True)
class Plane:
    """Infinite plane; the side facing ``normal`` is ``surface_id``, the back ``surface_id + 1``."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    surface_id: int = 0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    kind: str = "plane"


Primitive = Union[Box, Plane]


@dataclass(frozen=True)
class Orbit:
    """Camera circling ``center`` at ``radius``, raised by ``height``, looking at ``center``."""

    center: tuple[float, float, float]
    radius: float
    n_frames: int
    revolutions: float = 1.0
    height: float = 0.0
    kind: str = "orbit"

    def pose(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        # Phase reduced modulo one turn so revisited poses are bit-identical.
        phase = math.fmod(i * self.revolutions, self.n_frames) / self.n_frames
        theta = 2.0 * math.pi * phase
        c = np.asarray(self.center, dtype=np.float64)
        eye = c + np.array(
            [self.radius * math.cos(theta), self.radius * math.sin(theta), self.height]
        )
        return eye, c


@dataclass(frozen=True)
class Waypoints:
    """Explicit ``(eye, target)`` pairs."""

    poses: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...]
    kind: str = "waypoints"

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def pose(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        eye, target = self.poses[i]
        return np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64)


Trajectory = Union[Orbit, Waypoints]


@dataclass(frozen=True)
class Camera:
    fov_deg: float = 60.0
    height: int = 384
    width: int = 512


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    trajectory: Trajectory
    camera: Camera = field(default_factory=Camera)
    noise: float = 0.0
    seed: int = 0
    dim_f: int = 32
    dim_g: int = 16
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if self.trajectory.n_frames < 1:
            raise ConfigError("trajectory needs at least one frame")
        if not self.noise >= 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.dim_f < 1 or self.dim_g < 1:
            raise ConfigError("feature dims must be positive")

    @property
    def n_frames(self) -> int:
        return self.trajectory.n_frames

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            prims = []
            for p in d.get("primitives", []):
                p = dict(p)
                kind = p.pop("kind", "box")
                prims.append(_tuplify(Box(**p) if kind == "box" else Plane(**p)))
            t = dict(d["trajectory"])
            kind = t.pop("kind", "orbit")
            if kind == "orbit":
                traj = _tuplify(Orbit(**t))
            elif kind == "waypoints":
                traj = Waypoints(tuple((tuple(e), tuple(g)) for e, g in t["poses"]))
            else:
                raise ConfigError(f"unknown trajectory kind {kind!r}")
            rest = {k: v for k, v in d.items() if k not in ("primitives", "trajectory", "camera")}
            return cls(tuple(prims), traj, Camera(**d.get("camera", {})), **rest)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid scene spec: {exc}") from exc


def _tuplify(obj):
    changes = {
        k: tuple(v) for k, v in asdict(obj).items() if isinstance(v, list)
    }
    return replace(obj, **changes) if changes else obj


def load_scene(path) -> SceneSpec:
    """Read a scene from JSON, or YAML when the suffix says so."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scene file {p} not found")
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return SceneSpec.from_dict(data)


def room_scene(
    n_frames: int = 64,
    revolutions: float = 2.0,
    noise: float = 0.0,
    seed: int = 0,
    dim_f: int = 32,
    dim_g: int = 16,
    camera: Camera | None = None,
) -> SceneSpec:
    """A 5 x 4 x 3 m room with a table and a cabinet, seen from a central orbit."""
    prims = (
        Box((-2.5, -2.0, 0.0), (2.5, 2.0, 3.0), surface_id=0, color=(0.8, 0.8, 0.75)),
        Box((-0.6, -0.4, 0.0), (0.6, 0.4, 0.75), surface_id=10, color=(0.55, 0.35, 0.2)),
        Box((1.6, 1.2, 0.0), (2.3, 1.9, 1.8), surface_id=20, color=(0.2, 0.3, 0.6)),
    )
    traj = Orbit(center=(0.0, 0.0, 1.4), radius=1.2, n_frames=n_frames,
                 revolutions=revolutions, height=0.1)
    return SceneSpec(prims, traj, camera or Camera(), noise, seed, dim_f, dim_g)


PRESETS = {"room": room_scene}


# -- rendering --------------------------------------------------------------

_EPS = 1e-9


def camera_rays(eye, target, camera: Camera) -> np.ndarray:
    """Unit ray directions, shape ``(H, W, 3)``; z is world up."""
    if not (0.0 < camera.fov_deg < 180.0) or camera.height < 1 or camera.width < 1:
        raise ConfigError(f"degenerate camera {camera}")
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    n = np.linalg.norm(fwd)
    if n < _EPS:
        raise ConfigError("camera eye and target coincide")
    fwd /= n
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-9:
        raise ConfigError("camera looks straight along the up axis")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    focal = 0.5 * camera.width / math.tan(math.radians(camera.fov_deg) / 2.0)
    u = np.arange(camera.width) + 0.5 - camera.width / 2.0
    v = np.arange(camera.height) + 0.5 - camera.height / 2.0
    dirs = (
        fwd * focal
        + right * u[None, :, None]
        + down * v[:, None, None]
    )
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _hit_plane(o, d, prim: Plane):
    """Ray parameter, hit points, face normal (toward the camera) and face index."""
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(prim.point, dtype=np.float64)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - o) @ n) / denom
    t = np.where((np.abs(denom) > _EPS) & (t > _EPS), t, np.inf)
    face = (denom > 0).astype(np.int64)
    return t, face


def _plane_faces(prim: Plane) -> np.ndarray:
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return np.stack([n, -n])


def _hit_box(o, d, prim: Box):
    lo = np.asarray(prim.min, dtype=np.float64)
    hi = np.asarray(prim.max, dtype=np.float64)
    near, far = [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            da = np.ascontiguousarray(d[:, a])
            t1 = (lo[a] - o[a]) / da
            t2 = (hi[a] - o[a]) / da
            near.append(np.fmin(t1, t2))
            far.append(np.fmax(t1, t2))
    t_in = np.fmax(np.fmax(near[0], near[1]), near[2])
    t_out = np.fmin(np.fmin(far[0], far[1]), far[2])
    entering = t_in > _EPS
    hit = (t_out >= t_in) & (t_out > _EPS)
    t = np.where(hit, np.where(entering, t_in, t_out), np.inf)
    # Face axis: the slab that set t_in (entering) or t_out (leaving from inside).
    axis = np.where(
        entering,
        np.where(near[0] == t_in, 0, np.where(near[1] == t_in, 1, 2)),
        np.where(far[0] == t_out, 0, np.where(far[1] == t_out, 1, 2)),
    )
    positive = np.choose(axis, (d[:, 0], d[:, 1], d[:, 2])) > 0
    # Entering hits the face the ray approaches; exiting from inside hits the far face.
    use_hi = np.where(entering, ~positive, positive)
    face = 2 * axis + use_hi
    return t, face


def _box_faces(prim: Box) -> np.ndarray:
    """Normal of each face ``2 * axis + is_max`` as seen from the ray's side."""
    faces = np.zeros((6, 3))
    for axis in range(3):
        faces[2 * axis, axis] = -1.0
        faces[2 * axis + 1, axis] = 1.0
    return faces


def _surface_features(spec: SceneSpec, sid: int, color, normal) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 7919, sid])
    sem = rng.normal(size=spec.dim_f)
    sem /= np.linalg.norm(sem)
    k = min(3, spec.dim_f)
    sem[:k] += np.asarray(color, dtype=np.float64)[:k]

    geo = np.zeros(spec.dim_g)
    k = min(3, spec.dim_g)
    geo[:k] = normal[:k]
    if spec.dim_g > 3:
        mix = np.random.default_rng([spec.seed, 104729]).normal(size=(3, spec.dim_g - 3))
        geo[3:] = np.tanh(normal @ mix)
    return sem, geo


def render_frame(spec: SceneSpec, frame_idx: int) -> FrameBundle:
    """Ray cast frame ``frame_idx`` of the trajectory; timestep is ``frame_idx + 1``."""
    if not 0 <= frame_idx < spec.n_frames:
        raise ConfigError(f"frame {frame_idx} outside trajectory of {spec.n_frames}")
    cam = spec.camera
    if cam.height % spec.patch_size or cam.width % spec.patch_size:
        raise ConfigError(
            f"image {cam.height}x{cam.width} not divisible by patch size {spec.patch_size}"
        )
    eye, target = spec.trajectory.pose(frame_idx)
    d = camera_rays(eye, target, cam).reshape(-1, 3)
    n = len(d)
    h, w = cam.height, cam.width

    ts, faces = [], []
    for prim in spec.primitives:
        hit = _hit_box if isinstance(prim, Box) else _hit_plane
        t, face = hit(eye, d, prim)
        ts.append(t)
        faces.append(face)
    if ts:
        ts = np.stack(ts)
        winner = np.argmin(ts, axis=0)
        best_t = ts[winner, np.arange(n)]
    else:
        winner = np.zeros(n, dtype=np.int64)
        best_t = np.full(n, np.inf)
    valid = np.isfinite(best_t)

    pts = np.zeros((n, 3))
    pts[valid] = eye + best_t[valid, None] * d[valid]
    semantic = np.zeros((n, spec.dim_f), dtype=np.float32)
    geometric = np.zeros((n, spec.dim_g), dtype=np.float32)
    for k, prim in enumerate(spec.primitives):
        rows = np.flatnonzero(valid & (winner == k))
        if rows.size == 0:
            continue
        face = faces[k][rows]
        if isinstance(prim, Box):
            axis = face // 2
            bounds = np.stack([prim.min, prim.max]).astype(np.float64)
            # Snap the hit coordinate onto the face plane exactly.
            pts[rows, axis] = bounds[face % 2, axis]
            normals = _box_faces(prim)
        else:
            normals = _plane_faces(prim)
        for f in np.unique(face):
            sem, geo = _surface_features(spec, prim.surface_id + int(f), prim.color, normals[f])
            sel = rows[face == f]
            semantic[sel] = sem
            geometric[sel] = geo

    if spec.noise > 0:
        rng = np.random.default_rng([spec.seed, frame_idx])
        pts = pts + rng.normal(scale=spec.noise, size=pts.shape)
        pts[~valid] = 0.0

    return FrameBundle(
        pointmap=pts.reshape(h, w, 3),
        semantic_map=semantic.reshape(h, w, spec.dim_f),
        geometric_map=geometric.reshape(h, w, spec.dim_g),
        valid_mask=valid.reshape(h, w),
        timestep=frame_idx + 1,
        patch_size=spec.patch_size,
    )


def iter_scene(spec: SceneSpec, frames: Sequence[int] | None = None) -> Iterator[FrameBundle]:
    for i in range(spec.n_frames) if frames is None else frames:
        yield render_frame(spec, i)
