"""Binary map files, export-stream files, weight blobs and PLY export.

All binary formats are little-endian and end with a CRC32 of every byte
before it. Map file layout::

    magic "C3DM" | version u32 | K u64 | D_f u32 | D_g u32 | step u32
    delta_mode u8 | delta params 3 x f64 | seed u64 | has_aabb u8 | aabb 6 x f64
    K records: position 3 x f32 | created u32 | updated u32 | semantic D_f x f32 | geometric D_g x f32
    crc32 u32
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFile, FormatError, InternalInvariantViolation, VersionError
from .fusion import ExportStream, FusedToken, PosEmbedConfig, Projector, Separator
from .memory import MemoryState, ThresholdPolicy

MAP_MAGIC = b"C3DM"
STREAM_MAGIC = b"C3DS"
WEIGHTS_MAGIC = b"C3DW"
VERSION = 1

_MAP_HEADER = struct.Struct("<4sIQIIIB3dQB6d")
_STREAM_HEADER = struct.Struct("<4sIIQ")
_WEIGHTS_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")
_MODES = {"static": 0, "dynamic": 1}


def _record_dtype(d_f: int, d_g: int) -> np.dtype:
    return np.dtype(
        [
            ("position", "<f4", (3,)),
            ("created", "<u4"),
            ("updated", "<u4"),
            ("semantic", "<f4", (d_f,)),
            ("geometric", "<f4", (d_g,)),
        ]
    )


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body))


def _open(data: bytes, magic: bytes, min_header: int) -> bytes:
    """Check length, CRC, magic and version; return the body without CRC."""
    if len(data) < min_header + _CRC.size:
        raise CorruptFile("file is truncated", offset=len(data))
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise CorruptFile("CRC32 mismatch", offset=len(body))
    if body[:4] != magic:
        raise FormatError(f"bad magic {body[:4]!r}, expected {magic!r}", offset=0)
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}", offset=4)
    return body


# -- maps ---------------------------------------------------------------------


def map_to_bytes(state: MemoryState) -> bytes:
    d_f, d_g = state.dims
    pol = state.delta_policy
    params = (pol.value, 0.0, 0.0) if pol.mode == "static" else (pol.ratio, pol.minimum, pol.maximum)
    has_aabb = state.aabb is not None
    aabb = tuple(state.aabb.reshape(-1)) if has_aabb else (0.0,) * 6
    header = _MAP_HEADER.pack(
        MAP_MAGIC, VERSION, len(state), d_f, d_g, state.step,
        _MODES[pol.mode], *params, state.rng_seed, has_aabb, *aabb,
    )
    rec = np.zeros(len(state), dtype=_record_dtype(d_f, d_g))
    rec["position"] = state.positions
    rec["created"] = state.created
    rec["updated"] = state.updated
    rec["semantic"] = state.semantic
    rec["geometric"] = state.geometric
    return _seal(header + rec.tobytes())


def map_from_bytes(data: bytes) -> MemoryState:
    body = _open(data, MAP_MAGIC, _MAP_HEADER.size)
    (_, _, k, d_f, d_g, step, mode, p0, p1, p2, seed, has_aabb, *aabb) = _MAP_HEADER.unpack_from(body)
    if mode == _MODES["static"]:
        policy = ThresholdPolicy.static(p0)
    elif mode == _MODES["dynamic"]:
        policy = ThresholdPolicy.dynamic(p0, p1, p2)
    else:
        raise FormatError(f"unknown delta mode {mode}", offset=28)
    dtype = _record_dtype(d_f, d_g)
    expected = _MAP_HEADER.size + k * dtype.itemsize
    if len(body) != expected:
        raise FormatError(
            f"header declares {k} tokens ({expected} bytes) but payload has {len(body)}",
            offset=min(len(body), expected),
        )
    rec = np.frombuffer(body, dtype=dtype, offset=_MAP_HEADER.size, count=k)
    state = MemoryState(
        positions=rec["position"],
        semantic=rec["semantic"],
        geometric=rec["geometric"],
        created=rec["created"].astype(np.int64),
        updated=rec["updated"].astype(np.int64),
        step=step,
        dims=(d_f, d_g),
        aabb=np.array(aabb).reshape(2, 3) if has_aabb else None,
        delta_policy=policy,
        rng_seed=seed,
    )
    try:
        state.validate()
    except InternalInvariantViolation as exc:
        raise FormatError(f"map violates state invariants: {exc}") from exc
    return state


def save_map(state: MemoryState, path) -> None:
    Path(path).write_bytes(map_to_bytes(state))


def load_map(path) -> MemoryState:
    return map_from_bytes(Path(path).read_bytes())


# -- export streams ---------------------------------------------------------


def stream_to_bytes(stream: ExportStream) -> bytes:
    tokens = stream.tokens
    dim = len(tokens[0].feature) if tokens else 0
    parts = [_STREAM_HEADER.pack(STREAM_MAGIC, VERSION, dim, len(stream.records))]
    for r in stream.records:
        if isinstance(r, Separator):
            parts.append(struct.pack("<BI", 0, r.timestep))
        else:
            parts.append(struct.pack("<BI", 1, r.timestep))
            parts.append(np.asarray(r.position, "<f4").tobytes())
            parts.append(np.asarray(r.feature, "<f4").tobytes())
    return _seal(b"".join(parts))


def stream_from_bytes(data: bytes) -> ExportStream:
    body = _open(data, STREAM_MAGIC, _STREAM_HEADER.size)
    _, _, dim, n = _STREAM_HEADER.unpack_from(body)
    off = _STREAM_HEADER.size
    records = []
    for _ in range(n):
        if off + 5 > len(body):
            raise FormatError("stream ends inside a record header", offset=off)
        kind, ts = struct.unpack_from("<BI", body, off)
        off += 5
        if kind == 0:
            records.append(Separator(ts))
        elif kind == 1:
            size = 4 * (3 + dim)
            if off + size > len(body):
                raise FormatError("stream ends inside a token record", offset=off)
            vals = np.frombuffer(body, "<f4", count=3 + dim, offset=off)
            records.append(FusedToken(vals[3:].copy(), vals[:3].copy(), ts))
            off += size
        else:
            raise FormatError(f"unknown record kind {kind}", offset=off - 5)
    if off != len(body):
        raise FormatError("trailing bytes after stream records", offset=off)
    return ExportStream(records)


def save_stream(stream: ExportStream, path) -> None:
    Path(path).write_bytes(stream_to_bytes(stream))


def load_stream(path) -> ExportStream:
    return stream_from_bytes(Path(path).read_bytes())


# -- weight blobs -------------------------------------------------------------


def weights_to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return _seal(b"".join(parts))


def weights_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    body = _open(data, WEIGHTS_MAGIC, _WEIGHTS_HEADER.size)
    _, _, n = _WEIGHTS_HEADER.unpack_from(body)
    off = _WEIGHTS_HEADER.size
    out = {}
    try:
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", body, off)
            name = body[off + 2 : off + 2 + klen].decode("utf-8")
            off += 2 + klen
            (ndim,) = struct.unpack_from("<B", body, off)
            shape = struct.unpack_from(f"<{ndim}I", body, off + 1)
            off += 1 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(body):
                raise FormatError(f"array {name!r} runs past end of blob", offset=off)
            out[name] = np.frombuffer(body, "<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except struct.error as exc:
        raise FormatError(f"truncated weight blob: {exc}", offset=off) from exc
    if off != len(body):
        raise FormatError("trailing bytes after weight arrays", offset=off)
    return out


def save_weights(arrays: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(weights_to_bytes(arrays))


def load_weights(path) -> dict[str, np.ndarray]:
    return weights_from_bytes(Path(path).read_bytes())


def model_arrays(proj: Projector, pe: PosEmbedConfig | None = None) -> dict[str, np.ndarray]:
    """Flatten a projector and positional-embedding config into named arrays."""
    arrays = {"projector.weights": proj.weights, "projector.bias": proj.bias}
    pe = pe or PosEmbedConfig()
    arrays[f"pe.{pe.variant}"] = np.zeros(0)
    if pe.variant == "fourier":
        arrays["pe.bases"] = pe.bases
        if pe.out_proj is not None:
            arrays["pe.out_proj"] = pe.out_proj
    elif pe.variant == "hrope":
        arrays["pe.bands"] = np.asarray(pe.bands)
    elif pe.variant == "rope4d":
        arrays["pe.rope_base"] = np.asarray([pe.rope_base])
    return arrays


def models_from_arrays(arrays: dict[str, np.ndarray]) -> tuple[Projector, PosEmbedConfig]:
    try:
        proj = Projector(arrays["projector.weights"], arrays["projector.bias"])
    except KeyError as exc:
        raise FormatError(f"weight blob lacks {exc}") from exc
    variants = [k[3:] for k in arrays if k.startswith("pe.") and arrays[k].size == 0]
    variant = variants[0] if variants else "none"
    if variant == "fourier":
        pe = PosEmbedConfig("fourier", bases=arrays["pe.bases"], out_proj=arrays.get("pe.out_proj"))
    elif variant == "hrope":
        pe = PosEmbedConfig("hrope", bands=tuple(float(b) for b in arrays["pe.bands"]))
    elif variant == "rope4d":
        pe = PosEmbedConfig("rope4d", rope_base=float(arrays["pe.rope_base"][0]))
    else:
        pe = PosEmbedConfig()
    return proj, pe


# -- PLY ----------------------------------------------------------------------


def step_color(step: int) -> tuple[int, int, int]:
    """Stable RGB for a creation step."""
    h = zlib.crc32(struct.pack("<I", step))
    return (h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF


def export_ply(state: MemoryState, path) -> None:
    """ASCII PLY with one colored vertex per token, color keyed on creation step."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(state)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(state.positions, state.created):
        r, g, b = step_color(int(c))
        lines.append(f"{float(p[0]):.9g} {float(p[1]):.9g} {float(p[2]):.9g} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_vertices(path) -> tuple[np.ndarray, np.ndarray]:
    """Positions (float32) and colors of an ASCII PLY written by ``export_ply``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError("not a PLY file", offset=0)
    n = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            body = lines[i + 1 : i + 1 + (n or 0)]
            break
    else:
        raise FormatError("PLY header has no end_header")
    rows = [line.split() for line in body]
    pos = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float32).reshape(-1, 3)
    col = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return pos, col
