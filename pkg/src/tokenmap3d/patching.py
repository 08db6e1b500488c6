"""Per-frame patch pooling: dense pointmap and feature maps to patch tokens.

Positions and semantic features are masked means over each ``P x P`` pixel
patch. Geometric features go through a pluggable patch encoder; the learned
encoder of the original pipeline is replaced by analytic stand-ins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidFrame

DEFAULT_PATCH_SIZE = 32


@dataclass(eq=False)
class FrameBundle:
    """One frame: world-frame pointmap, feature maps and validity mask."""

    pointmap: np.ndarray
    semantic_map: np.ndarray
    geometric_map: np.ndarray
    valid_mask: np.ndarray
    timestep: int
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        self.pointmap = np.asarray(self.pointmap, dtype=np.float32)
        self.semantic_map = np.asarray(self.semantic_map, dtype=np.float32)
        self.geometric_map = np.asarray(self.geometric_map, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        self.timestep = int(self.timestep)
        self.patch_size = int(self.patch_size)

    @property
    def height(self) -> int:
        return self.pointmap.shape[0]

    @property
    def width(self) -> int:
        return self.pointmap.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.semantic_map.shape[2], self.geometric_map.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    def validate(self) -> None:
        if self.pointmap.ndim != 3 or self.pointmap.shape[2] != 3:
            raise InvalidFrame(f"pointmap must be HxWx3, got {self.pointmap.shape}")
        hw = self.pointmap.shape[:2]
        for name in ("semantic_map", "geometric_map"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != hw:
                raise InvalidFrame(f"{name} shape {arr.shape} does not match pointmap {hw}")
        if self.valid_mask.shape != hw:
            raise InvalidFrame(f"valid_mask shape {self.valid_mask.shape} != {hw}")
        if self.timestep < 0:
            raise InvalidFrame("timestep must be non-negative")
        p = self.patch_size
        if p <= 0 or hw[0] % p or hw[1] % p:
            raise InvalidFrame(f"frame {hw[0]}x{hw[1]} is not divisible by patch size {p}")
        m = self.valid_mask
        for name in ("pointmap", "semantic_map", "geometric_map"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all() and not np.isfinite(arr[m]).all():
                raise InvalidFrame(f"{name} has non-finite values at valid pixels")


def _rows(arr, n: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    return arr.reshape(n, arr.shape[-1] if arr.ndim > 1 else -1)


@dataclass(eq=False)
class PatchTokenSet:
    """Pooled tokens of one frame in row-major patch order."""

    positions: np.ndarray
    semantic: np.ndarray
    geometric: np.ndarray
    coords: np.ndarray | None = None
    grid: tuple[int, int] | None = None
    timestep: int = 1

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = len(self.positions)
        self.semantic = _rows(self.semantic, n)
        self.geometric = _rows(self.geometric, n)
        if self.coords is None:
            self.coords = np.stack([np.zeros(n, np.int64), np.arange(n)], axis=1)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(n, 2)
        if self.grid is None:
            self.grid = (1, n)
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        self.timestep = int(self.timestep)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dims(self) -> tuple[int, int]:
        return self.semantic.shape[1], self.geometric.shape[1]

    @property
    def tokens(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int]]]:
        return [
            (self.positions[i], self.semantic[i], self.geometric[i], tuple(self.coords[i]))
            for i in range(len(self))
        ]

    def subset(self, idx) -> "PatchTokenSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchTokenSet(
            self.positions[idx],
            self.semantic[idx],
            self.geometric[idx],
            self.coords[idx],
            self.grid,
            self.timestep,
        )


@dataclass(frozen=True, eq=False)
class GeomPatchEncoder:
    """Patch-level geometric feature extractor.

    ``masked_mean`` mirrors position pooling, ``strided_max`` keeps the
    per-channel maximum, and ``external`` applies an affine map
    ``g @ weights + bias`` (weights stored input-major, ``D_g x D_g``) to the
    masked mean.
    """

    mode: str = "masked_mean"
    weights: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("masked_mean", "strided_max", "external"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "external" and self.weights is None:
            raise ConfigError("external encoder needs weights")

    @classmethod
    def external(cls, weights, bias=None) -> "GeomPatchEncoder":
        w = np.asarray(weights, dtype=np.float64)
        b = np.zeros(w.shape[-1]) if bias is None else np.asarray(bias, dtype=np.float64)
        return cls("external", w, b)


def _blocks(arr: np.ndarray, p: int) -> np.ndarray:
    """(H, W, C) -> (H/p, p, W/p, p, C) view; patch pixels span axes 1 and 3."""
    h, w, c = arr.shape
    return arr.reshape(h // p, p, w // p, p, c)


def _patch_means(arr: np.ndarray, mask: np.ndarray | None, p: int):
    x = _blocks(arr, p)
    gh, gw = x.shape[0], x.shape[2]
    if mask is None or mask.all():
        counts = np.full((gh, gw), p * p)
    else:
        m = _blocks(mask[..., None], p)
        x = np.where(m, x, 0)
        counts = m[..., 0].sum(axis=(1, 3))
    sums = x.sum(axis=(1, 3), dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[..., None].astype(np.float64)
    return np.where(counts[..., None] > 0, means, 0.0), counts


def pool_mean(arr: np.ndarray, mask: np.ndarray | None, patch_size: int) -> np.ndarray:
    """Per-patch mean over valid pixels; ``mask=None`` averages every pixel."""
    return _patch_means(arr, mask, patch_size)[0]


def encode_geometry(frame: FrameBundle, encoder: GeomPatchEncoder | None = None) -> np.ndarray:
    """Geometric feature for every patch of the grid, shape ``(gh, gw, D_g)``.

    Patches without valid pixels get zeros; ``pool_patches`` drops them.
    """
    encoder = encoder or GeomPatchEncoder()
    p = frame.patch_size
    g = frame.geometric_map
    d_g = g.shape[2]
    if encoder.mode == "strided_max":
        m = _blocks(frame.valid_mask[..., None], p)
        x = np.where(m, _blocks(g, p), -np.inf).max(axis=(1, 3)).astype(np.float64)
        return np.where(np.isfinite(x), x, 0.0)

    means = pool_mean(g, frame.valid_mask, p)
    if encoder.mode == "masked_mean":
        return means
    w, b = encoder.weights, encoder.bias
    if w.shape != (d_g, d_g) or b.shape != (d_g,):
        raise ConfigError(
            f"encoder weights {w.shape} / bias {b.shape} do not fit D_g={d_g}"
        )
    return means @ w + b


def pool_patches(frame: FrameBundle, encoder: GeomPatchEncoder | None = None) -> PatchTokenSet:
    """Pool a frame into patch tokens; patches with no valid pixel are omitted."""
    frame.validate()
    p = frame.patch_size
    positions, counts = _patch_means(frame.pointmap, frame.valid_mask, p)
    semantic = pool_mean(frame.semantic_map, frame.valid_mask, p)
    geometric = encode_geometry(frame, encoder)
    keep = counts > 0
    rows, cols = np.nonzero(keep)
    return PatchTokenSet(
        positions=positions[keep].astype(np.float32),
        semantic=semantic[keep].astype(np.float32),
        geometric=geometric[keep].astype(np.float32),
        coords=np.stack([rows, cols], axis=1),
        grid=frame.grid,
        timestep=frame.timestep,
    )
