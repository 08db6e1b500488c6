"""Token fusion, positional embeddings and the time-ordered export stream.

A map token is turned into one decoder-ready vector as
``semantic + geometric @ W + b``, optionally followed by a positional
embedding: an additive Fourier embedding of the position, or a rotary one
(per-axis multi-band rotation, or 4-group ``(t, x, y, z)`` rotation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError
from .memory import MemoryState, MemoryToken


@dataclass(frozen=True, eq=False)
class Projector:
    """Affine map from geometric to semantic space; ``weights`` is ``D_g x D_f``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ConfigError(f"projector weights {w.shape} and bias {b.shape} disagree")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ConfigError("projector has non-finite entries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def dims(self) -> tuple[int, int]:
        """``(D_f, D_g)``, matching ``MemoryState.dims``."""
        return self.weights.shape[1], self.weights.shape[0]

    @classmethod
    def zeros(cls, dim_f: int, dim_g: int) -> "Projector":
        return cls(np.zeros((dim_g, dim_f)), np.zeros(dim_f))

    @classmethod
    def random(cls, dim_f: int, dim_g: int, seed: int = 0, scale: float | None = None) -> "Projector":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim_g) if scale is None else scale
        w = rng.normal(scale=scale, size=(dim_g, dim_f)).astype(np.float32)
        return cls(w, np.zeros(dim_f))


def fuse_arrays(semantic: np.ndarray, geometric: np.ndarray, proj: Projector) -> np.ndarray:
    f = np.asarray(semantic, dtype=np.float64)
    g = np.asarray(geometric, dtype=np.float64)
    d_f, d_g = proj.dims
    if f.shape[-1] != d_f or g.shape[-1] != d_g:
        raise ConfigError(
            f"projector expects D_f={d_f}, D_g={d_g}; got {f.shape[-1]}, {g.shape[-1]}"
        )
    return f + (g @ proj.weights + proj.bias)


def fuse(token: MemoryToken, proj: Projector) -> np.ndarray:
    return fuse_arrays(token.semantic, token.geometric, proj)


def fourier_pe(p, bases) -> np.ndarray:
    """``concat(sin(bases @ p), cos(bases @ p))`` for one or many positions."""
    b = np.asarray(bases, dtype=np.float64).reshape(-1, 3)
    phase = np.asarray(p, dtype=np.float64) @ b.T
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _rotate_pairs(v: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate consecutive ``(v[2i], v[2i+1])`` pairs by ``angles[..., i]``."""
    v = np.asarray(v, dtype=np.float64)
    x, y = v[..., 0::2], v[..., 1::2]
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty(np.broadcast_shapes(v.shape, angles.shape[:-1] + (v.shape[-1],)))
    out[..., 0::2] = x * c - y * s
    out[..., 1::2] = x * s + y * c
    return out


def hrope(v, p, bands) -> np.ndarray:
    """Hierarchical rotary embedding.

    ``v`` is split into ``len(bands) * 3`` equal groups, band-major then axis
    x, y, z. Every pair in group ``(b, a)`` is rotated by ``bands[b] * p[a]``.
    """
    v = np.asarray(v, dtype=np.float64)
    bands = np.asarray(bands, dtype=np.float64).reshape(-1)
    groups = 3 * len(bands)
    d = v.shape[-1]
    if groups == 0 or d % (2 * groups):
        raise ConfigError(f"dim {d} not divisible into {groups} rotary pair groups")
    p = np.asarray(p, dtype=np.float64)
    group_angles = (bands[:, None] * p[..., None, :]).reshape(p.shape[:-1] + (groups,))
    return _rotate_pairs(v, np.repeat(group_angles, d // (2 * groups), axis=-1))


def rope4d(v, coords, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding over four coordinate groups ``(t, x, y, z)``.

    Pair ``i`` of a group with ``m`` pairs turns at ``base ** (-i / m)`` times
    the group's coordinate.
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    if d % 8:
        raise ConfigError(f"dim {d} not divisible by 8 for 4-group rotary embedding")
    m = d // 8
    freqs = base ** (-np.arange(m) / m)
    coords = np.asarray(coords, dtype=np.float64)
    angles = (coords[..., :, None] * freqs).reshape(coords.shape[:-1] + (4 * m,))
    return _rotate_pairs(v, angles)


@dataclass(frozen=True, eq=False)
class PosEmbedConfig:
    """Positional embedding applied after fusion.

    ``variant`` is one of ``none``, ``fourier`` (additive; ``bases`` is
    ``B x 3``, ``out_proj`` maps ``2B -> D_f`` when they differ), ``hrope``
    (rotary; ``bands``) or ``rope4d`` (rotary; ``rope_base``).
    """

    variant: str = "none"
    bases: np.ndarray | None = field(default=None, repr=False)
    out_proj: np.ndarray | None = field(default=None, repr=False)
    bands: tuple[float, ...] = ()
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.variant not in ("none", "fourier", "hrope", "rope4d"):
            raise ConfigError(f"unknown positional embedding {self.variant!r}")
        if self.variant == "fourier" and self.bases is None:
            raise ConfigError("fourier embedding needs bases")
        if self.variant == "hrope" and not self.bands:
            raise ConfigError("hrope needs at least one band")

    @classmethod
    def fourier(cls, dim_f: int, n_bases: int | None = None, seed: int = 0, scale: float = 1.0):
        """Seeded Gaussian bases; a random ``2B x D_f`` map is added if needed."""
        n_bases = dim_f // 2 if n_bases is None else n_bases
        rng = np.random.default_rng(seed)
        # float32 values so the arrays survive a weight blob round trip.
        bases = rng.normal(scale=scale, size=(n_bases, 3)).astype(np.float32)
        out = None
        if 2 * n_bases != dim_f:
            out = rng.normal(scale=1.0 / np.sqrt(2 * n_bases), size=(2 * n_bases, dim_f))
            out = out.astype(np.float32)
        return cls("fourier", bases=bases, out_proj=out)

    def apply(self, v: np.ndarray, positions: np.ndarray, timesteps: np.ndarray) -> np.ndarray:
        if self.variant == "none":
            return np.asarray(v, dtype=np.float64)
        if self.variant == "fourier":
            pe = fourier_pe(positions, self.bases)
            if self.out_proj is not None:
                pe = pe @ np.asarray(self.out_proj, dtype=np.float64)
            if pe.shape[-1] != v.shape[-1]:
                raise ConfigError(f"fourier embedding dim {pe.shape[-1]} != D_f {v.shape[-1]}")
            return v + pe
        if self.variant == "hrope":
            return hrope(v, positions, self.bands)
        coords = np.concatenate(
            [np.asarray(timesteps, dtype=np.float64)[..., None], np.asarray(positions, np.float64)],
            axis=-1,
        )
        return rope4d(v, coords, self.rope_base)


@dataclass(frozen=True)
class Separator:
    timestep: int


@dataclass(frozen=True, eq=False)
class FusedToken:
    feature: np.ndarray
    position: np.ndarray
    timestep: int


Record = Union[Separator, FusedToken]


@dataclass(eq=False)
class ExportStream:
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def tokens(self) -> list[FusedToken]:
        return [r for r in self.records if isinstance(r, FusedToken)]

    @property
    def separators(self) -> list[Separator]:
        return [r for r in self.records if isinstance(r, Separator)]


def export(state: MemoryState, proj: Projector, pe: PosEmbedConfig | None = None) -> ExportStream:
    """Fused tokens in order of last update, a separator before each timestep.

    Features are computed in float64 and stored as float32.
    """
    pe = pe or PosEmbedConfig()
    order = np.argsort(state.updated, kind="stable")
    positions = state.positions[order].astype(np.float64)
    steps = state.updated[order]
    fused = fuse_arrays(state.semantic[order], state.geometric[order], proj)
    fused = pe.apply(fused, positions, steps).astype(np.float32)
    positions = state.positions[order]

    records: list[Record] = []
    current = None
    for i in range(len(order)):
        ts = int(steps[i])
        if ts != current:
            records.append(Separator(ts))
            current = ts
        records.append(FusedToken(fused[i], positions[i], ts))
    return ExportStream(records)
