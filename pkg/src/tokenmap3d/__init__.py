"""Recurrent, coordinate-indexed 3D token maps built from posed RGB-D style frames."""

from .errors import (
    ConfigError,
    CorruptFile,
    TokenMapError,
    FormatError,
    InternalInvariantViolation,
    InvalidFrame,
    InvalidInput,
    VersionError,
)
from .fusion import ExportStream, FusedToken, PosEmbedConfig, Projector, Separator, export, fuse
from .memory import MemoryState, MemoryToken, StepReport, ThresholdPolicy, step, subsample
from .patching import FrameBundle, GeomPatchEncoder, PatchTokenSet, pool_patches
from .spatial_index import SpatialIndex

__version__ = "0.1.0"

__all__ = [
    "TokenMapError",
    "ConfigError",
    "CorruptFile",
    "ExportStream",
    "FormatError",
    "FrameBundle",
    "FusedToken",
    "GeomPatchEncoder",
    "InternalInvariantViolation",
    "InvalidFrame",
    "InvalidInput",
    "MemoryState",
    "MemoryToken",
    "PatchTokenSet",
    "PosEmbedConfig",
    "Projector",
    "Separator",
    "SpatialIndex",
    "StepReport",
    "ThresholdPolicy",
    "VersionError",
    "export",
    "fuse",
    "pool_patches",
    "step",
    "subsample",
]
