"""Streaming 3D token map and its per-frame recurrent update.

Each step splits the current tokens into those near the incoming patch
tokens (updated: overwritten by the mean of their new neighbors) and those
far from it (retained as-is), then appends the incoming tokens that are at
least ``delta`` away from every pre-update token.

Arrays are float32 at rest; distances and means are computed in float64.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InternalInvariantViolation, InvalidFrame
from .patching import PatchTokenSet
from .spatial_index import SpatialIndex, point_distances

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 8000


@dataclass(frozen=True)
class ThresholdPolicy:
    """How the merge radius ``delta`` is chosen at each step.

    ``static`` always uses ``value``. ``dynamic`` scales the diagonal of the
    running scene bounding box by ``ratio`` and clamps to
    ``[minimum, maximum]``.
    """

    mode: str = "dynamic"
    value: float = 0.2
    ratio: float = 0.03
    minimum: float = 0.01
    maximum: float = 1.0

    def __post_init__(self):
        if self.mode == "static":
            if not (np.isfinite(self.value) and self.value > 0):
                raise ConfigError(f"static delta must be positive, got {self.value}")
        elif self.mode == "dynamic":
            if not (np.isfinite(self.ratio) and self.ratio > 0):
                raise ConfigError(f"dynamic ratio must be positive, got {self.ratio}")
            if not (0 < self.minimum <= self.maximum and np.isfinite(self.maximum)):
                raise ConfigError(
                    f"dynamic bounds need 0 < min <= max, got {self.minimum}, {self.maximum}"
                )
        else:
            raise ConfigError(f"unknown threshold mode {self.mode!r}")

    @classmethod
    def static(cls, value: float = 0.2) -> "ThresholdPolicy":
        return cls("static", value=float(value))

    @classmethod
    def dynamic(
        cls, ratio: float = 0.03, minimum: float = 0.01, maximum: float = 1.0
    ) -> "ThresholdPolicy":
        return cls("dynamic", ratio=float(ratio), minimum=float(minimum), maximum=float(maximum))

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        """Parse ``static:V`` or ``dynamic:RATIO,MIN,MAX``."""
        mode, _, args = text.partition(":")
        try:
            values = [float(a) for a in args.split(",")] if args else []
        except ValueError as exc:
            raise ConfigError(f"bad delta policy {text!r}") from exc
        if mode == "static" and len(values) == 1:
            return cls.static(values[0])
        if mode == "dynamic" and len(values) in (1, 3):
            return cls.dynamic(*values)
        raise ConfigError(f"bad delta policy {text!r}; use static:V or dynamic:RATIO,MIN,MAX")

    def __str__(self) -> str:
        if self.mode == "static":
            return f"static:{self.value!r}"
        return f"dynamic:{self.ratio!r},{self.minimum!r},{self.maximum!r}"


@dataclass(frozen=True, eq=False)
class MemoryToken:
    position: np.ndarray
    semantic: np.ndarray
    geometric: np.ndarray
    created_step: int
    updated_step: int


@dataclass(frozen=True, eq=False)
class MemoryState:
    """Immutable snapshot of the map after ``step`` frames.

    Token ``k`` is row ``k`` of the parallel arrays. ``aabb`` is the running
    ``(2, 3)`` bounding box of every position ever ingested, or ``None`` before
    the first frame.
    """

    positions: np.ndarray
    semantic: np.ndarray
    geometric: np.ndarray
    created: np.ndarray
    updated: np.ndarray
    step: int
    dims: tuple[int, int]
    aabb: np.ndarray | None
    delta_policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    rng_seed: int = 0

    def __post_init__(self):
        d_f, d_g = self.dims
        for name, shape, dtype in (
            ("positions", (-1, 3), np.float32),
            ("semantic", (-1, d_f), np.float32),
            ("geometric", (-1, d_g), np.float32),
            ("created", (-1,), np.int64),
            ("updated", (-1,), np.int64),
        ):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.aabb is not None:
            box = np.array(self.aabb, dtype=np.float64).reshape(2, 3)
            box.setflags(write=False)
            object.__setattr__(self, "aabb", box)
        object.__setattr__(self, "dims", (int(d_f), int(d_g)))
        object.__setattr__(self, "step", int(self.step))
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    @classmethod
    def empty(
        cls, dim_f: int, dim_g: int, policy: ThresholdPolicy | None = None, seed: int = 0
    ) -> "MemoryState":
        return cls(
            positions=np.zeros((0, 3)),
            semantic=np.zeros((0, dim_f)),
            geometric=np.zeros((0, dim_g)),
            created=np.zeros(0),
            updated=np.zeros(0),
            step=0,
            dims=(dim_f, dim_g),
            aabb=None,
            delta_policy=policy or ThresholdPolicy(),
            rng_seed=seed,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def token(self, k: int) -> MemoryToken:
        return MemoryToken(
            self.positions[k],
            self.semantic[k],
            self.geometric[k],
            int(self.created[k]),
            int(self.updated[k]),
        )

    @property
    def tokens(self) -> list[MemoryToken]:
        return [self.token(k) for k in range(len(self))]

    def replace(self, **changes) -> "MemoryState":
        fields = {
            name: getattr(self, name)
            for name in (
                "positions", "semantic", "geometric", "created", "updated",
                "step", "dims", "aabb", "delta_policy", "rng_seed",
            )
        }
        fields.update(changes)
        return MemoryState(**fields)

    def validate(self) -> None:
        """Raise ``InternalInvariantViolation`` if any state invariant fails."""
        n = len(self)
        if not all(len(a) == n for a in (self.semantic, self.geometric, self.created, self.updated)):
            raise InternalInvariantViolation("token arrays disagree on K")
        if (self.step == 0) != (n == 0):
            raise InternalInvariantViolation(f"step {self.step} with {n} tokens")
        for name in ("positions", "semantic", "geometric"):
            if not np.isfinite(getattr(self, name)).all():
                raise InternalInvariantViolation(f"non-finite {name}")
        if (self.created > self.updated).any() or (self.created < 0).any():
            raise InternalInvariantViolation("created_step must be <= updated_step")
        if n:
            if self.aabb is None:
                raise InternalInvariantViolation("missing bounding box")
            p = self.positions.astype(np.float64)
            if (p < self.aabb[0]).any() or (p > self.aabb[1]).any():
                raise InternalInvariantViolation("token outside bounding box")


@dataclass
class StepReport:
    timestep: int
    retained: int
    updated: int
    added: int
    total_before: int
    total_after: int
    delta_used: float
    timings: dict[str, float] = field(default_factory=dict)
    warning: str | None = None

    def as_row(self) -> dict:
        row = {
            "timestep": self.timestep,
            "retained": self.retained,
            "updated": self.updated,
            "added": self.added,
            "total_before": self.total_before,
            "total_after": self.total_after,
            "delta": self.delta_used,
        }
        row.update({f"ms_{k}": round(v * 1e3, 4) for k, v in self.timings.items()})
        row["warning"] = self.warning or ""
        return row


# -- operations -------------------------------------------------------------


def _mean_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows.sum(axis=0) / len(rows)


def _segment_means(values: np.ndarray, ids: np.ndarray, starts: np.ndarray, counts: np.ndarray):
    """Row means of ``values[ids]`` over consecutive segments.

    Accumulates each segment row by row, the same order as ``_mean_rows``, so
    both give identical bits.
    """
    rows = values[ids].astype(np.float64)
    return np.add.reduceat(rows, starts, axis=0) / counts[:, None].astype(np.float64)


def effective_delta(state: MemoryState, new_tokens: PatchTokenSet) -> float:
    if len(new_tokens) == 0:
        raise InvalidFrame("cannot pick delta for an empty token set")
    policy = state.delta_policy
    if policy.mode == "static":
        return policy.value
    pts = new_tokens.positions.astype(np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if state.aabb is not None:
        lo = np.minimum(lo, state.aabb[0])
        hi = np.maximum(hi, state.aabb[1])
    diag = float(point_distances(hi, lo))
    return float(np.clip(policy.ratio * diag, policy.minimum, policy.maximum))


def min_distances(
    old: MemoryState,
    new_tokens: PatchTokenSet,
    index: SpatialIndex,
    cutoff: float | None = None,
) -> np.ndarray:
    """Distance from every old token to its nearest new token.

    ``index`` must be built over ``new_tokens.positions``. With ``cutoff``,
    distances at or beyond it come back as ``inf``.
    """
    if len(index) != len(new_tokens):
        raise InternalInvariantViolation("index was not built over the new tokens")
    d, _ = index.min_distances(old.positions, max_distance=cutoff)
    return d


def partition(old: MemoryState, d: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of tokens to update (``d < delta``) and to retain (the rest)."""
    d = np.asarray(d, dtype=np.float64)
    if len(d) != len(old):
        raise InternalInvariantViolation(f"{len(d)} distances for {len(old)} tokens")
    near = d < delta
    return np.flatnonzero(near), np.flatnonzero(~near)


def neighborhood(
    old_token: MemoryToken, new_tokens: PatchTokenSet, delta: float, index: SpatialIndex
) -> np.ndarray:
    """Indices of new tokens strictly within ``delta`` of ``old_token``."""
    ids = np.asarray(index.radius_query(old_token.position, delta), dtype=np.int64)
    if ids.size == 0:
        raise InternalInvariantViolation("updated token has an empty neighborhood")
    return ids


def update_token(old_token: MemoryToken, nbhd: PatchTokenSet, step: int) -> MemoryToken:
    """Replace a token's contents with the mean of its new neighbors.

    The old values do not enter the mean; only the creation step survives.
    """
    if len(nbhd) == 0:
        raise InternalInvariantViolation("cannot update from an empty neighborhood")
    return MemoryToken(
        position=_mean_rows(nbhd.positions).astype(np.float32),
        semantic=_mean_rows(nbhd.semantic).astype(np.float32),
        geometric=_mean_rows(nbhd.geometric).astype(np.float32),
        created_step=old_token.created_step,
        updated_step=int(step),
    )


def select_additions(
    new_tokens: PatchTokenSet, old: MemoryState, delta: float, index_over_old: SpatialIndex
) -> np.ndarray:
    """Indices of new tokens at least ``delta`` from every pre-update token."""
    if len(old) == 0:
        return np.arange(len(new_tokens))
    if len(index_over_old) != len(old):
        raise InternalInvariantViolation("index was not built over the old tokens")
    d, _ = index_over_old.min_distances(new_tokens.positions, max_distance=delta)
    return np.flatnonzero(~(d < delta))


def _check_frame(state: MemoryState, tokens: PatchTokenSet) -> None:
    if tokens.dims != state.dims:
        raise InvalidFrame(f"token dims {tokens.dims} do not match map dims {state.dims}")
    for name in ("positions", "semantic", "geometric"):
        if not np.isfinite(getattr(tokens, name)).all():
            raise InvalidFrame(f"non-finite values in new token {name}")
    if tokens.timestep <= state.step:
        raise InvalidFrame(
            f"frame timestep {tokens.timestep} does not follow map step {state.step}"
        )


def step(state: MemoryState, tokens: PatchTokenSet) -> tuple[MemoryState, StepReport]:
    """Fold one frame's patch tokens into the map.

    Retained and updated tokens keep their prior order; additions are appended
    in patch order. Both the distance test for updates and the addition test
    run against the pre-update map.
    """
    _check_frame(state, tokens)
    k_before = len(state)
    ts = tokens.timestep
    timings: dict[str, float] = {}
    clock = time.perf_counter

    if len(tokens) == 0:
        msg = f"frame {ts} has no valid patches; map unchanged"
        log.warning(msg)
        return state, StepReport(ts, k_before, 0, 0, k_before, k_before, float("nan"), warning=msg)

    t = clock()
    delta = effective_delta(state, tokens)
    new_index = SpatialIndex(tokens.positions, cell_size=delta)
    timings["index_new"] = clock() - t

    t = clock()
    d = min_distances(state, tokens, new_index, cutoff=delta)
    upd, ret = partition(state, d, delta)
    timings["partition"] = clock() - t

    t = clock()
    positions = state.positions.copy()
    semantic = state.semantic.copy()
    geometric = state.geometric.copy()
    updated = state.updated.copy()
    if upd.size:
        qi, pid, _ = new_index.radius_pairs(state.positions[upd], delta)
        counts = np.bincount(qi, minlength=upd.size)
        if (counts == 0).any():
            raise InternalInvariantViolation("updated token has an empty neighborhood")
        starts = np.cumsum(counts) - counts
        positions[upd] = _segment_means(tokens.positions, pid, starts, counts)
        semantic[upd] = _segment_means(tokens.semantic, pid, starts, counts)
        geometric[upd] = _segment_means(tokens.geometric, pid, starts, counts)
        updated[upd] = ts
    timings["update"] = clock() - t

    t = clock()
    old_index = SpatialIndex(state.positions, cell_size=delta)
    add = select_additions(tokens, state, delta, old_index)
    timings["additions"] = clock() - t

    t = clock()
    new_pts = tokens.positions.astype(np.float64)
    lo, hi = new_pts.min(axis=0), new_pts.max(axis=0)
    if state.aabb is not None:
        lo, hi = np.minimum(lo, state.aabb[0]), np.maximum(hi, state.aabb[1])
    n_add = add.size
    out = state.replace(
        positions=np.concatenate([positions, tokens.positions[add]]),
        semantic=np.concatenate([semantic, tokens.semantic[add]]),
        geometric=np.concatenate([geometric, tokens.geometric[add]]),
        created=np.concatenate([state.created, np.full(n_add, ts)]),
        updated=np.concatenate([updated, np.full(n_add, ts)]),
        step=ts,
        aabb=np.stack([lo, hi]),
    )
    timings["compose"] = clock() - t

    if len(out) != k_before + n_add or upd.size + ret.size != k_before:
        raise InternalInvariantViolation("token count law violated")
    report = StepReport(
        timestep=ts,
        retained=int(ret.size),
        updated=int(upd.size),
        added=int(n_add),
        total_before=k_before,
        total_after=len(out),
        delta_used=delta,
        timings=timings,
    )
    return out, report


def subsample(state: MemoryState, budget: int = DEFAULT_BUDGET, seed: int | None = None) -> MemoryState:
    """Uniform random subset of at most ``budget`` tokens, order preserved."""
    if budget <= 0:
        raise ConfigError(f"budget must be positive, got {budget}")
    if len(state) <= budget:
        return state
    rng = np.random.default_rng(state.rng_seed if seed is None else seed)
    keep = np.sort(rng.choice(len(state), size=budget, replace=False))
    return state.replace(
        positions=state.positions[keep],
        semantic=state.semantic[keep],
        geometric=state.geometric[keep],
        created=state.created[keep],
        updated=state.updated[keep],
    )
