"""Uniform-grid spatial index for exact radius and nearest-neighbor queries.

Points are bucketed into cubic cells of edge ``cell_size``; point ``p`` lives
in cell ``floor(p / cell_size)``. Occupied cells are encoded as flat int64 keys
over their bounding box, so a cell lookup is one ``searchsorted`` and every
query runs for a whole batch of query points at once.

Both query kinds are exact. The brute-force functions at the bottom of the
module are the reference they are tested against.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConfigError, InvalidInput

_KEY_LIMIT = 2.0**60
_COORD_LIMIT = 2.0**61
# Relative slack that absorbs rounding in floor(p / cell_size).
_PAD_REL = 1e-9
# Upper bound on (query, cell) entries materialised at once.
_CHUNK_ENTRIES = 1 << 21


def point_distances(a, b) -> np.ndarray:
    """Euclidean distance between broadcast rows of ``a`` and ``b``.

    Inputs are promoted to float64 and the squared terms are summed in fixed
    x, y, z order, so any two code paths evaluating the same pair get the same
    bits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _as_points(points, what: str = "points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInput(f"{what} must have shape (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidInput(f"{what} contain NaN or Inf")
    return pts


@lru_cache(maxsize=64)
def _shell_offsets(radius: int) -> np.ndarray:
    """Integer offsets with Chebyshev norm exactly ``radius``."""
    if radius == 0:
        return np.zeros((1, 3), dtype=np.int64)
    r = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    shell = grid[np.abs(grid).max(axis=1) == radius]
    shell.setflags(write=False)
    return shell


class SpatialIndex:
    """Static uniform grid over a fixed set of 3D points.

    ``cell_size`` only affects speed, never results. If the occupied extent is
    too large to key in 64 bits the cell size is doubled until it fits.
    """

    def __init__(self, points, cell_size: float = 1.0):
        cell_size = float(cell_size)
        if not np.isfinite(cell_size) or cell_size <= 0.0:
            raise ConfigError(f"cell_size must be positive and finite, got {cell_size}")
        self.points = _as_points(points)
        self.cell_size = cell_size

        n = len(self.points)
        if n == 0:
            self._lo = np.zeros(3, dtype=np.int64)
            self._hi = np.full(3, -1, dtype=np.int64)
            self._dims = np.zeros(3, dtype=np.int64)
            self._cells = np.zeros((0, 3), dtype=np.int64)
            self._order = np.zeros(0, dtype=np.int64)
            self._ukeys = np.zeros(0, dtype=np.int64)
            self._starts = np.zeros(0, dtype=np.int64)
            self._counts = np.zeros(0, dtype=np.int64)
            return

        while True:
            scaled = self.points / self.cell_size
            if np.abs(scaled).max() < _COORD_LIMIT:
                cells = np.floor(scaled).astype(np.int64)
                lo, hi = cells.min(axis=0), cells.max(axis=0)
                if float(np.prod((hi - lo + 1).astype(np.float64))) < _KEY_LIMIT:
                    break
            self.cell_size *= 2.0

        self._lo, self._hi = lo, hi
        self._dims = hi - lo + 1
        self._cells = cells
        keys = self._encode(cells - lo)
        self._order = np.argsort(keys, kind="stable")
        self._ukeys, self._starts, self._counts = np.unique(
            keys[self._order], return_index=True, return_counts=True
        )

    @classmethod
    def build(cls, points, cell_size: float = 1.0) -> "SpatialIndex":
        return cls(points, cell_size)

    def __len__(self) -> int:
        return len(self.points)

    def cells(self) -> dict[tuple[int, int, int], list[int]]:
        """Occupied cells mapped to the ids they hold, ids ascending."""
        out: dict[tuple[int, int, int], list[int]] = {}
        for pid in self._order:
            out.setdefault(tuple(int(c) for c in self._cells[pid]), []).append(int(pid))
        return out

    # -- internals -------------------------------------------------------

    def _encode(self, rel: np.ndarray) -> np.ndarray:
        return (rel[..., 0] * self._dims[1] + rel[..., 1]) * self._dims[2] + rel[..., 2]

    def _cell_of(self, q: np.ndarray) -> np.ndarray:
        scaled = np.clip(q / self.cell_size, -_COORD_LIMIT, _COORD_LIMIT)
        return np.floor(scaled).astype(np.int64)

    def _pad(self, q: np.ndarray, r: float = 0.0) -> np.ndarray:
        return _PAD_REL * (r + self.cell_size + np.abs(q).max(axis=1))

    def _gather(self, cells: np.ndarray, qids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expand (query, cell) entries into (query id, point id) pairs."""
        rel = cells - self._lo
        inside = np.all((rel >= 0) & (rel < self._dims), axis=1)
        rel, qids = rel[inside], qids[inside]
        keys = self._encode(rel)
        pos = np.minimum(np.searchsorted(self._ukeys, keys), len(self._ukeys) - 1)
        hit = self._ukeys[pos] == keys
        starts = self._starts[pos[hit]]
        counts = self._counts[pos[hit]]
        qids = qids[hit]
        total = int(counts.sum())
        if total == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        offsets = np.cumsum(counts) - counts
        within = np.arange(total) - np.repeat(offsets, counts)
        pid = self._order[np.repeat(starts, counts) + within]
        return np.repeat(qids, counts), pid

    # -- radius queries --------------------------------------------------

    def radius_pairs(self, queries, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (query, point) pairs with distance strictly below ``r``.

        Returns ``(query_idx, point_id, distance)`` sorted by query then id.
        """
        r = float(r)
        if not r > 0.0:
            raise ConfigError(f"radius must be positive, got {r}")
        q = _as_points(queries, "queries")
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float64))
        if len(q) == 0 or len(self.points) == 0:
            return empty

        reach = (r + self._pad(q, r))[:, None]
        lo = np.maximum(self._cell_of(q - reach), self._lo)
        hi = np.minimum(self._cell_of(q + reach), self._hi)
        span = np.maximum(hi - lo + 1, 0)
        volume = span.prod(axis=1)
        # Scanning more cells than are occupied is slower than scanning points.
        grid_mask = volume <= max(27, len(self._ukeys))

        qi_parts, pid_parts = [], []
        gq = np.flatnonzero(grid_mask & (volume > 0))
        shapes, group = np.unique(span[gq], axis=0, return_inverse=True)
        for g, shape in enumerate(shapes):
            members = gq[group.reshape(-1) == g]
            box = np.stack(
                np.meshgrid(*(np.arange(s) for s in shape), indexing="ij"), axis=-1
            ).reshape(-1, 3)
            step = max(1, _CHUNK_ENTRIES // len(box))
            for s in range(0, members.size, step):
                ids = members[s : s + step]
                cells = (lo[ids][:, None, :] + box[None, :, :]).reshape(-1, 3)
                qi, pid = self._gather(cells, np.repeat(ids, len(box)))
                qi_parts.append(qi)
                pid_parts.append(pid)

        bq = np.flatnonzero(~grid_mask)
        if bq.size:
            step = max(1, _CHUNK_ENTRIES // len(self.points))
            for s in range(0, bq.size, step):
                ids = bq[s : s + step]
                d = point_distances(q[ids][:, None, :], self.points[None, :, :])
                rows, cols = np.nonzero(d < r)
                qi_parts.append(ids[rows])
                pid_parts.append(cols.astype(np.int64))

        if not qi_parts:
            return empty
        qi = np.concatenate(qi_parts)
        pid = np.concatenate(pid_parts)
        dist = point_distances(q[qi], self.points[pid])
        keep = dist < r
        qi, pid, dist = qi[keep], pid[keep], dist[keep]
        order = np.lexsort((pid, qi))
        return qi[order], pid[order], dist[order]

    def radius_query(self, q, r: float) -> list[int]:
        """Ids of points strictly within ``r`` of ``q``, ascending."""
        _, pid, _ = self.radius_pairs(np.asarray(q, dtype=np.float64).reshape(1, 3), r)
        return pid.tolist()

    # -- nearest-neighbor queries ----------------------------------------

    def min_distances(
        self, queries, max_distance: float | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Exact nearest stored point for every query.

        Expanding-ring search: Chebyshev shells of cells around the query's
        cell are scanned until the best distance found is below the distance
        from the query to the outside of the scanned block, or the block covers
        the whole grid. Ties resolve to the lowest id. Returns
        ``(distance, id)``; an empty index gives ``(inf, -1)``.

        With ``max_distance`` set, queries whose nearest point is at or beyond
        it report ``(inf, -1)`` and the search stops as soon as that is
        certain. Distances below the cutoff are unaffected.
        """
        q = _as_points(queries, "queries")
        best = np.full(len(q), np.inf)
        bid = np.full(len(q), -1, dtype=np.int64)
        if len(q) == 0 or len(self.points) == 0:
            return best, bid

        cs = self.cell_size
        qc = self._cell_of(q)
        pad = self._pad(q)
        n_occupied = len(self._ukeys)
        # Shells closer than the occupied block are empty; skip scanning them.
        gap = np.maximum(np.maximum(self._lo - qc, qc - self._hi), 0).max(axis=1)
        active = np.arange(len(q))
        ring = 0
        while active.size:
            shell = _shell_offsets(ring)
            if ring > 0 and len(shell) > n_occupied:
                self._brute_min(q, active, best, bid)
                break
            scan = active[gap[active] <= ring]
            step = max(1, _CHUNK_ENTRIES // len(shell))
            for s in range(0, scan.size, step):
                ids = scan[s : s + step]
                cells = (qc[ids][:, None, :] + shell[None, :, :]).reshape(-1, 3)
                qi, pid = self._gather(cells, np.repeat(ids, len(shell)))
                if qi.size:
                    _merge_best(best, bid, qi, pid, point_distances(q[qi], self.points[pid]))

            a = qc[active]
            below = q[active] - (a - ring) * cs
            above = (a + ring + 1) * cs - q[active]
            bound = np.minimum(below, above).min(axis=1) - pad[active]
            covers = np.all((a - ring <= self._lo) & (a + ring >= self._hi), axis=1)
            done = (best[active] < bound) | covers
            if max_distance is not None:
                done |= bound >= max_distance
            active = active[~done]
            ring += 1
        if max_distance is not None:
            far = best >= max_distance
            best[far] = np.inf
            bid[far] = -1
        return best, bid

    def min_distance(self, q) -> tuple[float, int | None]:
        d, i = self.min_distances(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return float(d[0]), (None if i[0] < 0 else int(i[0]))

    def _brute_min(self, q, ids, best, bid) -> None:
        step = max(1, _CHUNK_ENTRIES // len(self.points))
        for s in range(0, ids.size, step):
            chunk = ids[s : s + step]
            d = point_distances(q[chunk][:, None, :], self.points[None, :, :])
            j = np.argmin(d, axis=1)
            _merge_best(best, bid, chunk, j.astype(np.int64), d[np.arange(len(chunk)), j])


def _merge_best(best, bid, qi, pid, d) -> None:
    order = np.lexsort((pid, d, qi))
    qi, pid, d = qi[order], pid[order], d[order]
    first = np.ones(len(qi), dtype=bool)
    first[1:] = qi[1:] != qi[:-1]
    qi, pid, d = qi[first], pid[first], d[first]
    better = (d < best[qi]) | ((d == best[qi]) & (pid < bid[qi]))
    best[qi[better]] = d[better]
    bid[qi[better]] = pid[better]


# -- brute-force reference ------------------------------------------------


def brute_radius(points, q, r: float) -> list[int]:
    """Reference radius query: scan every point."""
    pts = _as_points(points)
    if len(pts) == 0:
        return []
    d = point_distances(pts, np.asarray(q, dtype=np.float64))
    return np.flatnonzero(d < r).tolist()


def brute_min_distance(points, q) -> tuple[float, int | None]:
    """Reference nearest neighbor: scan every point, lowest id wins ties."""
    pts = _as_points(points)
    if len(pts) == 0:
        return float("inf"), None
    d = point_distances(pts, np.asarray(q, dtype=np.float64))
    j = int(np.argmin(d))
    return float(d[j]), j
