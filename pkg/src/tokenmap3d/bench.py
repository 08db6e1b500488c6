"""Map building drivers and the token-count benchmarks.

Only quantities that can be measured without trained models are reported:
token counts, reduction against per-frame concatenation, step timings and
map-to-map Chamfer distances.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .frame_source import Orbit, SceneSpec, iter_frame_dir, render_frame
from .memory import MemoryState, StepReport, ThresholdPolicy, step
from .patching import GeomPatchEncoder, PatchTokenSet, pool_patches
from .spatial_index import SpatialIndex

THREADS_ENV = "COG3DMAP_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def scene_tokens(
    spec: SceneSpec,
    frames: Sequence[int] | None = None,
    encoder: GeomPatchEncoder | None = None,
) -> Iterator[PatchTokenSet]:
    """Pooled tokens of each rendered frame, in trajectory order.

    Without jitter a pose always renders the same image, so pooled tokens are
    cached per pose and only the timestep is restamped.
    """
    frames = range(spec.n_frames) if frames is None else frames
    cache: dict[bytes, PatchTokenSet] = {}

    def pose_key(i: int) -> bytes:
        eye, target = spec.trajectory.pose(i)
        return eye.tobytes() + target.tobytes()

    def produce(i: int) -> PatchTokenSet:
        return pool_patches(render_frame(spec, i), encoder)

    threads = thread_count()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        pending: dict[int, object] = {}
        order = list(frames)
        for n, i in enumerate(order):
            key = pose_key(i) if spec.noise == 0 else None
            if key is not None and key in cache:
                yield replace(cache[key], timestep=i + 1)
                continue
            if pool is not None:
                for j in order[n : n + 2 * threads]:
                    if j not in pending:
                        pending[j] = pool.submit(produce, j)
                tokens = pending.pop(i).result()
            else:
                tokens = produce(i)
            if key is not None:
                cache[key] = tokens
            yield tokens
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)


def frame_dir_tokens(
    path, patch_size: int = 32, encoder: GeomPatchEncoder | None = None
) -> Iterator[PatchTokenSet]:
    for frame in iter_frame_dir(path, patch_size):
        yield pool_patches(frame, encoder)


@dataclass
class BuildResult:
    state: MemoryState
    reports: list[StepReport] = field(default_factory=list)
    n_frames: int = 0
    patches_per_frame: int = 0
    seconds: float = 0.0

    @property
    def baseline_tokens(self) -> int:
        """Tokens a per-frame concatenation would feed the decoder."""
        return self.n_frames * self.patches_per_frame

    @property
    def reduction(self) -> float:
        base = self.baseline_tokens
        return 1.0 - len(self.state) / base if base else 0.0


def build_map(
    tokens: Iterable[PatchTokenSet],
    dims: tuple[int, int],
    policy: ThresholdPolicy | None = None,
    seed: int = 0,
) -> BuildResult:
    """Run the recurrent update over a token stream in the order given."""
    state = MemoryState.empty(*dims, policy=policy, seed=seed)
    result = BuildResult(state)
    t0 = time.perf_counter()
    for tk in tokens:
        state, report = step(state, tk)
        result.reports.append(report)
        result.n_frames += 1
        result.patches_per_frame = max(result.patches_per_frame, tk.grid[0] * tk.grid[1])
    result.state = state
    result.seconds = time.perf_counter() - t0
    return result


def build_scene(
    spec: SceneSpec,
    policy: ThresholdPolicy | None = None,
    seed: int = 0,
    encoder: GeomPatchEncoder | None = None,
) -> BuildResult:
    return build_map(scene_tokens(spec, encoder=encoder), (spec.dim_f, spec.dim_g), policy, seed)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean NN distances."""
    if len(a) == 0 or len(b) == 0:
        return 0.0 if len(a) == len(b) else float("inf")
    cell = 0.25
    ab, _ = SpatialIndex(b, cell).min_distances(a)
    ba, _ = SpatialIndex(a, cell).min_distances(b)
    return 0.5 * (float(ab.mean()) + float(ba.mean()))


# -- benchmarks -------------------------------------------------------------


def compare_report(result: BuildResult, spec: SceneSpec | None = None) -> dict:
    """Token count against concatenation, overall and after each full revolution."""
    report = {
        "n_frames": result.n_frames,
        "patches_per_frame": result.patches_per_frame,
        "baseline_tokens": result.baseline_tokens,
        "map_tokens": len(result.state),
        "reduction": result.reduction,
        "build_seconds": round(result.seconds, 4),
    }
    traj = spec.trajectory if spec is not None else None
    if isinstance(traj, Orbit) and float(traj.revolutions).is_integer() and traj.revolutions >= 1:
        revs = int(traj.revolutions)
        if traj.n_frames % revs == 0:
            per = traj.n_frames // revs
            rows = []
            for r in range(revs):
                chunk = result.reports[r * per : (r + 1) * per]
                k = chunk[-1].total_after
                frames = (r + 1) * per
                rows.append(
                    {
                        "revolution": r + 1,
                        "added": sum(x.added for x in chunk),
                        "map_tokens": k,
                        "baseline_tokens": frames * result.patches_per_frame,
                        "reduction": 1.0 - k / (frames * result.patches_per_frame),
                    }
                )
            report["revolutions"] = rows
    return report


def compare_scene(spec: SceneSpec, policy=None, seed: int = 0, encoder=None) -> dict:
    return compare_report(build_scene(spec, policy, seed, encoder), spec)


def with_frame_count(spec: SceneSpec, n_frames: int) -> SceneSpec:
    if not isinstance(spec.trajectory, Orbit):
        raise ValueError("frame sweeps need an orbit trajectory")
    return replace(spec, trajectory=replace(spec.trajectory, n_frames=int(n_frames)))


def framesweep(
    spec: SceneSpec, counts: Sequence[int], policy=None, seed: int = 0, encoder=None
) -> list[dict]:
    """Maps over the same trajectory sampled at each frame count.

    ``chamfer_prev`` compares a map with the one for the previous distinct
    count in the list, so repeated counts give identical rows.
    """
    maps: dict[int, BuildResult] = {}
    rows = []
    prev_distinct: int | None = None
    last: int | None = None
    for n in counts:
        n = int(n)
        if n not in maps:
            maps[n] = build_scene(with_frame_count(spec, n), policy, seed, encoder)
        if last is not None and n != last:
            prev_distinct = last
        res = maps[n]
        row = {
            "frames": n,
            "map_tokens": len(res.state),
            "delta": res.reports[-1].delta_used,
            "prev_frames": prev_distinct if prev_distinct is not None else "",
            "chamfer_prev": (
                chamfer(res.state.positions, maps[prev_distinct].state.positions)
                if prev_distinct is not None
                else ""
            ),
        }
        rows.append(row)
        last = n
    return rows
