"""Acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that ``conftest.py`` prints at the end
of the run. ``python tests/test_acceptance.py`` prints the same lines without
pytest.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE
from helpers import random_frame, random_sequence, random_state, random_tokens
from tokenmap3d import bench
from tokenmap3d.errors import CorruptFile
from tokenmap3d.frame_source import room_scene
from tokenmap3d.fusion import PosEmbedConfig, Projector, fourier_pe, fuse_arrays, hrope, rope4d
from tokenmap3d.memory import MemoryState, ThresholdPolicy, partition, step, subsample
from tokenmap3d.patching import pool_patches
from tokenmap3d.persistence import map_from_bytes, map_to_bytes

REFERENCE = json.loads((Path(__file__).parent / "data" / "reference_runs.json").read_text())


def record(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def _run_sequence(policy, frames, dims=(4, 3), on_step=None):
    state = MemoryState.empty(*dims, policy=policy)
    for tk in frames:
        before = state
        state, report = step(state, tk)
        if on_step is not None:
            on_step(before, tk, state, report)
    return state


# 1 ---------------------------------------------------------------------------


def test_criterion_1_count_law():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    failures, steps = [], 0

    def check(before, tk, after, report):
        nonlocal steps
        steps += 1
        k = len(before)
        d = oracles.pair_distances(before.positions, tk.positions).min(axis=1) if k else np.zeros(0)
        upd, ret = partition(before, d, report.delta_used)
        covered = np.sort(np.concatenate([upd, ret]))
        ok = (
            len(after) == k + report.added
            and report.total_after == len(after)
            and report.updated + report.retained == k
            and report.updated == upd.size
            and len(np.intersect1d(upd, ret)) == 0
            and np.array_equal(covered, np.arange(k))
        )
        if not ok:
            failures.append((steps, k, report))

    for _ in range(200):
        policy, frames = random_sequence(rng)
        _run_sequence(policy, frames, on_step=check)
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    record("1 count law", ok, f"{steps} steps over 200 sequences, {len(failures)} violations, {elapsed:.1f}s")
    assert not failures
    assert elapsed < 60


# 2 ---------------------------------------------------------------------------


def test_criterion_2_reobservation_stability():
    rng = np.random.default_rng(202)
    bad = 0
    for i in range(50):
        frame = random_frame(rng, invalid=float(rng.uniform(0, 0.5)))
        tokens = pool_patches(frame)
        policy = ThresholdPolicy.static(0.2) if i % 2 else ThresholdPolicy.dynamic()
        s1, _ = step(MemoryState.empty(*tokens.dims, policy=policy), tokens)
        tokens.timestep = 2
        s2, rep = step(s1, tokens)
        if not (len(s2) == len(s1) and rep.added == 0):
            bad += 1
    record("2 re-observation", bad == 0, f"50 frames fed twice, {bad} grew")
    assert bad == 0


# 3 ---------------------------------------------------------------------------


def test_criterion_3_separation():
    rng = np.random.default_rng(303)
    worst = np.inf
    violations = 0

    def check(before, tk, after, report):
        nonlocal worst, violations
        if len(before) == 0 or report.added == 0:
            return
        added = after.positions[len(before):]
        d = oracles.pair_distances(added, before.positions).min()
        ratio = d / report.delta_used
        worst = min(worst, ratio)
        if d < report.delta_used * (1 - 1e-6):
            violations += 1

    for _ in range(200):
        policy, frames = random_sequence(rng)
        _run_sequence(policy, frames, on_step=check)
    record("3 separation", violations == 0, f"min added distance / delta = {worst:.6f}")
    assert violations == 0


# 4 ---------------------------------------------------------------------------


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    mismatches = 0
    instances = 0
    for _ in range(100):
        policy, frames = random_sequence(rng)
        state = MemoryState.empty(4, 3, policy=policy)
        ref = oracles.empty_arrays(4, 3)
        aabb = None
        for tk in frames:
            delta = oracles.reference_delta(policy, aabb, tk.positions)
            new = {"positions": tk.positions, "semantic": tk.semantic, "geometric": tk.geometric}
            ref = oracles.reference_step(ref, new, tk.timestep, delta)
            state, report = step(state, tk)
            aabb = state.aabb
            same = report.delta_used == delta and report.added == ref["n_added"]
            for name in ("positions", "semantic", "geometric", "created", "updated"):
                same = same and np.array_equal(getattr(state, name), ref[name])
            if not same:
                mismatches += 1
        instances += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 120
    record("4 oracle equivalence", ok, f"{instances} instances, {mismatches} mismatched steps, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 120


# 5 ---------------------------------------------------------------------------


def test_criterion_5_pooling_oracle():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(50):
        frame = random_frame(rng, h=48, w=64, p=16, invalid=float(rng.uniform(0, 0.9)))
        tokens = pool_patches(frame)
        coords, pos, sem = oracles.brute_pool(frame)
        assert [tuple(c) for c in tokens.coords] == coords
        for got, want in ((tokens.positions, pos), (tokens.semantic, sem)):
            if len(want):
                err = np.abs(got.astype(np.float64) - want)
                rel = np.divide(err, np.abs(want), out=np.where(err > 0, np.inf, 0.0), where=want != 0)
                worst = max(worst, float(rel.max()))
    record("5 pooling oracle", worst <= 1e-6, f"worst relative error {worst:.2e}")
    assert worst <= 1e-6


# 6 ---------------------------------------------------------------------------


def test_criterion_6_fusion_and_embeddings():
    rng = np.random.default_rng(606)
    f = rng.normal(size=(100, 8)).astype(np.float32)
    g = rng.normal(size=(100, 6)).astype(np.float32)
    identity = np.array_equal(fuse_arrays(f, g, Projector.zeros(8, 6)), f.astype(np.float64))

    worst = 0.0
    v = rng.normal(size=(10_000, 24))
    p = rng.uniform(-10, 10, size=(10_000, 3))
    coords = np.concatenate([rng.integers(0, 500, size=(10_000, 1)), p], axis=1)
    for out in (hrope(v, p, [1.0, 0.1]), rope4d(v, coords)):
        rel = np.abs(np.linalg.norm(out, axis=1) - np.linalg.norm(v, axis=1)) / np.linalg.norm(v, axis=1)
        worst = max(worst, float(rel.max()))

    pe0 = fourier_pe(np.zeros(3), rng.normal(size=(5, 3)))
    fourier_zero = np.array_equal(pe0, np.r_[np.zeros(5), np.ones(5)])

    ok = identity and worst <= 1e-6 and fourier_zero
    record(
        "6 fusion & embeddings",
        ok,
        f"zero projector exact={identity}, rotary norm drift {worst:.1e}, fourier_pe(0) exact={fourier_zero}",
    )
    assert identity and fourier_zero
    assert worst <= 1e-6


# 7 ---------------------------------------------------------------------------


def test_criterion_7_token_budget():
    rng = np.random.default_rng(707)
    sizes = []
    deterministic = True
    for k in (100, 7999, 8000, 8001, 9000, 12000):
        state = random_state(rng, k)
        a = subsample(state, 8000, seed=42)
        b = subsample(state, 8000, seed=42)
        sizes.append(len(a))
        deterministic &= map_to_bytes(a) == map_to_bytes(b)
    ok = max(sizes) <= 8000 and deterministic and sizes[-1] == 8000
    record("7 token budget", ok, f"sizes {sizes}, byte-identical reruns={deterministic}")
    assert max(sizes) <= 8000
    assert deterministic


# 8 ---------------------------------------------------------------------------


_C8: dict = {}


@pytest.fixture(scope="module")
def two_rev_run():
    spec = room_scene(n_frames=64, revolutions=2)
    res = bench.build_scene(spec)
    return spec, res, bench.compare_report(res, spec)


@pytest.fixture(scope="module")
def long_run():
    spec = room_scene(n_frames=512, revolutions=16)
    t0 = time.perf_counter()
    res = bench.build_scene(spec)
    return bench.compare_report(res, spec), time.perf_counter() - t0


def _c8_summary():
    if len(_C8) == 3:
        ok = all(v[0] for v in _C8.values())
        record("8 compaction trend", ok, "; ".join(v[1] for v in _C8.values()))


def test_criterion_8_second_revolution_adds_nothing(two_rev_run):
    spec, res, rep = two_rev_run
    second = rep["revolutions"][1]["added"]
    ref = REFERENCE["room_64x2"]
    exact = rep["map_tokens"] == ref["map_tokens"]
    ok = second == 0 and rep["reduction"] >= 0.5
    _C8["revisit"] = (
        ok and exact,
        f"second revolution added {second} (need 0), reduction {rep['reduction']:.4f}, "
        f"K={rep['map_tokens']} (reference {ref['map_tokens']})",
    )
    _c8_summary()
    assert exact
    assert rep["reduction"] >= 0.5
    assert second == 0


def test_criterion_8_reduction_monotone_and_long_horizon(long_run):
    rep, elapsed = long_run
    ref = REFERENCE["room_512x16"]
    reductions = [r["reduction"] for r in rep["revolutions"]]
    monotone = all(b > a for a, b in zip(reductions, reductions[1:]))
    _C8["monotone"] = (monotone, f"per-revolution reduction strictly increasing={monotone}")
    exact = [r["map_tokens"] for r in rep["revolutions"]] == ref["per_revolution_tokens"]
    ok = rep["reduction"] >= 0.9 and exact and elapsed < 300
    _C8["long"] = (
        ok,
        f"512-frame reduction {rep['reduction']:.4f}, K={rep['map_tokens']} "
        f"(reference {ref['map_tokens']}), {elapsed:.0f}s",
    )
    _c8_summary()
    assert monotone
    assert exact
    assert rep["reduction"] >= 0.9
    assert elapsed < 300


# 9 ---------------------------------------------------------------------------


def test_criterion_9_frame_count_robustness():
    t0 = time.perf_counter()
    spec = room_scene(n_frames=64, revolutions=1)
    maps = {n: bench.build_scene(bench.with_frame_count(spec, n)) for n in (16, 32, 64)}
    worst = 0.0
    details = []
    for a, b in ((16, 32), (16, 64), (32, 64)):
        pa, pb = maps[a].state.positions, maps[b].state.positions
        c = bench.chamfer(pa, pb)
        assert c == pytest.approx(oracles.chamfer(pa, pb), rel=1e-12)
        delta = min(maps[a].reports[-1].delta_used, maps[b].reports[-1].delta_used)
        worst = max(worst, c / (2 * delta))
        details.append(f"{a}v{b}={c:.4f}")
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 120
    record("9 frame-count robustness", ok, f"chamfer {', '.join(details)}; max/(2 delta)={worst:.3f}, {elapsed:.0f}s")
    assert worst <= 1.0
    assert elapsed < 120


# 10 --------------------------------------------------------------------------


def test_criterion_10_persistence():
    rng = np.random.default_rng(1010)
    round_trip_failures = undetected = 0
    for i in range(1000):
        state = random_state(rng, int(rng.integers(0, 40)), dims=(int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        blob = map_to_bytes(state)
        back = map_from_bytes(blob)
        if map_to_bytes(back) != blob or not all(
            np.array_equal(getattr(back, n), getattr(state, n))
            for n in ("positions", "semantic", "geometric", "created", "updated")
        ):
            round_trip_failures += 1
        bit = int(rng.integers(0, 8 * len(blob)))
        flipped = bytearray(blob)
        flipped[bit // 8] ^= 1 << (bit % 8)
        try:
            map_from_bytes(bytes(flipped))
            undetected += 1
        except CorruptFile:
            pass
    ok = round_trip_failures == 0 and undetected == 0
    record("10 persistence", ok, f"1000 states, {round_trip_failures} round-trip failures, {undetected} undetected bit flips")
    assert round_trip_failures == 0
    assert undetected == 0


# 11 --------------------------------------------------------------------------


def test_criterion_11_performance_report():
    """Timed and reported; never fails the run."""
    rng = np.random.default_rng(1111)
    state = MemoryState.empty(32, 16, policy=ThresholdPolicy.static(0.2))
    big = random_tokens(rng, 8000, (32, 16), 1, 0.0, 6.0)
    state, _ = step(state, big)
    frame = random_tokens(rng, 192, (32, 16), 2, 0.0, 6.0)
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        step(state, frame)
        times.append(time.perf_counter() - t0)
    step_ms = 1e3 * min(times)

    spec = room_scene(n_frames=64, revolutions=1)
    t0 = time.perf_counter()
    tokens = list(bench.scene_tokens(spec))
    render_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    bench.build_map(tokens, (spec.dim_f, spec.dim_g))
    build_s = time.perf_counter() - t0
    total = render_s + build_s
    ok = step_ms < 50 and total < 5
    record(
        "11 performance (non-gating)",
        ok,
        f"step K=8000,|new|=192: {step_ms:.1f} ms (<50); 64-frame build {build_s:.2f}s "
        f"+ render {render_s:.2f}s = {total:.2f}s (<5)",
    )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
