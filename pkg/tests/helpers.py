"""Random inputs shared by the test modules."""

from __future__ import annotations

import numpy as np

from tokenmap3d.memory import MemoryState, ThresholdPolicy
from tokenmap3d.patching import FrameBundle, PatchTokenSet


def random_tokens(rng, n, dims=(4, 3), timestep=1, lo=0.0, hi=1.0, grid_step=None):
    pos = rng.uniform(lo, hi, size=(n, 3))
    if grid_step is not None:
        pos = np.round(pos / grid_step) * grid_step
    return PatchTokenSet(
        positions=pos,
        semantic=rng.normal(size=(n, dims[0])),
        geometric=rng.normal(size=(n, dims[1])),
        timestep=timestep,
    )


def jittered(rng, tokens: PatchTokenSet, sigma, timestep, dims=None):
    pos = tokens.positions + rng.normal(scale=sigma, size=tokens.positions.shape)
    return PatchTokenSet(
        pos,
        tokens.semantic + rng.normal(scale=0.1, size=tokens.semantic.shape),
        tokens.geometric,
        timestep=timestep,
    )


def random_sequence(rng, dims=(4, 3), max_tokens=2000):
    """A short frame sequence mixing fresh, revisited and grid-snapped tokens.

    Snapping to a 1/8 grid with delta 0.25 makes exact ties common.
    """
    snapped = rng.random() < 0.4
    policy = (
        ThresholdPolicy.static(0.25)
        if snapped
        else ThresholdPolicy.static(float(rng.uniform(0.05, 0.4)))
        if rng.random() < 0.5
        else ThresholdPolicy.dynamic(float(rng.uniform(0.01, 0.1)), 0.01, 1.0)
    )
    n_frames = int(rng.integers(2, 8))
    frames, total = [], 0
    prev = None
    for t in range(1, n_frames + 1):
        n = int(rng.integers(1, 200))
        if total + n > max_tokens:
            break
        if prev is not None and rng.random() < 0.4:
            tk = jittered(rng, prev, 0.0 if snapped else rng.uniform(0, 0.1), t)
            if snapped:
                tk.positions = np.round(tk.positions * 8) / 8
        else:
            scale = float(rng.uniform(0.3, 3.0))
            tk = random_tokens(rng, n, dims, t, 0, scale, 0.125 if snapped else None)
        frames.append(tk)
        total += len(tk)
        prev = tk
    return policy, frames


def random_state(rng, k, dims=(4, 3), step=None, seed=0):
    step = int(rng.integers(1, 50)) if step is None else step
    if k == 0:
        return MemoryState.empty(*dims, seed=seed)
    created = rng.integers(1, step + 1, size=k)
    updated = np.minimum(step, created + rng.integers(0, 3, size=k))
    pos = rng.normal(size=(k, 3)).astype(np.float32)
    lo, hi = pos.min(axis=0).astype(np.float64), pos.max(axis=0).astype(np.float64)
    policy = ThresholdPolicy.static(0.2) if rng.random() < 0.5 else ThresholdPolicy.dynamic()
    return MemoryState(
        positions=pos,
        semantic=rng.normal(size=(k, dims[0])),
        geometric=rng.normal(size=(k, dims[1])),
        created=created,
        updated=updated,
        step=step,
        dims=dims,
        aabb=np.stack([lo - 1, hi + 1]),
        delta_policy=policy,
        rng_seed=int(rng.integers(0, 2**63)),
    )


def random_frame(rng, h=64, w=96, p=16, dims=(5, 4), invalid=0.3, timestep=1, holes=True):
    mask = rng.random((h, w)) >= invalid
    # Knock out whole patches now and then.
    for _ in range(int(rng.integers(0, 3)) if holes else 0):
        u, v = rng.integers(0, h // p), rng.integers(0, w // p)
        mask[u * p : (u + 1) * p, v * p : (v + 1) * p] = False
    return FrameBundle(
        pointmap=rng.normal(scale=3.0, size=(h, w, 3)),
        semantic_map=rng.normal(size=(h, w, dims[0])),
        geometric_map=rng.normal(size=(h, w, dims[1])),
        valid_mask=mask,
        timestep=timestep,
        patch_size=p,
    )
