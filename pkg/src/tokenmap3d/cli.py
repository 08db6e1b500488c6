"""``tokenmap3d`` command line.

Verbs: ``build``, ``compare``, ``framesweep``, ``stats``, ``export``.
Exit codes: 0 success, 1 usage, 2 bad input, 3 internal invariant violation.

Report columns
--------------
build       timestep, retained, updated, added, total_before, total_after,
            delta, warning (plus ms_* phase timings with ``--timings``)
compare     n_frames, patches_per_frame, baseline_tokens, map_tokens,
            reduction; JSON also carries per-revolution rows for orbits
framesweep  frames, map_tokens, delta, prev_frames, chamfer_prev
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import bench
from .errors import ConfigError, FormatError, InternalInvariantViolation, InvalidFrame, InvalidInput
from .frame_source import PRESETS, Orbit, SceneSpec, load_scene
from .fusion import PosEmbedConfig, Projector, export
from .memory import DEFAULT_BUDGET, ThresholdPolicy, subsample
from .patching import DEFAULT_PATCH_SIZE
from .persistence import export_ply, load_map, load_weights, models_from_arrays, save_map, save_stream

log = logging.getLogger("tokenmap3d")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    frames: Path | None
    scene: str | None
    policy: ThresholdPolicy
    patch: int
    dim_f: int | None
    dim_g: int | None
    budget: int
    seed: int
    out: Path | None
    report: str

    def __post_init__(self):
        if (self.frames is None) == (self.scene is None):
            raise UsageError("give exactly one of --frames or --scene")
        if self.budget <= 0:
            raise UsageError("--budget must be positive")
        if self.patch <= 0:
            raise UsageError("--patch must be positive")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        return cls(
            frames=Path(args.frames) if args.frames else None,
            scene=args.scene,
            policy=args.delta,
            patch=args.patch,
            dim_f=args.dimf,
            dim_g=args.dimg,
            budget=args.budget,
            seed=args.seed,
            out=Path(args.out) if args.out else None,
            report=args.report,
        )


def resolve_scene(cfg: RunConfig, args) -> SceneSpec:
    name = cfg.scene
    if name.startswith("preset:"):
        key = name.split(":", 1)[1]
        if key not in PRESETS:
            raise ConfigError(f"unknown preset {key!r}; known: {', '.join(sorted(PRESETS))}")
        spec = PRESETS[key](seed=cfg.seed)
    else:
        spec = load_scene(name)
    changes = {"patch_size": cfg.patch}
    if cfg.dim_f is not None:
        changes["dim_f"] = cfg.dim_f
    if cfg.dim_g is not None:
        changes["dim_g"] = cfg.dim_g
    if args.noise is not None:
        changes["noise"] = args.noise
    traj = spec.trajectory
    if isinstance(traj, Orbit):
        if args.n_frames is not None:
            traj = replace(traj, n_frames=args.n_frames)
        if args.revolutions is not None:
            traj = replace(traj, revolutions=args.revolutions)
        changes["trajectory"] = traj
    elif args.n_frames is not None or args.revolutions is not None:
        raise ConfigError("--n-frames/--revolutions only apply to orbit scenes")
    return replace(spec, **changes)


def _frame_dir_build(cfg: RunConfig):
    if not cfg.frames.is_dir():
        raise FormatError(f"frame directory {cfg.frames} does not exist")
    stream = bench.frame_dir_tokens(cfg.frames, cfg.patch)
    first = next(stream, None)
    if first is None:
        raise FormatError(f"no .c3df frames in {cfg.frames}")
    dims = first.dims
    for want, got, flag in ((cfg.dim_f, dims[0], "--dimf"), (cfg.dim_g, dims[1], "--dimg")):
        if want is not None and want != got:
            raise ConfigError(f"{flag}={want} but frames carry {got}")

    def chained():
        yield first
        yield from stream

    return bench.build_map(chained(), dims, cfg.policy, cfg.seed)


def _build(cfg: RunConfig, args):
    if cfg.frames is not None:
        return _frame_dir_build(cfg), None
    spec = resolve_scene(cfg, args)
    return bench.build_scene(spec, cfg.policy, cfg.seed), spec


def emit(rows, fmt: str, stream) -> None:
    if fmt == "json":
        json.dump(rows, stream, indent=2, default=_json_default)
        stream.write("\n")
        return
    if not rows:
        return
    writer = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _report_stream(args):
    if args.report_file:
        return open(args.report_file, "w", newline="")
    return contextlib.nullcontext(sys.stdout)


# -- verbs ------------------------------------------------------------------


def cmd_build(cfg: RunConfig, args) -> int:
    result, _ = _build(cfg, args)
    state = result.state
    if len(state) > cfg.budget:
        log.info("subsampling %d tokens to budget %d", len(state), cfg.budget)
        state = subsample(state, cfg.budget, cfg.seed)
    out = cfg.out or Path("map.c3dm")
    save_map(state, out)
    rows = []
    for r in result.reports:
        row = r.as_row()
        if not args.timings:
            row = {k: v for k, v in row.items() if not k.startswith("ms_")}
        rows.append(row)
    with _report_stream(args) as fh:
        emit(rows, cfg.report, fh)
    log.info("wrote %s with %d tokens", out, len(state))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    result, spec = _build(cfg, args)
    report = bench.compare_report(result, spec)
    if not args.timings:
        report.pop("build_seconds", None)
    revs = report.pop("revolutions", None)
    with _report_stream(args) as fh:
        if cfg.report == "json":
            if revs is not None:
                report["revolutions"] = revs
            emit(report, "json", fh)
        else:
            emit([report], "csv", fh)
    return EXIT_OK


def _parse_counts(text: str) -> list[int]:
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--counts must be comma separated integers, got {text!r}") from None
    if not counts or min(counts) < 1:
        raise UsageError("--counts needs positive integers")
    return counts


def cmd_framesweep(cfg: RunConfig, args) -> int:
    if cfg.frames is not None:
        raise UsageError("framesweep needs --scene with an orbit trajectory")
    counts = _parse_counts(args.counts)
    spec = resolve_scene(cfg, args)
    if not isinstance(spec.trajectory, Orbit):
        raise ConfigError("framesweep needs an orbit trajectory")
    rows = bench.framesweep(spec, counts, cfg.policy, cfg.seed)
    with _report_stream(args) as fh:
        emit(rows, cfg.report, fh)
    return EXIT_OK


def cmd_stats(args) -> int:
    state = load_map(args.map)
    d_f, d_g = state.dims
    print(f"tokens {len(state)}")
    print(f"dims {d_f} {d_g}")
    print(f"step {state.step}")
    print(f"policy {state.delta_policy}")
    print(f"seed {state.rng_seed}")
    if state.aabb is not None:
        lo, hi = state.aabb
        print("aabb " + " ".join(f"{v:.6g}" for v in (*lo, *hi)))
    print("timestep created updated")
    created = np.bincount(state.created, minlength=state.step + 1)
    updated = np.bincount(state.updated, minlength=state.step + 1)
    for t in np.nonzero(created + updated)[0]:
        print(f"{t} {created[t]} {updated[t]}")
    return EXIT_OK


def cmd_export(args) -> int:
    state = load_map(args.map)
    out = Path(args.out or Path(args.map).with_suffix(".ply"))
    export_ply(state, out)
    if args.stream:
        if args.weights:
            proj, pe = models_from_arrays(load_weights(args.weights))
        else:
            proj, pe = Projector.zeros(*state.dims), PosEmbedConfig()
        save_stream(export(state, proj, pe), args.stream)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _policy(text: str) -> ThresholdPolicy:
    try:
        return ThresholdPolicy.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenmap3d", description="Recurrent 3D token map builder")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def run_flags(p):
        src = p.add_argument_group("input")
        src.add_argument("--frames", help="directory of .c3df frame files")
        src.add_argument("--scene", help="scene file (.json/.yaml) or preset:NAME")
        src.add_argument("--n-frames", type=int, help="override orbit frame count")
        src.add_argument("--revolutions", type=float, help="override orbit revolutions")
        src.add_argument("--noise", type=float, help="override scene jitter sigma")
        p.add_argument("--delta", type=_policy, default=ThresholdPolicy(),
                       help="static:V or dynamic:RATIO[,MIN,MAX] (default dynamic:0.03,0.01,1)")
        p.add_argument("--patch", type=int, default=DEFAULT_PATCH_SIZE)
        p.add_argument("--dimf", type=int)
        p.add_argument("--dimg", type=int)
        p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.add_argument("--report", choices=("csv", "json"), default="csv")
        p.add_argument("--report-file", help="write the report here instead of stdout")
        p.add_argument("--timings", action="store_true", help="include wall-clock columns")

    p = sub.add_parser("build", help="build a map and print per-step rows")
    run_flags(p)
    p = sub.add_parser("compare", help="map size against per-frame concatenation")
    run_flags(p)
    p = sub.add_parser("framesweep", help="maps at several frame counts")
    run_flags(p)
    p.add_argument("--counts", default="16,32,64")

    p = sub.add_parser("stats", help="summarise a map file")
    p.add_argument("map")
    p = sub.add_parser("export", help="write a map as PLY, optionally a token stream")
    p.add_argument("map")
    p.add_argument("--out", help="PLY path (default: map path with .ply)")
    p.add_argument("--stream", help="also write the fused token stream here")
    p.add_argument("--weights", help="projector/embedding weight blob for --stream")
    return parser


_RUN_VERBS = {"build": cmd_build, "compare": cmd_compare, "framesweep": cmd_framesweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in _RUN_VERBS:
            return _RUN_VERBS[args.verb](RunConfig.from_args(args), args)
        return cmd_stats(args) if args.verb == "stats" else cmd_export(args)
    except UsageError as exc:
        print(f"tokenmap3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ConfigError, InvalidFrame, InvalidInput, OSError) as exc:
        print(f"tokenmap3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InternalInvariantViolation as exc:
        print(f"tokenmap3d: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
