"""Command-line entry points.

Every option can also be set through the environment as ``IVOSEVAL_<NAME>``,
where ``NAME`` is the option's long name upper-cased with dashes turned into
underscores (``--budget-rate-s`` becomes ``IVOSEVAL_BUDGET_RATE_S``).
Command-line values win over the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from .baseline import BaselineConfig, BaselineError
from .client import (
    SEGMENTERS,
    ClientError,
    ServiceClient,
    fixed_step_clock,
    make_segmenter,
    run_interactive_loop,
    run_offline_session,
)
from .dataset import DatasetError, SynthSpec, load_manifest, write_synthetic
from .masks import MaskError
from .robot import RobotError
from .scribbles import ScribbleError
from .service import ConfigError, load_service_config, serve
from .session import SessionConfig, SessionError, TrackParams, aggregate_report, read_log

ENV_PREFIX = "IVOSEVAL_"

log = logging.getLogger("ivoseval")

_ERRORS = (
    BaselineError,
    ClientError,
    ConfigError,
    DatasetError,
    MaskError,
    RobotError,
    ScribbleError,
    SessionError,
    OSError,
)


class _EnvDefaults(argparse.ArgumentParser):
    """Parser whose option defaults may come from ``IVOSEVAL_*`` variables."""

    def add_argument(self, *args, **kwargs):
        action = super().add_argument(*args, **kwargs)
        long = next((a for a in args if a.startswith("--")), None)
        if long is not None and long != "--help":
            env = ENV_PREFIX + long[2:].upper().replace("-", "_")
            if env in os.environ:
                raw = os.environ[env]
                if isinstance(action, argparse._StoreTrueAction):
                    action.default = raw.lower() in ("1", "true", "yes", "on")
                else:
                    action.default = action.type(raw) if action.type else raw
                action.required = False
        return action


def _add_track_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget-rate-s", type=float, default=5.0, help="quality-track seconds per frame per object")
    p.add_argument("--threshold", type=float, default=0.60, help="speed-track J&F threshold")
    p.add_argument("--cap-s", type=float, default=300.0, help="speed-track time charged to objects that never reach the threshold")
    p.add_argument("--max-interactions", type=int, default=8)


def _add_segmenter_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--segmenter", choices=SEGMENTERS, default="linear")
    p.add_argument("--seed", type=int, default=0, help="seed for the baseline's sample selection")
    p.add_argument("--features-dir", type=Path, default=None, help="precomputed <sequence>.ivfm feature files")


def build_parser() -> argparse.ArgumentParser:
    parser = _EnvDefaults(prog="ivoseval", description="Interactive video segmentation evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_EnvDefaults)

    p = sub.add_parser("serve", help="run the evaluation service")
    p.add_argument("--config", type=Path, required=True, help="key = value service config")
    p.add_argument("--host", default=None, help="override the configured listen host")
    p.add_argument("--port", type=int, default=None, help="override the configured port")

    p = sub.add_parser("evaluate", help="evaluate a segmenter in-process, without the network")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--sequence", action="append", help="restrict to these sequences (repeatable)")
    _add_segmenter_options(p)
    _add_track_options(p)
    p.add_argument("--fixed-compute-s", type=float, default=None,
                   help="charge this many seconds per turn instead of measuring (reproducible reports)")
    p.add_argument("--grid-step-s", type=float, default=1.0, help="time step of the aggregate curve")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="evaluate a segmenter against a running service")
    p.add_argument("--endpoint", default="http://127.0.0.1:8000")
    p.add_argument("--token", required=True)
    p.add_argument("--dataset", type=Path, required=True, help="local copy of the images (and gt for oracle)")
    p.add_argument("--split", default="val")
    p.add_argument("--sequence", action="append")
    _add_segmenter_options(p)
    p.add_argument("--out", type=Path, default=None, help="directory for the returned reports")

    p = sub.add_parser("synth", help="write a synthetic moving-squares dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequences", type=int, default=2)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--motion", choices=("linear", "bounce"), default="linear")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", default="val")

    p = sub.add_parser("report", help="aggregate session logs into curve and track tables")
    p.add_argument("logs", nargs="+", type=Path, help="session .jsonl logs or directories of them")
    p.add_argument("--grid-step-s", type=float, default=1.0)
    p.add_argument("--out", type=Path, default=None, help="write curve.csv and tracks.csv here instead of stdout")
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_serve(args) -> int:
    overrides = {}
    if args.host is not None:
        overrides["host"] = args.host
    if args.port is not None:
        overrides["port"] = str(args.port)
    cfg = load_service_config(args.config, overrides)
    serve(cfg)
    return 0


def _session_config(args, sequence: str, objects) -> SessionConfig:
    return SessionConfig(
        sequence=sequence,
        objects=tuple(objects),
        max_interactions=args.max_interactions,
        tracks=TrackParams(args.budget_rate_s, args.threshold, args.cap_s),
    )


def _sequences(manifest, args) -> List[str]:
    if args.sequence:
        for s in args.sequence:
            manifest.sequence(s)
        return list(args.sequence)
    return manifest.split(args.split)


def _evaluate_one(args, sequence: str):
    manifest = load_manifest(args.dataset)
    info = manifest.sequence(sequence)
    segmenter = make_segmenter(args.segmenter, manifest, BaselineConfig(seed=args.seed), args.features_dir)
    clock = time.monotonic if args.fixed_compute_s is None else fixed_step_clock(args.fixed_compute_s)
    report = run_offline_session(
        manifest, sequence, segmenter, _session_config(args, sequence, info.objects),
        clock=clock, log_dir=args.out / "sessions",
    )
    (args.out / "reports" / f"{report.session_id}.json").write_text(report.dumps() + "\n")
    return report


def _write_tables(agg, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(agg.tracks_csv())
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(agg.curve_csv())
    (out / "tracks.csv").write_text(agg.tracks_csv())


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.dataset)
    sequences = _sequences(manifest, args)
    for sub in ("sessions", "reports"):
        (args.out / sub).mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reports = list(pool.map(_evaluate_one, [args] * len(sequences), sequences))
    else:
        reports = [_evaluate_one(args, s) for s in sequences]
    for r in reports:
        log.info("%s: %d turns, final J&F %.4f, quality %.4f, speed %.1fs", r.sequence, len(r.records),
                 r.curve.points[-1][1], r.tracks.quality_at_budget, r.tracks.speed_total_s)
    agg = aggregate_report(reports, args.grid_step_s)
    _write_tables(agg, args.out)
    print(f"{len(reports)} sessions, quality {agg.quality_mean:.4f}, speed {agg.speed_total_s:.1f}s -> {args.out}")
    return 0


def cmd_run(args) -> int:
    manifest = load_manifest(args.dataset, annotations=args.segmenter == "oracle")
    client = ServiceClient(args.endpoint, args.token)
    sequences = args.sequence or [None] * len(manifest.split(args.split))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        segmenter = make_segmenter(args.segmenter, manifest, BaselineConfig(seed=args.seed), args.features_dir)
        result = run_interactive_loop(client, segmenter, seq, None if seq else args.split)
        rep = result.report
        print(f"{result.sequence}\t{result.session_id}\tturns={result.turns}\t"
              f"quality={rep['quality_at_budget']:.4f}\tspeed={rep['speed_total_s']:.1f}s")
        if args.out is not None:
            (args.out / f"{result.session_id}.json").write_text(json.dumps(rep, sort_keys=True) + "\n")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(args.sequences, args.frames, args.width, args.height, args.objects,
                     args.motion, args.seed, args.split)
    manifest = write_synthetic(spec, args.out)
    print(f"wrote {len(manifest.sequences)} sequences to {args.out}")
    return 0


def _log_paths(paths: Sequence[Path]) -> List[Path]:
    out = []
    for p in paths:
        if p.is_dir():
            out.extend(sorted(p.glob("*.jsonl")))
        else:
            out.append(p)
    return out


def cmd_report(args) -> int:
    paths = _log_paths(args.logs)
    if not paths:
        raise SessionError("no session logs given")
    reports = []
    for p in paths:
        logged = read_log(p)
        if not logged.records:
            raise SessionError(f"{p}: no interactions recorded")
        reports.append(logged.rebuild_report())
    _write_tables(aggregate_report(reports, args.grid_step_s), args.out)
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValueError as exc:  # bad environment override
        print(f"ivoseval: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "serve":
        logging.getLogger("ivoseval").setLevel(logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except _ERRORS as exc:
        print(f"ivoseval {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"ivoseval {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
