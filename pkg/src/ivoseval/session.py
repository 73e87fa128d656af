"""Interaction sessions: the timing ledger, quality-vs-time curves and the two tracks.

A session alternates between handing scribbles to the client and scoring the
client's prediction. Every scored prediction becomes an
:class:`InteractionRecord` whose timestamp is the previous timestamp plus the
annotation time of the scribbles that prompted it plus the client's measured
turnaround.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import (
    BoundaryTolerance,
    SequenceScoreTable,
    aggregate,
    evaluate_sequence,
    frames_by_score,
)
from .robot import (
    AnnotationCostModel,
    RobotParams,
    bootstrap_initial_scribbles,
    estimate_annotation_time,
    generate_scribbles,
)
from .scribbles import ScribbleSet

Clock = Callable[[], float]


class SessionError(Exception):
    code = "session"


class PhaseError(SessionError):
    code = "phase"


class SessionClosed(PhaseError):
    pass


class PredictionFormatError(SessionError):
    code = "format"


class LogError(SessionError):
    code = "log"


class Phase(str, enum.Enum):
    AWAITING_PREDICTION = "awaiting_prediction"
    AWAITING_PICKUP = "awaiting_scribble_pickup"
    CLOSED = "closed"


@dataclass(frozen=True)
class TrackParams:
    budget_rate_s: float = 5.0
    threshold: float = 0.60
    cap_s: float = 300.0


@dataclass(frozen=True)
class SessionConfig:
    sequence: str
    objects: Tuple[int, ...]
    max_interactions: int = 8
    wall_budget_s: Optional[float] = None
    tolerance: BoundaryTolerance = BoundaryTolerance()
    robot: RobotParams = RobotParams()
    cost_model: AnnotationCostModel = AnnotationCostModel()
    tracks: TrackParams = TrackParams()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(int(o) for o in self.objects))
        if self.max_interactions < 1:
            raise SessionError("max_interactions must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = list(self.objects)
        return d


@dataclass
class InteractionRecord:
    index: int
    annotation_s: float
    compute_s: float
    cumulative_s: float
    overall: float
    per_object: Dict[int, float]
    scribble_frames: List[int] = field(default_factory=list)
    table: Optional[SequenceScoreTable] = None

    def to_dict(self) -> dict:
        return {
            "type": "interaction",
            "index": self.index,
            "annotation_s": self.annotation_s,
            "compute_s": self.compute_s,
            "cumulative_s": self.cumulative_s,
            "overall": self.overall,
            "per_object": {str(k): v for k, v in sorted(self.per_object.items())},
            "scribble_frames": list(self.scribble_frames),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionRecord":
        return cls(
            index=int(d["index"]),
            annotation_s=float(d["annotation_s"]),
            compute_s=float(d["compute_s"]),
            cumulative_s=float(d["cumulative_s"]),
            overall=float(d["overall"]),
            per_object={int(k): float(v) for k, v in d["per_object"].items()},
            scribble_frames=[int(f) for f in d.get("scribble_frames", [])],
        )


@dataclass(frozen=True)
class QualityTimeCurve:
    points: Tuple[Tuple[float, float], ...]
    per_object: Dict[int, Tuple[Tuple[float, float], ...]]

    def value_at(self, t: float) -> float:
        return step_value(self.points, t)


@dataclass(frozen=True)
class TrackSummary:
    quality_at_budget: float
    budget_s: float
    budget_rate_s: float
    speed_total_s: float
    speed_per_object: Dict[int, Optional[float]]
    speed_reached: bool
    threshold: float
    cap_s: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_per_object"] = {str(k): v for k, v in sorted(self.speed_per_object.items())}
        return d


# ---------------------------------------------------------------------------
# curves and tracks


def step_value(points: Sequence[Tuple[float, float]], t: float) -> float:
    """Value of the last point at or before ``t``; 0 before the first point."""
    times = [p[0] for p in points]
    i = bisect.bisect_right(times, t)
    return points[i - 1][1] if i else 0.0


def quality_at_budget(curve: QualityTimeCurve, rate_s: float, frames: int, objects: int) -> Tuple[float, float]:
    """J&F reached within ``rate_s`` seconds per frame per object.

    Returns ``(quality, budget_s)``.
    """
    if rate_s <= 0:
        raise SessionError("budget rate must be positive")
    budget = rate_s * frames * objects
    return step_value(curve.points, budget), budget


def time_to_quality(
    per_object: Dict[int, Sequence[Tuple[float, float]]], threshold: float, cap_s: float
) -> Tuple[float, Dict[int, Optional[float]]]:
    """Summed per-object time to first reach ``threshold``.

    Objects that never get there contribute ``cap_s``; their entry in the
    returned per-object dict is ``None``.
    """
    if not 0 < threshold <= 1:
        raise SessionError("threshold must lie in (0, 1]")
    total = 0.0
    reached: Dict[int, Optional[float]] = {}
    for obj in sorted(per_object):
        hit = next((t for t, v in per_object[obj] if v >= threshold), None)
        reached[obj] = hit
        total += cap_s if hit is None else hit
    return total, reached


def curve_from_records(records: Sequence[InteractionRecord]) -> QualityTimeCurve:
    if not records:
        raise SessionError("no interactions recorded")
    points = tuple((r.cumulative_s, r.overall) for r in records)
    objs = sorted(records[0].per_object)
    per_object = {o: tuple((r.cumulative_s, r.per_object[o]) for r in records) for o in objs}
    return QualityTimeCurve(points, per_object)


def track_summary(curve: QualityTimeCurve, frames: int, objects: int, params: TrackParams) -> TrackSummary:
    quality, budget = quality_at_budget(curve, params.budget_rate_s, frames, objects)
    total, per_obj = time_to_quality(curve.per_object, params.threshold, params.cap_s)
    return TrackSummary(
        quality_at_budget=quality,
        budget_s=budget,
        budget_rate_s=params.budget_rate_s,
        speed_total_s=total,
        speed_per_object=per_obj,
        speed_reached=all(v is not None for v in per_obj.values()),
        threshold=params.threshold,
        cap_s=params.cap_s,
    )


@dataclass(frozen=True)
class SessionReport:
    session_id: str
    sequence: str
    frames: int
    objects: Tuple[int, ...]
    reason: str
    curve: QualityTimeCurve
    tracks: TrackSummary
    records: Tuple[InteractionRecord, ...]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "sequence": self.sequence,
            "frames": self.frames,
            "objects": list(self.objects),
            "reason": self.reason,
            "curve": [list(p) for p in self.curve.points],
            "per_object": {str(k): [list(p) for p in v] for k, v in sorted(self.curve.per_object.items())},
            "quality_at_budget": self.tracks.quality_at_budget,
            "speed_total_s": self.tracks.speed_total_s,
            "tracks": self.tracks.to_dict(),
            "params": self.params,
            "interactions": [
                {k: v for k, v in r.to_dict().items() if k != "type"} for r in self.records
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_report(
    session_id: str,
    sequence: str,
    frames: int,
    objects: Sequence[int],
    reason: str,
    records: Sequence[InteractionRecord],
    tracks: TrackParams,
    params: Optional[dict] = None,
) -> SessionReport:
    curve = curve_from_records(records)
    return SessionReport(
        session_id=session_id,
        sequence=sequence,
        frames=frames,
        objects=tuple(objects),
        reason=reason,
        curve=curve,
        tracks=track_summary(curve, frames, len(objects), tracks),
        records=tuple(records),
        params=dict(params or {}),
    )


@dataclass(frozen=True)
class AggregateReport:
    grid: Tuple[float, ...]
    mean_curve: Tuple[float, ...]
    quality_mean: float
    speed_total_s: float
    sessions: Tuple[SessionReport, ...]

    def curve_csv(self) -> str:
        lines = ["time_s,jf"]
        lines += [f"{t:.3f},{v:.6f}" for t, v in zip(self.grid, self.mean_curve)]
        return "\n".join(lines) + "\n"

    def tracks_csv(self) -> str:
        lines = ["session_id,sequence,frames,objects,reason,interactions,final_jf,budget_s,quality_at_budget,threshold,speed_total_s,speed_reached"]
        for r in self.sessions:
            t = r.tracks
            lines.append(
                f"{r.session_id},{r.sequence},{r.frames},{len(r.objects)},{r.reason},{len(r.records)},"
                f"{r.curve.points[-1][1]:.6f},{t.budget_s:.3f},{t.quality_at_budget:.6f},"
                f"{t.threshold:.2f},{t.speed_total_s:.3f},{int(t.speed_reached)}"
            )
        lines.append(
            f"ALL,,,,,,,,{self.quality_mean:.6f},,{self.speed_total_s:.3f},"
        )
        return "\n".join(lines) + "\n"


def aggregate_report(
    reports: Sequence[SessionReport], grid_step_s: float = 1.0, grid: Optional[Sequence[float]] = None
) -> AggregateReport:
    """Average step-interpolated curves on a shared time grid.

    Quality-track values are averaged across sessions; speed-track totals are
    summed. Without an explicit ``grid`` one is laid from 0 to the last
    timestamp of any session in ``grid_step_s`` steps.
    """
    if not reports:
        raise SessionError("no sessions to aggregate")
    if grid is None:
        t_max = max(r.curve.points[-1][0] for r in reports)
        n = int(math.ceil(t_max / grid_step_s))
        grid = [i * grid_step_s for i in range(n + 1)]
    grid = tuple(float(t) for t in grid)
    values = np.array([[step_value(r.curve.points, t) for t in grid] for r in reports])
    return AggregateReport(
        grid=grid,
        mean_curve=tuple(float(v) for v in values.mean(axis=0)),
        quality_mean=float(np.mean([r.tracks.quality_at_budget for r in reports])),
        speed_total_s=float(sum(r.tracks.speed_total_s for r in reports)),
        sessions=tuple(reports),
    )


# ---------------------------------------------------------------------------
# session log


class SessionLog:
    """Append-only JSON-lines record of one session."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()


@dataclass
class LoggedSession:
    header: dict
    records: List[InteractionRecord]
    close: Optional[dict]

    @property
    def closed(self) -> bool:
        return self.close is not None

    def rebuild_report(self) -> SessionReport:
        h = self.header
        reason = self.close["reason"] if self.close else "open"
        return build_report(
            h["session_id"], h["sequence"], h["frames"], h["objects"], reason, self.records,
            TrackParams(**h["config"]["tracks"]), h["config"],
        )


def read_log(path) -> LoggedSession:
    path = Path(path)
    header, records, close = None, [], None
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LogError(f"{path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            kind = rec["type"]
            if lineno == 1:
                if kind != "header":
                    raise ValueError("first record must be the header")
                header = rec
            elif close is not None:
                raise ValueError("record after session close")
            elif kind == "interaction":
                r = InteractionRecord.from_dict(rec)
                if r.index != len(records) + 1:
                    raise ValueError(f"expected interaction {len(records) + 1}, got {r.index}")
                records.append(r)
            elif kind == "close":
                close = rec
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise LogError(f"{path}: corrupt record at line {lineno}: {exc}") from None
    if header is None:
        raise LogError(f"{path}: empty log")
    return LoggedSession(header, records, close)


# ---------------------------------------------------------------------------
# state machine


@dataclass
class SessionState:
    id: str
    config: SessionConfig
    n_frames: int
    shape: Tuple[int, int]
    initial_frame: int
    clock: Clock = time.monotonic
    phase: Phase = Phase.AWAITING_PICKUP
    history: List[InteractionRecord] = field(default_factory=list)
    last_scribbles: Optional[ScribbleSet] = None
    pending_annotation_s: float = 0.0
    anchor: Optional[float] = None
    close_reason: Optional[str] = None
    report: Optional[SessionReport] = None
    log: Optional[SessionLog] = None

    @property
    def closed(self) -> bool:
        return self.phase is Phase.CLOSED

    def mark_delivered(self) -> None:
        """Scribbles were handed to the client: start its turnaround clock."""
        if self.phase is not Phase.AWAITING_PICKUP:
            raise PhaseError(f"session {self.id} has no scribbles awaiting pickup")
        self.anchor = self.clock()
        self.phase = Phase.AWAITING_PREDICTION


def _initial_frame(gt: Sequence[np.ndarray], objects: Sequence[int]) -> Tuple[int, List[int]]:
    # Prefer frames showing every object, then the largest summed object area.
    best = None
    for t, frame in enumerate(gt):
        counts = np.bincount(np.asarray(frame).ravel(), minlength=256)
        present = [o for o in objects if counts[o] > 0]
        area = int(sum(counts[o] for o in objects))
        key = (len(present), area, -t)
        if best is None or key > best[0]:
            best = (key, t, present)
    return best[1], best[2]


def open_session(
    config: SessionConfig,
    gt: Sequence[np.ndarray],
    pool: Optional[ScribbleSet] = None,
    session_id: Optional[str] = None,
    clock: Clock = time.monotonic,
    log: Optional[SessionLog] = None,
    deliver: bool = True,
    extra_header: Optional[dict] = None,
) -> Tuple[SessionState, ScribbleSet]:
    """Start a session and produce its first scribbles.

    Pool scribbles are passed through unchanged; without a pool the robot
    bootstraps one scribble per object on the frame where the objects are
    largest.
    """
    if not config.objects:
        raise SessionError("a session needs at least one object")
    if len(gt) == 0:
        raise SessionError(f"sequence {config.sequence!r} has no frames")
    shape = tuple(np.asarray(gt[0]).shape)
    if pool is not None and len(pool):
        scribbles = pool
        initial = pool.frames[0]
        annotation_s = pool.human_duration()
        if annotation_s is None:
            annotation_s = estimate_annotation_time(pool, config.cost_model)
    else:
        initial, present = _initial_frame(gt, config.objects)
        if not present:
            raise SessionError(f"no listed object appears in sequence {config.sequence!r}")
        scribbles = bootstrap_initial_scribbles(gt[initial], initial, present, config.robot, config.sequence)
        annotation_s = estimate_annotation_time(scribbles, config.cost_model)

    state = SessionState(
        id=session_id or uuid.uuid4().hex,
        config=config,
        n_frames=len(gt),
        shape=shape,
        initial_frame=initial,
        clock=clock,
        last_scribbles=scribbles,
        pending_annotation_s=annotation_s,
        log=log,
    )
    if log is not None:
        header = {
            "type": "header",
            "session_id": state.id,
            "sequence": config.sequence,
            "frames": state.n_frames,
            "height": shape[0],
            "width": shape[1],
            "objects": list(config.objects),
            "initial_frame": initial,
            "config": config.to_dict(),
        }
        header.update(extra_header or {})
        log.append(header)
    if deliver:
        state.mark_delivered()
    return state, scribbles


def validate_masks(state: SessionState, masks: Sequence[np.ndarray]) -> List[np.ndarray]:
    if len(masks) != state.n_frames:
        raise PredictionFormatError(f"expected {state.n_frames} frames, got {len(masks)}")
    out = []
    for t, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != state.shape:
            raise PredictionFormatError(f"frame {t}: expected shape {state.shape}, got {m.shape}")
        if m.size and (m.min() < 0 or m.max() > 254):
            raise PredictionFormatError(f"frame {t}: labels must lie in 0..254")
        out.append(m.astype(np.uint8, copy=False))
    return out


@dataclass(frozen=True)
class SubmitResult:
    record: InteractionRecord
    scribbles: Optional[ScribbleSet] = None
    closed_reason: Optional[str] = None


def _next_scribbles(state: SessionState, table: SequenceScoreTable, preds, gt) -> ScribbleSet:
    cfg = state.config
    order = frames_by_score(table)
    # excluded frames only as a last resort, so correctable errors there are not ignored
    means = table.frame_means()
    order += sorted(table.excluded & set(means), key=lambda t: (means[t], t))
    for t in order:
        if means[t] >= 1.0:
            continue
        s = generate_scribbles(preds[t], gt[t], t, cfg.objects, cfg.robot, cfg.sequence)
        if len(s):
            return s
    return ScribbleSet(cfg.sequence)


def submit_prediction(
    state: SessionState, masks: Sequence[np.ndarray], gt: Sequence[np.ndarray], deliver: bool = True
) -> SubmitResult:
    """Score a prediction, extend the ledger and decide what happens next."""
    if state.phase is Phase.CLOSED:
        raise SessionClosed(f"session {state.id} is closed")
    if state.phase is not Phase.AWAITING_PREDICTION:
        raise PhaseError(f"session {state.id} is not awaiting a prediction")
    preds = validate_masks(state, masks)
    compute_s = max(0.0, state.clock() - state.anchor)

    cfg = state.config
    table = evaluate_sequence(preds, gt, cfg.objects, {state.initial_frame}, cfg.tolerance)
    previous = state.history[-1].cumulative_s if state.history else 0.0
    record = InteractionRecord(
        index=len(state.history) + 1,
        annotation_s=state.pending_annotation_s,
        compute_s=compute_s,
        cumulative_s=previous + state.pending_annotation_s + compute_s,
        overall=aggregate(table),
        per_object=table.object_means(),
        scribble_frames=state.last_scribbles.frames if state.last_scribbles else [],
        table=table,
    )
    state.history.append(record)
    if state.log is not None:
        state.log.append(record.to_dict())

    reason = None
    scribbles = None
    if record.index >= cfg.max_interactions:
        reason = "max-interactions"
    elif cfg.wall_budget_s is not None and record.cumulative_s >= cfg.wall_budget_s:
        reason = "wall-budget"
    else:
        scribbles = _next_scribbles(state, table, preds, gt)
        if not len(scribbles):
            reason = "error-free" if record.overall >= 1.0 else "no-correctable-errors"

    if reason is not None:
        _close(state, reason)
        return SubmitResult(record, closed_reason=reason)

    state.last_scribbles = scribbles
    state.pending_annotation_s = estimate_annotation_time(scribbles, cfg.cost_model)
    state.anchor = None
    state.phase = Phase.AWAITING_PICKUP
    if deliver:
        state.mark_delivered()
    return SubmitResult(record, scribbles=scribbles)


def _close(state: SessionState, reason: str) -> None:
    state.phase = Phase.CLOSED
    state.close_reason = reason
    state.anchor = None
    state.report = build_report(
        state.id, state.config.sequence, state.n_frames, state.config.objects, reason,
        state.history, state.config.tracks, state.config.to_dict(),
    )
    if state.log is not None:
        state.log.append({"type": "close", "reason": reason, "report": state.report.to_dict()})


def curve(state: SessionState) -> QualityTimeCurve:
    return curve_from_records(state.history)


def close_session(state: SessionState, reason: str = "abandoned") -> None:
    if state.phase is Phase.CLOSED:
        raise SessionClosed(f"session {state.id} is closed")
    if not state.history:
        raise SessionError("cannot close a session before its first prediction")
    _close(state, reason)
