"""The evaluation web service.

Ground truth never leaves this module: clients receive sequence metadata,
scribbles and, once a session closes, its score report.

Wire protocol (JSON bodies, ``Authorization: Bearer <token>``)::

    GET  /health
    POST /session                     {"sequence": name} or {"split": name}
    POST /session/<id>/prediction     {"masks": [[{"object_id", "rle"}, ...] per frame]}
                                      or {"labels": [[row-major ints] per frame]}
    GET  /session/<id>/report

Errors are ``{"code": ..., "message": ...}`` with codes ``auth``,
``not_found``, ``phase``, ``busy``, ``format``, ``quota`` and ``internal``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .dataset import DatasetError, DatasetManifest, load_manifest
from .masks import MaskError, RasterSize, RleMask, rle_decode
from .metrics import BoundaryTolerance
from .robot import AnnotationCostModel, RobotParams
from .session import (
    LogError,
    Phase,
    PhaseError,
    PredictionFormatError,
    SessionConfig,
    SessionError,
    SessionLog,
    SessionState,
    TrackParams,
    open_session,
    read_log,
    submit_prediction,
)

log = logging.getLogger(__name__)

_STATUS = {
    "auth": HTTPStatus.UNAUTHORIZED,
    "not_found": HTTPStatus.NOT_FOUND,
    "phase": HTTPStatus.CONFLICT,
    "busy": HTTPStatus.CONFLICT,
    "format": HTTPStatus.BAD_REQUEST,
    "quota": HTTPStatus.TOO_MANY_REQUESTS,
    "internal": HTTPStatus.INTERNAL_SERVER_ERROR,
}


class ServiceError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    @property
    def status(self) -> int:
        return int(_STATUS.get(self.code, HTTPStatus.BAD_REQUEST))

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


class ConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    dataset: Path
    state_dir: Path
    host: str = "127.0.0.1"
    port: int = 8000
    tokens: Dict[str, int] = field(default_factory=dict)
    max_interactions: int = 8
    wall_budget_s: Optional[float] = None
    tolerance: BoundaryTolerance = BoundaryTolerance()
    robot: RobotParams = RobotParams()
    cost_model: AnnotationCostModel = AnnotationCostModel()
    tracks: TrackParams = TrackParams()

    def session_config(self, sequence: str, objects) -> SessionConfig:
        return SessionConfig(
            sequence=sequence,
            objects=tuple(objects),
            max_interactions=self.max_interactions,
            wall_budget_s=self.wall_budget_s,
            tolerance=self.tolerance,
            robot=self.robot,
            cost_model=self.cost_model,
            tracks=self.tracks,
        )


def parse_key_values(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_tokens(spec: str, default_quota: int) -> Dict[str, int]:
    tokens = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, _, quota = item.partition(":")
        tokens[name] = int(quota) if quota else default_quota
    return tokens


def service_config_from_mapping(values: Dict[str, str], base: Optional[Path] = None) -> ServiceConfig:
    values = dict(values)
    base = base or Path.cwd()

    def take(key, conv=str, default=None):
        if key not in values:
            return default
        raw = values.pop(key)
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None

    def path(v):
        p = Path(v).expanduser()
        return p if p.is_absolute() else base / p

    dataset = take("dataset", path)
    if dataset is None:
        raise ConfigError("config must set 'dataset'")
    default_quota = take("default_quota", int, 1000)
    cfg = ServiceConfig(
        dataset=dataset,
        state_dir=take("state_dir", path, base / "sessions"),
        host=take("host", str, "127.0.0.1"),
        port=take("port", int, 8000),
        tokens=_parse_tokens(take("tokens", str, ""), default_quota),
        max_interactions=take("max_interactions", int, 8),
        wall_budget_s=take("wall_budget_s", float),
        tolerance=BoundaryTolerance(take("boundary_tolerance", float, 0.008)),
        robot=RobotParams(
            min_area_fraction=take("robot.min_area_fraction", float, 0.005),
            max_components_per_kind=take("robot.max_components_per_kind", int, 1),
            simplify_epsilon_px=take("robot.simplify_epsilon_px", float, 2.0),
        ),
        cost_model=AnnotationCostModel(
            base_s=take("cost.base_s", float, 1.5),
            per_point_s=take("cost.per_point_s", float, 0.04),
        ),
        tracks=TrackParams(
            budget_rate_s=take("budget_rate_s", float, 5.0),
            threshold=take("threshold", float, 0.60),
            cap_s=take("cap_s", float, 300.0),
        ),
    )
    if values:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(values))}")
    if not cfg.tokens:
        raise ConfigError("config must list at least one token")
    return cfg


def load_service_config(path, overrides: Optional[Dict[str, str]] = None) -> ServiceConfig:
    path = Path(path)
    try:
        values = parse_key_values(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    return service_config_from_mapping(values, base=path.parent)


def token_digest(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


# ---------------------------------------------------------------------------
# wire decoding


def decode_prediction(body: dict, n_frames: int, size: RasterSize) -> List[np.ndarray]:
    """Turn a prediction body into label masks; raises ``ServiceError('format')``."""
    if not isinstance(body, dict):
        raise ServiceError("format", "prediction body must be an object")
    try:
        if "masks" in body:
            frames = body["masks"]
            if len(frames) != n_frames:
                raise ServiceError("format", f"expected {n_frames} frames, got {len(frames)}")
            out = []
            for t, entries in enumerate(frames):
                labels = np.zeros(size.shape, dtype=np.uint8)
                for e in entries:
                    obj = int(e["object_id"])
                    if not 1 <= obj <= 254:
                        raise ServiceError("format", f"frame {t}: object id {obj} out of range")
                    rle = RleMask.from_dict(e["rle"])
                    if rle.size != size:
                        raise ServiceError("format", f"frame {t}: RLE size {tuple(rle.size)} != {tuple(size)}")
                    labels[rle_decode(rle)] = obj
                out.append(labels)
            return out
        if "labels" in body:
            frames = body["labels"]
            if len(frames) != n_frames:
                raise ServiceError("format", f"expected {n_frames} frames, got {len(frames)}")
            out = []
            for t, flat in enumerate(frames):
                arr = np.asarray(flat, dtype=np.int64)
                if arr.shape != (size.area,):
                    raise ServiceError("format", f"frame {t}: expected {size.area} labels")
                if arr.size and (arr.min() < 0 or arr.max() > 254):
                    raise ServiceError("format", f"frame {t}: labels must lie in 0..254")
                out.append(arr.reshape(size.shape).astype(np.uint8))
            return out
    except MaskError as exc:
        raise ServiceError("format", str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ServiceError("format", f"malformed prediction: {exc}") from None
    raise ServiceError("format", "prediction needs 'masks' or 'labels'")


# ---------------------------------------------------------------------------
# service core


@dataclass
class _Entry:
    owner: str
    sequence: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    state: Optional[SessionState] = None
    report_json: Optional[str] = None


class EvaluationService:
    """Session bookkeeping behind the HTTP front end; usable directly in-process."""

    def __init__(self, config: ServiceConfig, clock: Callable[[], float] = time.monotonic):
        self.config = config
        self.clock = clock
        try:
            self.manifest: DatasetManifest = load_manifest(config.dataset)
        except DatasetError as exc:
            raise ConfigError(str(exc)) from None
        config.state_dir.mkdir(parents=True, exist_ok=True)
        self._tokens = {token_digest(t): q for t, q in config.tokens.items()}
        self._lock = threading.Lock()
        self._gt_cache: Dict[str, list] = {}
        self._sessions: Dict[str, _Entry] = {}
        self._started: Dict[str, List[str]] = {}
        self._restore()

    # -- persistence -------------------------------------------------------

    def _restore(self) -> None:
        for path in sorted(self.config.state_dir.glob("*.jsonl")):
            try:
                logged = read_log(path)
            except LogError as exc:
                log.warning("skipping unreadable session log: %s", exc)
                continue
            h = logged.header
            owner = h.get("owner", "")
            self._started.setdefault(owner, []).append(h["sequence"])
            if not logged.closed:
                log.warning("session %s was open at shutdown and cannot resume", h["session_id"])
                continue
            self._sessions[h["session_id"]] = _Entry(
                owner=owner,
                sequence=h["sequence"],
                report_json=json.dumps(logged.close["report"], sort_keys=True),
            )

    # -- helpers -----------------------------------------------------------

    def _auth(self, token: Optional[str]) -> str:
        digest = token_digest(token or "")
        if not token or digest not in self._tokens:
            raise ServiceError("auth", "missing or unknown token")
        return digest

    def _entry(self, owner: str, session_id: str) -> _Entry:
        with self._lock:
            entry = self._sessions.get(session_id)
        # foreign sessions look exactly like missing ones
        if entry is None or entry.owner != owner:
            raise ServiceError("not_found", f"no session {session_id!r}")
        return entry

    def _ground_truth(self, sequence: str) -> list:
        with self._lock:
            gt = self._gt_cache.get(sequence)
        if gt is None:
            gt = self.manifest.load_annotations(sequence)
            with self._lock:
                self._gt_cache[sequence] = gt
        return gt

    def _scribble_payload(self, state: SessionState, scribbles) -> dict:
        return scribbles.to_dict(state.n_frames)

    # -- operations --------------------------------------------------------

    def start(self, token: Optional[str], sequence: Optional[str] = None, split: Optional[str] = None,
              deliver: bool = True) -> dict:
        owner = self._auth(token)
        with self._lock:
            started = self._started.setdefault(owner, [])
            if len(started) >= self._tokens[owner]:
                raise ServiceError("quota", "session quota exhausted for this token")
            if sequence is None:
                if split is None:
                    raise ServiceError("format", "request needs 'sequence' or 'split'")
                try:
                    names = self.manifest.split(split)
                except DatasetError as exc:
                    raise ServiceError("not_found", str(exc)) from None
                remaining = [n for n in names if n not in started]
                if not remaining:
                    raise ServiceError("quota", f"every sequence of split {split!r} was already started")
                sequence = remaining[0]
            if sequence not in self.manifest.sequences:
                raise ServiceError("not_found", f"unknown sequence {sequence!r}")
            started.append(sequence)

        info = self.manifest.sequence(sequence)
        gt = self._ground_truth(sequence)
        pool = self.manifest.load_pool(sequence)
        cfg = self.config.session_config(sequence, info.objects)
        entry = _Entry(owner=owner, sequence=sequence)
        with entry.lock:
            sid = uuid.uuid4().hex
            state, scribbles = open_session(
                cfg, gt, pool, session_id=sid, clock=self.clock,
                log=SessionLog(self.config.state_dir / f"{sid}.jsonl"),
                deliver=False, extra_header={"owner": owner},
            )
            entry.state = state
            with self._lock:
                self._sessions[sid] = entry
            payload = {
                "session_id": sid,
                "sequence": sequence,
                "frames": info.frames,
                "width": info.size.width,
                "height": info.size.height,
                "objects": list(info.objects),
                "scribbles": self._scribble_payload(state, scribbles),
            }
            if deliver:
                state.mark_delivered()
        log.info("session %s started on %s", sid, sequence)
        return payload

    def handoff(self, session_id: str) -> None:
        """Start the client's clock; call as the response is handed to the transport."""
        with self._lock:
            entry = self._sessions.get(session_id)
        if entry is None or entry.state is None:
            return
        with entry.lock:
            if entry.state.phase is Phase.AWAITING_PICKUP:
                entry.state.mark_delivered()

    def submit(self, token: Optional[str], session_id: str, body: dict, deliver: bool = True) -> dict:
        owner = self._auth(token)
        entry = self._entry(owner, session_id)
        if not entry.lock.acquire(blocking=False):
            raise ServiceError("busy", f"session {session_id} is handling another request")
        try:
            state = entry.state
            if state is None or state.closed:
                raise ServiceError("phase", f"session {session_id} is closed")
            if state.phase is not Phase.AWAITING_PREDICTION:
                raise ServiceError("phase", f"session {session_id} is not awaiting a prediction")
            masks = decode_prediction(body, state.n_frames, RasterSize(state.shape[1], state.shape[0]))
            try:
                result = submit_prediction(state, masks, self._ground_truth(entry.sequence), deliver=False)
            except PredictionFormatError as exc:
                raise ServiceError("format", str(exc)) from None
            except PhaseError as exc:
                raise ServiceError("phase", str(exc)) from None
            if result.closed_reason is not None:
                entry.report_json = state.report.dumps()
                log.info("session %s closed: %s", session_id, result.closed_reason)
                return {"reason": result.closed_reason, "report": json.loads(entry.report_json)}
            payload = {
                "interaction": result.record.index,
                "scribbles": self._scribble_payload(state, result.scribbles),
            }
            if deliver:
                state.mark_delivered()
            return payload
        finally:
            entry.lock.release()

    def report(self, token: Optional[str], session_id: str) -> str:
        owner = self._auth(token)
        entry = self._entry(owner, session_id)
        if entry.report_json is None:
            raise ServiceError("phase", f"session {session_id} is still open")
        return entry.report_json

    def health(self) -> dict:
        return {"status": "ok", "sequences": len(self.manifest.sequences)}


# ---------------------------------------------------------------------------
# HTTP front end

_PREDICTION = re.compile(r"^/session/([0-9a-f]+)/prediction$")
_REPORT = re.compile(r"^/session/([0-9a-f]+)/report$")
MAX_BODY = 256 * 1024 * 1024


class _Handler(BaseHTTPRequestHandler):
    service: EvaluationService
    server_version = "ivoseval"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)

    def _token(self) -> Optional[str]:
        auth = self.headers.get("Authorization", "")
        return auth[7:].strip() if auth.startswith("Bearer ") else None

    def _send(self, status: int, body: bytes, on_handoff: Optional[Callable[[], None]] = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if on_handoff is not None:
            on_handoff()
        self.wfile.write(body)

    def _send_error(self, err: ServiceError) -> None:
        self._send(err.status, json.dumps(err.to_dict()).encode())

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            raise ServiceError("format", "request body too large")
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ServiceError("format", f"invalid JSON: {exc}") from None

    def _dispatch(self, fn):
        try:
            fn()
        except ServiceError as err:
            self._send_error(err)
        except (SessionError, DatasetError) as exc:
            self._send_error(ServiceError("internal", str(exc)))
        except Exception as exc:  # keep the server alive, report the failure
            log.exception("request failed")
            self._send_error(ServiceError("internal", f"{type(exc).__name__}: {exc}"))

    def do_GET(self):
        def handle():
            if self.path == "/health":
                self._send(200, json.dumps(self.service.health()).encode())
                return
            m = _REPORT.match(self.path)
            if not m:
                raise ServiceError("not_found", f"no route for GET {self.path}")
            self._send(200, self.service.report(self._token(), m.group(1)).encode())

        self._dispatch(handle)

    def do_POST(self):
        def handle():
            body = self._body()
            if self.path == "/session":
                payload = self.service.start(
                    self._token(), body.get("sequence"), body.get("split"), deliver=False
                )
                sid = payload["session_id"]
                self._send(200, json.dumps(payload).encode(), lambda: self.service.handoff(sid))
                return
            m = _PREDICTION.match(self.path)
            if not m:
                raise ServiceError("not_found", f"no route for POST {self.path}")
            sid = m.group(1)
            payload = self.service.submit(self._token(), sid, body, deliver=False)
            self._send(200, json.dumps(payload).encode(), lambda: self.service.handoff(sid))

        self._dispatch(handle)


def make_server(service: EvaluationService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve(config: ServiceConfig) -> None:
    service = EvaluationService(config)
    server = make_server(service, config.host, config.port)
    log.info("serving %s on http://%s:%d", config.dataset, *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
