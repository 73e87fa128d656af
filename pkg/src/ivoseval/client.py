"""Client SDK for the evaluation service plus the reference segmenters.

A segmenter sees only what a participant would: sequence metadata, the
scribbles handed out so far and, for the linear baseline, the local video
frames. The oracle segmenter is the exception; it reads local ground truth
and exists for testing the loop.
"""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .baseline import BaselineConfig, FeatureMap, LinearBaseline, default_features, read_feature_map
from .dataset import DatasetManifest
from .masks import RasterSize, StructuringElement, dilate, disk, rle_encode
from .scribbles import ScribbleSet
from .session import (
    SessionConfig,
    SessionLog,
    SessionReport,
    open_session,
    submit_prediction,
)

log = logging.getLogger(__name__)

SEGMENTERS = ("linear", "oracle", "static")


class ClientError(Exception):
    """Failure talking to the service; ``code`` mirrors the service error code."""

    def __init__(self, code: str, message: str, status: Optional[int] = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.status = status


@dataclass(frozen=True)
class SessionInfo:
    session_id: str
    sequence: str
    frames: int
    size: RasterSize
    objects: tuple


# ---------------------------------------------------------------------------
# wire encoding


def encode_prediction(masks: Sequence[np.ndarray]) -> dict:
    """Per-frame, per-object RLE payload for a list of label masks."""
    frames = []
    for m in masks:
        m = np.asarray(m)
        entries = []
        for obj in np.unique(m):
            if obj == 0:
                continue
            entries.append({"object_id": int(obj), "rle": rle_encode(m == obj).to_dict()})
        frames.append(entries)
    return {"masks": frames}


def encode_labels(masks: Sequence[np.ndarray]) -> dict:
    """Raw flat-label payload; larger on the wire, handy when debugging."""
    return {"labels": [np.asarray(m).ravel().astype(int).tolist() for m in masks]}


# ---------------------------------------------------------------------------
# HTTP SDK


class ServiceClient:
    """Thin JSON-over-HTTP client.

    Transport failures (refused connections, timeouts, dropped sockets) are
    retried up to ``retries`` times with exponential backoff; service errors
    are raised immediately as :class:`ClientError`.
    """

    def __init__(self, endpoint: str, token: str, retries: int = 3, backoff_s: float = 0.25,
                 timeout_s: float = 120.0, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint.rstrip("/")
        self.token = token
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self._sleep = sleep

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        data = None if body is None else json.dumps(body).encode()
        headers = {"Authorization": f"Bearer {self.token}"}
        if data is not None:
            headers["Content-Type"] = "application/json"
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint + path, data=data, method=method, headers=headers)
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    return json.loads(resp.read())
            except urllib.error.HTTPError as exc:
                try:
                    err = json.loads(exc.read())
                    raise ClientError(err["code"], err["message"], exc.code) from None
                except (ValueError, KeyError):
                    raise ClientError("http", f"HTTP {exc.code}", exc.code) from None
            except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
                last = exc
                if attempt < self.retries:
                    delay = self.backoff_s * 2**attempt
                    log.warning("%s %s failed (%s); retrying in %.2fs", method, path, exc, delay)
                    self._sleep(delay)
        raise ClientError("transport", f"{method} {path}: {last}")

    def health(self) -> dict:
        return self._request("GET", "/health")

    def start(self, sequence: Optional[str] = None, split: Optional[str] = None) -> tuple:
        """Open a session; returns ``(SessionInfo, first ScribbleSet)``."""
        body = {"sequence": sequence} if sequence else {"split": split}
        r = self._request("POST", "/session", body)
        info = SessionInfo(r["session_id"], r["sequence"], r["frames"], RasterSize(r["width"], r["height"]),
                           tuple(r["objects"]))
        return info, ScribbleSet.from_dict(r["scribbles"], default_kind="simulated")

    def submit_raw(self, session_id: str, body: dict) -> dict:
        return self._request("POST", f"/session/{session_id}/prediction", body)

    def submit(self, session_id: str, masks: Sequence[np.ndarray]) -> dict:
        return self.submit_raw(session_id, encode_prediction(masks))

    def report(self, session_id: str) -> dict:
        return self._request("GET", f"/session/{session_id}/report")


# ---------------------------------------------------------------------------
# segmenters


class Segmenter:
    """Produces a full-sequence label prediction from the scribbles seen so far."""

    def begin(self, info: SessionInfo) -> None:
        raise NotImplementedError

    def predict(self, scribbles: ScribbleSet) -> List[np.ndarray]:
        raise NotImplementedError


class StaticSegmenter(Segmenter):
    """Paints every scribble, dilated, onto its own frame; nothing else."""

    def __init__(self, element: StructuringElement = disk(3)):
        self.element = element

    def begin(self, info: SessionInfo) -> None:
        self.masks = [np.zeros(info.size.shape, dtype=np.uint8) for _ in range(info.frames)]
        self.size = info.size

    def predict(self, scribbles: ScribbleSet) -> List[np.ndarray]:
        for s in scribbles.scribbles:
            region = dilate(s.rasterize(self.size), self.element)
            self.masks[s.frame][region] = s.object_label
        return [m.copy() for m in self.masks]


class OracleSegmenter(Segmenter):
    """Returns the local ground truth; only for exercising the loop."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    def begin(self, info: SessionInfo) -> None:
        self.gt = self.manifest.load_annotations(info.sequence)

    def predict(self, scribbles: ScribbleSet) -> List[np.ndarray]:
        return [m.copy() for m in self.gt]


class LinearSegmenter(Segmenter):
    """Per-object linear classifiers over fixed per-pixel features.

    Features come from ``features_dir/<sequence>.ivfm`` when given, otherwise
    from the cheap colour-position-time default. They are computed once per
    session; only the classifiers are refit each turn.
    """

    def __init__(self, manifest: DatasetManifest, cfg: BaselineConfig = BaselineConfig(),
                 features_dir: Optional[Path] = None):
        self.manifest = manifest
        self.cfg = cfg
        self.features_dir = None if features_dir is None else Path(features_dir)

    def load_features(self, sequence: str) -> FeatureMap:
        if self.features_dir is not None:
            return read_feature_map(self.features_dir / f"{sequence}.ivfm")
        return default_features(self.manifest.load_images(sequence))

    def begin(self, info: SessionInfo) -> None:
        self.features = self.load_features(info.sequence)
        self.model = LinearBaseline(self.features, info.objects, self.cfg)

    def predict(self, scribbles: ScribbleSet) -> List[np.ndarray]:
        return self.model.update(scribbles)


def make_segmenter(kind: str, manifest: DatasetManifest, cfg: BaselineConfig = BaselineConfig(),
                   features_dir: Optional[Path] = None) -> Segmenter:
    if kind == "linear":
        return LinearSegmenter(manifest, cfg, features_dir)
    if kind == "oracle":
        return OracleSegmenter(manifest)
    if kind == "static":
        return StaticSegmenter(cfg.fg_element)
    raise ValueError(f"unknown segmenter {kind!r} (choose from {', '.join(SEGMENTERS)})")


# ---------------------------------------------------------------------------
# loops


@dataclass
class LoopResult:
    session_id: str
    sequence: str
    turns: int
    report: dict
    overall: List[float] = field(default_factory=list)


def run_interactive_loop(client: ServiceClient, segmenter: Segmenter, sequence: Optional[str] = None,
                         split: Optional[str] = None, max_turns: int = 100) -> LoopResult:
    """Drive one session over the wire until the service closes it."""
    info, scribbles = client.start(sequence, split)
    segmenter.begin(info)
    for turn in range(1, max_turns + 1):
        masks = segmenter.predict(scribbles)
        resp = client.submit(info.session_id, masks)
        if "report" in resp:
            report = resp["report"]
            return LoopResult(info.session_id, info.sequence, turn, report,
                              [r["overall"] for r in report["interactions"]])
        scribbles = ScribbleSet.from_dict(resp["scribbles"], default_kind="simulated")
    raise ClientError("turns", f"session {info.session_id} still open after {max_turns} turns")


def fixed_step_clock(step_s: float) -> Callable[[], float]:
    """A clock that advances ``step_s`` per reading, for reproducible offline timing."""
    ticks = [0]

    def clock() -> float:
        ticks[0] += 1
        return ticks[0] * step_s

    return clock


def run_offline_session(
    manifest: DatasetManifest,
    sequence: str,
    segmenter: Segmenter,
    config: SessionConfig,
    clock: Callable[[], float] = time.monotonic,
    log_dir: Optional[Path] = None,
    session_id: Optional[str] = None,
) -> SessionReport:
    """Same loop as :func:`run_interactive_loop` with the service in-process.

    Turnaround time covers the segmenter call only.
    """
    gt = manifest.load_annotations(sequence)
    info = manifest.sequence(sequence)
    sid = session_id or f"offline-{sequence}"
    slog = None if log_dir is None else SessionLog(Path(log_dir) / f"{sid}.jsonl")
    if slog is not None and slog.path.exists():
        slog.path.unlink()
    state, scribbles = open_session(config, gt, manifest.load_pool(sequence), session_id=sid,
                                    clock=clock, log=slog, deliver=False)
    segmenter.begin(SessionInfo(sid, sequence, info.frames, info.size, info.objects))
    while True:
        state.mark_delivered()
        masks = segmenter.predict(scribbles)
        result = submit_prediction(state, masks, gt, deliver=False)
        if result.closed_reason is not None:
            return state.report
        scribbles = result.scribbles

