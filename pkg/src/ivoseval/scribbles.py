"""Scribble types and their JSON document format.

Document layout, shared by the service wire protocol and the human pool files::

    {"sequence": "bear",
     "scribbles": [[], [{"path": [[x, y], ...], "object_id": 1,
                         "start_time": 0.0, "end_time": 2.1}], ...]}

``scribbles`` has one (possibly empty) list per frame of the sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .masks import RasterSize, rasterize_polyline

KINDS = ("human", "simulated", "bootstrap")


class ScribbleError(ValueError):
    pass


@dataclass(frozen=True)
class Scribble:
    frame: int
    object_label: int
    path: Tuple[Tuple[float, float], ...]
    kind: str = "simulated"
    start_time: Optional[float] = None
    end_time: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScribbleError(f"unknown scribble kind {self.kind!r}")
        if not self.path:
            raise ScribbleError("a scribble needs at least one point")
        for x, y in self.path:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ScribbleError(f"scribble point ({x}, {y}) outside [0, 1]")

    def rasterize(self, size: RasterSize, thickness: int = 1) -> np.ndarray:
        return rasterize_polyline(self.path, size, thickness)


@dataclass(frozen=True)
class ScribbleSet:
    sequence: str
    scribbles: Tuple[Scribble, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.scribbles)

    @property
    def frames(self) -> List[int]:
        return sorted({s.frame for s in self.scribbles})

    @property
    def n_points(self) -> int:
        return sum(len(s.path) for s in self.scribbles)

    def labels(self) -> List[int]:
        return sorted({s.object_label for s in self.scribbles})

    def to_dict(self, n_frames: int) -> dict:
        per_frame: List[list] = [[] for _ in range(n_frames)]
        for s in self.scribbles:
            if not 0 <= s.frame < n_frames:
                raise ScribbleError(f"scribble on frame {s.frame} outside 0..{n_frames - 1}")
            entry = {"path": [[x, y] for x, y in s.path], "object_id": s.object_label, "kind": s.kind}
            if s.start_time is not None:
                entry["start_time"] = s.start_time
            if s.end_time is not None:
                entry["end_time"] = s.end_time
            per_frame[s.frame].append(entry)
        return {"sequence": self.sequence, "scribbles": per_frame}

    @classmethod
    def from_dict(cls, data: dict, default_kind: str = "human") -> "ScribbleSet":
        try:
            sequence = str(data["sequence"])
            frames = data["scribbles"]
            out = []
            for t, entries in enumerate(frames):
                for e in entries:
                    out.append(
                        Scribble(
                            frame=t,
                            object_label=int(e["object_id"]),
                            path=tuple((float(x), float(y)) for x, y in e["path"]),
                            kind=e.get("kind", default_kind),
                            start_time=_opt_float(e.get("start_time")),
                            end_time=_opt_float(e.get("end_time")),
                        )
                    )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScribbleError(f"malformed scribble document: {exc}") from None
        return cls(sequence, tuple(out))

    def dumps(self, n_frames: int) -> str:
        return json.dumps(self.to_dict(n_frames))

    def human_duration(self) -> Optional[float]:
        """Summed drawing time when every scribble carries timestamps."""
        if not self.scribbles:
            return None
        total = 0.0
        for s in self.scribbles:
            if s.start_time is None or s.end_time is None:
                return None
            total += max(0.0, s.end_time - s.start_time)
        return total


def _opt_float(v):
    return None if v is None else float(v)


def load_scribble_file(path) -> ScribbleSet:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScribbleError(f"cannot read scribbles {path}: {exc}") from None
    return ScribbleSet.from_dict(data, default_kind="human")


def save_scribble_file(scribbles: ScribbleSet, n_frames: int, path) -> None:
    Path(path).write_text(json.dumps(scribbles.to_dict(n_frames), indent=1))
