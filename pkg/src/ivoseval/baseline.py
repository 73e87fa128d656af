"""Scribble-supervised per-pixel linear classifier.

Scribbles become training labels by dilation: pixels near a scribble are
foreground, a wider band around it is left out of training ("no-care"), and
everything else on the annotated frame is background. One linear classifier
per object is fit on fixed per-pixel features and applied to every frame.
Features are computed once per sequence; only the classifiers are refit when
new scribbles arrive.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

from .masks import RasterSize, StructuringElement, dilate, disk
from .scribbles import ScribbleSet


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    fg_element: StructuringElement = disk(3)
    nocare_element: StructuringElement = disk(9)
    regularization: float = 1.0
    bg_threshold: float = 0.0
    max_samples: int = 20000
    seed: int = 0
    nocare_previous: bool = False

    def __post_init__(self):
        if self.regularization <= 0:
            raise BaselineError("regularization must be positive")
        check_elements(self.fg_element, self.nocare_element)


def check_elements(fg: StructuringElement, nocare: StructuringElement) -> None:
    """Require the no-care element to contain the foreground element."""
    if nocare.radius < fg.radius:
        raise BaselineError(f"no-care radius {nocare.radius} is smaller than foreground radius {fg.radius}")
    big, small = nocare.footprint(), fg.footprint()
    pad = nocare.radius - fg.radius
    if not big[pad : pad + small.shape[0], pad : pad + small.shape[1]][small].all():
        raise BaselineError("no-care element does not contain the foreground element")


@dataclass(frozen=True)
class ScribbleLabels:
    object: int
    fg: np.ndarray
    nocare: np.ndarray
    bg: np.ndarray


def scribble_to_labels(
    scribble: np.ndarray,
    cfg: BaselineConfig = BaselineConfig(),
    others: Optional[np.ndarray] = None,
    previous_fg: Optional[np.ndarray] = None,
    obj: int = 1,
) -> ScribbleLabels:
    """Split a frame into foreground, no-care and background training labels.

    ``others`` marks scribbles of other objects (and background scribbles);
    those pixels are always background. With ``cfg.nocare_previous`` the
    previously predicted foreground ``previous_fg`` becomes no-care wherever
    the new scribbles do not say otherwise.
    """
    check_elements(cfg.fg_element, cfg.nocare_element)
    x = np.asarray(scribble, dtype=bool)
    fg = dilate(x, cfg.fg_element)
    nocare = dilate(x, cfg.nocare_element) & ~fg
    if others is not None:
        others = np.asarray(others, dtype=bool)
        fg &= ~others
        nocare &= ~others
    if cfg.nocare_previous and previous_fg is not None:
        free = ~fg & ~nocare
        if others is not None:
            free &= ~others
        nocare |= np.asarray(previous_fg, dtype=bool) & free
    bg = ~(fg | nocare)
    return ScribbleLabels(obj, fg, nocare, bg)


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureMap:
    """Per-pixel features, ``data`` shaped ``(frames, h, w, dims)``.

    ``h`` and ``w`` are the full raster size divided by ``factor`` (rounded
    up); predictions made at that resolution are upsampled by nearest
    neighbour.
    """

    data: np.ndarray
    size: RasterSize
    factor: int = 1

    def __post_init__(self):
        if self.data.ndim != 4:
            raise BaselineError("feature data must be (frames, h, w, dims)")
        if self.factor < 1:
            raise BaselineError("downsampling factor must be >= 1")
        h, w = self.data.shape[1:3]
        if (h, w) != (-(-self.size.height // self.factor), -(-self.size.width // self.factor)):
            raise BaselineError("feature grid does not match raster size and factor")

    @property
    def dims(self) -> int:
        return self.data.shape[3]

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def downsample(self, mask: np.ndarray) -> np.ndarray:
        """Sample a full-resolution mask at feature-cell centres."""
        if self.factor == 1:
            return np.asarray(mask)
        f = self.factor
        h, w = self.data.shape[1:3]
        ys = np.minimum(np.arange(h) * f + f // 2, self.size.height - 1)
        xs = np.minimum(np.arange(w) * f + f // 2, self.size.width - 1)
        return np.asarray(mask)[np.ix_(ys, xs)]

    def upsample(self, grid: np.ndarray) -> np.ndarray:
        if self.factor == 1:
            return grid
        f = self.factor
        up = np.repeat(np.repeat(grid, f, axis=0), f, axis=1)
        return up[: self.size.height, : self.size.width]


def default_features(frames: np.ndarray) -> FeatureMap:
    """(r, g, b, x, y, t), each scaled to [0, 1]; a degenerate axis maps to 0."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise BaselineError("expected frames shaped (T, H, W, 3)")
    t_n, h, w, _ = frames.shape
    data = np.empty((t_n, h, w, 6), dtype=np.float32)
    data[..., :3] = frames.astype(np.float32) / 255.0
    data[..., 3] = (np.arange(w, dtype=np.float32) / (w - 1 if w > 1 else 1))[None, None, :]
    data[..., 4] = (np.arange(h, dtype=np.float32) / (h - 1 if h > 1 else 1))[None, :, None]
    data[..., 5] = (np.arange(t_n, dtype=np.float32) / (t_n - 1 if t_n > 1 else 1))[:, None, None]
    return FeatureMap(data, RasterSize(w, h), 1)


_MAGIC = b"IVFM"
_HEADER = struct.Struct("<4s8I")


def write_feature_map(fmap: FeatureMap, path) -> None:
    """Binary layout: a little-endian header (magic ``IVFM``, then uint32
    version=1, frames, h, w, dims, factor, full height, full width) followed by
    row-major little-endian float32 values."""
    t_n, h, w, d = fmap.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, t_n, h, w, d, fmap.factor, fmap.size.height, fmap.size.width))
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise BaselineError(f"{path}: truncated feature header")
    magic, version, t_n, h, w, d, factor, full_h, full_w = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise BaselineError(f"{path}: not a feature map file")
    body = raw[_HEADER.size :]
    if len(body) != 4 * t_n * h * w * d:
        raise BaselineError(f"{path}: expected {t_n * h * w * d} values, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(t_n, h, w, d).astype(np.float32)
    return FeatureMap(data, RasterSize(full_w, full_h), factor)


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class LinearScorer:
    weights: np.ndarray
    bias: float

    def score(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weights.shape[0]:
            raise BaselineError(
                f"feature dimensionality {x.shape[-1]} does not match scorer ({self.weights.shape[0]})"
            )
        return x @ self.weights + self.bias


def _subsample(idx: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= limit:
        return idx
    return np.sort(rng.choice(idx, size=limit, replace=False))


def fit_object_classifier(
    features: FeatureMap, labels: Dict[int, ScribbleLabels], cfg: BaselineConfig = BaselineConfig()
) -> LinearScorer:
    """Linear SVM (squared hinge, L2) on the labelled pixels of the annotated frames.

    No-care pixels never enter the objective. Samples are drawn per class up
    to ``cfg.max_samples`` with a generator seeded by ``cfg.seed``, and
    classes are weighted inversely to their frequency.
    """
    xs, ys = [], []
    for t in sorted(labels):
        lab = labels[t]
        feats = features.data[t].reshape(-1, features.dims)
        fg = features.downsample(lab.fg).ravel()
        bg = features.downsample(lab.bg).ravel()
        xs.append(feats[fg])
        ys.append(np.ones(int(fg.sum()), dtype=np.int8))
        xs.append(feats[bg])
        ys.append(np.zeros(int(bg.sum()), dtype=np.int8))
    if not xs:
        raise BaselineError("no annotated frames")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if y.min() == y.max():
        raise BaselineError("training needs both foreground and background pixels")
    rng = np.random.default_rng(cfg.seed)
    keep = np.concatenate(
        [_subsample(np.flatnonzero(y == c), cfg.max_samples, rng) for c in (0, 1)]
    )
    x, y = x[keep].astype(np.float64), y[keep]
    clf = LinearSVC(
        C=cfg.regularization,
        tol=1e-6,
        max_iter=20000,
        class_weight="balanced",
        random_state=cfg.seed,
        dual=False,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(x, y)
    return LinearScorer(clf.coef_[0].astype(np.float64), float(clf.intercept_[0]))


def predict_masks(
    features: FeatureMap, scorers: Dict[int, LinearScorer], bg_threshold: float = 0.0
) -> List[np.ndarray]:
    """Per pixel, the best-scoring object if its score beats ``bg_threshold``, else 0.

    Ties go to the lowest object id.
    """
    if not scorers:
        raise BaselineError("no object scorers")
    ids = sorted(scorers)
    out = []
    for t in range(features.frames):
        feats = features.data[t].astype(np.float64)
        scores = np.stack([scorers[o].score(feats) for o in ids])
        best = np.argmax(scores, axis=0)
        top = np.take_along_axis(scores, best[None], axis=0)[0]
        labels = np.where(top > bg_threshold, np.asarray(ids, dtype=np.uint8)[best], 0).astype(np.uint8)
        out.append(features.upsample(labels))
    return out


# ---------------------------------------------------------------------------
# interactive segmenter


@dataclass
class LinearBaseline:
    """Accumulates scribbles across turns and refits one classifier per object."""

    features: FeatureMap
    objects: Sequence[int]
    cfg: BaselineConfig = field(default_factory=BaselineConfig)
    scribbles: list = field(default_factory=list)
    previous: Optional[List[np.ndarray]] = None

    def update(self, new: ScribbleSet) -> List[np.ndarray]:
        self.scribbles.extend(new.scribbles)
        size = self.features.size
        rasters: Dict[int, Dict[int, np.ndarray]] = {}
        for s in self.scribbles:
            per_frame = rasters.setdefault(s.frame, {})
            r = s.rasterize(size)
            per_frame[s.object_label] = per_frame.get(s.object_label, False) | r

        scorers = {}
        for obj in self.objects:
            labels = {}
            for t, per_label in rasters.items():
                mine = per_label.get(obj)
                others = np.zeros(size.shape, dtype=bool)
                for lab, r in per_label.items():
                    if lab != obj:
                        others |= r
                if mine is None:
                    # the object is not marked on this frame: only the other
                    # scribbles are known background, the rest stays unlabelled
                    if others.any():
                        empty = np.zeros(size.shape, dtype=bool)
                        labels[t] = ScribbleLabels(obj, empty, ~others, others)
                    continue
                prev = None if self.previous is None else self.previous[t] == obj
                labels[t] = scribble_to_labels(mine, self.cfg, others, prev, obj)
            if not labels:
                continue
            try:
                scorers[obj] = fit_object_classifier(self.features, labels, self.cfg)
            except BaselineError:
                continue
        if not scorers:
            masks = [np.zeros(size.shape, dtype=np.uint8) for _ in range(self.features.frames)]
        else:
            masks = predict_masks(self.features, scorers, self.cfg.bg_threshold)
        self.previous = masks
        return masks
