"""Dataset layout, manifests, and the synthetic moving-squares generator.

Layout under a dataset root::

    Images/<sequence>/00000.jpg ...
    Annotations/<sequence>/00000.png ...   indexed palette, index = object id
    Splits/<split>.txt                     one sequence per line
    Scribbles/<sequence>/<annotator>.json  optional human scribble pool
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .masks import MaskError, RasterSize, load_label_mask, save_label_mask
from .scribbles import ScribbleSet, load_scribble_file

STANDARD_SPLIT_SIZES = {"train": 60, "val": 30, "test-dev": 30, "test-challenge": 30}


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class SequenceInfo:
    name: str
    frames: int
    size: RasterSize
    objects: Tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    splits: Dict[str, List[str]]
    sequences: Dict[str, SequenceInfo]
    has_annotations: bool = True

    def sequence(self, name: str) -> SequenceInfo:
        try:
            return self.sequences[name]
        except KeyError:
            raise DatasetError(f"unknown sequence {name!r}") from None

    def image_paths(self, name: str) -> List[Path]:
        return sorted((self.root / "Images" / name).glob("*.jpg"))

    def annotation_paths(self, name: str) -> List[Path]:
        return sorted((self.root / "Annotations" / name).glob("*.png"))

    def load_images(self, name: str) -> np.ndarray:
        """All frames as a ``(T, H, W, 3)`` uint8 array."""
        self.sequence(name)
        frames = []
        for p in self.image_paths(name):
            with Image.open(p) as im:
                frames.append(np.asarray(im.convert("RGB")))
        return np.stack(frames)

    def load_annotations(self, name: str) -> List[np.ndarray]:
        if not self.has_annotations:
            raise DatasetError("this manifest was loaded without annotations")
        self.sequence(name)
        return [load_label_mask(p) for p in self.annotation_paths(name)]

    def load_pool(self, name: str) -> Optional[ScribbleSet]:
        """First human scribble file for ``name`` (annotators in name order), if any."""
        files = sorted((self.root / "Scribbles" / name).glob("*.json"))
        if not files:
            return None
        return load_scribble_file(files[0])

    def split(self, name: str) -> List[str]:
        try:
            return list(self.splits[name])
        except KeyError:
            raise DatasetError(f"unknown split {name!r}") from None

    def check_standard_splits(self) -> Dict[str, Tuple[int, int]]:
        """Split sizes that differ from the standard 60/30/30/30 layout, as ``{split: (found, expected)}``."""
        return {
            k: (len(self.splits.get(k, [])), n)
            for k, n in STANDARD_SPLIT_SIZES.items()
            if len(self.splits.get(k, [])) != n
        }


def load_manifest(root, annotations: bool = True) -> DatasetManifest:
    """Index a dataset root.

    With ``annotations=False`` (the client side) only images are required and
    object ids are left empty.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    split_dir = root / "Splits"
    split_files = sorted(split_dir.glob("*.txt")) if split_dir.is_dir() else []
    if not split_files:
        raise DatasetError(f"{root}: no split files under Splits/")
    splits = {}
    for f in split_files:
        splits[f.stem] = [ln.strip() for ln in f.read_text().splitlines() if ln.strip()]

    names = sorted({s for seqs in splits.values() for s in seqs})
    sequences = {}
    for name in names:
        images = sorted((root / "Images" / name).glob("*.jpg"))
        if not images:
            raise DatasetError(f"sequence {name!r}: no images under Images/{name}")
        if annotations:
            ann_dir = root / "Annotations" / name
            if not ann_dir.is_dir():
                raise DatasetError(f"sequence {name!r}: missing annotations directory {ann_dir}")
            anns = sorted(ann_dir.glob("*.png"))
            if len(anns) != len(images):
                raise DatasetError(
                    f"sequence {name!r}: {len(images)} images but {len(anns)} annotations"
                )
            ids = set()
            size = None
            for p in anns:
                try:
                    m = load_label_mask(p)
                except MaskError as exc:
                    raise DatasetError(f"sequence {name!r}: {exc}") from None
                fsize = RasterSize.of(m)
                if size is not None and fsize != size:
                    raise DatasetError(f"sequence {name!r}: frame {p.name} has size {fsize}, expected {size}")
                size = fsize
                ids.update(int(v) for v in np.unique(m) if v)
            objects = tuple(sorted(ids))
        else:
            with Image.open(images[0]) as im:
                size = RasterSize(*im.size)
            objects = ()
        sequences[name] = SequenceInfo(name, len(images), size, objects)
    return DatasetManifest(root, splits, sequences, has_annotations=annotations)


# ---------------------------------------------------------------------------
# synthetic moving squares

OBJECT_COLOURS = ((0.90, 0.15, 0.15), (0.15, 0.85, 0.20), (0.20, 0.30, 0.95))
BACKGROUND = (0.30, 0.28, 0.32)


@dataclass(frozen=True)
class SynthSpec:
    sequences: int = 2
    frames: int = 10
    width: int = 64
    height: int = 64
    objects: int = 2
    motion: str = "linear"
    seed: int = 7
    split: str = "val"

    def __post_init__(self):
        if not 1 <= self.objects <= 3:
            raise DatasetError("synthetic sequences carry 1 to 3 objects")
        if self.motion not in ("linear", "bounce"):
            raise DatasetError(f"unknown motion model {self.motion!r}")
        if self.sequences < 1 or self.frames < 1:
            raise DatasetError("need at least one sequence and one frame")
        if min(self.width, self.height) < 16:
            raise DatasetError("synthetic frames must be at least 16x16")


@dataclass(frozen=True)
class SquareTrack:
    """A square of side ``side`` whose top-left corner moves by ``velocity`` per frame."""

    side: int
    start: Tuple[int, int]
    velocity: Tuple[int, int]
    motion: str

    def position(self, t: int, size: RasterSize) -> Tuple[int, int]:
        out = []
        for p0, v, extent in zip(self.start, self.velocity, (size.width, size.height)):
            p = p0 + v * t
            if self.motion == "bounce":
                span = extent - self.side
                p = p % (2 * span) if span else 0
                p = p if p <= span else 2 * span - p
            out.append(p)
        return out[0], out[1]


def _tracks(spec: SynthSpec, rng: np.random.Generator) -> List[SquareTrack]:
    size = RasterSize(spec.width, spec.height)
    lo, hi = max(4, min(size) // 6), max(5, min(size) // 3)
    tracks = []
    for _ in range(spec.objects):
        side = int(rng.integers(lo, hi + 1))
        start, vel = [], []
        for extent in (size.width, size.height):
            span = extent - side
            v = int(rng.integers(-3, 4))
            if spec.motion == "linear":
                while v and abs(v) * (spec.frames - 1) > span:
                    v -= int(np.sign(v))
                lo_p = max(0, -v * (spec.frames - 1))
                hi_p = min(span, span - v * (spec.frames - 1))
            else:
                lo_p, hi_p = 0, span
            start.append(int(rng.integers(lo_p, hi_p + 1)))
            vel.append(v)
        tracks.append(SquareTrack(side, (start[0], start[1]), (vel[0], vel[1]), spec.motion))
    return tracks


def render_labels(tracks: List[SquareTrack], t: int, size: RasterSize) -> np.ndarray:
    labels = np.zeros(size.shape, dtype=np.uint8)
    for k, tr in enumerate(tracks, start=1):
        x, y = tr.position(t, size)
        labels[y : y + tr.side, x : x + tr.side] = k  # higher ids drawn on top
    return labels


def render_image(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    img = np.empty((h, w, 3))
    img[:] = BACKGROUND
    img += 0.08 * np.linspace(-1, 1, w)[None, :, None]
    for k, colour in enumerate(OBJECT_COLOURS, start=1):
        img[labels == k] = colour
    img += rng.normal(0, 0.03, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def write_synthetic(spec: SynthSpec, out) -> DatasetManifest:
    """Write a moving-squares dataset; identical output for identical specs."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(spec.seed)
        size = RasterSize(spec.width, spec.height)
        names, meta = [], {"spec": asdict(spec), "sequences": {}}
        for i in range(spec.sequences):
            name = f"synth-{i:03d}"
            names.append(name)
            tracks = _tracks(spec, rng)
            meta["sequences"][name] = [asdict(t) for t in tracks]
            (out / "Images" / name).mkdir(parents=True, exist_ok=True)
            (out / "Annotations" / name).mkdir(parents=True, exist_ok=True)
            for t in range(spec.frames):
                labels = render_labels(tracks, t, size)
                save_label_mask(labels, out / "Annotations" / name / f"{t:05d}.png")
                Image.fromarray(render_image(labels, rng)).save(
                    out / "Images" / name / f"{t:05d}.jpg", quality=95
                )
        (out / "Splits").mkdir(exist_ok=True)
        (out / "Splits" / f"{spec.split}.txt").write_text("\n".join(names) + "\n")
        (out / "synth.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    except OSError as exc:
        raise DatasetError(f"cannot write synthetic dataset to {out}: {exc}") from None
    return load_manifest(out)
