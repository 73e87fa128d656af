"""Raster foundations: label/binary masks, codecs, components, morphology, thinning.

Masks are plain numpy arrays of shape ``(height, width)``: ``uint8`` for label
masks (0 = background, 1..254 = object id) and ``bool`` for binary masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_LABEL = 254


class MaskError(ValueError):
    pass


class RasterSize(NamedTuple):
    width: int
    height: int

    @classmethod
    def of(cls, mask: np.ndarray) -> "RasterSize":
        return cls(int(mask.shape[1]), int(mask.shape[0]))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return self.width * self.height

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise MaskError(f"raster size must be positive, got {self.width}x{self.height}")
        if self.width * self.height > 2**31:
            raise MaskError("raster too large")


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "disk"
    radius: int = 0

    def __post_init__(self):
        if self.shape not in ("disk", "square"):
            raise MaskError(f"unknown structuring element shape {self.shape!r}")
        if self.radius < 0:
            raise MaskError("structuring element radius must be >= 0")

    def footprint(self) -> np.ndarray:
        return _footprint(self.shape, self.radius).copy()


@lru_cache(maxsize=64)
def _footprint(shape: str, radius: int) -> np.ndarray:
    r = radius
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    if shape == "square":
        fp = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    else:
        fp = xx * xx + yy * yy <= r * r
    fp.flags.writeable = False
    return fp


def disk(radius: int) -> StructuringElement:
    return StructuringElement("disk", radius)


@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, alternating background/foreground, background first."""

    size: RasterSize
    runs: Tuple[int, ...]

    def to_dict(self) -> dict:
        return {"size": [self.size.height, self.size.width], "runs": list(self.runs)}

    @classmethod
    def from_dict(cls, data: dict) -> "RleMask":
        try:
            h, w = (int(v) for v in data["size"])
            runs = tuple(int(v) for v in data["runs"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MaskError(f"malformed RLE payload: {exc}") from None
        return cls(RasterSize(w, h), runs)


# ---------------------------------------------------------------------------
# label masks


def load_label_mask(path) -> np.ndarray:
    """Read an indexed-palette image; palette indices are object ids."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            labels = np.array(im)
    except (OSError, ValueError) as exc:
        raise MaskError(f"cannot read mask {path}: {exc}") from None
    if mode != "P":
        raise MaskError(f"{path}: expected an indexed-palette image, got mode {mode}")
    if labels.size and labels.max() > MAX_LABEL:
        raise MaskError(f"{path}: label {int(labels.max())} exceeds {MAX_LABEL}")
    return labels.astype(np.uint8)


def davis_palette() -> List[int]:
    """The usual VOC/DAVIS colour map, flattened to 768 ints."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


def save_label_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise MaskError("label mask must be 2-D")
    if mask.size and (mask.min() < 0 or mask.max() > MAX_LABEL):
        raise MaskError(f"labels must lie in 0..{MAX_LABEL}")
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    im.putpalette(davis_palette())
    im.save(Path(path))


def extract_object(mask: np.ndarray, obj_id: int) -> np.ndarray:
    if obj_id < 1:
        raise MaskError("object ids start at 1")
    return np.asarray(mask) == obj_id


def object_ids(mask: np.ndarray) -> List[int]:
    return [int(v) for v in np.unique(mask) if v != 0]


# ---------------------------------------------------------------------------
# components and morphology

_STRUCT = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: np.ndarray, connectivity: int = 8) -> List[Tuple[np.ndarray, int]]:
    """Split ``mask`` into components, largest first.

    Ties in area are broken by the row-major index of each component's first
    pixel, which is exactly the order ``ndimage.label`` assigns labels in.
    """
    if connectivity not in _STRUCT:
        raise MaskError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_STRUCT[connectivity])
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    order = sorted(range(n), key=lambda i: (-int(areas[i]), i))
    return [(labels == i + 1, int(areas[i])) for i in order]


def count_components(mask: np.ndarray, connectivity: int = 8) -> int:
    return int(ndimage.label(np.asarray(mask, dtype=bool), structure=_STRUCT[connectivity])[1])


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if se.radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_footprint(se.shape, se.radius))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background; the image border counts as background."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


# ---------------------------------------------------------------------------
# thinning
#
# Neighbour bit i corresponds to _RING[i]; order is N, NE, E, SE, S, SW, W, NW.

_RING = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _ring_components(bits: Sequence[bool], adjacency: int) -> int:
    # components among ring cells (centre excluded) under 4- or 8-adjacency
    cells = [i for i in range(8) if bits[i]]
    seen = set()
    count = 0
    for start in cells:
        if start in seen:
            continue
        count += 1
        stack = [start]
        seen.add(start)
        while stack:
            i = stack.pop()
            yi, xi = _RING[i]
            for j in cells:
                if j in seen:
                    continue
                yj, xj = _RING[j]
                dy, dx = abs(yi - yj), abs(xi - xj)
                if (adjacency == 8 and max(dy, dx) == 1) or (adjacency == 4 and dy + dx == 1):
                    seen.add(j)
                    stack.append(j)
    return count


def _build_luts() -> Tuple[np.ndarray, np.ndarray]:
    simple = np.zeros(256, dtype=bool)
    nbcount = np.zeros(256, dtype=np.uint8)
    for code in range(256):
        fg = [bool(code >> i & 1) for i in range(8)]
        nbcount[code] = sum(fg)
        if not any(fg):
            continue
        # background components that touch the centre through a 4-neighbour
        bg = [not v for v in fg]
        bg_touching = 0
        seen = set()
        for i in range(8):
            if not bg[i] or i in seen:
                continue
            comp = {i}
            stack = [i]
            while stack:
                a = stack.pop()
                ya, xa = _RING[a]
                for b in range(8):
                    if bg[b] and b not in comp:
                        yb, xb = _RING[b]
                        if abs(ya - yb) + abs(xa - xb) == 1:
                            comp.add(b)
                            stack.append(b)
            seen |= comp
            if any(j % 2 == 0 for j in comp):
                bg_touching += 1
        simple[code] = _ring_components(fg, 8) == 1 and bg_touching == 1
    return simple, nbcount


_SIMPLE, _NBCOUNT = _build_luts()
_SIMPLE.flags.writeable = False
_NBCOUNT.flags.writeable = False


def _neighbour_codes(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, constant_values=False)
    h, w = img.shape
    code = np.zeros(img.shape, dtype=np.uint8)
    for bit, (dy, dx) in enumerate(_RING):
        code |= p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w].astype(np.uint8) << bit
    return code


# border direction -> ring bit that must be background
_DIRECTIONS = (0, 4, 2, 6)  # N, S, E, W
_SUBFIELDS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _thin(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    fields = [((yy % 2) == sy) & ((xx % 2) == sx) for sy, sx in _SUBFIELDS]
    changed = True
    while changed:
        changed = False
        for direction in _DIRECTIONS:
            for field in fields:
                code = _neighbour_codes(img)
                border = ((code >> direction) & 1) == 0
                kill = img & field & border & _SIMPLE[code] & (_NBCOUNT[code] >= 2)
                if kill.any():
                    img = img & ~kill
                    changed = True
    return img


def _blocks(img: np.ndarray) -> np.ndarray:
    return img[:-1, :-1] & img[:-1, 1:] & img[1:, :-1] & img[1:, 1:]


def _break_blocks(img: np.ndarray) -> np.ndarray:
    # Rare leftovers, e.g. four diagonal arms meeting at a 2x2 block: no pixel
    # of the block is simple. Delete a block pixel that keeps the component
    # count; failing that, delete the first one and keep only the largest
    # resulting piece of the split component.
    img = img.copy()
    while True:
        blk = _blocks(img)
        if not blk.any():
            return img
        y, x = (int(v) for v in np.argwhere(blk)[0])
        cells = [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)]
        lab, n = ndimage.label(img, structure=_STRUCT[8])
        comp = lab == lab[y, x]
        for cy, cx in cells:
            trial = comp.copy()
            trial[cy, cx] = False
            if count_components(trial) == 1:
                img[cy, cx] = False
                break
        else:
            cy, cx = cells[0]
            comp[cy, cx] = False
            img[cy, cx] = False
            pieces = connected_components(comp)
            for piece, _ in pieces[1:]:
                img &= ~piece


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin ``mask`` to a unit-width, topology-preserving skeleton.

    Sequential-by-subfield thinning: each pass visits the four border
    directions N, S, E, W and, for each, the four 2x2 parity subfields in
    order (0,0), (0,1), (1,0), (1,1). Pixels of one subfield are never
    8-adjacent, so deleting all simple, non-end border pixels of a subfield at
    once preserves topology. Passes repeat until nothing changes; any 2x2
    block that survives is then broken explicitly.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = _thin(mask[y0:y1, x0:x1].copy())
    if crop.shape[0] > 1 and crop.shape[1] > 1:
        crop = _break_blocks(crop)
    out = np.zeros_like(mask)
    out[y0:y1, x0:x1] = crop
    return out


# ---------------------------------------------------------------------------
# run-length codec


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    size = RasterSize.of(mask)
    flat = mask.ravel()
    if flat.size == 0:
        return RleMask(size, (0,))
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RleMask(size, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    size = rle.size
    if size.width < 1 or size.height < 1:
        raise MaskError("RLE size must be positive")
    runs = np.asarray(rle.runs, dtype=np.int64)
    if runs.size == 0 or (runs < 0).any():
        raise MaskError("RLE runs must be non-negative and non-empty")
    if int(runs.sum()) != size.area:
        raise MaskError(f"RLE runs sum to {int(runs.sum())}, expected {size.area}")
    values = (np.arange(runs.size) % 2).astype(bool)
    return np.repeat(values, runs).reshape(size.shape)


# ---------------------------------------------------------------------------
# polylines


def to_pixel(x: float, y: float, size: RasterSize) -> Tuple[int, int]:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(x * (size.width - 1) + 0.5)), int(np.floor(y * (size.height - 1) + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int) -> List[Tuple[int, int]]:
    """Integer line from (x0, y0) to (x1, y1), endpoints included, 8-connected."""
    points = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        points.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return points
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def polyline_pixels(pixels: Sequence[Tuple[int, int]]) -> List[Tuple[int, int]]:
    if len(pixels) == 1:
        return [tuple(pixels[0])]
    out = []
    for (xa, ya), (xb, yb) in zip(pixels[:-1], pixels[1:]):
        seg = bresenham(xa, ya, xb, yb)
        out.extend(seg if not out else seg[1:])
    return out


def rasterize_polyline(points, size: RasterSize, thickness: int = 1) -> np.ndarray:
    """Render normalised ``(x, y)`` points as a binary mask.

    Segments are drawn with Bresenham lines and the result is dilated by a
    disk of radius ``thickness - 1``.
    """
    size = RasterSize(*size)
    size.validate()
    if thickness < 1:
        raise MaskError("thickness must be >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(size.shape, dtype=bool)
    if not np.isfinite(pts).all() or pts.min() < 0 or pts.max() > 1:
        raise MaskError("polyline coordinates must lie in [0, 1]")
    pixels = [to_pixel(x, y, size) for x, y in pts]
    out = np.zeros(size.shape, dtype=bool)
    for x, y in polyline_pixels(pixels):
        out[y, x] = True
    return dilate(out, disk(thickness - 1))
