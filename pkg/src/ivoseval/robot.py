"""Simulated annotator: corrective scribbles from prediction errors.

For every object the robot splits the frame's errors into false negatives and
false positives, drops small spurious components, skeletonizes what is left,
takes the longest path through the skeleton and simplifies it into a
polyline.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .masks import (
    RasterSize,
    connected_components,
    polyline_pixels,
    skeletonize,
)
from .scribbles import Scribble, ScribbleSet


class RobotError(ValueError):
    pass


@dataclass(frozen=True)
class RobotParams:
    min_area_fraction: float = 0.005
    max_components_per_kind: int = 1
    simplify_epsilon_px: float = 2.0
    connectivity: int = 8

    def __post_init__(self):
        if not 0 <= self.min_area_fraction < 1:
            raise RobotError("min_area_fraction must lie in [0, 1)")
        if self.simplify_epsilon_px < 0:
            raise RobotError("simplify_epsilon_px must be >= 0")
        if self.max_components_per_kind < 1:
            raise RobotError("max_components_per_kind must be >= 1")
        if self.connectivity not in (4, 8):
            raise RobotError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class AnnotationCostModel:
    base_s: float = 1.5
    per_point_s: float = 0.04

    def __post_init__(self):
        if self.base_s < 0 or self.per_point_s < 0:
            raise RobotError("annotation cost constants must be >= 0")


@dataclass(frozen=True)
class ErrorRegions:
    object: int
    false_neg: np.ndarray
    false_pos: np.ndarray


def error_regions(pred: np.ndarray, gt: np.ndarray, obj: int) -> ErrorRegions:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise RobotError(f"size mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred == obj, gt == obj
    return ErrorRegions(obj, g & ~p, p & ~g)


def filter_spurious(components, frame_area: int, params: RobotParams) -> list:
    threshold = params.min_area_fraction * frame_area
    kept = [c for c in components if c[1] >= threshold]
    return kept[: params.max_components_per_kind]


# ---------------------------------------------------------------------------
# longest path through the skeleton

# Cyclic skeleton graphs up to this size are searched exhaustively; the search
# also gives up after EXACT_SEARCH_BUDGET path extensions.
EXACT_SEARCH_MAX_NODES = 32
EXACT_SEARCH_BUDGET = 200_000


class _BudgetExceeded(Exception):
    pass


def _graph(pixels: List[Tuple[int, int]]) -> List[List[int]]:
    index = {p: i for i, p in enumerate(pixels)}
    adj = []
    for y, x in pixels:
        nbrs = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    j = index.get((y + dy, x + dx))
                    if j is not None:
                        nbrs.append(j)
        # pixel indices are row-major, so sorting gives row-major tie-breaks
        adj.append(sorted(nbrs))
    return adj


def _components(adj: List[List[int]]) -> List[List[int]]:
    seen = [False] * len(adj)
    comps = []
    for start in range(len(adj)):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = [], deque([start])
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def _bfs(adj, root, allowed=None):
    dist = {root: 0}
    parent = {root: None}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist and (allowed is None or (u, v) in allowed):
                dist[v] = dist[u] + 1
                parent[v] = u
                queue.append(v)
    return dist, parent


def _farthest(dist: Dict[int, int]) -> int:
    best = max(dist.values())
    return min(n for n, d in dist.items() if d == best)


def _tree_diameter(adj, root, allowed=None) -> List[int]:
    dist, _ = _bfs(adj, root, allowed)
    a = _farthest(dist)
    dist, parent = _bfs(adj, a, allowed)
    b = _farthest(dist)
    path = [b]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def _exact_longest(adj, comp: List[int]) -> List[int]:
    best: List[int] = [comp[0]]
    steps = 0
    for start in comp:
        path = [start]
        on_path = {start}
        iters = [iter(adj[start])]
        while iters:
            v = next(iters[-1], None)
            if v is None:
                iters.pop()
                on_path.discard(path.pop())
                continue
            if v in on_path:
                continue
            steps += 1
            if steps > EXACT_SEARCH_BUDGET:
                raise _BudgetExceeded
            path.append(v)
            on_path.add(v)
            iters.append(iter(adj[v]))
            if len(path) > len(best):
                best = list(path)
                if len(best) == len(comp):
                    return best
    return best


def _spanning_tree_diameter(adj, comp: List[int]) -> List[int]:
    root = comp[0]
    _, parent = _bfs(adj, root)
    allowed = set()
    for v, u in parent.items():
        if u is not None:
            allowed.add((u, v))
            allowed.add((v, u))
    return _tree_diameter(adj, root, allowed)


def _longest_in_component(adj, comp: List[int]) -> List[int]:
    n_edges = sum(len(adj[u]) for u in comp) // 2
    if n_edges == len(comp) - 1:
        return _tree_diameter(adj, comp[0])
    if len(comp) <= EXACT_SEARCH_MAX_NODES:
        try:
            return _exact_longest(adj, comp)
        except _BudgetExceeded:
            pass
    return _spanning_tree_diameter(adj, comp)


def longest_path_in_pixels(pixels: Sequence[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """Longest simple path through the 8-adjacency graph of ``(row, col)`` pixels.

    Acyclic graphs use the double breadth-first sweep. Small cyclic ones are
    searched exhaustively (see :data:`EXACT_SEARCH_MAX_NODES`); larger ones are
    reduced to the breadth-first spanning tree rooted at the first
    pixel in row-major order. Returns ``(row, col)`` pixels.
    """
    pixels = sorted(tuple(p) for p in pixels)
    if not pixels:
        raise RobotError("no pixels")
    adj = _graph(pixels)
    best: List[int] = []
    for comp in _components(adj):
        path = _longest_in_component(adj, comp)
        if len(path) > len(best):
            best = path
    return [pixels[i] for i in best]


def skeleton_longest_path(region: np.ndarray) -> List[Tuple[int, int]]:
    """Longest path through the skeleton of ``region`` as ``(x, y)`` pixels."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise RobotError("cannot trace an empty region")
    skel = skeletonize(region)
    pixels = [(int(y), int(x)) for y, x in np.argwhere(skel)]
    return [(x, y) for y, x in longest_path_in_pixels(pixels)]


# ---------------------------------------------------------------------------
# simplification


def _segment_distance(p, a, b) -> float:
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / denom))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _chord_inside(a, b, region: np.ndarray) -> bool:
    return all(region[y, x] for x, y in polyline_pixels([a, b]))


def simplify_indices(path: Sequence[Tuple[int, int]], epsilon: float, region: Optional[np.ndarray] = None) -> List[int]:
    """Indices kept by farthest-point (Ramer-Douglas-Peucker) simplification.

    With ``region`` given, a chord is also split whenever its Bresenham line
    leaves the region, so the simplified polyline stays inside it.
    ``epsilon == 0`` keeps every point.
    """
    n = len(path)
    if n == 0:
        raise RobotError("cannot simplify an empty path")
    if n <= 2 or epsilon <= 0:
        return list(range(n))
    keep = [False] * n
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        a, b = path[lo], path[hi]
        dmax, imax = -1.0, lo + 1
        for i in range(lo + 1, hi):
            d = _segment_distance(path[i], a, b)
            if d > dmax:
                dmax, imax = d, i
        split = dmax > epsilon
        if not split and region is not None and not _chord_inside(a, b, region):
            split = True
            if dmax == 0:
                imax = (lo + hi) // 2
        if split:
            keep[imax] = True
            stack.append((imax, hi))
            stack.append((lo, imax))
    return [i for i in range(n) if keep[i]]


def normalize_points(points: Sequence[Tuple[int, int]], size: RasterSize) -> List[Tuple[float, float]]:
    sx = size.width - 1 or 1
    sy = size.height - 1 or 1
    return [(x / sx, y / sy) for x, y in points]


def simplify_path(
    path: Sequence[Tuple[int, int]],
    epsilon: float,
    size: RasterSize,
    region: Optional[np.ndarray] = None,
) -> List[Tuple[float, float]]:
    size = RasterSize(*size)
    kept = [path[i] for i in simplify_indices(path, epsilon, region)]
    return normalize_points(kept, size)


# ---------------------------------------------------------------------------
# scribble generation


def _majority_label(gt: np.ndarray, component: np.ndarray) -> int:
    counts = np.bincount(gt[component].astype(np.int64))
    return int(np.argmax(counts))  # lowest label wins ties


def simulate_corrections(
    pred: np.ndarray,
    gt: np.ndarray,
    frame: int,
    objects: Iterable[int],
    params: RobotParams = RobotParams(),
    kind: str = "simulated",
) -> List[Tuple[Scribble, np.ndarray]]:
    """Scribbles for one frame, each paired with the error component it traces."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise RobotError(f"size mismatch: {pred.shape} vs {gt.shape}")
    size = RasterSize.of(gt)
    area = size.area
    out: List[Tuple[Scribble, np.ndarray]] = []
    seen = set()
    for obj in objects:
        regions = error_regions(pred, gt, obj)
        for errors, is_fn in ((regions.false_neg, True), (regions.false_pos, False)):
            comps = filter_spurious(connected_components(errors, params.connectivity), area, params)
            for comp, _ in comps:
                label = obj if is_fn else _majority_label(gt, comp)
                pix = skeleton_longest_path(comp)
                pts = simplify_path(pix, params.simplify_epsilon_px, size, region=comp)
                key = (label, tuple(pts))
                if key in seen:
                    continue
                seen.add(key)
                out.append((Scribble(frame, label, tuple(pts), kind), comp))
    return out


def generate_scribbles(
    pred: np.ndarray,
    gt: np.ndarray,
    frame: int,
    objects: Iterable[int],
    params: RobotParams = RobotParams(),
    sequence: str = "",
) -> ScribbleSet:
    pairs = simulate_corrections(pred, gt, frame, objects, params)
    return ScribbleSet(sequence, tuple(s for s, _ in pairs))


def estimate_annotation_time(scribbles: ScribbleSet, model: AnnotationCostModel = AnnotationCostModel()) -> float:
    if len(scribbles) == 0:
        return 0.0
    return model.base_s + model.per_point_s * scribbles.n_points


def bootstrap_initial_scribbles(
    gt: np.ndarray,
    frame: int,
    objects: Sequence[int],
    params: RobotParams = RobotParams(),
    sequence: str = "",
) -> ScribbleSet:
    """One foreground scribble per object, traced from the ground truth itself."""
    gt = np.asarray(gt)
    present = set(np.unique(gt).tolist())
    missing = [o for o in objects if o not in present]
    if missing:
        raise RobotError(f"objects {missing} absent from frame {frame}")
    # no area threshold: every listed object must receive its scribble
    params = replace(params, min_area_fraction=0.0, max_components_per_kind=1)
    empty = np.zeros_like(gt)
    pairs = simulate_corrections(empty, gt, frame, objects, params, kind="bootstrap")
    return ScribbleSet(sequence, tuple(s for s, _ in pairs))
