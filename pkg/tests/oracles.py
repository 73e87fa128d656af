"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def jaccard_oracle(a, b):
    inter = union = 0
    for x, y in zip(np.asarray(a, bool).ravel().tolist(), np.asarray(b, bool).ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def boundary_oracle(m):
    m = np.asarray(m, bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx]:
                    out[y, x] = True
    return out


def boundary_f_oracle(pred, gt, fraction=0.008):
    h, w = np.asarray(pred).shape
    r = math.ceil(fraction * math.hypot(h, w))
    pb = list(zip(*np.nonzero(boundary_oracle(pred))))
    gb = list(zip(*np.nonzero(boundary_oracle(gt))))
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def matched(src, dst):
        return sum(any((y - v) ** 2 + (x - u) ** 2 <= r * r for v, u in dst) for y, x in src)

    p = matched(pb, gb) / len(pb)
    rc = matched(gb, pb) / len(gb)
    return 0.0 if p + rc == 0 else 2 * p * rc / (p + rc)


def dilate_oracle(m, radius, shape="disk"):
    m = np.asarray(m, bool)
    h, w = m.shape
    out = np.zeros_like(m)
    offsets = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if shape == "square" or dy * dy + dx * dx <= radius * radius
    ]
    for y in range(h):
        for x in range(w):
            out[y, x] = any(
                0 <= y - dy < h and 0 <= x - dx < w and m[y - dy, x - dx] for dy, dx in offsets
            )
    return out


def flood_components(m, connectivity=8):
    m = np.asarray(m, bool)
    h, w = m.shape
    nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        nbrs += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    seen = np.zeros_like(m)
    comps = []
    for y in range(h):
        for x in range(w):
            if m[y, x] and not seen[y, x]:
                comp, stack = set(), [(y, x)]
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    comp.add((cy, cx))
                    for dy, dx in nbrs:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps


def longest_simple_path_oracle(pixels):
    """Length (in nodes) of the longest simple path in the 8-adjacency graph."""
    pixels = set(map(tuple, pixels))
    adj = {p: [(p[0] + dy, p[1] + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dy or dx) and (p[0] + dy, p[1] + dx) in pixels] for p in pixels}
    best = 0

    def walk(node, visited):
        nonlocal best
        best = max(best, len(visited))
        for n in adj[node]:
            if n not in visited:
                visited.add(n)
                walk(n, visited)
                visited.remove(n)

    for p in pixels:
        walk(p, {p})
    return best


def worst_frame_oracle(frame_scores):
    """frame_scores: {frame: [jf per object]}; argmin of means, lowest index on ties."""
    best_t, best_v = None, None
    for t in sorted(frame_scores):
        v = sum(frame_scores[t]) / len(frame_scores[t])
        if best_v is None or v < best_v:
            best_t, best_v = t, v
    return best_t


def has_block(m):
    m = np.asarray(m, bool)
    return bool((m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]).any())


def random_blobs(rng, h, w, n_blobs=None, max_r=None):
    """Union of random discs and rectangles."""
    n_blobs = n_blobs or int(rng.integers(1, 4))
    max_r = max_r or max(2, min(h, w) // 4)
    yy, xx = np.mgrid[:h, :w]
    m = np.zeros((h, w), bool)
    for _ in range(n_blobs):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        r = int(rng.integers(1, max_r + 1))
        if rng.random() < 0.5:
            m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            m |= (abs(yy - cy) <= r) & (abs(xx - cx) <= int(rng.integers(1, max_r + 1)))
    return m


def boundary_f_pairs_oracle(pred, gt, fraction=0.008):
    """All-pairs boundary matching with a dense distance matrix (same rule as above)."""
    h, w = np.asarray(pred).shape
    r = math.ceil(fraction * math.hypot(h, w))
    pb = np.argwhere(boundary_oracle(pred))
    gb = np.argwhere(boundary_oracle(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    d2 = ((pb[:, None, :] - gb[None, :, :]) ** 2).sum(axis=2)
    close = d2 <= r * r
    p = int(close.any(axis=1).sum()) / len(pb)
    rc = int(close.any(axis=0).sum()) / len(gb)
    return 0.0 if p + rc == 0 else 2 * p * rc / (p + rc)
