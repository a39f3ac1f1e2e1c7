"""Binary-mask and label-map algorithms.

Masks are 2-D boolean arrays indexed ``[row, col]``; label maps are 2-D
integer arrays with 0 for background. Foreground connectivity is 8-way and
background connectivity 4-way throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jit import kernel, loop_kernel
from .errors import InvalidArgument

OUTER = "outer"
HOLE = "hole"


# --------------------------------------------------------------------------
# morphology
# --------------------------------------------------------------------------


def _erode_np(m, r):
    h, w = m.shape
    p = np.zeros((h + 2 * r, w + 2 * r), np.uint8)
    p[r : r + h, r : r + w] = m
    t = np.ones((h + 2 * r, w), np.uint8)
    for d in range(2 * r + 1):
        t &= p[:, d : d + w]
    out = np.ones((h, w), np.uint8)
    for d in range(2 * r + 1):
        out &= t[d : d + h, :]
    return out


@kernel(_erode_np)
def _erode(m, r):
    h, w = m.shape
    t = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            v = 1
            for d in range(-r, r + 1):
                jj = j + d
                if jj < 0 or jj >= w or m[i, jj] == 0:
                    v = 0
                    break
            t[i, j] = v
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            v = 1
            for d in range(-r, r + 1):
                ii = i + d
                if ii < 0 or ii >= h or t[ii, j] == 0:
                    v = 0
                    break
            out[i, j] = v
    return out


def _dilate_np(m, r):
    h, w = m.shape
    p = np.zeros((h + 2 * r, w + 2 * r), np.uint8)
    p[r : r + h, r : r + w] = m
    t = np.zeros((h + 2 * r, w), np.uint8)
    for d in range(2 * r + 1):
        t |= p[:, d : d + w]
    out = np.zeros((h, w), np.uint8)
    for d in range(2 * r + 1):
        out |= t[d : d + h, :]
    return out


@kernel(_dilate_np)
def _dilate(m, r):
    h, w = m.shape
    t = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            v = 0
            for d in range(-r, r + 1):
                jj = j + d
                if jj >= 0 and jj < w and m[i, jj] != 0:
                    v = 1
                    break
            t[i, j] = v
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            v = 0
            for d in range(-r, r + 1):
                ii = i + d
                if ii >= 0 and ii < h and t[ii, j] != 0:
                    v = 1
                    break
            out[i, j] = v
    return out


def morphology(mask, op: str, kernel: int = 3) -> np.ndarray:
    """Binary erode/dilate/open/close with a ``kernel`` x ``kernel`` square.

    Everything outside the grid is background. Closing is evaluated on a
    frame grown by the kernel radius so regions touching the border are not
    eaten by the final erosion.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgument(f"kernel size must be odd and >= 1, got {kernel}")
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.ndim != 2:
        raise InvalidArgument("mask must be 2-D")
    r = kernel // 2
    if r == 0:
        return m.astype(bool)
    if op == "erode":
        out = _erode(m, r)
    elif op == "dilate":
        out = _dilate(m, r)
    elif op == "open":
        out = _dilate(_erode(m, r), r)
    elif op == "close":
        h, w = m.shape
        big = np.zeros((h + 2 * r, w + 2 * r), np.uint8)
        big[r : r + h, r : r + w] = m
        out = _erode(_dilate(big, r), r)[r : r + h, r : r + w]
    else:
        raise InvalidArgument(f"unknown morphology op {op!r}")
    return out.astype(bool)


# --------------------------------------------------------------------------
# connected components
# --------------------------------------------------------------------------


@loop_kernel
def _label8(m):
    h, w = m.shape
    labels = np.zeros((h, w), np.int32)
    queue = np.empty(h * w, np.int64)
    n = 0
    for i0 in range(h):
        for j0 in range(w):
            if m[i0, j0] == 0 or labels[i0, j0] != 0:
                continue
            n += 1
            labels[i0, j0] = n
            head = 0
            tail = 1
            queue[0] = i0 * w + j0
            while head < tail:
                q = queue[head]
                head += 1
                i = q // w
                j = q - i * w
                for di in range(-1, 2):
                    ii = i + di
                    if ii < 0 or ii >= h:
                        continue
                    for dj in range(-1, 2):
                        jj = j + dj
                        if jj < 0 or jj >= w:
                            continue
                        if m[ii, jj] != 0 and labels[ii, jj] == 0:
                            labels[ii, jj] = n
                            queue[tail] = ii * w + jj
                            tail += 1
    return labels, n


def label_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labelling; labels numbered 1..n in raster discovery order."""
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    labels, n = _label8(m)
    return labels, int(n)


def connected_components(mask) -> list[np.ndarray]:
    """8-connected components as ``(k, 2)`` arrays of ``(row, col)`` pixels."""
    labels, n = label_components(mask)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    w = labels.shape[1]
    comps = []
    for lab in range(1, n + 1):
        idx = order[bounds[lab - 1] : bounds[lab]]
        comps.append(np.stack([idx // w, idx % w], axis=1))
    return comps


# --------------------------------------------------------------------------
# border following
# --------------------------------------------------------------------------


@dataclass
class Contour:
    """A border traced by :func:`trace_contours`.

    ``pixels`` is an ``(n, 2)`` array of ``(row, col)`` positions in tracing
    order; consecutive entries are 8-adjacent and the last connects back to
    the first. ``parent`` indexes the enclosing contour in the returned list
    (``-1`` at top level).
    """

    pixels: np.ndarray
    kind: str
    parent: int = -1

    def __len__(self) -> int:
        return self.pixels.shape[0]


@loop_kernel
def _suzuki(m):
    h, w = m.shape
    f = np.zeros((h + 2, w + 2), np.int64)
    for i in range(h):
        for j in range(w):
            if m[i, j] != 0:
                f[i + 1, j + 1] = 1
    # neighbour offsets, clockwise on screen starting east
    di = np.array([0, 1, 1, 1, 0, -1, -1, -1])
    dj = np.array([1, 1, 0, -1, -1, -1, 0, 1])

    cap = 4 * (h + w) + 64
    rows = np.empty(cap, np.int64)
    cols = np.empty(cap, np.int64)
    npix = 0
    max_borders = h * w + 2
    starts = np.zeros(max_borders, np.int64)
    is_hole = np.zeros(max_borders, np.int64)
    parent = np.full(max_borders, -1, np.int64)
    is_hole[1] = 1  # the frame acts as a hole border
    nbd = 1

    for i in range(1, h + 1):
        lnbd = 1
        for j in range(1, w + 1):
            fij = f[i, j]
            if fij == 0:
                continue
            start_dir = -1
            hole = 0
            if fij == 1 and f[i, j - 1] == 0:
                start_dir = 4  # west neighbour
            elif fij >= 1 and f[i, j + 1] == 0:
                start_dir = 0  # east neighbour
                hole = 1
                if fij > 1:
                    lnbd = fij
            if start_dir >= 0:
                nbd += 1
                is_hole[nbd] = hole
                if hole == is_hole[lnbd]:
                    parent[nbd] = parent[lnbd]
                else:
                    parent[nbd] = lnbd
                starts[nbd] = npix

                # 3.1: clockwise search around (i, j) from the start neighbour
                found = -1
                for s in range(8):
                    d = (start_dir + s) % 8
                    if f[i + di[d], j + dj[d]] != 0:
                        found = d
                        break
                if found < 0:
                    f[i, j] = -nbd
                    if npix == cap:
                        cap *= 2
                        r2 = np.empty(cap, np.int64)
                        c2 = np.empty(cap, np.int64)
                        r2[:npix] = rows[:npix]
                        c2[:npix] = cols[:npix]
                        rows = r2
                        cols = c2
                    rows[npix] = i - 1
                    cols[npix] = j - 1
                    npix += 1
                else:
                    i1 = i + di[found]
                    j1 = j + dj[found]
                    i2 = i1
                    j2 = j1
                    i3 = i
                    j3 = j
                    while True:
                        if npix == cap:
                            cap *= 2
                            r2 = np.empty(cap, np.int64)
                            c2 = np.empty(cap, np.int64)
                            r2[:npix] = rows[:npix]
                            c2[:npix] = cols[:npix]
                            rows = r2
                            cols = c2
                        rows[npix] = i3 - 1
                        cols[npix] = j3 - 1
                        npix += 1
                        # 3.3: counter-clockwise search around (i3, j3)
                        d2 = 0
                        for d in range(8):
                            if i3 + di[d] == i2 and j3 + dj[d] == j2:
                                d2 = d
                                break
                        east_zero = False
                        i4 = i3
                        j4 = j3
                        for s in range(1, 9):
                            d = (d2 - s) % 8
                            ni = i3 + di[d]
                            nj = j3 + dj[d]
                            if f[ni, nj] != 0:
                                i4 = ni
                                j4 = nj
                                break
                            if d == 0:
                                east_zero = True
                        # 3.4
                        if east_zero:
                            f[i3, j3] = -nbd
                        elif f[i3, j3] == 1:
                            f[i3, j3] = nbd
                        # 3.5
                        if i4 == i and j4 == j and i3 == i1 and j3 == j1:
                            break
                        i2 = i3
                        j2 = j3
                        i3 = i4
                        j3 = j4
            # 4
            if f[i, j] != 1:
                lnbd = abs(f[i, j])

    count = nbd - 1
    out_starts = np.empty(count + 1, np.int64)
    for b in range(count):
        out_starts[b] = starts[b + 2]
    out_starts[count] = npix
    out_hole = np.empty(count, np.int64)
    out_parent = np.empty(count, np.int64)
    for b in range(count):
        out_hole[b] = is_hole[b + 2]
        p = parent[b + 2]
        out_parent[b] = p - 2 if p >= 2 else -1
    return rows[:npix].copy(), cols[:npix].copy(), out_starts, out_hole, out_parent


def trace_contours(mask) -> list[Contour]:
    """Suzuki-Abe border following.

    Returns outer borders and hole borders in raster discovery order with
    their nesting. Each 8-connected component yields exactly one outer
    contour.
    """
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.ndim != 2:
        raise InvalidArgument("mask must be 2-D")
    rows, cols, starts, hole, parent = _suzuki(m)
    out = []
    for b in range(hole.shape[0]):
        pix = np.stack([rows[starts[b] : starts[b + 1]], cols[starts[b] : starts[b + 1]]], axis=1)
        out.append(Contour(pix, HOLE if hole[b] else OUTER, int(parent[b])))
    return out


# --------------------------------------------------------------------------
# polygon rasterisation
# --------------------------------------------------------------------------


def _raster_convex_np(poly, width, height, eps):
    out = np.zeros((height, width), np.uint8)
    x0 = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(poly[:, 0].max() + 0.5)), width)
    y0 = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(poly[:, 1].max() + 0.5)), height)
    if x0 >= x1 or y0 >= y1:
        return out
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.ones(px.shape, bool)
    n = poly.shape[0]
    for e in range(n):
        ax, ay = poly[e]
        bx, by = poly[(e + 1) % n]
        ex, ey = bx - ax, by - ay
        elen = np.hypot(ex, ey)
        if elen == 0.0:
            continue
        inside &= (ex * (py - ay) - ey * (px - ax)) / elen >= -eps
    out[y0:y1, x0:x1] = inside
    return out


@kernel(_raster_convex_np)
def _raster_convex(poly, width, height, eps):
    out = np.zeros((height, width), np.uint8)
    n = poly.shape[0]
    xmin = poly[0, 0]
    xmax = poly[0, 0]
    ymin = poly[0, 1]
    ymax = poly[0, 1]
    for v in range(1, n):
        xmin = min(xmin, poly[v, 0])
        xmax = max(xmax, poly[v, 0])
        ymin = min(ymin, poly[v, 1])
        ymax = max(ymax, poly[v, 1])
    x0 = max(int(np.floor(xmin - 0.5)), 0)
    x1 = min(int(np.ceil(xmax + 0.5)), width)
    y0 = max(int(np.floor(ymin - 0.5)), 0)
    y1 = min(int(np.ceil(ymax + 0.5)), height)
    for i in range(y0, y1):
        py = i + 0.5
        for j in range(x0, x1):
            px = j + 0.5
            ok = True
            for e in range(n):
                ax = poly[e, 0]
                ay = poly[e, 1]
                ex = poly[(e + 1) % n, 0] - ax
                ey = poly[(e + 1) % n, 1] - ay
                elen = np.sqrt(ex * ex + ey * ey)
                if elen == 0.0:
                    continue
                if (ex * (py - ay) - ey * (px - ax)) / elen < -eps:
                    ok = False
                    break
            if ok:
                out[i, j] = 1
    return out


def _is_convex(poly: np.ndarray) -> bool:
    d = np.roll(poly, -1, axis=0) - poly
    cross = d[:, 0] * np.roll(d[:, 1], -1) - d[:, 1] * np.roll(d[:, 0], -1)
    return bool(np.all(cross >= -1e-12) or np.all(cross <= 1e-12))


def _raster_general(poly, width, height, eps):
    # even-odd rule on pixel centres, plus centres within eps of an edge
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    inside = np.zeros((height, width), bool)
    near = np.zeros((height, width), bool)
    n = poly.shape[0]
    for e in range(n):
        ax, ay = poly[e]
        bx, by = poly[(e + 1) % n]
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
        ex, ey = bx - ax, by - ay
        l2 = ex * ex + ey * ey
        if l2 == 0.0:
            continue
        t = np.clip(((px - ax) * ex + (py - ay) * ey) / l2, 0.0, 1.0)
        near |= np.hypot(px - (ax + t * ex), py - (ay + t * ey)) <= eps
    return (inside | near).astype(np.uint8)


def rasterize_polygon(poly, width: int, height: int, eps: float = 1e-9) -> np.ndarray:
    """Mask of pixels whose centre ``(col + 0.5, row + 0.5)`` lies in ``poly``."""
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] < 3:
        return np.zeros((height, width), bool)
    area2 = np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(p[:, 1], np.roll(p[:, 0], -1))
    if area2 < 0:
        p = p[::-1].copy()
    if _is_convex(p):
        return _raster_convex(np.ascontiguousarray(p), int(width), int(height), float(eps)).astype(bool)
    return _raster_general(p, int(width), int(height), eps).astype(bool)


# --------------------------------------------------------------------------
# label-map cleaning
# --------------------------------------------------------------------------


def denoise_labelmap(labels, kernel: int = 3, confidence=None, min_region: int = 2) -> np.ndarray:
    """Per-class opening then closing, conflict resolution, small-region removal.

    Pixels claimed by several classes after closing go to the class with the
    highest confidence inside the kernel window around the pixel (ties: lower
    class id). Without a confidence map, the lower class id wins. Finally
    8-connected same-class regions smaller than ``min_region`` pixels are
    cleared.
    """
    lm = np.asarray(labels)
    if lm.ndim != 2:
        raise InvalidArgument("label map must be 2-D")
    classes = [int(c) for c in np.unique(lm) if c != 0]
    out = np.zeros(lm.shape, dtype=lm.dtype)
    if not classes:
        return out
    r = kernel // 2
    opened = np.zeros((len(classes),) + lm.shape, bool)
    claims = np.zeros((len(classes),) + lm.shape, bool)
    for idx, c in enumerate(classes):
        opened[idx] = morphology(lm == c, "open", kernel)
        claims[idx] = morphology(opened[idx], "close", kernel)
    count = claims.sum(axis=0)
    first = np.argmax(claims, axis=0)
    cls_arr = np.array(classes, dtype=lm.dtype)
    single = count >= 1
    out[single] = cls_arr[first[single]]
    if confidence is not None and np.any(count > 1):
        conf = np.asarray(confidence, dtype=np.float64)
        h, w = lm.shape
        for i, j in zip(*np.nonzero(count > 1)):
            win = (slice(max(i - r, 0), min(i + r + 1, h)), slice(max(j - r, 0), min(j + r + 1, w)))
            best, best_score = -1, -np.inf
            for idx in np.nonzero(claims[:, i, j])[0]:
                sel = opened[idx][win]
                score = conf[win][sel].max() if sel.any() else -np.inf
                if score > best_score:
                    best, best_score = idx, score
            out[i, j] = cls_arr[best]
    if min_region > 1:
        for c in classes:
            labs, n = label_components(out == c)
            if n == 0:
                continue
            sizes = np.bincount(labs.ravel(), minlength=n + 1)
            small = sizes < min_region
            small[0] = False
            out[small[labs]] = 0
    return out
