"""Planar geometry for oriented rectangles and convex polygons.

Points and polygons are plain ``float64`` arrays of shape ``(n, 2)`` holding
``(x, y)`` rows. Polygons are counter-clockwise in the mathematical sense
(positive shoelace area); with image coordinates (y pointing down) they
appear clockwise on screen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._jit import loop_kernel
from .errors import DegenerateGeometry

HALF_PI = 0.5 * math.pi
CLIP_EPS = 1e-9
COLLINEAR_EPS = 1e-9
SQUARE_RTOL = 1e-9


def canonical_angle(w: float, h: float, alpha: float) -> tuple[float, float, float]:
    """Return ``(w, h, alpha)`` with ``w >= h`` and ``alpha`` in ``[-pi/2, pi/2)``.

    A rectangle has a four-fold ambiguity (swap sides, add multiples of
    pi/2). Swapping sides so the first side is the long one and wrapping the
    angle by pi leaves a unique representation, except for squares, whose
    angle is further reduced to ``[-pi/4, pi/4)``.
    """
    if w < h:
        w, h = h, w
        alpha += HALF_PI
    if abs(w - h) <= SQUARE_RTOL * max(w, h):
        period, lo = HALF_PI, -0.25 * math.pi
    else:
        period, lo = math.pi, -HALF_PI
    a = (alpha - lo) % period + lo
    if a >= lo + period:
        a -= period
    return w, h, a


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center ``(cx, cy)``, sides ``w`` x ``h`` and rotation ``alpha``.

    ``w`` runs along the direction ``(cos alpha, sin alpha)``. The constructor
    canonicalises the representation (see :func:`canonical_angle`), so two
    boxes covering the same rectangle compare equal up to rounding.
    """

    cx: float
    cy: float
    w: float
    h: float
    alpha: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.alpha)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        w, h, a = canonical_angle(float(self.w), float(self.h), float(self.alpha))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "alpha", a)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def corners(self) -> np.ndarray:
        return obb_to_corners(self)

    def translated(self, dx: float, dy: float) -> OrientedBox:
        return OrientedBox(self.cx + dx, self.cy + dy, self.w, self.h, self.alpha)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.alpha)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Convex hull by Andrew's monotone chain.

    Returns the hull vertices counter-clockwise, starting at the
    lexicographically smallest point, with collinear vertices dropped.

    Raises:
        DegenerateGeometry: if the points do not span a positive area.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0 or not np.all(np.isfinite(pts)):
        raise DegenerateGeometry("need a non-empty set of finite points")
    pts = np.unique(pts, axis=0)  # lexicographic sort on (x, y)
    if pts.shape[0] < 3:
        raise DegenerateGeometry(f"only {pts.shape[0]} distinct points")
    span = float(np.max(np.ptp(pts, axis=0)))
    tol = COLLINEAR_EPS * span * span

    def half(seq):
        chain: list = []
        for p in seq:
            while len(chain) >= 2 and _cross(chain[-2], chain[-1], p) <= tol:
                chain.pop()
            chain.append(p)
        return chain

    rows = [tuple(p) for p in pts]
    lower = half(rows)
    upper = half(reversed(rows))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateGeometry("points are collinear")
    return np.array(hull, dtype=np.float64)


def polygon_area(poly) -> float:
    """Absolute shoelace area; 0 for empty or degenerate polygons."""
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def min_area_rect(points) -> OrientedBox:
    """Minimum-area enclosing rectangle by rotating calipers.

    One rectangle side is flush with a hull edge. Four calipers (the edge
    itself, the far side, and the two extreme points along the edge) only
    ever advance counter-clockwise, so the sweep over all hull edges is
    linear in the hull size.
    """
    hull = convex_hull(points)
    n = hull.shape[0]
    nxt = np.roll(hull, -1, axis=0)
    edges = nxt - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    units = edges / lengths[:, None]
    normals = np.stack([-units[:, 1], units[:, 0]], axis=1)  # inward for CCW

    u0, n0 = units[0], normals[0]
    j = int(np.argmax(hull @ u0))  # max along edge direction
    k = int(np.argmax(hull @ n0))  # farthest from edge
    l = int(np.argmin(hull @ u0))  # min along edge direction

    best = None
    best_area = math.inf
    for i in range(n):
        u, nv = units[i], normals[i]
        while hull[(j + 1) % n] @ u > hull[j] @ u:
            j = (j + 1) % n
        while hull[(k + 1) % n] @ nv > hull[k] @ nv:
            k = (k + 1) % n
        while hull[(l + 1) % n] @ u < hull[l] @ u:
            l = (l + 1) % n
        umax, umin = hull[j] @ u, hull[l] @ u
        nmin, nmax = hull[i] @ nv, hull[k] @ nv
        w, h = umax - umin, nmax - nmin
        area = w * h
        if area < best_area * (1.0 - 1e-12):
            best_area = area
            c = 0.5 * (umax + umin) * u + 0.5 * (nmax + nmin) * nv
            best = (c[0], c[1], w, h, math.atan2(u[1], u[0]))
    if best is None or best[2] <= 0 or best[3] <= 0:
        raise DegenerateGeometry("zero-area enclosing rectangle")
    return OrientedBox(*best)


_UNIT_CORNERS = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


def obb_to_corners(box: OrientedBox) -> np.ndarray:
    """Corners ``(4, 2)``, counter-clockwise, starting at local ``(-w/2, -h/2)``."""
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    local = _UNIT_CORNERS * (box.w, box.h)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (box.cx, box.cy)


def corners_to_obb(corners) -> OrientedBox:
    pts = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] != 4:
        raise ValueError(f"expected 4 corners, got {pts.shape[0]}")
    return min_area_rect(pts)


def rotate_points(points, angle: float, center) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    ctr = np.asarray(center, dtype=np.float64)
    d = p - ctr
    return np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1) + ctr


def rotate_box(box: OrientedBox, angle: float, center=None) -> OrientedBox:
    """Rigidly rotate ``box`` by ``angle`` radians about ``center`` (default: its own center)."""
    if center is None:
        cx, cy = box.cx, box.cy
    else:
        cx, cy = rotate_points(np.array([box.cx, box.cy]), angle, center)
    return OrientedBox(cx, cy, box.w, box.h, box.alpha + angle)


def convex_clip(subject, clip) -> np.ndarray:
    """Intersection of two convex polygons (Sutherland-Hodgman).

    Points within ``CLIP_EPS`` of a clip edge count as inside. Returns an
    empty ``(0, 2)`` array when the intersection has no area.
    """
    out = np.asarray(subject, dtype=np.float64).reshape(-1, 2)
    cp = np.asarray(clip, dtype=np.float64).reshape(-1, 2)
    if out.shape[0] < 3 or cp.shape[0] < 3:
        return np.empty((0, 2))
    if signed_area(out) < 0:
        out = out[::-1]
    if signed_area(cp) < 0:
        cp = cp[::-1]
    m = cp.shape[0]
    for e in range(m):
        a, b = cp[e], cp[(e + 1) % m]
        ex, ey = b - a
        elen = math.hypot(ex, ey)
        if elen == 0.0:
            continue
        dist = (ex * (out[:, 1] - a[1]) - ey * (out[:, 0] - a[0])) / elen
        keep: list = []
        k = out.shape[0]
        for i in range(k):
            p, q = out[i], out[(i + 1) % k]
            dp, dq = dist[i], dist[(i + 1) % k]
            pin, qin = dp >= -CLIP_EPS, dq >= -CLIP_EPS
            if pin:
                keep.append(p)
            if pin != qin:
                t = dp / (dp - dq)
                keep.append(p + t * (q - p))
        if len(keep) < 3:
            return np.empty((0, 2))
        out = np.array(keep)
    # drop repeated vertices produced by on-edge points
    d = np.hypot(*(out - np.roll(out, -1, axis=0)).T)
    out = out[d > 1e-12]
    if out.shape[0] < 3 or polygon_area(out) <= 0.0:
        return np.empty((0, 2))
    return out


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    inter = polygon_area(convex_clip(obb_to_corners(a), obb_to_corners(b)))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


@loop_kernel
def _quad_iou_matrix(ca, cb, out):
    """Pairwise IoU of convex quads ``ca (n,4,2)`` and ``cb (m,4,2)``, written into ``out``."""
    n = ca.shape[0]
    m = cb.shape[0]
    buf_a = np.empty((16, 2))
    buf_b = np.empty((16, 2))
    dist = np.empty(16)
    area_a = np.empty(n)
    area_b = np.empty(m)
    for i in range(n):
        s = 0.0
        for v in range(4):
            w = (v + 1) % 4
            s += ca[i, v, 0] * ca[i, w, 1] - ca[i, w, 0] * ca[i, v, 1]
        area_a[i] = 0.5 * abs(s)
    for j in range(m):
        s = 0.0
        for v in range(4):
            w = (v + 1) % 4
            s += cb[j, v, 0] * cb[j, w, 1] - cb[j, w, 0] * cb[j, v, 1]
        area_b[j] = 0.5 * abs(s)
    for i in range(n):
        for j in range(m):
            # bounding-circle rejection
            dx = (ca[i, 0, 0] + ca[i, 2, 0]) - (cb[j, 0, 0] + cb[j, 2, 0])
            dy = (ca[i, 0, 1] + ca[i, 2, 1]) - (cb[j, 0, 1] + cb[j, 2, 1])
            ra = math.hypot(ca[i, 2, 0] - ca[i, 0, 0], ca[i, 2, 1] - ca[i, 0, 1])
            rb = math.hypot(cb[j, 2, 0] - cb[j, 0, 0], cb[j, 2, 1] - cb[j, 0, 1])
            if math.hypot(dx, dy) > ra + rb:
                out[i, j] = 0.0
                continue
            k = 4
            for v in range(4):
                buf_a[v, 0] = ca[i, v, 0]
                buf_a[v, 1] = ca[i, v, 1]
            for e in range(4):
                ax = cb[j, e, 0]
                ay = cb[j, e, 1]
                ex = cb[j, (e + 1) % 4, 0] - ax
                ey = cb[j, (e + 1) % 4, 1] - ay
                elen = math.hypot(ex, ey)
                for v in range(k):
                    dist[v] = (ex * (buf_a[v, 1] - ay) - ey * (buf_a[v, 0] - ax)) / elen
                nk = 0
                for v in range(k):
                    w = (v + 1) % k
                    dp = dist[v]
                    dq = dist[w]
                    pin = dp >= -1e-9
                    qin = dq >= -1e-9
                    if pin:
                        buf_b[nk, 0] = buf_a[v, 0]
                        buf_b[nk, 1] = buf_a[v, 1]
                        nk += 1
                    if pin != qin:
                        t = dp / (dp - dq)
                        buf_b[nk, 0] = buf_a[v, 0] + t * (buf_a[w, 0] - buf_a[v, 0])
                        buf_b[nk, 1] = buf_a[v, 1] + t * (buf_a[w, 1] - buf_a[v, 1])
                        nk += 1
                k = nk
                for v in range(k):
                    buf_a[v, 0] = buf_b[v, 0]
                    buf_a[v, 1] = buf_b[v, 1]
                if k < 3:
                    break
            inter = 0.0
            if k >= 3:
                s = 0.0
                for v in range(k):
                    w = (v + 1) % k
                    s += buf_a[v, 0] * buf_a[w, 1] - buf_a[w, 0] * buf_a[v, 1]
                inter = 0.5 * abs(s)
            union = area_a[i] + area_b[j] - inter
            val = inter / union if union > 0.0 else 0.0
            out[i, j] = min(1.0, max(0.0, val))
    return out


def boxes_to_corners(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.empty((0, 4, 2))
    return np.stack([obb_to_corners(b) for b in boxes])


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise rotated IoU, shape ``(len(boxes_a), len(boxes_b))``."""
    ca = boxes_to_corners(boxes_a)
    cb = boxes_to_corners(boxes_b)
    out = np.zeros((ca.shape[0], cb.shape[0]))
    if out.size:
        _quad_iou_matrix(ca, cb, out)
    return out
