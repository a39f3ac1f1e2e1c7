"""Ground-truth encoding: per-scale cell labels, rotation pairs, tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidAnnotation, InvalidArgument
from .geometry import OrientedBox, convex_clip, obb_to_corners, polygon_area, rotate_box
from .raster import rasterize_polygon

NUM_SCALES = 5
DEFAULT_ANGLES = tuple(range(30, 331, 30))
BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class Annotation:
    box: OrientedBox
    class_id: int
    difficult: int = 0


@dataclass(frozen=True)
class ScaleSpec:
    """Prediction grid of one pyramid level. Index 1 is the finest (cell 2 px)."""

    index: int
    cell_size: int
    grid_w: int
    grid_h: int

    @property
    def width(self) -> int:
        return self.grid_w * self.cell_size

    @property
    def height(self) -> int:
        return self.grid_h * self.cell_size


def make_scales(width: int, height: int, num_scales: int = NUM_SCALES) -> list[ScaleSpec]:
    """Scales with cell sizes 2, 4, ..., 2**num_scales for an image of the given size."""
    top = 2**num_scales
    if width % top or height % top:
        raise InvalidArgument(f"image size {width}x{height} not divisible by {top}")
    return [ScaleSpec(s, 2**s, width >> s, height >> s) for s in range(1, num_scales + 1)]


def on_off(ann: Annotation, scale: ScaleSpec) -> bool:
    """An object is *on* at a scale when it does not fit inside one cell."""
    return max(ann.box.w, ann.box.h) >= scale.cell_size


@dataclass
class MultiScaleTarget:
    """Per-scale cell class grids (index ``s - 1`` for scale ``s``).

    ``on`` is a ``(n_annotations, n_scales)`` boolean table after the
    fallback rule has been applied.
    """

    scales: list[ScaleSpec]
    classes: list[np.ndarray]
    on: np.ndarray

    @property
    def objectness(self) -> list[np.ndarray]:
        return [(c > 0).astype(np.uint8) for c in self.classes]


def _check_bounds(ann: Annotation, width: int, height: int) -> None:
    c = obb_to_corners(ann.box)
    if (
        c[:, 0].min() < -BOUNDS_TOL
        or c[:, 1].min() < -BOUNDS_TOL
        or c[:, 0].max() > width + BOUNDS_TOL
        or c[:, 1].max() > height + BOUNDS_TOL
    ):
        raise InvalidAnnotation(f"annotation {ann.box} outside {width}x{height} image")


def cell_mask(box: OrientedBox, scale: ScaleSpec) -> np.ndarray:
    """Cells of ``scale`` whose centre lies inside ``box``."""
    poly = obb_to_corners(box) / scale.cell_size
    return rasterize_polygon(poly, scale.grid_w, scale.grid_h)


def encode_targets(anns, scales) -> MultiScaleTarget:
    """Rasterise annotations onto every scale's cell grid.

    Only objects that are *on* at a scale label cells there. Where objects
    overlap, the smaller one wins (lower class id on equal area). An object
    that would end up with no labelled cell anywhere is written into the
    finest-scale cell containing its centre.
    """
    scales = list(scales)
    if not scales:
        raise InvalidArgument("no scales given")
    width, height = scales[0].width, scales[0].height
    for a in anns:
        _check_bounds(a, width, height)
    grids = [np.zeros((s.grid_h, s.grid_w), np.int32) for s in scales]
    on = np.array([[on_off(a, s) for s in scales] for a in anns], dtype=bool).reshape(len(anns), len(scales))
    masks = {}
    for k, a in enumerate(anns):
        for si, s in enumerate(scales):
            if on[k, si]:
                masks[k, si] = cell_mask(a.box, s)
    finest = int(np.argmin([s.cell_size for s in scales]))
    forced = {}
    for k, a in enumerate(anns):
        if not any(masks[k, si].any() for si in range(len(scales)) if on[k, si]):
            s = scales[finest]
            m = np.zeros((s.grid_h, s.grid_w), bool)
            col = min(int(a.box.cx // s.cell_size), s.grid_w - 1)
            row = min(int(a.box.cy // s.cell_size), s.grid_h - 1)
            m[row, col] = True
            forced[k] = m
            on[k, finest] = True
    order = sorted(range(len(anns)), key=lambda k: (-anns[k].box.area, -anns[k].class_id))
    for si in range(len(scales)):
        for k in order:
            m = forced.get(k) if si == finest and k in forced else masks.get((k, si))
            if m is not None:
                grids[si][m] = anns[k].class_id
    return MultiScaleTarget(scales, grids, on)


# --------------------------------------------------------------------------
# rotation pairs
# --------------------------------------------------------------------------


@dataclass
class ScaleCorrespondence:
    """Matched cells between an original and a rotated feature grid.

    Each pair ``p`` ties flat cell ``src[p]`` of the original grid to flat
    cell ``dst[p]`` of rotated copy ``angle_idx[p]``; ``group[p]`` numbers
    the (angle, object) pair it came from. ``n_groups`` counts every
    (angle, object) pair, including those that produced no cells, and is the
    normaliser of the rotation penalty.
    """

    src: np.ndarray
    dst: np.ndarray
    angle_idx: np.ndarray
    group: np.ndarray
    n_groups: int

    def __len__(self) -> int:
        return int(self.src.shape[0])

    def inverse(self) -> ScaleCorrespondence:
        """Swap original and rotated roles; only defined for a single angle."""
        if self.angle_idx.size and np.any(self.angle_idx != 0):
            raise InvalidArgument("inverse correspondence needs a single rotation angle")
        return ScaleCorrespondence(self.dst.copy(), self.src.copy(), self.angle_idx.copy(), self.group.copy(), self.n_groups)


def empty_correspondence() -> ScaleCorrespondence:
    z = np.zeros(0, np.int64)
    return ScaleCorrespondence(z, z.copy(), z.copy(), z.copy(), 0)


@dataclass
class RotationBatch:
    """Rotation angles for one image and the derived per-scale cell pairs.

    ``overlaps[a][k]`` is the intersection polygon of object ``k`` with its
    copy rotated by ``angles[a]`` degrees about its own centre.
    """

    angles: list[float]
    overlaps: list[list[np.ndarray]]
    correspondences: list[ScaleCorrespondence] = field(default_factory=list)

    @property
    def r(self) -> int:
        return len(self.angles)

    @property
    def n(self) -> int:
        return len(self.overlaps[0]) if self.overlaps else 0


def _pairs_for(box: OrientedBox, overlap: np.ndarray, angle_rad: float, scale: ScaleSpec):
    cs = scale.cell_size
    inside = rasterize_polygon(overlap / cs, scale.grid_w, scale.grid_h)
    rows, cols = np.nonzero(inside)
    if rows.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    qx = (cols + 0.5) * cs - box.cx
    qy = (rows + 0.5) * cs - box.cy
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    # inverse rotation back into the original object frame
    px = c * qx + s * qy + box.cx
    py = -s * qx + c * qy + box.cy
    pc = np.floor(px / cs).astype(np.int64)
    pr = np.floor(py / cs).astype(np.int64)
    ok = (pc >= 0) & (pc < scale.grid_w) & (pr >= 0) & (pr < scale.grid_h)
    src = pr[ok] * scale.grid_w + pc[ok]
    dst = rows[ok].astype(np.int64) * scale.grid_w + cols[ok]
    return src, dst


def build_rotation_batch(anns, r: int, seed, scales, angle_set=DEFAULT_ANGLES) -> RotationBatch:
    """Draw ``r`` distinct angles and pair up cells inside each object's overlap.

    Cells of the rotated grid whose centres fall inside the overlap polygon
    are rotated back about the object centre and matched to the original
    cell containing that point.
    """
    if r < 0:
        raise InvalidArgument("r must be >= 0")
    angle_set = tuple(angle_set)
    if r > len(angle_set):
        raise InvalidArgument(f"cannot draw {r} distinct angles from a set of {len(angle_set)}")
    rng = np.random.default_rng(seed)
    angles = [float(a) for a in rng.choice(np.asarray(angle_set, dtype=np.float64), size=r, replace=False)] if r else []
    overlaps = []
    for ang in angles:
        row = []
        for a in anns:
            rb = rotate_box(a.box, math.radians(ang))
            row.append(convex_clip(obb_to_corners(a.box), obb_to_corners(rb)))
        overlaps.append(row)
    corrs = []
    for scale in scales:
        src, dst, aidx, grp = [], [], [], []
        g = 0
        for ai, ang in enumerate(angles):
            for k, a in enumerate(anns):
                poly = overlaps[ai][k]
                g += 1
                if polygon_area(poly) <= 0.0:
                    continue
                s_, d_ = _pairs_for(a.box, poly, math.radians(ang), scale)
                if s_.size == 0:
                    continue
                src.append(s_)
                dst.append(d_)
                aidx.append(np.full(s_.size, ai, np.int64))
                grp.append(np.full(s_.size, g - 1, np.int64))
        if not src:
            corrs.append(empty_correspondence())
        else:
            corrs.append(ScaleCorrespondence(np.concatenate(src), np.concatenate(dst), np.concatenate(aidx), np.concatenate(grp), g))
    return RotationBatch(angles, overlaps, corrs)


# --------------------------------------------------------------------------
# tiling
# --------------------------------------------------------------------------


def _axis_offsets(extent: int, tile: int, overlap: int) -> list[int]:
    extent = max(extent, tile)
    stride = tile - overlap
    offs = []
    o = 0
    while o + tile < extent:
        offs.append(o)
        o += stride
    last = extent - tile
    if not offs or offs[-1] != last:
        offs.append(last)
    return offs


def tile_image(width: int, height: int, tile: int = 512, overlap: int = 10) -> list[tuple[int, int]]:
    """Top-left ``(x, y)`` offsets of overlapping tiles covering the image.

    Images smaller than a tile are zero-padded up to the tile size, so a
    single ``(0, 0)`` tile results.
    """
    if not (tile > overlap >= 0):
        raise InvalidArgument(f"need tile > overlap >= 0, got tile={tile}, overlap={overlap}")
    xs = _axis_offsets(width, tile, overlap)
    ys = _axis_offsets(height, tile, overlap)
    return [(x, y) for y in ys for x in xs]
