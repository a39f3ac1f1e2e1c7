"""Decode head logits into label/confidence maps and fit oriented boxes to regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .geometry import OrientedBox, min_area_rect, obb_to_corners
from .loss import softmax
from .raster import denoise_labelmap, label_components, trace_contours


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    class_id: int
    score: float
    scale_index: int

    @property
    def corners(self) -> np.ndarray:
        return obb_to_corners(self.box)

    def translated(self, dx: float, dy: float) -> Detection:
        return Detection(self.box.translated(dx, dy), self.class_id, self.score, self.scale_index)


def _scale_of(h: int, w: int, width: int, height: int) -> int:
    if h <= 0 or w <= 0 or width % w or height % h or width // w != height // h:
        raise InvalidArgument(f"head grid {h}x{w} inconsistent with image {width}x{height}")
    cell = width // w
    s = cell.bit_length() - 1
    if cell != 1 << s or s < 1:
        raise InvalidArgument(f"cell size {cell} is not a power of two >= 2")
    return s


def decode_heads(heads, width: int, height: int, channels_first: bool = False) -> dict:
    """Per-cell argmax labels and ``1 - p_background`` confidences, upscaled to the image.

    Args:
        heads: iterable of logits arrays ``(h, w, C+1)`` (or ``(C+1, h, w)``
            when ``channels_first``), or a mapping whose values are such
            arrays. The scale of each head follows from its grid size.
        width, height: image size in pixels.

    Returns:
        ``{scale_index: (labels int32 (H, W), confidence float64 (H, W))}``.
    """
    items = heads.values() if isinstance(heads, dict) else heads
    out = {}
    depth = None
    for z in items:
        z = np.asarray(z, dtype=np.float64)
        if channels_first:
            z = np.moveaxis(z, 0, -1)
        if z.ndim != 3 or z.shape[-1] < 2:
            raise InvalidArgument(f"head must be 3-D with >= 2 channels, got {z.shape}")
        if depth is None:
            depth = z.shape[-1]
        elif z.shape[-1] != depth:
            raise InvalidArgument("heads disagree on channel count")
        h, w = z.shape[:2]
        s = _scale_of(h, w, width, height)
        if s in out:
            raise InvalidArgument(f"two heads for scale {s}")
        p = softmax(z)
        labels = np.argmax(p, axis=-1).astype(np.int32)
        conf = 1.0 - p[..., 0]
        cell = 1 << s
        out[s] = (
            np.repeat(np.repeat(labels, cell, axis=0), cell, axis=1),
            np.repeat(np.repeat(conf, cell, axis=0), cell, axis=1),
        )
    return dict(sorted(out.items()))


def _pixel_corner_points(rows, cols) -> np.ndarray:
    x = cols.astype(np.float64)
    y = rows.astype(np.float64)
    return np.concatenate(
        [np.stack([x, y], 1), np.stack([x + 1, y], 1), np.stack([x + 1, y + 1], 1), np.stack([x, y + 1], 1)]
    )


def _shrink_corner_fit(box: OrientedBox) -> OrientedBox:
    # A rotated staircase region's corner hull overshoots each side by half a
    # pixel's extent along the edge normal; pixel centres stay inside.
    c, s = abs(np.cos(box.alpha)), abs(np.sin(box.alpha))
    if min(c, s) < 1e-9:
        return box
    ext = c + s
    w = max(box.w - ext, min(box.w, 1.0))
    h = max(box.h - ext, min(box.h, 1.0))
    return OrientedBox(box.cx, box.cy, w, h, box.alpha)


def determine_boxes(
    lm,
    cm,
    scale_index: int,
    kernel: int = 3,
    min_region: int = 2,
    denoise: bool = True,
    edge_correction: bool = True,
) -> list[Detection]:
    """One minimum-area oriented box per connected same-class region.

    The label map is cleaned with :func:`denoise_labelmap` (skipped when
    ``denoise`` is false, except for the ``min_region`` filter), then each
    class is treated as a binary mask. Outer contour pixels are expanded to
    their four pixel corners before the rotating-calipers fit. The score is
    the mean confidence over the region's pixels.

    With ``edge_correction`` a non-axis-aligned fit is shrunk by
    ``|cos a| + |sin a|`` per dimension, removing the bias of fitting pixel
    corners of a staircase boundary.
    """
    lm = np.asarray(lm)
    cm = np.asarray(cm, dtype=np.float64)
    if lm.shape != cm.shape or lm.ndim != 2:
        raise InvalidArgument(f"label map {lm.shape} and confidence map {cm.shape} differ")
    if denoise:
        den = denoise_labelmap(lm, kernel=kernel, confidence=cm, min_region=min_region)
    else:
        den = denoise_labelmap(lm, kernel=1, confidence=cm, min_region=min_region)
    dets = []
    for c in np.unique(den):
        if c == 0:
            continue
        mask = den == c
        labels, n = label_components(mask)
        if n == 0:
            continue
        for contour in trace_contours(mask):
            if contour.kind != "outer":
                continue
            rows, cols = contour.pixels[:, 0], contour.pixels[:, 1]
            comp = labels[rows[0], cols[0]]
            # fit in a region-local frame so the shape does not depend on
            # where the region sits in the image
            r0, c0 = int(rows.min()), int(cols.min())
            box = min_area_rect(_pixel_corner_points(rows - r0, cols - c0)).translated(c0, r0)
            if edge_correction:
                box = _shrink_corner_fit(box)
            vals = cm[labels == comp]
            lo, hi = vals.min(), vals.max()
            score = float(lo) if lo == hi else float(vals.mean())
            score = min(max(score, 0.0), 1.0)
            dets.append(Detection(box, int(c), score, int(scale_index)))
    return dets
