"""File formats, synthetic scenes and the object-rotation warp.

Text formats:

* manifest: ``key = value`` lines (``classes`` comma-separated, ``tile``,
  ``overlap``); ``#`` starts a comment.
* annotations: ``x1 y1 x2 y2 x3 y3 x4 y4 class difficult`` per line;
  ``imagesource:`` and ``gsd:`` header lines are skipped.
* detections: ``x1 y1 ... y4 class score scale`` per line.

Rasters are binary PPM (P6, RGB) and PGM (P5, one byte per pixel). A
``# obbseg key=value ...`` comment in the header carries metadata.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .boxdet import Detection
from .errors import FormatError, InvalidConfig, ParseError, PlacementError, UnknownClass
from .geometry import (
    OrientedBox,
    corners_to_obb,
    obb_to_corners,
    rotate_box,
    rotated_iou,
)
from .raster import rasterize_polygon
from .targets import Annotation

SKIP_PREFIXES = ("imagesource:", "gsd:")


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclass
class Manifest:
    classes: list
    tile: int = 512
    overlap: int = 10
    extra: dict = field(default_factory=dict)

    def class_id(self, name: str, line: int | None = None) -> int:
        try:
            return self.classes.index(name) + 1
        except ValueError:
            raise UnknownClass(f"unknown class {name!r}", line) from None

    def class_name(self, cid: int) -> str:
        if not 1 <= cid <= len(self.classes):
            raise UnknownClass(f"class id {cid} out of range")
        return self.classes[cid - 1]


def parse_manifest(text: str) -> Manifest:
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {raw.strip()!r}", n)
        k, v = (p.strip() for p in line.split("=", 1))
        kv[k] = v
    if "classes" not in kv:
        raise ParseError("manifest lacks a classes entry")
    classes = [c.strip() for c in kv.pop("classes").split(",") if c.strip()]
    if not classes or len(set(classes)) != len(classes):
        raise ParseError("class list must be non-empty and unique")
    try:
        tile = int(kv.pop("tile", 512))
        overlap = int(kv.pop("overlap", 10))
    except ValueError as exc:
        raise ParseError(f"bad tile/overlap value: {exc}") from None
    return Manifest(classes, tile, overlap, kv)


def format_manifest(m: Manifest) -> str:
    lines = [f"classes = {','.join(m.classes)}", f"tile = {m.tile}", f"overlap = {m.overlap}"]
    lines += [f"{k} = {v}" for k, v in sorted(m.extra.items())]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# annotations and detections
# --------------------------------------------------------------------------


def _floats(tokens, n: int, line: int) -> np.ndarray:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected {n} numbers", line) from None
    arr = np.array(vals)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", line)
    return arr


def _corners_from(tokens, line: int) -> OrientedBox:
    c = _floats(tokens, 8, line).reshape(4, 2)
    try:
        return corners_to_obb(c)
    except ValueError as exc:
        raise ParseError(f"degenerate box: {exc}", line) from None


def parse_annotations(text: str, classes) -> list[Annotation]:
    """Parse corner-list annotation lines into :class:`Annotation` objects.

    Args:
        text: file contents.
        classes: class names; class ``classes[i]`` gets id ``i + 1``.
    """
    classes = list(classes)
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(SKIP_PREFIXES):
            continue
        tok = line.split()
        if len(tok) != 10:
            raise ParseError(f"expected 8 coordinates, class and difficulty, got {len(tok)} fields", n)
        box = _corners_from(tok[:8], n)
        if tok[8] not in classes:
            raise UnknownClass(f"unknown class {tok[8]!r}", n)
        try:
            diff = int(tok[9])
        except ValueError:
            raise ParseError(f"bad difficulty {tok[9]!r}", n) from None
        out.append(Annotation(box, classes.index(tok[8]) + 1, diff))
    return out


def _fmt_corners(box: OrientedBox) -> str:
    return " ".join(f"{v:.6f}" for v in obb_to_corners(box).ravel())


def format_annotations(anns, classes) -> str:
    classes = list(classes)
    return "".join(f"{_fmt_corners(a.box)} {classes[a.class_id - 1]} {a.difficult}\n" for a in anns)


def write_detections(dets, classes) -> str:
    classes = list(classes)
    return "".join(
        f"{_fmt_corners(d.box)} {classes[d.class_id - 1]} {d.score:.6f} {d.scale_index}\n" for d in dets
    )


def read_detections(text: str, classes) -> list[Detection]:
    classes = list(classes)
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 11:
            raise ParseError(f"expected 11 fields, got {len(tok)}", n)
        box = _corners_from(tok[:8], n)
        if tok[8] not in classes:
            raise UnknownClass(f"unknown class {tok[8]!r}", n)
        try:
            score = float(tok[9])
            scale = int(tok[10])
        except ValueError:
            raise ParseError("bad score or scale", n) from None
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"score {score} outside [0, 1]", n)
        if not 1 <= scale <= 5:
            raise ParseError(f"scale index {scale} outside 1..5", n)
        out.append(Detection(box, classes.index(tok[8]) + 1, score, scale))
    return out


# --------------------------------------------------------------------------
# PPM / PGM
# --------------------------------------------------------------------------


def _meta_comment(meta: dict | None) -> bytes:
    if not meta:
        return b""
    body = " ".join(f"{k}={v}" for k, v in meta.items())
    if "\n" in body:
        raise FormatError("metadata must not contain newlines")
    return f"# obbseg {body}\n".encode("ascii")


def _write_pnm(magic: bytes, arr: np.ndarray, meta) -> bytes:
    h, w = arr.shape[:2]
    return magic + b"\n" + _meta_comment(meta) + f"{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _read_pnm(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    tokens = []
    meta = {}
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("truncated header comment")
            comment = data[pos + 1 : end].decode("ascii", "replace").split()
            if comment and comment[0] == "obbseg":
                for item in comment[1:]:
                    if "=" in item:
                        k, v = item.split("=", 1)
                        meta[k] = v
            pos = end + 1
            continue
        m = re.match(rb"\d+", data[pos:])
        if not m:
            raise FormatError("non-numeric header field")
        tokens.append(int(m.group()))
        pos += len(m.group())
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("truncated header")
    pos += 1
    w, h, maxval = tokens
    if w <= 0 or h <= 0:
        raise FormatError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    return w, h, pos, meta


def encode_ppm(img, meta: dict | None = None) -> bytes:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) image, got {a.shape}")
    if a.dtype != np.uint8:
        raise FormatError("PPM image must be uint8")
    return _write_pnm(b"P6", np.ascontiguousarray(a), meta)


def decode_ppm(data: bytes):
    """Returns ``(image uint8 (H, W, 3), metadata dict)``."""
    w, h, pos, meta = _read_pnm(data, b"P6")
    n = w * h * 3
    if len(data) - pos != n:
        raise FormatError(f"expected {n} pixel bytes, found {len(data) - pos}")
    return np.frombuffer(data, np.uint8, n, pos).reshape(h, w, 3).copy(), meta


def encode_pgm(mask, meta: dict | None = None) -> bytes:
    a = np.asarray(mask)
    if a.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 255):
        raise FormatError("PGM values must lie in 0..255")
    return _write_pnm(b"P5", np.ascontiguousarray(a, dtype=np.uint8), meta)


def decode_pgm(data: bytes):
    """Returns ``(array uint8 (H, W), metadata dict)``."""
    w, h, pos, meta = _read_pnm(data, b"P5")
    n = w * h
    if len(data) - pos != n:
        raise FormatError(f"expected {n} pixel bytes, found {len(data) - pos}")
    return np.frombuffer(data, np.uint8, n, pos).reshape(h, w).copy(), meta


def _write_bytes(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def write_ppm(path, img, meta=None) -> None:
    _write_bytes(path, encode_ppm(img, meta))


def read_ppm(path):
    return decode_ppm(_read_bytes(path))


def write_pgm(path, mask, meta=None) -> None:
    _write_bytes(path, encode_pgm(mask, meta))


def read_pgm(path):
    return decode_pgm(_read_bytes(path))


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

SHAPES = ("rectangle", "ellipse", "triangle")
PALETTE = np.array(
    [[230, 40, 40], [40, 200, 40], [50, 80, 240], [230, 210, 40], [210, 50, 210], [40, 210, 210]], np.float64
)
TRIANGLE_MIN_ASPECT = 2.5


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 6.0
    max_size: float = 40.0
    angle_mode: str = "uniform"
    max_iou: float = 0.0
    min_gap: float = 2.0
    noise: float = 12.0
    contrast: float = 1.0
    max_tries: int = 200
    max_restarts: int = 20

    def validate(self) -> None:
        if self.num_classes < 1:
            raise InvalidConfig("num_classes must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise InvalidConfig("need 0 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size <= self.image_size:
            raise InvalidConfig("size range must lie within the image")
        if self.angle_mode not in ("uniform", "axis"):
            raise InvalidConfig(f"unknown angle mode {self.angle_mode!r}")
        if not 0.0 <= self.max_iou <= 1.0:
            raise InvalidConfig("max_iou must lie in [0, 1]")
        if self.min_gap < 0 or self.noise < 0 or self.contrast < 0:
            raise InvalidConfig("min_gap, noise and contrast must be >= 0")


@dataclass
class Scene:
    image: np.ndarray
    annotations: list
    seed: int


def shape_of(class_id: int) -> str:
    return SHAPES[(class_id - 1) % len(SHAPES)]


def class_color(class_id: int, contrast: float = 1.0) -> np.ndarray:
    base = PALETTE[(class_id - 1) % len(PALETTE)]
    return 128.0 + contrast * (base - 128.0)


def _local_coords(box: OrientedBox, size_h: int, size_w: int):
    ys, xs = np.mgrid[0:size_h, 0:size_w]
    dx = xs + 0.5 - box.cx
    dy = ys + 0.5 - box.cy
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    return c * dx + s * dy, -s * dx + c * dy


def shape_mask(box: OrientedBox, shape: str, height: int, width: int) -> np.ndarray:
    """Pixels whose centres lie inside the shape inscribed in ``box``."""
    u, v = _local_coords(box, height, width)
    a, b = box.w / 2.0, box.h / 2.0
    if shape == "rectangle":
        return rasterize_polygon(obb_to_corners(box), width, height)
    if shape == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape == "triangle":
        # base on the +v long side, apex at the middle of the -v side
        inside = v <= b
        inside &= (2 * b) * u + a * (v + b) >= -1e-9
        inside &= -(2 * b) * u + a * (v + b) >= -1e-9
        return inside
    raise InvalidConfig(f"unknown shape {shape!r}")


def _draw_box(rng, cfg: SynthConfig, class_id: int):
    lo, hi = cfg.min_size, cfg.max_size
    if shape_of(class_id) == "triangle":
        hmax = hi / TRIANGLE_MIN_ASPECT
        if hmax < lo:
            raise InvalidConfig("size range too narrow for triangles")
        h = rng.uniform(lo, hmax)
        w = rng.uniform(h * TRIANGLE_MIN_ASPECT, hi)
    else:
        w = rng.uniform(lo, hi)
        h = rng.uniform(lo, w)
    if cfg.angle_mode == "axis":
        alpha = rng.integers(0, 2) * (math.pi / 2)
    else:
        alpha = rng.uniform(0.0, 2 * math.pi)
    c, s = abs(math.cos(alpha)), abs(math.sin(alpha))
    ex = 0.5 * (w * c + h * s)
    ey = 0.5 * (w * s + h * c)
    size = cfg.image_size
    if 2 * ex > size or 2 * ey > size:
        return None
    cx = rng.uniform(ex, size - ex)
    cy = rng.uniform(ey, size - ey)
    return OrientedBox(cx, cy, w, h, alpha)


def _inflate(box: OrientedBox, d: float) -> OrientedBox:
    return OrientedBox(box.cx, box.cy, box.w + d, box.h + d, box.alpha)


def _place(rng, cfg: SynthConfig, classes):
    anns = []
    for cid in classes:
        for _attempt in range(cfg.max_tries):
            box = _draw_box(rng, cfg, cid)
            if box is None:
                continue
            ok = all(rotated_iou(box, a.box) <= cfg.max_iou for a in anns)
            if ok and cfg.min_gap > 0:
                big = _inflate(box, cfg.min_gap)
                ok = all(rotated_iou(big, _inflate(a.box, cfg.min_gap)) <= cfg.max_iou for a in anns)
            if ok:
                anns.append(Annotation(box, cid, 0))
                break
        else:
            return None
    return anns


def synth_scene(cfg: SynthConfig, seed: int) -> Scene:
    """Render coloured shapes over noise; annotations are the generating boxes.

    Class ``k`` draws shape ``SHAPES[(k-1) % 3]`` in its own colour. Boxes
    keep pairwise rotated IoU at most ``max_iou``; with ``min_gap > 0`` the
    boxes grown by ``min_gap`` must satisfy the same bound. A placement that
    gets stuck is restarted from scratch up to ``max_restarts`` times.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    img = rng.normal(128.0, cfg.noise, size=(size, size, 3)) if cfg.noise > 0 else np.full((size, size, 3), 128.0)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = [int(c) for c in rng.integers(1, cfg.num_classes + 1, size=n_obj)]
    anns = None
    for _restart in range(cfg.max_restarts):
        anns = _place(rng, cfg, classes)
        if anns is not None:
            break
    if anns is None:
        raise PlacementError(
            f"could not place {n_obj} objects within {cfg.max_restarts} x {cfg.max_tries} tries (seed {seed})"
        )
    for a in anns:
        m = shape_mask(a.box, shape_of(a.class_id), size, size)
        img[m] = class_color(a.class_id, cfg.contrast)
    return Scene(np.clip(np.rint(img), 0, 255).astype(np.uint8), anns, seed)


# --------------------------------------------------------------------------
# object-rotation warp
# --------------------------------------------------------------------------


def background_fill(image, anns) -> np.ndarray:
    """Median colour of the pixels outside every annotation box."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    inside = np.zeros((h, w), bool)
    for a in anns:
        inside |= rasterize_polygon(obb_to_corners(a.box), w, h)
    pix = img[~inside] if (~inside).any() else img.reshape(-1, img.shape[-1])
    return np.median(pix, axis=0).astype(img.dtype)


def rotate_objects(image, anns, angle_deg: float):
    """Rotate every annotated object about its own centre.

    Original box areas are filled with the background colour, then the
    pixels of each rotated box are sampled (nearest neighbour) from the
    unmodified image. Returns the warped image and the rotated annotations.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    out = img.copy()
    fill = background_fill(img, anns)
    for a in anns:
        out[rasterize_polygon(obb_to_corners(a.box), w, h)] = fill
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    rotated = []
    for a in anns:
        rb = rotate_box(a.box, theta)
        rotated.append(Annotation(rb, a.class_id, a.difficult))
        m = rasterize_polygon(obb_to_corners(rb), w, h)
        rows, cols = np.nonzero(m)
        if rows.size == 0:
            continue
        qx = cols + 0.5 - a.box.cx
        qy = rows + 0.5 - a.box.cy
        px = c * qx + s * qy + a.box.cx
        py = -s * qx + c * qy + a.box.cy
        sc = np.clip(np.floor(px).astype(np.int64), 0, w - 1)
        sr = np.clip(np.floor(py).astype(np.int64), 0, h - 1)
        out[rows, cols] = img[sr, sc]
    return out, rotated
