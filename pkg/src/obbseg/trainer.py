"""Training loop, learning-rate schedule and tiled detection."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxdet import decode_heads, determine_boxes
from .dataio import rotate_objects
from .errors import InvalidArgument, InvalidConfig
from .geometry import OrientedBox, obb_to_corners
from .loss import (
    ScaleLoss,
    class_loss,
    conf_loss,
    format_log_line,
    rotation_loss,
    total_loss,
)
from .micronet import Network, load_checkpoint, save_checkpoint, sgd_step
from .refine import NmsConfig, refine
from .targets import (
    DEFAULT_ANGLES,
    Annotation,
    ScaleCorrespondence,
    build_rotation_batch,
    encode_targets,
    make_scales,
    tile_image,
)

SEAM_MARGIN = 0.9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.1
    decay_interval: int = 2000
    rotations: int = 1
    angle_set: tuple = DEFAULT_ANGLES
    seed: int = 0
    flips: bool = True
    supervise_rotated: bool = False
    w_conf: float = 1.0
    w_class: float = 1.0
    w_rotation: float = 1.0
    checkpoint_every: int = 0
    max_iters: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.decay_interval < 1:
            raise InvalidConfig("epochs, batch_size and decay_interval must be >= 1")
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise InvalidConfig("invalid optimiser settings")
        if self.rotations < 0 or self.rotations > len(self.angle_set):
            raise InvalidConfig("rotations must lie in 0..len(angle_set)")
        if min(self.w_conf, self.w_class, self.w_rotation) < 0:
            raise InvalidConfig("loss weights must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_set"] = list(self.angle_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "angle_set" in d:
            d["angle_set"] = tuple(d["angle_set"])
        return cls(**d)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """``lr0 * decay ** floor(iteration / interval)``."""
    return cfg.lr0 * cfg.lr_decay ** (iteration // cfg.decay_interval)


def prepare_image(img) -> np.ndarray:
    """uint8 pixels to float32 in [-0.5, 0.5]."""
    return np.asarray(img, dtype=np.float32) / 255.0 - 0.5


def flip_sample(img, anns, horizontal: bool, vertical: bool):
    """Mirror an image and its boxes."""
    h, w = img.shape[:2]
    out = img
    new = list(anns)
    if horizontal:
        out = out[:, ::-1]
        new = [Annotation(OrientedBox(w - a.box.cx, a.box.cy, a.box.w, a.box.h, -a.box.alpha), a.class_id, a.difficult) for a in new]
    if vertical:
        out = out[::-1]
        new = [Annotation(OrientedBox(a.box.cx, h - a.box.cy, a.box.w, a.box.h, -a.box.alpha), a.class_id, a.difficult) for a in new]
    return np.ascontiguousarray(out), new


def _inside(a: Annotation, w: int, h: int) -> bool:
    c = obb_to_corners(a.box)
    return c[:, 0].min() >= -1e-6 and c[:, 1].min() >= -1e-6 and c[:, 0].max() <= w + 1e-6 and c[:, 1].max() <= h + 1e-6


@dataclass
class StepResult:
    breakdown: object
    lr: float


def _merge_corr(parts, hw: int, r: int) -> ScaleCorrespondence:
    src, dst, grp = [], [], []
    g_off = 0
    for n, c in parts:
        if len(c):
            src.append(c.src + n * hw)
            dst.append((n * r + c.angle_idx) * hw + c.dst)
            grp.append(c.group + g_off)
        g_off += c.n_groups
    if not src:
        z = np.zeros(0, np.int64)
        return ScaleCorrespondence(z, z.copy(), z.copy(), z.copy(), g_off)
    s = np.concatenate(src)
    return ScaleCorrespondence(s, np.concatenate(dst), np.zeros_like(s), np.concatenate(grp), g_off)


def train_step(net: Network, images, anns_list, cfg: TrainConfig, iteration: int, rot_seed=None) -> StepResult:
    """One SGD update on a batch.

    Args:
        images: list of uint8 ``(H, W, 3)`` arrays (already augmented).
        anns_list: annotations per image.
        iteration: global iteration, drives the LR schedule and the
            default rotation seed.
        rot_seed: overrides the rotation-angle seed (a fixed value replays
            the same rotated copies every step).
    """
    size = net.config.input_size
    scales = make_scales(size, size)
    n = len(images)
    r = cfg.rotations
    targets = [encode_targets(a, scales) for a in anns_list]
    batch = [prepare_image(im) for im in images]
    corr_parts = {s.index: [] for s in scales}
    rot_targets = []
    if r > 0:
        for i, (im, anns) in enumerate(zip(images, anns_list)):
            seed = [cfg.seed, 2, iteration, i] if rot_seed is None else [rot_seed, i]
            rb = build_rotation_batch(anns, r, seed, scales, cfg.angle_set)
            for si, s in enumerate(scales):
                corr_parts[s.index].append((i, rb.correspondences[si]))
            for ang in rb.angles:
                rim, ranns = rotate_objects(im, anns, ang)
                batch.append(prepare_image(rim))
                if cfg.supervise_rotated:
                    rot_targets.append(encode_targets([a for a in ranns if _inside(a, size, size)], scales))
    x = np.stack(batch)
    heads = net.forward(x)
    grads = []
    per_scale = {}
    for k, head in enumerate(heads):
        s = net.head_scales[k]
        si = s - 1
        g = np.zeros(head.shape, np.float64)
        orig = head[:n]
        obj = np.stack([t.classes[si] > 0 for t in targets])
        cls = np.stack([t.classes[si] for t in targets])
        lc, gc = conf_loss(orig, obj)
        lk, gk = class_loss(orig, cls)
        g[:n] += cfg.w_conf * gc + cfg.w_class * gk
        lr_term = 0.0
        if r > 0:
            rot = head[n:]
            hw = head.shape[1] * head.shape[2]
            corr = _merge_corr(corr_parts[s], hw, r)
            lr_term, go, grot = rotation_loss(orig, rot[None], corr)
            g[:n] += cfg.w_rotation * go
            g[n:] += cfg.w_rotation * grot[0]
            if cfg.supervise_rotated:
                robj = np.stack([t.classes[si] > 0 for t in rot_targets])
                rcls = np.stack([t.classes[si] for t in rot_targets])
                l2, g2 = conf_loss(rot, robj)
                l3, g3 = class_loss(rot, rcls)
                lc, lk = lc + l2, lk + l3
                g[n:] += cfg.w_conf * g2 + cfg.w_class * g3
        per_scale[s] = ScaleLoss(cfg.w_conf * lc, cfg.w_class * lk, cfg.w_rotation * lr_term)
        grads.append(g)
    net.zero_grad()
    net.backward(grads)
    lr = learning_rate(cfg, iteration)
    sgd_step(net, lr, cfg.momentum, cfg.weight_decay)
    return StepResult(total_loss(per_scale), lr)


@dataclass
class TrainResult:
    net: Network
    log: list = field(default_factory=list)
    iterations: int = 0
    seconds: float = 0.0


def _check_classes(net: Network, dataset) -> None:
    c = net.config.num_classes
    for scene in dataset:
        for a in scene.annotations:
            if not 1 <= a.class_id <= c:
                raise InvalidConfig(f"dataset class {a.class_id} outside the network's 1..{c}")


def train(dataset, net: Network, cfg: TrainConfig, checkpoint_path=None, resume_from=None, log_file=None, progress=None) -> TrainResult:
    """Minibatch SGD over ``dataset`` (objects with ``image`` and ``annotations``).

    Every random choice depends only on ``cfg.seed`` and the epoch or
    iteration number, so resuming from a checkpoint replays the remaining
    iterations exactly.
    """
    cfg.validate()
    if not dataset:
        raise InvalidArgument("empty dataset")
    size = net.config.input_size
    for scene in dataset:
        if scene.image.shape[:2] != (size, size):
            raise InvalidArgument(f"scene image {scene.image.shape[:2]} does not match network input {size}")
    _check_classes(net, dataset)
    start = 0
    if resume_from is not None:
        net, extra = load_checkpoint(resume_from)
        start = int(extra.get("iteration", 0))
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_iters:
        total = min(total, cfg.max_iters)
    result = TrainResult(net)
    t0 = time.time()
    for it in range(start, total):
        epoch, b = divmod(it, per_epoch)
        perm = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(dataset))
        idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, 3, it])
        images, anns = [], []
        for j in idx:
            sc = dataset[int(j)]
            im, a = sc.image, list(sc.annotations)
            if cfg.flips:
                hf, vf = rng.random(2) < 0.5
                im, a = flip_sample(im, a, bool(hf), bool(vf))
            images.append(im)
            anns.append(a)
        step = train_step(net, images, anns, cfg, it)
        line = format_log_line(it, step.lr, step.breakdown)
        result.log.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
        if progress is not None:
            progress(it, step)
        if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, net, {"iteration": it + 1, "train_config": cfg.to_dict()})
    result.iterations = total - start
    result.seconds = time.time() - t0
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, {"iteration": total, "train_config": cfg.to_dict()})
    return result


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------


def net_predictor(net: Network):
    """Wrap a network as ``image (H, W, 3) -> list of channels-last heads``.

    The image side must equal the network input size.
    """

    def predict(img):
        return [h[0] for h in net.forward(prepare_image(img)[None])]

    return predict


def _pad_to(img, h: int, w: int):
    if img.shape[0] == h and img.shape[1] == w:
        return img
    out = np.zeros((h, w) + img.shape[2:], img.dtype)
    out[: img.shape[0], : img.shape[1]] = img
    return out


def _detect_window(predict, img, scales_used, kernel, min_region):
    h, w = img.shape[:2]
    maps = decode_heads(predict(img), w, h)
    dets = []
    for s, (lm, cm) in maps.items():
        if scales_used and s not in scales_used:
            continue
        dets.extend(determine_boxes(lm, cm, s, kernel=kernel, min_region=min_region))
    return dets


def _touches(det, x0, y0, x1, y1, left, top, right, bottom) -> bool:
    # a region in the outermost pixel row yields a box edge within ~0.71 px
    # of the border; a region one pixel further in stays >= 1 px away
    c = det.corners
    m = SEAM_MARGIN
    return (
        (left and c[:, 0].min() < x0 + m)
        or (top and c[:, 1].min() < y0 + m)
        or (right and c[:, 0].max() > x1 - m)
        or (bottom and c[:, 1].max() > y1 - m)
    )


def detect(
    net: Network | None,
    image,
    nms: NmsConfig | None = None,
    tile: int | None = None,
    overlap: int = 10,
    predictor=None,
    scales=None,
    kernel: int = 3,
    min_region: int = 2,
) -> list:
    """Full inference pipeline on one image.

    Without ``tile`` the whole image (zero-padded to a multiple of 32) is
    predicted at once. With ``tile`` the padded image is cut into
    overlapping tiles; detections touching a tile edge that lies inside the
    image are discarded (the neighbouring tile sees that object whole), the
    rest are shifted back to image coordinates. Finally the detections are
    refined by :func:`refine`.

    Args:
        net: network used when ``predictor`` is None.
        predictor: callable ``image -> heads`` (channels-last).
        scales: optional subset of scale indices to decode.
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise InvalidArgument(f"expected an (H, W, 3) image, got {img.shape}")
    predict = predictor or net_predictor(net)
    h, w = img.shape[:2]
    used = set(scales) if scales else None
    if tile is None:
        ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
        dets = _detect_window(predict, _pad_to(img, ph, pw), used, kernel, min_region)
    else:
        ph, pw = max(h, tile), max(w, tile)
        padded = _pad_to(img, ph, pw)
        dets = []
        offs = tile_image(w, h, tile, overlap)
        for x0, y0 in offs:
            win = padded[y0 : y0 + tile, x0 : x0 + tile]
            left, top = x0 > 0, y0 > 0
            right, bottom = x0 + tile < pw, y0 + tile < ph
            for d in _detect_window(predict, win, used, kernel, min_region):
                if _touches(d, 0, 0, tile, tile, left, top, right, bottom):
                    continue
                dets.append(d.translated(x0, y0))
    return refine(dets, nms or NmsConfig())
