"""Detection evaluation with rotated IoU: matching, per-class AP and mAP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .geometry import iou_matrix


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


def match_detections(dets, gts, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy TP/FP flags for score-sorted detections of a single image.

    Each detection takes the unmatched same-class ground truth with the
    highest rotated IoU, provided it reaches ``iou_thresh``.

    Args:
        dets: detections, highest score first.
        gts: ground-truth objects with ``box`` and ``class_id``.

    Returns:
        Boolean array, True for true positives.
    """
    flags = np.zeros(len(dets), bool)
    if not dets or not gts:
        return flags
    iou = iou_matrix([d.box for d in dets], [g.box for g in gts])
    gcls = np.array([g.class_id for g in gts])
    used = np.zeros(len(gts), bool)
    for i, d in enumerate(dets):
        cand = (gcls == d.class_id) & ~used & (iou[i] >= iou_thresh)
        if not cand.any():
            continue
        j = int(np.argmax(np.where(cand, iou[i], -1.0)))
        used[j] = True
        flags[i] = True
    return flags


def pr_curve(flags, scores, n_gt: int) -> list[PrPoint]:
    flags = np.asarray(flags, bool)
    scores = np.asarray(scores, np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    prec = tp / np.maximum(tp + fp, 1)
    rec = tp / n_gt if n_gt > 0 else np.zeros_like(prec, dtype=np.float64)
    return [PrPoint(float(scores[order[i]]), float(prec[i]), float(rec[i])) for i in range(len(order))]


def average_precision(flags, scores, n_gt: int, eleven_point: bool = False):
    """Area under the precision-recall curve with a monotone precision envelope.

    Returns None when there are no ground truths and no detections (the
    class is not evaluated); 0.0 when there are detections but no ground
    truths.
    """
    if n_gt < 0:
        raise InvalidArgument("n_gt must be >= 0")
    flags = np.asarray(flags, bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    pts = pr_curve(flags, scores, n_gt)
    rec = np.array([p.recall for p in pts])
    prec = np.array([p.precision for p in pts])
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            sel = prec[rec >= t]
            ap += (sel.max() if sel.size else 0.0) / 11.0
        return float(ap)
    # every true positive adds 1/n_gt of recall at the enveloped precision
    env = np.maximum.accumulate(prec[::-1])[::-1]
    is_tp = np.diff(np.concatenate([[0.0], rec])) > 0
    return float(np.sum(env[is_tp]) / n_gt)


def mean_ap(aps) -> float:
    """Unweighted mean over evaluated classes; ``None`` entries are skipped."""
    vals = aps.values() if isinstance(aps, dict) else aps
    vals = [float(v) for v in vals if v is not None]
    if not vals:
        raise InvalidArgument("no evaluated classes")
    return float(np.mean(vals))


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)
    n_det: dict = field(default_factory=dict)
    mAP: float = 0.0


def evaluate(dets_per_image, gts_per_image, num_classes: int, iou_thresh: float = 0.5, eleven_point: bool = False) -> EvalResult:
    """Pool detections over images, match per image and compute per-class AP.

    Args:
        dets_per_image: one list of detections per image.
        gts_per_image: one list of ground-truth objects per image.
        num_classes: classes are ``1..num_classes``.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise InvalidArgument("detections and ground truth cover different image counts")
    res = EvalResult()
    for c in range(1, num_classes + 1):
        flags, scores, n_gt = [], [], 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            dc = sorted((d for d in dets if d.class_id == c), key=lambda d: -d.score)
            gc = [g for g in gts if g.class_id == c]
            n_gt += len(gc)
            flags.append(match_detections(dc, gc, iou_thresh))
            scores.extend(d.score for d in dc)
        f = np.concatenate(flags) if flags else np.zeros(0, bool)
        res.ap[c] = average_precision(f, scores, n_gt, eleven_point)
        res.n_gt[c] = n_gt
        res.n_det[c] = int(f.size)
    res.mAP = mean_ap(res.ap)
    return res


def format_results_table(res: EvalResult, class_names=None) -> str:
    lines = [f"{'class':<20} {'n_gt':>6} {'n_det':>6} {'AP':>8}"]
    for c, ap in res.ap.items():
        name = class_names[c - 1] if class_names else str(c)
        shown = "    n/a" if ap is None else f"{ap:8.4f}"
        lines.append(f"{name:<20} {res.n_gt[c]:>6} {res.n_det[c]:>6} {shown}")
    lines.append(f"mAP {res.mAP:.4f}")
    return "\n".join(lines) + "\n"


def format_results_kv(res: EvalResult, class_names=None) -> str:
    lines = [f"mAP = {res.mAP:.6f}"]
    for c, ap in res.ap.items():
        name = class_names[c - 1] if class_names else str(c)
        lines.append(f"AP.{name} = {'nan' if ap is None else f'{ap:.6f}'}")
    return "\n".join(lines) + "\n"
