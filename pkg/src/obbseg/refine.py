"""Per-scale rotated NMS ranked by average region confidence, plus an optional cross-scale merge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .geometry import iou_matrix

DEFAULT_THETA = 0.3
DEFAULT_THETA_GLOBAL = 0.5


@dataclass(frozen=True)
class NmsConfig:
    thetas: tuple = (DEFAULT_THETA,) * 5
    cross_scale: bool = True
    theta_global: float = DEFAULT_THETA_GLOBAL

    def __post_init__(self):
        th = tuple(float(t) for t in self.thetas)
        if len(th) != 5:
            raise InvalidConfig(f"need 5 per-scale thresholds, got {len(th)}")
        for t in th + (float(self.theta_global),):
            if not 0.0 < t < 1.0:
                raise InvalidConfig(f"NMS threshold {t} outside (0, 1)")
        object.__setattr__(self, "thetas", th)

    @classmethod
    def strict(cls, thetas=(DEFAULT_THETA,) * 5) -> NmsConfig:
        """Same-scale suppression only."""
        return cls(tuple(thetas), cross_scale=False)


def rank_key(d) -> tuple:
    """Descending score, then scale, class and corner coordinates."""
    return (-d.score, d.scale_index, d.class_id, tuple(d.corners.ravel().tolist()))


def _greedy(dets, thresh: float) -> list:
    order = sorted(dets, key=rank_key)
    if len(order) < 2:
        return order
    iou = iou_matrix([d.box for d in order], [d.box for d in order])
    keep = []
    suppressed = np.zeros(len(order), bool)
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= iou[i] > thresh
    return keep


def nms_per_scale(dets, cfg: NmsConfig) -> list:
    """Greedy suppression within each scale with that scale's threshold.

    Detections at different scales are never compared. Output is ordered
    by :func:`rank_key`.
    """
    by_scale = {}
    for d in dets:
        by_scale.setdefault(d.scale_index, []).append(d)
    out = []
    for s in sorted(by_scale):
        out.extend(_greedy(by_scale[s], cfg.thetas[s - 1]))
    return sorted(out, key=rank_key)


def cross_scale_merge(dets, theta_global: float = DEFAULT_THETA_GLOBAL, enabled: bool = True) -> list:
    """Greedy suppression across all scales and classes; identity when disabled."""
    if not enabled:
        return list(dets)
    return _greedy(dets, theta_global)


def refine(dets, cfg: NmsConfig | None = None) -> list:
    cfg = cfg or NmsConfig()
    kept = nms_per_scale(dets, cfg)
    return cross_scale_merge(kept, cfg.theta_global, cfg.cross_scale)
