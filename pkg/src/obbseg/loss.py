"""Per-scale training objective: confidence, classification and rotation terms.

All functions take channels-last logits ``(..., C + 1)`` with channel 0 the
background, and return ``(value, gradient)`` with the gradient shaped like
the logits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, ParseError
from .targets import NUM_SCALES, ScaleCorrespondence


def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)))[..., 0]


def softmax(z, axis=-1):
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def objectness_prob(logits):
    """``1 - softmax(logits)[0]``, computed stably in log space."""
    z = np.asarray(logits, dtype=np.float64)
    return np.exp(_logsumexp(z[..., 1:]) - _logsumexp(z))


def conf_loss(logits, objectness):
    """Mean per-cell binary cross-entropy on the derived objectness.

    Args:
        logits: ``(..., C+1)`` head output.
        objectness: 0/1 grid matching ``logits.shape[:-1]``.

    Returns:
        (loss, dloss/dlogits)
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(objectness, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 2 or t.shape != z.shape[:-1]:
        raise InvalidArgument(f"conf_loss: logits {z.shape} vs target {t.shape}")
    m = t.size
    if m == 0:
        return 0.0, np.zeros_like(z)
    lse = _logsumexp(z)
    log_bg = z[..., 0] - lse
    log_obj = _logsumexp(z[..., 1:]) - lse
    loss = float(-(t * log_obj + (1.0 - t) * log_bg).sum() / m)
    p = np.exp(z - lse[..., None])
    q = np.zeros_like(z)
    q[..., 1:] = softmax(z[..., 1:])
    e0 = np.zeros_like(z)
    e0[..., 0] = 1.0
    tt = t[..., None]
    grad = -(tt * (q - p) + (1.0 - tt) * (e0 - p)) / m
    return max(loss, 0.0), grad


def class_loss(logits, classes):
    """Cross-entropy over the object channels, averaged over object cells.

    The softmax runs over channels ``1..C`` only; background cells (class 0)
    are excluded and contribute no gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    c = np.asarray(classes)
    if z.ndim < 1 or z.shape[-1] < 2 or c.shape != z.shape[:-1]:
        raise InvalidArgument(f"class_loss: logits {z.shape} vs classes {c.shape}")
    if c.size and (c.min() < 0 or c.max() >= z.shape[-1]):
        raise InvalidArgument("class_loss: class id out of range")
    grad = np.zeros_like(z)
    obj = c > 0
    n = int(obj.sum())
    if n == 0:
        return 0.0, grad
    zo = z[obj][:, 1:]
    co = c[obj] - 1
    lse = _logsumexp(zo)
    nll = lse - zo[np.arange(n), co]
    q = np.exp(zo - lse[:, None])
    q[np.arange(n), co] -= 1.0
    g = np.zeros((n, z.shape[-1]))
    g[:, 1:] = q / n
    grad[obj] = g
    return max(float(nll.sum() / n), 0.0), grad


def rotation_loss(features_orig, features_rot, corr: ScaleCorrespondence):
    """Squared feature distance between matched cells of original and rotated maps.

    Within each (angle, object) group the squared L2 distances are averaged
    over matched cells; the group means are then averaged over
    ``corr.n_groups``.

    Args:
        features_orig: ``(..., K)``; cells are flattened in C order.
        features_rot: ``(r, ..., K)``; axis 0 indexes the rotation angle.
        corr: pairs of flat cell indices.

    Returns:
        (loss, grad_orig, grad_rot)
    """
    fo = np.asarray(features_orig, dtype=np.float64)
    fr = np.asarray(features_rot, dtype=np.float64)
    go = np.zeros_like(fo)
    gr = np.zeros_like(fr)
    if len(corr) == 0 or corr.n_groups == 0:
        return 0.0, go, gr
    k = fo.shape[-1]
    if fr.shape[-1] != k:
        raise InvalidArgument("feature depth mismatch")
    fo2 = fo.reshape(-1, k)
    r = fr.shape[0]
    fr2 = fr.reshape(r, -1, k)
    cells = fr2.shape[1]
    if corr.src.max() >= fo2.shape[0] or corr.dst.max() >= cells or corr.angle_idx.max() >= r:
        raise InvalidArgument("correspondence index out of range")
    flat_dst = corr.angle_idx * cells + corr.dst
    fr_flat = fr2.reshape(-1, k)
    diff = fo2[corr.src] - fr_flat[flat_dst]
    sq = np.einsum("ij,ij->i", diff, diff)
    counts = np.bincount(corr.group, minlength=corr.n_groups).astype(np.float64)
    per_group = np.bincount(corr.group, weights=sq, minlength=corr.n_groups)
    used = counts > 0
    loss = float(np.sum(per_group[used] / counts[used]) / corr.n_groups)
    w = 2.0 / (counts[corr.group] * corr.n_groups)
    d = diff * w[:, None]
    go2 = go.reshape(-1, k)
    gr2 = gr.reshape(-1, k)
    np.add.at(go2, corr.src, d)
    np.add.at(gr2, flat_dst, -d)
    return loss, go, gr


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleLoss:
    conf: float = 0.0
    cls: float = 0.0
    rotation: float = 0.0

    @property
    def total(self) -> float:
        return self.conf + self.cls + self.rotation


@dataclass(frozen=True)
class LossBreakdown:
    """Per-scale terms keyed by scale index 1..5."""

    per_scale: dict = field(default_factory=dict)

    def total(self, s: int) -> float:
        return self.per_scale[s].total

    def _sum(self, attr: str) -> float:
        acc = 0.0
        for s in sorted(self.per_scale):
            acc += getattr(self.per_scale[s], attr)
        return acc

    @property
    def conf(self) -> float:
        return self._sum("conf")

    @property
    def cls(self) -> float:
        return self._sum("cls")

    @property
    def rotation(self) -> float:
        return self._sum("rotation")

    @property
    def grand_total(self) -> float:
        return self._sum("total")


def total_loss(breakdowns) -> LossBreakdown:
    """Combine per-scale losses; accepts a mapping ``{scale: ScaleLoss}`` or ``(scale, ScaleLoss)`` pairs.

    Summation always runs in ascending scale order, so the result does not
    depend on the order the scales were supplied in.
    """
    items = breakdowns.items() if isinstance(breakdowns, dict) else list(breakdowns)
    per = {}
    for s, b in items:
        per[int(s)] = b
    missing = [s for s in range(1, NUM_SCALES + 1) if s not in per]
    if missing:
        raise InvalidArgument(f"missing scales {missing}")
    return LossBreakdown(dict(sorted(per.items())))


# --------------------------------------------------------------------------
# training log lines
# --------------------------------------------------------------------------

_LOG_RE = re.compile(
    r"^iter=(\d+) lr=(\S+) conf=(\S+) class=(\S+) rotation=(\S+) total=(\S+)$"
)


def format_log_line(iteration: int, lr: float, b: LossBreakdown) -> str:
    return (
        f"iter={iteration} lr={lr:.6g} conf={b.conf:.6f} class={b.cls:.6f} "
        f"rotation={b.rotation:.6f} total={b.grand_total:.6f}"
    )


def parse_log_line(line: str, lineno: int | None = None) -> dict:
    m = _LOG_RE.match(line.strip())
    if not m:
        raise ParseError(f"malformed log line: {line.strip()!r}", lineno)
    it, lr, conf, cls, rot, tot = m.groups()
    return {
        "iter": int(it),
        "lr": float(lr),
        "conf": float(conf),
        "class": float(cls),
        "rotation": float(rot),
        "total": float(tot),
    }
