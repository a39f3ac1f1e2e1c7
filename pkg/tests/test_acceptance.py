"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed immediately and again
in the terminal summary) before asserting.
"""

import itertools
import math
import time

import numpy as np
import pytest
from conftest import record_acceptance
from gradcheck import network_gradcheck, tiny_net_input
from oracles import (
    flood_fill_components,
    grad_rel_err,
    monte_carlo_iou,
    numeric_grad,
    reconstruct_components,
    sweep_min_rect_area,
)

from obbseg import micronet
from obbseg.boxdet import Detection, determine_boxes
from obbseg.dataio import (
    Manifest,
    SynthConfig,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    format_annotations,
    format_manifest,
    parse_annotations,
    parse_manifest,
    read_detections,
    synth_scene,
    write_detections,
)
from obbseg.evaluation import evaluate
from obbseg.geometry import OrientedBox, min_area_rect, obb_to_corners, rotated_iou
from obbseg.loss import (
    ScaleLoss,
    class_loss,
    conf_loss,
    format_log_line,
    parse_log_line,
    rotation_loss,
    total_loss,
)
from obbseg.micronet import PRESETS, build_network, load_checkpoint, save_checkpoint
from obbseg.raster import morphology, rasterize_polygon, trace_contours
from obbseg.refine import NmsConfig, nms_per_scale, refine
from obbseg.targets import (
    Annotation,
    ScaleCorrespondence,
    build_rotation_batch,
    encode_targets,
    make_scales,
    on_off,
    tile_image,
)
from obbseg.trainer import TrainConfig, detect, train

# end-to-end benchmark settings
BENCH_TRAIN = 2000
BENCH_TEST = 200
BENCH_TEST_SEED0 = 10**6
BENCH_EPOCHS = 14
BENCH_BATCH = 8
BENCH_BUDGET_S = 30 * 60
MAP_FLOOR, AXIS_FLOOR = 0.60, 0.75
PINNED_MAP, PINNED_AXIS = 0.827, 0.8765  # measured reference run (14 epochs, 1044 s)
PIN_BAND = 0.05


def random_pair(rng):
    a = OrientedBox(*rng.uniform(-5, 5, 2), *rng.uniform(1, 10, 2), rng.uniform(-math.pi, math.pi))
    kind = rng.integers(0, 4)
    if kind == 0:  # near-duplicate
        b = OrientedBox(a.cx + rng.normal(0, 0.5), a.cy + rng.normal(0, 0.5), a.w * rng.uniform(0.8, 1.2), a.h * rng.uniform(0.8, 1.2), a.alpha + rng.normal(0, 0.2))
    elif kind == 1:  # contained
        b = OrientedBox(a.cx, a.cy, a.w * 0.4, a.h * 0.4, rng.uniform(-math.pi, math.pi))
    else:
        b = OrientedBox(*rng.uniform(-6, 6, 2), *rng.uniform(1, 10, 2), rng.uniform(-math.pi, math.pi))
    return a, b


def test_criterion_1_geometry_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1001)
    worst_iou = 0.0
    for _ in range(200):
        a, b = random_pair(rng)
        worst_iou = max(worst_iou, abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 1_000_000, rng)))
    worst_rect = 0.0
    for _ in range(500):
        n = int(rng.integers(3, 40))
        pts = rng.normal(0, 1, (n, 2)) * rng.uniform(0.5, 20, 2) + rng.uniform(-50, 50, 2)
        ref = sweep_min_rect_area(pts)
        worst_rect = max(worst_rect, abs(min_area_rect(pts).area - ref) / ref)
    dt = time.time() - t0
    ok = worst_iou <= 3e-3 and worst_rect <= 1e-3 and dt < 120
    record_acceptance(1, "geometry oracle suite", ok, f"max |IoU-MC|={worst_iou:.2e} max rect rel err={worst_rect:.2e} time={dt:.1f}s")
    assert ok


def random_mask(rng):
    h, w = rng.integers(5, 40, 2)
    kind = rng.integers(0, 3)
    if kind == 0:
        return rng.random((h, w)) < rng.uniform(0.2, 0.8)
    m = np.zeros((h, w), bool)
    for _ in range(rng.integers(1, 8)):
        b = OrientedBox(rng.uniform(0, w), rng.uniform(0, h), *rng.uniform(1, 20, 2), rng.uniform(-3, 3))
        m ^= rasterize_polygon(obb_to_corners(b), int(w), int(h))
    if kind == 2:
        m &= rng.random((h, w)) < 0.9
    return m


def test_criterion_2_raster_oracles():
    t0 = time.time()
    rng = np.random.default_rng(2002)
    recon_ok = dual_ok = idem_ok = True
    for _ in range(100):
        m = random_mask(rng)
        contours = trace_contours(m)
        labels, n = flood_fill_components(m)
        regions = reconstruct_components(contours, m.shape)
        if len(regions) != n:
            recon_ok = False
        for c, reg in regions:
            comp = labels == labels[c.pixels[0, 0], c.pixels[0, 1]]
            recon_ok &= bool(np.array_equal(reg, comp))
        for k in (3, 5):
            r = k // 2
            lhs = morphology(m, "dilate", k)
            rhs = ~morphology(~m, "erode", k)
            inner = (slice(r, m.shape[0] - r), slice(r, m.shape[1] - r))
            dual_ok &= bool(np.array_equal(lhs[inner], rhs[inner]))
            o, c = morphology(m, "open", k), morphology(m, "close", k)
            idem_ok &= bool(np.array_equal(morphology(o, "open", k), o) and np.array_equal(morphology(c, "close", k), c))
    dt = time.time() - t0
    ok = recon_ok and dual_ok and idem_ok and dt < 60
    record_acceptance(2, "raster oracle suite", ok, f"reconstruction={recon_ok} duality={dual_ok} idempotence={idem_ok} time={dt:.1f}s")
    assert ok


def _layer_err(layer, x, rng, h=1e-5):
    y = layer.forward(x)
    w = rng.standard_normal(y.shape)
    for g in layer.grads():
        g[...] = 0
    dx = layer.backward(w)
    f = lambda: float(np.sum(layer.forward(x) * w))
    errs = [grad_rel_err(dx, numeric_grad(f, x, h))]
    errs += [grad_rel_err(g, numeric_grad(f, p, h)) for p, g in zip(layer.params(), layer.grads())]
    return max(errs)


class _Concat:
    """Channel concatenation of two halves of the input, as used by the skips."""

    def __init__(self, ca):
        self.ca = ca

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        a, b = micronet.split_channels(x, self.ca)
        return micronet.concat_channels(a * 2.0, b * 3.0)

    def backward(self, dy):
        da, db = micronet.split_channels(dy, self.ca)
        return micronet.concat_channels(da * 2.0, db * 3.0)


def test_criterion_3_gradients():
    t0 = time.time()
    rng = np.random.default_rng(3003)

    def init(layer):
        for p in layer.params():
            p[...] = rng.standard_normal(p.shape) * 0.5
        return layer

    away = lambda shape: rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    layer_errs = {
        "conv3x3": _layer_err(init(micronet.Conv(3, 4, 3, 1)), rng.standard_normal((2, 5, 5, 3)), rng),
        "conv3x3/2": _layer_err(init(micronet.Conv(3, 4, 3, 2)), rng.standard_normal((2, 6, 6, 3)), rng),
        "conv1x1 head": _layer_err(init(micronet.Conv(4, 5, 1, 1)), rng.standard_normal((2, 3, 3, 4)), rng),
        "leaky": _layer_err(micronet.LeakyReLU(0.1), away((2, 3, 3, 4)), rng),
        "upsample": _layer_err(micronet.Upsample2x(), rng.standard_normal((1, 3, 3, 2)), rng),
        "concat": _layer_err(_Concat(2), rng.standard_normal((1, 3, 3, 5)), rng),
        "residual": _layer_err(init(micronet.Residual(3, 2)), rng.standard_normal((1, 4, 4, 3)), rng),
    }

    # isolated loss terms
    z = rng.standard_normal((2, 4, 4, 4)) * 2
    t = rng.integers(0, 2, (2, 4, 4))
    c = rng.integers(0, 4, (2, 4, 4))
    fo = rng.standard_normal((4, 4, 4))
    fr = rng.standard_normal((2, 4, 4, 4))
    corr = ScaleCorrespondence(
        np.array([0, 1, 5, 6, 6, 15]), np.array([2, 1, 5, 9, 3, 0]), np.array([0, 0, 1, 1, 1, 0]), np.array([0, 0, 1, 1, 1, 2]), 4
    )
    loss_errs = {
        "conf": grad_rel_err(conf_loss(z, t)[1], numeric_grad(lambda: conf_loss(z, t)[0], z, 1e-4)),
        "class": grad_rel_err(class_loss(z, c)[1], numeric_grad(lambda: class_loss(z, c)[0], z, 1e-4)),
        "rotation/orig": grad_rel_err(rotation_loss(fo, fr, corr)[1], numeric_grad(lambda: rotation_loss(fo, fr, corr)[0], fo, 1e-4)),
        "rotation/rot": grad_rel_err(rotation_loss(fo, fr, corr)[2], numeric_grad(lambda: rotation_loss(fo, fr, corr)[0], fr, 1e-4)),
    }

    net, x, ws = tiny_net_input(seed=0)
    net_res = network_gradcheck(net, x, ws, h=1e-4, tol=1e-4)
    dt = time.time() - t0
    net_ok = net_res["unexplained"] == 0 and net_res["frozen_max"] < 1e-4
    ok = max(layer_errs.values()) < 1e-4 and max(loss_errs.values()) < 1e-6 and net_ok and dt < 300
    detail = (
        f"layers max={max(layer_errs.values()):.1e} losses max={max(loss_errs.values()):.1e} "
        f"network params={net_res['n_params']} raw max={net_res['raw_max']:.1e} "
        f"over tol={net_res['n_over']} (all kink crossings: {net_res['unexplained'] == 0}) "
        f"frozen-mask max={net_res['frozen_max']:.1e} time={dt:.0f}s"
    )
    record_acceptance(3, "gradient suite", ok, detail)
    assert ok


def _coverage_onehot(box, class_id, scale, depth):
    """Cells whose square meets the box (with a hair of slack) carry the class one-hot."""
    from obbseg.geometry import convex_clip, polygon_area

    feats = np.zeros((scale.grid_h, scale.grid_w, depth))
    cs = scale.cell_size
    poly = obb_to_corners(OrientedBox(box.cx, box.cy, box.w + 1e-6, box.h + 1e-6, box.alpha))
    lo = np.floor(poly.min(axis=0) / cs).astype(int)
    hi = np.floor(poly.max(axis=0) / cs).astype(int)
    for r in range(max(lo[1], 0), min(hi[1], scale.grid_h - 1) + 1):
        for c in range(max(lo[0], 0), min(hi[0], scale.grid_w - 1) + 1):
            sq = np.array([[c, r], [c + 1, r], [c + 1, r + 1], [c, r + 1]], float) * cs
            if polygon_area(convex_clip(sq, poly)) > 0:
                feats[r, c, class_id] = 1.0
    return feats


def test_criterion_4_rotation_regularizer():
    from obbseg.geometry import rotate_box

    rng = np.random.default_rng(4004)
    scales = make_scales(64, 64)
    depth = 4
    exact_max = 0.0
    n_pairs = 0
    cases = []
    for trial in range(60):
        box = OrientedBox(*rng.uniform(24, 40, 2), *rng.uniform(4, 24, 2), rng.uniform(-math.pi, math.pi))
        cid = int(rng.integers(1, 4))
        rb = build_rotation_batch([Annotation(box, cid)], 5, [4004, trial], scales)
        for s in scales:
            corr = rb.correspondences[s.index - 1]
            if not len(corr):
                continue
            fo = _coverage_onehot(box, cid, s, depth)
            fr = np.stack([_coverage_onehot(rotate_box(box, math.radians(a)), cid, s, depth) for a in rb.angles])
            loss, _, _ = rotation_loss(fo, fr, corr)
            exact_max = max(exact_max, loss)
            n_pairs += len(corr)
            cases.append((fo, fr, corr))
    sigma = 0.3
    vals = []
    for i in range(1000):
        fo, fr, corr = cases[i % len(cases)]
        vals.append(rotation_loss(fo + rng.normal(0, sigma, fo.shape), fr + rng.normal(0, sigma, fr.shape), corr)[0])
    expected = 2 * sigma**2 * depth
    rel = abs(np.mean(vals) - expected) / expected
    ok = exact_max == 0.0 and n_pairs > 0 and rel <= 0.10
    record_acceptance(4, "rotation regularizer", ok, f"oracle loss max={exact_max} over {n_pairs} cell pairs; noisy mean={np.mean(vals):.4f} vs 2*sigma^2*D={expected:.4f} (rel {rel:.3f})")
    assert ok


@pytest.mark.slow
def test_criterion_5_end_to_end_benchmark():
    scenes = [synth_scene(SynthConfig(), i) for i in range(BENCH_TRAIN)]
    net = build_network(PRESETS["micro"], seed=0, dtype=np.float32)
    res = train(scenes, net, TrainConfig(epochs=BENCH_EPOCHS, batch_size=BENCH_BATCH))
    scores = {}
    for mode in ("uniform", "axis"):
        test = [synth_scene(SynthConfig(angle_mode=mode), BENCH_TEST_SEED0 + i) for i in range(BENCH_TEST)]
        dets = [detect(res.net, s.image) for s in test]
        scores[mode] = evaluate(dets, [s.annotations for s in test], 3).mAP
    ok = scores["uniform"] >= MAP_FLOOR and scores["axis"] >= AXIS_FLOOR and res.seconds <= BENCH_BUDGET_S
    pinned = ""
    if PINNED_MAP is not None:
        in_band = abs(scores["uniform"] - PINNED_MAP) <= PIN_BAND and abs(scores["axis"] - PINNED_AXIS) <= PIN_BAND
        ok = ok and in_band
        pinned = f" pinned {PINNED_MAP:.4f}/{PINNED_AXIS:.4f} +-{PIN_BAND} in band={in_band}"
    record_acceptance(
        5,
        "end-to-end synthetic benchmark",
        ok,
        f"mAP={scores['uniform']:.4f} (>= {MAP_FLOOR}) axis-aligned mAP={scores['axis']:.4f} (>= {AXIS_FLOOR}) train={res.seconds:.0f}s{pinned}",
    )
    assert ok


def test_criterion_6_oriented_recovery():
    rng = np.random.default_rng(6006)
    good = 0
    for _ in range(500):
        w = rng.uniform(16, 48)
        h = w / rng.uniform(1.5, 3.0)
        src = OrientedBox(64, 64, w, h, rng.uniform(-math.pi / 2, math.pi / 2))
        lm = rasterize_polygon(obb_to_corners(src), 128, 128).astype(np.int32)
        dets = determine_boxes(lm, lm.astype(float), 1)
        if len(dets) != 1:
            continue
        got = dets[0].box
        err = math.degrees(abs((got.alpha - src.alpha + math.pi / 2) % math.pi - math.pi / 2))
        good += err <= 3.0 and rotated_iou(got, src) >= 0.85
    ok = good >= 475
    record_acceptance(6, "oriented recovery", ok, f"{good}/500 within 3 deg and IoU >= 0.85")
    assert ok


def test_criterion_7_pipeline_invariants(tmp_path):
    rng = np.random.default_rng(7007)
    failures = []

    # NMS idempotence
    for _ in range(200):
        dets = [
            Detection(OrientedBox(*rng.uniform(0, 40, 2), *rng.uniform(2, 15, 2), rng.uniform(-3, 3)), int(rng.integers(1, 4)), float(rng.choice([0.2, 0.5, 0.9])), int(rng.integers(1, 6)))
            for _ in range(rng.integers(0, 15))
        ]
        for cfg in (NmsConfig(), NmsConfig.strict(), NmsConfig(thetas=(0.1, 0.2, 0.5, 0.7, 0.9))):
            once = nms_per_scale(dets, cfg)
            if nms_per_scale(once, cfg) != once or refine(refine(dets, cfg), cfg) != refine(dets, cfg):
                failures.append("nms idempotence")

    # loss additivity
    for _ in range(200):
        per = {s: ScaleLoss(*rng.uniform(0, 5, 3)) for s in range(1, 6)}
        b = total_loss(per)
        acc = 0.0
        for s in range(1, 6):
            sl = per[s]
            if b.total(s) != sl.conf + sl.cls + sl.rotation:
                failures.append("per-scale additivity")
            acc += b.total(s)
        if b.grand_total != acc:
            failures.append("grand total")

    # on-off monotonicity
    scales = make_scales(64, 64)
    for _ in range(500):
        a = Annotation(OrientedBox(32, 32, *rng.uniform(0.1, 64, 2), rng.uniform(-3, 3)), 1)
        flags = [on_off(a, s) for s in scales]
        if any(later and not earlier for earlier, later in itertools.pairwise(flags)):
            failures.append("on-off monotonicity")

    # tiling coverage
    for _ in range(300):
        w, h = (int(v) for v in rng.integers(1, 3000, 2))
        tile = int(rng.integers(64, 700))
        ov = int(rng.integers(0, 63))
        cov_x = np.zeros(max(w, tile), bool)
        cov_y = np.zeros(max(h, tile), bool)
        for x, y in tile_image(w, h, tile, ov):
            cov_x[x : x + tile] = True
            cov_y[y : y + tile] = True
        if not (cov_x.all() and cov_y.all()):
            failures.append("tiling coverage")

    # serialization round-trips
    classes = ["a", "b", "c"]
    for seed in range(50):
        s = synth_scene(SynthConfig(), seed)
        img, _ = decode_ppm(encode_ppm(s.image, {"seed": seed}))
        if img.tobytes() != s.image.tobytes():
            failures.append("ppm")
        grid = encode_targets(s.annotations, scales).classes[0]
        g2, meta = decode_pgm(encode_pgm(grid, {"scale": 1}))
        if not np.array_equal(g2, grid) or meta != {"scale": "1"}:
            failures.append("pgm")
        back_anns = parse_annotations(format_annotations(s.annotations, classes), classes)
        if len(back_anns) != len(s.annotations) or any(
            (a.class_id, a.difficult) != (b.class_id, b.difficult) or np.abs(obb_to_corners(a.box) - obb_to_corners(b.box)).max() > 1e-5
            for a, b in zip(s.annotations, back_anns)
        ):
            failures.append("annotations")
        dets = [Detection(a.box, a.class_id, float(rng.uniform()), int(rng.integers(1, 6))) for a in s.annotations]
        back = read_detections(write_detections(dets, classes), classes)
        if len(back) != len(dets) or any(
            (d.class_id, d.scale_index) != (b.class_id, b.scale_index) or abs(d.score - b.score) > 1e-5 or np.abs(d.corners - b.corners).max() > 1e-5
            for d, b in zip(dets, back)
        ):
            failures.append("detections")
    m = Manifest(["x", "y"], 256, 12, {"gsd": "0.5"})
    if parse_manifest(format_manifest(m)) != m:
        failures.append("manifest")
    b = total_loss({s: ScaleLoss(0.125, 0.25, 0.5) for s in range(1, 6)})
    if parse_log_line(format_log_line(3, 0.01, b))["total"] != 4.375:
        failures.append("log line")
    net = build_network(PRESETS["micro-micro"], seed=3)
    for p in net.params():
        p[...] = rng.standard_normal(p.shape)
    save_checkpoint(tmp_path / "n.ckpt", net, {"k": 1})
    back_net, extra = load_checkpoint(tmp_path / "n.ckpt")
    if extra != {"k": 1} or any(p.tobytes() != q.tobytes() for p, q in zip(net.params(), back_net.params())):
        failures.append("checkpoint")

    ok = not failures
    record_acceptance(7, "pipeline invariants", ok, "all exact" if ok else f"failed: {sorted(set(failures))}")
    assert ok
