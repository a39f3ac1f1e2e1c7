"""Command-line entry point: ``obbseg {gen-data,encode,train,detect,eval,render}``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every subcommand
also accepts ``--config FILE`` (a JSON object keyed by option names, with
dashes or underscores); explicit flags override config values.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    Manifest,
    SynthConfig,
    class_color,
    format_annotations,
    format_manifest,
    parse_annotations,
    parse_manifest,
    read_detections,
    read_ppm,
    synth_scene,
    write_detections,
    write_pgm,
    write_ppm,
)
from .errors import ObbsegError
from .evaluation import evaluate, format_results_kv, format_results_table
from .micronet import PRESETS, NetworkConfig, build_network, load_checkpoint
from .refine import DEFAULT_THETA, DEFAULT_THETA_GLOBAL, NmsConfig
from .targets import encode_targets, make_scales
from .trainer import TrainConfig, detect, train

LOCK_NAME = ".obbseg.lock"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


@contextmanager
def output_lock(directory: Path):
    """Single-instance guard for an output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ObbsegError(f"{directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_text(path: Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write_text(path: Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def load_manifest(data: Path) -> Manifest:
    return parse_manifest(_read_text(Path(data) / "manifest.txt"))


def image_stems(data: Path) -> list[str]:
    return sorted(p.stem for p in (Path(data) / "images").glob("*.ppm"))


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    cfg = SynthConfig(
        image_size=args.size,
        num_classes=args.classes,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        min_size=args.min_size,
        max_size=args.max_size,
        angle_mode=args.angle_mode,
        max_iou=args.max_iou,
        noise=args.noise,
        contrast=args.contrast,
    )
    cfg.validate()
    names = [f"class{k}" for k in range(1, args.classes + 1)]
    with output_lock(out):
        (out / "images").mkdir(exist_ok=True)
        (out / "labels").mkdir(exist_ok=True)
        _write_text(out / "manifest.txt", format_manifest(Manifest(names, args.size, args.overlap)))
        for i in range(args.count):
            scene = synth_scene(cfg, args.seed * 1_000_000 + i)
            stem = f"{i:05d}"
            write_ppm(out / "images" / f"{stem}.ppm", scene.image)
            _write_text(out / "labels" / f"{stem}.txt", format_annotations(scene.annotations, names))
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _load_scene(data: Path, stem: str, manifest: Manifest):
    img, _ = read_ppm(data / "images" / f"{stem}.ppm")
    lbl = data / "labels" / f"{stem}.txt"
    anns = parse_annotations(_read_text(lbl), manifest.classes) if lbl.exists() else []
    return img, anns


class _SceneRecord:
    def __init__(self, image, annotations):
        self.image = image
        self.annotations = annotations


def cmd_encode(args) -> int:
    data, out = Path(args.data), Path(args.out)
    manifest = load_manifest(data)
    with output_lock(out):
        n = 0
        for stem in image_stems(data):
            img, anns = _load_scene(data, stem, manifest)
            h, w = img.shape[:2]
            target = encode_targets(anns, make_scales(w, h))
            for spec, grid in zip(target.scales, target.classes):
                write_pgm(out / f"{stem}_s{spec.index}.pgm", grid, {"scale": spec.index, "cell": spec.cell_size})
            n += 1
    print(f"encoded {n} images into {out}")
    return 0


def cmd_train(args) -> int:
    data, ckpt = Path(args.data), Path(args.out)
    manifest = load_manifest(data)
    base = PRESETS[args.preset]
    cfg = NetworkConfig(
        input_size=args.input_size or base.input_size,
        divisor=args.divisor or base.divisor,
        repeats=tuple(args.repeats) if args.repeats else base.repeats,
        num_classes=len(manifest.classes),
    )
    tc = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr0=args.lr0,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        decay_interval=args.decay_interval,
        rotations=args.rotations,
        seed=args.seed,
        flips=not args.no_flips,
        supervise_rotated=args.supervise_rotated,
        checkpoint_every=args.checkpoint_every,
        max_iters=args.max_iters,
    )
    scenes = [_SceneRecord(*_load_scene(data, s, manifest)) for s in image_stems(data)]
    net = build_network(cfg, seed=args.seed, dtype=np.float32)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    with output_lock(ckpt.parent):
        log_path = Path(args.log) if args.log else ckpt.with_suffix(".log")
        mode = "a" if args.resume else "w"
        with open(log_path, mode, encoding="utf-8") as log:
            res = train(scenes, net, tc, checkpoint_path=ckpt, resume_from=args.resume, log_file=log)
    print(f"trained {res.iterations} iterations in {res.seconds:.1f}s; checkpoint {ckpt}")
    return 0


def nms_from_args(args) -> NmsConfig:
    thetas = tuple(getattr(args, f"theta{k}") for k in range(1, 6))
    cross = args.cross_scale_nms and not args.strict_paper_nms
    return NmsConfig(thetas, cross, args.theta_global)


def cmd_detect(args) -> int:
    data, out = Path(args.data), Path(args.out)
    manifest = load_manifest(data)
    net, _ = load_checkpoint(args.checkpoint)
    if net.config.num_classes != len(manifest.classes):
        raise ObbsegError("checkpoint class count does not match the dataset manifest")
    nms = nms_from_args(args)
    size = net.config.input_size
    with output_lock(out):
        n = 0
        for stem in image_stems(data):
            img, _ = read_ppm(data / "images" / f"{stem}.ppm")
            whole = img.shape[0] == size and img.shape[1] == size
            dets = detect(
                net,
                img,
                nms,
                tile=None if whole else size,
                overlap=args.overlap if args.overlap is not None else manifest.overlap,
                scales=args.scales,
                kernel=args.kernel,
                min_region=args.min_region,
            )
            _write_text(out / f"{stem}.txt", write_detections(dets, manifest.classes))
            n += 1
    print(f"wrote detections for {n} images to {out}")
    return 0


def cmd_eval(args) -> int:
    data, det_dir = Path(args.data), Path(args.detections)
    manifest = load_manifest(data)
    dets, gts = [], []
    for stem in image_stems(data):
        lbl = data / "labels" / f"{stem}.txt"
        gts.append(parse_annotations(_read_text(lbl), manifest.classes) if lbl.exists() else [])
        dfile = det_dir / f"{stem}.txt"
        dets.append(read_detections(_read_text(dfile), manifest.classes) if dfile.exists() else [])
    res = evaluate(dets, gts, len(manifest.classes), args.iou, args.eleven_point)
    sys.stdout.write(format_results_table(res, manifest.classes))
    if args.out:
        _write_text(Path(args.out), format_results_kv(res, manifest.classes))
    return 0


def _draw_polygon(img, corners, color) -> None:
    h, w = img.shape[:2]
    pts = np.vstack([corners, corners[:1]])
    for a, b in itertools.pairwise(pts):
        n = int(np.ceil(np.abs(b - a).max() * 2)) + 1
        t = np.linspace(0.0, 1.0, n)[:, None]
        p = np.floor(a + t * (b - a)).astype(int)
        ok = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        img[p[ok, 1], p[ok, 0]] = color


def cmd_render(args) -> int:
    data, det_dir, out = Path(args.data), Path(args.detections), Path(args.out)
    manifest = load_manifest(data)
    with output_lock(out):
        n = 0
        for stem in image_stems(data):
            img, _ = read_ppm(data / "images" / f"{stem}.ppm")
            dfile = det_dir / f"{stem}.txt"
            dets = read_detections(_read_text(dfile), manifest.classes) if dfile.exists() else []
            canvas = img.copy()
            for d in dets:
                color = np.clip(255 - class_color(d.class_id), 0, 255).astype(np.uint8)
                _draw_polygon(canvas, d.corners, color)
            write_ppm(out / f"{stem}.ppm", canvas)
            n += 1
    print(f"rendered {n} images to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="obbseg", description="Oriented box detection by multi-scale cell classification.")
    p.add_argument("--version", action="version", version=f"obbseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.set_defaults(func=func)
        return sp

    g = add("gen-data", cmd_gen_data, "write synthetic scenes, annotations and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--min-size", type=float, default=6.0)
    g.add_argument("--max-size", type=float, default=40.0)
    g.add_argument("--angle-mode", choices=["uniform", "axis"], default="uniform")
    g.add_argument("--max-iou", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=12.0)
    g.add_argument("--contrast", type=float, default=1.0)
    g.add_argument("--overlap", type=int, default=10)

    e = add("encode", cmd_encode, "write per-scale target label grids as PGM files")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    t = add("train", cmd_train, "train a network and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--preset", choices=sorted(PRESETS), default="micro")
    t.add_argument("--input-size", type=int, default=0)
    t.add_argument("--divisor", type=int, default=0)
    t.add_argument("--repeats", type=_int_list, default=None)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr0", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=0.0005)
    t.add_argument("--decay-interval", type=int, default=2000)
    t.add_argument("--rotations", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-flips", action="store_true")
    t.add_argument("--supervise-rotated", action="store_true")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--max-iters", type=int, default=0)
    t.add_argument("--log", default=None)
    t.add_argument("--resume", default=None)

    d = add("detect", cmd_detect, "run detection and write one detection file per image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    for k in range(1, 6):
        d.add_argument(f"--theta{k}", type=float, default=DEFAULT_THETA)
    d.add_argument("--cross-scale-nms", action=argparse.BooleanOptionalAction, default=True)
    d.add_argument("--strict-paper-nms", action="store_true", help="same-scale suppression only")
    d.add_argument("--theta-global", type=float, default=DEFAULT_THETA_GLOBAL)
    d.add_argument("--overlap", type=int, default=None)
    d.add_argument("--scales", type=_int_list, default=None, help="comma-separated scale indices to decode")
    d.add_argument("--kernel", type=int, default=3)
    d.add_argument("--min-region", type=int, default=2)

    v = add("eval", cmd_eval, "print per-class AP and mAP")
    v.add_argument("--data", required=True)
    v.add_argument("--detections", required=True)
    v.add_argument("--iou", type=float, default=0.5)
    v.add_argument("--eleven-point", action="store_true")
    v.add_argument("--out", default=None, help="key = value results file")

    r = add("render", cmd_render, "draw detection polygons onto the images")
    r.add_argument("--data", required=True)
    r.add_argument("--detections", required=True)
    r.add_argument("--out", required=True)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    subs = parser._subparsers._group_actions[0].choices
    required = [a for sp in subs.values() for a in sp._actions if a.required]
    # first pass only locates the subcommand and the config file, so options
    # supplied by the config may be absent from the command line
    for a in required:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    defaults = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(_read_text(Path(args.config)))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        known = vars(args)
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("func", "command", "config"):
                raise UsageError(f"unknown config key {key!r}")
            defaults[dest] = value
    sub = subs[args.command]
    relaxed = [a for a in sub._actions if a.dest in defaults and a.required]
    for a in relaxed:
        a.required = False
    sub.set_defaults(**defaults)
    try:
        return parser.parse_args(argv)
    finally:
        for a in relaxed:
            a.required = True


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"obbseg: error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ObbsegError, OSError, ValueError) as exc:
        print(f"obbseg {args.command}: {exc}", file=sys.stderr)
        return 2


def run(argv) -> int:
    return main(list(argv))


if __name__ == "__main__":
    sys.exit(main())
