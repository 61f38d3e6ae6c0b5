"""Command line entry point: synth, train, detect, eval, serve.

Exit codes: 0 success, 1 some input images failed to decode, 2 usage or
missing/unreadable files, 3 training diverged or a stage precondition failed.
"""
from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import DEFAULT_THRESHOLDS, detect
from .dataio import ImageDecodeError, load_scenes, read_image, write_dataset
from .errors import ConfigError, DivergenceError, SamplingError, StateError
from .evaluate import evaluate_model, format_summary, write_report
from .model import CascadeModel, load_model
from .schema import image_document
from .synth import synth_generate

log = logging.getLogger("cascadeface")

EXIT_OK, EXIT_DECODE, EXIT_USAGE, EXIT_TRAIN = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm")


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("CASCADE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _thresholds(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("thresholds must be three numbers")
    if len(vals) != 3 or not all(0 <= v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must be three numbers in [0, 1]")
    return vals


def _range(text: str) -> tuple:
    parts = [int(v) for v in text.split(",")]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


def _require(path, what="file"):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _load_model(path) -> CascadeModel:
    _require(path, "model")
    try:
        return load_model(path)
    except Exception as exc:  # any parse failure means an unreadable model
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def _load_dataset(path):
    _require(path, "dataset")
    try:
        scenes = load_scenes(path)
    except (FileNotFoundError, ImageDecodeError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc
    return scenes


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    scenes = synth_generate(args.count, args.width, args.height, args.faces, seed=args.seed)
    write_dataset(args.out, scenes)
    n_faces = sum(len(s.faces) for s in scenes)
    print(f"wrote {len(scenes)} images with {n_faces} faces to {args.out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _train_config(args):
    from .trainer import TrainConfig, load_config

    base = TrainConfig(stage=args.stage)
    if args.config:
        _require(args.config, "config")
        base = load_config(args.config, base)
    updates = {"stage": args.stage}
    if args.seed is not None:
        updates["seed"] = args.seed
    for name in ("iterations", "epochs", "learning_rate", "batch_size", "keep_fraction",
                 "e2e_iterations"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    if args.no_ohem:
        updates["ohem"] = False
    if args.large_batch:
        updates["large_batch"] = True
    if args.all_heads:
        updates["e2e_all_heads"] = True
    return base.with_(**updates)


def cmd_train(args) -> int:
    from .trainer import (
        NET_SIZES, alternating_end_to_end, build_stage_dataset, train_stage, write_trace,
    )

    scenes = _load_dataset(args.data)
    config = _train_config(args)
    init = args.init
    if init is None and Path(args.out).exists() and args.resume:
        init = args.out
    model = _load_model(init) if init else CascadeModel()
    stage = config.stage
    try:
        if stage == "e2e":
            data = build_stage_dataset(scenes, "net48", model, seed=config.seed)
            result = alternating_end_to_end(model, data, config)
            model = result.model
        else:
            data = build_stage_dataset(scenes, stage, model, seed=config.seed)
            log.info("%s training set: %s", stage, data.counts())
            assert data.size == NET_SIZES[stage]
            result = train_stage(stage, data, config)
            if model.has(stage) and model.net(stage).spec.bridge_width:
                raise StateError("cannot retrain a single stage of a bridged model")
            model.nets[stage] = result.net
            model.trained.add(stage)
    except DivergenceError as exc:
        if args.trace and exc.trace:
            write_trace(args.trace, exc.trace)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    model.meta = dict(model.meta, seed=config.seed)
    nbytes = model.save(args.out)
    trace_path = args.trace or f"{args.out}.trace.csv"
    write_trace(trace_path, result.trace)
    last = result.trace[-1].hard_loss if result.trace else float("nan")
    print(f"{stage}: {len(result.trace)} iterations, final hard loss {last:.4f}, "
          f"model {nbytes} bytes -> {args.out}")
    return EXIT_OK


# -- detect ---------------------------------------------------------------------

def _expand_inputs(paths) -> list:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return out


def draw_detections(image: np.ndarray, detections, path) -> None:
    from PIL import Image, ImageDraw

    im = Image.fromarray(image, "RGB")
    draw = ImageDraw.Draw(im)
    for d in detections:
        b = d.box
        draw.rectangle([b.x, b.y, b.x2, b.y2], outline=(0, 255, 0))
        for k in range(5):
            x, y = d.landmarks[2 * k], d.landmarks[2 * k + 1]
            draw.ellipse([x - 1.5, y - 1.5, x + 1.5, y + 1.5], fill=(255, 0, 0))
    im.save(path)


def _detect_local(model, args):
    def run(path):
        start = time.perf_counter()
        try:
            image = read_image(path)
        except (ImageDecodeError, FileNotFoundError) as exc:
            return path, None, str(exc), 0.0
        dets = detect(model, image, args.thresholds, min_face=args.min_face)
        if args.draw:
            Path(args.draw).mkdir(parents=True, exist_ok=True)
            draw_detections(image, dets, Path(args.draw) / f"{path.stem}.png")
        return path, image_document(str(path), dets), None, time.perf_counter() - start
    return run


def _detect_remote(args):
    import httpx

    client = httpx.Client(base_url=args.server, timeout=60.0)

    def run(path):
        start = time.perf_counter()
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            return path, None, str(exc), 0.0
        body = {"image_b64": base64.b64encode(raw).decode("ascii"), "name": str(path),
                "thresholds": list(args.thresholds), "min_face": args.min_face}
        resp = client.post("/detect", json=body)
        if resp.status_code != 200:
            return path, None, f"server returned {resp.status_code}: {resp.text}", 0.0
        doc = resp.json()
        doc.pop("seconds", None)
        return path, doc, None, time.perf_counter() - start
    return run


def cmd_detect(args) -> int:
    if args.server:
        run = _detect_remote(args)
    else:
        run = _detect_local(_load_model(args.model), args)
    inputs = _expand_inputs(args.input)
    if not inputs:
        raise UsageError("no input images")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    failed = 0
    jobs = max(1, args.jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        # map yields in input order regardless of completion order
        for path, doc, err, seconds in pool.map(run, inputs):
            if err is not None:
                failed += 1
                print(f"error: {path}: {err}", file=sys.stderr)
                continue
            print(f"{path}: {len(doc['detections'])} faces in {seconds * 1000:.1f} ms",
                  file=sys.stderr)
            text = json.dumps(doc)
            if args.out:
                (Path(args.out) / f"{Path(path).stem}.json").write_text(text + "\n")
            else:
                print(text)
    return EXIT_DECODE if failed else EXIT_OK


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = _load_model(args.model)
    scenes = _load_dataset(args.data)
    if not scenes:
        raise UsageError(f"dataset {args.data} is empty")
    report, _ = evaluate_model(model, scenes, args.thresholds, min_face=args.min_face)
    if args.out:
        csv_path, txt_path = write_report(report, args.out)
        log.info("wrote %s and %s", csv_path, txt_path)
    sys.stdout.write(format_summary(report.summary()))
    return EXIT_OK


# -- serve ----------------------------------------------------------------------

def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model = _load_model(args.model) if args.model else None
    uvicorn.run(create_app(model), host=args.host, port=args.port,
                log_level=os.environ.get("CASCADE_LOG", "error").lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="concurrent workers")
    common.add_argument("--config", default=None, help="key = value or JSON training config")

    parser = argparse.ArgumentParser(prog="cascadeface", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--faces", type=_range, default=(0, 3), help="min,max faces per image")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one stage or fine-tune e2e")
    p.add_argument("--stage", required=True,
                   choices=["12net", "24net", "48net", "e2e", "net12", "net24", "net48"])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--init", default=None, help="model holding earlier stages")
    p.add_argument("--resume", action="store_true", help="use --out as --init if it exists")
    p.add_argument("--trace", default=None, help="loss trace CSV (default <out>.trace.csv)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--keep-fraction", type=float, default=None)
    p.add_argument("--e2e-iterations", type=int, default=None)
    p.add_argument("--no-ohem", action="store_true")
    p.add_argument("--large-batch", action="store_true")
    p.add_argument("--all-heads", action="store_true",
                   help="e2e: add the 12net and 24net head losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="detect faces in images")
    p.add_argument("--model", default=None)
    p.add_argument("--input", nargs="+", required=True, help="images or directories")
    p.add_argument("--out", default=None, help="directory for per-image JSON")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--min-face", type=float, default=24.0)
    p.add_argument("--draw", default=None, help="directory for annotated copies")
    p.add_argument("--server", default=None, help="service URL; run as a thin client")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="score a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="directory for metrics.csv and metrics.txt")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    p.add_argument("--min-face", type=float, default=24.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--model", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "detect" and not args.server and not args.model:
        parser.error("detect needs --model or --server")
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
