"""Command-line interface: gen-data, train, eval, predict, gradcheck.

Every failure prints exactly one line ``error: <kind>: <message>`` on stderr
and exits nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, load_run_config, parse_number, write_resolved
from .data import (CATEGORIES, PRESENT_SLOTS, SLOTS, AnnotationError, crop_and_resize, default_sigma,
                   generate_synthetic_dataset, load_dataset, prepare_samples, save_dataset)
from .evaluate import config_hash, decode_heatmaps, evaluate
from .gradsuite import CASES, run_suite
from .network import ConfigError, forward
from .rasters import RasterError, read_ppm, write_pgm, write_ppm
from .serialization import FormatError
from .tensor import ShapeError, Tensor
from .train import Trainer, TrainingError, load_checkpoint, resume_trainer, save_checkpoint

LOSS_LOG = "loss.log"
FINAL_CHECKPOINT = "final.ckpt"
LAST_GOOD_CHECKPOINT = "last_good.ckpt"
CHECKPOINT_DIR = "checkpoints"
REPORT_FILE = "eval_report.txt"

LEFT_COLOR = (255, 255, 0)  # yellow
RIGHT_COLOR = (255, 0, 0)  # red


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _fail(kind: str, message: str) -> None:
    raise CliError(kind, message)


# -- gen-data ----------------------------------------------------------------

def _parse_mix(text: str) -> tuple:
    try:
        mix = tuple(parse_number(v) for v in text.split(","))
    except ConfigError as exc:
        raise CliError("usage", f"--mix: {exc}") from exc
    if len(mix) != 3:
        _fail("usage", f"--mix needs 3 comma-separated proportions, got {text!r}")
    return mix


def cmd_gen_data(args) -> int:
    dataset = generate_synthetic_dataset(args.n, args.size, args.seed, _parse_mix(args.mix))
    save_dataset(args.out, dataset)
    counts = {c: sum(ann.category == c for _, ann in dataset) for c in CATEGORIES}
    print(f"wrote {len(dataset)} images to {args.out}")
    print(" ".join(f"{c}={counts[c]}" for c in CATEGORIES))
    return 0


# -- train -------------------------------------------------------------------

def _train_overrides(args) -> dict:
    return {
        "network.input_size": args.input_size, "network.backbone": args.backbone, "network.width": args.width,
        "network.k": args.k, "optimizer.kind": args.optimizer, "optimizer.learning_rate": args.lr,
        "optimizer.momentum": args.momentum, "optimizer.weight_decay": args.weight_decay,
        "optimizer.epochs": args.epochs, "optimizer.batch_size": args.batch_size, "optimizer.seed": args.seed,
        "data.path": args.data, "data.sigma": args.sigma, "data.crop": args.crop,
        "run.out": args.out, "run.steps": args.steps, "run.checkpoint_every": args.checkpoint_every,
        "run.resume": args.resume,
    }


def _data_meta(cfg: RunConfig) -> dict:
    sigma = cfg.data.sigma if cfg.data.sigma is not None else default_sigma(cfg.network.input_size)
    return {"sigma": sigma, "crop": cfg.data.crop}


def _load_samples(path, size: int, sigma: float, crop: bool, category=None) -> list:
    if not path:
        _fail("config", "no dataset given (use --data or [data] path)")
    dataset = load_dataset(path)
    if category is not None:
        dataset = [(img, ann) for img, ann in dataset if ann.category == category]
    return prepare_samples(dataset, size, sigma, crop)


def _read_loss_log(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln and int(ln.split()[0]) <= upto]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    if not cfg.run.out:
        _fail("config", "no output directory given (use --out or [run] out)")
    out = Path(cfg.run.out)
    (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    meta = _data_meta(cfg)
    samples = _load_samples(cfg.data.path, cfg.network.input_size, meta["sigma"], meta["crop"])

    if cfg.run.resume:
        trainer = resume_trainer(cfg.run.resume, samples)
        if trainer.net_config != cfg.network or trainer.opt_config != cfg.optimizer:
            _fail("config", f"checkpoint {cfg.run.resume} was trained with a different network/optimizer config")
        if trainer.extra_meta.get("data") != meta:
            _fail("config", f"checkpoint {cfg.run.resume} was trained with different sigma/crop settings")
    else:
        trainer = Trainer(cfg.network, cfg.optimizer, samples, {"data": meta})
    total = cfg.run.steps if cfg.run.steps is not None else trainer.total_steps

    log_path = out / LOSS_LOG
    lines = _read_loss_log(log_path, trainer.state.step)
    log_path.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    with open(log_path, "a", encoding="utf-8") as log:
        while trainer.state.step < total:
            try:
                loss = trainer.step()
            except TrainingError as exc:
                save_checkpoint(out / LAST_GOOD_CHECKPOINT, trainer)
                _fail("training", f"step {exc.step}: {exc}; last good state saved to {out / LAST_GOOD_CHECKPOINT}")
            step = trainer.state.step
            log.write(f"{step} {loss!r}\n")
            if step % cfg.run.checkpoint_every == 0:
                log.flush()
                save_checkpoint(out / CHECKPOINT_DIR / f"step_{step:06d}.ckpt", trainer)
    save_checkpoint(out / FINAL_CHECKPOINT, trainer)
    print(f"trained {trainer.state.step} steps; final checkpoint {out / FINAL_CHECKPOINT}")
    return 0


# -- eval --------------------------------------------------------------------

def _checkpoint_data_meta(ckpt) -> dict:
    meta = (ckpt.meta.get("extra") or {}).get("data")
    if meta is None:
        return {"sigma": default_sigma(ckpt.network_config.input_size), "crop": True}
    return meta


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.build_network()
    meta = _checkpoint_data_meta(ckpt)
    samples = _load_samples(args.data, net.config.input_size, meta["sigma"], meta["crop"], args.category)
    if not samples:
        _fail("data", f"no images of category {args.category!r} in {args.data}")
    dataset_id = Path(args.data).name + (f"[{args.category}]" if args.category else "")
    chash = config_hash({"network": ckpt.meta["network"], "optimizer": ckpt.meta["optimizer"], "data": meta})
    report = evaluate(net, samples, dataset_id, chash, literal=args.literal_area, batch_size=args.batch_size)
    print(report.table())
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(report.key_values(), encoding="utf-8")
    return 0


# -- predict -----------------------------------------------------------------

def _mark(canvas: np.ndarray, x: float, y: float, color) -> None:
    h, w, _ = canvas.shape
    cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
    r = max(1, min(h, w) // 48)
    canvas[max(0, cy - r):min(h, cy + r + 1), max(0, cx - r):min(w, cx + r + 1)] = color


def _predict_inputs(args) -> list:
    """(image_id, image, bbox or None, category or None) per input."""
    items = []
    if args.data:
        for image, ann in load_dataset(args.data):
            items.append((ann.image_id, image, ann.bbox, ann.category))
    for path in args.images:
        items.append((Path(path).stem, read_ppm(path), None, None))
    if not items:
        _fail("usage", "predict: no input images (give PPM paths or --data)")
    return items


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.build_network()
    size = net.config.input_size
    crop = _checkpoint_data_meta(ckpt)["crop"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, image, bbox, category in _predict_inputs(args):
        h, w, _ = image.shape
        box = bbox if (bbox is not None and crop) else (0.0, 0.0, float(w), float(h))
        arr, transform = crop_and_resize(image, box, size)
        heatmaps = forward(net, Tensor(arr[None]), "eval").data
        coords = decode_heatmaps(heatmaps)[0]
        xs, ys = transform.inverse(coords[:, 0], coords[:, 1])
        marked = PRESENT_SLOTS[category] if category else set(range(len(SLOTS)))
        lines = ["slot x y marked"]
        canvas = image.copy()
        for i, name in enumerate(SLOTS):
            lines.append(f"{name} {float(xs[i])!r} {float(ys[i])!r} {int(i in marked)}")
            if i in marked:
                _mark(canvas, xs[i], ys[i], LEFT_COLOR if name.startswith("L.") else RIGHT_COLOR)
        (out / f"{image_id}.coords.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_ppm(out / f"{image_id}.overlay.ppm", canvas)
        if args.dump_heatmaps:
            for i, name in enumerate(SLOTS):
                gray = np.floor(np.clip(heatmaps[0, i], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
                write_pgm(out / f"{image_id}.heatmap.{name}.pgm", gray)
        print(f"{image_id}: {len(marked)} landmarks marked")
    return 0


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    print(f"eps = {args.eps!r}")
    print(f"tol = {args.tol!r}")
    failed = []
    for name, err in run_suite(args.eps, args.case or CASES, args.seed):
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:<20s} {err:.3e} {status}", flush=True)
        if err > args.tol:
            failed.append(name)
    if failed:
        _fail("gradcheck", f"{len(failed)} case(s) exceed tol {args.tol!r}: {', '.join(failed)}")
    print("all cases within tolerance")
    return 0


# -- wiring ------------------------------------------------------------------

def _positive_float(text: str) -> float:
    try:
        value = parse_number(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glefld", description="Fashion landmark detection with global-local embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic garment dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", default="0.4,0.4,0.2", help="full_body,upper,lower proportions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a landmark network")
    p.add_argument("--config", help="INI file with [network] [optimizer] [data] [run] sections")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--input-size", type=int)
    p.add_argument("--backbone", choices=["toy", "paper_vgg"])
    p.add_argument("--width", type=parse_number, help="channel-width multiplier, e.g. 1/8")
    p.add_argument("--k", type=int, help="GLE stack depth")
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"])
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="total steps (overrides epochs)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=_positive_float, help="target Gaussian sigma in pixels")
    p.add_argument("--crop", action=argparse.BooleanOptionalAction, default=None, help="crop to the bbox")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="normalized-error report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help=f"directory for {REPORT_FILE} (default: the checkpoint's directory)")
    p.add_argument("--category", choices=list(CATEGORIES))
    p.add_argument("--literal-area", action="store_true", help="divide pixel distance by height*width")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write coordinates and overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="*", help="PPM images")
    p.add_argument("--data", help="dataset directory (uses its bboxes and categories)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-heatmaps", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the composed network")
    p.add_argument("--eps", type=_positive_float, default=1e-5)
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", choices=list(CASES), help="restrict to these cases")
    p.set_defaults(func=cmd_gradcheck)
    return parser


_ERROR_KINDS = (
    (AnnotationError, "data"), (RasterError, "data"), (FormatError, "checkpoint"), (ConfigError, "config"),
    (ShapeError, "shape"), (TrainingError, "training"), (OSError, "io"), (ValueError, "value"),
)


def _threads() -> int:
    raw = os.environ.get("GLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        _fail("config", f"GLE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except CliError as exc:
        kind, message = exc.kind, str(exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        kind = next((k for cls, k in _ERROR_KINDS if isinstance(exc, cls)), "internal")
        message = f"{type(exc).__name__}: {exc}" if kind == "internal" else str(exc)
        if isinstance(exc, OSError) and exc.filename is not None:
            message = f"{exc.strerror or exc}: {exc.filename}"
    print(f"error: {kind}: {' '.join(message.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
