"""Command-line entry point.

Every subcommand prints JSON lines on stdout and writes figures next to its
other outputs.  Exit codes: 0 success, 1 contract/config/format errors,
2 non-finite loss during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig
from .dataset import load_clip, load_manifest, make_split
from .errors import ConfigError, FormatError, NaNLossError
from .gradsuite import SUITE, run_suite

log = logging.getLogger("objvid")

EXIT_OK, EXIT_CONTRACT, EXIT_NAN = 0, 1, 2


def _emit(record: dict) -> None:
    print(json.dumps(record, default=float), flush=True)


def _load_trainer(args):
    from .train import Trainer

    overrides = {}
    manifest = None
    if args.manifest:
        overrides["manifest"] = args.manifest
        manifest = load_manifest(args.manifest)
    return Trainer.from_checkpoint(args.ckpt, manifest, **overrides)


def cmd_train(args) -> int:
    from .plotting import plot_loss_curves
    from .train import train

    config = TrainConfig.from_json(args.config)
    if args.out:
        config.out_dir = args.out
    if args.epochs is not None:
        config.epochs = args.epochs
    out = Path(config.out_dir)
    history: list[dict] = []

    def on_record(rec):
        if "step" in rec:
            history.append(rec)
            if args.verbose:
                _emit(rec)
        else:
            _emit(rec)

    try:
        trainer = train(config, out_dir=out, on_record=on_record)
    except NaNLossError as exc:
        out.mkdir(parents=True, exist_ok=True)
        dump = {"error": str(exc), "step": exc.step, "batch_ids": exc.batch_ids}
        with open(out / "nan_dump.json", "w") as fh:
            json.dump(dump, fh, indent=1)
        _emit(dump)
        return EXIT_NAN
    plot_loss_curves(history, out / "loss_curves.png")
    metrics = trainer.evaluate("val", segmentation=not args.no_seg)
    metrics["train_accuracy"] = trainer.evaluate("train", segmentation=False)["accuracy"]
    _emit({"final": metrics, "checkpoint": str(out / "checkpoint"), "step": trainer.step})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_norms

    trainer = _load_trainer(args)
    metrics = trainer.evaluate(args.split, details=True)
    fg, bg = metrics.pop("fg_norms", None), metrics.pop("bg_norms", None)
    clips = metrics.pop("clips", [])
    for c in clips:
        _emit(c)
    if fg is not None:
        out = Path(args.out) if args.out else Path(args.ckpt)
        plot_norms(fg, bg, out / f"norms_{args.split}.png")
    _emit({"split": args.split, **metrics})
    return EXIT_OK


def cmd_segment(args) -> int:
    from .plotting import plot_mask_overlay
    from .segmentation import binarize, evaluate_clip, export_masks

    trainer = _load_trainer(args)
    data = None
    for split in (trainer.train_data, trainer.val_data):
        idx = [i for i, c in enumerate(split.clips) if c.clip_id == args.clip]
        if idx:
            data, i = split, idx[0]
            break
    if data is None:
        raise ConfigError(f"clip {args.clip!r} is not in the manifest")
    clip = data.clips[i]
    _, attn, _ = trainer.predict(type(data)([clip]))
    frames = load_clip(trainer.manifest, trainer.manifest.entry(args.clip)).frames
    masks = binarize(attn[0], clip.H, clip.W, frames.shape[2], frames.shape[3])
    score = evaluate_clip(masks, clip.gt_masks) if clip.gt_masks is not None else None
    out = export_masks(masks, args.out, args.clip, score)
    plot_mask_overlay(frames, masks.assignments, out / f"{args.clip}_overlay.png", gt=clip.gt_masks,
                      n_slots=masks.n_slots)
    rec = {"clip_id": args.clip, "out": str(out)}
    if score is not None:
        rec.update({"J": score.J, "F": score.F, "JF": score.JF})
    _emit(rec)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        reports = run_suite(args.module, seed=args.seed)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    ok = True
    for name, rep in reports.items():
        _emit({"module": name, "max_rel_err": rep.worst, "tol": rep.tol, "passed": rep.passed})
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_CONTRACT


def cmd_gen_data(args) -> int:
    m = make_split(args.clips, args.classes, args.seed, out_dir=args.out, frames=args.frames,
                   canvas=args.canvas)
    counts = {s: len(m.split(s)) for s in ("train", "val")}
    _emit({"manifest": str(Path(args.out) / "manifest.json"), "clips": len(m.clips), **counts,
           "classes": m.classes})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objvid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="also print every training step")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the adaptation head")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-seg", action="store_true", help="skip segmentation metrics in the final eval")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy, zero-shot J&F and norm ratio of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--manifest", help="override the manifest recorded in the checkpoint")
    e.add_argument("--out", help="figure directory (default: the checkpoint directory)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="export slot masks for one clip")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_segment)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every trainable module")
    g.add_argument("--module", action="append", help=f"one of {', '.join(SUITE)} (repeatable)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="generate the synthetic moving-shapes corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--clips", type=int, default=60)
    d.add_argument("--seed", type=int, default=7)
    d.add_argument("--classes", type=int, default=6)
    d.add_argument("--frames", type=int, default=8)
    d.add_argument("--canvas", type=int, default=64)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, which would read as a NaN abort
        return EXIT_CONTRACT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
