"""``eavit`` command line: preprocess, train, eval, predict, bench-attn.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dsp, metrics
from .bench import bench_attention, scaling_ratio
from .train import (
    CheckpointError,
    ConfigError,
    DataError,
    ImageSet,
    NumericError,
    Trainer,
    fit,
    load_checkpoint,
    load_config,
    log_history,
    parse_assignments,
    predict_logits,
    split_dataset,
    thread_limit,
    write_config,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--reproducible", action="store_true",
                        help="single-threaded, deterministic reductions")
    common.add_argument("--checkpoint", type=Path, help="checkpoint file to load")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="eavit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="WAV tree -> mel images + manifest")
    p.add_argument("root", type=Path, help="directory of <genre>/<track>.wav")

    sub.add_parser("train", parents=[common], help="train (or resume with --checkpoint)")

    p = sub.add_parser("eval", parents=[common], help="metrics and confusion matrix for a split")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--track-vote", action="store_true", help="score whole tracks by majority vote")
    p.add_argument("--plots", action="store_true", help="also write SVG figures")

    p = sub.add_parser("predict", parents=[common], help="genre of WAV files, per segment and per track")
    p.add_argument("files", nargs="+", type=Path)

    p = sub.add_parser("bench-attn", parents=[common], help="time external vs self attention")
    p.add_argument("--tokens", default="128,256,512")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--batch", type=int, default=2)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _threads(args) -> int | None:
    if args.reproducible:
        return 1
    env = os.environ.get("EAVIT_THREADS")
    return int(env) if env and env.isdigit() and int(env) > 0 else None


def _require(args, name):
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"--{name} is required for {args.command}")
    return value


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = args.out or Path("data")
    workers = 1 if args.reproducible else dsp.worker_count()
    rep = dsp.preprocess_dataset(args.root, out, cfg.dsp, workers=workers)
    print(f"{len(rep.rows)} images from {len(rep.class_names)} genres -> {out / 'manifest.csv'}")
    for path, err in rep.skipped:
        print(f"skipped {path}: {err}", file=sys.stderr)
    if rep.skipped:
        print(f"{len(rep.skipped)} file(s) skipped", file=sys.stderr)
        return EXIT_DATA
    return 0


def _datasets(cfg, manifest):
    rows = dsp.read_manifest(manifest)
    index = split_dataset(rows, cfg.data.split_strategy, cfg.data.split_ratios, cfg.train.seed)
    root = Path(manifest).parent
    return index, root


def cmd_train(args) -> int:
    if args.checkpoint is not None:
        if args.config is not None:
            raise UsageError("--config cannot be combined with --checkpoint; the checkpoint carries its config")
        extra = parse_assignments(args.overrides)
        if set(extra) - {"epochs"}:
            raise UsageError("only epochs=N may be overridden when resuming")
        trainer = load_checkpoint(args.checkpoint)
        if "epochs" in extra:
            trainer.config.train.epochs = extra["epochs"]
        cfg = trainer.config
    else:
        cfg = _config(args)
        trainer = None
    if not cfg.data.manifest:
        raise UsageError("config key 'manifest' is required for train")
    index, root = _datasets(cfg, cfg.data.manifest)
    train_set = ImageSet.load(index, "train", root)
    val_set = ImageSet.load(index, "val", root)
    if trainer is None:
        trainer = Trainer.create(cfg)
    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    fit(trainer, train_set, val_set, out)
    log_history(trainer.history, out / "history.csv")
    last = trainer.history[-1]
    print(f"epoch {last['epoch']}: train_acc {last['train_acc']:.4f} val_acc {last['val_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    trainer = load_checkpoint(_require(args, "checkpoint"))
    cfg = trainer.config
    manifest = cfg.data.manifest
    for ov in args.overrides:
        if ov.startswith("manifest="):
            manifest = ov.split("=", 1)[1]
    index, root = _datasets(cfg, manifest)
    data = ImageSet.load(index, args.split, root)
    if len(data) == 0:
        raise DataError(f"split {args.split!r} is empty")
    names = _class_names(manifest, cfg.model.classes)
    probs = _softmax(predict_logits(trainer.model, data.pixels, cfg.train.batch_size))
    if args.track_vote:
        tracks, preds = metrics.track_vote(probs, data.track_ids)
        first = {t: lab for t, lab in zip(data.track_ids, data.labels)}
        labels = [first[t] for t in tracks]
    else:
        preds, labels = probs.argmax(axis=1), data.labels
    cm = metrics.confusion(preds, labels, cfg.model.classes, names)
    rep = metrics.report(cm)
    out = args.out or Path("eval")
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", rep)
    metrics.write_confusion_csv(out / "confusion.csv", cm)
    if args.plots:
        metrics.plot_confusion(out / "confusion.svg", cm)
        if trainer.history:
            metrics.plot_curves(out / "curves.svg", trainer.history)
    unit = "tracks" if args.track_vote else "segments"
    print(f"accuracy {rep.accuracy:.4f}  macro-F1 {rep.macro_f1:.4f}  ({cm.total} {unit})")
    return 0


def _class_names(manifest, classes: int) -> list[str]:
    names = dsp.read_class_names(manifest) if manifest else list(dsp.GTZAN_GENRES)
    return (names + [str(i) for i in range(len(names), classes)])[:classes]


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cmd_predict(args) -> int:
    trainer = load_checkpoint(_require(args, "checkpoint"))
    cfg = trainer.config
    names = _class_names(cfg.data.manifest, cfg.model.classes)
    for path in args.files:
        clip = dsp.load_wav(path)
        images = dsp.clip_to_images(clip, cfg.dsp, path.stem)
        probs = _softmax(predict_logits(trainer.model, np.stack([im.pixels for im in images])))
        for i, p in enumerate(probs):
            k = int(p.argmax())
            print(f"{path}\tsegment {i}\t{names[k]}\t{p[k]:.4f}")
        _, (winner,) = metrics.track_vote(probs, [path.stem] * len(probs))
        votes = int((probs.argmax(axis=1) == winner).sum())
        print(f"{path}\ttrack\t{names[winner]}\t{probs[:, winner].mean():.4f}\t{votes}/{len(probs)} segments")
    return 0


def cmd_bench(args) -> int:
    try:
        tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --tokens {args.tokens!r}") from exc
    if not tokens or min(tokens) <= 0:
        raise UsageError("--tokens needs positive integers")
    cfg = _config(args)
    m = cfg.model
    rows = bench_attention(tokens, runs=args.runs, dim=m.projection_dim, heads=m.heads,
                           memory_size=m.memory_size, batch=args.batch, seed=cfg.train.seed)
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_attn.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "N", "median_ms"])
        w.writerows([k, n, f"{ms:.4f}"] for k, n, ms in rows)
    for k, n, ms in rows:
        print(f"{k},{n},{ms:.4f}")
    if len(tokens) > 1:
        for kind in ("external", "self"):
            ratio = scaling_ratio(rows, kind)
            print(f"# {kind} ratio {max(tokens)}/{min(tokens)} tokens: {ratio:.2f}", file=sys.stderr)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench-attn": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit(_threads(args)):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"eavit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"eavit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, dsp.AudioError, OSError) as exc:
        print(f"eavit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
