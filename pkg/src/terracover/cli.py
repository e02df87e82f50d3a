"""``terracover`` command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs), 2 data error
raised by a library module (message prefixed with the module name).

Relative input paths that do not exist under the working directory are looked
up under ``$TERRACOVER_DATA_DIR`` when it is set. Every verb that takes
``--out`` writes a ``run.json`` there echoing its arguments and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, audit, dataset as ds, raster, report, trainer
from .errors import NetworkError, TerracoverError
from .metrics import ConfusionMatrix, segmentation_report
from .metrics import confusion as confusion_counts
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.gradcheck import TOLERANCE, run_gradcheck
from .nn.network import network_from_state
from .taxonomy import LEVELS, Taxonomy, default_taxonomy, load_taxonomy

DATA_ENV = "TERRACOVER_DATA_DIR"
BENCHMARK_CODES = ",".join(map(str, ds.BENCHMARK_CODES))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- argument helpers ------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {v}")
    return v


def _open_fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {v}")
    return v


def _level(text):
    v = int(text)
    if v not in LEVELS:
        raise argparse.ArgumentTypeError(f"level must be 1, 2 or 3, got {v}")
    return v


def _input_path(path, what="input"):
    """Resolve an input path, falling back to the data directory."""
    if path is None:
        return None
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_ENV):
        candidate = Path(os.environ[DATA_ENV]) / p
        if candidate.exists():
            p = candidate
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _taxonomy(args) -> Taxonomy:
    extra = getattr(args, "extra_classes", None)
    if extra:
        return load_taxonomy(extra_classes=_input_path(extra, "extra classes file").read_text())
    return default_taxonomy()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, args, extra: dict | None = None):
    meta = {"verb": args.verb, "version": __version__, "git": trainer.git_describe(),
            "args": {k: v for k, v in vars(args).items() if k != "func"}}
    if extra:
        meta.update(extra)
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def _level_of(net, taxonomy: Taxonomy) -> int:
    k = net.num_classes
    for level in LEVELS:
        if taxonomy.num_classes(level) == k:
            return level
    raise UsageError(f"checkpoint has {k} classes, which matches no taxonomy level")


def _load_net(args):
    state = load_checkpoint(_input_path(args.checkpoint, "checkpoint"))
    return network_from_state(state)


def _samples(manifest, split):
    return manifest.samples if split == "all" else manifest.split(split)


# --- verbs -----------------------------------------------------------------

def cmd_taxonomy(args):
    tax = _taxonomy(args)
    levels = [args.level] if args.level else list(LEVELS)
    for level in levels:
        print(f"level {level}: {tax.num_classes(level)} classes")
        for index, code, name in tax.legend_rows(level):
            print(f"  {index:>2}  {code:<4} {name}")
    if args.out:
        out = _out_dir(args)
        for level in levels:
            t = report.Table(f"Level {level} legend", ["index", "corine_code", "name"],
                             [list(r) for r in tax.legend_rows(level)])
            t.write(out, f"legend_l{level}")
        _write_run(out, args)


def cmd_tile(args):
    image = raster.load_image(_input_path(args.image, "image"))
    mask = raster.load_mask(_input_path(args.mask, "mask"))
    pairs = raster.tile_pair(image, mask, args.size)
    out = _out_dir(args)
    ids = raster.write_patches(pairs, out)
    rows, cols = image.shape[0] // args.size, image.shape[1] // args.size
    print(f"wrote {len(ids)} patch pairs ({rows} x {cols}) to {out}")
    _write_run(out, args, {"patches": len(ids), "grid": [rows, cols]})


def cmd_synth(args):
    tax = _taxonomy(args)
    codes = [int(c) for c in args.classes.split(",") if c.strip()]
    classes = [tax.code_to_index(c, 3) for c in codes]
    spec = ds.SyntheticSpec(size=args.size, num_classes=len(classes), classes=classes,
                            region_scale=args.region_scale, noise_std=args.noise_std,
                            seed=args.seed)
    image, mask = ds.generate_synthetic(spec)
    out = _out_dir(args)
    raster.save_image(out / "image.png", image)
    raster.save_mask(out / "mask.png", mask)
    print(f"wrote {args.size}x{args.size} synthetic pair with classes {codes} to {out}")
    _write_run(out, args, {"seed": args.seed, "class_indices": classes})


def cmd_dataset(args):
    tax = _taxonomy(args)
    out = _out_dir(args)
    if args.action == "build":
        if args.patches is None:
            raise UsageError("dataset build: --patches is required")
        exclusions = ds.read_exclusion_list(_input_path(args.exclude, "exclusion list")) \
            if args.exclude else []
        manifest = ds.build_manifest(_input_path(args.patches, "patch directory"), tax,
                                     exclusions, args.split, args.seed, args.min_pixels,
                                     threads=args.threads or 1)
        path = ds.write_manifest(manifest, out / "manifest.csv")
        ds.write_legends(tax, out)
        n_train = len(manifest.split("train"))
        print(f"{len(manifest.samples)} samples ({n_train} train, "
              f"{len(manifest.samples) - n_train} val) -> {path}")
        _write_run(out, args, {"seed": args.seed, "samples": len(manifest.samples)})
    else:
        if args.fraction is None or args.manifest is None:
            raise UsageError("dataset corrupt: --manifest and --fraction are required")
        manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
        tampered, ids = ds.corrupt_labels(manifest, args.fraction, args.seed, tax)
        path = ds.write_manifest(tampered, out / "manifest.csv")
        (out / "corrupted.txt").write_text("".join(f"{i}\n" for i in ids))
        print(f"corrupted {len(ids)} validation samples -> {path}")
        _write_run(out, args, {"seed": args.seed, "corrupted": ids})


def cmd_stats(args):
    tax = _taxonomy(args)
    manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
    levels = [args.level] if args.level else list(LEVELS)
    split = None if args.split == "all" else args.split
    table = report.stats_table(manifest, tax, levels, split)
    print(table.to_markdown())
    if args.out:
        out = _out_dir(args)
        table.write(out, "stats")
        _write_run(out, args)


def _train_config(args) -> trainer.TrainConfig:
    values = {}
    if args.config:
        values = trainer.parse_config_text(_input_path(args.config, "config").read_text())
    values["task"] = args.task
    for key in ("seed", "level", "threshold"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    return trainer.TrainConfig(**values)


def cmd_train(args):
    tax = _taxonomy(args)
    config = _train_config(args)
    manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
    encoder_from = _input_path(args.encoder_from or config.encoder_from, "encoder checkpoint")
    out = _out_dir(args)
    config.checkpoint = str(Path(args.checkpoint) if args.checkpoint else out / "model.lcun")
    if config.task == "classify":
        if encoder_from is not None:
            raise UsageError("--encoder-from applies to segment training only")
        net, log = trainer.train_classifier(config, manifest, tax)
    else:
        net, log = trainer.train_segmenter(config, manifest, tax, encoder_checkpoint=encoder_from)
    if not log.rows:
        save_checkpoint(config.checkpoint, net.state())
    trainer.write_run(out, config, log, {"verb": "train", "encoder_from": encoder_from})
    for r in log.rows:
        print(f"epoch {r.epoch} stage {r.stage} train_loss {r.train_loss:.4f} "
              f"val_loss {r.val_loss:.4f} metric {r.metric:.4f}")
    print(f"best epoch {log.best_epoch} metric {log.best_metric}; checkpoint {config.checkpoint}")


def cmd_eval(args):
    tax = _taxonomy(args)
    net = _load_net(args)
    level = _level_of(net, tax)
    manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
    samples = _samples(manifest, args.split)
    threshold = 0.5 if args.threshold is None else args.threshold
    ev = trainer.evaluate(net, samples, level, tax, threshold=threshold)
    out = _out_dir(args)
    if net.task == "classify":
        rep = ev.report
        tables = {"results": report.overall_table(rep, level),
                  "per_class": report.per_class_table(rep, tax, level),
                  "correlation": report.correlation_table(rep.support, rep.f1, "f1")}
        summary = {"f1": rep.overall_f1, "exact": rep.exact}
    else:
        rep = ev.report
        tables = {"segmentation": report.segmentation_table(rep, tax, level),
                  "correlation": report.correlation_table(rep.pixel_support, rep.iou, "iou")}
        summary = {"accuracy": rep.accuracy, "mean_iou": rep.mean_iou}
    for stem, table in tables.items():
        table.write(out, stem)
        print(table.to_markdown())
    _write_run(out, args, {"task": net.task, "level": level, "summary": summary})


def cmd_confusion(args):
    tax = _taxonomy(args)
    net = _load_net(args)
    if net.task != "segment":
        raise UsageError("confusion needs a segmentation checkpoint")
    net_level = _level_of(net, tax)
    target = args.level or net_level
    if target > net_level:
        raise UsageError(f"cannot refine level-{net_level} predictions to level {target}")
    manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
    data = trainer.load_arrays(_samples(manifest, args.split), tax, net_level)
    k = tax.num_classes(target)
    cm = ConfusionMatrix(np.zeros((k, k), np.int64))
    for start, logits in trainer.forward_batches(net, data.images, 8):
        truth = ds.lift_mask(data.masks[start:start + len(logits)], tax, net_level, target)
        pred = ds.lift_mask(trainer.argmax_masks(logits), tax, net_level, target)
        cm = cm + confusion_counts(truth, pred, k)
    out = _out_dir(args)
    table = report.confusion_table(cm, tax, target)
    table.write(out, f"confusion_l{target}")
    np.savetxt(out / f"confusion_l{target}_counts.txt", cm.counts, fmt="%d")
    print(table.to_markdown())
    rep = segmentation_report(cm)
    _write_run(out, args, {"level": target, "accuracy": rep.accuracy})


def cmd_audit(args):
    tax = _taxonomy(args)
    net = _load_net(args)
    level = _level_of(net, tax)
    manifest = ds.read_manifest(_input_path(args.manifest, "manifest"))
    threshold = 0.5 if args.threshold is None else args.threshold
    ranked = audit.rank_by_loss(net, _samples(manifest, args.split), level, tax, threshold)
    flagged, text = audit.flag_suspects(ranked, args.top_fraction, tax)
    out = _out_dir(args)
    audit.write_suspects(ranked, out / "ranking.csv")
    audit.write_suspects(ranked[:len(flagged)], out / "suspects.csv")
    (out / "suspects.txt").write_text(text)
    print(text, end="")
    extra = {"flagged": flagged}
    planted = manifest.meta.get("corrupted")
    if planted:
        extra["planted_recall"] = audit.planted_recall(flagged, planted)
        print(f"planted recall {extra['planted_recall']:.3f}")
    _write_run(out, args, extra)


def cmd_gradcheck(args):
    results = run_gradcheck(range(args.seed, args.seed + args.seeds))
    width = max(map(len, results))
    for kind, err in results.items():
        print(f"{kind:<{width}}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    if args.out:
        out = _out_dir(args)
        t = report.Table("Gradient check", ["kind", "max_relative_error"],
                         [[k, v] for k, v in results.items()])
        t.write(out, "gradcheck")
        _write_run(out, args, {"results": results})
    worst = max(results.values())
    if worst >= TOLERANCE:
        raise NetworkError(f"gradient check failed: max relative error {worst:.3e} "
                           f"exceeds {TOLERANCE}")


def cmd_report(args):
    inputs = [_input_path(p, "report input") for p in args.inputs]
    out = _out_dir(args)
    path = report.bundle(inputs, out / "report.md")
    print(f"wrote {path}")
    _write_run(out, args)


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: available cores)")
    common.add_argument("--extra-classes", help="file of extra 'code<TAB>name' level-3 rows")

    parser = _Parser(prog="terracover", parents=[common],
                     description="Land-cover label algebra, datasets, metrics and training.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser, metavar="verb")
    sub.required = True

    def verb(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = verb("taxonomy", cmd_taxonomy, "print the class hierarchy and write legends")
    p.add_argument("--level", type=_level)
    p.add_argument("--out")

    p = verb("tile", cmd_tile, "cut an image/mask pair into square patches")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--size", type=_positive_int, default=raster.PATCH_SIZE)
    p.add_argument("--out", required=True)

    p = verb("synth", cmd_synth, "generate a synthetic image/mask pair")
    p.add_argument("--size", type=_positive_int, default=1200)
    p.add_argument("--classes", default=BENCHMARK_CODES, help="comma-separated level-3 codes")
    p.add_argument("--region-scale", type=_positive_int, default=ds.BENCHMARK_REGION_SCALE)
    p.add_argument("--noise-std", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = verb("dataset", cmd_dataset, "build a manifest or plant label corruptions")
    p.add_argument("action", choices=("build", "corrupt"))
    p.add_argument("--patches", help="patch directory (build)")
    p.add_argument("--manifest", help="input manifest (corrupt)")
    p.add_argument("--exclude", help="exclusion list, one patch id per line")
    p.add_argument("--split", type=_open_fraction, default=0.8, help="train fraction")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--min-pixels", type=_positive_int, default=1)
    p.add_argument("--fraction", type=_open_fraction, help="share of val samples to corrupt")
    p.add_argument("--out", required=True)

    p = verb("stats", cmd_stats, "label cardinality and density per level")
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", type=_level)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--out")

    p = verb("train", cmd_train, "two-stage training of a classifier or U-Net")
    p.add_argument("task", choices=trainer.TASKS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--level", type=_level)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--checkpoint", help="where to save the best model (default OUT/model.lcun)")
    p.add_argument("--encoder-from", help="classifier checkpoint to initialise the encoder")
    p.add_argument("--out", required=True)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint on a split"),
                             ("confusion", cmd_confusion, "row-normalized pixel confusion"),
                             ("audit", cmd_audit, "rank samples by loss to find bad labels")):
        p = verb(name, func, text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("all", "train", "val"), default="val")
        p.add_argument("--threshold", type=float)
        p.add_argument("--out", required=True)
        if name == "confusion":
            p.add_argument("--level", type=_level)
        if name == "audit":
            p.add_argument("--top-fraction", type=_fraction, default=0.1)

    p = verb("gradcheck", cmd_gradcheck, "finite-difference check of every layer kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_positive_int, default=10)
    p.add_argument("--out")

    p = verb("report", cmd_report, "bundle the CSV tables under directories into markdown")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    threads = args.threads or os.cpu_count() or 1
    args.threads = threads
    try:
        with threadpool_limits(threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TerracoverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
