"""Command-line entry point: train a variant grid, evaluate, attack, saliency,
gradient audit and the 1-D detector demo.

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
5 numeric failure (non-finite values or a failed gradient audit).
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis as A
from .config import RunConfig, parse_text
from .data import TEMPLATE_1D, Dataset, load_cifar10, subset, synth_1d_signal
from .errors import CheckpointError, ConfigError, DataFormatError, NonFiniteError
from .models import LayerVariantConfig, build_model
from .train import evaluate, restore_model, train

log = logging.getLogger("sharpcos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4, 5
SNAPSHOT = "config.resolved"
SUMMARY_HEADER = ["architecture", "layer", "activation", "pooling", "normalization", "p_mode",
                  "seed", "known_degraded", "parameter_count", "best_test_acc",
                  "final_test_acc", "train_time_s", "eval_time_s"]


class GradcheckFailed(Exception):
    pass


def _claim(path: Path, force: bool) -> Path:
    """Refuse to clobber an existing artifact unless ``force``; clear it if forced."""
    if path.exists():
        if not force:
            raise ConfigError(f"{path} exists; pass --force to overwrite", key="--out")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


def _write_snapshot(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.{SNAPSHOT}").write_text(cfg.snapshot(), encoding="utf-8")


def _dtype(cfg: RunConfig):
    return np.dtype(cfg["model.dtype"])


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Load the archive and draw the configured train/test subsets."""
    if not cfg["data.dir"]:
        raise DataFormatError("no data directory given (use --data-dir or data.dir)")
    train_ds, test_ds = load_cifar10(cfg["data.dir"])
    out = []
    for ds, key in ((train_ds, "data.train_size"), (test_ds, "data.test_size")):
        n = cfg[key]
        if n <= 0 or n >= len(ds):
            out.append(ds)
            continue
        try:
            out.append(subset(ds, n, cfg["data.stratified"], cfg["data.seed"]))
        except ValueError as exc:
            raise ConfigError(str(exc), key=key) from None
    return out[0], out[1]


# -- train -------------------------------------------------------------------------
def run_cell(snapshot: str, variant: dict, out_dir: str, train_ds: Dataset,
             test_ds: Dataset) -> list[str]:
    """Train one grid cell into ``out_dir`` and return its summary row."""
    cfg = RunConfig.load()
    cfg.values.update(parse_text(snapshot))
    vcfg = LayerVariantConfig.from_dict(variant)
    model, desc = build_model(vcfg, dtype=_dtype(cfg))
    if cfg["data.standardize"]:
        model.set_input_stats(train_ds.images.mean(axis=(0, 2, 3)),
                              train_ds.images.std(axis=(0, 2, 3)))
    out = Path(out_dir)
    out.mkdir(parents=True)
    (out / SNAPSHOT).write_text(snapshot, encoding="utf-8")
    log.info("training %s (%d parameters)", vcfg.name, desc.parameter_count)
    result = train(model, train_ds, test_ds, cfg.train_config(), desc, out)
    recs = result.records

    def fmt(v):
        return "" if v is None else repr(float(v))

    return [vcfg.arch_family, vcfg.layer_kind, vcfg.activation, vcfg.pooling,
            vcfg.normalization, vcfg.p_mode, str(vcfg.seed), str(vcfg.known_degraded).lower(),
            str(desc.parameter_count), fmt(result.best_test_acc),
            fmt(recs[-1].test_acc if recs else None),
            fmt(np.mean([r.train_time_s for r in recs]) if recs else None),
            fmt(np.mean([r.eval_time_s for r in recs]) if recs else None)]


def _cell_snapshot(cfg: RunConfig, v: LayerVariantConfig) -> str:
    """Resolved config narrowed to a single grid cell."""
    cell = RunConfig(dict(cfg.values))
    cell["seed"] = v.seed
    cell["grid.seeds"] = [v.seed]
    for key, value in (("layer_kind", v.layer_kind), ("activation", v.activation),
                       ("pooling", v.pooling), ("normalization", v.normalization)):
        cell[f"grid.{key}"] = [value]
    return cell.snapshot()


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    variants = cfg.variants()
    if not variants:
        raise ConfigError("the grid is empty", key="grid")
    summary = out / "summary.csv"
    cell_dirs = [out / v.name for v in variants]
    for path in [summary, out / SNAPSHOT, *cell_dirs]:
        _claim(path, args.force)
    train_ds, test_ds = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(cfg.snapshot(), encoding="utf-8")

    jobs = [(_cell_snapshot(cfg, v), v.to_dict(), str(d)) for v, d in zip(variants, cell_dirs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_cell, *job, train_ds, test_ds) for job in jobs]
            rows = [f.result() for f in futures]
    else:
        rows = [run_cell(*job, train_ds, test_ds) for job in jobs]

    with open(summary, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)
    print(f"wrote {len(rows)} summary rows to {summary}")
    return EXIT_OK


# -- checkpoint consumers -------------------------------------------------------------
def _restore(args, cfg: RunConfig):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required", key="--checkpoint")
    return restore_model(args.checkpoint, dtype=_dtype(cfg))


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, _, _ = _restore(args, cfg)
    out = Path(args.out)
    target = out / "evaluation.csv"
    _claim(target, args.force)
    _claim(out / f"evaluate.{SNAPSHOT}", args.force)
    _, test_ds = load_data(cfg)
    loss, acc = evaluate(model, test_ds, dtype=_dtype(cfg))
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out, cfg, "evaluate")
    target.write_text(f"checkpoint,test_loss,test_acc,n_eval\n"
                      f"{args.checkpoint},{loss!r},{acc!r},{len(test_ds)}\n", encoding="utf-8")
    print(f"test_loss={loss:.4f} test_acc={acc:.4f} n={len(test_ds)}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    attack_cfg = cfg.attack_config()
    model, _, _ = _restore(args, cfg)
    out = Path(args.out)
    target = out / "robustness.csv"
    _claim(target, args.force)
    _claim(out / f"attack.{SNAPSHOT}", args.force)
    _, test_ds = load_data(cfg)
    n_eval = min(cfg["attack.n_eval"], len(test_ds))
    curve = A.robustness_sweep(model, test_ds, attack_cfg, n_eval=n_eval, seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out, cfg, "attack")
    A.write_sweep_csv(curve, n_eval, target)
    for eps, acc in curve:
        print(f"eps={eps:.4f} accuracy={acc:.4f}")
    return EXIT_OK


def cmd_saliency(cfg: RunConfig, args) -> int:
    model, _, _ = _restore(args, cfg)
    out = Path(args.out)
    stems = [out / f"saliency_{i}" for i in args.indices]
    for stem in stems:
        _claim(stem.with_suffix(".pgm"), args.force)
        _claim(stem.with_suffix(".txt"), args.force)
    _claim(out / f"saliency.{SNAPSHOT}", args.force)
    _, test_ds = load_data(cfg)
    if any(not 0 <= i < len(test_ds) for i in args.indices):
        raise ConfigError(f"image index out of range [0, {len(test_ds)})", key="--indices")
    _write_snapshot(out, cfg, "saliency")
    dtype = _dtype(cfg)
    for i, stem in zip(args.indices, stems):
        image = test_ds.images[i].astype(dtype)
        model.eval()
        cls = int(np.argmax(model(image[None]).data[0]))
        smap = A.saliency_map(model, image, cls, image_id=i, reduction=cfg["saliency.reduction"])
        A.write_saliency(smap, stem)
        print(f"image {i}: class={cls} sparsity={A.sparsity_index(smap):.4f}")
    return EXIT_OK


# -- self-contained commands ------------------------------------------------------------
def cmd_gradcheck(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    target = _claim(out / "gradcheck.txt", args.force)
    _claim(out / f"gradcheck.{SNAPSHOT}", args.force)
    report = A.gradcheck_suite(instances=args.instances, seed=cfg["seed"])
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    _write_snapshot(out, cfg, "gradcheck")
    target.write_text(text, encoding="utf-8")
    if not report.passed:
        raise GradcheckFailed("gradient audit failed")
    return EXIT_OK


def cmd_demo1d(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    target = _claim(out / "demo1d.csv", args.force)
    _claim(out / f"demo1d.{SNAPSHOT}", args.force)
    signal, _, offset = synth_1d_signal("feature_present", cfg["demo.sigma"], cfg["demo.seed"])
    conv = A.detector_response_1d(TEMPLATE_1D, signal, "conv")
    scs = A.detector_response_1d(TEMPLATE_1D, signal, "scs")
    _write_snapshot(out, cfg, "demo1d")
    lines = ["position,conv,scs"] + [f"{i},{float(c)!r},{float(s)!r}"
                                    for i, (c, s) in enumerate(zip(conv, scs))]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"template offset={offset} conv argmax={int(np.argmax(conv))} "
          f"scs argmax={int(np.argmax(scs))} scs max={scs.max():.6f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "attack": cmd_attack,
            "saliency": cmd_saliency, "gradcheck": cmd_gradcheck, "demo1d": cmd_demo1d}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--data-dir", help="directory holding the CIFAR-10 binary batches")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel grid cells (train only)")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sharpcos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train every cell of the variant grid")
    for name, text in (("evaluate", "test accuracy of a checkpoint"),
                       ("attack", "PGD robustness sweep of a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("saliency", parents=[common], help="saliency maps for test images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--indices", type=int, nargs="+", required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--instances", type=int, default=20)
    sub.add_parser("demo1d", parents=[common], help="1-D conv vs scs detector responses")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.data_dir is not None:
        cfg["data.dir"] = args.data_dir
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1", key="--jobs")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"numeric failure in {exc.where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GradcheckFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
