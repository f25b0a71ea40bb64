"""Command line entry point: ``notesurv <command> [--config FILE] [--seed N] [--out-dir DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import harness
from .dataset import DataError, save_dataset
from .metrics import write_report

log = logging.getLogger("notesurv")


def _config(args) -> tuple[harness.ExperimentConfig, dict]:
    overrides = {"seed": args.seed, "out_dir": args.out_dir, "data_path": args.data}
    config, grid = harness.load_config(args.config, args.profile, **overrides)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    return config, grid


def _split(config):
    data = harness.load_data(config)
    return harness.split(data, config.split_fraction, config.seed, config.stratify)


def _checkpoint(args, config) -> harness.FittedExperiment:
    path = Path(args.checkpoint or Path(config.out_dir) / "checkpoint.json")
    return harness.FittedExperiment.load(path)


def cmd_simulate(args):
    config, _ = _config(args)
    path = Path(config.out_dir) / "data.csv"
    save_dataset(harness.load_data(config), path)
    harness.update_manifest(config.out_dir, config, {"data": path})
    print(path)


def cmd_preprocess(args):
    config, _ = _config(args)
    train, test = _split(config)
    pre, train_p = harness.Preprocessor.fit(train, config.missing_threshold,
                                            config.impute_iterations, config.seed)
    out = Path(config.out_dir)
    paths = {"preprocess": out / "preprocess.json", "train": out / "train.csv",
             "test": out / "test.csv"}
    paths["preprocess"].write_text(json.dumps(pre.to_dict(), indent=2))
    save_dataset(train_p, paths["train"])
    save_dataset(pre.transform(test), paths["test"])
    harness.update_manifest(out, config, paths)
    print(paths["preprocess"])


def cmd_fit(args):
    config, _ = _config(args)
    train, _ = _split(config)
    fitted = harness.fit_experiment(train, config)
    path = fitted.save(Path(config.out_dir) / "checkpoint.json")
    harness.update_manifest(config.out_dir, config, {"checkpoint": path})
    print(path)


def cmd_evaluate(args):
    config, _ = _config(args)
    fitted = _checkpoint(args, config)
    _, test = _split(fitted.config)
    report = fitted.evaluate(test)
    path = write_report(report.to_dict(), Path(config.out_dir) / "metrics.json")
    harness.update_manifest(config.out_dir, config, {"metrics": path})
    print(json.dumps({"auc": report.auc, "c_index": report.c_index}))


def cmd_curves(args):
    config, _ = _config(args)
    fitted = _checkpoint(args, config)
    _, test = _split(fitted.config)
    path = harness.write_curves_for(fitted, test, Path(config.out_dir) / "curves.csv")
    harness.update_manifest(config.out_dir, config, {"curves": path})
    print(path)


def cmd_attention(args):
    config, _ = _config(args)
    fitted = _checkpoint(args, config)
    _, test = _split(fitted.config)
    path = harness.write_attention_for(fitted, test, Path(config.out_dir) / "attention.json")
    harness.update_manifest(config.out_dir, config, {"attention": path})
    print(path)


def cmd_cv(args):
    config, _ = _config(args)
    train, _ = _split(config)
    report = harness.cross_validate(train, config, workers=args.workers)
    path = write_report(report.to_dict(), Path(config.out_dir) / "cv.json")
    harness.update_manifest(config.out_dir, config, {"cv": path})
    print(f"{report.metric}: {report.mean:.4f} +/- {report.std:.4f}")


def cmd_grid(args):
    config, grid = _config(args)
    if not grid:
        raise ValueError("grid search needs a [grid] section in the config file")
    train, _ = _split(config)
    result = harness.grid_search(train, config, grid, workers=args.workers)
    path = write_report(result.to_dict(), Path(config.out_dir) / "grid.json")
    harness.update_manifest(config.out_dir, config, {"grid": path})
    print(f"best {result.best_report.metric}: {result.best_report.mean:.4f}")


def cmd_run(args):
    config, _ = _config(args)
    artifacts = harness.run_pipeline(config)
    for name, path in artifacts.items():
        print(f"{name}: {path}")


COMMANDS = {
    "simulate": (cmd_simulate, "write a synthetic cohort CSV"),
    "preprocess": (cmd_preprocess, "fit filter/imputer/standardizer on the train split"),
    "fit": (cmd_fit, "train a model on the train split and save a checkpoint"),
    "evaluate": (cmd_evaluate, "score a checkpoint on the test split"),
    "curves": (cmd_curves, "write survival/mortality/hazard curves for test records"),
    "attention": (cmd_attention, "dump attention maps for test notes"),
    "cv": (cmd_cv, "k-fold cross-validation on the train split"),
    "grid": (cmd_grid, "grid search over the [grid] section"),
    "run": (cmd_run, "full pipeline: split, fit, evaluate, emit artifacts"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="notesurv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--profile", choices=harness.profile_names(),
                       help="built-in hyperparameter profile")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--data", help="cohort CSV (default: synthetic cohort)")
        p.add_argument("--checkpoint", help="checkpoint path (default: <out-dir>/checkpoint.json)")
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=func)
    return parser


def _origin(err: BaseException) -> str:
    """Name of the innermost package module the error passed through."""
    pkg = Path(__file__).parent
    frames = [f for f in traceback.extract_tb(err.__traceback__)
              if Path(f.filename).parent == pkg]
    return Path(frames[-1].filename).stem if frames else "cli"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DataError, ValueError, KeyError, RuntimeError, OSError) as err:
        module = _origin(err)
        print(f"notesurv {args.command}: error ({module}): {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
