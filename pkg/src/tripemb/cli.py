"""Command-line entry point: ``tripemb {gen-data,train,eval,embed,grad-check}``.

Exit codes: 0 success, 2 usage or configuration problem (including unreadable
data or weights), 3 training failure, 1 failed gradient check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

from . import data, experiment, gradcheck, nn
from .errors import ConfigurationError, DataError, SamplingError, TrainingError, UsageError
from .nn import ModelConfig

log = logging.getLogger("tripemb")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_TRAINING = 0, 1, 2, 3

# keys of the train config file besides the TrainConfig fields
RUN_KEYS = {"n_runs": 10, "triplets_per_scheme": 5000, "eval_seed": None, "jobs": 1}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(experiment.TrainConfig)} - {"model"}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# config resolution

def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(raw) - TRAIN_KEYS - set(RUN_KEYS) - {"model"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    model = raw.get("model", {})
    if not isinstance(model, dict):
        raise ConfigurationError("'model' must be an object")
    unknown = set(model) - MODEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
    return raw


def resolve_train_config(args, image_shape: tuple[int, int]) -> tuple[experiment.TrainConfig, dict]:
    """Merge defaults, the config file and command-line flags (flags win)."""
    raw = load_config_file(args.config) if args.config else {}
    model = dict(raw.get("model", {}))
    for flag, key in (("schedule", "filter_schedule"), ("layers", "num_layers"), ("embed_dim", "embed_dim")):
        if getattr(args, flag) is not None:
            model[key] = getattr(args, flag)
    for key, size in zip(("input_height", "input_width"), image_shape):
        if model.setdefault(key, size) != size:
            raise ConfigurationError(f"config {key}={model[key]} but the images have {size}")
    train = {k: raw[k] for k in TRAIN_KEYS if k in raw}
    for flag, key in (("sampler", "sampler"), ("loss", "loss"), ("epochs", "max_epochs"),
                      ("patience", "patience"), ("triplets_per_epoch", "triplets_per_epoch"),
                      ("seed", "seed")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    run = {k: raw.get(k, v) for k, v in RUN_KEYS.items()}
    for flag in ("n_runs", "triplets_per_scheme", "eval_seed", "jobs"):
        if getattr(args, flag) is not None:
            run[flag] = getattr(args, flag)
    try:
        config = experiment.TrainConfig(model=ModelConfig.from_dict(model), **train)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    for key in ("n_runs", "triplets_per_scheme", "jobs"):
        if not isinstance(run[key], int) or run[key] < 1:
            raise ConfigurationError(f"{key} must be a positive integer")
    return config, run


def _load_data(path) -> tuple[dict, data.SplitSpec]:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return data.read_dataset(path)


def _image_shape(images: dict) -> tuple[int, int]:
    shapes = {im.pixels.shape[:2] for im in images.values()}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes: {sorted(shapes)}")
    return shapes.pop()


def _load_weights_for(path, images: dict) -> nn.NetworkParams:
    params = nn.load_weights(path)
    shape = _image_shape(images)
    cfg = params.config
    if (cfg.input_height, cfg.input_width) != shape:
        raise ConfigurationError(
            f"weights expect {cfg.input_height}x{cfg.input_width} images, data has {shape[0]}x{shape[1]}")
    return params


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    images = data.generate_synthetic(args.n, args.seed, args.height, args.width)
    split = data.split_dataset([im.id for im in images], args.split_seed if args.split_seed is not None else args.seed)
    data.write_dataset(out, images, split, fmt=args.format)
    _write_json(out / "config.json", {"command": "gen-data", "n": args.n, "seed": args.seed,
                                      "split_seed": split.seed, "height": args.height,
                                      "width": args.width, "format": args.format})
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    images, split = _load_data(args.data)
    config, run = resolve_train_config(args, _image_shape(images))
    out = Path(args.out)
    _prepare_out(out, args.force)
    _write_json(out / "config.json", {"command": "train", "data": str(args.data), **config.to_dict(), **run})
    result = experiment.run_experiment(config, images, split, n_runs=run["n_runs"],
                                       triplets_per_scheme=run["triplets_per_scheme"],
                                       eval_seed=run["eval_seed"], jobs=run["jobs"])
    experiment.write_reports(result, out)
    best = result.best
    if best is None:
        print("all runs aborted", file=sys.stderr)
        return EXIT_TRAINING
    nn.save_weights(best.result.best_params, out / "weights.bin")
    summary = result.summary()
    print(f"{len(result.completed)}/{run['n_runs']} runs completed; best run {best.run}")
    for scheme, value in summary["test_medians"].items():
        print(f"  {scheme:8s} median test violations: {'n/a' if value is None else f'{value:.2f}%'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    images, split = _load_data(args.data)
    params = _load_weights_for(args.weights, images)
    seed = split.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = [images[i] for i in split.test_ids]
    report = experiment.evaluate(params, test, args.triplets_per_scheme, seed)
    _write_json(out / "config.json", {"command": "eval", "weights": str(args.weights), "data": str(args.data),
                                      "seed": seed, "triplets_per_scheme": args.triplets_per_scheme})
    _write_json(out / "eval.json", report)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "violations"])
        for scheme, value in report.items():
            w.writerow([scheme, "" if value is None else repr(value)])
    for scheme, value in report.items():
        print(f"{scheme:8s} {'n/a' if value is None else f'{value:.2f}%'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    images, split = _load_data(args.data)
    params = _load_weights_for(args.weights, images)
    ids = {"all": list(images), "test": split.test_ids, "train": split.train_group}[args.subset]
    rows = experiment.embed_dataset(params, [images[i] for i in ids])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiment.write_embedding_csv(rows, out / "embedding.csv")
    _write_json(out / "config.json", {"command": "embed", "weights": str(args.weights), "data": str(args.data),
                                      "subset": args.subset})
    print(f"embedded {len(rows)} images into {out / 'embedding.csv'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = gradcheck.grad_check(args.seed, args.trials, args.coords)
    worst = report.worst
    print(f"checked {len(report.checks)} coordinates ({report.skipped} kink-adjacent skipped); "
          f"pass rate {100 * report.pass_rate:.2f}% at rel. error < {gradcheck.TOLERANCE:g}")
    print(f"worst: trial {worst.trial} {worst.name}{list(worst.index)} analytic {worst.analytic:.10g} "
          f"numeric {worst.numeric:.10g} rel. error {worst.rel_error:.3g}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripemb", description="Triplet embedding of synthetic lung slices.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--n", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=57)
    g.add_argument("--width", type=int, default=125)
    g.add_argument("--format", choices=["bin", "txt"], default="bin")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="repeated training runs plus test evaluation")
    t.add_argument("--config", help="JSON config file; flags override its values")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--schedule", choices=["fixed", "increasing"])
    t.add_argument("--layers", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--sampler", choices=["uniform", "extent"])
    t.add_argument("--loss", choices=["clipped", "hinge"])
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--patience", type=int)
    t.add_argument("--triplets-per-epoch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--runs", dest="n_runs", type=int)
    t.add_argument("--triplets-per-scheme", type=int)
    t.add_argument("--eval-seed", type=int, help="defaults to the split seed")
    t.add_argument("--jobs", type=int, help="parallel runs")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "test-scheme violations for saved weights"),
                                 ("embed", cmd_embed, "embedding CSV for saved weights")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--weights", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        if name == "eval":
            e.add_argument("--triplets-per-scheme", type=int, default=5000)
            e.add_argument("--seed", type=int, default=None, help="defaults to the split seed")
        else:
            e.add_argument("--subset", choices=["all", "test", "train"], default="all")
        e.set_defaults(func=func)

    c = sub.add_parser("grad-check", help="finite-difference check of the network gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--coords", type=int, default=50, help="coordinates per trial")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SamplingError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
