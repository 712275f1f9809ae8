"""Command-line entry point: ``zsforget <subcommand>``.

Exit status is 0 on success, 1 for usage or input errors and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import METHODS, ConfigError, ExperimentConfig, config_from_dict, dump_config, parse_config
from .encoders import InputError, build_class_prompts
from .evaluation import before_after_report, classification_accuracy
from .experiment import OUTPUT_ROOT_ENV, RunFailure, RunManifest, compare_runs, default_run_dir, run_experiment
from .report import format_json, format_text, format_tsv, load_report
from .synth import CalibrationTarget, GenerationError, calibrate_batch, generate_synthetic_samples, save_batch
from .toydata import load_dataset, make_toy_dataset, merge_datasets, save_dataset, train_test_split
from .training import train_toy_pair

log = logging.getLogger("zsforget")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _root() -> Path:
    import os

    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def _render(rows, fmt: str, **extra) -> str:
    if fmt == "json":
        return format_json(rows, **extra)
    if fmt == "tsv":
        return format_tsv(rows)
    return format_text(rows)


def cmd_gen_data(args) -> int:
    ds = make_toy_dataset(args.kind, args.per_class, seed=args.seed, size=args.size)
    out = Path(args.out) if args.out else _root() / "data" / f"{args.kind}-seed{args.seed}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"dataset\t{out}\nclasses\t{len(ds.class_names)}\nimages\t{len(ds)}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    sets = [load_dataset(p) for p in args.data]
    splits = [train_test_split(ds, args.test_fraction, seed=args.seed) for ds in sets]
    train = merge_datasets([tr for tr, _ in splits])
    pair = train_toy_pair(
        train, seed=args.seed, epochs=args.epochs, lr=args.lr, embed_dim=args.embed_dim, logit_scale=args.logit_scale
    )
    out = Path(args.out) if args.out else _root() / "models" / f"toy-seed{args.seed}.safetensors"
    save_checkpoint(pair, out)
    print(f"checkpoint\t{out}")
    for ds, (_, test) in zip(sets, splits):
        acc = classification_accuracy(pair, test, build_class_prompts(test.class_names, args.template))
        print(f"heldout_acc[{ds.name}]\t{acc.pooled():.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    pair = load_checkpoint(args.checkpoint)
    classes = load_dataset(args.classes_from).class_names
    prompts = build_class_prompts(classes, args.template)
    calib = CalibrationTarget(args.calibrate[0], args.calibrate[1]) if args.calibrate else None
    batch = generate_synthetic_samples(
        pair, prompts, prompts.index(args.target), args.count, args.step_size, args.max_steps, args.seed, calib
    )
    if calib is not None:
        batch = calibrate_batch(pair, prompts, batch, calib)
    out = Path(args.out) if args.out else _root() / "synth" / f"{args.target.replace(' ', '_')}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_batch(batch, out)
    probs = torch.tensor(batch.per_sample_prob)
    print(f"batch\t{out}\nsamples\t{len(batch)}\nmean_prob\t{probs.mean():.4f}\nflagged\t{sum(batch.flagged)}")
    return EXIT_OK


def _forget_config(args) -> tuple[ExperimentConfig, str | None]:
    text = None
    if args.config:
        path = Path(args.config)
        cfg = parse_config(path)
        text = path.read_text()
        data = cfg.to_dict()
    else:
        if not args.target:
            raise UsageError("forget needs --config or at least one --target")
        data = ExperimentConfig(target_classes=list(args.target)).to_dict()
    if args.target:
        data["target_classes"] = list(args.target)
    if args.method:
        data["method"] = args.method
        data["forget"].pop("loss_kind", None)
        data["forget"].pop("select_layers", None)
    for key, value in (("target_dataset", args.target_dataset), ("name", args.name), ("output_dir", args.output_dir)):
        if value is not None:
            data[key] = value
    if args.seed is not None:
        for section in ("model", "data", "synth", "forget"):
            data[section]["seed"] = args.seed
    if args.goal_acc is not None:
        data["forget"]["goal_acc"] = args.goal_acc
    if args.lr is not None:
        data["forget"]["learning_rate"] = args.lr
    if args.increase_steps is not None:
        data["forget"]["total_increase_steps"] = args.increase_steps
    base = Path(args.config).parent if args.config else None
    return config_from_dict(data, base_dir=base), text


def cmd_forget(args) -> int:
    cfg, text = _forget_config(args)
    if args.dry_run:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    run_dir = args.run_dir
    if run_dir is None and args.output_dir:
        run_dir = default_run_dir(cfg, args.output_dir)  # an explicit flag beats the environment
    manifest = run_experiment(cfg, run_dir, config_text=text)
    print(f"run_dir\t{manifest.run_dir}")
    sys.stdout.write(manifest.path("report_text").read_text())
    return EXIT_OK


def _named_paths(items) -> dict[str, Path]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--data expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = Path(path)
    return out


def cmd_eval(args) -> int:
    bf = load_checkpoint(args.bf)
    af = load_checkpoint(args.af)
    datasets = {name: load_dataset(p) for name, p in _named_paths(args.data).items()}
    target_dataset = args.target_dataset or next(iter(datasets))
    row = before_after_report(
        bf, af, datasets, target_dataset, args.target, method=args.method, forgetting_type=args.forgetting_type,
        template=args.template, weighting=args.weighting,
    )
    sys.stdout.write(_render([row], args.format))
    return EXIT_OK


def _figures_dir(run_dir: Path, override) -> Path:
    return Path(override) if override else run_dir.parent / f"{run_dir.name}-figures"


def cmd_report(args) -> int:
    manifest = RunManifest.load(args.run_dir)
    if manifest.status != "ok":
        raise UsageError(f"run {manifest.run_dir} has status {manifest.status}")
    rows, extra = load_report(manifest.path("report"))
    extra.pop("config_hash", None)
    sys.stdout.write(_render(rows, args.format, **extra))
    if not args.no_figures:
        from .plotting import render_figures

        for p in render_figures(rows, manifest.path("traces"), _figures_dir(Path(manifest.run_dir), args.figures)):
            print(f"figure\t{p}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = compare_runs(args.run_dirs)
    sys.stdout.write(_render(rows, args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zsforget", description="Zero-shot class forgetting for dual encoders.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a toy image dataset")
    g.add_argument("--kind", choices=("shapes", "patterns"), default="shapes")
    g.add_argument("--per-class", type=int, default=60)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-toy", help="train the toy dual encoder")
    t.add_argument("--data", nargs="+", required=True, help="dataset .npz files")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--embed-dim", type=int, default=32)
    t.add_argument("--logit-scale", type=float, default=10.0)
    t.add_argument("--test-fraction", type=float, default=0.34)
    t.add_argument("--template", default="a photo of a {}")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("synth", help="generate synthetic forget samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--classes-from", required=True, help="dataset .npz whose class names define the prompts")
    s.add_argument("--target", required=True)
    s.add_argument("--template", default="a photo of a {}")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--step-size", type=float, default=0.5)
    s.add_argument("--max-steps", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--calibrate", type=float, nargs=2, metavar=("LOW", "HIGH"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("forget", help="run a full forgetting experiment")
    f.add_argument("--config")
    f.add_argument("--method", choices=METHODS)
    f.add_argument("--target", action="append", help="class to forget (repeat for several)")
    f.add_argument("--target-dataset")
    f.add_argument("--name")
    f.add_argument("--seed", type=int)
    f.add_argument("--goal-acc", type=float)
    f.add_argument("--lr", type=float)
    f.add_argument("--increase-steps", type=int)
    f.add_argument("--output-dir")
    f.add_argument("--run-dir")
    f.add_argument("--dry-run", action="store_true", help="print the effective config and exit")
    f.set_defaults(func=cmd_forget)

    e = sub.add_parser("eval", help="evaluate a before/after checkpoint pair")
    e.add_argument("--bf", required=True)
    e.add_argument("--af", required=True)
    e.add_argument("--data", nargs="+", required=True, metavar="NAME=PATH")
    e.add_argument("--target", required=True)
    e.add_argument("--target-dataset")
    e.add_argument("--method", default="Lip")
    e.add_argument("--forgetting-type", choices=("ZS", "semi_ZS", "not_ZS"), default="ZS")
    e.add_argument("--template", default="a photo of a {}")
    e.add_argument("--weighting", choices=("image", "class"), default="image")
    e.add_argument("--format", choices=("txt", "tsv", "json"), default="txt")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render a finished run's report and figures")
    r.add_argument("run_dir")
    r.add_argument("--format", choices=("txt", "tsv", "json"), default="txt")
    r.add_argument("--figures", help="figure directory (default: <run_dir>-figures)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("compare", help="side-by-side table of several runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--format", choices=("txt", "tsv"), default="txt")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"zsforget {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailure, GenerationError) as exc:
        print(f"zsforget {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # anything unexpected is a failed run, not a usage problem
        log.debug("unhandled error", exc_info=True)
        print(f"zsforget {args.command}: run failed: {exc!r}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
