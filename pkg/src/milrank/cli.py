"""Command-line interface for the whole pipeline.

Subcommands: synth, train, score, eval, gradcheck, plot-export. Every run
prints its fully-resolved configuration (defaults included) so any output
can be reproduced from the logged line. Exit codes: 0 success, 1 validation
error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import backend, dataset, evaluation, gradcheck as gradcheck_mod, trainer
from .binio import FormatError
from .loss import LossConfig
from .scorer import load_model, save_model, score_matrix

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit code."""

    def error(self, message):
        raise CliError(message)


def _print_config(command: str, values: dict) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(values.items())}
    print(f"config[{command}]: {json.dumps(resolved)}")


def _parse_batch(text: str) -> tuple[int, int]:
    try:
        pos, neg = (int(part) for part in text.split("+"))
    except ValueError:
        raise CliError(f"--batch expects the form P+N (e.g. 30+30), got {text!r}") from None
    return pos, neg


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}") from None


def _loss_config(args) -> LossConfig:
    return LossConfig(
        mu1=args.mu1, mu2=args.mu2, mu3=args.mu3,
        variant=args.loss, sparsity_target=args.sparsity_target,
    )


def _add_loss_flags(parser) -> None:
    parser.add_argument("--mu1", type=float, default=8e-5, help="temporal smoothness weight")
    parser.add_argument("--mu2", type=float, default=8e-5, help="sparsity weight")
    parser.add_argument("--mu3", type=float, default=0.01, help="weight decay")
    parser.add_argument("--loss", choices=["proposed", "baseline"], default="proposed",
                        help="full four-hinge loss or the single-hinge baseline")
    parser.add_argument("--sparsity-target", choices=["negative-bag", "positive-bag"],
                        default="negative-bag", help="bag the sparsity term sums over")


def build_parser() -> _Parser:
    parser = _Parser(prog="milrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth",
                       help="generate a synthetic planted-anomaly dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--segments", type=int, default=32)
    p.add_argument("--train-bags", type=int, default=200, help="training bags per class")
    p.add_argument("--test-bags", type=int, default=50, help="test bags per class")
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--k-min", type=int, default=3)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--scattered", action="store_true",
                   help="plant anomalies at scattered positions instead of one window")
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a scorer on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for model + log")
    p.add_argument("--segments", type=int, default=32)
    p.add_argument("--iters", type=int, default=25_000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=_parse_batch, default=(30, 30), metavar="P+N")
    p.add_argument("--dropout", type=float, default=0.6)
    p.add_argument("--hidden", type=_parse_dims, default=(128, 32), metavar="H1,H2")
    p.add_argument("--eps", type=float, default=1e-8, help="Adagrad epsilon")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.add_argument("--seed", type=int, default=0)
    _add_loss_flags(p)

    p = sub.add_parser("score",
                       help="score one feature file with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="MILF feature file")
    p.add_argument("--out", required=True, help="output CSV of per-segment scores")
    p.add_argument("--segments", type=int, default=32)

    p = sub.add_parser("eval", help="evaluate a model on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for report + CSVs")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--level", choices=["segment", "frame"], default="segment")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--segments", type=int, default=32)
    p.add_argument("--truth", default="auto",
                   help="truth sidecar CSV, 'auto' (truth.csv next to manifest), or 'none'")

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=gradcheck_mod.DEFAULT_TOLERANCE)

    p = sub.add_parser("plot-export",
                       help="convert an eval report JSON to plot-ready CSVs")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True, help="output directory")

    return parser


def cmd_synth(args) -> int:
    cfg = dataset.SyntheticConfig(
        dim=args.dim, n_segments=args.segments,
        train_per_class=args.train_bags, test_per_class=args.test_bags,
        separation=args.separation, k_min=args.k_min, k_max=args.k_max,
        contiguous=not args.scattered, noise_std=args.noise_std, seed=args.seed,
    )
    _print_config("synth", {**vars(cfg), "out": args.out})
    manifest = dataset.generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.videos)} videos under {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    batch_pos, batch_neg = args.batch
    cfg = trainer.TrainConfig(
        iterations=args.iters, learning_rate=args.lr,
        batch_pos=batch_pos, batch_neg=batch_neg,
        adagrad_epsilon=args.eps, seed=args.seed, loss=_loss_config(args),
        checkpoint_every=args.checkpoint_every, dropout=args.dropout,
        hidden_dims=tuple(args.hidden),
    )
    cfg.validate()
    _print_config("train", {
        "manifest": args.manifest, "out": args.out, "segments": args.segments,
        "iterations": cfg.iterations, "learning_rate": cfg.learning_rate,
        "batch_pos": cfg.batch_pos, "batch_neg": cfg.batch_neg,
        "adagrad_epsilon": cfg.adagrad_epsilon, "seed": cfg.seed,
        "dropout": cfg.dropout, "hidden_dims": list(cfg.hidden_dims),
        "checkpoint_every": cfg.checkpoint_every, "resume": args.resume,
        "mu1": cfg.loss.mu1, "mu2": cfg.loss.mu2, "mu3": cfg.loss.mu3,
        "loss_variant": cfg.loss.variant, "sparsity_target": cfg.loss.sparsity_target,
        "backend": backend.BACKEND_NAME,
    })
    manifest = dataset.load_manifest(args.manifest)
    bags = dataset.load_bags(manifest, dataset.SPLIT_TRAIN, args.segments)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, log = trainer.train(bags, cfg, out_dir=out_dir, resume_from=args.resume)
    save_model(out_dir / "model.milm", params)
    log.write_csv(out_dir / "train_log.csv", append=args.resume is not None)
    last = log.breakdowns[-1] if log.breakdowns else None
    if last is not None:
        print(f"final batch loss: {last.total:.6f}")
    print(f"wrote {out_dir / 'model.milm'}")
    return EXIT_OK


def cmd_score(args) -> int:
    _print_config("score", {"model": args.model, "features": args.features,
                            "out": args.out, "segments": args.segments})
    params, _ = load_model(args.model)
    features = dataset.read_features(args.features)
    segments = dataset.aggregate_clips_to_segments(features, args.segments)
    scores = score_matrix(params, segments)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_index", "score"])
        for i, score in enumerate(scores):
            writer.writerow([i, repr(float(score))])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", {
        "model": args.model, "manifest": args.manifest, "out": args.out,
        "split": args.split, "level": args.level, "threshold": args.threshold,
        "segments": args.segments, "truth": args.truth,
    })
    params, _ = load_model(args.model)
    manifest = dataset.load_manifest(args.manifest)
    truth = {"auto": "auto", "none": None}.get(args.truth, args.truth)
    report = evaluation.evaluate(
        params, manifest, split=args.split, level=args.level,
        threshold=args.threshold, n_segments=args.segments, truth=truth,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    report.write_roc_csv(out_dir / "roc.csv")
    report.write_timelines_csv(out_dir / "timelines.csv")
    print(
        f"auc={report.auc:.4f} far_normal={report.far_normal_pct:.2f}% "
        f"far_abnormal={report.far_abnormal_pct:.2f}% miss_abnormal={report.miss_abnormal_pct:.2f}%"
    )
    print(f"wrote {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "configs": args.configs,
                                "tolerance": args.tolerance,
                                "backend": backend.BACKEND_NAME})
    report = gradcheck_mod.run_all(args.seed, args.configs)
    print(f"scorer    max relative error: {report.scorer_max_rel:.3e}")
    print(f"loss      max absolute error: {report.loss_max_abs:.3e}")
    print(f"objective max relative error: {report.objective_max_rel:.3e}")
    print(f"max relative error: {report.max_relative_error:.3e}")
    if report.max_relative_error <= args.tolerance and report.loss_max_abs <= report.loss_tolerance:
        print("gradcheck: PASS")
        return EXIT_OK
    print("gradcheck: FAIL")
    return EXIT_VALIDATION


def cmd_plot_export(args) -> int:
    _print_config("plot-export", {"report": args.report, "out": args.out})
    report = evaluation.EvalReport.load_json(args.report)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_roc_csv(out_dir / "roc.csv")
    report.write_timelines_csv(out_dir / "timelines.csv")
    print(f"wrote {out_dir / 'roc.csv'} and {out_dir / 'timelines.csv'}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "plot-export": cmd_plot_export,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except FormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())
