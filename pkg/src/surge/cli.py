"""Command-line entry point: ``surge {train,compare,theory,histogram,strip}``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (NaN/Inf),
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from surge import harness, theory
from surge.checkpoint import CheckpointError, export_checkpoint, has_auxiliary, load_checkpoint
from surge.config import ConfigError, ExperimentConfig, parse_config, validate
from surge.dpgc import SCOPES, strip_auxiliary

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "methods": [args.method] if getattr(args, "method", None) else None,
        "seeds": [args.seed] if getattr(args, "seed", None) is not None else None,
        "eta": args.eta,
        "scope": args.scope,
        "steps": args.steps,
        "lr": args.lr,
        "optimizer": args.optimizer,
        "output_dir": args.output_dir,
        "workers": args.workers,
        "record_grads_layer": args.record_grads_layer,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if args.surge_star:
        changes["surge_star"] = True
    try:
        return validate(cfg.replace(**changes)) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _print_table(rows, cols):
    widths = [max(len(c), *(len(_cell(r.get(c))) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(_cell(r.get(c)).ljust(w) for c, w in zip(cols, widths)))


def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_train(args):
    cfg = _load_config(args)
    if cfg.task == "theory":
        report = theory.theory_report(cfg.d, cfg.samples, cfg.seeds[0], cfg.n_models)
        _write_json(Path(cfg.output_dir) / "theory.json", report)
        print(f"max relative error {report['max_relative_error']:.3g} over {cfg.n_models} model(s)")
        return EXIT_OK
    results = harness.run_all(cfg)
    rows = []
    for (method, seed), r in sorted(results.items()):
        rows.append({"method": method, "seed": seed, "final_loss": r.final_loss,
                     "dist_to_opt": r.final_dist, "test_acc": r.test_accuracy, "run_dir": r.run_dir})
    _print_table(rows, ["method", "seed", "final_loss", "dist_to_opt", "test_acc", "run_dir"])
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args)
    summary = harness.compare_methods(cfg)
    _print_table(summary["methods"], list(summary["methods"][0].keys()))
    print(f"summary written to {Path(cfg.output_dir) / 'summary.json'}")
    return EXIT_OK


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_theory(args):
    for name in ("d", "samples", "models"):
        if getattr(args, name) < 1:
            raise ConfigError(f"--{name} must be >= 1")
    if args.d < 2:
        raise ConfigError("--d must be >= 2")
    report = theory.theory_report(args.d, args.samples, args.seed, args.models, args.resolution)
    for r in report["runs"]:
        print(f"seed {r['seed']}: lambda* analytic {r['lambda_star_analytic']:.6g}  "
              f"oracle {r['lambda_star_oracle']:.6g}  rel.err {r['relative_error']:.3g}  "
              f"norm-ratio {r['lambda_approx']:.6g}")
    if args.out:
        _write_json(Path(args.out), report)
    else:
        print(theory.dumps_report({k: v for k, v in report.items() if k != "runs"}))
    return EXIT_OK


def cmd_histogram(args):
    try:
        hist = harness.gradient_histogram(args.run, args.layer, bins=args.bins)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for method, h in hist["methods"].items():
        print(f"{method}: n={h['n']} zero_fraction={h['zero_fraction']:.4f}")
    if args.out:
        _write_json(Path(args.out), hist)
    return EXIT_OK


def cmd_strip(args):
    model = load_checkpoint(args.inp)
    had_aux = has_auxiliary(model)
    export_checkpoint(strip_auxiliary(model), args.out, strip=True)
    in_size, out_size = Path(args.inp).stat().st_size, Path(args.out).stat().st_size
    note = "" if had_aux else " (no auxiliary branches found)"
    print(f"wrote {args.out}: {in_size} -> {out_size} bytes{note}")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--config", help="YAML/JSON experiment config (defaults when omitted)")
    p.add_argument("--method", help="train a single method")
    p.add_argument("--seed", type=int, help="train a single seed")
    p.add_argument("--eta", type=float)
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--surge-star", action="store_true", help="1x1 auxiliary kernels in conv layers")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--record-grads-layer", type=int, help="save activation gradients of binarizable layer k")


def build_parser():
    parser = _Parser(prog="surge", description="Binarized training with dual-path gradient compensation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train every (method, seed) of a config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train and summarize all methods of a config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("theory", help="Monte-Carlo check of the optimal scale")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=1)
    p.add_argument("--resolution", type=int, default=2001)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("histogram", help="activation-gradient histograms from recorded runs")
    p.add_argument("--run", required=True, help="run directory or a tree of run directories")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", help="write the JSON histogram here")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("strip", help="drop auxiliary branches from a checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_strip)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
