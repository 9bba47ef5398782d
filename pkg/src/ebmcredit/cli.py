"""Command-line entry point: ``ebm <experiment> [flags]``."""

import argparse
import sys

from . import experiments as ex
from .data import export_bundled_mnist


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def build_parser():
    parser = argparse.ArgumentParser(prog="ebm", description="Energy-based credit assignment experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ex.EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=_ints, dest="seeds", help="comma-separated seeds")
        p.add_argument("--lambda", type=_floats, dest="lambda_values", help="comma-separated lambda values")
        p.add_argument("--gamma", type=_floats, dest="gamma_values", help="comma-separated feedback gains")
        p.add_argument("--steps", type=int, help="inference steps per phase")
        p.add_argument("--lr-x", type=float, dest="step_size", help="inference step size")
        p.add_argument("--lr-w", type=float, dest="weight_lr", help="weight learning rate")
        p.add_argument("--data-dir", help="directory with MNIST IDX files (default: $EBM_DATA_DIR)")
        p.add_argument("--out", dest="output_dir", default="results", help="output directory")
        p.add_argument("--net", type=_ints, dest="layer_sizes", help="comma-separated layer sizes")
        p.add_argument("--activation", choices=("relu", "tanh", "linear"))
        p.add_argument("--subset", type=int, help="number of training images used")
        p.add_argument("--test-subset", type=int, dest="test_subset")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batches", type=int, dest="n_batches")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for seed sweeps")
        p.add_argument("--no-plots", action="store_true")
        if name == "train":
            p.add_argument("--rule", choices=("bp", "pc_nudge", "first_step", "pc", "chl", "ep"))

    p = sub.add_parser("prepare-data", help="write the bundled 5k MNIST sample as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gzip", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "prepare-data":
        for path in export_bundled_mnist(args.out, args.test_size, args.seed, args.gzip):
            print(path)
        return 0
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "no_plots")}
    cfg = ex.default_config(args.command, **overrides)
    result = ex.run_experiment(cfg)
    paths = ex.write_result(result, cfg, plots=not args.no_plots)
    for k, v in result.summary.items():
        print(f"{k}={ex.format_value(v)}")
    for k, v in result.checks.items():
        print(f"check.{k}={'PASS' if v else 'FAIL'}")
    print(f"status={'PASS' if result.passed else 'FAIL'}")
    for path in paths:
        print(f"wrote {path}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
