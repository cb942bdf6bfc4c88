"""
Command line entry point.

    python backend/cli.py train --data housing.csv --preset desk-scale --seed 0 --out-dir runs/h0
    python backend/cli.py eval --checkpoint runs/h0/checkpoint.npz --data holdout.csv
    python backend/cli.py verify --suite density
    python backend/cli.py sample-prior --depth 2 --points 4 --out g2.csv
    python backend/cli.py table runs/*/run.json --out results.xlsx
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from deep_wishart import harness, verify  # noqa: E402
from deep_wishart.errors import DeepWishartError, DomainError  # noqa: E402
from deep_wishart.inference import TrainSchedule  # noqa: E402
from deep_wishart.kernel import KernelConfig  # noqa: E402
from deep_wishart.model import STL_GROUPS, ModelConfig, dwp_prior_sample  # noqa: E402
from deep_wishart.numerics import RngStream  # noqa: E402

logger = logging.getLogger("deep_wishart.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _dataset_spec(args) -> harness.DatasetSpec:
    return harness.DatasetSpec(path=args.data, target_column=args.target_column,
                               split_seed=args.split_seed, split_index=args.split_index,
                               train_fraction=args.train_fraction, skip_header=args.skip_header,
                               split_file=args.split_file)


def _configs(args):
    """Preset (if any) overridden by every flag given on the command line."""
    model, schedule = {}, {}
    if args.preset:
        preset = harness.load_preset(args.preset)
        model.update(preset.get("model", {}))
        schedule.update(preset.get("schedule", {}))
    for name in ("depth", "inducing", "batch_size", "train_samples", "eval_samples", "init_noise"):
        value = getattr(args, name)
        if value is not None:
            model[name] = value
    if args.widths:
        model["widths"] = [int(w) for w in args.widths.split(",")]
    if args.no_ard:
        model["ard"] = False
    for name in ("steps", "lr_initial", "lr_drop_step", "lr_final", "kl_anneal_steps"):
        value = getattr(args, name)
        if value is not None:
            schedule[name] = value
    if args.stl is not None:
        schedule["stl"] = [g for g in args.stl.split(",") if g]
    return ModelConfig.from_dict(model), TrainSchedule.from_dict(schedule)


def cmd_train(args) -> int:
    model_config, sched = _configs(args)
    record = harness.run_experiment(_dataset_spec(args), model_config, sched, args.seed, args.out_dir)
    print(json.dumps({"ok": True, "digest": record.digest(), **record.to_dict()}, indent=2))
    return 0


def cmd_eval(args) -> int:
    result = harness.evaluate_checkpoint(args.checkpoint, _dataset_spec(args), args.samples, args.seed)
    print(json.dumps(result, indent=2))
    return 0


def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite, seed=args.seed, draws=args.draws, workers=args.workers)
    for result in results:
        print(result.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if args.json:
        with open(args.json, "w") as f:
            json.dump([r.to_dict() for r in results], f, indent=2)
    return 0 if failed == 0 else 1


def cmd_sample_prior(args) -> int:
    if args.depth < 1:
        raise DomainError("sample-prior needs at least one Wishart layer")
    rng = RngStream(args.seed)
    x = rng.split(0).normal((args.points, args.input_dim))
    widths = [args.width or args.input_dim] * args.depth
    kernels = [KernelConfig(lengthscale=args.lengthscale) for _ in range(args.depth + 1)]
    sample = dwp_prior_sample(x, widths, kernels, rng.split(1))
    gram = sample.grams[-1]
    pd.DataFrame(gram).to_csv(args.out, header=False, index=False, float_format="%.17g")
    eigmin = float(np.linalg.eigvalsh(gram).min())
    logger.info("Wrote %dx%d G_%d to %s (smallest eigenvalue %.3e)", *gram.shape, args.depth, args.out, eigmin)
    print(json.dumps({"ok": True, "out": args.out, "shape": list(gram.shape), "min_eigenvalue": eigmin}))
    return 0


def cmd_table(args) -> int:
    records = [harness.RunRecord.load(path) for path in args.records]
    harness.write_results_workbook(records, args.out)
    print(json.dumps({"ok": True, "out": args.out, "rows": len(records)}))
    return 0


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="Numeric CSV file")
    p.add_argument("--target-column", type=int, default=-1, help="Target column index (default: last)")
    p.add_argument("--skip-header", action="store_true", help="Skip the first row")
    p.add_argument("--split-file", help="File of train row indices; overrides the seeded split")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--split-index", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwp", description="Deep Wishart process regression")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a model and write run.json, checkpoint and trace")
    _add_dataset_flags(train)
    train.add_argument("--preset", help="Preset id from backend/presets")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out-dir", help="Directory for run.json, checkpoint.npz and trace.jsonl")
    train.add_argument("--depth", type=int)
    train.add_argument("--widths", help="Comma-separated layer widths (default: input dimension)")
    train.add_argument("--inducing", type=int)
    train.add_argument("--batch", dest="batch_size", type=int)
    train.add_argument("--samples", dest="train_samples", type=int, help="Samples per training step")
    train.add_argument("--eval-samples", type=int)
    train.add_argument("--init-noise", type=float)
    train.add_argument("--no-ard", action="store_true", help="Isotropic kernel on X X^T / D in layer 1")
    train.add_argument("--steps", type=int)
    train.add_argument("--lr-initial", type=float)
    train.add_argument("--lr-drop-step", type=int)
    train.add_argument("--lr-final", type=float)
    train.add_argument("--kl-anneal-steps", type=int)
    train.add_argument("--stl", help=f"Comma-separated STL groups from {list(STL_GROUPS)}; empty disables")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on every row of a CSV")
    _add_dataset_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--samples", type=int)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    ver = sub.add_parser("verify", help="Run numerical identity checks")
    ver.add_argument("--suite", default="all", choices=list(verify.SUITES) + ["all"])
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--draws", type=int, help="Cap on Monte Carlo draws per check")
    ver.add_argument("--workers", type=int, default=1)
    ver.add_argument("--json", help="Also write the results to this JSON file")
    ver.set_defaults(func=cmd_verify)

    prior = sub.add_parser("sample-prior", help="Write one prior sample of G_L as CSV")
    prior.add_argument("--depth", type=int, required=True)
    prior.add_argument("--points", type=int, required=True)
    prior.add_argument("--input-dim", type=int, default=2)
    prior.add_argument("--width", type=int, help="Layer width (default: input dimension)")
    prior.add_argument("--lengthscale", type=float, default=1.0)
    prior.add_argument("--seed", type=int, default=0)
    prior.add_argument("--out", required=True)
    prior.set_defaults(func=cmd_sample_prior)

    table = sub.add_parser("table", help="Collect run.json files into an .xlsx table")
    table.add_argument("records", nargs="+")
    table.add_argument("--out", required=True)
    table.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.func(args)
    except DeepWishartError as e:
        print(json.dumps(e.to_dict()))
        return 2
    except Exception as e:
        logger.exception("Command failed")
        print(json.dumps({"ok": False, "error": str(e), "kind": type(e).__name__}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
