"""Command-line surface.

Subcommands: train, prune, verify, sweep, report. Exit codes: 0 success,
1 validation error (bad flags or config), 2 runtime failure.
"""

import argparse
import os
import sys
from dataclasses import replace

from . import experiment, net
from .checkpoint import save_checkpoint
from .experiment import (ExperimentConfig, VERIFY_SUITES, canonical_json,
                         load_config, run_experiment, sweep, with_master_seed)


def _load(args):
    if args.config:
        if not os.path.exists(args.config):
            raise ValueError(f"--config: no such file {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = with_master_seed(cfg, args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _cmd_train(args):
    cfg = _load(args)
    from . import datasets
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        f.write(canonical_json(cfg))
    data = datasets.gen_dataset(cfg.dataset)
    model = net.build_model(cfg.arch, cfg.seed)
    model, history = net.train(model, data.train, cfg.pretrain)
    experiment.write_csv(os.path.join(cfg.out_dir, "pretrain_history.csv"),
                         "epoch,loss,acc", history)
    save_checkpoint(os.path.join(cfg.out_dir, "pretrained.ckpt"), model)
    loss, acc = net.evaluate(model, data.holdout)
    print(f"trained {cfg.arch}: holdout loss {loss:.4f} acc {acc:.4f}")
    return 0


def _cmd_prune(args):
    cfg = _load(args)
    out = run_experiment(cfg)
    print(f"experiment artifacts in {out}")
    return 0


def _cmd_verify(args):
    cfg = _load(args)
    if args.suite:
        cfg = replace(cfg, suite=args.suite)
    if cfg.suite not in VERIFY_SUITES:
        raise ValueError(f"unknown suite {cfg.suite!r} (have {sorted(VERIFY_SUITES)})")
    path = VERIFY_SUITES[cfg.suite](cfg)
    print(f"report written: {path}")
    return 0


def _cmd_sweep(args):
    cfg = _load(args)
    if args.kind:
        cfg = replace(cfg, sweep_kind=args.kind)
    path = sweep(cfg)
    print(f"sweep written: {path}")
    return 0


def _cmd_report(args):
    written = experiment.report(args.run_dirs, args.out or "report")
    for p in written:
        print(p)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="prunelab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")

    common(sub.add_parser("train", help="pretrain a gated model"))
    common(sub.add_parser("prune", help="full pipeline: train, prune, fine-tune"))
    p = sub.add_parser("verify", help="run an oracle verification suite")
    common(p)
    p.add_argument("--suite", choices=sorted(VERIFY_SUITES))
    p = sub.add_parser("sweep", help="prune-percentage or hybrid-ratio grids")
    common(p)
    p.add_argument("--kind", choices=["percent", "hybrid"])
    p = sub.add_parser("report", help="merge CSVs from several run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "prune": _cmd_prune,
    "verify": _cmd_verify,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
