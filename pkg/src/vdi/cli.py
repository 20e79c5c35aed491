"""Command-line entry point: ``vdi <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets import load_dataset, make_dataset, normalize, save_dataset
from .harness import (Divergence, evaluate, load_checkpoint, load_config, prepare_dataset,
                      source_only_baseline, train, write_beta_csv, write_outputs)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _inputs(fn, *args):
    """Run a loader; bad files or values become usage errors."""
    try:
        return fn(*args)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def _jsonable(d: dict) -> dict:
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def cmd_gen_data(args) -> int:
    ds = _inputs(make_dataset, args.dataset, args.seed, args.csv)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds.x)} rows, {ds.n_domains} domains to {path}")
    return EXIT_OK


def _train_like(args, source_only: bool) -> int:
    cfg = _inputs(load_config, args.config)
    out = args.out or cfg.out_dir
    ckpt = None if out is None else Path(out) / "checkpoint.npz"
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    runner = source_only_baseline if source_only else train
    ds, stats = _inputs(prepare_dataset, cfg)
    try:
        report, state = runner(cfg, ds, stats, checkpoint_path=ckpt)
    except Divergence as exc:
        print(f"diverged: {exc}; last good state saved to {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    if out is not None:
        write_outputs(out, report, state, cfg, stats)
    summary = {k: v for k, v in report.final.items() if not isinstance(v, list)}
    summary.update(graph_auc=report.graph_auc, index_correlation=report.index_correlation,
                   wall_clock=round(report.wall_clock, 2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_like(args, source_only=False)


def cmd_baseline(args) -> int:
    return _train_like(args, source_only=True)


def cmd_eval(args) -> int:
    state, cfg, stats = _inputs(load_checkpoint, args.checkpoint)
    ds = _inputs(load_dataset, args.dataset)
    if ds.n_domains != state.model.config.n_domains or ds.x_dim != state.model.config.x_dim:
        raise UsageError("dataset does not match the checkpoint's domains or input dimension")
    ds, _ = normalize(ds, stats)
    print(json.dumps(_jsonable(evaluate(state.model, ds, stats)), indent=2))
    return EXIT_OK


def cmd_infer_indices(args) -> int:
    state, _, _ = _inputs(load_checkpoint, args.checkpoint)
    if state.model.index_reference is None:
        raise UsageError("checkpoint has no global indices (model was never trained)")
    path = write_beta_csv(args.out, state.model.beta_table())
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vdi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a dataset and write it as CSV")
    g.add_argument("dataset", help="circle, dg15, dg60, tpt48-W6E42 or tpt48-N24S24")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", default=None, help="raw TPT-48 monthly temperature CSV")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the full model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", help="train the Source-Only baseline")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer-indices", help="write the global index table of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer_indices)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
