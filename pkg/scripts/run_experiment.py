"""Train the model and the Source-Only baseline over several seeds and tabulate.

    python scripts/run_experiment.py configs/circle.cfg --seeds 0 1 2 --out runs/circle
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from vdi.harness import load_config, prepare_dataset, source_only_baseline, train, write_outputs


def headline(report) -> dict:
    f = report.final
    out = {k: f[k] for k in ("target_accuracy", "source_accuracy", "target_mse", "source_mse",
                             "level1_mse", "level2_mse", "level3_mse") if k in f}
    if report.graph_auc is not None:
        out["graph_auc"] = report.graph_auc
    if report.index_correlation is not None:
        out["index_correlation"] = report.index_correlation
    out["wall_clock"] = report.wall_clock
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=None)
    ap.add_argument("--skip-baseline", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config)
    ds, stats = prepare_dataset(base)
    rows = []
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed)
        runs = [("vdi", train)] + ([] if args.skip_baseline else [("source_only", source_only_baseline)])
        for tag, fn in runs:
            report, state = fn(cfg, ds, stats)
            if args.out:
                write_outputs(Path(args.out) / f"{tag}_seed{seed}", report, state, cfg, stats)
            rows.append({"method": tag, "seed": seed, **headline(report)})
            print(json.dumps(rows[-1]), flush=True)

    print("\nmedian over seeds")
    for tag in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == tag]
        keys = [k for k in sel[0] if k not in ("method", "seed")]
        print(tag, {k: round(float(np.median([r[k] for r in sel])), 4) for k in keys})


if __name__ == "__main__":
    main()
