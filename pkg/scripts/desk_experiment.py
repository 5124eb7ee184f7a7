"""Desk-scale cross-validated run on a freshly generated synthetic corpus.

    python3 scripts/desk_experiment.py --out runs/desk --counts 60,60,60,60 --seed 7
    python3 scripts/desk_experiment.py --out runs/quick --set encoder_train.max_epochs=10

Prints per-fold and pooled metrics; everything else lands under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from epigrade import pipeline as P
from epigrade.synthgen import generate_dataset

SCHEMES = ("Exact", "CINvsNormal", "CIN32vsCIN1N", "CIN3vsRest", "OffByOne")


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--counts", default="60,60,60,60")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return ap.parse_args(argv)


def summarize(result: dict) -> str:
    agg = result["aggregate"]
    lines = [f"{'scheme':<14}{'ACC':>8}{'kappa':>8}{'F1':>8}{'AUC':>8}   fold ACC"]
    for s in SCHEMES:
        pooled = agg["pooled"][s]
        folds = agg["fold_summary"][s]["ACC"]["folds"]

        def fmt(key):
            v = pooled.get(key)
            return f"{v:8.3f}" if isinstance(v, float) else f"{'-':>8}"

        lines.append(f"{s:<14}{fmt('ACC')}{fmt('kappa')}{fmt('F1')}{fmt('AUC')}   " + " ".join(f"{a:.3f}" for a in folds))
    return "\n".join(lines)


def main(argv=None) -> None:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    counts = [int(c) for c in args.counts.split(",")]
    cfg = P.RunConfig.from_pairs(dict(kv.split("=", 1) for kv in [f"seed={args.seed}", *args.set]))

    t0 = time.perf_counter()
    generate_dataset(counts, args.seed, out / "data")
    result = P.run_pipeline(out / "data" / "manifest.json", cfg, out / "run")
    elapsed = time.perf_counter() - t0

    print(summarize(result))
    print(f"elapsed {elapsed / 60:.1f} min")
    (out / "summary.json").write_text(json.dumps({"elapsed_s": elapsed, "pooled": result["aggregate"]["pooled"]}, indent=1, default=str))


if __name__ == "__main__":
    main()
