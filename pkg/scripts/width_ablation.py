"""Segment-width ablation: the same synthetic corpus cut at 32, 64 and 128 px.

    python3 scripts/width_ablation.py --out runs/width --counts 30,30,30,30

Each width gets its own cross-validated run under ``--out/w<width>``; a
table of pooled exact/off-by-one accuracy and kappa is printed at the end.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from epigrade import pipeline as P
from epigrade.synthgen import generate_dataset


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--counts", default="60,60,60,60")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--widths", default="32,64,128")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    manifest = out / "data" / "manifest.json"
    if not manifest.is_file():
        generate_dataset([int(c) for c in args.counts.split(",")], args.seed, out / "data")

    rows = []
    for w in (int(v) for v in args.widths.split(",")):
        pairs = dict(kv.split("=", 1) for kv in [f"seed={args.seed}", f"seg_width={w}", *args.set])
        agg = P.run_pipeline(manifest, P.RunConfig.from_pairs(pairs), out / f"w{w}")["aggregate"]["pooled"]
        rows.append({"width": w, "exact": agg["Exact"]["ACC"], "kappa": agg["Exact"]["kappa"], "off_by_one": agg["OffByOne"]["ACC"]})

    print(f"{'width':>6}{'exact':>8}{'kappa':>8}{'off1':>8}")
    for r in rows:
        print(f"{r['width']:>6}{r['exact']:8.3f}{r['kappa']:8.3f}{r['off_by_one']:8.3f}")
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
