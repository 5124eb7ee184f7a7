"""Command-line entry point: ``epigrade <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import encoder as E
from . import fusion as F
from . import metrics as M
from . import pipeline as P
from . import train as TR
from .localize import GRADES, BadWidth, DegenerateRegion, EmptyMask, standardize_segment
from .persist import FormatError, KindError, load_checkpoint, save_checkpoint, write_json
from .svg import emit_attention_svg, emit_overlay_svg
from .synthgen import BadParams, EmptyDataset, generate_dataset

log = logging.getLogger("epigrade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DATA_ERRORS = (
    P.DataError, FormatError, KindError, BadWidth, DegenerateRegion, EmptyMask, EmptyDataset,
    TR.MissingLabel, TR.EmptySplit, TR.EmptyClass, TR.BadK, E.EmptySequence, FileNotFoundError,
)


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ config


def load_config(args) -> P.RunConfig:
    pairs = P.parse_kv_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    try:
        cfg = P.RunConfig.from_pairs(pairs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        counts = [int(c) for c in args.counts.split(",")]
    except ValueError as exc:
        raise UsageError(f"--counts must be four comma-separated integers: {exc}") from exc
    if len(counts) != 4:
        raise UsageError("--counts needs exactly four values (Normal,CIN1,CIN2,CIN3)")
    rows = generate_dataset(counts, args.seed, args.out)
    print(f"wrote {len(rows)} samples to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_segment(args) -> int:
    samples = P.load_manifest(args.manifest)
    cfg = replace(load_config(args), seg_width=args.width) if args.width else load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for s in samples:
        try:
            im = P.segment_sample(s, cfg)
        except Exception as exc:  # noqa: BLE001
            raise P.DataError(f"[segment] {s.id}: {exc}") from exc
        d = out / s.id
        d.mkdir(exist_ok=True)
        side = []
        for crop, geom in zip(im.crops, im.geometry):
            name = f"segment_{geom['index']:03d}.png"
            Image.fromarray(crop).save(d / name)
            side.append({"index": geom["index"], "weak_label": s.grade, "crop": name, "geometry": geom})
        write_json(d / "segments.json", {"id": s.id, "grade": s.grade, "seg_width": cfg.seg_width, "segments": side})
        (d / "overlay.svg").write_text(emit_overlay_svg(s.image, [np.asarray(g["source_quad"]) for g in im.geometry]))
        index.append({"id": s.id, "grade": s.grade, "n_segments": len(side), "dir": s.id})
    write_json(out / "index.json", {"seg_width": cfg.seg_width, "images": index})
    print(f"segmented {len(index)} images into {sum(r['n_segments'] for r in index)} segments")
    return EXIT_OK


def _read_index(seg_dir: Path) -> dict:
    path = seg_dir / "index.json"
    if not path.is_file():
        raise P.DataError(f"segment index not found: {path}")
    return json.loads(path.read_text())


def load_segment_dir(seg_dir: str | Path, input_hw: tuple[int, int]) -> tuple[list[P.SegmentedImage], int]:
    """Reload crops written by ``segment`` and standardize them for an encoder input size."""
    seg_dir = Path(seg_dir)
    index = _read_index(seg_dir)
    width = int(index["seg_width"])
    images = []
    for row in index["images"]:
        side = json.loads((seg_dir / row["dir"] / "segments.json").read_text())
        crops = [np.asarray(Image.open(seg_dir / row["dir"] / s["crop"]).convert("RGB")) for s in side["segments"]]
        std = np.stack([standardize_segment(c, target_h=input_hw[1], target_w=input_hw[0], seg_width=width) for c in crops])
        images.append(P.SegmentedImage(row["id"], row["grade"], crops, std.astype(np.float32), [s["geometry"] for s in side["segments"]]))
    return images, width


def _partition(pairs, cfg: P.RunConfig, fold: int | None):
    if fold is None:
        fit, stop = P.all_data_partition(pairs, cfg)
        return fit, stop, []
    try:
        return P.fold_partition(pairs, cfg, fold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _labelled_pairs(items) -> list[tuple[str, str]]:
    pairs = [(i.id, i.grade) for i in items]
    missing = [i for i, g in pairs if g is None]
    if missing:
        raise TR.MissingLabel(f"{len(missing)} images lack a grade, e.g. {missing[0]}")
    return pairs


def cmd_train_encoder(args) -> int:
    cfg = load_config(args)
    images, width = load_segment_dir(args.segments, cfg.encoder_cfg.input_hw)
    if width != cfg.seg_width:
        cfg = replace(cfg, seg_width=width)
    by_id = {im.id: im for im in images}
    fit, stop, val = _partition(_labelled_pairs(images), cfg, args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fold = args.fold or 0
    res, n_seg = P.train_encoder_stage([by_id[i] for i in fit], [by_id[i] for i in stop], cfg, fold, out / "encoder_log.csv")
    meta = {"seed": cfg.seed, "fold": fold, "epoch": res.best_epoch, "best_val_loss": res.best_val_loss, "seg_width": width}
    save_checkpoint(out / "encoder.ckpt", "encoder", cfg.encoder_cfg.to_dict(), res.params, meta)
    write_json(out / "split.json", {"fit": fit, "early_stop": stop, "validation": val})
    print(f"encoder: best epoch {res.best_epoch} (val loss {res.best_val_loss:.4f}) over {n_seg} training segments")
    return EXIT_OK


def cmd_encode(args) -> int:
    ck = load_checkpoint(args.checkpoint, kind="encoder")
    enc = E.EncoderConfig.from_dict(ck.config)
    images, _ = load_segment_dir(args.segments, enc.input_hw)
    rows = []
    for im in images:
        logits = E.encode_batch(im.standardized, ck.params, enc)
        rows.append({"id": im.id, "grade": im.grade, "logits": logits.tolist()})
    write_json(args.out, rows)
    print(f"encoded {len(rows)} images")
    return EXIT_OK


def _read_sequences(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise P.DataError(f"sequence file not found: {path}")
    rows = json.loads(path.read_text())
    for r in rows:
        F.SegmentLogitSequence(np.asarray(r["logits"]), r["id"])
    return rows


def cmd_train_fusion(args) -> int:
    cfg = load_config(args)
    rows = _read_sequences(args.sequences)
    pairs = [(r["id"], r.get("grade")) for r in rows]
    if any(g is None for _, g in pairs):
        raise TR.MissingLabel("train-fusion needs graded sequences")
    fit, stop, val = _partition(pairs, cfg, args.fold)
    by_id = {r["id"]: r for r in rows}

    def arrays(ids):
        return [np.asarray(by_id[i]["logits"]) for i in ids], np.array([GRADES.index(by_id[i]["grade"]) for i in ids])

    (s_fit, y_fit), (s_stop, y_stop) = arrays(fit), arrays(stop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fold = args.fold or 0
    res, q = P.train_fusion_stage(s_fit, y_fit, s_stop, y_stop, cfg, fold, out / "fusion_log.csv")
    meta = {"seed": cfg.seed, "fold": fold, "epoch": res.best_epoch, "best_val_loss": res.best_val_loss, "class_weights": list(q.q)}
    save_checkpoint(out / "fusion.ckpt", "fusion", cfg.fusion.to_dict(), res.params, meta)
    write_json(out / "split.json", {"fit": fit, "early_stop": stop, "validation": val})
    print(f"fusion: best epoch {res.best_epoch} (val loss {res.best_val_loss:.4f})")
    return EXIT_OK


def cmd_classify(args) -> int:
    ck = load_checkpoint(args.fusion, kind="fusion")
    fcfg = F.FusionConfig.from_dict(ck.config)
    rows = _read_sequences(args.sequences)
    if args.fold is not None:
        cfg = load_config(args)
        _, _, val = _partition([(r["id"], r.get("grade")) for r in rows], cfg, args.fold)
        keep = set(val)
        rows = [r for r in rows if r["id"] in keep]
    out = Path(args.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, truth, probs = [], [], []
    for r in rows:
        rep = F.predict_with_report(F.SegmentLogitSequence(np.asarray(r["logits"]), r["id"]), ck.params, fcfg)
        write_json(out / f"{r['id']}.json", rep.to_dict())
        (out / f"{r['id']}.svg").write_text(emit_attention_svg(rep))
        ids.append(r["id"])
        truth.append(r.get("grade"))
        probs.append(rep.probs)
    pred = {"ids": ids, "truth": truth, "predicted": [GRADES[F.argmax_first(p)] for p in probs], "probs": [p.tolist() for p in probs]}
    write_json(out / "predictions.json", pred)
    print(f"classified {len(ids)} images; reports in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    path = Path(args.predictions)
    if not path.is_file():
        raise P.DataError(f"predictions not found: {path}")
    d = json.loads(path.read_text())
    if any(t is None for t in d["truth"]):
        raise TR.MissingLabel("evaluation needs a truth label for every prediction")
    scored = M.ScoredPredictions.from_dict(d)
    schemes = tuple(M.SCHEMES) if args.schemes == "all" else tuple(s.strip() for s in args.schemes.split(","))
    try:
        report = M.evaluate(scored, schemes)
    except M.UnknownScheme as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    for name, row in report.items():
        if "confusion" in row:
            M.ConfusionMatrix(np.asarray(row["confusion"]), M.SCHEMES[name].labels).to_csv(out.parent / f"confusion_{name}.csv")
    M.write_flow_csv(scored.truth, scored.predicted, out.parent / "flow.csv")
    for name, row in report.items():
        print(f"{name:>13}: ACC {row['ACC']:.3f}" + (f"  kappa {row['kappa']:.3f}" if "kappa" in row else ""))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args)
    result = P.run_pipeline(args.manifest, cfg, args.out)
    pooled = result["aggregate"]["pooled"]
    for name, row in pooled.items():
        print(f"{name:>13}: ACC {row['ACC']:.3f}" + (f"  kappa {row['kappa']:.3f}" if "kappa" in row else ""))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epigrade", description="Segment-sequence grading of epithelium bands.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, fold=False):
        p.add_argument("--config", help="file of key=value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        if fold:
            p.add_argument("--fold", type=int, help="1-based fold; omit to train on all images")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--counts", default="60,60,60,60")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="cut images into vertical segments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--width", type=int, choices=P.ALLOWED_WIDTHS)
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train-encoder", help="train the segment encoder")
    p.add_argument("--segments", required=True)
    p.add_argument("--out", required=True)
    with_config(p, fold=True)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("encode", help="turn segments into logit sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-fusion", help="train the attention fusion network")
    p.add_argument("--sequences", required=True)
    p.add_argument("--out", required=True)
    with_config(p, fold=True)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("classify", help="classify sequences and write attention reports")
    p.add_argument("--fusion", required=True)
    p.add_argument("--sequences", required=True)
    p.add_argument("--report-dir", required=True)
    with_config(p, fold=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="score predictions under the grading schemes")
    p.add_argument("--predictions", required=True)
    p.add_argument("--schemes", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full cross-validated pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = P.worker_count()
    except ValueError as exc:
        print(f"epigrade: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"epigrade {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TR.DivergedLoss as exc:
        print(f"epigrade {args.command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except P.StageError as exc:
        code = EXIT_DIVERGED if isinstance(exc.cause, TR.DivergedLoss) else EXIT_DATA
        print(f"epigrade {args.command}: {exc}", file=sys.stderr)
        return code
    except (BadParams,) as exc:
        print(f"epigrade {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"epigrade {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
