"""End-to-end cross-validated runs: segment, train encoder, encode, train fusion, evaluate."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import encoder as E
from . import fusion as F
from . import metrics as M
from . import train as TR
from .localize import GRADES, EpitheliumSample, localize, standardize_segment
from .persist import load_checkpoint, save_checkpoint, write_json
from .rng import substream

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Bad or missing input data; carries the failing stage in its message."""


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


ALLOWED_WIDTHS = (32, 64, 128)


@dataclass(frozen=True)
class RunConfig:
    seg_width: int = 64
    encoder: str = "tiny"
    folds: int = 5
    seed: int = 7
    smooth: int = 15
    holdout: float = 0.125  # share of each training fold kept aside for early stopping
    balance: bool = True
    stage1_checkpoint: str = ""  # optional encoder checkpoint whose stage-I weights seed training
    freeze_stage1: bool = False
    encoder_train: TR.TrainConfig | None = None
    fusion_train: TR.TrainConfig | None = None
    fusion: F.FusionConfig = field(default_factory=F.FusionConfig)
    augment: TR.AugmentationParams = field(default_factory=TR.AugmentationParams)

    def __post_init__(self):
        if self.seg_width not in ALLOWED_WIDTHS:
            raise ValueError(f"seg_width must be one of {ALLOWED_WIDTHS}")
        if self.encoder not in ("full", "tiny"):
            raise ValueError("encoder must be full or tiny")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0 < self.holdout < 0.5:
            raise ValueError("holdout must be in (0, 0.5)")
        if self.encoder_train is None:
            object.__setattr__(self, "encoder_train", TR.TrainConfig.encoder(self.encoder))
        if self.fusion_train is None:
            object.__setattr__(self, "fusion_train", TR.TrainConfig.fusion(self.encoder))

    @property
    def encoder_cfg(self) -> E.EncoderConfig:
        return E.EncoderConfig.named(self.encoder)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        """Build from flat ``key=value`` strings; nested fields use dotted keys (``fusion_train.lr``)."""
        top, nested = {}, {}
        for key, raw in pairs.items():
            head, _, rest = key.partition(".")
            if rest:
                nested.setdefault(head, {})[rest] = raw
            else:
                top[head] = raw
        names = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in top.items():
            if k not in names or k in _NESTED:
                raise ValueError(f"unknown config key {k!r}")
            kwargs[k] = _coerce(v, type(getattr(cls(), k)))
        base = cls(**kwargs)
        for head, sub in nested.items():
            if head not in _NESTED:
                raise ValueError(f"unknown config section {head!r}")
            cur = getattr(base, head)
            upd = {}
            for k, v in sub.items():
                if not hasattr(cur, k):
                    raise ValueError(f"unknown config key {head}.{k}")
                old = getattr(cur, k)
                upd[k] = tuple(int(x) for x in v.split(",")) if isinstance(old, tuple) else _coerce(v, type(old))
            kwargs[head] = replace(cur, **upd)
        return cls(**kwargs)


_NESTED = ("encoder_train", "fusion_train", "fusion", "augment")


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v.strip('"').strip("'")
    return out


# ------------------------------------------------------------------- data


def load_manifest(path: str | Path) -> list[EpitheliumSample]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    samples = []
    for row in rows:
        try:
            img = np.asarray(Image.open(root / row["image"]).convert("RGB"))
            mask = np.asarray(Image.open(root / row["mask"]).convert("L")) > 127
            samples.append(EpitheliumSample(row["id"], img, mask, row.get("grade")))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad row {row!r}: {exc}") from exc
    if not samples:
        raise DataError(f"{path}: manifest is empty")
    return samples


@dataclass
class SegmentedImage:
    id: str
    grade: str | None
    crops: list[np.ndarray]
    standardized: np.ndarray  # (N, 3, H, W) float32
    geometry: list[dict]


def segment_sample(sample: EpitheliumSample, cfg: RunConfig) -> SegmentedImage:
    segs = localize(sample, cfg.seg_width, cfg.encoder_cfg.input_hw, cfg.smooth)
    if sample.grade is not None:
        TR.propagate_weak_labels(sample, segs)
    return SegmentedImage(
        sample.id,
        sample.grade,
        [s.crop for s in segs],
        np.stack([s.standardized for s in segs]).astype(np.float32),
        [s.geometry.to_dict() for s in segs],
    )


def segment_all(samples: list[EpitheliumSample], cfg: RunConfig) -> dict[str, SegmentedImage]:
    out = {}
    for s in samples:
        try:
            out[s.id] = segment_sample(s, cfg)
        except Exception as exc:  # noqa: BLE001 - rewrap with the image id
            raise StageError("segment", DataError(f"{s.id}: {exc}")) from exc
    return out


# ------------------------------------------------------------------- folds


def _inner_holdout(ids: list[str], grades: dict[str, str], share: float, rng) -> tuple[list[str], list[str]]:
    """Stratified carve-out of roughly ``share`` of ``ids`` for early stopping."""
    k = min(max(2, int(round(1 / share))), len(ids))
    split = TR.stratified_split([(i, grades[i]) for i in ids], k, rng)[0]
    return list(split.train_ids), list(split.val_ids)


def fold_partition(pairs: list[tuple[str, str]], cfg: RunConfig, fold: int) -> tuple[list[str], list[str], list[str]]:
    """(fit, early-stopping, validation) image ids for a 1-based fold, as used by ``run``."""
    splits = TR.stratified_split(pairs, cfg.folds, substream(cfg.seed, "split"))
    if not 1 <= fold <= len(splits):
        raise ValueError(f"fold must be in 1..{len(splits)}")
    sp = splits[fold - 1]
    fit, stop = _inner_holdout(list(sp.train_ids), dict(pairs), cfg.holdout, substream(cfg.seed, "split", "inner", fold))
    return fit, stop, list(sp.val_ids)


def all_data_partition(pairs: list[tuple[str, str]], cfg: RunConfig) -> tuple[list[str], list[str]]:
    """(fit, early-stopping) ids when training on every image without a test fold."""
    return _inner_holdout([i for i, _ in pairs], dict(pairs), cfg.holdout, substream(cfg.seed, "split", "inner", 0))


def _encoder_arrays(images: list[SegmentedImage], cfg: RunConfig, rng, balance: bool):
    enc = cfg.encoder_cfg
    by_class: dict[str, list] = {g: [] for g in GRADES}
    std_by_class: dict[str, list] = {g: [] for g in GRADES}
    for im in images:
        by_class[im.grade].extend(im.crops)
        std_by_class[im.grade].extend(im.standardized)
    xs, ys = [], []
    if balance:
        present = {g: v for g, v in by_class.items() if v}
        balanced = TR.balance_upsample(present, rng, cfg.augment)
        for g, items in balanced.items():
            n0 = len(by_class[g])
            xs.extend(std_by_class[g])
            for crop in items[n0:]:
                xs.append(standardize_segment(crop, target_h=enc.input_hw[1], target_w=enc.input_hw[0]).astype(np.float32))
            ys.extend([GRADES.index(g)] * len(items))
    else:
        for g in GRADES:
            xs.extend(std_by_class[g])
            ys.extend([GRADES.index(g)] * len(std_by_class[g]))
    return np.stack(xs), np.asarray(ys)


def _sequences(images, params, enc):
    return [E.encode_batch(im.standardized, params, enc) for im in images]


def train_encoder_stage(fit_imgs, stop_imgs, cfg: RunConfig, fold: int, log_path=None) -> tuple[TR.TrainResult, int]:
    """Balance (with augmented copies), then fit the encoder; returns (result, training segments)."""
    try:
        x_tr, y_tr = _encoder_arrays(fit_imgs, cfg, substream(cfg.seed, "augment", fold), cfg.balance)
        x_st, y_st = _encoder_arrays(stop_imgs, cfg, None, balance=False)
        init = substream(cfg.seed, "init", "encoder", fold)
        params = E.init_params(cfg.encoder_cfg, init)
        if cfg.stage1_checkpoint:
            E.import_stage1(params, load_checkpoint(cfg.stage1_checkpoint, kind="encoder").params)
        res = TR.train_encoder(
            x_tr, y_tr, x_st, y_st, cfg.encoder_cfg, cfg.encoder_train,
            init, substream(cfg.seed, "shuffle", "encoder", fold),
            log_path, params=params, freeze_stage1=cfg.freeze_stage1,
        )
    except TR.DivergedLoss:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError("train-encoder", exc) from exc
    return res, len(x_tr)


def train_fusion_stage(seq_fit, y_fit, seq_stop, y_stop, cfg: RunConfig, fold: int, log_path=None) -> tuple[TR.TrainResult, TR.ClassWeights]:
    try:
        q = TR.class_weights(np.bincount(y_fit, minlength=len(GRADES)))
        res = TR.train_fusion(
            seq_fit, y_fit, seq_stop, y_stop, cfg.fusion, cfg.fusion_train, q,
            substream(cfg.seed, "init", "fusion", fold), substream(cfg.seed, "shuffle", "fusion", fold),
            log_path,
        )
    except TR.DivergedLoss:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError("train-fusion", exc) from exc
    return res, q


def run_fold(split: TR.FoldSplit, data: dict[str, SegmentedImage], cfg: RunConfig, out_dir: Path | None = None) -> dict:
    enc = cfg.encoder_cfg
    grades = {i: data[i].grade for i in data}
    seed, fold = cfg.seed, split.fold
    fit_ids, stop_ids = _inner_holdout(list(split.train_ids), grades, cfg.holdout, substream(seed, "split", "inner", fold))
    fit_imgs = [data[i] for i in fit_ids]
    stop_imgs = [data[i] for i in stop_ids]
    val_imgs = [data[i] for i in split.val_ids]
    if not fit_imgs or not stop_imgs or not val_imgs:
        raise StageError("train-encoder", TR.EmptySplit(f"fold {fold} has an empty partition"))

    fdir = None
    if out_dir is not None:
        fdir = out_dir / f"fold_{fold}"
        fdir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    enc_res, n_seg = train_encoder_stage(fit_imgs, stop_imgs, cfg, fold, fdir / "encoder_log.csv" if fdir else None)
    t_enc = time.perf_counter() - t0

    try:
        seq_fit = _sequences(fit_imgs, enc_res.params, enc)
        seq_stop = _sequences(stop_imgs, enc_res.params, enc)
        seq_val = _sequences(val_imgs, enc_res.params, enc)
    except Exception as exc:  # noqa: BLE001
        raise StageError("encode", exc) from exc

    y_fit = np.array([GRADES.index(im.grade) for im in fit_imgs])
    y_stop = np.array([GRADES.index(im.grade) for im in stop_imgs])
    y_val = np.array([GRADES.index(im.grade) for im in val_imgs])
    fus_res, q = train_fusion_stage(seq_fit, y_fit, seq_stop, y_stop, cfg, fold, fdir / "fusion_log.csv" if fdir else None)

    probs = TR.fusion_probs(seq_val, fus_res.params, cfg.fusion)
    scored = M.ScoredPredictions(y_val, probs, [im.id for im in val_imgs])
    report = {
        "fold": fold,
        "n_train_images": len(fit_imgs),
        "n_stop_images": len(stop_imgs),
        "n_val_images": len(val_imgs),
        "n_train_segments": int(n_seg),
        "encoder_best_epoch": enc_res.best_epoch,
        "encoder_epochs": enc_res.epochs_run,
        "encoder_best_val_loss": enc_res.best_val_loss,
        "fusion_best_epoch": fus_res.best_epoch,
        "fusion_epochs": fus_res.epochs_run,
        "fusion_best_val_loss": fus_res.best_val_loss,
        "class_weights": list(q.q),
        "metrics": M.evaluate(scored),
    }
    log.info("fold %d: exact ACC %.3f (encoder %.0fs, %d epochs)", fold, report["metrics"]["Exact"]["ACC"], t_enc, enc_res.epochs_run)

    if fdir is not None:
        meta = {"seed": seed, "fold": fold}
        save_checkpoint(fdir / "encoder.ckpt", "encoder", enc.to_dict(), enc_res.params, {**meta, "epoch": enc_res.best_epoch, "best_val_loss": enc_res.best_val_loss})
        save_checkpoint(fdir / "fusion.ckpt", "fusion", cfg.fusion.to_dict(), fus_res.params, {**meta, "epoch": fus_res.best_epoch, "best_val_loss": fus_res.best_val_loss})
        write_json(fdir / "report.json", report)
        write_json(fdir / "predictions.json", scored.to_dict())
        reports = [F.predict_with_report(F.SegmentLogitSequence(s, im.id), fus_res.params, cfg.fusion).to_dict() for s, im in zip(seq_val, val_imgs)]
        write_json(fdir / "attention.json", reports)
    return {"report": report, "scored": scored}


SUMMARY_KEYS = ("ACC", "P", "R", "F1", "MCC", "kappa", "AUC", "AP")


def aggregate(fold_reports: list[dict], pooled: M.ScoredPredictions) -> dict:
    """Mean and standard deviation over folds, plus metrics on the pooled predictions."""
    per_scheme = {}
    for scheme in fold_reports[0]["metrics"]:
        stats = {}
        for key in SUMMARY_KEYS:
            vals = [r["metrics"][scheme].get(key) for r in fold_reports]
            if any(v is None for v in vals):
                continue
            arr = np.asarray(vals, dtype=np.float64)
            stats[key] = {"mean": float(np.mean(arr)), "std": float(np.std(arr)), "folds": arr.tolist()}
        per_scheme[scheme] = stats
    return {"n_folds": len(fold_reports), "fold_summary": per_scheme, "pooled": M.evaluate(pooled)}


def run_pipeline(manifest: str | Path | list[EpitheliumSample], cfg: RunConfig, out_dir: str | Path | None = None, data: dict | None = None) -> dict:
    """Cross-validated run; returns ``{"folds": [...], "aggregate": {...}}``."""
    samples = manifest if isinstance(manifest, list) else load_manifest(manifest)
    missing = [s.id for s in samples if s.grade is None]
    if missing:
        raise StageError("segment", TR.MissingLabel(f"{len(missing)} images lack a grade, e.g. {missing[0]}"))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else segment_all(samples, cfg)
    try:
        splits = TR.stratified_split([(s.id, s.grade) for s in samples], cfg.folds, substream(cfg.seed, "split"))
    except TR.BadK as exc:
        raise StageError("split", exc) from exc

    workers = min(worker_count(), len(splits))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_single_thread) as pool:
            results = list(pool.map(run_fold, splits, [data] * len(splits), [cfg] * len(splits), [out] * len(splits)))
    else:
        results = [run_fold(sp, data, cfg, out) for sp in splits]
    reports = [r["report"] for r in results]
    pooled = M.ScoredPredictions.concat([r["scored"] for r in results])
    agg = aggregate(reports, pooled)
    agg["config"] = cfg.to_dict()
    if out is not None:
        write_json(out / "aggregate.json", agg)
        M.write_flow_csv(pooled.truth, pooled.predicted, out / "flow.csv")
        for scheme, row in agg["pooled"].items():
            if "confusion" in row:
                labels = M.SCHEMES[scheme].labels
                M.ConfusionMatrix(np.asarray(row["confusion"]), labels).to_csv(out / f"confusion_{scheme}.csv")
        write_json(out / "pooled_predictions.json", pooled.to_dict())
    return {"folds": reports, "aggregate": agg}


def worker_count() -> int:
    """Parallelism cap from ``EPIGRADE_THREADS`` (default 1)."""
    raw = os.environ.get("EPIGRADE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"EPIGRADE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("EPIGRADE_THREADS must be >= 1")
    return n


_LIMITS = []


def _single_thread() -> None:
    # fold workers each get one BLAS thread so the total stays within the cap
    _LIMITS.append(threadpool_limits(limits=1))
