"""Classification metrics and grade-grouping scoring schemes.

All scores are fractions in [0, 1] (kappa and MCC in [-1, 1]). Labels are grade
indices 0..3 (Normal..CIN3) unless stated otherwise.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

GRADES = ("Normal", "CIN1", "CIN2", "CIN3")


class UnknownScheme(ValueError):
    pass


def as_index(labels) -> np.ndarray:
    """Grade names or integers -> int array."""
    out = []
    for v in labels:
        if isinstance(v, str):
            out.append(GRADES.index(v))
        else:
            out.append(int(v))
    return np.asarray(out, dtype=np.int64)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction
    labels: tuple[str, ...] = GRADES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if k < 2 or self.counts.shape != (k, k) or (self.counts < 0).any():
            raise ValueError(f"confusion matrix must be {k}x{k} non-negative, K >= 2")

    @classmethod
    def from_labels(cls, truth, pred, labels: tuple[str, ...] = GRADES) -> "ConfusionMatrix":
        k = len(labels)
        t, p = as_index(truth), as_index(pred)
        cm = np.zeros((k, k), dtype=np.int64)
        np.add.at(cm, (t, p), 1)
        return cls(cm, tuple(labels))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\pred", *self.labels])
            for lab, row in zip(self.labels, self.counts):
                w.writerow([lab, *row.tolist()])


def _safe_div(num: np.ndarray, den: np.ndarray, what: str) -> np.ndarray:
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    zero = den == 0
    if zero.any():
        warnings.warn(f"{what} undefined for {int(zero.sum())} class(es); counted as 0", RuntimeWarning, stacklevel=3)
    return np.where(zero, 0.0, num / np.where(zero, 1.0, den))


def weighted_prf(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """Support-weighted precision, recall, F1, plus accuracy."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    if n == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    prec = _safe_div(tp, predicted, "precision")
    rec = _safe_div(tp, support, "recall")
    s = prec + rec
    f1 = np.where(s > 0, 2 * prec * rec / np.where(s > 0, s, 1.0), 0.0)
    w = support / n
    return float(w @ prec), float(w @ rec), float(w @ f1), float(tp.sum() / n)


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation (covariance form); 0 when undefined."""
    c = cm.counts.astype(np.float64)
    s = c.sum()
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    num = np.trace(c) * s - t @ p
    den = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    if den == 0:
        return 0.0
    return float(num / den)


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa; NaN when expected agreement is 1 (a single class everywhere)."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    po = np.trace(c) / n
    pe = (c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    if pe == 1.0:
        return float("nan")
    return float((po - pe) / (1 - pe))


def binary_auc(y, scores) -> float:
    """ROC AUC via mid-rank statistics; ties add one half."""
    y = np.asarray(y).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def binary_ap(y, scores) -> float:
    """Average precision: sum over distinct thresholds of (delta recall) * precision."""
    y = np.asarray(y).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # keep the last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = tp[last].astype(np.float64)
    prec = tp / (last + 1)
    rec = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


@dataclass
class ScoredPredictions:
    truth: np.ndarray  # (n,) grade indices
    probs: np.ndarray  # (n, 4)
    ids: list[str] | None = None

    def __post_init__(self):
        self.truth = as_index(self.truth)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.truth), len(GRADES)):
            raise ValueError(f"probs must be (n, {len(GRADES)})")
        if (self.probs < -1e-12).any() or np.abs(self.probs.sum(axis=1) - 1).max(initial=0) > 1e-6:
            raise ValueError("probability rows must lie on the simplex")

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def __len__(self) -> int:
        return len(self.truth)

    @classmethod
    def concat(cls, parts: list["ScoredPredictions"]) -> "ScoredPredictions":
        ids = [i for p in parts for i in (p.ids or [""] * len(p))]
        return cls(np.concatenate([p.truth for p in parts]), np.concatenate([p.probs for p in parts]), ids)

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids) if self.ids is not None else None,
            "truth": [GRADES[i] for i in self.truth],
            "predicted": [GRADES[i] for i in self.predicted],
            "probs": self.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredPredictions":
        return cls(d["truth"], d["probs"], d.get("ids"))


def auc_ap(truth, probs) -> tuple[float, float]:
    """Support-weighted one-vs-rest AUC and AP; classes lacking positives or negatives are skipped."""
    t = as_index(truth)
    P = np.asarray(probs, dtype=np.float64)
    aucs, aps, ws = [], [], []
    for k in range(P.shape[1]):
        y = t == k
        if y.all() or not y.any():
            continue
        aucs.append(binary_auc(y, P[:, k]))
        aps.append(binary_ap(y, P[:, k]))
        ws.append(y.sum())
    if not ws:
        return float("nan"), float("nan")
    w = np.asarray(ws, dtype=np.float64) / np.sum(ws)
    return float(w @ np.asarray(aucs)), float(w @ np.asarray(aps))


# ---------------------------------------------------------------- schemes


@dataclass(frozen=True)
class Scheme:
    name: str
    groups: tuple[tuple[int, ...], ...] | None  # None -> ordinal tolerance scoring
    labels: tuple[str, ...] = ()

    def group_of(self) -> np.ndarray:
        m = np.empty(len(GRADES), dtype=np.int64)
        for gi, members in enumerate(self.groups):
            m[list(members)] = gi
        return m


SCHEMES = {
    "Exact": Scheme("Exact", ((0,), (1,), (2,), (3,)), GRADES),
    "CINvsNormal": Scheme("CINvsNormal", ((0,), (1, 2, 3)), ("Normal", "CIN")),
    "CIN32vsCIN1N": Scheme("CIN32vsCIN1N", ((0, 1), (2, 3)), ("CIN1-Normal", "CIN3-CIN2")),
    "CIN3vsRest": Scheme("CIN3vsRest", ((0, 1, 2), (3,)), ("Rest", "CIN3")),
    "OffByOne": Scheme("OffByOne", None),
}


def get_scheme(name: str) -> Scheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise UnknownScheme(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


def apply_scheme(truth, pred, scheme: str):
    """Per-sample correctness plus remapped (truth, pred) group labels (None for OffByOne)."""
    s = get_scheme(scheme)
    t, p = as_index(truth), as_index(pred)
    if s.groups is None:
        return np.abs(p - t) <= 1, None, None
    g = s.group_of()
    gt, gp = g[t], g[p]
    return gt == gp, gt, gp


def group_probs(probs: np.ndarray, scheme: str) -> np.ndarray:
    """Grouped-class probability = sum of member probabilities."""
    s = get_scheme(scheme)
    P = np.asarray(probs, dtype=np.float64)
    return np.stack([P[:, list(m)].sum(axis=1) for m in s.groups], axis=1)


def evaluate(scored: ScoredPredictions, schemes=("Exact", "CINvsNormal", "CIN32vsCIN1N", "CIN3vsRest", "OffByOne")) -> dict:
    """Metrics per scheme. Binary schemes take the higher-grade group as the positive class for AUC/AP."""
    if schemes == "all" or schemes == ("all",):
        schemes = tuple(SCHEMES)
    out = {}
    pred = scored.predicted
    for name in schemes:
        s = get_scheme(name)
        correct, gt, gp = apply_scheme(scored.truth, pred, name)
        row = {"n": len(scored), "ACC": float(correct.mean())}
        if s.groups is not None:
            cm = ConfusionMatrix.from_labels(gt, gp, s.labels)
            P, R, F1, _ = weighted_prf(cm)
            row.update({"P": P, "R": R, "F1": F1, "MCC": mcc(cm), "kappa": kappa(cm), "confusion": cm.counts.tolist()})
            gprobs = group_probs(scored.probs, name)
            if len(s.groups) == 2:
                row["AUC"] = binary_auc(gt == 1, gprobs[:, 1])
                row["AP"] = binary_ap(gt == 1, gprobs[:, 1])
                row["positive"] = s.labels[1]
            else:
                row["AUC"], row["AP"] = auc_ap(gt, gprobs)
        out[name] = row
    return out


def flow_counts(truth, pred) -> list[tuple[str, str, int]]:
    """Truth -> predicted class flows with non-zero counts."""
    cm = ConfusionMatrix.from_labels(truth, pred).counts
    return [(GRADES[i], GRADES[j], int(cm[i, j])) for i in range(len(GRADES)) for j in range(len(GRADES)) if cm[i, j]]


def write_flow_csv(truth, pred, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth", "predicted", "count"])
        w.writerows(flow_counts(truth, pred))
