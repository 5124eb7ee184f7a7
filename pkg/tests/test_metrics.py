import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epigrade import metrics as M
from epigrade.metrics import ConfusionMatrix, ScoredPredictions, UnknownScheme

sk = pytest.importorskip("sklearn.metrics")

BINARY = ("neg", "pos")


def cm_of(rows, labels=None):
    rows = np.asarray(rows)
    return ConfusionMatrix(rows, labels or tuple(f"c{i}" for i in range(len(rows))))


def prf_oracle(c):
    """Per-class loops, then support weighting."""
    c = np.asarray(c, dtype=float)
    n = c.sum()
    P = R = F = 0.0
    for k in range(len(c)):
        tp, pred, sup = c[k, k], c[:, k].sum(), c[k].sum()
        p = tp / pred if pred else 0.0
        r = tp / sup if sup else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        P, R, F = P + sup / n * p, R + sup / n * r, F + sup / n * f
    return P, R, F, np.trace(c) / n


def pairs_auc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    hits = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return hits / (len(pos) * len(neg))


def test_perfect_diagonal():
    cm = cm_of(np.diag([3, 4, 5, 6]), M.GRADES)
    assert M.weighted_prf(cm) == (1.0, 1.0, 1.0, 1.0)
    assert M.mcc(cm) == 1.0 and M.kappa(cm) == 1.0


def test_binary_hand_case():
    cm = cm_of([[5, 0], [5, 0]], BINARY)
    with pytest.warns(RuntimeWarning):
        P, R, F, acc = M.weighted_prf(cm)
    assert acc == 0.5 and R == 0.5
    # class "pos" has no predictions: its precision counts as 0
    assert P == pytest.approx(0.5 * 0.5)


def test_weighted_prf_vs_oracles():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = rng.integers(0, 12, size=(4, 4))
        c[rng.integers(0, 4)] += 1
        cm = cm_of(c, M.GRADES)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = M.weighted_prf(cm)
        np.testing.assert_allclose(got, prf_oracle(c), atol=1e-12)
        t = np.repeat(np.repeat(np.arange(4), 4), c.ravel())
        p = np.repeat(np.tile(np.arange(4), 4), c.ravel())
        ref = sk.precision_recall_fscore_support(t, p, labels=range(4), average="weighted", zero_division=0)
        np.testing.assert_allclose(got[:3], ref[:3], atol=1e-12)
        assert abs(M.mcc(cm) - sk.matthews_corrcoef(t, p)) < 1e-12
        assert abs(M.kappa(cm) - sk.cohen_kappa_score(t, p)) < 1e-12


def test_mcc_cases():
    assert M.mcc(cm_of(np.full((4, 4), 7), M.GRADES)) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(200):
        (tn, fp), (fn, tp) = rng.integers(1, 30, size=(2, 2))
        classic = (tp * tn - fp * fn) / math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        assert abs(M.mcc(cm_of([[tn, fp], [fn, tp]], BINARY)) - classic) < 1e-12


def test_mcc_and_kappa_degenerate():
    single = cm_of([[9, 0], [0, 0]], BINARY)
    assert M.mcc(single) == 0.0
    assert math.isnan(M.kappa(single))


def test_kappa_hand_case():
    assert M.kappa(cm_of([[10, 5], [5, 10]], BINARY)) == pytest.approx(1 / 3, abs=1e-15)


def test_kappa_chance_level():
    rng = np.random.default_rng(2)
    t, p = rng.integers(0, 4, 10_000), rng.integers(0, 4, 10_000)
    assert abs(M.kappa(ConfusionMatrix.from_labels(t, p))) < 0.05


def test_auc_ap_cases():
    y = np.array([0, 0, 1, 1])
    assert M.binary_auc(y, [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert M.binary_ap(y, [0.1, 0.2, 0.8, 0.9]) == 1.0
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 10_000)
    assert abs(M.binary_auc(y, rng.random(10_000)) - 0.5) < 0.02


def test_auc_pair_count_oracle():
    y = [1, 0, 1, 0, 0, 1]
    s = [0.3, 0.3, 0.9, 0.1, 0.5, 0.5]
    assert abs(M.binary_auc(y, s) - pairs_auc(y, s)) < 1e-12
    rng = np.random.default_rng(4)
    for _ in range(200):
        y = rng.integers(0, 2, 6)
        if y.all() or not y.any():
            continue
        s = rng.integers(0, 4, 6) / 4  # coarse scores force ties
        assert abs(M.binary_auc(y, s) - pairs_auc(y, s)) < 1e-12
        assert abs(M.binary_ap(y, s) - sk.average_precision_score(y, s)) < 1e-12


def test_auc_monotone_invariance():
    rng = np.random.default_rng(5)
    y, s = rng.integers(0, 2, 50), rng.random(50)
    assert M.binary_auc(y, s) == M.binary_auc(y, np.exp(3 * s) - 7)


def test_weighted_ovr_vs_sklearn():
    rng = np.random.default_rng(6)
    t = rng.integers(0, 4, 80)
    p = rng.dirichlet(np.ones(4), 80)
    auc, ap = M.auc_ap(t, p)
    assert abs(auc - sk.roc_auc_score(t, p, multi_class="ovr", average="weighted")) < 1e-12
    onehot = np.eye(4)[t]
    assert abs(ap - sk.average_precision_score(onehot, p, average="weighted")) < 1e-12


def test_scheme_examples():
    def ok(t, p):
        return {s: bool(M.apply_scheme([t], [p], s)[0][0]) for s in M.SCHEMES}

    r = ok("CIN3", "CIN2")
    assert not r["Exact"] and r["CIN32vsCIN1N"] and r["OffByOne"]
    assert all(ok("Normal", "Normal").values())
    r = ok("Normal", "CIN2")
    assert not any(r[s] for s in ("Exact", "CINvsNormal", "CIN32vsCIN1N", "OffByOne"))
    # both grades fall in the "rest" group, so this grouping counts it correct
    assert r["CIN3vsRest"]
    with pytest.raises(UnknownScheme):
        M.get_scheme("Lenient")


def test_scheme_monotonicity_sweep():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        n = int(rng.integers(1, 8))
        t, p = rng.integers(0, 4, n), rng.integers(0, 4, n)
        exact = M.apply_scheme(t, p, "Exact")[0]
        for name in ("CINvsNormal", "CIN32vsCIN1N", "CIN3vsRest", "OffByOne"):
            assert not (exact & ~M.apply_scheme(t, p, name)[0]).any()


def test_scheme_monotonicity_exhaustive():
    for t, p in itertools.product(range(4), repeat=2):
        if t == p:
            assert all(M.apply_scheme([t], [p], s)[0][0] for s in M.SCHEMES)


def test_group_probs_sum_members():
    p = np.array([[0.1, 0.2, 0.3, 0.4]])
    np.testing.assert_allclose(M.group_probs(p, "CINvsNormal"), [[0.1, 0.9]])
    np.testing.assert_allclose(M.group_probs(p, "CIN32vsCIN1N"), [[0.3, 0.7]])
    np.testing.assert_allclose(M.group_probs(p, "CIN3vsRest"), [[0.6, 0.4]])


def test_evaluate_all_correct():
    t = np.repeat(np.arange(4), 3)
    scored = ScoredPredictions(t, np.eye(4)[t] * 0.9 + 0.025)
    rep = M.evaluate(scored)
    for name, row in rep.items():
        assert row["ACC"] == 1.0
        if name != "OffByOne":
            assert row["kappa"] == 1.0 and row["MCC"] == 1.0 and row["AUC"] == 1.0
    assert set(rep["OffByOne"]) == {"n", "ACC"}
    assert rep["CINvsNormal"]["positive"] == "CIN"


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    t = rng.integers(0, 4, 40)
    p = rng.dirichlet(np.ones(4), 40)
    perm = rng.permutation(40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = M.evaluate(ScoredPredictions(t, p))
        b = M.evaluate(ScoredPredictions(t[perm], p[perm]))
    for name in a:
        for key, v in a[name].items():
            if isinstance(v, float):
                assert v == pytest.approx(b[name][key], abs=1e-12)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=30))
def test_kappa_mcc_one_iff_diagonal(pairs):
    t, p = zip(*pairs)
    cm = ConfusionMatrix.from_labels(t, p)
    diagonal = (cm.counts == np.diag(np.diag(cm.counts))).all()
    present = (np.diag(cm.counts) > 0).sum() >= 2
    assert (abs(M.mcc(cm) - 1) < 1e-12) == (diagonal and present)
    k = M.kappa(cm)
    assert (not math.isnan(k) and abs(k - 1) < 1e-12) == (diagonal and present)


def test_scored_predictions_validation_and_round_trip():
    with pytest.raises(ValueError):
        ScoredPredictions([0], [[0.5, 0.6, 0, 0]])
    s = ScoredPredictions(["CIN1", "Normal"], [[0.2, 0.5, 0.2, 0.1], [0.4, 0.4, 0.1, 0.1]], ["a", "b"])
    assert list(s.predicted) == [1, 0]  # tie goes to the lower grade
    back = ScoredPredictions.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.probs, s.probs)
    assert back.ids == ["a", "b"]


def test_flow_counts_and_confusion_csv(tmp_path):
    t, p = ["Normal", "Normal", "CIN3", "CIN2"], ["Normal", "CIN1", "CIN3", "CIN3"]
    flows = M.flow_counts(t, p)
    assert sum(c for *_, c in flows) == 4
    assert ("Normal", "CIN1", 1) in flows and ("CIN2", "CIN3", 1) in flows
    M.write_flow_csv(t, p, tmp_path / "flow.csv")
    assert (tmp_path / "flow.csv").read_text().splitlines()[0] == "truth,predicted,count"
    ConfusionMatrix.from_labels(t, p).to_csv(tmp_path / "cm.csv")
    assert len((tmp_path / "cm.csv").read_text().splitlines()) == 5
