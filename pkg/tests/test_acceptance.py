"""End-to-end acceptance checks, one or more tests per numbered criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import math
import time
import warnings

import numpy as np
import pytest

from epigrade import encoder as E
from epigrade import fusion as F
from epigrade import localize as L
from epigrade import metrics as M
from epigrade import pipeline as P
from epigrade import tensor as T
from epigrade import train as TR
from epigrade.gradcheck import check_gradients, projected_loss
from epigrade.localize import EpitheliumSample
from epigrade.synthgen import generate_dataset
from epigrade.tensor import Tensor
from epigrade.train import ClassWeights

criterion = pytest.mark.criterion

# shapes quoted for the full encoder on a 3x64x704 input, stage by stage
TABLE_I = [
    (64, 32, 352),
    (64, 16, 176),
    (256, 16, 176),
    (128, 8, 88),
    (512, 8, 88),
    (256, 4, 44),
    (1024, 4, 44),
    (1024, 1, 44),
]


# ------------------------------------------------------------- 1. shapes


@criterion(1, "full encoder reproduces the Table I size column")
def test_table_i_shapes():
    t0 = time.perf_counter()
    cfg = E.EncoderConfig.full()
    params = E.init_params(cfg, np.random.default_rng(0))
    trace = []
    x = Tensor(np.random.default_rng(1).normal(size=(3, 64, 704)).astype(np.float32))
    seq = E.stage1_forward(x, params, cfg, trace)
    steps, final = E.stage2_forward(seq, params)
    elapsed = time.perf_counter() - t0
    assert trace == TABLE_I
    assert seq.shape == (44, 1024) and steps.shape == (44, 4) and final.shape == (4,)
    assert elapsed < 10, elapsed


# ---------------------------------------------------------- 2. gradients

GRAD_TOL = 1e-4
_grad_clock = {"total": 0.0}


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def gcheck(loss_fn, tensors, **kw):
    t0 = time.perf_counter()
    err = check_gradients(loss_fn, tensors, h=1e-5, **kw)
    _grad_clock["total"] += time.perf_counter() - t0
    return err


def _conv_case(rng, stride, padding):
    x, W, b = t64(rng, 2, 3, 7, 8), t64(rng, 4, 3, 3, 3), t64(rng, 4)
    out = T.conv2d(x, W, b, stride=stride, padding=padding)
    w = rng.normal(size=out.shape)
    return lambda: projected_loss(T.conv2d(x, W, b, stride=stride, padding=padding), w), [x, W, b]


@criterion(2, "finite-difference gradient suite")
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 3)])
def test_grad_conv2d(stride, padding):
    f, ts = _conv_case(np.random.default_rng(10 + stride + padding), stride, padding)
    assert gcheck(f, ts) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
@pytest.mark.parametrize("kind,k,s,p", [("max", 3, 2, 1), ("max", 2, 2, 0), ("avg", 2, 2, 0), ("avg", 3, 1, 1)])
def test_grad_pools(kind, k, s, p):
    rng = np.random.default_rng(20)
    x = t64(rng, 2, 3, 8, 9)
    w = rng.normal(size=T.pool2d(x, kind, k, s, p).shape)
    assert gcheck(lambda: projected_loss(T.pool2d(x, kind, k, s, p), w), [x]) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_linear():
    rng = np.random.default_rng(30)
    x, W, b = t64(rng, 5, 6), t64(rng, 3, 6), t64(rng, 3)
    w = rng.normal(size=(5, 3))
    assert gcheck(lambda: projected_loss(T.linear(x, W, b), w), [x, W, b]) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "softmax", "log_softmax", "channel_standardize"])
def test_grad_activations(kind):
    rng = np.random.default_rng(40)
    fn = {
        "log_softmax": lambda a: T.log_softmax(a, axis=-1),
        "channel_standardize": T.channel_standardize,
    }.get(kind, lambda a: T.activation(a, kind))
    x = t64(rng, 2, 3, 4, 5, scale=2.0)
    w = rng.normal(size=x.shape)
    assert gcheck(lambda: projected_loss(fn(x), w), [x]) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_lstm_step():
    rng = np.random.default_rng(50)
    p = T.lstm_params(rng, 5, 4)
    for key in ("b_ih", "b_hh"):
        p[key].data[:] = rng.normal(scale=0.5, size=p[key].shape)
    x, h, c = t64(rng, 3, 5), t64(rng, 3, 4, scale=0.5), t64(rng, 3, 4, scale=0.5)
    wh, wc = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def loss():
        h1, c1 = T.lstm_step(x, h, c, p)
        return projected_loss(h1, wh) + projected_loss(c1, wc)

    assert gcheck(loss, [x, h, c, *T.parameters(p)]) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_gru_step():
    rng = np.random.default_rng(60)
    p = T.gru_params(rng, 4, 5)
    for key in ("b_ih", "b_hh"):
        p[key].data[:] = rng.normal(scale=0.5, size=p[key].shape)
    x, h = t64(rng, 3, 4), t64(rng, 3, 5, scale=0.5)
    w = rng.normal(size=(3, 5))
    assert gcheck(lambda: projected_loss(T.gru_step(x, h, p), w), [x, h, *T.parameters(p)]) < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_dense_block():
    rng = np.random.default_rng(70)
    cfg = E.EncoderConfig.tiny()
    layers = E.init_params(cfg, rng, np.float64)["blocks"][0]
    for lp in layers:
        for conv in lp.values():
            conv["b"].data[:] = rng.normal(scale=0.1, size=conv["b"].shape)
    x = t64(rng, 1, cfg.stem_channels, 6, 7)
    w = rng.normal(size=E.dense_block(x, layers).shape)
    err = gcheck(lambda: projected_loss(E.dense_block(x, layers), w), [x, *T.parameters(layers)], max_entries=40, rng=rng)
    assert err < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_tiny_encoder_end_to_end():
    rng = np.random.default_rng(80)
    cfg = E.EncoderConfig.tiny()
    params = E.init_params(cfg, rng, np.float64)
    x = t64(rng, 1, 3, *cfg.input_hw)
    w = rng.normal(size=E.forward_logits(x, params, cfg).shape)
    err = gcheck(lambda: projected_loss(E.forward_logits(x, params, cfg), w), [x, *T.parameters(params)], max_entries=6, rng=rng)
    assert err < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_full_fusion_stack():
    rng = np.random.default_rng(90)
    p = F.init_params(F.FusionConfig(), rng, np.float64)
    p["b_vs"].data[:] = rng.normal(scale=0.3, size=p["b_vs"].shape)
    xs = t64(rng, 7, 4, scale=2.0)
    w = rng.normal(size=4)
    err = gcheck(lambda: projected_loss(F.forward(xs, p)[0], w), [xs, *T.parameters(p)], max_entries=25, rng=rng)
    assert err < GRAD_TOL


@criterion(2, "finite-difference gradient suite")
def test_grad_suite_runtime():
    # runs after the checks above in file order
    assert 0 < _grad_clock["total"] < 120, _grad_clock["total"]


# ---------------------------------------------------------- 3. attention


@pytest.fixture(scope="module")
def fusion64():
    rng = np.random.default_rng(100)
    p = F.init_params(F.FusionConfig(), rng, np.float64)
    p["b_vs"].data[:] = rng.normal(scale=0.5, size=p["b_vs"].shape)
    return p


@criterion(3, "attention weights form a simplex, uniform on ties, identity at N=1")
def test_attention_invariants_sweep(fusion64):
    rng = np.random.default_rng(101)
    lengths = rng.integers(1, 119, 10_000)
    lengths[:50] = 1  # make sure the singleton case is well represented
    checked = 0
    for n in np.unique(lengths):
        b = int((lengths == n).sum())
        xs = rng.normal(scale=3.0, size=(int(n), b, 4))
        hs = F.gru_encode(xs, fusion64)
        alphas = F.attention(hs, fusion64).data
        assert (alphas >= 0).all()
        assert np.abs(alphas.sum(axis=0) - 1).max() < 1e-9
        if n == 1:
            v = F.fuse(hs, F.attention(hs, fusion64)).data
            assert np.array_equal(v, hs.data[0])
        checked += b
    assert checked == 10_000


@criterion(3, "attention weights form a simplex, uniform on ties, identity at N=1")
def test_attention_uniform_on_identical_states(fusion64):
    rng = np.random.default_rng(102)
    for n in list(range(1, 119)) * 2:
        h = rng.normal(size=(1, 128))
        hs = Tensor(np.repeat(h, n, axis=0))
        alphas = F.attention(hs, fusion64).data
        assert np.abs(alphas - 1 / n).max() < 1e-12


# ------------------------------------------------------------- 4. metrics


def oracle_prf(t, p, k):
    n = len(t)
    P = R = Fs = 0.0
    for c in range(k):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        pred = sum(1 for b in p if b == c)
        sup = sum(1 for a in t if a == c)
        prec = tp / pred if pred else 0.0
        rec = tp / sup if sup else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        P += sup / n * prec
        R += sup / n * rec
        Fs += sup / n * f
    return P, R, Fs, sum(1 for a, b in zip(t, p) if a == b) / n


def oracle_kappa(t, p, k):
    n = len(t)
    po = sum(1 for a, b in zip(t, p) if a == b) / n
    pe = sum((sum(1 for a in t if a == c) / n) * (sum(1 for b in p if b == c) / n) for c in range(k))
    return math.nan if pe == 1 else (po - pe) / (1 - pe)


def oracle_mcc(t, p, k):
    # correlation of one-hot indicator matrices
    X, Y = np.eye(k)[t], np.eye(k)[p]
    Xc, Yc = X - X.mean(axis=0), Y - Y.mean(axis=0)
    cxy, cxx, cyy = (Xc * Yc).sum(), (Xc * Xc).sum(), (Yc * Yc).sum()
    return 0.0 if cxx * cyy == 0 else cxy / math.sqrt(cxx * cyy)


def oracle_auc(y, s):
    pos = [v for v, yy in zip(s, y) if yy]
    neg = [v for v, yy in zip(s, y) if not yy]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


@criterion(4, "metrics match brute-force oracles on 200 random sets")
def test_metric_oracles():
    rng = np.random.default_rng(200)
    done = 0
    while done < 200:
        k = int(rng.integers(2, 5))
        n = int(rng.integers(2, 31))
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = M.ConfusionMatrix.from_labels(t, p, tuple(f"c{i}" for i in range(k)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = M.weighted_prf(cm)
        np.testing.assert_allclose(got, oracle_prf(t, p, k), atol=1e-9, rtol=0)
        ok, got_k = oracle_kappa(t, p, k), M.kappa(cm)
        assert (math.isnan(ok) and math.isnan(got_k)) or abs(ok - got_k) < 1e-9
        assert abs(M.mcc(cm) - oracle_mcc(t, p, k)) < 1e-9
        y = rng.integers(0, 2, n)
        if y.all() or not y.any():
            continue
        s = rng.integers(0, 6, n) / 5 if done % 2 else rng.random(n)
        assert abs(M.binary_auc(y, s) - oracle_auc(y, s)) < 1e-9
        done += 1


# ------------------------------------------------------ 5. monotonicity


@criterion(5, "exact accuracy never exceeds any lenient scheme")
def test_scheme_monotonicity():
    rng = np.random.default_rng(300)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 31))
        t, p = rng.integers(0, 4, n), rng.integers(0, 4, n)
        exact = M.apply_scheme(t, p, "Exact")[0].mean()
        for name in ("CINvsNormal", "CIN32vsCIN1N", "CIN3vsRest", "OffByOne"):
            violations += exact > M.apply_scheme(t, p, name)[0].mean()
    assert violations == 0


# ------------------------------------------------------------ 6. geometry


def _band():
    m = np.zeros((300, 640), bool)
    m[50:250, :] = True
    return m


@criterion(6, "straight band gives ten 64 px segments, stable under 37 degree rotation")
def test_geometry_straight_and_rotated():
    m = _band()
    img = np.full(m.shape + (3,), 200, np.uint8)
    straight = L.localize(EpitheliumSample("s", img, m), seg_width=64)
    assert len(straight) == 10
    assert all(abs(s.crop.shape[1] - 64) <= 1 for s in straight)

    phi = np.deg2rad(37)
    rm = L.rotate_raster(m.astype(float), phi) > 0.5
    rimg = L.rotate_raster(img.astype(float), phi, cval=255).astype(np.uint8)
    rotated = L.localize(EpitheliumSample("r", rimg, rm), seg_width=64)
    assert len(rotated) == len(straight)
    for a, b in zip(straight, rotated):
        assert abs(a.crop.shape[0] - b.crop.shape[0]) <= 1


# ---------------------------------------------------------------- 7. loss


@criterion(7, "cross-entropy equals unit-weight NLL of the softmax")
def test_loss_identities():
    rng = np.random.default_rng(400)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        y = rng.normal(scale=3.0, size=(n, 4))
        k = rng.integers(0, 4, n)
        ce = float(TR.segment_ce_loss(Tensor(y), k).data)
        nll = float(TR.image_wnll_loss(Tensor(T.softmax_np(y, axis=1)), k, ClassWeights.ones()).data)
        assert abs(ce - nll) < 1e-12
        probs = Tensor(rng.dirichlet(np.ones(4), n))
        unweighted = float(TR.image_wnll_loss(probs, k).data)
        assert float(TR.image_wnll_loss(probs, k, ClassWeights.ones()).data) == unweighted
        assert float(TR.image_wnll_loss(probs, k, np.ones(4)).data) == unweighted


# ------------------------------------------------ 8/9. desk-scale runs

DESK_COUNTS = (60, 60, 60, 60)
DESK_SEED = 7


def _desk_run(root):
    generate_dataset(DESK_COUNTS, DESK_SEED, root / "data")
    cfg = P.RunConfig(seed=DESK_SEED)
    assert cfg.encoder == "tiny" and cfg.folds == 5
    t0 = time.perf_counter()
    result = P.run_pipeline(root / "data" / "manifest.json", cfg, root / "run")
    return result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    first, elapsed = _desk_run(root / "a")
    print(f"\ndesk run: {elapsed / 60:.1f} min")
    return root, first


@pytest.mark.slow
@criterion(8, "desk-scale 5-fold run reaches ACC >= 0.85 and kappa >= 0.75")
def test_desk_scale_accuracy(desk):
    _, result = desk
    agg = result["aggregate"]
    pooled, folds = agg["pooled"]["Exact"], agg["fold_summary"]["Exact"]
    print(
        f"\npooled ACC {pooled['ACC']:.3f} kappa {pooled['kappa']:.3f}; "
        f"fold-mean ACC {folds['ACC']['mean']:.3f} kappa {folds['kappa']['mean']:.3f}"
    )
    assert pooled["n"] == sum(DESK_COUNTS)
    assert pooled["ACC"] >= 0.85 and folds["ACC"]["mean"] >= 0.85
    assert pooled["kappa"] >= 0.75 and folds["kappa"]["mean"] >= 0.75


@pytest.mark.slow
@criterion(8, "desk-scale 5-fold run reaches ACC >= 0.85 and kappa >= 0.75")
def test_desk_scale_off_by_one_dominates(desk):
    _, result = desk
    for rep in result["folds"]:
        assert rep["metrics"]["OffByOne"]["ACC"] >= rep["metrics"]["Exact"]["ACC"]


@pytest.mark.slow
@criterion(9, "repeated desk run gives byte-identical aggregate metrics")
def test_desk_scale_determinism(desk):
    root, first = desk
    second, _ = _desk_run(root / "b")
    assert json.dumps(first["aggregate"], sort_keys=True) == json.dumps(second["aggregate"], sort_keys=True)
    assert (root / "a" / "run" / "aggregate.json").read_bytes() == (root / "b" / "run" / "aggregate.json").read_bytes()
