"""Weakly supervised encoder training and attention-fusion training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from . import encoder as E
from . import fusion as F
from . import tensor as T
from .localize import GRADES, EpitheliumSample
from .tensor import Tensor

log = logging.getLogger(__name__)


class MissingLabel(ValueError):
    pass


class BadK(ValueError):
    pass


class EmptyClass(ValueError):
    pass


class EmptySplit(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    pass


# ------------------------------------------------------------------ labels


def propagate_weak_labels(sample: EpitheliumSample, segments: Sequence) -> list:
    """Give every segment its parent image's grade."""
    if sample.grade is None:
        raise MissingLabel(f"{sample.id}: image has no grade")
    for seg in segments:
        seg.weak_label = sample.grade
    return list(segments)


@dataclass(frozen=True)
class FoldSplit:
    fold: int  # 1-based
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


def stratified_split(labels: Mapping[str, str] | Sequence[tuple[str, str]], k: int = 5, seed: int | np.random.Generator = 0) -> list[FoldSplit]:
    """Image-level stratified K-fold.

    Each class is shuffled and dealt round-robin, with the starting fold carried
    over between classes so that fold sizes also stay within one of each other.
    """
    items = list(labels.items()) if isinstance(labels, Mapping) else list(labels)
    if not isinstance(k, (int, np.integer)) or k < 2 or k > len(items):
        raise BadK(f"k must be in [2, {len(items)}], got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    start = 0
    for grade in sorted({g for _, g in items}, key=lambda g: GRADES.index(g) if g in GRADES else len(GRADES)):
        ids = sorted(i for i, g in items if g == grade)
        for j, pos in enumerate(rng.permutation(len(ids))):
            fold_of[ids[pos]] = (start + j) % k
        start = (start + len(ids)) % k
    order = [i for i, _ in items]
    return [
        FoldSplit(f + 1, tuple(i for i in order if fold_of[i] != f), tuple(i for i in order if fold_of[i] == f))
        for f in range(k)
    ]


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationParams:
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    p_rotate: float = 0.5
    rotate_deg: float = 180.0
    p_hsv: float = 0.5
    hue: float = 0.05
    saturation: float = 0.2
    value: float = 0.2
    p_contrast: float = 0.5
    contrast: float = 0.2
    p_blur: float = 0.5
    blur_kernels: tuple[int, ...] = (3, 5)
    p_noise: float = 0.5
    noise_std: float = 5 / 255

    def __post_init__(self):
        probs = (self.p_vflip, self.p_hflip, self.p_rotate, self.p_hsv, self.p_contrast, self.p_blur, self.p_noise)
        if not all(0 <= p <= 1 for p in probs):
            raise ValueError("augmentation probabilities must be in [0, 1]")
        if min(self.hue, self.saturation, self.value, self.contrast, self.noise_std) < 0:
            raise ValueError("jitter ranges must be non-negative")
        if not 0 <= self.rotate_deg <= 180:
            raise ValueError("rotation range must be within [0, 180] degrees")
        if any(k < 1 or k % 2 == 0 for k in self.blur_kernels):
            raise ValueError("blur kernels must be odd positive sizes")

    @classmethod
    def none(cls) -> "AugmentationParams":
        return cls(0, 0, 0, p_hsv=0, p_contrast=0, p_blur=0, p_noise=0)

    def to_dict(self) -> dict:
        return asdict(self)


def _kernel_sigma(k: int) -> float:
    # the usual sigma for a k-tap Gaussian when none is given
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def augment(image: np.ndarray, rng: np.random.Generator, params: AugmentationParams | None = None) -> np.ndarray:
    """Randomly perturb an (h, w, 3) uint8 image; each operation fires independently."""
    p = params or AugmentationParams()
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[:2]
    if rng.random() < p.p_vflip:
        x = x[::-1]
    if rng.random() < p.p_hflip:
        x = x[:, ::-1]
    if rng.random() < p.p_rotate:
        ang = rng.uniform(-p.rotate_deg, p.rotate_deg)
        x = ndimage.rotate(x, ang, axes=(1, 0), reshape=False, order=1, mode="constant", cval=255.0)
    if rng.random() < p.p_hsv:
        hsv = rgb2hsv(np.clip(x, 0, 255) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-p.hue, p.hue)) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(1 - p.saturation, 1 + p.saturation), 0, 1)
        hsv[..., 2] = np.clip(hsv[..., 2] * rng.uniform(1 - p.value, 1 + p.value), 0, 1)
        x = hsv2rgb(hsv) * 255.0
    if rng.random() < p.p_contrast:
        mu = x.mean(axis=(0, 1), keepdims=True)
        x = (x - mu) * rng.uniform(1 - p.contrast, 1 + p.contrast) + mu
    if rng.random() < p.p_blur:
        k = int(rng.choice(p.blur_kernels))
        s = _kernel_sigma(k)
        x = ndimage.gaussian_filter(x, sigma=(s, s, 0), truncate=((k - 1) / 2) / s, mode="nearest")
    if rng.random() < p.p_noise:
        x = x + rng.normal(0.0, p.noise_std * 255.0, x.shape)
    out = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    assert out.shape[:2] == (h, w)
    return out


def balance_upsample(
    by_class: Mapping[str, Sequence[np.ndarray]],
    rng: np.random.Generator,
    params: AugmentationParams | None = None,
    augment_fn: Callable = augment,
) -> dict[str, list[np.ndarray]]:
    """Top every class up to the largest class count with augmented copies.

    Originals come first in each list; sources for the copies are drawn
    uniformly with replacement from that class's originals.
    """
    target = max((len(v) for v in by_class.values()), default=0)
    out = {}
    for label, items in by_class.items():
        items = list(items)
        extra = target - len(items)
        if extra and not items:
            raise EmptyClass(f"class {label} has no segments to upsample")
        src = rng.integers(0, len(items), size=extra) if extra else []
        out[label] = items + [augment_fn(items[i], rng, params) for i in src]
    return out


# ------------------------------------------------------------------ losses


def segment_ce_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy summed over a batch; ``logits`` is (4,) or (B, 4)."""
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    lp = T.log_softmax(logits, axis=-1)
    return -T.tsum(lp[np.arange(len(lab)), lab])


@dataclass(frozen=True)
class ClassWeights:
    q: tuple[float, ...]

    def __post_init__(self):
        if not all(v > 0 for v in self.q):
            raise ValueError("class weights must be positive")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.q, dtype=np.float64)

    @classmethod
    def ones(cls, k: int = 4) -> "ClassWeights":
        return cls((1.0,) * k)


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """Inverse-frequency weights q_k = total / (K * count_k)."""
    c = np.asarray(counts, dtype=np.float64)
    if (c <= 0).any():
        raise EmptyClass(f"every class needs at least one image, got counts {list(counts)}")
    return ClassWeights(tuple(float(v) for v in c.sum() / (len(c) * c)))


def image_wnll_loss(probs: Tensor, labels, q: ClassWeights | np.ndarray | None = None) -> Tensor:
    """Weighted negative log-likelihood summed over a batch; ``probs`` is (4,) or (B, 4)."""
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, -1))
    picked = T.log(probs[np.arange(len(lab)), lab])
    return _weighted_sum(picked, lab, q)


def image_wnll_from_scores(scores: Tensor, labels, q: ClassWeights | np.ndarray | None = None) -> Tensor:
    """Same loss computed from pre-softmax scores through a stable log-softmax."""
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if scores.ndim == 1:
        scores = T.reshape(scores, (1, -1))
    picked = T.log_softmax(scores, axis=-1)[np.arange(len(lab)), lab]
    return _weighted_sum(picked, lab, q)


def _weighted_sum(picked: Tensor, lab: np.ndarray, q) -> Tensor:
    if q is None:
        return -T.tsum(picked)
    qa = q.as_array() if isinstance(q, ClassWeights) else np.asarray(q, dtype=np.float64)
    return -T.tsum(picked * Tensor(qa[lab].astype(picked.dtype)))


# -------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "adadelta"
    lr: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: list[np.ndarray] = field(default_factory=list)
    sq_delta: list[np.ndarray] = field(default_factory=list)


def adadelta_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimizerState) -> list[np.ndarray]:
    """In-place Adadelta update; accumulators are created lazily on the first call."""
    if not state.sq_grad:
        state.sq_grad = [np.zeros_like(p) for p in params]
        state.sq_delta = [np.zeros_like(p) for p in params]
    rho, eps = state.rho, state.eps
    for p, g, eg, ed in zip(params, grads, state.sq_grad, state.sq_delta):
        if g is None:
            g = np.zeros_like(p)
        eg *= rho
        eg += (1 - rho) * g * g
        delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p -= state.lr * delta
    return params


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray | None], lr: float = 1e-4) -> list[np.ndarray]:
    for p, g in zip(params, grads):
        if g is not None:
            p -= lr * g
    return params


def optimizer_step(tensors: list[Tensor], state: OptimizerState) -> None:
    arrays = [t.data for t in tensors]
    grads = [None if t.grad is None else t.grad.astype(t.data.dtype, copy=False) for t in tensors]
    if state.kind == "adadelta":
        adadelta_step(arrays, grads, state)
    elif state.kind == "sgd":
        sgd_step(arrays, grads, state.lr)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")


# ------------------------------------------------------------ training loop


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 56
    optimizer: str = "adadelta"
    lr: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    min_delta: float = 0.0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ValueError("max_epochs and batch_size must be >= 1, patience >= 0")
        if self.optimizer not in ("adadelta", "sgd") or self.lr <= 0:
            raise ValueError("optimizer must be adadelta|sgd with lr > 0")

    @classmethod
    def encoder(cls, profile: str = "full") -> "TrainConfig":
        if profile == "tiny":
            return cls(max_epochs=50, patience=20, batch_size=16, lr=1.0)
        return cls()

    @classmethod
    def fusion(cls, profile: str = "full") -> "TrainConfig":
        if profile == "tiny":
            return cls(max_epochs=50, patience=20, batch_size=16, optimizer="sgd", lr=0.01)
        return cls(optimizer="sgd", lr=1e-4)

    def state(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.lr, self.rho, self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    history: list[dict]
    best_epoch: int
    best_val_loss: float

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _snapshot(params) -> dict:
    if isinstance(params, Tensor):
        return Tensor(params.data.copy(), requires_grad=True)
    if isinstance(params, dict):
        return {k: _snapshot(v) for k, v in params.items()}
    if isinstance(params, list):
        return [_snapshot(v) for v in params]
    return params


def write_log(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_acc"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})


def fit(
    params: dict,
    n_train: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    validate: Callable[[], tuple[float, float]],
    cfg: TrainConfig,
    rng: np.random.Generator,
    log_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    trainable: dict | None = None,
) -> TrainResult:
    """Minibatch loop with best-validation checkpointing and patience-based stopping.

    ``trainable`` restricts updates to a sub-tree of ``params``.
    """
    tensors = T.parameters(params if trainable is None else trainable)
    everything = T.parameters(params)
    state = cfg.state()
    best, best_epoch, stale = math.inf, 0, 0
    best_params = _snapshot(params)
    history: list[dict] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            T.zero_grads(everything)
            loss = batch_loss(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            T.backward(loss)
            optimizer_step(tensors, state)
            total += value
        T.zero_grads(everything)
        val_loss, val_acc = validate()
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": total / n_train, "val_loss": val_loss, "val_acc": val_acc}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, row["train_loss"], val_loss, val_acc)
        if val_loss < best - cfg.min_delta:
            best, best_epoch, stale = val_loss, epoch, 0
            best_params = _snapshot(params)
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if log_path is not None:
        write_log(log_path, history)
    return TrainResult(best_params, history, best_epoch, best)


# ----------------------------------------------------------------- encoder


def train_encoder(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    enc_cfg: E.EncoderConfig,
    cfg: TrainConfig,
    init_rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    log_path: str | Path | None = None,
    params: dict | None = None,
    freeze_stage1: bool = False,
) -> TrainResult:
    """Fit the segment encoder on standardized (n, 3, H, W) arrays with weak labels.

    With ``freeze_stage1`` only the recurrent stage is updated.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptySplit("encoder training needs non-empty train and validation sets")
    params = params or E.init_params(enc_cfg, init_rng)
    dtype = params["stem"]["W"].dtype
    x_train = np.asarray(x_train, dtype=dtype)
    x_val = np.asarray(x_val, dtype=dtype)
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)

    def batch_loss(idx):
        return segment_ce_loss(E.forward_logits(Tensor(x_train[idx]), params, enc_cfg), y_train[idx])

    def validate():
        logits = E.encode_batch(x_val, params, enc_cfg)
        lp = logits - logits.max(axis=1, keepdims=True)
        lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
        return float(-lp[np.arange(len(y_val)), y_val].mean()), float((logits.argmax(axis=1) == y_val).mean())

    trainable = {"stage2": params["stage2"]} if freeze_stage1 else None
    return fit(params, len(x_train), batch_loss, validate, cfg, shuffle_rng, log_path, trainable=trainable)


# ------------------------------------------------------------------ fusion


def _group_by_length(seqs: Sequence[np.ndarray], idx) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i in idx:
        groups.setdefault(len(seqs[i]), []).append(int(i))
    return groups


def fusion_scores(seqs: Sequence[np.ndarray], idx, params: dict, fcfg: F.FusionConfig | None = None) -> tuple[list[int], list[Tensor]]:
    """Forward equal-length sequences as one batch each; returns (member order, scores per group)."""
    dtype = params["W_0"].dtype
    order, outs = [], []
    for n, members in sorted(_group_by_length(seqs, idx).items()):
        xs = np.stack([seqs[i] for i in members], axis=1).astype(dtype)  # (N, B, 4)
        scores, _ = F.forward(Tensor(xs), params, fcfg)
        order.extend(members)
        outs.append(scores)
    return order, outs


def fusion_probs(seqs: Sequence[np.ndarray], params: dict, fcfg: F.FusionConfig | None = None) -> np.ndarray:
    """Image probabilities (n, 4) in input order, computed in float64."""
    p64 = F._float64(params)
    out = np.zeros((len(seqs), 4))
    order, groups = fusion_scores([np.asarray(s, dtype=np.float64) for s in seqs], range(len(seqs)), p64, fcfg)
    scores = np.concatenate([g.data for g in groups], axis=0)
    out[order] = T.softmax_np(scores, axis=1)
    return out


def train_fusion(
    seq_train: Sequence[np.ndarray],
    y_train: np.ndarray,
    seq_val: Sequence[np.ndarray],
    y_val: np.ndarray,
    fcfg: F.FusionConfig,
    cfg: TrainConfig,
    q: ClassWeights,
    init_rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Fit GRU + attention on per-image logit sequences with the weighted image loss."""
    if len(seq_train) == 0 or len(seq_val) == 0:
        raise EmptySplit("fusion training needs non-empty train and validation sets")
    params = F.init_params(fcfg, init_rng)
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    qa = q.as_array()

    def batch_loss(idx):
        order, groups = fusion_scores(seq_train, idx, params, fcfg)
        losses, lo = [], 0
        for g in groups:
            b = g.shape[0]
            losses.append(image_wnll_from_scores(g, y_train[order[lo : lo + b]], q))
            lo += b
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return total

    def validate():
        probs = fusion_probs(seq_val, params, fcfg)
        picked = np.maximum(probs[np.arange(len(y_val)), y_val], 1e-300)
        return float(np.mean(-qa[y_val] * np.log(picked))), float((probs.argmax(axis=1) == y_val).mean())

    return fit(params, len(seq_train), batch_loss, validate, cfg, shuffle_rng, log_path)
