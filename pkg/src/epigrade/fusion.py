"""Image-level classifier over an ordered sequence of segment logits.

A unidirectional GRU reads the sequence, a tanh/softmax attention head
scores every hidden state against a learned context vector, the weighted
sum of states is classified with a softmax layer, and the weights are kept
as each segment's contribution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoder import GRADES, EmptySequence
from .tensor import Tensor


@dataclass
class SegmentLogitSequence:
    vectors: np.ndarray  # (N, 4)
    image_id: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) == 0:
            raise EmptySequence(f"{self.image_id}: sequence must be non-empty (N, d)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError(f"{self.image_id}: non-finite logits")

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass(frozen=True)
class FusionConfig:
    n_in: int = 4
    hidden: int = 128
    attn_dim: int = 128
    n_classes: int = 4
    mode: str = "attention"  # or "last": classify the final GRU state

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass
class AttentionReport:
    image_id: str
    alphas: np.ndarray
    mean_alpha: float
    highlighted: list[int]  # 1-based segment indices
    probs: np.ndarray
    predicted: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "alphas": self.alphas.tolist(),
            "mean_alpha": self.mean_alpha,
            "highlighted": self.highlighted,
            "probs": self.probs.tolist(),
            "predicted": self.predicted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionReport":
        return cls(d["image_id"], np.asarray(d["alphas"]), float(d["mean_alpha"]), list(d["highlighted"]), np.asarray(d["probs"]), d["predicted"])


def init_params(cfg: FusionConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    H, A = cfg.hidden, cfg.attn_dim
    return {
        "gru": T.gru_params(rng, cfg.n_in, H, dtype),
        "W_vs": T.uniform_param(rng, (A, H), H, dtype),
        "b_vs": T.zeros_param((A,), dtype),
        # context vector starts from a unit normal
        "w": T.Tensor(rng.standard_normal(A).astype(dtype), requires_grad=True),
        "W_0": T.uniform_param(rng, (cfg.n_classes, H), H, dtype),
        "b_0": T.zeros_param((cfg.n_classes,), dtype),
    }


def _as_input(seq, dtype) -> Tensor:
    if isinstance(seq, Tensor):
        return seq
    vecs = seq.vectors if isinstance(seq, SegmentLogitSequence) else np.asarray(seq)
    if len(vecs) == 0:
        raise EmptySequence("empty logit sequence")
    return Tensor(np.asarray(vecs, dtype=dtype))


def gru_encode(seq, params: dict) -> Tensor:
    """Hidden states (N, H), or (N, B, H) for a batch of equal-length sequences; h_0 = 0."""
    xs = _as_input(seq, params["W_0"].dtype)
    if xs.shape[0] == 0:
        raise EmptySequence("empty logit sequence")
    gp = params["gru"]
    H = gp["W_hh"].shape[1]
    h = Tensor(np.zeros(xs.shape[1:-1] + (H,), dtype=xs.dtype))
    states = []
    for i in range(xs.shape[0]):
        h = T.gru_step(xs[i], h, gp)
        states.append(h)
    return T.stack(states, axis=0)


def attention_scores(hs: Tensor, params: dict) -> Tensor:
    """e_i = w . tanh(W_vs h_i + b_vs), shape hs.shape[:-1]."""
    u = T.tanh(T.linear(hs, params["W_vs"], params["b_vs"]))
    e = T.linear(u, T.reshape(params["w"], (1, -1)))
    return T.reshape(e, hs.shape[:-1])


def attention(hs: Tensor, params: dict) -> Tensor:
    return T.softmax(attention_scores(hs, params), axis=0)


def fuse(hs: Tensor, alphas: Tensor) -> Tensor:
    return T.tsum(T.reshape(alphas, alphas.shape + (1,)) * hs, axis=0)


def classify_logits(v: Tensor, params: dict) -> Tensor:
    return T.linear(v, params["W_0"], params["b_0"])


def classify(v: Tensor, params: dict) -> Tensor:
    return T.softmax(classify_logits(v, params))


def forward(seq, params: dict, cfg: FusionConfig | None = None) -> tuple[Tensor, Tensor]:
    """Return (pre-softmax class scores, attention weights) for one sequence."""
    hs = gru_encode(seq, params)
    if cfg is not None and cfg.mode == "last":
        n = hs.shape[0]
        onehot = np.zeros(hs.shape[:-1], dtype=hs.dtype)
        onehot[-1] = 1.0
        return classify_logits(hs[n - 1], params), Tensor(onehot)
    alphas = attention(hs, params)
    return classify_logits(fuse(hs, alphas), params), alphas


def argmax_first(p) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p)))


def _float64(tree):
    if isinstance(tree, Tensor):
        return Tensor(tree.data.astype(np.float64))
    if isinstance(tree, dict):
        return {k: _float64(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [_float64(v) for v in tree]
    return tree


def predict_with_report(seq, params: dict, cfg: FusionConfig | None = None) -> AttentionReport:
    """Forward pass in float64 so the reported weights sum to one to rounding."""
    image_id = seq.image_id if isinstance(seq, SegmentLogitSequence) else ""
    if isinstance(seq, Tensor):
        seq = Tensor(seq.data.astype(np.float64))
    scores, alphas = forward(seq, _float64(params), cfg)
    probs = T.softmax_np(scores.data.astype(np.float64))
    a = alphas.data.astype(np.float64)
    mean_a = 1.0 / len(a)
    highlighted = [int(i) + 1 for i in np.flatnonzero(a > mean_a)]
    return AttentionReport(image_id, a, mean_a, highlighted, probs, GRADES[argmax_first(probs)])


def vote_fusion(segment_logits: np.ndarray, kind: str = "avg") -> np.ndarray:
    """Reference voting baselines over segment logits; returns class probabilities.

    ``avg`` averages per-segment softmax outputs; ``max`` counts per-segment argmax votes.
    """
    logits = np.asarray(segment_logits, dtype=np.float64)
    if len(logits) == 0:
        raise EmptySequence("empty logit sequence")
    probs = T.softmax_np(logits, axis=1)
    if kind == "avg":
        return probs.mean(axis=0)
    if kind == "max":
        votes = np.bincount(probs.argmax(axis=1), minlength=logits.shape[1]).astype(np.float64)
        return votes / votes.sum()
    raise ValueError(f"unknown vote kind {kind!r}")
