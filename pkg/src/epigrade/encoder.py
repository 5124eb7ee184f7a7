"""Segment-level sequence generator.

Stage I is a DenseNet-style convolutional trunk whose output is max-pooled to
height 1 and read column by column as a left-to-right feature sequence.
Stage II runs two bidirectional LSTM + linear pairs over that sequence and
takes the logit vector at the last step as the segment's class scores.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch, Tensor

GRADES = ("Normal", "CIN1", "CIN2", "CIN3")


class EmptySequence(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    name: str = "full"
    input_hw: tuple[int, int] = (64, 704)
    stem_channels: int = 64
    growth: int = 32
    bottleneck: int = 4
    block_layers: tuple[int, ...] = (6, 12, 24)
    compression: float = 0.5
    final_transition: bool = False
    final_pool_kernel: tuple[int, int] = (3, 3)
    final_pool_stride: tuple[int, int] = (4, 1)
    final_pool_padding: tuple[int, int] = (0, 1)
    hidden: int = 256
    n_classes: int = 4
    channel_norm: bool = False

    @classmethod
    def full(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        return cls(
            name="tiny",
            input_hw=(32, 176),
            stem_channels=16,
            growth=8,
            block_layers=(2,),
            final_transition=True,
            final_pool_stride=(4, 2),
            hidden=32,
        )

    @classmethod
    def named(cls, name: str) -> "EncoderConfig":
        if name == "full":
            return cls.full()
        if name == "tiny":
            return cls.tiny()
        raise ValueError(f"unknown encoder config {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        for k in ("input_hw", "block_layers", "final_pool_kernel", "final_pool_stride", "final_pool_padding"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def channel_plan(self) -> list[tuple[int, int]]:
        """(channels in, channels out) for each dense block / transition in order."""
        plan = []
        c = self.stem_channels
        for bi, n in enumerate(self.block_layers):
            c_out = c + n * self.growth
            plan.append((c, c_out))
            c = c_out
            if bi < len(self.block_layers) - 1 or self.final_transition:
                c_t = int(c * self.compression)
                plan.append((c, c_t))
                c = c_t
        return plan

    @property
    def descriptor_dim(self) -> int:
        return self.channel_plan()[-1][1]


@dataclass
class SegmentLogit:
    values: np.ndarray
    index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (4,) or not np.all(np.isfinite(self.values)):
            raise ValueError("segment logit must be 4 finite values")


# ------------------------------------------------------------------ params


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    def conv(c_out, c_in, k):
        return {"W": T.uniform_param(rng, (c_out, c_in, k, k), c_in * k * k, dtype), "b": T.zeros_param((c_out,), dtype)}

    params = {"stem": conv(cfg.stem_channels, 3, 7), "blocks": [], "transitions": []}
    plan = iter(cfg.channel_plan())
    for bi, n in enumerate(cfg.block_layers):
        c_in, _ = next(plan)
        layers = []
        for li in range(n):
            c = c_in + li * cfg.growth
            mid = cfg.bottleneck * cfg.growth
            layers.append({"reduce": conv(mid, c, 1), "grow": conv(cfg.growth, mid, 3)})
        params["blocks"].append(layers)
        if bi < len(cfg.block_layers) - 1 or cfg.final_transition:
            tc_in, tc_out = next(plan)
            params["transitions"].append(conv(tc_out, tc_in, 1))

    H, D = cfg.hidden, cfg.descriptor_dim
    params["stage2"] = {
        "rnn1": {"fwd": T.lstm_params(rng, D, H, dtype), "bwd": T.lstm_params(rng, D, H, dtype)},
        "proj1": {"W": T.uniform_param(rng, (H, 2 * H), 2 * H, dtype), "b": T.zeros_param((H,), dtype)},
        "rnn2": {"fwd": T.lstm_params(rng, H, H, dtype), "bwd": T.lstm_params(rng, H, H, dtype)},
        "proj2": {"W": T.uniform_param(rng, (cfg.n_classes, 2 * H), 2 * H, dtype), "b": T.zeros_param((cfg.n_classes,), dtype)},
    }
    return params


def stage1_params(params: dict) -> dict:
    return {k: params[k] for k in ("stem", "blocks", "transitions")}


def import_stage1(params: dict, source: dict) -> dict:
    """Copy externally supplied stage-I weights into ``params`` in place.

    ``source`` is any parameter tree with matching stem/blocks/transitions,
    typically the ``params`` of a loaded encoder checkpoint.
    """
    dst = T.named_parameters(stage1_params(params))
    src = T.named_parameters(stage1_params(source))
    if dst.keys() != src.keys():
        raise ShapeMismatch("stage-I parameter names differ between source and target")
    for name, t in dst.items():
        if src[name].shape != t.shape:
            raise ShapeMismatch(f"{name}: source {src[name].shape} vs target {t.shape}")
        t.data[...] = src[name].data
    return params


# ----------------------------------------------------------------- forward


def _conv_relu(x, p, stride=1, padding=0, norm=False):
    y = T.conv2d(x, p["W"], p["b"], stride=stride, padding=padding)
    if norm:
        y = T.channel_standardize(y)
    return T.relu(y)


def dense_block(x: Tensor, layers: list, norm: bool = False) -> Tensor:
    """Each layer (1x1 reduce, 3x3 grow) sees every earlier output, concatenated on channels."""
    h = x
    for lp in layers:
        y = _conv_relu(h, lp["reduce"], norm=norm)
        y = _conv_relu(y, lp["grow"], padding=1, norm=norm)
        h = T.concat([h, y], axis=1)
    return h


def stage1_forward(x: Tensor, params: dict, cfg: EncoderConfig, trace: list | None = None) -> Tensor:
    """Map images (B, 3, H, W) or (3, H, W) to a feature sequence (T, B, D) or (T, D).

    When ``trace`` is a list, the per-sample shape after every Table-I style
    stage is appended to it.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (3,) + tuple(cfg.input_hw):
        raise ShapeMismatch(f"encoder {cfg.name} expects 3x{cfg.input_hw[0]}x{cfg.input_hw[1]}, got {x.shape[1:]}")
    rec = (lambda t: trace.append(tuple(t.shape[1:]))) if trace is not None else (lambda t: None)

    h = _conv_relu(x, params["stem"], stride=2, padding=3, norm=cfg.channel_norm)
    rec(h)
    h = T.pool2d(h, "max", 3, 2, 1)
    rec(h)
    trans = iter(params["transitions"])
    for bi, layers in enumerate(params["blocks"]):
        h = dense_block(h, layers, norm=cfg.channel_norm)
        rec(h)
        if bi < len(params["blocks"]) - 1 or cfg.final_transition:
            h = _conv_relu(h, next(trans), norm=cfg.channel_norm)
            h = T.pool2d(h, "avg", 2, 2)
            rec(h)
    h = T.pool2d(h, "max", cfg.final_pool_kernel, cfg.final_pool_stride, cfg.final_pool_padding)
    rec(h)
    if h.shape[2] != 1:
        raise ShapeMismatch(f"final pooling left height {h.shape[2]}, expected 1")
    # (B, D, 1, T) -> (T, B, D)
    seq = T.transpose(T.reshape(h, (h.shape[0], h.shape[1], h.shape[3])), (2, 0, 1))
    if squeeze:
        seq = T.reshape(seq, (seq.shape[0], seq.shape[2]))
    return seq


def stage2_forward(seq: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Return (per-step logits (T, ..., 4), final logits (..., 4)) for a (T, ..., D) sequence."""
    if seq.shape[0] == 0:
        raise EmptySequence("feature sequence is empty")
    p = params["stage2"]
    h = T.blstm(seq, p["rnn1"]["fwd"], p["rnn1"]["bwd"])
    h = T.linear(h, p["proj1"]["W"], p["proj1"]["b"])
    h = T.blstm(h, p["rnn2"]["fwd"], p["rnn2"]["bwd"])
    steps = T.linear(h, p["proj2"]["W"], p["proj2"]["b"])
    return steps, steps[seq.shape[0] - 1]


def forward_logits(x: Tensor, params: dict, cfg: EncoderConfig) -> Tensor:
    """Final segment logits for a batch (B, 3, H, W) -> (B, 4)."""
    return stage2_forward(stage1_forward(x, params, cfg), params)[1]


def encode_segment(segment, params: dict, cfg: EncoderConfig) -> SegmentLogit:
    """Encode one standardized segment (an object with ``standardized`` and ``geometry.index``)."""
    x = Tensor(np.asarray(segment.standardized, dtype=params["stem"]["W"].dtype))
    _, final = stage2_forward(stage1_forward(x, params, cfg), params)
    return SegmentLogit(final.data.astype(np.float64), segment.geometry.index)


def encode_batch(x: np.ndarray, params: dict, cfg: EncoderConfig, batch_size: int = 64) -> np.ndarray:
    """Inference over an array of standardized segments (N, 3, H, W) -> (N, 4)."""
    dtype = params["stem"]["W"].dtype
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward_logits(Tensor(np.asarray(x[i : i + batch_size], dtype=dtype)), params, cfg).data)
    if not out:
        return np.zeros((0, cfg.n_classes))
    return np.concatenate(out).astype(np.float64)


def build_image_sequence(logits: list[SegmentLogit], image_id: str = ""):
    from .fusion import SegmentLogitSequence

    ordered = sorted(logits, key=lambda s: s.index)
    if not ordered:
        raise EmptySequence("no segment logits")
    return SegmentLogitSequence(np.stack([s.values for s in ordered]), image_id)


# -------------------------------------------------------- receptive fields


def _width_layers(cfg: EncoderConfig) -> list[tuple[int, int, int]]:
    """(kernel, stride, padding) along width for every layer on the longest path."""
    layers = [(7, 2, 3), (3, 2, 1)]
    for bi, n in enumerate(cfg.block_layers):
        layers += [(1, 1, 0), (3, 1, 1)] * n
        if bi < len(cfg.block_layers) - 1 or cfg.final_transition:
            layers += [(1, 1, 0), (2, 2, 0)]
    layers.append((cfg.final_pool_kernel[1], cfg.final_pool_stride[1], cfg.final_pool_padding[1]))
    return layers


def receptive_fields(cfg: EncoderConfig) -> list[tuple[int, int]]:
    """Inclusive input-column range that can influence each descriptor."""
    width = cfg.input_hw[1]
    layers = _width_layers(cfg)
    sizes = [width]
    for k, s, p in layers:
        sizes.append(T.out_size(sizes[-1], k, s, p))
    fields = []
    for j in range(sizes[-1]):
        lo, hi = j, j
        for k, s, p in reversed(layers):
            lo, hi = lo * s - p, hi * s - p + k - 1
        fields.append((max(lo, 0), min(hi, width - 1)))
    return fields


TABLE_I_SHAPES = [
    (64, 32, 352),
    (64, 16, 176),
    (256, 16, 176),
    (128, 8, 88),
    (512, 8, 88),
    (256, 4, 44),
    (1024, 4, 44),
    (1024, 1, 44),
]
