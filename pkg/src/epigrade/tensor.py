"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure that pushes the upstream gradient back to them. :func:`backward`
linearizes the graph reachable from a scalar loss into a tape (reverse
topological order) and runs each closure exactly once.

Layer kernels (convolution, pooling, recurrent cells) are written in terms of
numpy so that desk-scale training is feasible on a CPU.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(out, (a,), "pow", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), "relu", bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), "tanh", bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), "sigmoid", bw)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_np(a.data, axis)

    def bw(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - s))

    return _make(out, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        sm = np.exp(out)
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), "log_softmax", bw)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ------------------------------------------------------------ shape / reduce


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if _needs_add_at(idx):
            np.add.at(a.grad, idx, g)
        else:
            a.grad[idx] += g

    return _make(a.data[idx], (a,), "getitem", bw)


def _needs_add_at(idx) -> bool:
    # fancy indexing can repeat positions; basic slicing never does
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, "stack", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the trailing axis of ``x`` (vector or batch)."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} vs weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[0])
        if x.requires_grad:
            _accum(x, (g2 @ W.data).reshape(x.shape))
        if W.requires_grad:
            _accum(W, g2.T @ x2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(out.reshape(lead + (W.shape[0],)), parents, "linear", bw)


# -------------------------------------------------------------- convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected CxHxW or NxCxHxW, got {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Gather (C, kh, kw, N, Ho, Wo) patches from a padded (N, C, H, W) input."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    return cols


def _col2im(dcols: np.ndarray, padded_shape, kh, kw, sh, sw) -> np.ndarray:
    n, c, hp, wp = padded_shape
    ho, wo = dcols.shape[-2:]
    dxt = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
    return dxt.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if c != ck:
        raise ShapeMismatch(f"conv2d: {c} input channels vs kernel {kernels.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: empty output for input {x.shape} and kernel {kernels.shape}")

    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo).reshape(c * kh * kw, -1)
    wmat = kernels.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if kernels.requires_grad:
            _accum(kernels, (gmat @ cols.T).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
        if x.requires_grad:
            dcols = wmat.T @ gmat
            if pointwise:
                _accum(x, dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dcols = dcols.reshape(c, kh, kw, n, ho, wo)
                dxp = _col2im(dcols, (n, c, h + 2 * ph, w + 2 * pw), kh, kw, sh, sw)
                _accum(x, dxp[:, :, ph : ph + h, pw : pw + w])

    res = _make(out, parents, "conv2d", bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def pool2d(x: Tensor, kind: str = "max", kernel=2, stride=None, padding=0) -> Tensor:
    """Window reduction; max pads with -inf, avg counts padded zeros."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    ho, wo = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"pool2d: empty output for input {x.shape}")
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo).reshape(c, kh * kw, n, ho, wo)
    padded_shape = (n, c, h + 2 * ph, w + 2 * pw)

    if kind == "max":
        arg = cols.argmax(axis=1)
        out = np.take_along_axis(cols, arg[:, None], axis=1)[:, 0]

        def bw(g):
            onehot = np.zeros_like(cols, dtype=g.dtype)
            np.put_along_axis(onehot, arg[:, None], g.transpose(1, 0, 2, 3)[:, None], axis=1)
            dxp = _col2im(onehot.reshape(c, kh, kw, n, ho, wo), padded_shape, kh, kw, sh, sw)
            _accum(x, dxp[:, :, ph : ph + h, pw : pw + w])
    else:
        out = cols.mean(axis=1)

        def bw(g):
            spread = np.broadcast_to((g.transpose(1, 0, 2, 3) / (kh * kw))[:, None, None], (c, kh, kw, n, ho, wo))
            dxp = _col2im(spread, padded_shape, kh, kw, sh, sw)
            _accum(x, dxp[:, :, ph : ph + h, pw : pw + w])

    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    res = _make(out, (x,), f"{kind}pool2d", bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def channel_standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel zero-mean/unit-variance over the spatial axes."""
    mu = mean(x, axis=(-2, -1), keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=(-2, -1), keepdims=True)
    return xc * power(var + eps, -0.5)


# -------------------------------------------------------- recurrent kernels


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step with input, forget, cell and output gates (in that row order).

    ``params`` holds ``W_ih`` (4H x in), ``W_hh`` (4H x H), ``b_ih`` and ``b_hh``.
    ``x`` may already be the input projection when ``params["projected"]`` is set.
    """
    if params.get("projected"):
        pre = x
    else:
        pre = linear(x, params["W_ih"], params["b_ih"])
    pre = pre + linear(h_prev, params["W_hh"], params["b_hh"])
    H = h_prev.shape[-1]
    i = sigmoid(pre[..., 0:H])
    f = sigmoid(pre[..., H : 2 * H])
    g = tanh(pre[..., 2 * H : 3 * H])
    o = sigmoid(pre[..., 3 * H : 4 * H])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def gru_step(x: Tensor, h_prev: Tensor, params: dict) -> Tensor:
    """One GRU step; rows of ``W_ih``/``W_hh`` are ordered reset, update, candidate.

    The update gate ``z`` is the share of the new candidate that is written:
    ``h = (1 - z) * h_prev + z * candidate`` with
    ``candidate = tanh(W x + U (r * h_prev) + b)``.
    """
    H = h_prev.shape[-1]
    W_ih, W_hh = params["W_ih"], params["W_hh"]
    b_ih, b_hh = params["b_ih"], params["b_hh"]
    gx = linear(x, W_ih, b_ih)
    gh = linear(h_prev, W_hh[0 : 2 * H], b_hh[0 : 2 * H])
    r = sigmoid(gx[..., 0:H] + gh[..., 0:H])
    z = sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
    cand = tanh(gx[..., 2 * H : 3 * H] + linear(r * h_prev, W_hh[2 * H : 3 * H], b_hh[2 * H : 3 * H]))
    return (1.0 - z) * h_prev + z * cand


def lstm_sequence(xs: Tensor, params: dict, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``xs`` of shape (T, in) or (T, B, in); returns hidden states (T, ..., H)."""
    T = xs.shape[0]
    H = params["W_hh"].shape[1]
    proj = linear(xs, params["W_ih"], params["b_ih"])
    zero = Tensor(np.zeros(xs.shape[1:-1] + (H,), dtype=xs.dtype))
    h, c = zero, zero
    step_params = dict(params, projected=True)
    outs: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c = lstm_step(proj[t], h, c, step_params)
        outs[t] = h
    return stack(outs, axis=0)


def blstm(xs: Tensor, fwd: dict, bwd: dict) -> Tensor:
    """Bidirectional LSTM: step t is [forward state at t, backward state at t]."""
    return concat([lstm_sequence(xs, fwd), lstm_sequence(xs, bwd, reverse=True)], axis=-1)


# -------------------------------------------------------------- parameters


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def lstm_params(rng, n_in: int, hidden: int, dtype=np.float64) -> dict:
    return {
        "W_ih": uniform_param(rng, (4 * hidden, n_in), n_in, dtype),
        "W_hh": uniform_param(rng, (4 * hidden, hidden), hidden, dtype),
        "b_ih": zeros_param((4 * hidden,), dtype),
        "b_hh": zeros_param((4 * hidden,), dtype),
    }


def gru_params(rng, n_in: int, hidden: int, dtype=np.float64) -> dict:
    return {
        "W_ih": uniform_param(rng, (3 * hidden, n_in), n_in, dtype),
        "W_hh": uniform_param(rng, (3 * hidden, hidden), hidden, dtype),
        "b_ih": zeros_param((3 * hidden,), dtype),
        "b_hh": zeros_param((3 * hidden,), dtype),
    }


# ----------------------------------------------------------------- backward


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first).

    Iterative, so long recurrent unrolls do not hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` for every tensor that influenced ``loss``; returns the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    tape = build_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are not needed once pushed upstream
            node.grad = None
    return tape


def parameters(tree) -> list[Tensor]:
    """Flatten nested dict/list containers of tensors in a stable order."""
    out: list[Tensor] = []
    if isinstance(tree, Tensor):
        out.append(tree)
    elif isinstance(tree, dict):
        for k in sorted(tree):
            out.extend(parameters(tree[k]))
    elif isinstance(tree, (list, tuple)):
        for v in tree:
            out.extend(parameters(v))
    return out


def named_parameters(tree, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif isinstance(tree, dict):
        for k in sorted(tree):
            out.update(named_parameters(tree[k], f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(named_parameters(v, f"{prefix}.{i}" if prefix else str(i)))
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
