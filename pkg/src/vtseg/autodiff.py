"""Reverse-mode autodiff over float64 numpy arrays.

A small tape-based engine: every op builds a `Tensor` node holding the
forward value plus a closure that routes the output gradient to its
parents. `Param` is a leaf tensor with an always-allocated gradient
buffer; gradients accumulate additively until `zero_grads` resets them.

Everything computes in float64. Forward passes over one graph are
single-threaded and deterministic; backward walks a fixed topological
order, so accumulation order is reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, DimensionError, NondeterministicError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph: value, optional grad, backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Backpropagate from this node. Default seed is all-ones."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self._accum(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """Trainable leaf tensor; `grad` is always allocated and zero after reset."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(out_data, (a, b), bw)


def transpose(a) -> Tensor:
    a = _coerce(a)
    return _node(a.data.T.copy(), (a,), lambda g: a._accum(g.T))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).astype(np.float64))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).astype(np.float64))

    return _node(out_data, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: a._accum(g * out_data))


def log(a) -> Tensor:
    a = _coerce(a)
    return _node(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: a._accum(g * 0.5 / out_data))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out_data, (a,), lambda g: a._accum(g * out_data * (1.0 - out_data)))


def softplus(a) -> Tensor:
    a = _coerce(a)
    out_data = np.logaddexp(0.0, a.data)

    def bw(g):
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a._accum(g * sig)

    return _node(out_data, (a,), bw)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = _coerce(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out_data = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accum(g * (cdf + x * pdf))

    return _node(out_data, (a,), bw)


def normal_cdf(a) -> Tensor:
    """Standard normal CDF, elementwise."""
    a = _coerce(a)
    x = a.data
    out_data = 0.5 * (1.0 + _erf(x * _INV_SQRT2))

    def bw(g):
        a._accum(g * _INV_SQRT_2PI * np.exp(-0.5 * x * x))

    return _node(out_data, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; -inf entries map to exactly 0.

    A row that is entirely -inf yields all zeros (degenerate, documented).
    """
    a = _coerce(a)
    x = a.data
    if axis >= x.ndim or axis < -x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _node(out_data, (a,), bw)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only strictly inside the bounds."""
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data > lo)
    if hi is not None:
        mask = mask * (a.data < hi)

    def bw(g):
        a._accum(g * mask)

    return _node(out_data, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a0, b0 in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a0, b0)
                t._accum(g[tuple(idx)])

    return _node(out_data, tuple(ts), bw)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along `axis`."""
    a = _coerce(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accum(buf)

    return _node(out_data, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)
    return _node(out_data, (a,), lambda g: a._accum(g.reshape(a.shape)))


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows by integer index; duplicate indices accumulate on backward."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _node(out_data, (a,), bw)


def scatter_rows(a, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of `a` at positions `idx` in a zero matrix of `n_rows` rows."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    out_data[idx] = a.data

    def bw(g):
        a._accum(g[idx])

    return _node(out_data, (a,), bw)


def take_1d(a, idx: np.ndarray) -> Tensor:
    """Fancy-index a 1-D tensor with an arbitrary-shape integer array."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx.ravel(), g.ravel())
        a._accum(buf)

    return _node(out_data, (a,), bw)


def take_along_cols(a, idx: np.ndarray) -> Tensor:
    """out[r, j] = a[r, idx[r, j]] for a 2-D tensor."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.take_along_axis(a.data, idx, axis=1)
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (np.broadcast_to(rows, idx.shape), idx), g)
        a._accum(buf)

    return _node(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Neural-net building blocks
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b)."""
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {w.shape}")
    y = matmul(x, w)
    if b is not None:
        b = _coerce(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} incompatible with W {w.shape}")
        y = add(y, b)
    return y


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then gain and bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gain), bias)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p).

    Identity when not training or p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = _coerce(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


class AttentionParams:
    """Projection weights for one multi-head attention block.

    `rel_bias` is an optional [heads x (2R+1)] table of additive score
    biases indexed by clipped key-minus-query position offsets.
    """

    __slots__ = ("heads", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "rel_bias")

    def __init__(self, heads, wq, bq, wk, bk, wv, bv, wo, bo, rel_bias=None):
        self.heads = heads
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo
        self.rel_bias = rel_bias


def relative_bias_index(pos_q: np.ndarray, pos_k: np.ndarray, window: int) -> np.ndarray:
    """Clipped offset table index for each (query, key) position pair."""
    off = np.clip(pos_k[None, :] - pos_q[:, None], -window, window)
    return (off + window).astype(np.intp)


def multi_head_attention(q_in, k_in, v_in, params: AttentionParams,
                         mask: np.ndarray | None = None,
                         pos_q: np.ndarray | None = None,
                         pos_k: np.ndarray | None = None,
                         dropout_p: float = 0.0,
                         rng: np.random.Generator | None = None,
                         training: bool = False) -> Tensor:
    """Scaled dot-product attention with head splitting and output projection.

    `mask` marks valid key positions; invalid keys get -inf scores. When
    `params.rel_bias` is present, `pos_q`/`pos_k` supply the integer
    positions used to look up additive per-head score biases.
    """
    q_in, k_in, v_in = _coerce(q_in), _coerce(k_in), _coerce(v_in)
    d = q_in.shape[1]
    heads = params.heads
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by head count {heads}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    q = linear(q_in, params.wq, params.bq)
    k = linear(k_in, params.wk, params.bk)
    v = linear(v_in, params.wv, params.bv)

    n_k = k.shape[0]
    mask_bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_k,):
            raise DimensionError(f"attention mask {mask.shape} does not match key count {n_k}")
        if not mask.all():
            mask_bias = Tensor(np.where(mask, 0.0, -np.inf)[None, :])

    bias_idx = None
    if params.rel_bias is not None:
        if pos_q is None or pos_k is None:
            raise ConfigError("relative bias requires query/key positions")
        window = (params.rel_bias.shape[1] - 1) // 2
        bias_idx = relative_bias_index(pos_q, pos_k, window)

    outs = []
    for h in range(heads):
        qh = narrow(q, 1, h * dh, (h + 1) * dh)
        kh = narrow(k, 1, h * dh, (h + 1) * dh)
        vh = narrow(v, 1, h * dh, (h + 1) * dh)
        scores = mul(matmul(qh, transpose(kh)), scale)
        if bias_idx is not None:
            table_h = reshape(narrow(params.rel_bias, 0, h, h + 1), (-1,))
            scores = add(scores, take_1d(table_h, bias_idx))
        if mask_bias is not None:
            scores = add(scores, mask_bias)
        attn = softmax(scores, axis=1)
        attn = dropout(attn, dropout_p, rng, training)
        outs.append(matmul(attn, vh))
    merged = concat(outs, axis=1)
    return linear(merged, params.wo, params.bo)


class FfnParams:
    """Two-layer MLP weights (d -> hidden -> d)."""

    __slots__ = ("w1", "b1", "w2", "b2")

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2


def feed_forward(x, params: FfnParams) -> Tensor:
    """linear -> GELU -> linear."""
    return linear(gelu(linear(x, params.w1, params.b1)), params.w2, params.b2)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(objective: Callable[[], Tensor], params: Sequence[Param],
               h: float = 1e-5, max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    `objective` must be a deterministic zero-argument function returning a
    scalar Tensor built from `params` (noise and dropout disabled); two
    evaluations are compared and a NondeterministicError is raised if they
    differ. Returns max over checked entries of
    |analytic - numeric| / max(1, |numeric|).

    By default every parameter entry is perturbed. For whole-model checks
    `max_entries_per_param` limits the check to a seeded random coordinate
    subset per parameter, which keeps large sweeps affordable; per-op unit
    checks should leave it unset.
    """
    v1 = float(objective().data)
    v2 = float(objective().data)
    if v1 != v2 or not math.isfinite(v1):
        raise NondeterministicError(
            f"objective is not deterministic or not finite: {v1} vs {v2}")

    loss = objective()
    zero_grads(params)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    if max_entries_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            coords = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(objective().data)
            flat[i] = orig - h
            fm = float(objective().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
