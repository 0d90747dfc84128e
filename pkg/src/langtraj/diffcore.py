"""A small reverse-mode differentiation engine on numpy arrays.

Every :class:`Tensor` produced by an operation remembers its parents and a
closure that pushes its gradient back to them.  ``Tensor.backward`` orders
the recorded graph topologically and runs each closure exactly once.
Arrays are float64 throughout so that finite-difference checks are tight.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class TrainingDivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that needs it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            node._backward(g, grads)

    # -- operators ------------------------------------------------------
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

    def __truediv__(self, other):
        return mul(self, reciprocal(other) if isinstance(other, Tensor) else 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create an op output; ``backward(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if _needs(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g, grads, _parents=out._parents, _fn=backward):
            pgrads = _fn(g)
            for p, pg in zip(_parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        out._backward = _bw
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and cheaper than branching on the sign
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def safe_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        denom = np.expand_dims(np.where(n > 0, n, 1.0), axis)
        scale = np.expand_dims(np.where(n > 0, g, 0.0), axis)
        return (scale * a.data / denom,)

    return _make(n, (a,), bw)


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        idx = np.nonzero(idx)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def index_update(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique, axis 0) replaced by ``values``."""
    idx = np.asarray(idx, dtype=np.int64)
    if values.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"index_update: values {values.shape} for {len(idx)} rows of {base.shape}")
    data = base.data.copy()
    data[idx] = values.data

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _make(data, (base, values), bw)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ref = ts[0].data
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]}")
    data = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(data, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    data = np.stack([t.data for t in ts], axis=axis)
    return _make(data, ts, lambda g: tuple(np.moveaxis(g, axis, 0)))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert ``axis`` and repeat the tensor ``n`` times along it."""
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make(data, (a,), lambda g: (g.sum(axis=axis),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmin(a: Tensor, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; the gradient goes to the first minimiser."""
    idx = np.argmin(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(data, (a,), bw)


def masked_max(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Max over ``axis`` ignoring entries where ``mask`` is False (all-masked -> 0)."""
    mask = np.broadcast_to(mask, a.shape)
    filled = np.where(mask, a.data, -np.inf)
    idx = np.argmax(filled, axis=axis)
    any_valid = mask.any(axis=axis)
    data = np.where(any_valid, np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis), 0.0)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g * any_valid, axis), axis=axis)
        return (full,)

    return _make(data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient passed unchanged to ``soft``."""
    if hard.shape != soft.shape:
        raise ShapeError("straight_through: shape mismatch")
    return _make(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,))


# -- network primitives -----------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    out_shape = x.shape[:-1] + (W.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _make(y.reshape(out_shape), parents, bw)


def _softmax_np(x: np.ndarray, mask: Optional[np.ndarray], axis: int) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    xm = np.where(mask, x, -np.inf)
    mx = xm.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - mx), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; masked entries get 0 and an all-masked row is all 0."""
    y = _softmax_np(x.data, mask, axis)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position cross-entropy ``-log softmax(logits)[target]`` (no reduction)."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError("cross_entropy: target id out of range")
    ls = log_softmax_np(logits.data)
    loss = -np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]

    def bw(g):
        p = np.exp(ls)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return _make(loss, (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(loss, (logits,), lambda g: (g * (_sigmoid(x) - t),))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def lstm_cell_step(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    Wx: Tensor,
    Wh: Tensor,
    b: Tensor,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    Where ``mask`` (shape ``x.shape[:-1]``) is False the previous ``(h, c)``
    are passed through unchanged.
    """
    H = h.shape[-1]
    if Wx.shape != (x.shape[-1], 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_cell_step: x {x.shape}, h {h.shape}, Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    hd = h.data.reshape(-1, H)
    cd = c.data.reshape(-1, H)
    z = xd @ Wx.data + hd @ Wh.data + b.data
    act = _sigmoid(z)
    i = act[:, :H]
    f = act[:, H:2 * H]
    o = act[:, 3 * H:]
    gg = np.tanh(z[:, 2 * H:3 * H])
    c_new = f * cd + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        h_out = m * h_new + (1 - m) * hd
        c_out = m * c_new + (1 - m) * cd
    else:
        m = None
        h_out, c_out = h_new, c_new
    hc = np.concatenate([h_out, c_out], axis=-1).reshape(lead + (2 * H,))

    def bw(g):
        g = g.reshape(-1, 2 * H)
        gh, gc = g[:, :H], g[:, H:]
        if m is not None:
            gh_prev_pass = (1 - m) * gh
            gc_prev_pass = (1 - m) * gc
            gh = m * gh
            gc = m * gc
        gc_total = gc + gh * o * (1.0 - tc * tc)
        do = gh * tc
        di = gc_total * gg
        dg = gc_total * i
        df = gc_total * cd
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=-1
        )
        gx = (dz @ Wx.data.T).reshape(x.shape)
        ghp = dz @ Wh.data.T
        gcp = gc_total * f
        if m is not None:
            ghp = ghp + gh_prev_pass
            gcp = gcp + gc_prev_pass
        return gx, ghp.reshape(h.shape), gcp.reshape(c.shape), xd.T @ dz, hd.T @ dz, dz.sum(axis=0)

    joint = _make(hc, (x, h, c, Wx, Wh, b), bw)
    return joint[..., :H], joint[..., H:]


def scaled_general_attention(
    query: Tensor, keys: Tensor, W: Tensor, mask: Optional[np.ndarray] = None
) -> Tensor:
    """Attention weights ``softmax(query W keys^T / sqrt(d_k))`` over key positions.

    ``query`` is ``(..., Dq)``, ``keys`` ``(..., L, Dk)``, ``W`` ``(Dq, Dk)``;
    the result is ``(..., L)``.  Masked positions get weight 0.
    """
    Dq, Dk = W.shape
    if query.shape[-1] != Dq or keys.shape[-1] != Dk or query.shape[:-1] != keys.shape[:-2]:
        raise ShapeError(f"scaled_general_attention: query {query.shape}, keys {keys.shape}, W {W.shape}")
    scale = 1.0 / np.sqrt(Dk)
    qW = query.data @ W.data  # (..., Dk)
    scores = np.einsum("...k,...lk->...l", qW, keys.data) * scale
    w = _softmax_np(scores, mask, -1)

    def bw(g):
        gs = w * (g - np.sum(g * w, axis=-1, keepdims=True)) * scale
        gqW = np.einsum("...l,...lk->...k", gs, keys.data)
        gkeys = np.einsum("...l,...k->...lk", gs, qW)
        gq = gqW @ W.data.T
        gW = query.data.reshape(-1, Dq).T @ gqW.reshape(-1, Dk)
        return gq, gkeys, gW

    return _make(w, (query, keys, W), bw)


class GumbelSample(NamedTuple):
    probs: Tensor
    ids: np.ndarray
    onehot: Tensor


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-16)))


def gumbel_softmax_sample(
    logits: Tensor,
    tau: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    hard: bool = True,
    noise: Optional[np.ndarray] = None,
) -> GumbelSample:
    """Relaxed categorical sample ``softmax((logits + g) / tau)``.

    ``ids`` is the argmax of the relaxed probabilities.  With ``hard`` the
    returned ``onehot`` carries the exact one-hot forward value while its
    gradient flows through the relaxed probabilities (straight-through);
    otherwise ``onehot`` is the relaxed probabilities themselves.  Passing
    ``noise`` freezes the Gumbel draw.
    """
    if not tau > 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax_sample needs an rng or explicit noise")
        noise = gumbel_noise(logits.shape, rng)
    probs = softmax(mul(add(logits, noise), 1.0 / tau), axis=-1)
    ids = np.argmax(probs.data, axis=-1)
    if hard:
        oh = np.zeros_like(probs.data)
        np.put_along_axis(oh, ids[..., None], 1.0, axis=-1)
        return GumbelSample(probs, ids, straight_through(oh, probs))
    return GumbelSample(probs, ids, probs)


# -- parameters and optimisation -------------------------------------------------

def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState, grads: Optional[Dict[str, np.ndarray]] = None) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place.

    Gradients come from ``grads`` when given, else from each tensor's
    ``.grad`` (a missing gradient counts as zero).
    """
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if not np.isfinite(total):
        raise TrainingDivergenceError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= s
    return total


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[np.ndarray, Sequence[np.ndarray]],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    ``f`` receives one Tensor per input array and returns a scalar Tensor.
    The relative error of each coordinate is
    ``|tape - fd| / max(|tape|, |fd|, floor)``.
    """
    single = isinstance(inputs, np.ndarray)
    arrays = [np.array(inputs, dtype=np.float64)] if single else [np.array(a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*ts)
    out.backward()
    worst = 0.0
    for t, a in zip(ts, arrays):
        tape = t.grad if t.grad is not None else np.zeros_like(a)
        fd = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with no_grad():
                fp = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = old - h
            with no_grad():
                fm = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = old
            fd.reshape(-1)[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(tape), np.abs(fd)), floor)
        worst = max(worst, float(np.max(np.abs(tape - fd) / denom)) if a.size else 0.0)
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    coords: int = 3,
    rng: Optional[np.random.Generator] = None,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> Tuple[float, str]:
    """Gradient check of a closure against named parameters, on sampled coordinates.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    Up to ``coords`` coordinates per parameter are perturbed in place (and
    restored).  Returns the worst relative error and the parameter holding it.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    tape = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    worst, where = 0.0, ""
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            with no_grad():
                fp = loss_fn().item()
            flat[i] = old - h
            with no_grad():
                fm = loss_fn().item()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            g = tape[name].reshape(-1)[i]
            err = abs(g - fd) / max(abs(g), abs(fd), floor)
            if err > worst:
                worst, where = float(err), name
    return worst, where


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = "LANGTRAJ-CKPT 1"


def save_arrays(path: str, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named arrays as a text header plus a flat little-endian blob.

    Layout: magic line, a JSON ``meta`` line, one header line per array
    ``name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes``, ``END``, the blob,
    then the 32-byte SHA-256 of everything before it.
    """
    lines = [CKPT_MAGIC, json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t<f8\t{shape}\t{offset}\t{len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("END")
    payload = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload + hashlib.sha256(payload).digest())
    os.replace(tmp, path)


def load_arrays(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    end = payload.index(b"\nEND\n") + len(b"\nEND\n")
    header = payload[:end].decode("utf-8").split("\n")
    if header[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    meta = json.loads(header[1])
    blob = payload[end:]
    arrays = {}
    for line in header[2:]:
        if line in ("END", ""):
            continue
        name, dtype, shape, off, nbytes = line.split("\t")
        shp = tuple(int(s) for s in shape.split(",")) if shape else ()
        off, nbytes = int(off), int(nbytes)
        arrays[name] = np.frombuffer(blob[off: off + nbytes], dtype=dtype).reshape(shp).astype(np.float64)
    return arrays, meta


def save_checkpoint(path: str, params: Dict[str, Tensor], opt: Optional[AdamState] = None, meta: Optional[dict] = None) -> None:
    """Save parameters to ``path`` and, if given, Adam state to ``path + '.opt'``."""
    save_arrays(path, {k: p.data for k, p in params.items()}, meta)
    if opt is not None:
        arrays = {f"m/{k}": v for k, v in opt.m.items()}
        arrays.update({f"v/{k}": v for k, v in opt.v.items()})
        save_arrays(
            path + ".opt",
            arrays,
            {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        )


def load_checkpoint(path: str, params: Optional[Dict[str, Tensor]] = None):
    """Load a checkpoint; fills ``params`` in place when given.

    Returns ``(arrays, meta, adam_state_or_None)``.
    """
    arrays, meta = load_arrays(path)
    if params is not None:
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {k}")
            p.data = arrays[k].copy()
    opt = None
    if os.path.exists(path + ".opt"):
        oarr, ometa = load_arrays(path + ".opt")
        opt = AdamState(lr=ometa["lr"], beta1=ometa["beta1"], beta2=ometa["beta2"], eps=ometa["eps"], step=ometa["step"])
        opt.m = {k[2:]: v for k, v in oarr.items() if k.startswith("m/")}
        opt.v = {k[2:]: v for k, v in oarr.items() if k.startswith("v/")}
    return arrays, meta, opt
