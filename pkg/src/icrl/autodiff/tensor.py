"""Reverse-mode automatic differentiation over numpy arrays.

Every op computes its forward value eagerly and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import UsageError

_STATE = {"grad": True, "dtype": np.float32}


def default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    old = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        want = dtype or (arr.dtype.type if np.issubdtype(arr.dtype, np.floating) else default_dtype())
        self.data = arr.astype(want, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # --- basic protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents, node._backward = (), None

    # --- operator sugar -----------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise UsageError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    half = d.dtype.type(0.5)
    d2 = d * d
    t = np.tanh(c * d * (1 + k * d2))
    out = half * d * (1 + t)

    def back(g):
        dinner = c * (1 + 3 * k * d2)
        return (g * (half * (1 + t) + half * d * (1 - t * t) * dinner),)

    return _result(out, (x,), back)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    d = x.data
    factor = np.where(d > 0, 1.0, slope).astype(d.dtype)
    return _result(d * factor, (x,), lambda g: (g * factor,))


# --- linear algebra and shape -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise UsageError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(a.data[index], (a,), back)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise UsageError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tensors, back)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def take_along(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with the index axis squeezed out afterwards."""
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), back)


def embedding(weight: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    n = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise UsageError(f"embedding index outside [0, {n}): min {idx.min()}, max {idx.max()}")

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(weight.data[idx], (weight,), back)


# --- normalisation, softmax, losses ---------------------------------------------


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        gh = g if gamma is None else g * gamma.data
        n = d.shape[-1]
        gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _result(out, parents, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), back)


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _result(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back)


def dropout(x: Tensor, keep: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; ``keep`` is the keep-probability."""
    if keep >= 1.0 or rng is None:
        return x
    if not 0.0 < keep:
        raise UsageError("dropout keep-probability must be positive")
    mask = _keep_mask(rng, x.shape, keep, x.dtype)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def _keep_mask(rng: np.random.Generator, shape, keep: float, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: 0 or 1/keep.

    Uniform 16-bit draws from raw generator bytes (keep is quantized to 2**-16),
    several times cheaper than float sampling for attention-sized masks.
    """
    n = int(np.prod(shape))
    u = np.frombuffer(rng.bytes(2 * n), dtype="<u2").reshape(shape)
    mask = (u < round(keep * 65536)).astype(dtype)
    mask *= np.dtype(dtype).type(1.0 / keep)
    return mask


def _masked_mean_weights(shape: tuple, mask, dtype) -> np.ndarray:
    m = np.ones(shape, dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
    total = m.sum()
    return m / total if total > 0 else m


def cross_entropy(logits: Tensor, targets, mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over (masked) positions against optionally smoothed one-hot targets."""
    n = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise UsageError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    dt = logits.dtype.type
    probs = np.full(logits.shape, dt(label_smoothing / n))
    np.put_along_axis(probs, tgt[..., None], dt(1.0 - label_smoothing + label_smoothing / n), axis=-1)
    w = _masked_mean_weights(tgt.shape, mask, logits.dtype)
    x = logits.data
    shifted = x - x.max(-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
    per = -(probs * logp).sum(-1)
    out = np.asarray((per * w).sum(), dtype=logits.dtype)

    def back(g):
        return (g * w[..., None] * (np.exp(logp) - probs),)

    return _result(out, (logits,), back)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over (masked) positions; ``target`` carries no gradient."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise UsageError(f"mse: prediction {pred.shape} vs target {t.shape}")
    w = _masked_mean_weights(pred.shape, mask, pred.dtype)
    diff = pred.data - t
    out = np.asarray((w * diff * diff).sum(), dtype=pred.dtype)
    return _result(out, (pred,), lambda g: (2 * g * w * diff,))


def masked_mean(x: Tensor, mask=None) -> Tensor:
    w = _masked_mean_weights(x.shape, mask, x.dtype)
    return tsum(mul(x, Tensor(w)))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def attention_mask(n_query: int, n_key: int, pad_mask=None) -> np.ndarray:
    """Boolean [B or 1, 1, n_query, n_key] mask; queries are the last ``n_query`` positions.

    Real queries see real keys at or before them. Left-padding queries see only
    padding, so no row is ever fully masked.
    """
    qpos = np.arange(n_key - n_query, n_key)[:, None]
    causal = np.arange(n_key)[None, :] <= qpos
    if pad_mask is None:
        return causal[None, None]
    pad = np.asarray(pad_mask, dtype=bool)
    q_real = pad[:, n_key - n_query :, None]
    k_real = pad[:, None, :]
    return (causal[None] & (k_real == q_real))[:, None]


def causal_attention(
    qkv: Tensor,
    n_heads: int,
    pad_mask=None,
    keep: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    last_only: bool = False,
) -> Tensor:
    """Fused multi-head causal self-attention over packed ``[B, T, 3*d]`` projections.

    With ``last_only`` only the final query position is computed, giving
    ``[B, 1, d]``; rollouts use this to skip work no later layer needs.
    """
    B, T, d3 = qkv.shape
    if d3 % 3 or (d3 // 3) % n_heads:
        raise UsageError(f"causal_attention: width {d3} not 3 * n_heads * head_dim for {n_heads} heads")
    d = d3 // 3
    dh = d // n_heads
    dt = qkv.dtype.type
    sc = dt(1.0 / math.sqrt(dh))
    x = qkv.data.reshape(B, T, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = x[0], x[1], x[2]
    tq = 1 if last_only else T
    qs = q[:, :, T - tq :]
    s = qs @ np.swapaxes(k, -1, -2)
    s *= sc
    allowed = attention_mask(tq, T, pad_mask)
    s += np.where(allowed, dt(0), dt(-1e9))
    s -= s.max(-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(-1, keepdims=True)
    if keep < 1.0 and rng is not None:
        drop = _keep_mask(rng, p.shape, keep, p.dtype)
        pd = p * drop
    else:
        drop = None
        pd = p
    o = pd @ v
    out = o.transpose(0, 2, 1, 3).reshape(B, tq, d)

    def back(g):
        go = g.reshape(B, tq, n_heads, dh).transpose(0, 2, 1, 3)
        dv = np.swapaxes(pd, -1, -2) @ go
        dp = go @ np.swapaxes(v, -1, -2)
        if drop is not None:
            dp *= drop
        ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * sc
        dq = np.zeros_like(q)
        dq[:, :, T - tq :] = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ qs
        dx = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, d3)
        return (dx,)

    return _result(out, (qkv,), back)
