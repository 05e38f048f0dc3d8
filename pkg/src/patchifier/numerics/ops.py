"""Differentiable operations on :class:`Tensor`.

Every op returns a fresh tensor and registers a backward closure; dtype follows
the inputs, so the same code runs at float32 for training and float64 for
gradient checks.
"""

from __future__ import annotations

import math
from numbers import Number

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DegenerateError, ShapeError
from .tensor import Tensor, as_tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return Tensor._result(a.data + a.data.dtype.type(b), (a,), a._accumulate, "add")
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -b)
    if isinstance(a, Number):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        s = a.data.dtype.type(b)
        return Tensor._result(a.data * s, (a,), lambda g: a._accumulate(g * s), "mul")
    if isinstance(a, Number):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics, ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g.reshape(x.shape)), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: x._accumulate(np.transpose(g, inv)), "transpose"
    )


def index(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor._result(np.array(x.data[idx]), (x,), backward, "index")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        x._accumulate(full)

    return Tensor._result(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def scatter_rows(src: Tensor, rows, n_rows: int) -> Tensor:
    """Place ``src`` rows at positions ``rows`` of a zero matrix with ``n_rows`` rows."""
    src = as_tensor(src)
    rows = np.asarray(rows, dtype=np.intp)
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("scatter_rows needs distinct row indices")
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    out[rows] = src.data
    return Tensor._result(out, (src,), lambda g: src._accumulate(g[rows]), "scatter_rows")


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            x._accumulate(part)

    return Tensor._result(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def where(cond, a, b) -> Tensor:
    """Elementwise select; the unselected operand is never read into the output."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0).astype(g.dtype), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0, g).astype(g.dtype), b.shape))

    return Tensor._result(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))

    return Tensor._result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor._result(
        np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: x._accumulate(g * pos), "relu"
    )


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: x._accumulate(g * (1 - y * y)), "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    y = 0.5 * d * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d * d)
        x._accumulate(g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner))

    return Tensor._result(y.astype(x.dtype), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._result(y, (x,), backward, "log_softmax")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return Tensor._result(x.data * keep, (x,), lambda g: x._accumulate(g * keep), "dropout")


# ---------------------------------------------------------------------------
# layers


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (D_out, D_in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return Tensor._result(out.reshape(lead + (weight.shape[0],)), parents, backward, "affine")


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input, OIKK weight (im2col + one matmul)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {weight.shape}")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad and stride == 1:
            # dx is the correlation of the zero-padded gradient with the flipped kernel
            lo = k - 1 - pad
            gp = np.zeros((n, o, h + k - 1, w + k - 1), g.dtype)
            gp[:, :, lo : lo + ho, lo : lo + wo] = g
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, o * k * k)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(o * k * k, c)
            x._accumulate((gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        elif x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ wmat).reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
            x._accumulate(dxp[:, :, pad : pad + h, pad : pad + w])

    return Tensor._result(np.ascontiguousarray(out), parents, backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._result(out, (x,), backward, "upsample_nearest2x")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the running buffers are updated in place; the running
    variance tracks the unbiased batch variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    shape = (1, -1, 1, 1)
    if training:
        if m < 2:
            raise DegenerateError(f"batchnorm2d in training needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / (m - 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(shape)
            x._accumulate(dx)

    return Tensor._result(out, (x, gamma, beta), backward, "batchnorm2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise DegenerateError("layernorm needs a last axis of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (inv / d) * (
                d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            x._accumulate(dx)

    return Tensor._result(out.astype(x.dtype), (x, gamma, beta), backward, "layernorm")


def multi_head_self_attention(
    x: Tensor,
    params: dict[str, Tensor],
    heads: int = 4,
    prefix: str = "",
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Bidirectional multi-head self-attention on a B x L x D sequence.

    ``params`` must hold ``{prefix}{q,k,v,o}.weight`` / ``.bias`` entries.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"attention expects B x L x D, got {x.shape}")
    b, length, d = x.shape
    if length == 0:
        raise ShapeError("attention over an empty sequence")
    if d % heads:
        raise ConfigError(f"hidden size {d} not divisible by {heads} heads")
    dk = d // heads

    def split(t):
        return t.reshape(b, length, heads, dk).transpose(0, 2, 1, 3)

    q = split(affine(x, params[prefix + "q.weight"], params[prefix + "q.bias"]))
    k = split(affine(x, params[prefix + "k.weight"], params[prefix + "k.bias"]))
    v = split(affine(x, params[prefix + "v.weight"], params[prefix + "v.bias"]))
    scores = mul(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dk))
    attn = dropout(softmax(scores, axis=-1), dropout_p, rng, training)
    ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return affine(ctx, params[prefix + "o.weight"], params[prefix + "o.bias"])


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error; with ``mask``, a weighted mean over mask-weighted elements."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    if mask is None:
        w = None
        denom = pred.size
        total = np.sum(diff * diff)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
        denom = float(np.sum(w))
        if denom <= 0:
            raise ConfigError("mse_loss mask selects no elements")
        total = np.sum(w * diff * diff)
    out = np.asarray(total / denom, dtype=pred.dtype)

    def backward(g):
        grad = (2.0 / denom) * diff * g
        if w is not None:
            grad = grad * w
        pred._accumulate(grad.astype(pred.dtype))

    return Tensor._result(out, (pred,), backward, "mse_loss")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects B x C logits and B labels, got {logits.shape}, {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"label out of range [0, {c})")
    logp = log_softmax(logits, axis=1)
    picked = index(logp, (np.arange(len(labels)), labels))
    return mul(sum(picked), -1.0 / len(labels))
