"""Registered finite-difference checks for every differentiable op and tiny model composites.

Each factory yields cases over at least three random shapes. Scalar objectives
are random-weighted sums so that normalization layers do not zero the gradient.
Inputs to piecewise-linear ops are kept away from their kinks; composites that
contain ReLUs use a small step (1e-6) so a probe does not cross one.
"""

from __future__ import annotations

import numpy as np

from .model import Bottleneck, Decoder, FeatureExtractor, Head, ModelConfig
from .numerics import ops
from .numerics.gradcheck import GradCase, register
from .numerics.tensor import Tensor

F64 = np.float64


def _const(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(F64))


def _wsum(t: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(t, Tensor(w)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


@register("add")
def _add(rng):
    for shape, bshape in [((3,), (3,)), ((2, 4), (4,)), ((2, 3, 5), (1, 3, 1))]:
        b = _const(rng, bshape)
        w = rng.normal(size=shape)
        yield GradCase(f"add{shape}", lambda x, b=b, w=w: _wsum(ops.add(x, b), w), rng.normal(size=shape))
        a = _const(rng, shape)
        yield GradCase(f"add-bcast{bshape}", lambda y, a=a, w=w: _wsum(ops.add(a, y), w), rng.normal(size=bshape))


@register("sub")
def _sub(rng):
    for shape in [(3,), (2, 4), (2, 3, 2)]:
        b = _const(rng, shape)
        w = rng.normal(size=shape)
        yield GradCase(f"sub{shape}", lambda x, b=b, w=w: _wsum(ops.sub(b, x), w), rng.normal(size=shape))


@register("mul")
def _mul(rng):
    for shape, bshape in [((3,), (3,)), ((2, 4), (4,)), ((2, 3, 5), (2, 1, 5))]:
        b = _const(rng, bshape)
        w = rng.normal(size=shape)
        yield GradCase(f"mul{shape}", lambda x, b=b, w=w: _wsum(ops.mul(x, b), w), rng.normal(size=shape))
        a = _const(rng, shape)
        yield GradCase(f"mul-bcast{bshape}", lambda y, a=a, w=w: _wsum(ops.mul(a, y), w), rng.normal(size=bshape))


@register("matmul")
def _matmul(rng):
    for ashape, bshape in [((2, 3), (3, 4)), ((2, 3, 4), (4, 2)), ((2, 2, 3, 4), (2, 2, 4, 3))]:
        b = _const(rng, bshape)
        a = _const(rng, ashape)
        w = rng.normal(size=(a.data @ b.data).shape)
        yield GradCase(f"matmul-a{ashape}", lambda x, b=b, w=w: _wsum(ops.matmul(x, b), w), rng.normal(size=ashape))
        yield GradCase(f"matmul-b{bshape}", lambda y, a=a, w=w: _wsum(ops.matmul(a, y), w), rng.normal(size=bshape))


@register("reshape_transpose")
def _shape_ops(rng):
    for shape, axes in [((2, 3), (1, 0)), ((2, 3, 4), (2, 0, 1)), ((2, 1, 3, 2), (0, 3, 1, 2))]:
        w = rng.normal(size=tuple(shape[a] for a in axes))
        yield GradCase(
            f"transpose{shape}",
            lambda x, axes=axes, w=w: _wsum(ops.transpose(ops.reshape(x, (-1,)).reshape(shape), axes), w),
            rng.normal(size=shape),
        )


@register("index_take")
def _index(rng):
    for shape in [(4, 3), (5, 2, 3), (3, 6)]:
        idx = rng.integers(0, shape[0], size=5)
        w = rng.normal(size=(5,) + shape[1:])
        yield GradCase(f"take{shape}", lambda x, idx=idx, w=w: _wsum(ops.take(x, idx, axis=0), w), rng.normal(size=shape))
        w2 = rng.normal(size=shape[1:])
        yield GradCase(f"index{shape}", lambda x, w2=w2: _wsum(x[1], w2), rng.normal(size=shape))


@register("scatter_rows")
def _scatter(rng):
    for rows, n, d in [([0, 2], 4, 3), ([1], 3, 5), ([3, 0, 1], 5, 2)]:
        w = rng.normal(size=(n, d))
        yield GradCase(
            f"scatter{n}x{d}", lambda x, rows=rows, n=n, w=w: _wsum(ops.scatter_rows(x, rows, n), w), rng.normal(size=(len(rows), d))
        )


@register("concat")
def _concat(rng):
    for shape, axis in [((2, 3), 0), ((2, 3), 1), ((2, 2, 3), 1)]:
        other = _const(rng, shape)
        out_shape = list(shape)
        out_shape[axis] *= 2
        w = rng.normal(size=out_shape)
        yield GradCase(f"concat{shape}@{axis}", lambda x, o=other, a=axis, w=w: _wsum(ops.concat([o, x], a), w), rng.normal(size=shape))


@register("where")
def _where(rng):
    for shape in [(4,), (2, 3), (2, 3, 4)]:
        cond = rng.random(shape) > 0.5
        other = _const(rng, shape[-1:])
        w = rng.normal(size=shape)
        yield GradCase(f"where-a{shape}", lambda x, c=cond, o=other, w=w: _wsum(ops.where(c, x, o), w), rng.normal(size=shape))
        full = _const(rng, shape)
        yield GradCase(
            f"where-b{shape}", lambda y, c=cond, f=full, w=w: _wsum(ops.where(c, f, y), w), rng.normal(size=shape[-1:])
        )


@register("sum_mean")
def _reductions(rng):
    for shape, axis in [((5,), None), ((2, 3), 1), ((2, 3, 4), (0, 2))]:
        w = rng.normal(size=np.sum(np.zeros(shape), axis=axis).shape)
        yield GradCase(f"sum{shape}", lambda x, a=axis, w=w: _wsum(ops.sum(x, axis=a), w), rng.normal(size=shape))
        yield GradCase(f"mean{shape}", lambda x, a=axis, w=w: _wsum(ops.mean(x, axis=a), w), rng.normal(size=shape))


@register("relu")
def _relu(rng):
    for shape in [(7,), (3, 4), (2, 3, 2, 2)]:
        w = rng.normal(size=shape)
        yield GradCase(f"relu{shape}", lambda x, w=w: _wsum(ops.relu(x), w), _away_from_zero(rng, shape))


@register("gelu")
def _gelu(rng):
    for shape in [(7,), (3, 4), (2, 3, 2, 2)]:
        w = rng.normal(size=shape)
        yield GradCase(f"gelu{shape}", lambda x, w=w: _wsum(ops.gelu(x), w), 2 * rng.normal(size=shape))


@register("tanh")
def _tanh(rng):
    for shape in [(7,), (3, 4), (2, 3, 2, 2)]:
        w = rng.normal(size=shape)
        yield GradCase(f"tanh{shape}", lambda x, w=w: _wsum(ops.tanh(x), w), rng.normal(size=shape))


@register("softmax")
def _softmax(rng):
    for shape, axis in [((5,), -1), ((3, 4), 1), ((2, 3, 4), 0)]:
        w = rng.normal(size=shape)
        yield GradCase(f"softmax{shape}", lambda x, a=axis, w=w: _wsum(ops.softmax(x, a), w), rng.normal(size=shape))


@register("log_softmax")
def _log_softmax(rng):
    for shape in [(5,), (3, 4), (2, 3, 4)]:
        w = rng.normal(size=shape)
        yield GradCase(f"log_softmax{shape}", lambda x, w=w: _wsum(ops.log_softmax(x), w), rng.normal(size=shape))


@register("dropout")
def _dropout(rng):
    for shape in [(6,), (3, 4), (2, 2, 5)]:
        seed = int(rng.integers(2**31))
        w = rng.normal(size=shape)
        # fresh generator per call keeps the keep-mask fixed across probes
        yield GradCase(
            f"dropout{shape}",
            lambda x, s=seed, w=w: _wsum(ops.dropout(x, 0.3, np.random.default_rng(s), True), w),
            rng.normal(size=shape),
        )


@register("affine")
def _affine(rng):
    for lead, d_in, d_out in [((3,), 4, 2), ((2, 3), 5, 4), ((1, 2, 2), 3, 6)]:
        wgt, b = _const(rng, (d_out, d_in)), _const(rng, (d_out,))
        r = rng.normal(size=lead + (d_out,))
        x0 = _const(rng, lead + (d_in,))
        yield GradCase(f"affine-x{lead}", lambda x, W=wgt, b=b, r=r: _wsum(ops.affine(x, W, b), r), rng.normal(size=lead + (d_in,)))
        yield GradCase(f"affine-w{lead}", lambda W, x=x0, b=b, r=r: _wsum(ops.affine(x, W, b), r), wgt.data)
        yield GradCase(f"affine-b{lead}", lambda b, x=x0, W=wgt, r=r: _wsum(ops.affine(x, W, b), r), b.data)


@register("conv2d")
def _conv2d(rng):
    for n, c, h, w, o, stride in [(1, 1, 4, 4, 1, 1), (2, 3, 8, 8, 2, 1), (2, 3, 8, 8, 4, 2)]:
        wgt, b = _const(rng, (o, c, 3, 3)), _const(rng, (o,))
        x0 = _const(rng, (n, c, h, w))
        out_shape = ops.conv2d(x0, wgt, b, stride=stride).shape
        r = rng.normal(size=out_shape)
        yield GradCase(
            f"conv2d-x{(n, c, h, w)}s{stride}",
            lambda x, W=wgt, b=b, s=stride, r=r: _wsum(ops.conv2d(x, W, b, stride=s), r),
            rng.normal(size=(n, c, h, w)),
        )
        yield GradCase(
            f"conv2d-w{(o, c)}s{stride}", lambda W, x=x0, b=b, s=stride, r=r: _wsum(ops.conv2d(x, W, b, stride=s), r), wgt.data
        )
        yield GradCase(
            f"conv2d-b{o}s{stride}", lambda b, x=x0, W=wgt, s=stride, r=r: _wsum(ops.conv2d(x, W, b, stride=s), r), b.data
        )


@register("upsample_nearest2x")
def _upsample(rng):
    for shape in [(1, 1, 1, 1), (1, 2, 2, 3), (2, 3, 4, 2)]:
        r = rng.normal(size=(shape[0], shape[1], 2 * shape[2], 2 * shape[3]))
        yield GradCase(f"upsample{shape}", lambda x, r=r: _wsum(ops.upsample_nearest2x(x), r), rng.normal(size=shape))


@register("batchnorm2d")
def _batchnorm(rng):
    for shape in [(2, 1, 2, 2), (3, 2, 3, 2), (2, 4, 4, 4)]:
        c = shape[1]
        gamma, beta = _const(rng, (c,)), _const(rng, (c,))
        r = rng.normal(size=shape)
        x0 = _const(rng, shape)

        def train(x, g=gamma, b=beta, r=r, c=c):
            return _wsum(ops.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True), r)

        def train_gamma(g, x=x0, b=beta, r=r, c=c):
            return _wsum(ops.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True), r)

        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)

        def evaluate(x, g=gamma, b=beta, r=r, rm=rm, rv=rv):
            return _wsum(ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=False), r)

        yield GradCase(f"bn-train{shape}", train, rng.normal(size=shape))
        yield GradCase(f"bn-train-gamma{shape}", train_gamma, gamma.data)
        yield GradCase(f"bn-eval{shape}", evaluate, rng.normal(size=shape))


@register("layernorm")
def _layernorm(rng):
    for shape in [(2,), (3, 4), (2, 3, 8)]:
        d = shape[-1]
        gamma, beta = _const(rng, (d,)), _const(rng, (d,))
        r = rng.normal(size=shape)
        x0 = _const(rng, shape)
        yield GradCase(f"layernorm{shape}", lambda x, g=gamma, b=beta, r=r: _wsum(ops.layernorm(x, g, b), r), rng.normal(size=shape))
        yield GradCase(f"layernorm-gamma{shape}", lambda g, x=x0, b=beta, r=r: _wsum(ops.layernorm(x, g, b), r), gamma.data)


def _attn_params(rng, d):
    p = {}
    for proj in "qkvo":
        p[f"{proj}.weight"] = _const(rng, (d, d), 1.0 / np.sqrt(d))
        p[f"{proj}.bias"] = _const(rng, (d,), 0.1)
    return p


@register("multi_head_self_attention")
def _attention(rng):
    for b, length, d, heads in [(1, 3, 8, 2), (2, 1, 4, 1), (1, 4, 16, 4)]:
        p = _attn_params(rng, d)
        r = rng.normal(size=(b, length, d))
        yield GradCase(
            f"mhsa-x{(b, length, d)}",
            lambda x, p=p, h=heads, r=r: _wsum(ops.multi_head_self_attention(x, p, h), r),
            rng.normal(size=(b, length, d)),
        )
        x0 = _const(rng, (b, length, d))

        def wrt_q(wq, p=p, x=x0, h=heads, r=r):
            return _wsum(ops.multi_head_self_attention(x, {**p, "q.weight": wq}, h), r)

        yield GradCase(f"mhsa-wq{(b, length, d)}", wrt_q, p["q.weight"].data)


@register("mse_loss")
def _mse(rng):
    for shape in [(4,), (2, 3), (2, 2, 1, 3)]:
        target = rng.normal(size=shape)
        mask = (rng.random(shape) > 0.4).astype(F64)
        mask.reshape(-1)[0] = 1.0
        yield GradCase(f"mse{shape}", lambda x, t=target: ops.mse_loss(x, t), rng.normal(size=shape))
        yield GradCase(f"mse-masked{shape}", lambda x, t=target, m=mask: ops.mse_loss(x, t, m), rng.normal(size=shape))


@register("cross_entropy_loss")
def _ce(rng):
    for b, c in [(1, 2), (3, 4), (5, 10)]:
        labels = rng.integers(0, c, size=b)
        yield GradCase(f"ce{(b, c)}", lambda x, y=labels: ops.cross_entropy_loss(x, y), rng.normal(size=(b, c)))


# ---------------------------------------------------------------------------
# composites

TINY = ModelConfig.tiny()


# Deep composites: h=1e-3 leaves O(h^2) truncation error well above 1e-4 on
# coordinates with small gradients, while h=1e-6 loses digits to roundoff.
# Steps in 1e-5..1e-4 sit between the two regimes at float64.


@register("fe_tiny")
def _fe_tiny(rng):
    fe = FeatureExtractor(TINY, np.random.default_rng(rng.integers(2**31))).astype(F64)
    r = rng.normal(size=(2, TINY.hidden))
    yield GradCase(
        "fe-tiny-input", lambda x: _wsum(fe.forward(x, training=True), r), rng.uniform(-1, 1, (2, 1, 64, 32)), h=1e-4, coords=96
    )
    name = "fe.down2.conv_a.weight"
    x0 = Tensor(rng.uniform(-1, 1, (2, 1, 64, 32)))

    def wrt_weight(wgt):
        fe.params[name] = wgt
        return _wsum(fe.forward(x0, training=True), r)

    yield GradCase("fe-tiny-weight", wrt_weight, fe.params[name].data.copy(), h=1e-5)


@register("bottleneck_tiny")
def _bottleneck_tiny(rng):
    bott = Bottleneck(TINY, np.random.default_rng(rng.integers(2**31))).astype(F64)
    for b, n in [(1, 2), (2, 3), (1, 5)]:
        mask = np.zeros((b, n), bool)
        mask[:, -1] = True
        r = rng.normal(size=(b, n + 1, TINY.hidden))

        def f(v, mask=mask, r=r):
            return _wsum(bott.forward(bott.assemble(v, mask), training=False), r)

        yield GradCase(f"bottleneck-tiny{(b, n)}", f, rng.normal(size=(b, n, TINY.hidden)), h=1e-5)

    r = rng.normal(size=(1, 4, TINY.hidden))
    v0 = _const(rng, (1, 3, TINY.hidden))
    name = "bottleneck.block1.ffn1.weight"

    def wrt_weight(wgt):
        bott.params[name] = wgt
        return _wsum(bott.forward(bott.assemble(v0), training=False), r)

    yield GradCase("bottleneck-tiny-weight", wrt_weight, bott.params[name].data.copy(), h=1e-5)


@register("decoder_tiny")
def _decoder_tiny(rng):
    dec = Decoder(TINY, np.random.default_rng(rng.integers(2**31))).astype(F64)
    r = rng.normal(size=(2, 2, 1, 64, 32))
    yield GradCase(
        "decoder-tiny-tokens", lambda t: _wsum(dec.forward(t, training=True), r), rng.normal(size=(2, 2, TINY.hidden)), h=1e-6
    )
    name = "decoder.align.weight"
    t0 = _const(rng, (3, TINY.hidden))
    r3 = rng.normal(size=(3, 1, 64, 32))

    def wrt_weight(wgt):
        dec.params[name] = wgt
        return _wsum(dec.forward(t0, training=True), r3)

    yield GradCase("decoder-tiny-weight", wrt_weight, dec.params[name].data.copy(), h=1e-6)


@register("head")
def _head(rng):
    for b, c in [(1, 3), (4, 2), (2, 10)]:
        head = Head(TINY.hidden, c, np.random.default_rng(rng.integers(2**31))).astype(F64)
        labels = rng.integers(0, c, size=b)
        yield GradCase(f"head-ce{(b, c)}", lambda x, hd=head, y=labels: ops.cross_entropy_loss(hd.forward(x), y), rng.normal(size=(b, TINY.hidden)))


OP_CHECKS = [
    "add", "sub", "mul", "matmul", "reshape_transpose", "index_take", "scatter_rows", "concat", "where",
    "sum_mean", "relu", "gelu", "tanh", "softmax", "log_softmax", "dropout", "affine", "conv2d",
    "upsample_nearest2x", "batchnorm2d", "layernorm", "multi_head_self_attention", "mse_loss", "cross_entropy_loss",
]  # fmt: skip
COMPOSITE_CHECKS = ["fe_tiny", "bottleneck_tiny", "decoder_tiny", "head"]

