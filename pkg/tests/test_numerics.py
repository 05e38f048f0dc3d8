import math

import numpy as np
import pytest

from patchifier import gradsuite
from patchifier.errors import ConfigError, DegenerateError, NumericError, ShapeError
from patchifier.numerics import ops
from patchifier.numerics.gradcheck import REGISTRY, finite_difference_check, run_registry
from patchifier.numerics.optim import ParamGroup, adamw_step
from patchifier.numerics.tensor import Tensor, no_grad, parameter


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- tensor / autodiff -------------------------------------------------------


def test_backward_accumulates_through_shared_nodes():
    x = T([2.0, -1.0], grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3
    ops.sum(y).backward()
    np.testing.assert_allclose(x.grad, [7.0, 1.0])


def test_no_grad_builds_no_graph():
    x = T([1.0], grad=True)
    with no_grad():
        y = x * 2.0
    assert y._parents == () and not y.requires_grad


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_forward_raises_numeric_error():
    with pytest.raises(NumericError):
        ops.mul(T([np.inf]), T([0.0]))


def test_integer_input_is_cast_to_float32():
    assert Tensor(np.arange(3)).dtype == np.float32


def test_broadcast_add_gradient_is_reduced():
    a = T(np.ones((3, 4)), grad=True)
    b = T(np.ones(4), grad=True)
    ops.sum(ops.add(a, b)).backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


# --- conv / upsample -----------------------------------------------------------


def test_conv_identity_kernel_returns_input(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = ops.conv2d(T(x), T(w), T([0.0]), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_counts_overlaps():
    out = ops.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), T([0.0])).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], float)
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient_on_random_input(rng, stride):
    w = T(rng.normal(size=(4, 3, 3, 3)))
    b = T(rng.normal(size=4))
    r = rng.normal(size=(2, 4, 8 // stride, 8 // stride))
    err = finite_difference_check(lambda x: ops.sum(ops.conv2d(x, w, b, stride=stride) * r), rng.normal(size=(2, 3, 8, 8)))
    assert err < 1e-4


def test_conv_stride_two_halves_even_dims():
    out = ops.conv2d(T(np.zeros((1, 2, 16, 8))), T(np.zeros((3, 2, 3, 3))), stride=2)
    assert out.shape == (1, 3, 8, 4)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))


def test_upsample_replicates_and_gradient_is_four():
    x = T([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
    out = ops.upsample_nearest2x(x)
    np.testing.assert_array_equal(out.data[0, 0], np.kron([[1, 2], [3, 4]], np.ones((2, 2))))
    ops.sum(out).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))
    assert ops.upsample_nearest2x(T(np.full((1, 1, 1, 1), 5.0))).data.tolist() == [[[[5.0, 5.0], [5.0, 5.0]]]]


# --- normalization -----------------------------------------------------------


def test_batchnorm_training_standardizes_plus_minus_one():
    x = T(np.array([-1.0, 1.0, -1.0, 1.0]).reshape(2, 1, 1, 2))
    rm, rv = np.zeros(1), np.ones(1)
    out = ops.batchnorm2d(x, T([1.0]), T([0.0]), rm, rv, training=True)
    np.testing.assert_allclose(np.unique(out.data), [-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)])
    # running statistics moved toward the batch statistics
    assert rm[0] == 0.0 and rv[0] != 1.0


def test_batchnorm_eval_is_affine_only():
    out = ops.batchnorm2d(T(np.zeros((1, 1, 2, 2))), T([2.0]), T([3.0]), np.zeros(1), np.ones(1), training=False)
    np.testing.assert_allclose(out.data, 3.0)


def test_batchnorm_single_value_per_channel_is_degenerate():
    with pytest.raises(DegenerateError):
        ops.batchnorm2d(T(np.zeros((1, 1, 1, 1))), T([1.0]), T([0.0]), np.zeros(1), np.ones(1), training=True)


def test_layernorm_constant_row_maps_to_zero():
    out = ops.layernorm(T([[1.0, 1.0, 1.0]]), T(np.ones(3)), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("a", [0.5, 3.0])
def test_layernorm_symmetric_pair(a):
    out = ops.layernorm(T([[-a, a]]), T(np.ones(2)), T(np.zeros(2))).data[0]
    np.testing.assert_allclose(out, [-a / math.sqrt(a * a + 1e-5), a / math.sqrt(a * a + 1e-5)], rtol=1e-12)


def test_layernorm_single_feature_is_degenerate():
    with pytest.raises(DegenerateError):
        ops.layernorm(T([[1.0]]), T([1.0]), T([0.0]))


# --- affine / attention / activations -------------------------------------------


def test_affine_identity_and_zero_weight(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ops.affine(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    b = rng.normal(size=5)
    np.testing.assert_array_equal(ops.affine(T(x), T(np.zeros((5, 4))), T(b)).data, np.broadcast_to(b, (3, 5)))


def _attn_params(rng, d):
    return {f"{n}.{k}": T(rng.normal(size=(d, d)) if k == "weight" else rng.normal(size=d)) for n in "qkvo" for k in ("weight", "bias")}


def test_attention_single_token_is_value_then_output(rng):
    p = _attn_params(rng, 4)
    x = rng.normal(size=(1, 1, 4))
    v = x @ p["v.weight"].data.T + p["v.bias"].data
    expected = v @ p["o.weight"].data.T + p["o.bias"].data
    np.testing.assert_allclose(ops.multi_head_self_attention(T(x), p, heads=2).data, expected, rtol=1e-12)


def test_attention_is_permutation_equivariant(rng):
    p = _attn_params(rng, 6)
    x = rng.normal(size=(2, 5, 6))
    perm = rng.permutation(5)
    out = ops.multi_head_self_attention(T(x), p, heads=3).data
    out_perm = ops.multi_head_self_attention(T(x[:, perm]), p, heads=3).data
    np.testing.assert_allclose(out_perm, out[:, perm], rtol=1e-10, atol=1e-12)


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(ConfigError):
        ops.multi_head_self_attention(T(np.zeros((1, 2, 6))), _attn_params(rng, 6), heads=4)


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_array_equal(ops.softmax(T([1000.0, 0.0])).data, [1.0, 0.0])
    # exact when the shift itself is exact in floating point
    x = np.array([0.25, -1.5, 2.0])
    np.testing.assert_array_equal(ops.softmax(T(x + 8.0)).data, ops.softmax(T(x)).data)
    y = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(ops.softmax(T(y + 7.1)).data, ops.softmax(T(y)).data, rtol=1e-15)
    assert ops.softmax(T(y)).data.sum() == pytest.approx(1.0, abs=1e-6)


def test_activation_values():
    np.testing.assert_array_equal(ops.relu(T([-2.0, 3.0])).data, [0.0, 3.0])
    assert ops.gelu(T([0.0])).data[0] == 0.0
    assert ops.tanh(T([0.0])).data[0] == 0.0


def test_dropout_eval_is_identity_and_train_rescales(rng):
    x = T(np.ones(1000))
    assert ops.dropout(x, 0.5, rng, training=False) is x
    out = ops.dropout(x, 0.5, rng, training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}


# --- losses -------------------------------------------------------------------


def test_mse_examples(rng):
    t = rng.normal(size=(2, 3))
    assert ops.mse_loss(T(t), t).data == 0.0
    assert ops.mse_loss(T(t + 1), t).data == pytest.approx(1.0)
    mask = np.array([[1, 0, 0], [0, 1, 0]], float)
    pred = t.copy()
    pred[0, 0] += 2.0
    base = ops.mse_loss(T(pred), t, mask).data
    pred[0, 1] = 1e3  # unmasked element
    assert ops.mse_loss(T(pred), t, mask).data == base == pytest.approx(2.0)


def test_mse_empty_mask_is_an_error():
    with pytest.raises(ConfigError):
        ops.mse_loss(T(np.zeros(3)), np.zeros(3), np.zeros(3))


def test_cross_entropy_examples():
    assert ops.cross_entropy_loss(T(np.zeros((1, 10))), [3]).data == pytest.approx(math.log(10), abs=1e-12)
    big = np.zeros((1, 3))
    big[0, 1] = 50.0
    assert ops.cross_entropy_loss(T(big), [1]).data < 1e-20


# --- AdamW --------------------------------------------------------------------


def _group(value, grad):
    p = parameter(np.array([value]))
    p.grad = np.array([grad], np.float32)
    return p, ParamGroup({"p": p})


def test_adamw_zero_grad_no_decay_is_identity():
    p, g = _group(1.0, 0.0)
    adamw_step(g, weight_decay=0.0)
    assert p.data[0] == np.float32(1.0)


def test_adamw_decay_only_step():
    p, g = _group(1.0, 0.0)
    adamw_step(g, lr=1e-4, weight_decay=0.01)
    assert p.data[0] == pytest.approx(1 - 1e-6, abs=1e-7)


def test_adamw_first_step_hand_computed():
    p, g = _group(1.0, 1.0)
    lr, wd, eps = 1e-4, 0.01, 1e-8
    adamw_step(g, lr=lr, weight_decay=wd, eps=eps)
    expected = (1 - lr * wd) - lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(expected, abs=1e-7)
    assert g.t == 1


def test_adamw_missing_gradient_names_parameter():
    p = parameter(np.ones(2))
    with pytest.raises(ConfigError, match="w1"):
        adamw_step(ParamGroup({"w1": p}))


# --- finite differences -----------------------------------------------------


def test_fd_quadratic_and_linear_cases():
    assert finite_difference_check(lambda x: ops.sum(x * x), np.array([3.0])) < 1e-6
    assert finite_difference_check(lambda x: ops.sum(x * 2.5), np.array([1.0, -4.0, 2.0])) < 1e-7


def test_fd_conv_bn_relu_composite(rng):
    w = T(rng.normal(size=(2, 1, 3, 3)))
    gamma, beta = T([1.5, 0.5]), T([0.1, -0.2])
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    r = rng.normal(size=(1, 2, 4, 4))

    def f(x):
        y = ops.batchnorm2d(ops.conv2d(x, w), gamma, beta, rm, rv, training=False)
        return ops.sum(ops.relu(y) * r)

    x = rng.normal(size=(1, 1, 4, 4))
    assert finite_difference_check(f, x) < 1e-4


def test_fd_rejects_nondeterministic_function(rng):
    with pytest.raises(NumericError):
        finite_difference_check(lambda x: ops.sum(x * float(rng.normal())), np.ones(2))


def test_registry_covers_every_public_differentiable_op():
    expected = {
        "add", "sub", "mul", "matmul", "concat", "where", "relu", "gelu", "tanh", "softmax", "log_softmax",
        "dropout", "affine", "conv2d", "upsample_nearest2x", "batchnorm2d", "layernorm",
        "multi_head_self_attention", "mse_loss", "cross_entropy_loss", "scatter_rows",
    }  # fmt: skip
    assert expected <= set(gradsuite.OP_CHECKS)
    assert set(gradsuite.OP_CHECKS) | set(gradsuite.COMPOSITE_CHECKS) == set(REGISTRY)


@pytest.mark.parametrize("name", gradsuite.OP_CHECKS)
def test_registered_op_passes(name):
    assert run_registry([name])[name] < 1e-4


def test_corrupted_backward_is_detected(monkeypatch):
    real = ops.tanh

    def wrong_tanh(x):
        out = real(x)
        out._backward = lambda g: x._accumulate(g)  # pretends d tanh = 1
        return out

    monkeypatch.setattr(ops, "tanh", wrong_tanh)
    assert run_registry(["tanh"])["tanh"] > 1e-2
