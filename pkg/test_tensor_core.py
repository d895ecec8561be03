import math

import numpy as np
import pytest

from core import tensor as T
from core.errors import NumericalError, UsageError
from core.layers import LayerNorm, Linear, layer_norm_params, linear_params
from core.rng import Rng, derive_seed


def f64(values):
    return T.DiffArray(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


# logsumexp


def test_logsumexp_of_equal_zeros_is_ln2():
    out = T.logsumexp(T.constant([0.0, 0.0], dtype=np.float64))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_single_element_is_identity():
    assert T.logsumexp(T.constant([3.25], dtype=np.float64)).item() == pytest.approx(3.25)


def test_logsumexp_large_values_do_not_overflow():
    out = T.logsumexp(T.constant([1000.0, 1000.0], dtype=np.float64))
    assert out.item() == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)


def test_logsumexp_is_shift_invariant():
    x = np.array([0.3, -1.2, 2.5, 0.0])
    c = 17.5
    a = T.logsumexp(T.constant(x, dtype=np.float64)).item()
    b = T.logsumexp(T.constant(x + c, dtype=np.float64)).item()
    assert b == pytest.approx(a + c, abs=1e-9)


def test_logsumexp_ignores_minus_infinity_entries():
    out = T.logsumexp(T.constant([-np.inf, 0.0], dtype=np.float64))
    assert out.item() == pytest.approx(0.0)


def test_logsumexp_all_minus_infinity_is_minus_infinity():
    out = T.logsumexp(T.constant([-np.inf, -np.inf], dtype=np.float64))
    assert out.item() == -np.inf


def test_logsumexp_all_minus_infinity_passes_no_gradient():
    x = f64([-np.inf, -np.inf])
    T.logsumexp(x).backward()
    assert np.all(x.grad == 0.0)


def test_logsumexp_empty_input_raises():
    with pytest.raises(UsageError):
        T.logsumexp(T.constant(np.zeros(0)))


def test_logsumexp_along_axis_keepdims():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = T.logsumexp(T.constant(x, dtype=np.float64), axis=1, keepdims=True)
    assert out.shape == (2, 1)
    expected = np.log(np.exp(x).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_logcumsumexp_matches_running_logsumexp():
    x = np.array([0.5, -1.0, 2.0, 0.25])
    out = T.logcumsumexp(T.constant(x, dtype=np.float64)).data
    expected = [np.log(np.exp(x[:j + 1]).sum()) for j in range(x.size)]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_logcumsumexp_rejects_matrices():
    with pytest.raises(UsageError):
        T.logcumsumexp(T.constant(np.zeros((2, 2))))


# softmax with temperature


def test_softmax_with_temperature_zero_logits_is_uniform():
    p = T.softmax_with_temperature([0.0, 0.0], temperature=1.0)
    np.testing.assert_allclose(p.data, [0.5, 0.5], rtol=1e-6)


def test_softmax_with_temperature_example():
    p = T.softmax_with_temperature(np.array([math.log(3.0), 0.0]), temperature=1.0)
    np.testing.assert_allclose(p.data, [0.75, 0.25], rtol=1e-6)


def test_softmax_with_high_temperature_flattens():
    logits = np.array([2.0, 0.0, -1.0])
    sharp = T.softmax_with_temperature(logits, temperature=1.0).data
    flat = T.softmax_with_temperature(logits, temperature=4.0).data
    assert flat.max() < sharp.max()
    assert flat.sum() == pytest.approx(1.0, abs=1e-6)


def test_softmax_with_temperature_rejects_non_positive_temperature():
    with pytest.raises(UsageError):
        T.softmax_with_temperature([1.0, 2.0], temperature=0.0)
    with pytest.raises(UsageError):
        T.log_softmax(T.constant([1.0, 2.0]), temperature=-1.0)


# Finite differences


def test_finite_difference_of_square_is_two_x():
    x = np.array([1.0, -2.0, 0.5])
    grad = T.finite_difference_gradient(lambda v: float(np.sum(v ** 2)), x, eps=1e-4)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)


def test_finite_difference_of_constant_is_zero():
    grad = T.finite_difference_gradient(lambda v: 7.0, np.ones((2, 3)))
    assert grad.shape == (2, 3)
    assert np.all(grad == 0.0)


def test_finite_difference_reports_non_finite_coordinate():
    def f(v):
        return float(np.log(v[1]))

    with pytest.raises(NumericalError) as excinfo:
        T.finite_difference_gradient(f, np.array([1.0, 0.0]), eps=1e-3)
    assert excinfo.value.index == (1,)


def test_finite_difference_rejects_bad_step():
    with pytest.raises(UsageError):
        T.finite_difference_gradient(lambda v: 0.0, np.ones(2), eps=0.0)


def test_finite_difference_leaves_input_unchanged():
    x = np.array([0.1, 0.2])
    T.finite_difference_gradient(lambda v: float(v.sum()), x)
    np.testing.assert_array_equal(x, [0.1, 0.2])


# Operation gradients


def _check_op(build, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    values = [rng.normal(size=s) for s in shapes]
    if positive:
        values = [np.abs(v) + 0.5 for v in values]
    leaves = [f64(v) for v in values]
    out = build(*leaves)
    out.backward()
    for i, leaf in enumerate(leaves):
        def f(v, i=i):
            args = [T.constant(x, dtype=np.float64) for x in values]
            args[i] = T.constant(v, dtype=np.float64)
            return build(*args).item()

        numeric = T.finite_difference_gradient(f, values[i], eps=1e-6)
        assert T.gradients_close(leaf.grad, numeric, rtol=1e-5, atol=1e-7)


def test_elementwise_gradients():
    _check_op(lambda a, b: T.sum(a * b + a - b), (3, 4), (3, 4))
    _check_op(lambda a, b: T.sum(a / b), (5,), (5,), positive=True)
    _check_op(lambda a: T.sum(T.exp(a) + T.tanh(a) + T.sigmoid(a)), (6,))
    _check_op(lambda a: T.sum(T.log(a) + a ** 1.5), (4,), positive=True)
    _check_op(lambda a: T.sum(T.swish(a)), (7,))


def test_broadcast_gradients():
    _check_op(lambda a, b: T.sum((a + b) * (a + b)), (3, 4), (4,))


def test_matmul_gradients():
    _check_op(lambda a, b: T.sum(T.tanh(a @ b)), (3, 4), (4, 2))
    _check_op(lambda a, b: T.sum(a @ b), (4,), (4, 3))


def test_reduction_gradients():
    _check_op(lambda a: T.sum(T.mean(a, axis=0) ** 2), (3, 5))
    _check_op(lambda a: T.sum(T.cumsum(a) * T.cumsum(a)), (6,))
    _check_op(lambda a: T.sum(T.logsumexp(a, axis=1)), (3, 4))
    _check_op(lambda a: T.sum(T.logcumsumexp(a) * 0.3), (5,))


def test_softmax_gradients():
    weights = np.linspace(-1.0, 1.0, 4)
    _check_op(lambda a: T.sum(T.log_softmax(a, axis=-1) * weights), (2, 4))
    _check_op(lambda a: T.sum(T.log_softmax(a, axis=-1, temperature=2.5) * weights), (2, 4))


def test_shape_gradients():
    _check_op(lambda a: T.sum(T.transpose(a) @ a), (3, 2))
    _check_op(lambda a: T.sum(a.reshape(2, 3) * np.arange(6).reshape(2, 3)), (6,))
    _check_op(lambda a, b: T.sum(T.concat([a, b], axis=0) ** 2), (2, 3), (1, 3))
    _check_op(lambda a, b: T.sum(T.stack([a, b], axis=0) * np.array([[1.0], [2.0]])), (3,), (3,))


def test_getitem_accumulates_repeated_indices():
    x = f64([1.0, 2.0, 3.0])
    T.sum(x[np.array([0, 0, 2])]).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_masked_fill_blocks_gradient():
    x = f64([1.0, 2.0, 3.0])
    mask = np.array([False, True, False])
    out = T.masked_fill(x, mask, -np.inf)
    assert out.data[1] == -np.inf
    T.sum(T.masked_fill(x, mask, 0.0)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])


def test_layer_norm_gradients():
    scale = np.array([1.0, 0.5, 2.0, 1.5])
    shift = np.array([0.0, 0.1, -0.2, 0.3])
    _check_op(lambda a: T.sum(T.tanh(T.layer_norm(a, scale, shift))), (2, 4))


def test_dropout_is_identity_when_not_training():
    x = f64([1.0, 2.0])
    assert T.dropout(x, 0.5, Rng(0), training=False) is x


def test_dropout_keeps_expectation():
    x = T.constant(np.ones(20000), dtype=np.float64)
    out = T.dropout(x, 0.25, Rng(1), training=True)
    kept = out.data[out.data != 0.0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert out.data.mean() == pytest.approx(1.0, abs=0.03)


def test_backward_on_non_scalar_needs_seed():
    x = f64([1.0, 2.0])
    with pytest.raises(UsageError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.array([1.0, 3.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 6.0])


def test_backward_requires_gradient_tracking():
    with pytest.raises(UsageError):
        T.constant([1.0]).backward()


def test_integer_input_defaults_to_float32():
    assert T.constant([1, 2, 3]).dtype == np.float32


# Tapes


def test_tape_records_and_releases():
    with T.Tape() as tape:
        a = tape.constant([1.0, 2.0])
        b = a * 2.0
        assert b.tape is tape
        assert len(tape) >= 2
    assert len(tape) == 0


def test_tape_rejects_foreign_loss():
    x = T.Parameter(np.array([1.0, 2.0]))
    first, second = T.Tape(), T.Tape()
    loss = T.sum(x * first.constant([3.0, 4.0]))
    with pytest.raises(UsageError):
        second.backward(loss)
    first.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 4.0])


def test_operands_on_different_tapes_raise():
    first, second = T.Tape(), T.Tape()
    with pytest.raises(UsageError):
        first.constant([1.0]) + second.constant([1.0])


def test_tape_constants_receive_no_gradient():
    tape = T.Tape()
    x = T.Parameter(np.array([2.0]))
    c = tape.constant([5.0])
    tape.backward(T.sum(x * c))
    assert c.grad is None
    assert x.grad[0] == pytest.approx(5.0)


# Random streams


def test_rng_is_deterministic():
    a = Rng(42).normal((3, 3))
    b = Rng(42).normal((3, 3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, Rng(43).normal((3, 3)))


def test_rng_children_are_independent_of_parent_state():
    parent = Rng(7)
    first = parent.child("init").normal(4)
    parent.normal(100)
    second = parent.child("init").normal(4)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, parent.child("dropout").normal(4))


def test_derive_seed_fits_64_bits():
    seed = derive_seed(2 ** 64 - 1, "data")
    assert 0 <= seed < 2 ** 64
    assert seed == derive_seed(2 ** 64 - 1, "data")


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2 ** 64)


# Modules


class _Tied(T.Module):
    def __init__(self):
        self.embedding = T.Parameter(np.zeros((3, 2)))
        self.blocks = [Linear(Rng(0), 2, 2), Linear(Rng(1), 2, 2, bias=False)]
        self.output = self.embedding


def test_named_parameters_reports_tied_storage_once():
    module = _Tied()
    names = [name for name, _ in module.named_parameters()]
    assert names == ["embedding", "blocks.0.weight", "blocks.0.bias", "blocks.1.weight"]
    assert module.num_params() == 6 + 6 + 4


def test_train_and_eval_reach_submodules():
    module = _Tied()
    module.train()
    assert all(m.training for m in module.modules())
    module.eval()
    assert not any(m.training for m in module.modules())


def test_frozen_restores_gradient_flags():
    module = _Tied()
    module.embedding.requires_grad = False
    with module.frozen():
        assert not any(p.requires_grad for p in module.parameters())
    assert module.embedding.requires_grad is False
    assert module.blocks[0].weight.requires_grad is True


def test_linear_rejects_wrong_width():
    layer = Linear(Rng(0), 3, 2)
    with pytest.raises(UsageError):
        layer(T.constant(np.zeros((1, 4))))


def test_layer_parameter_counts():
    assert linear_params(2, 3) == 9
    assert linear_params(2, 3, bias=False) == 6
    assert layer_norm_params(5) == 10
    assert Linear(Rng(0), 2, 3).num_params() == 9
    assert LayerNorm(5).num_params() == 10


def test_linear_parameter_gradients_match_finite_differences():
    layer = Linear(Rng(3), 3, 2, dtype=np.float64)
    x = T.constant(Rng(4).normal((4, 3), dtype=np.float64), dtype=np.float64)

    def loss():
        return T.sum(T.tanh(layer(x)) ** 2)

    report = T.check_parameter_gradients(loss, list(layer.named_parameters()))
    assert set(report) == {"weight", "bias"}
    assert all(passed for passed, _ in report.values())
