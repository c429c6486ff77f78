import numpy as np
import pytest

from dimbert import tensor as T
from dimbert.errors import ContractError, DimensionError, GradientStateError, NonFiniteError
from dimbert.gradcheck import check_gradients, numerical_gradient, relative_error


def fd_check(build, *arrays, tol=1e-7):
    """Backprop vs central differences for a scalar loss built from leaf arrays."""
    leaves = [T.parameter(a.copy()) for a in arrays]
    errors = check_gradients(lambda: build(*leaves), [(str(i), p) for i, p in enumerate(leaves)])
    assert max(errors.values()) < tol, errors


def weighted(x, seed=0):
    # a random linear functional makes every output entry matter
    w = np.random.default_rng(seed).normal(size=x.shape)
    return T.sum(T.mul(x, w))


OPS = {
    "add": (lambda a, b: weighted(T.add(a, b)), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: weighted(T.add(a, b)), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: weighted(T.sub(a, b)), [(5,), (5,)]),
    "mul": (lambda a, b: weighted(T.mul(a, b)), [(3, 2), (3, 2)]),
    "scale": (lambda a, s: weighted(T.scale(a, s)), [(3, 4), (1,)]),
    "gelu": (lambda a: weighted(T.gelu(a)), [(4, 5)]),
    "sigmoid": (lambda a: weighted(T.sigmoid(a)), [(6,)]),
    "reshape": (lambda a: weighted(T.reshape(a, (6, 2))), [(3, 4)]),
    "transpose": (lambda a: weighted(T.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "concat": (lambda a, b: weighted(T.concat([a, b], axis=0)), [(2, 3), (4, 3)]),
    "matmul": (lambda a, b: weighted(T.matmul(a, b)), [(3, 4), (4, 5)]),
    "matmul_shared": (lambda a, b: weighted(T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: weighted(T.matmul(a, b)), [(2, 2, 3, 4), (2, 2, 4, 3)]),
    "linear": (lambda x, w, b: weighted(T.linear(x, w, b)), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda a: weighted(T.softmax(a)), [(3, 5)]),
    "log_softmax": (lambda a: weighted(T.log_softmax(a)), [(3, 5)]),
    "layer_norm": (lambda x, g, b: weighted(T.layer_norm(x, g, b, 1e-6)), [(3, 6), (6,), (6,)]),
    "mean": (lambda a: T.mean(T.mul(a, a)), [(4, 3)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [1, 0, 4]), [(3, 5)]),
    "bce": (lambda a: T.bce_with_logits(a, [0.0, 1.0, 0.0, 0.0]), [(4,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(7)
    fd_check(build, *[rng.normal(size=s) for s in shapes])


def test_embedding_lookup_gradient_with_repeated_ids():
    table = np.random.default_rng(0).normal(size=(5, 3))
    fd_check(lambda t: weighted(T.embedding_lookup(t, [1, 3, 1, 0])), table)


def test_embedding_lookup_out_of_range():
    table = T.parameter(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [0, 4])
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [-1])


def test_scatter_rows_and_row_select_gradients():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(3, 4))
    fd_check(lambda s: weighted(T.scatter_rows(s, [4, 0, 2], 5)), src)
    cond = np.array([[True, False, True], [False, False, True]])
    fd_check(lambda a, b: weighted(T.row_select(cond, a, b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)))


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    x = np.random.default_rng(0).normal(size=(4, 7)) * 30
    p = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(T.Tensor(x + 1000.0)).data, p, atol=1e-12)


def test_gelu_uses_exact_erf_form():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    # Phi(0.5) and Phi(2) from standard normal tables
    phi = np.array([1 - 0.9772498680518208, 1 - 0.6914624612740131, 0.5, 0.6914624612740131, 0.9772498680518208])
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, x * phi, atol=1e-12)


def test_cross_entropy_of_uniform_logits_is_log_v():
    assert T.cross_entropy(T.Tensor(np.zeros(8)), 3).item() == pytest.approx(np.log(8))


def test_bce_matches_direct_formula():
    x = np.array([-3.0, 0.2, 4.0])
    y = np.array([0.0, 1.0, 1.0])
    s = 1 / (1 + np.exp(-x))
    expected = -(y * np.log(s) + (1 - y) * np.log(1 - s)).sum()
    assert T.bce_with_logits(T.Tensor(x), y).item() == pytest.approx(expected, rel=1e-12)


def test_layer_norm_output_is_standardised():
    x = np.random.default_rng(2).normal(3.0, 5.0, size=(4, 16))
    y = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-9)


def test_shape_mismatch_is_a_dimension_error():
    a = T.parameter(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        T.add(a, T.parameter(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        T.matmul(a, T.parameter(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        T.cross_entropy(a, [0])


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.mul(T.parameter(np.array([1e300])), 1e300)


def test_backward_twice_without_reset_raises():
    x = T.parameter(np.array([1.0, 2.0]))
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    with pytest.raises(GradientStateError):
        T.backward(T.sum(T.mul(x, x)))
    T.zero_grad([x])
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_needs_scalar_loss():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_shared_subexpression_accumulates_gradient():
    x = T.parameter(np.array([3.0]))
    y = T.mul(x, x)
    T.backward(T.sum(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def test_topological_order_puts_inputs_first():
    a = T.parameter(np.ones(2))
    b = T.mul(a, 2.0)
    c = T.add(b, a)
    order = T.graph_nodes(T.sum(c))
    pos = {id(n): i for i, n in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)]


def test_single_precision_mode():
    with T.precision("single"):
        x = T.parameter(np.ones(3))
        assert x.dtype == np.float32
        y = T.gelu(x)
        assert y.dtype == np.float32
    assert T.parameter(np.ones(1)).dtype == np.float64


def test_dropout_is_identity_without_rng_and_unbiased_with_it():
    x = T.Tensor(np.ones(200_000))
    assert T.dropout(x, 0.5, None) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.01


def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numerical_gradient(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)
    assert relative_error(g, 2 * x) < 1e-9
