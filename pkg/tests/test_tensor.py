import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lorasde import tensor as T
from lorasde.tensor import ContractError, DimensionError, Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` over every coordinate of float64 ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(op, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(rng.standard_normal(s)) for s in shapes]
    if positive:
        arrays = [np.asarray(np.abs(a) + 0.5) for a in arrays]
    weights = rng.standard_normal(op(*[Tensor(a) for a in arrays]).shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    T.backward(T.tsum(T.mul(out, Tensor(weights))))
    for k, t in enumerate(ts):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            return scalar(*args)
        num = numeric_grad(f, arrays[k].copy())
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


shapes_pair = st.sampled_from(
    [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3, 4), (3, 1)), ((1, 4), (5, 1)), ((), (2, 3))]
)


@given(shapes_pair, st.sampled_from(["add", "sub", "mul", "div"]))
def test_broadcast_binary_matches_numpy_and_gradients(pair, name):
    a_shape, b_shape = pair
    op = getattr(T, name)
    ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[name]
    rng = np.random.default_rng(1)
    a = np.asarray(rng.standard_normal(a_shape))
    b = np.abs(rng.standard_normal(b_shape)) + 0.5
    np.testing.assert_allclose(op(Tensor(a), Tensor(b)).data, ref(a, b))
    check_grad(op, a_shape, b_shape, positive=True)


def _loop_sum_grad(shape, target):
    """Gradient of sum(broadcast(x)) w.r.t. x by explicit counting over target cells."""
    g = np.zeros(shape)
    padded = (1,) * (len(target) - len(shape)) + tuple(shape)
    for idx in np.ndindex(*target):
        src = tuple(0 if p == 1 else i for p, i in zip(padded, idx))
        g[src[len(target) - len(shape):]] += 1
    return g


@given(shapes_pair)
def test_unbroadcast_against_loop_oracle(pair):
    a_shape, b_shape = pair
    a = Tensor(np.ones(a_shape), requires_grad=True)
    b = Tensor(np.ones(b_shape), requires_grad=True)
    out = T.add(a, b)
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(a.grad, _loop_sum_grad(a_shape, out.shape))
    np.testing.assert_array_equal(b.grad, _loop_sum_grad(b_shape, out.shape))


def test_incompatible_broadcast_raises():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((5,))))


@pytest.mark.parametrize(
    "op,shape,positive",
    [
        (T.exp, (3, 4), False),
        (T.tanh, (3, 4), False),
        (T.gelu, (3, 4), False),
        (T.square, (2, 5), False),
        (lambda x: T.softmax(x, axis=-1), (3, 5), False),
        (lambda x: T.softmax(x, axis=0), (3, 5), False),
        (lambda x: T.mean(x, axis=1), (3, 5), False),
        (lambda x: T.tsum(x, axis=(0, 2), keepdims=True), (2, 3, 4), False),
        (lambda x: x.reshape(6, 2), (3, 4), False),
        (lambda x: x.permute(2, 0, 1), (2, 3, 4), False),
        (lambda x: x.T, (2, 3, 4), False),
        (lambda x: T.scale(x, -2.5), (4,), False),
    ],
)
def test_unary_gradients(op, shape, positive):
    check_grad(op, shape, positive=positive)


@pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((2, 2, 3, 4), (2, 1, 4, 3))])
def test_matmul_gradients(a_shape, b_shape):
    check_grad(T.matmul, a_shape, b_shape)


def test_matmul_rejects_vectors_and_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_linear_and_layer_norm_gradients():
    check_grad(lambda x, w, b: T.linear(x, w, b), (2, 3, 4), (5, 4), (5,))
    check_grad(lambda x, g, b: T.layer_norm(x, g, b), (2, 3, 6), (6,), (6,))


def test_softmax_known_values_and_stability():
    out = T.softmax(Tensor(np.array([[0.0, np.log(3.0)], [1000.0, 1000.0]])), axis=-1).data
    np.testing.assert_allclose(out, [[0.25, 0.75], [0.5, 0.5]])


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


def test_layer_norm_known_values():
    x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0).data
    expected = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25)
    np.testing.assert_allclose(out[0], expected)


def test_gradients_accumulate_and_are_stored_on_intermediates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.mul(x, x)
    loss = T.tsum(y)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    np.testing.assert_allclose(y.grad, [1.0, 1.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.mul(x, 2.0)
    T.backward(T.tsum(T.mul(y, y)))  # (2x)^2 -> 8x
    np.testing.assert_allclose(x.grad, [24.0])


def test_backward_contracts():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))
    with pytest.raises(ContractError):
        T.backward(T.tsum(Tensor(np.ones(3))))
    with pytest.raises(DimensionError):
        T.mean(Tensor(np.ones((0, 3))), axis=0)
    with pytest.raises(DimensionError):
        T.tsum(x, axis=1)


def test_scalars_adopt_tensor_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert T.mul(x, 0.5).dtype == np.float32
    assert T.add(2.0, x).dtype == np.float32
    assert Tensor(np.arange(3)).dtype == np.float32
