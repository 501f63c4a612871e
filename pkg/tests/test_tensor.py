import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import PRIMITIVES, TOL, worst_error
from normlab import tensor as T
from normlab.tensor import EVAL, TRAIN, BatchNormState, ShapeError, Tensor


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_gradient_matches_finite_differences(name):
    worst = worst_error(name)
    assert worst <= TOL, f"{name}: relative error {worst:.2e}"


def test_relu_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor([-1.0, 0.0, 1.0], requires_grad=True)
    T.backward(T.weighted_sum(T.relu(x), np.ones(3)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


@given(arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)))
def test_identity_matmul(v):
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)


def test_zero_kernel_conv_and_shapes():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)))
    out = T.conv2d(x, Tensor(np.zeros((5, 1, 3, 3))))
    assert out.shape == (1, 5, 4, 4) and not out.data.any()
    assert T.maxpool2d(Tensor(np.zeros((1, 2, 5, 7)))).shape == (1, 2, 2, 3)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="mse_mean"):
        T.mse_mean(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_batchnorm_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 3))
    x = (x - x.mean(0)) / x.std(0)
    st_ = BatchNormState.create(3)
    np.testing.assert_allclose(T.batchnorm(Tensor(x), st_, TRAIN).data, x, atol=1e-4)

    st_ = BatchNormState.create(2)
    st_.beta = Tensor(np.full(2, 3.0), requires_grad=True)
    out = T.batchnorm(Tensor(np.full((4, 2, 3, 3), 5.0)), st_, TRAIN).data
    np.testing.assert_allclose(out, 3.0, atol=1e-12)

    st_ = BatchNormState.create(1, eps=1e-300)
    st_.running_mean, st_.running_var = np.array([2.0]), np.array([4.0])
    assert T.batchnorm(Tensor([[4.0]]), st_, EVAL).item() == pytest.approx(1.0, abs=1e-12)


def test_batchnorm_requires_two_samples_in_train():
    with pytest.raises(ValueError, match="batchnorm requires batch >= 2"):
        T.batchnorm(Tensor(np.zeros((1, 3))), BatchNormState.create(3), TRAIN)
    # Eval mode accepts a single sample
    T.batchnorm(Tensor(np.zeros((1, 3))), BatchNormState.create(3), EVAL)


def test_batchnorm_running_statistics_update():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(10, 2, 4, 4))
    st_ = BatchNormState.create(2)
    T.batchnorm(Tensor(x), st_, TRAIN)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # population variance
    np.testing.assert_allclose(st_.running_mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_batchnorm_standardizes(n, c, seed):
    x = np.random.default_rng(seed).normal(5.0, 4.0, size=(n, c))
    out = T.batchnorm(Tensor(x), BatchNormState.create(c), TRAIN).data
    assert np.all(np.abs(out.mean(0)) <= 1e-8)
    eps = 1e-5
    v = out.var(0)
    s2 = x.var(0)
    np.testing.assert_allclose(v, s2 / (s2 + eps), rtol=1e-10)
    wide = s2 >= 0.1
    assert np.all(v[wide] >= 1 - 10 * eps) and np.all(v <= 1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 5.0))
def test_eval_batchnorm_ignores_batch_statistics(seed, shift):
    rng = np.random.default_rng(seed)
    st_ = BatchNormState.create(3)
    st_.running_mean, st_.running_var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    x = rng.normal(size=(4, 3))
    alone = T.batchnorm(Tensor(x[:1]), st_, EVAL).data
    batch = T.batchnorm(Tensor(np.vstack([x[:1], x[1:] + shift])), st_, EVAL).data
    np.testing.assert_array_equal(alone[0], batch[0])


def test_cross_entropy_examples():
    assert T.softmax_cross_entropy(Tensor(np.zeros((3, 2))), T.one_hot(np.array([0, 1, 1]), 2)).item() == \
        pytest.approx(math.log(2), abs=1e-15)
    assert T.softmax_cross_entropy(Tensor([[30.0, -30.0]]), T.one_hot(np.array([0]), 2)).item() < 1e-9
    assert T.softmax_cross_entropy(Tensor([[1.0, 2.0]]), T.one_hot(np.array([1]), 2)).item() == \
        pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)


def test_mse_examples_and_gradient():
    assert T.mse_mean(Tensor([1.0, 0.0]), Tensor([0.0, 0.0])).item() == 0.5
    assert T.mse_mean(Tensor([2.0, -2.0, 0.0]), Tensor(np.zeros(3))).item() == pytest.approx(8 / 3, abs=1e-15)
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.mse_mean(x, Tensor([0.0])))
    np.testing.assert_array_equal(x.grad, [6.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(z):
    p = T.softmax(Tensor(z)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(T.relu(Tensor(np.ones(3), requires_grad=True)))


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 2, 6, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        st_ = BatchNormState.create(3)
        h = T.maxpool2d(T.relu(T.batchnorm(T.conv2d(x, w), st_, TRAIN)))
        loss = T.mean(T.flatten(h))
        T.backward(loss)
        return loss.data.copy(), w.grad.copy(), st_.gamma.grad.copy()

    a, b = run(), run()
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_graph_is_topological_and_visits_each_node_once():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    h = T.relu(x)
    loss = T.mean(T.add(h, h))  # shared subexpression
    g = T.Graph.of(loss)
    ids = [n.node_id for n in g.nodes]
    assert len(ids) == len(set(ids))
    pos = {nid: i for i, nid in enumerate(ids)}
    for n in g.nodes:
        for p in n._parents:
            assert pos[p.node_id] < pos[n.node_id]
    T.backward(loss)
    np.testing.assert_allclose(x.grad, np.full((2, 3), 2 / 6))


def test_forward_primitive_dispatch():
    x = Tensor(np.arange(6.0).reshape(2, 3) - 2)
    np.testing.assert_array_equal(T.forward_primitive("relu", [x]).data, np.maximum(x.data, 0))
    with pytest.raises(ValueError):
        T.forward_primitive("tanh", [x])
