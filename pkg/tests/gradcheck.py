"""Central finite-difference oracle shared by the gradient tests."""

from __future__ import annotations

import numpy as np

from normlab import tensor as T
from normlab.tensor import EVAL, TRAIN, BatchNormState, Tensor, backward, weighted_sum

STEP = 1e-5
SEEDS = range(20)
TOL = 1e-4


def _scalar(fn, tensors, probe):
    return weighted_sum(fn(*tensors), probe)


def numeric_grads(fn, arrays, probe):
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [x.copy() for x in arrays]
                pert[k][idx] += sign * STEP
                vals.append(_scalar(fn, [Tensor(x) for x in pert], probe).item())
            g[idx] = (vals[0] - vals[1]) / (2 * STEP)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays, probe):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(_scalar(fn, ts, probe))
    return [np.zeros_like(a) if t.grad is None else t.grad for t, a in zip(ts, arrays)]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, arrays, rng) -> float:
    """Worst relative error over all inputs for ``sum(probe * fn(*arrays))``."""
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    probe = rng.normal(size=out_shape)
    ga = analytic_grads(fn, arrays, probe)
    gn = numeric_grads(fn, arrays, probe)
    return max(rel_error(x, y) for x, y in zip(ga, gn))


def away_from_zero(a, gap=1e-3):
    return np.where(np.abs(a) < gap, np.sign(a) * gap + a, a)


def _bn_train(x, g, b):
    st = BatchNormState.create(x.shape[1])
    st.gamma, st.beta = g, b
    return T.batchnorm(x, st, TRAIN, update_stats=False)


def _bn_eval(x, g, b):
    st = BatchNormState.create(x.shape[1])
    st.gamma, st.beta = g, b
    st.running_mean = np.linspace(-0.5, 0.5, x.shape[1])
    st.running_var = np.linspace(0.5, 2.0, x.shape[1])
    return T.batchnorm(x, st, EVAL)


def _ce(z):
    return T.softmax_cross_entropy(z, T.one_hot(np.array([0, 2, 1, 2]), 3))


# name -> (fn, input-shape builder)
PRIMITIVES = {
    "matmul": (T.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matmul_vec": (T.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=4)]),
    "add_bias_2d": (T.add_bias, lambda r: [r.normal(size=(3, 4)), r.normal(size=4)]),
    "add_bias_4d": (T.add_bias, lambda r: [r.normal(size=(2, 3, 2, 2)), r.normal(size=3)]),
    "dense": (T.dense, lambda r: [r.normal(size=(3, 5)), r.normal(size=(2, 5)), r.normal(size=2)]),
    "relu": (T.relu, lambda r: [away_from_zero(r.normal(size=(3, 4)))]),
    "conv2d": (T.conv2d, lambda r: [r.normal(size=(2, 2, 5, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
    "maxpool2d": (T.maxpool2d, lambda r: [r.normal(size=(2, 2, 4, 5))]),
    "flatten": (T.flatten, lambda r: [r.normal(size=(2, 3, 2, 2))]),
    "batchnorm_train_2d": (_bn_train, lambda r: [r.normal(size=(5, 3)), r.normal(size=3), r.normal(size=3)]),
    "batchnorm_train_4d": (_bn_train, lambda r: [r.normal(size=(3, 2, 3, 3)), r.normal(size=2), r.normal(size=2)]),
    "batchnorm_eval": (_bn_eval, lambda r: [r.normal(size=(3, 2, 2, 2)), r.normal(size=2), r.normal(size=2)]),
    "softmax": (T.softmax, lambda r: [r.normal(size=(3, 4))]),
    "mean": (T.mean, lambda r: [r.normal(size=(3, 4))]),
    "add": (T.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "scale": (lambda a: T.scale(a, -2.5), lambda r: [r.normal(size=(3,))]),
    "sum_squares": (T.sum_squares, lambda r: [r.normal(size=(2, 3))]),
    "softmax_cross_entropy": (_ce, lambda r: [r.normal(size=(4, 3))]),
    "mse_mean": (T.mse_mean, lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
}


def worst_error(name: str) -> float:
    fn, build = PRIMITIVES[name]
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        worst = max(worst, check(fn, build(rng), rng))
    return worst
