"""Analytic gradients against central differences in float64."""

import numpy as np
import pytest

from fedmixstyle.layers import cross_entropy
from fedmixstyle.model import EffectiveStats, backward, forward

from conftest import random_params
from oracles import central_difference, grad_mismatch


def _sample(arr, k, rng):
    return rng.choice(arr.size, size=min(k, arr.size), replace=False)


@pytest.fixture
def problem(spec):
    rng = np.random.default_rng(21)
    p = random_params(spec, seed=3)
    x = rng.normal(size=(8, 1, 16, 16))
    y = rng.integers(0, spec.n_classes, 8)
    return p, x, y


@pytest.mark.parametrize("mode", ["train-server", "eval"])
def test_parameter_gradients_small_step(spec, problem, mode):
    # h = 1e-6 keeps the stencil inside one ReLU activation pattern for generic weights
    p, x, y = problem
    _, logits, cache = forward(spec, p, x, mode)
    g = backward(spec, p, cache, cross_entropy(logits, y)[1])

    def loss():
        return cross_entropy(forward(spec, p, x, mode)[1], y)[0]

    rng = np.random.default_rng(0)
    pairs = [(p.conv_w[i], g.conv_w[i]) for i in range(3)] + [(p.conv_b[i], g.conv_b[i]) for i in range(3)]
    pairs += [(p.bn_gamma[j], g.bn_gamma[j]) for j in range(3)] + [(p.bn_beta[j], g.bn_beta[j]) for j in range(3)]
    pairs.append((p.prototypes, g.prototypes))
    for arr, analytic in pairs:
        idx = _sample(arr, 24, rng)
        num = central_difference(loss, arr, h=1e-6, indices=idx)
        bad, worst = grad_mismatch(analytic.ravel()[idx], num.ravel()[idx], rel_tol=1e-4, abs_tol=1e-8)
        assert len(bad) == 0, worst


def test_effective_stat_gradients(spec, problem):
    p, x, y = problem
    stats = EffectiveStats([m.copy() for m in p.bn_mean], [v.copy() for v in p.bn_var])
    _, logits, cache = forward(spec, p, x, "adapt", stats)
    g = backward(spec, p, cache, cross_entropy(logits, y)[1])

    def loss():
        return cross_entropy(forward(spec, p, x, "adapt", stats)[1], y)[0]

    for j in range(spec.n_bn_layers):
        for arr, analytic in ((stats.mean[j], g.stat_mean[j]), (stats.var[j], g.stat_var[j])):
            bad, worst = grad_mismatch(analytic, central_difference(loss, arr, h=1e-6), rel_tol=1e-4, abs_tol=1e-8)
            assert len(bad) == 0, worst


def test_train_mode_has_no_stat_gradients(spec, problem):
    p, x, y = problem
    _, logits, cache = forward(spec, p, x, "train-server")
    g = backward(spec, p, cache, cross_entropy(logits, y)[1])
    assert g.stat_mean is None and g.stat_var is None


def test_input_gradient(spec, problem):
    p, x, y = problem
    x = x[:2].copy()
    y = y[:2]
    _, logits, cache = forward(spec, p, x, "eval")
    g = backward(spec, p, cache, cross_entropy(logits, y)[1])
    idx = _sample(x, 30, np.random.default_rng(1))
    num = central_difference(lambda: cross_entropy(forward(spec, p, x, "eval")[1], y)[0], x, h=1e-6, indices=idx)
    bad, worst = grad_mismatch(g.inputs.ravel()[idx], num.ravel()[idx], rel_tol=1e-4, abs_tol=1e-8)
    assert len(bad) == 0, worst
