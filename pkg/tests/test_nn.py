"""Kernel gradients against central differences, plus optimizer exactness.

Every analytic backward pass is compared to float64 finite differences
at step 1e-6; the expected agreement is far below the 1e-4 gate.
"""

import math

import numpy as np
import pytest

from splitback.errors import ContractError, NumericError
from splitback.models import build_network, build_vae, mlp_arch, output_dim
from splitback.nn import (
    AdamState,
    adam_step,
    cross_entropy,
    encode_mu,
    flatten_params,
    numerical_gradient,
    relative_error,
    sgd_step,
    softmax,
    unflatten_params,
    vae_forward,
)

GRAD_TOL = 1e-4


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 50, size=(64, 10))  # large magnitudes: stability matters
    probs = softmax(logits)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert (probs >= 0).all()


def test_cross_entropy_uniform_logits_is_log_num_classes():
    logits = np.zeros((16, 10))
    labels = np.arange(16) % 10
    loss, _ = cross_entropy(logits, labels)
    assert abs(loss - math.log(10)) < 1e-9  # ln 10 = 2.302585...


def test_cross_entropy_rejects_nonfinite():
    logits = np.full((4, 3), np.nan)
    with pytest.raises(NumericError):
        cross_entropy(logits, np.zeros(4, dtype=np.int64))


def _mean_ce_loss(net, x, y):
    def f():
        logits, _ = net.forward(x)
        return cross_entropy(logits, y)[0]

    return f


def test_dense_mlp_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    net = build_network((6,), mlp_arch([5], 4), rng, dtype=np.float64)
    x = rng.normal(size=(3, 6))
    y = np.array([0, 2, 3])
    logits, caches = net.forward(x)
    _, dlogits = cross_entropy(logits, y)
    _, grad_sums = net.backward(caches, dlogits)
    analytic = [g / len(y) for g in grad_sums]
    numeric = numerical_gradient(_mean_ce_loss(net, x, y), net.params())
    assert relative_error(analytic, numeric) < GRAD_TOL


def test_conv_net_gradients_match_central_differences():
    rng = np.random.default_rng(2)
    arch = [["conv", 3, 3, 2, 1], ["relu"], ["flatten"], ["dense", 4]]
    net = build_network((2, 6, 6), arch, rng, dtype=np.float64)
    x = rng.normal(size=(2, 2, 6, 6))
    y = np.array([1, 3])
    logits, caches = net.forward(x)
    _, dlogits = cross_entropy(logits, y)
    _, grad_sums = net.backward(caches, dlogits)
    analytic = [g / len(y) for g in grad_sums]
    numeric = numerical_gradient(_mean_ce_loss(net, x, y), net.params())
    assert relative_error(analytic, numeric) < GRAD_TOL


def test_conv_output_shape():
    rng = np.random.default_rng(3)
    net = build_network((3, 8, 8), [["conv", 4, 3, 2, 1]], rng)
    y, _ = net.forward(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
    assert y.shape == (2, 4, 4, 4)
    assert output_dim((3, 8, 8), [["conv", 4, 3, 2, 1]]) == 64


def test_input_gradient_matches_central_differences():
    # d(loss)/d(input) drives the embedding-gradient exchange, so check it too
    rng = np.random.default_rng(4)
    net = build_network((5,), mlp_arch([6], 3), rng, dtype=np.float64)
    x = rng.normal(size=(2, 5))
    y = np.array([0, 2])
    logits, caches = net.forward(x)
    _, dlogits = cross_entropy(logits, y)
    dx, _ = net.backward(caches, dlogits)
    dx_mean = dx / len(y)
    numeric = numerical_gradient(_mean_ce_loss(net, x, y), [x])
    assert relative_error([dx_mean], numeric) < GRAD_TOL


def test_tanh_sigmoid_path_gradients():
    rng = np.random.default_rng(5)
    arch = [["dense", 5], ["tanh"], ["dense", 4], ["sigmoid"], ["dense", 3]]
    net = build_network((4,), arch, rng, dtype=np.float64)
    x = rng.normal(size=(3, 4))
    y = np.array([0, 1, 2])
    logits, caches = net.forward(x)
    _, dlogits = cross_entropy(logits, y)
    _, grad_sums = net.backward(caches, dlogits)
    analytic = [g / len(y) for g in grad_sums]
    numeric = numerical_gradient(_mean_ce_loss(net, x, y), net.params())
    assert relative_error(analytic, numeric) < GRAD_TOL


def test_sgd_step_is_exact():
    p = [np.array([1.0, -2.0], dtype=np.float32)]
    g = [np.array([0.5, 0.25], dtype=np.float32)]
    (out,) = sgd_step(p, g, lr=0.1)
    np.testing.assert_array_equal(out, p[0] - np.float32(0.1) * g[0])
    with pytest.raises(NumericError):
        sgd_step(p, [np.array([np.inf, 0.0], dtype=np.float32)], lr=0.1)


def test_adam_first_step_matches_hand_formula():
    # at t=1 bias corrections cancel: step = lr * g / (|g| + eps)
    p = [np.array([1.0])]
    g = [np.array([0.5])]
    state = AdamState.for_params(p)
    (out,) = adam_step(p, g, state, lr=0.1)
    expected = 1.0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
    assert abs(out[0] - expected) < 1e-12
    assert state.t == 1


def test_adam_accumulates_moments():
    p = [np.zeros(3)]
    state = AdamState.for_params(p)
    g = [np.ones(3)]
    p1 = adam_step(p, g, state, lr=0.01)
    p2 = adam_step(p1, g, state, lr=0.01)
    assert state.t == 2
    assert (p2[0] < p1[0]).all()  # keeps moving along the constant gradient


def test_flatten_unflatten_round_trip():
    rng = np.random.default_rng(6)
    params = [
        rng.normal(size=(3, 4)).astype(np.float32),
        rng.normal(size=5).astype(np.float64),
    ]
    vec, manifest = flatten_params(params)
    assert vec.shape == (17,)
    back = unflatten_params(vec, manifest)
    for orig, restored in zip(params, back):
        np.testing.assert_allclose(restored, orig, rtol=1e-6)
        assert restored.dtype == orig.dtype
    with pytest.raises(ContractError):
        unflatten_params(vec[:-1], manifest)


def test_numerical_gradient_on_quadratic():
    # sanity for the checker itself: f = 0.5 * sum(a * x^2) has grad a*x
    a = np.array([2.0, 3.0, 0.5])
    x = np.array([1.0, -2.0, 4.0])
    grads = numerical_gradient(lambda: 0.5 * float((a * x * x).sum()), [x])
    np.testing.assert_allclose(grads[0], a * x, rtol=1e-7)


def test_vae_forward_shapes_and_determinism():
    rng = np.random.default_rng(7)
    vae = build_vae(12, 3, [8], rng, dtype=np.float64)
    x = rng.uniform(size=(5, 12))
    out_a = vae_forward(vae, x, np.random.default_rng(99))
    out_b = vae_forward(vae, x, np.random.default_rng(99))
    assert out_a.mu.shape == (5, 3) and out_a.z.shape == (5, 3)
    assert out_a.recon.shape == (5, 12)
    np.testing.assert_array_equal(out_a.z, out_b.z)
    assert (out_a.sigma > 0).all()
    mu_only, _ = encode_mu(vae, x)
    np.testing.assert_array_equal(mu_only, out_a.mu)


def test_vae_forward_rejects_bad_width():
    rng = np.random.default_rng(8)
    vae = build_vae(12, 3, [8], rng)
    with pytest.raises(ContractError):
        vae_forward(vae, np.zeros((2, 7)), np.random.default_rng(0))


def test_relative_error_zero_for_identical():
    arr = [np.array([1.0, 2.0])]
    assert relative_error(arr, arr) == 0.0
