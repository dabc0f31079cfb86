"""Batch normalization: normalization contract, running-stat update, the
eval-mode affine oracle, and gradient checks."""

import numpy as np
import pytest

from lsnet import ops
from lsnet.errors import UsageError

from helpers import finite_diff_grad, rel_err


def _stats(c):
    return ops.RunningStats(mean=np.zeros(c), var=np.ones(c))


def test_train_mode_normalizes_per_channel():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.5, (4, 3, 8, 8))
    out, cache = ops.batchnorm_forward(x, np.ones(3), np.zeros(3), _stats(3),
                                       "train")
    assert cache is not None
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-6
    assert np.abs(var - 1.0).max() < 1e-4


def test_gamma_beta_scale_and_shift():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 8, 8))
    out, _ = ops.batchnorm_forward(x, np.full(2, 2.0), np.full(2, 3.0),
                                   _stats(2), "train")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), [3.0, 3.0], atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), [2.0, 2.0], atol=1e-3)


def test_running_stats_ema_update():
    rng = np.random.default_rng(2)
    st = _stats(2)
    x = rng.normal(5.0, 1.0, (2, 2, 4, 4))
    ops.batchnorm_forward(x, np.ones(2), np.zeros(2), st, "train", momentum=0.1)
    np.testing.assert_allclose(
        st.mean, 0.9 * 0.0 + 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(
        st.var, 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)
    assert st.batches == 1


def test_eval_mode_is_affine_oracle():
    # eval mode must equal the hand-computed per-channel affine map
    st = ops.RunningStats(mean=np.array([1.0, -2.0]), var=np.array([4.0, 0.25]),
                          batches=5)
    gamma = np.array([2.0, 3.0])
    beta = np.array([-1.0, 0.5])
    eps = 1e-5
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 4, 4))
    out, cache = ops.batchnorm_forward(x, gamma, beta, st, "eval", eps=eps)
    assert cache is None
    want = gamma[None, :, None, None] * (x - st.mean[None, :, None, None]) \
        / np.sqrt(st.var + eps)[None, :, None, None] + beta[None, :, None, None]
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_eval_before_any_stats_is_error():
    x = np.zeros((1, 2, 4, 4))
    with pytest.raises(UsageError):
        ops.batchnorm_forward(x, np.ones(2), np.zeros(2), _stats(2), "eval")


def test_backward_zero_grad_out():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    _, cache = ops.batchnorm_forward(x, np.ones(3), np.zeros(3), _stats(3),
                                     "train")
    gx, gg, gb = ops.batchnorm_backward(cache, np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()


def test_backward_beta_grad_is_channel_sum():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.standard_normal(x.shape)
    _, cache = ops.batchnorm_forward(x, np.ones(3), np.zeros(3), _stats(3),
                                     "train")
    _gx, _gg, gb = ops.batchnorm_backward(cache, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_backward_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 4, 4))
    gamma = rng.standard_normal(2) + 1.5
    beta = rng.standard_normal(2)
    r = rng.standard_normal(x.shape)

    def loss():
        out, _ = ops.batchnorm_forward(x, gamma, beta, _stats(2), "train")
        return float((out * r).sum())

    _, cache = ops.batchnorm_forward(x, gamma, beta, _stats(2), "train")
    gx, gg, gb = ops.batchnorm_backward(cache, r)
    assert rel_err(gx, finite_diff_grad(loss, x, eps=1e-5)) < 1e-5
    assert rel_err(gg, finite_diff_grad(loss, gamma, eps=1e-5)) < 1e-5
    assert rel_err(gb, finite_diff_grad(loss, beta, eps=1e-5)) < 1e-5
