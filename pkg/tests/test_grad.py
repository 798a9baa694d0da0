import math

import numpy as np
import pytest

from gpca.attention import FULL, KernelParams, Variant, VariantSpec, gpca_forward, mask_forward
from gpca.grad import finite_diff_check, gpca_backward, mask_backward, numeric_gradient, relative_errors
from gpca.verify import VARIANTS, gradient_configs

NEG = -math.inf


def _setup(seed=0, C=6, S=4, tt=(0.1, -0.3, 0.2, -0.1)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(C, S)) / math.sqrt(S)
    return x, np.array(tt)


def _loss(x, tt, w, variant=FULL, padding=0.0):
    return float(np.sum(w * gpca_forward(x, KernelParams(tuple(tt)), variant, padding)[0]))


def test_numeric_gradient_of_square_is_exact():
    g = numeric_gradient(lambda p: float(p[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-9


def test_numeric_gradient_of_constant_is_zero():
    g = numeric_gradient(lambda p: 4.2, np.array([1.0, -2.0, 1e3]))
    assert np.all(g == 0.0)


def test_relative_error_floor():
    err = relative_errors(np.array([0.0, 1.0]), np.array([1e-12, 1.0 + 1e-9]))
    assert err[0] == pytest.approx(1e-4) and err[1] < 1e-8
    with pytest.raises(ValueError):
        numeric_gradient(lambda p: 0.0, np.zeros(1), step=0.0)


def test_zero_adjoint_gives_zero_gradients():
    x, tt = _setup()
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    g = gpca_backward(cache, np.zeros_like(x))
    assert np.all(g.d_input == 0) and np.all(g.d_theta_tilde == 0)


def test_sum_loss_gradient_matches_differences():
    x, tt = _setup(C=6, S=4)
    w = np.ones_like(x)
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    g = gpca_backward(cache, w)
    assert finite_diff_check(lambda z: _loss(z, tt, w), x, g.d_input).max_rel_error < 1e-5
    assert finite_diff_check(lambda z: _loss(x, z, w), tt, g.d_theta_tilde).max_rel_error < 1e-5


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: v.kind.value)
def test_seeded_configs_per_variant(variant):
    for x, tt, w in gradient_configs(n=6, seed=11):
        _, cache = gpca_forward(x, KernelParams(tuple(tt)), variant)
        g = gpca_backward(cache, w)
        assert finite_diff_check(lambda z: _loss(z, tt, w, variant), x, g.d_input).max_rel_error < 1e-5
        assert finite_diff_check(lambda z: _loss(x, z, w, variant), tt, g.d_theta_tilde).max_rel_error < 1e-5


def test_local_variant_with_overlapping_windows():
    # C = 9 gives width-3 windows that overlap, exercising the scatter-add
    x, tt = _setup(seed=3, C=9, S=3)
    w = np.random.default_rng(3).normal(size=x.shape)
    spec = VariantSpec(Variant.LOCAL)
    _, cache = gpca_forward(x, KernelParams(tuple(tt)), spec)
    assert len(cache.blocks[0][0].idx) == 9
    g = gpca_backward(cache, w)
    assert finite_diff_check(lambda z: _loss(z, tt, w, spec), x, g.d_input).max_rel_error < 1e-5


def test_frozen_mask_gradient_is_direct_scaling():
    x, tt = _setup()
    w = np.random.default_rng(1).normal(size=x.shape)
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    g = gpca_backward(cache, w, through_mask=False)
    np.testing.assert_array_equal(g.d_input, cache.V[:, None] * w)
    assert np.all(g.d_theta_tilde == 0)


def test_padding_does_not_affect_gradient():
    x, tt = _setup()
    w = np.random.default_rng(2).normal(size=x.shape)
    d_eps = numeric_gradient(lambda e: _loss(x, tt, w, padding=float(e[0])), np.array([0.3]))
    assert d_eps[0] == 0.0
    g0 = gpca_backward(gpca_forward(x, KernelParams(tuple(tt)), padding=0.0)[1], w)
    g1 = gpca_backward(gpca_forward(x, KernelParams(tuple(tt)), padding=5.0)[1], w)
    assert np.array_equal(g0.d_input, g1.d_input)


def test_backward_is_deterministic():
    x, tt = _setup()
    w = np.ones_like(x)
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    a, b = gpca_backward(cache, w), gpca_backward(cache, w)
    assert np.array_equal(a.d_input, b.d_input) and np.array_equal(a.d_theta_tilde, b.d_theta_tilde)


def test_per_sample_theta_gradients_sum_to_batch():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 6, 4)) / 2
    w = rng.normal(size=x.shape)
    _, cache = gpca_forward(x, KernelParams((0.1, 0.2, 0.3, 0.4)))
    per = gpca_backward(cache, w, reduce=False)
    total = gpca_backward(cache, w)
    assert per.d_theta_tilde.shape == (5, 4)
    np.testing.assert_allclose(per.d_theta_tilde.sum(axis=0), total.d_theta_tilde, rtol=1e-13)
    single = gpca_backward(gpca_forward(x[2], KernelParams((0.1, 0.2, 0.3, 0.4)))[1], w[2])
    np.testing.assert_allclose(per.d_theta_tilde[2], single.d_theta_tilde, rtol=1e-12)


def test_switched_off_terms_have_zero_gradient():
    x, _ = _setup()
    tt = (NEG, 0.0, NEG, 0.0)
    _, cache = gpca_forward(x, KernelParams(tt))
    g = gpca_backward(cache, np.ones_like(x))
    assert g.d_theta_tilde[0] == 0 and g.d_theta_tilde[2] == 0
    assert np.all(np.isfinite(g.d_theta_tilde)) and g.d_theta_tilde[3] != 0


def test_through_params_false():
    x, tt = _setup()
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    g = gpca_backward(cache, np.ones_like(x), through_params=False)
    assert np.all(g.d_theta_tilde == 0)


def test_shape_mismatch_rejected():
    x, tt = _setup()
    V, cache = mask_forward(x, KernelParams(tuple(tt)))
    with pytest.raises(ValueError):
        gpca_backward(cache, np.ones((6, 3)))
    with pytest.raises(ValueError):
        mask_backward(cache, np.ones(5))


def _richardson(f, point, i, h):
    # two central differences combined to cancel the h^2 term
    def central(step):
        up, down = point.copy(), point.copy()
        up.flat[i] += step
        down.flat[i] -= step
        return (f(up) - f(down)) / (2 * step)
    return (4 * central(h / 2) - central(h)) / 3


def test_near_duplicate_channels_checked_by_extrapolation():
    # a channel close to another has tiny posterior variance B; the loss then
    # curves on a scale comparable to the default step, so plain central
    # differences carry large truncation error while the extrapolated route
    # still agrees with the analytic gradient
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 3)) / math.sqrt(3)
    x[3] = x[0] + 1e-3 * rng.normal(size=3)
    tt = np.array([0.2, 0.1, -0.5, 0.3])
    w = rng.normal(size=x.shape)
    _, cache = gpca_forward(x, KernelParams(tuple(tt)))
    assert cache.B.min() < 1e-4
    g = gpca_backward(cache, w).d_input
    f = lambda z: _loss(z, tt, w)  # noqa: E731
    assert finite_diff_check(f, x, g).max_rel_error > 1e-3
    for i in range(x.size):
        ref = _richardson(f, x, i, 1e-5)
        assert abs(ref - g.flat[i]) <= 1e-5 * max(abs(ref), 1e-3)
