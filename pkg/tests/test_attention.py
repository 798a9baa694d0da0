import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpca.attention import (FULL, PROBIT_LAMBDA, DegenerateInputError, KernelParams, Variant, VariantSpec,
                            attention_mask, channel_correlations, feature_space_oracle, gpca_forward,
                            gpca_local_forward, gpca_mha_forward, gram_matrix, kernel,
                            local_neighborhood_size, mask_forward, naive_forward, plan_windows,
                            sigmoid_gaussian_mean)

NEG = -math.inf
TWO = np.array([[1.0, 0.0], [0.0, 1.0]])
UNIT = KernelParams.from_theta((1, 1, 0, 1))


def _x(rng, C, S):
    return rng.normal(size=(C, S)) / math.sqrt(S)


def test_kernel_small_cases():
    assert gram_matrix(np.zeros((2, 3)), UNIT)[0, 1] == 1.0
    K = gram_matrix(TWO, UNIT)
    assert K[0, 0] == 2.0
    assert abs(K[0, 1] - math.exp(-2)) < 1e-16
    assert kernel(TWO[0], TWO[1], UNIT.theta) == K[0, 1]


def test_gram_matrix_matches_elementwise_kernel():
    rng = np.random.default_rng(0)
    x = _x(rng, 7, 5)
    p = KernelParams((0.3, -0.2, 0.1, 0.4))
    K = gram_matrix(x, p)
    ref = np.array([[kernel(a, b, p.theta) for b in x] for a in x])
    np.testing.assert_allclose(K, ref, rtol=1e-13)
    assert np.array_equal(K, K.T)
    t = p.theta
    np.testing.assert_allclose(np.diag(K), t[0] + t[2] + t[3] * np.sum(x * x, axis=1), rtol=1e-14)


def test_gaussian_term_cut_off_far_apart():
    x = np.array([[0.0, 0.0], [30.0, 0.0]])
    p = KernelParams((0.0, 0.0, NEG, NEG))
    # distance^2 = 900 > 700: the Gaussian term is exactly zero
    assert gram_matrix(x, p)[0, 1] == 0.0
    assert kernel(x[0], x[1], p.theta) == 0.0


def test_two_channel_closed_form():
    # a_1 = K_21 / (K_11 + 1/delta); with C = 2, A_1 is that single weight
    a = math.exp(-2) / (2 + 1e-6)
    assert abs(channel_correlations(gram_matrix(TWO, UNIT), 0, 1e6)[0] - a) < 1e-16
    _, cache = mask_forward(TWO, UNIT)
    assert abs(cache.A[0] - 0.06766760778450245) < 1e-15
    assert abs(cache.B[0] - (2 - a * math.exp(-2))) < 1e-14
    assert abs(cache.B[0] - 1.9908421851345404) < 1e-14


def test_uncorrelated_channels():
    # theta_2 = 0, theta_3 = 1, orthonormal channels give K = I
    x = np.eye(4)
    p = KernelParams((NEG, 0.0, NEG, 0.0))
    np.testing.assert_array_equal(gram_matrix(x, p), np.eye(4))
    V, cache = mask_forward(x, p)
    assert np.all(cache.A == 0) and np.allclose(cache.B, 1.0, atol=1e-12)
    assert np.all(V == 0.5)
    for c in range(4):
        a_c, b_c = feature_space_oracle(x, p, c)
        assert np.all(np.abs(a_c) < 1e-15) and abs(b_c - 1.0) < 1e-12


def test_attention_mask_values():
    assert attention_mask(0.0, 3.0) == 0.5
    assert attention_mask(1.3, 0.0) == 1 / (1 + math.exp(-1.3))
    assert abs(attention_mask(1.0, 8 / math.pi) - 0.6697615) < 1e-7
    # tiny negative variances are treated as zero
    assert attention_mask(0.7, -1e-12) == attention_mask(0.7, 0.0)


@pytest.mark.parametrize("A,B", [(0.0, 4.0), (1.0, 0.0), (2.0, 3.0), (-4.0, 10.0)])
def test_sigmoid_gaussian_mean_reference(A, B):
    # independent route: dense Gauss-Hermite rule
    z, w = np.polynomial.hermite_e.hermegauss(200)
    ref = float(np.sum(w / (1 + np.exp(-(A + math.sqrt(B) * z)))) / math.sqrt(2 * math.pi))
    assert abs(sigmoid_gaussian_mean(A, B) - ref) < 1e-12
    assert abs(attention_mask(A, B) - ref) < 0.02


@pytest.mark.parametrize("C,expected", [(64, 3), (512, 5), (4, 1), (2, 1)])
def test_local_neighborhood_size(C, expected):
    assert local_neighborhood_size(C) == expected


def test_local_neighborhood_is_odd():
    for C in range(2, 5000, 37):
        for gamma in (0.5, 1.0, 2.0, 3.0):
            k = local_neighborhood_size(C, gamma)
            assert k % 2 == 1 and k >= 1


def test_identical_channels_share_mask():
    x = np.tile(np.array([[0.3, -0.1, 0.5]]), (5, 1))
    y, cache = gpca_forward(x, KernelParams((0.0, 0.0, -1.0, 0.0)))
    # K is rank one plus 1/delta here, so agreement is only to conditioning
    np.testing.assert_allclose(cache.V, cache.V[0], rtol=1e-9)
    np.testing.assert_allclose(y, cache.V[0] * x, rtol=1e-9)


def test_output_is_channel_scaling():
    rng = np.random.default_rng(1)
    x = _x(rng, 9, 6)
    y, cache = gpca_forward(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), cache.V * np.linalg.norm(x, axis=1), rtol=1e-14)


def test_matches_naive_loop():
    rng = np.random.default_rng(2)
    x = _x(rng, 8, 4) * 2
    p = KernelParams((0.2, -0.5, 0.1, 0.3))
    y, cache = gpca_forward(x, p)
    y_ref, V_ref, A_ref, B_ref = naive_forward(x, p)
    np.testing.assert_allclose(cache.A, A_ref, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(cache.B_raw, B_ref, rtol=1e-12)
    np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-15)


def test_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2, 6, 5)) / math.sqrt(5)
    p = KernelParams((0.1, 0.2, -0.3, 0.0))
    y, _ = gpca_forward(x, p)
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(y[i, j], gpca_forward(x[i, j], p)[0], rtol=1e-12, atol=1e-15)


def test_variance_nonnegative_on_random_grams():
    rng = np.random.default_rng(4)
    for _ in range(100):
        C, S = rng.integers(2, 12), rng.integers(1, 10)
        x = rng.normal(size=(C, S)) * rng.uniform(0.1, 3)
        p = KernelParams(tuple(rng.uniform(-2, 2, 4)))
        V, cache = mask_forward(x, p)
        assert cache.B_raw.min() >= -1e-10
        assert np.all((V > 0) & (V < 1))


def test_padding_never_read():
    rng = np.random.default_rng(5)
    x = _x(rng, 6, 4)
    V0, c0 = mask_forward(x, KernelParams(), padding=0.0)
    V1, c1 = mask_forward(x, KernelParams(), padding=123.0)
    assert np.array_equal(V0, V1) and np.array_equal(c0.A, c1.A)
    assert np.all(np.diag(c1.a_tilde) == 123.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 10), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance(C, S, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(C, S)) / math.sqrt(S)
    perm = rng.permutation(C)
    p = KernelParams((0.0, 0.5, -1.0, 0.0))
    y, _ = gpca_forward(x, p)
    y_perm, _ = gpca_forward(x[perm], p)
    np.testing.assert_allclose(y_perm, y[perm], rtol=1e-9, atol=1e-12)


def test_mha_partition():
    blocks = plan_windows(48, VariantSpec(Variant.MHA, group_size=16))
    assert len(blocks) == 1 and blocks[0].idx.shape == (3, 16)
    blocks = plan_windows(17, VariantSpec(Variant.MHA, group_size=4))
    widths = sorted(w for b in blocks for w in [b.idx.shape[1]] * b.idx.shape[0])
    # the lone trailing channel joins the last group
    assert widths == [4, 4, 4, 5]
    covered = np.sort(np.concatenate([b.out_ch.ravel() for b in blocks]))
    assert np.array_equal(covered, np.arange(17))


def test_mha_groups_are_independent():
    rng = np.random.default_rng(6)
    x = _x(rng, 32, 4)
    V, _ = mask_forward(x, KernelParams(), VariantSpec(Variant.MHA, group_size=16))
    x2 = x.copy()
    x2[16:] += rng.normal(size=(16, 4))
    V2, _ = mask_forward(x2, KernelParams(), VariantSpec(Variant.MHA, group_size=16))
    assert np.array_equal(V[:16], V2[:16])
    assert not np.allclose(V[16:], V2[16:])
    V_first, _ = mask_forward(x[:16], KernelParams())
    np.testing.assert_allclose(V[:16], V_first, rtol=1e-13)


def test_local_windows_are_circular():
    rng = np.random.default_rng(7)
    x = _x(rng, 20, 3)
    spec = VariantSpec(Variant.LOCAL)
    V, _ = mask_forward(x, KernelParams(), spec)
    # width max(k, 3) = 3: channel 0 sees channels 19 and 1
    window = x[[19, 0, 1]]
    V_win, _ = mask_forward(window, KernelParams())
    assert abs(V[0] - V_win[1]) < 1e-14


def test_variants_degenerate_to_full():
    rng = np.random.default_rng(8)
    x = _x(rng, 5, 4)
    y_full, _ = gpca_forward(x)
    assert np.array_equal(gpca_mha_forward(x, group_size=5)[0], y_full)
    assert np.array_equal(gpca_mha_forward(x, group_size=16)[0], y_full)
    # width 3 >= C - 1 = 4 is false for C = 5, so force a wide window
    assert np.array_equal(gpca_local_forward(x, gamma=0.01, b=5)[0], y_full)
    assert np.array_equal(gpca_local_forward(x[:4])[0], gpca_forward(x[:4])[0])


def test_degenerate_inputs_rejected():
    with pytest.raises(DegenerateInputError):
        gpca_forward(np.ones((1, 4)))
    with pytest.raises(DegenerateInputError):
        naive_forward(np.ones((1, 4)))
    with pytest.raises(ValueError):
        gpca_forward(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        KernelParams((0.0, 0.0, math.inf, 0.0))
    with pytest.raises(ValueError):
        VariantSpec(Variant.MHA, group_size=1)


@pytest.mark.parametrize("seed", range(5))
def test_kernel_trick_matches_feature_space(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 5))
    p = KernelParams((NEG, 0.0, 0.0, 0.0))
    _, cache = mask_forward(x, p)
    for c in range(6):
        a_c, b_c = feature_space_oracle(x, p, c)
        np.testing.assert_allclose(cache.a_rows[c], a_c, rtol=1e-8, atol=1e-12)
        assert abs(cache.B[c] - b_c) <= 1e-8 * abs(b_c)


def test_feature_space_oracle_requires_no_gaussian_term():
    with pytest.raises(ValueError):
        feature_space_oracle(np.eye(3), KernelParams(), 0)


def test_probit_constant():
    assert PROBIT_LAMBDA ** 2 == pytest.approx(8 / math.pi, rel=1e-15)
