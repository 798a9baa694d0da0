"""Property suite behind ``gpca verify`` and the seeded problem generators
the tests share with it.

Every property returns ``(passed, detail)``. A :class:`VerifyContext`
carries knobs a caller may perturb on purpose (the probit constant) to
confirm that a check can fail.
"""

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as att
from .attention import FULL, KernelParams, Variant, VariantSpec
from .beta_approx import BetaSpec, GaussSpec, match_moments, sample_sigmoid_gaussian, sigmoid_gaussian_pdf
from .grad import DEFAULT_STEP, finite_diff_check, gpca_backward, relative_errors
from .numerics import QuadratureSpec, digamma, integrate, logit, trigamma


@dataclass
class VerifyContext:
    probit_lambda: float = att.PROBIT_LAMBDA


@dataclass
class Property:
    name: str
    description: str
    check: Callable


@dataclass
class Outcome:
    name: str
    passed: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# seeded generators


def gradient_configs(n=20, seed=0, b_floor=1e-3):
    """``n`` seeded (x, theta_tilde, weights) triples cycling C over {3, 6, 12}
    and spatial size over {2, 8}.

    Entries are N(0, 1/S) so squared channel distances are O(1) and every
    kernel term contributes to the gradient. Draws in which some channel's
    posterior variance falls below ``b_floor`` are redrawn: such channels
    are near-duplicates of a combination of the others, the loss then
    curves on a scale far below the finite-difference step and the
    central difference itself is what goes wrong.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        C = (3, 6, 12)[i % 3]
        S = (2, 8)[(i // 3) % 2]
        while True:
            x = rng.normal(size=(C, S)) / math.sqrt(S)
            tt = rng.uniform(-1.0, 1.0, size=4)
            _, cache = att.mask_forward(x, KernelParams(tuple(tt)))
            if cache.B.min() >= b_floor:
                break
        w = rng.normal(size=(C, S))
        out.append((x, tt, w))
    return out


def oracle_configs(n=20, seed=1):
    """(x, params) with the Gaussian term off (theta_0 = 0) and S >= C."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        C = int(rng.integers(2, 9))
        S = int(rng.integers(C, C + 6))
        x = rng.normal(size=(C, S))
        tt = (-math.inf, float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
        out.append((x, KernelParams(tt)))
    return out


def naive_configs(n=50, seed=2):
    """(x, params) with C in [2, 16] and spatial size in [4, 16]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        C = int(rng.integers(2, 17))
        S = int(rng.integers(4, 17))
        x = rng.normal(size=(C, S)) / math.sqrt(S)
        out.append((x, KernelParams(tuple(rng.uniform(-1, 1, size=4)))))
    return out


VARIANTS = (FULL, VariantSpec(Variant.LOCAL), VariantSpec(Variant.MHA, group_size=4))


def max_rel_diff(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b) / scale))


# ---------------------------------------------------------------------------
# checks


def check_special_functions(ctx):
    cases = [
        (digamma(1.0), -0.5772156649015329),
        (digamma(0.5), -1.9635100260214235),
        (trigamma(1.0), math.pi ** 2 / 6),
        (trigamma(0.5), math.pi ** 2 / 2),
    ]
    err = max(abs(a - b) for a, b in cases)
    return err < 1e-12, f"max abs error {err:.2e}"


def normalization_error(n=50, seed=3):
    """Largest |integral over (0, 1) of the sigmoid-Gaussian density - 1| over
    ``n`` seeded (mu, sigma2) draws."""
    rng = np.random.default_rng(seed)
    spec = QuadratureSpec(0.0, 1.0, abs_tol=1e-9, max_subdivisions=5000, initial_subdivisions=16)
    worst = 0.0
    for _ in range(n):
        g = GaussSpec(float(rng.uniform(-4, 4)), float(rng.uniform(0.05, 6.0)))
        worst = max(worst, abs(integrate(lambda v, g=g: sigmoid_gaussian_pdf(v, g), spec) - 1.0))
    return worst


def check_normalization(ctx):
    worst = normalization_error()
    return worst < 1e-6, f"max |integral - 1| = {worst:.2e} over 50 draws"


def _moment_z(u, mu, sigma2):
    """Deviations of the sample mean and variance of ``u`` from (mu, sigma2),
    in standard errors estimated from the sample itself."""
    n = u.size
    d = u - u.mean()
    m2 = float(np.mean(d * d))
    m4 = float(np.mean(d ** 4))
    se_mean = math.sqrt(m2 / n)
    se_var = math.sqrt(max(m4 - m2 * m2, 0.0) / n)
    return abs(u.mean() - mu) / se_mean, abs(u.var(ddof=1) - sigma2) / se_var


def moment_round_trip(n_samples=1_000_000, seed=4, grid=(0.5, 1.0, 2.0, 5.0)):
    """Largest standard-error deviation over the (alpha, beta) grid.

    For each pair the logits of Beta(alpha, beta) samples must have the
    matched (mu, sigma2), and so must the logits of the sigmoid-Gaussian
    sampler's output.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for a in grid:
        for b in grid:
            g = match_moments(BetaSpec(a, b))
            for v in (rng.beta(a, b, size=n_samples), sample_sigmoid_gaussian(g, rng, n_samples)):
                worst = max(worst, *_moment_z(logit(v), g.mu, g.sigma2))
    return worst


def check_moment_matching(ctx):
    worst = moment_round_trip(n_samples=200_000)
    return worst < 4.0, f"max deviation {worst:.2f} standard errors"


def check_feature_space_oracle(ctx):
    worst = 0.0
    for x, params in oracle_configs():
        K = att.gram_matrix(x, params)
        for c in range(x.shape[0]):
            a_kt = att.channel_correlations(K, c, params.delta)
            B_kt = att.posterior_mean_var(K, [att.channel_correlations(K, j, params.delta)
                                              for j in range(x.shape[0])])[1][c]
            a_fs, B_fs = att.feature_space_oracle(x, params, c)
            worst = max(worst, max_rel_diff(a_kt, a_fs), max_rel_diff(B_kt, B_fs))
    return worst < 1e-8, f"max relative difference {worst:.2e}"


def gradient_check_errors(configs=None, variants=VARIANTS):
    """Largest finite-difference relative error per (config, variant)."""
    configs = gradient_configs() if configs is None else configs
    errors = []
    for x, tt, w in configs:
        for variant in variants:
            def loss(xv, tv, variant=variant):
                return float(np.sum(w * att.gpca_forward(xv, KernelParams(tuple(tv)), variant)[0]))

            _, cache = att.gpca_forward(x, KernelParams(tuple(tt)), variant)
            g = gpca_backward(cache, w)
            r_x = finite_diff_check(lambda z: loss(z, tt), x, g.d_input)
            r_t = finite_diff_check(lambda z: loss(x, z), tt, g.d_theta_tilde)
            errors.append(max(r_x.max_rel_error, r_t.max_rel_error))
    return errors


def network_gradient_error(model, x, labels, max_coords=None, seed=0, step=DEFAULT_STEP):
    """Worst relative error between backprop and central differences for a
    whole network, over every parameter (or ``max_coords`` random entries of
    each parameter array).

    Differences are taken of the loss change relative to the unperturbed
    logits (:func:`nn.cross_entropy_shift`), which keeps rounding error
    proportional to the change instead of to the loss.
    """
    from .nn import cross_entropy_shift

    model.loss_and_grad(x, labels)
    grads = {name: g.copy() for name, g in model.gradients()}
    ref = model.forward(x, train=False)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.parameters():
        flat = p.reshape(-1)
        picks = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picks = rng.choice(flat.size, size=max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            h = step * (1.0 + abs(orig))
            flat[i] = orig + h
            up = cross_entropy_shift(model.forward(x, train=False), labels, ref)
            flat[i] = orig - h
            down = cross_entropy_shift(model.forward(x, train=False), labels, ref)
            flat[i] = orig
            numeric = (up - down) / ((orig + h) - (orig - h))
            worst = max(worst, float(relative_errors(g[i], numeric)))
    return worst


def check_gradients(ctx):
    errors = gradient_check_errors()
    worst = max(errors)
    return worst < 1e-5, f"max relative error {worst:.2e} over {len(errors)} runs"


def mask_accuracy_error(probit_lambda=att.PROBIT_LAMBDA, n=21):
    worst = 0.0
    for A in np.linspace(-5, 5, n):
        for B in np.linspace(0, 10, n):
            closed = att.attention_mask(np.array([A]), np.array([B]), probit_lambda)[0]
            worst = max(worst, abs(closed - att.sigmoid_gaussian_mean(A, B)))
    return worst


def check_mask_accuracy(ctx):
    worst = mask_accuracy_error(ctx.probit_lambda)
    at_zero = att.attention_mask(np.zeros(1), np.array([3.0]), ctx.probit_lambda)[0]
    ok = worst < 0.02 and at_zero == 0.5 and att.sigmoid_gaussian_mean(0.0, 3.0) == 0.5
    return ok, f"max error {worst:.4f} on the 21x21 grid"


def check_naive_equivalence(ctx):
    worst = 0.0
    for x, params in naive_configs():
        y, _ = att.gpca_forward(x, params, probit_lambda=ctx.probit_lambda)
        y_ref = att.naive_forward(x, params, probit_lambda=ctx.probit_lambda)[0]
        worst = max(worst, max_rel_diff(y, y_ref))
    return worst < 1e-12, f"max relative difference {worst:.2e}"


def _random_inputs(n=30, seed=5):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        C = int(rng.integers(2, 20))
        S = int(rng.integers(1, 12))
        yield rng.normal(scale=rng.uniform(0.1, 3.0), size=(C, S)), KernelParams(tuple(rng.uniform(-2, 2, 4)))


def check_mask_range(ctx):
    lo, hi = 1.0, 0.0
    for x, params in _random_inputs():
        for variant in VARIANTS:
            V, _ = att.mask_forward(x, params, variant, probit_lambda=ctx.probit_lambda)
            lo, hi = min(lo, V.min()), max(hi, V.max())
    return 0.0 < lo and hi < 1.0, f"masks within [{lo:.3g}, 1 - {1.0 - hi:.3g}]"


def check_variance_nonnegative(ctx):
    raw_min, clamped_min = math.inf, math.inf
    for x, params in _random_inputs():
        _, cache = att.mask_forward(x, params)
        raw_min = min(raw_min, cache.B_raw.min())
        clamped_min = min(clamped_min, cache.B.min())
    return raw_min >= -1e-10 and clamped_min >= 0.0, f"raw min {raw_min:.2e}, clamped min {clamped_min:.2e}"


def check_permutation(ctx):
    # A permuted input is factored in a different order, so the masks agree
    # only up to rounding amplified by cond(K + I/delta); the allowance is
    # 100 ulps scaled by that condition number.
    rng = np.random.default_rng(6)
    worst, worst_ratio = 0.0, 0.0
    eps = np.finfo(float).eps
    for x, params in _random_inputs():
        perm = rng.permutation(x.shape[0])
        V, _ = att.mask_forward(x, params, probit_lambda=ctx.probit_lambda)
        Vp, _ = att.mask_forward(x[perm], params, probit_lambda=ctx.probit_lambda)
        diff = float(np.max(np.abs(Vp - V[perm])))
        M = att.gram_matrix(x, params) + np.eye(x.shape[0]) / params.delta
        worst = max(worst, diff)
        worst_ratio = max(worst_ratio, diff / (eps * np.linalg.cond(M)))
    return worst_ratio <= 100.0, f"max |V(Px) - P V(x)| = {worst:.2e} ({worst_ratio:.2f} x cond * eps)"


def check_padding(ctx):
    worst_a = 0.0
    worst_grad = 0.0
    for x, params in list(_random_inputs(10)):
        _, base = att.mask_forward(x, params)
        w = np.random.default_rng(7).normal(size=x.shape)
        for eps in (1.0, -3.5, 100.0):
            _, padded = att.mask_forward(x, params, padding=eps)
            worst_a = max(worst_a, float(np.max(np.abs(padded.A - base.A))))

        def loss(e):
            return float(np.sum(w * att.gpca_forward(x, params, padding=float(e[0]))[0]))

        worst_grad = max(worst_grad, abs(finite_diff_check(loss, np.array([0.0])).numeric[0]))
    return worst_a == 0.0 and worst_grad == 0.0, f"max |dA| {worst_a:.1e}, |dloss/deps| {worst_grad:.1e}"


def check_degeneration(ctx):
    ok = True
    for x, params in _random_inputs(15):
        C = x.shape[0]
        V_full, _ = att.mask_forward(x, params)
        V_mha, _ = att.mask_forward(x, params, VariantSpec(Variant.MHA, group_size=C))
        # a window of width >= C - 1 falls back to the full GP
        V_loc, _ = att.mask_forward(x, params, VariantSpec(Variant.LOCAL, gamma=0.01, b=C))
        ok &= np.array_equal(V_full, V_mha) and np.array_equal(V_full, V_loc)
    return bool(ok), "exact equality" if ok else "variants differ from Full"


PROPERTIES = (
    Property("special_functions", "digamma/trigamma at reference points", check_special_functions),
    Property("normalization", "sigmoid-Gaussian density integrates to 1", check_normalization),
    Property("moment_matching", "logit moments of samples match (mu, sigma2)", check_moment_matching),
    Property("feature_space_oracle", "kernel-trick (a_c, B_c) equal weight-space values", check_feature_space_oracle),
    Property("gradients", "analytic gradients match central differences", check_gradients),
    Property("mask_accuracy", "probit mask within 0.02 of the exact expectation", check_mask_accuracy),
    Property("naive_equivalence", "vectorized forward equals per-channel loop", check_naive_equivalence),
    Property("mask_range", "every mask strictly inside (0, 1)", check_mask_range),
    Property("variance_nonnegative", "posterior variances >= 0 after clamp", check_variance_nonnegative),
    Property("permutation_equivariance", "permuting channels permutes masks", check_permutation),
    Property("padding_independence", "padding value never changes A or the loss", check_padding),
    Property("variant_degeneration", "Local/MHA covering all channels equal Full", check_degeneration),
)


def run_properties(ctx: VerifyContext = None, names=None):
    ctx = ctx or VerifyContext()
    out = []
    for prop in PROPERTIES:
        if names is not None and prop.name not in names:
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = prop.check(ctx)
        except Exception as exc:  # a crash is a failed property, not a crashed suite
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Outcome(prop.name, bool(passed), detail, time.perf_counter() - t0))
    return out
