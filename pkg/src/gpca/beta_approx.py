"""Beta distributions and their unit-interval approximations.

The Sigmoid-Gaussian density is the law of ``sigmoid(u)`` with
``u ~ N(mu, sigma2)``; moment matching in the logit domain maps a beta
``(alpha, beta)`` onto ``(mu, sigma2)`` through digamma and trigamma. The
competitor approximations (moment-matched Gaussian, Laplace at the mode,
binary concrete) are kept for the KL comparison in :func:`comparison_table`.

All densities are evaluated through their value at ``v = sigmoid(u)`` so
that KL integrals can be taken in the logit domain, where the endpoint
singularities of (0, 1) disappear.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numerics import (
    DomainError,
    QuadratureSpec,
    digamma,
    log_sigmoid,
    normal_logpdf,
    quad_gk,
    sigmoid,
    std_normal_cdf,
    trigamma,
)

CONCRETE_TEMPERATURE = 1.0
DEFAULT_GRID = (0.5, 1.0, 2.0, 5.0)


@dataclass(frozen=True)
class BetaSpec:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"beta parameter {name} must be positive, got {value!r}")

    @property
    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self):
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))


@dataclass(frozen=True)
class GaussSpec:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma2)):
            raise DomainError("Gaussian parameters must be finite")
        if self.sigma2 < 0:
            raise DomainError(f"variance must be non-negative, got {self.sigma2!r}")


def log_beta_function(alpha, beta):
    return math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)


def _check_open_unit(x):
    x = np.asarray(x, dtype=float)
    if not np.all((x > 0.0) & (x < 1.0)):
        raise DomainError("argument must lie strictly inside (0, 1)")
    return x


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def beta_logpdf(x, spec: BetaSpec):
    x = _check_open_unit(x)
    out = ((spec.alpha - 1.0) * np.log(x) + (spec.beta - 1.0) * np.log1p(-x)
           - log_beta_function(spec.alpha, spec.beta))
    return _scalar(out)


def beta_pdf(x, spec: BetaSpec):
    """Beta density x^(a-1) (1-x)^(b-1) / B(a, b), computed in log space."""
    return _scalar(np.exp(beta_logpdf(x, spec)))


def match_moments(spec: BetaSpec) -> GaussSpec:
    """Gaussian (mu, sigma2) whose logit moments equal those of the beta.

    mu = psi(alpha) - psi(beta), sigma2 = psi_1(alpha) + psi_1(beta).
    """
    return GaussSpec(digamma(spec.alpha) - digamma(spec.beta),
                     trigamma(spec.alpha) + trigamma(spec.beta))


def sigmoid_gaussian_pdf(v, spec: GaussSpec):
    """Density of sigmoid(u), u ~ N(mu, sigma2): N(logit v) / (v (1 - v))."""
    if not spec.sigma2 > 0:
        raise DomainError("density needs sigma2 > 0")
    v = _check_open_unit(v)
    u = np.log(v) - np.log1p(-v)
    out = np.exp(normal_logpdf(u, spec.mu, spec.sigma2)) / (v * (1.0 - v))
    return _scalar(out)


_V_MIN = np.nextafter(0.0, 1.0)
_V_MAX = np.nextafter(1.0, 0.0)


def sample_sigmoid_gaussian(spec: GaussSpec, rng, n: int) -> np.ndarray:
    """Draw ``n`` samples of sigmoid(u), u ~ N(mu, sigma2).

    ``rng`` is a seed or a ``numpy.random.Generator``. Samples are clipped
    to the open interval so a saturated sigmoid never returns 0 or 1.
    """
    rng = np.random.default_rng(rng)
    u = spec.mu + math.sqrt(spec.sigma2) * rng.standard_normal(n)
    return np.clip(sigmoid(u), _V_MIN, _V_MAX)


# ---------------------------------------------------------------------------
# approximations


class ApproxKind(enum.Enum):
    TRUE_BETA = "true_beta"
    SIGMOID_GAUSSIAN = "sigmoid_gaussian"
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    CONCRETE = "concrete"


COMPETITORS = (ApproxKind.GAUSSIAN, ApproxKind.LAPLACE, ApproxKind.CONCRETE)


class LaplaceUndefinedError(DomainError):
    """Beta has no interior mode (alpha <= 1 or beta <= 1)."""


@dataclass(frozen=True)
class UnitIntervalDensity:
    """A density on (0, 1) built to approximate ``target``.

    ``params`` holds the kind-specific parameters. For the Gaussian and
    Laplace kinds ``leaked_mass`` is the probability the untruncated normal
    places outside [0, 1]; when ``renormalized`` the density is the normal
    truncated to (0, 1), otherwise the raw normal restricted to it.
    """

    kind: ApproxKind
    target: BetaSpec
    params: dict
    leaked_mass: float = 0.0
    renormalized: bool = True
    metadata: dict = field(default_factory=dict)

    def log_pdf_at_logit(self, u):
        """log q(v) at v = sigmoid(u), stable for |u| in the hundreds."""
        u = np.asarray(u, dtype=float)
        kind = self.kind
        if kind is ApproxKind.TRUE_BETA:
            a, b = self.params["alpha"], self.params["beta"]
            return ((a - 1.0) * log_sigmoid(u) + (b - 1.0) * log_sigmoid(-u)
                    - log_beta_function(a, b))
        jac = log_sigmoid(u) + log_sigmoid(-u)
        if kind is ApproxKind.SIGMOID_GAUSSIAN:
            return normal_logpdf(u, self.params["mu"], self.params["sigma2"]) - jac
        if kind is ApproxKind.CONCRETE:
            tau = self.params["temperature"]
            z = tau * u - self.params["log_location"]
            return math.log(tau) + log_sigmoid(z) + log_sigmoid(-z) - jac
        # Gaussian / Laplace: a normal density in v
        out = normal_logpdf(sigmoid(u), self.params["mean"], self.params["variance"])
        if self.renormalized:
            out = out - math.log1p(-self.leaked_mass)
        return out

    def pdf(self, v):
        v = _check_open_unit(v)
        return _scalar(np.exp(self.log_pdf_at_logit(np.log(v) - np.log1p(-v))))

    @property
    def logit_center_scale(self):
        """Rough location and spread of the density in the logit domain."""
        if self.kind is ApproxKind.SIGMOID_GAUSSIAN:
            return self.params["mu"], math.sqrt(self.params["sigma2"])
        g = match_moments(self.target)
        return g.mu, math.sqrt(g.sigma2)


def _normal_on_unit(kind, target, mean, variance, renormalize):
    sd = math.sqrt(variance)
    inside = std_normal_cdf((1.0 - mean) / sd) - std_normal_cdf(-mean / sd)
    return UnitIntervalDensity(kind, target, {"mean": mean, "variance": variance},
                               leaked_mass=1.0 - inside, renormalized=renormalize)


def build_approximation(target: BetaSpec, kind: ApproxKind, *,
                        temperature: float = CONCRETE_TEMPERATURE,
                        renormalize: bool = True) -> UnitIntervalDensity:
    kind = ApproxKind(kind)
    if kind is ApproxKind.TRUE_BETA:
        return UnitIntervalDensity(kind, target, {"alpha": target.alpha, "beta": target.beta})
    if kind is ApproxKind.SIGMOID_GAUSSIAN:
        g = match_moments(target)
        return UnitIntervalDensity(kind, target, {"mu": g.mu, "sigma2": g.sigma2})
    if kind is ApproxKind.GAUSSIAN:
        return _normal_on_unit(kind, target, target.mean, target.variance, renormalize)
    if kind is ApproxKind.LAPLACE:
        a, b = target.alpha, target.beta
        if not (a > 1.0 and b > 1.0):
            raise LaplaceUndefinedError(f"Beta({a}, {b}) has no interior mode")
        mode = (a - 1.0) / (a + b - 2.0)
        curvature = -(a - 1.0) / mode ** 2 - (b - 1.0) / (1.0 - mode) ** 2
        return _normal_on_unit(kind, target, mode, -1.0 / curvature, renormalize)
    # binary concrete: v = sigmoid((log a + L) / tau), L ~ Logistic(0, 1)
    log_location = math.log(target.alpha / target.beta)
    return UnitIntervalDensity(
        kind, target, {"log_location": log_location, "temperature": temperature},
        metadata={"concrete_fit": f"location=log(alpha/beta), temperature={temperature:g}"})


# ---------------------------------------------------------------------------
# KL divergence


class KLEstimate(NamedTuple):
    value: float
    raw: float
    abs_error: float


def _default_logit_spec(q: UnitIntervalDensity, p: BetaSpec, abs_tol: float):
    # Wide enough that the exponentially small tails contribute < 1e-15:
    # in the logit domain a beta's tail decays like exp(-min(a, b) |u|).
    slowest = min(p.alpha, p.beta, 1.0)
    if q.kind is ApproxKind.TRUE_BETA:
        slowest = min(slowest, q.params["alpha"], q.params["beta"])
    if q.kind is ApproxKind.CONCRETE:
        slowest = min(slowest, q.params["temperature"])
    center, scale = q.logit_center_scale
    half = max(40.0 / slowest, abs(center) + 40.0 * scale)
    return QuadratureSpec(-half, half, abs_tol=abs_tol, max_subdivisions=4000,
                          initial_subdivisions=int(min(400, max(16, 4 * half / scale))))


def kl_divergence(q: UnitIntervalDensity, p: BetaSpec,
                  spec: QuadratureSpec | None = None, abs_tol: float = 1e-10) -> KLEstimate:
    """KL(q || p) = integral over (0, 1) of q log(q / p).

    The integral is taken in the logit domain u = logit(v) (``spec`` limits
    refer to u); when omitted, limits are chosen from the tail decay rates.
    ``value`` is the raw estimate clamped at zero.
    """
    target = build_approximation(p, ApproxKind.TRUE_BETA)
    if spec is None:
        spec = _default_logit_spec(q, p, abs_tol)

    def integrand(u):
        log_q = q.log_pdf_at_logit(u)
        log_p = target.log_pdf_at_logit(u)
        # q(v) dv = q(v) v (1 - v) du
        weight = np.exp(log_q + log_sigmoid(u) + log_sigmoid(-u))
        return np.where(weight > 0.0, weight * (log_q - log_p), 0.0)

    result = quad_gk(integrand, spec)
    return KLEstimate(max(result.value, 0.0), result.value, result.abs_error)


def mass_on_unit_interval(q: UnitIntervalDensity, abs_tol: float = 1e-12) -> float:
    """Integral of q over (0, 1), computed by quadrature in the logit domain."""
    spec = _default_logit_spec(q, q.target, abs_tol)
    return quad_gk(lambda u: np.exp(q.log_pdf_at_logit(u) + log_sigmoid(u) + log_sigmoid(-u)),
                   spec).value


# ---------------------------------------------------------------------------
# comparison table

TABLE_COLUMNS = ("alpha", "beta", "kl_sigmoid_gaussian", "kl_gaussian", "kl_laplace",
                 "kl_concrete", "leaked_mass_gaussian", "leaked_mass_laplace")


@dataclass
class ComparisonRow:
    alpha: float
    beta: float
    kl: dict  # ApproxKind -> KLEstimate, Laplace absent when undefined
    leaked: dict

    @property
    def sigmoid_gaussian_is_best(self):
        best = self.kl[ApproxKind.SIGMOID_GAUSSIAN].value
        return all(best <= est.value for kind, est in self.kl.items()
                   if kind is not ApproxKind.SIGMOID_GAUSSIAN)

    def as_record(self):
        nan = float("nan")

        def kl(kind):
            return self.kl[kind].value if kind in self.kl else nan

        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "kl_sigmoid_gaussian": kl(ApproxKind.SIGMOID_GAUSSIAN),
            "kl_gaussian": kl(ApproxKind.GAUSSIAN),
            "kl_laplace": kl(ApproxKind.LAPLACE),
            "kl_concrete": kl(ApproxKind.CONCRETE),
            "leaked_mass_gaussian": self.leaked.get(ApproxKind.GAUSSIAN, nan),
            "leaked_mass_laplace": self.leaked.get(ApproxKind.LAPLACE, nan),
        }


def compare_approximations(target: BetaSpec, abs_tol: float = 1e-8,
                           temperature: float = CONCRETE_TEMPERATURE) -> ComparisonRow:
    kl, leaked = {}, {}
    for kind in (ApproxKind.SIGMOID_GAUSSIAN,) + COMPETITORS:
        try:
            q = build_approximation(target, kind, temperature=temperature)
        except LaplaceUndefinedError:
            continue
        kl[kind] = kl_divergence(q, target, abs_tol=abs_tol)
        if kind in (ApproxKind.GAUSSIAN, ApproxKind.LAPLACE):
            leaked[kind] = q.leaked_mass
    return ComparisonRow(target.alpha, target.beta, kl, leaked)


def comparison_table(grid=None, abs_tol: float = 1e-8,
                     temperature: float = CONCRETE_TEMPERATURE):
    """One :class:`ComparisonRow` per (alpha, beta) in ``grid``.

    ``grid`` defaults to the full product of {0.5, 1, 2, 5} with itself.
    """
    if grid is None:
        grid = [(a, b) for a in DEFAULT_GRID for b in DEFAULT_GRID]
    return [compare_approximations(BetaSpec(a, b), abs_tol, temperature) for a, b in grid]
