"""Low-level numerical routines shared by the rest of the package.

Special functions (digamma, trigamma, sigmoid, standard normal CDF), SPD
solves and inverses, and a 1-D adaptive Gauss-Kronrod integrator. Matrices
and vectors are plain float64 numpy arrays.
"""

import heapq
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import linalg, special
from scipy.linalg import lapack


class DomainError(ValueError):
    """Argument outside the domain of a function."""


class NotSPDError(np.linalg.LinAlgError):
    """Matrix failed a symmetric-positive-definite factorization."""


class NonConvergenceError(RuntimeError):
    """Adaptive quadrature ran out of subdivisions before meeting tolerance."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# special functions

# B_{2k} / (2k) for k = 1..8, the asymptotic digamma series coefficients
_DIGAMMA_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)

# Bernoulli numbers B_2 .. B_16 for the trigamma series
_TRIGAMMA_ASYMPTOTIC = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)

_SHIFT = 10.0


def _check_positive(x, name):
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise DomainError(f"{name} requires a finite x > 0, got {x!r}")
    return x


def digamma(x: float) -> float:
    """psi(x) = d/dx log Gamma(x) for x > 0.

    Shifts the argument above 10 with psi(x) = psi(x + 1) - 1/x, then sums
    the Bernoulli asymptotic series.
    """
    x = _check_positive(x, "digamma")
    shifts = []
    while x < _SHIFT:
        shifts.append(x)
        x += 1.0
    r2 = 1.0 / (x * x)
    series = 0.0
    for coef in reversed(_DIGAMMA_ASYMPTOTIC):
        series = series * r2 + coef
    value = math.log(x) - 0.5 / x - series * r2
    # smallest correction last
    for s in reversed(shifts):
        value -= 1.0 / s
    return value


def trigamma(x: float) -> float:
    """psi_1(x) = d^2/dx^2 log Gamma(x) for x > 0."""
    x = _check_positive(x, "trigamma")
    shifts = []
    while x < _SHIFT:
        shifts.append(x)
        x += 1.0
    r = 1.0 / x
    r2 = r * r
    series = 0.0
    for coef in reversed(_TRIGAMMA_ASYMPTOTIC):
        series = series * r2 + coef
    value = r + 0.5 * r2 + series * r2 * r
    for s in reversed(shifts):
        value += 1.0 / (s * s)
    return value


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), overflow-free for any float."""
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    """log(sigmoid(x)) without underflow."""
    x = np.asarray(x, dtype=float)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def logit(v):
    v = np.asarray(v, dtype=float)
    out = np.log(v) - np.log1p(-v)
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x):
    """Phi(x) = (1 + erf(x / sqrt 2)) / 2, evaluated through erfc for tails."""
    out = 0.5 * special.erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(out) if np.ndim(out) == 0 else out


def normal_logpdf(x, mu=0.0, sigma2=1.0):
    x = np.asarray(x, dtype=float)
    return -0.5 * (x - mu) ** 2 / sigma2 - 0.5 * math.log(2.0 * math.pi * sigma2)


# ---------------------------------------------------------------------------
# SPD linear algebra


def _check_symmetric(A, rtol=1e-10):
    scale = max(float(np.max(np.abs(A))), np.finfo(float).tiny)
    if float(np.max(np.abs(A - np.swapaxes(A, -1, -2)))) > rtol * scale:
        raise NotSPDError("matrix is not symmetric")


def spd_solve(A, b):
    """Solve A x = b for symmetric positive definite A by Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides. Raises
    ``NotSPDError`` when the factorization meets a non-positive pivot.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    _check_symmetric(A)
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(str(exc)) from exc
    return linalg.cho_solve(factor, b, check_finite=False)


def spd_inverse(M):
    """Inverse of an SPD matrix or of a stack of them, shape (..., n, n).

    The result is exactly symmetric.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if M.ndim == 2:
        return _spd_inverse_2d(M)
    if n >= _LOOP_MIN_SIZE:
        # LAPACK per matrix beats numpy's batched LU once the matrices are large
        flat = M.reshape((-1, n, n))
        return np.stack([_spd_inverse_2d(m) for m in flat]).reshape(M.shape)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(str(exc)) from exc
    P = np.linalg.inv(M)
    return 0.5 * (P + np.swapaxes(P, -1, -2))


_LOOP_MIN_SIZE = 32


def _spd_inverse_2d(M):
    n = M.shape[-1]
    chol, info = lapack.dpotrf(M, lower=1, clean=0)
    if info != 0:
        raise NotSPDError(f"non-positive pivot at position {info}")
    P, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise NotSPDError(f"singular factor at position {info}")
    return np.where(_lower_mask(n), P, P.T)


_LOWER_MASKS = {}


def _lower_mask(n):
    mask = _LOWER_MASKS.get(n)
    if mask is None:
        mask = _LOWER_MASKS[n] = np.tri(n, dtype=bool)
    return mask


# ---------------------------------------------------------------------------
# adaptive Gauss-Kronrod quadrature

# 15-point Kronrod abscissae on [-1, 1] (non-negative half) and weights;
# the 7-point Gauss rule uses the odd-indexed abscissae.
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], _WGK[::-1]])
_GAUSS_W = np.zeros(15)
_GAUSS_W[1:7:2] = _WG[:3]
_GAUSS_W[7] = _WG[3]
_GAUSS_W[9:15:2] = _WG[2::-1]


@dataclass(frozen=True)
class QuadratureSpec:
    lower: float
    upper: float
    abs_tol: float = 1e-10
    max_subdivisions: int = 2000
    initial_subdivisions: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("integration limits must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")
        if self.initial_subdivisions < 1 or self.max_subdivisions < self.initial_subdivisions:
            raise ValueError("bad subdivision counts")


class QuadResult(NamedTuple):
    value: float
    abs_error: float
    intervals: int
    converged: bool


def _gk15(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    fx = np.asarray(f(mid + half * _NODES), dtype=float)
    if fx.shape != _NODES.shape:
        raise ValueError("integrand must map an array of abscissae to an array of the same shape")
    if not np.all(np.isfinite(fx)):
        raise FloatingPointError(f"integrand not finite on [{a}, {b}]")
    kronrod = half * float(fx @ _KRONROD_W)
    gauss = half * float(fx @ _GAUSS_W)
    return kronrod, abs(kronrod - gauss)


def quad_gk(f: Callable[[np.ndarray], np.ndarray], spec: QuadratureSpec,
            raise_on_failure: bool = True) -> QuadResult:
    """Globally adaptive 7/15-point Gauss-Kronrod quadrature.

    ``f`` receives a 1-D array of abscissae and must return values at each.
    Only interior nodes are evaluated, so integrable endpoint singularities
    are tolerated. The interval with the largest error estimate is bisected
    until the summed estimate drops below ``spec.abs_tol``.
    """
    edges = np.linspace(spec.lower, spec.upper, spec.initial_subdivisions + 1)
    heap = []
    total = 0.0
    err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        value, e = _gk15(f, a, b)
        total += value
        err += e
        heapq.heappush(heap, (-e, a, b, value))
    while err > spec.abs_tol and len(heap) < spec.max_subdivisions:
        neg_e, a, b, value = heapq.heappop(heap)
        m = 0.5 * (a + b)
        if not a < m < b:
            break
        v1, e1 = _gk15(f, a, m)
        v2, e2 = _gk15(f, m, b)
        total += v1 + v2 - value
        err += e1 + e2 + neg_e
        heapq.heappush(heap, (-e1, a, m, v1))
        heapq.heappush(heap, (-e2, m, b, v2))
    # re-sum to shed the drift of the running totals
    total = math.fsum(item[3] for item in heap)
    err = math.fsum(-item[0] for item in heap)
    result = QuadResult(total, err, len(heap), err <= spec.abs_tol)
    if not result.converged and raise_on_failure:
        raise NonConvergenceError(
            f"error estimate {err:.3g} above tolerance {spec.abs_tol:.3g} "
            f"after {len(heap)} subintervals", result)
    return result


def integrate(f, spec: QuadratureSpec) -> float:
    return quad_gk(f, spec).value
