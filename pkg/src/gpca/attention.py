"""Gaussian-process channel attention.

Each channel of a feature map (shape ``(C, S)`` with ``S = W * H`` flattened
spatial positions, optionally with leading batch axes) is treated as one GP
input. For channel ``c`` a GP regression on the other ``C - 1`` channels
gives correlation weights ``a_c`` and a posterior variance ``B_c``; the
weights pointing *at* ``c`` are averaged into ``A_c`` and the mask is the
probit-approximated expectation ``sigmoid(A_c / sqrt(1 + pi B_c / 8))``.

The vectorized path never factors the ``C`` leave-one-out systems
separately. With ``M = K + I / delta`` and ``P = M^-1``, block inversion
gives, for every channel at once,

    a_c = -P[c, j] / P[c, c]   (j != c)

so one O(C^3) factorization replaces C of them. :func:`naive_forward`
keeps the literal per-channel loop as an independent reference.
"""

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import QuadratureSpec, integrate, normal_logpdf, sigmoid, spd_inverse, spd_solve

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1e6
PROBIT_LAMBDA = math.sqrt(8.0 / math.pi)
# exp(-700) is the documented underflow cut for the Gaussian kernel term
_EXP_CUTOFF = 700.0


@dataclass(frozen=True)
class KernelParams:
    """Kernel parameters in log space: theta_i = exp(theta_tilde_i).

    Order is (gaussian amplitude, gaussian inverse width, bias, linear).
    A ``-inf`` entry switches the term off exactly.
    """

    theta_tilde: tuple = (0.0, 0.0, 0.0, 0.0)
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        tt = tuple(float(t) for t in self.theta_tilde)
        if len(tt) != 4:
            raise ValueError("theta_tilde needs exactly four entries")
        if any(math.isnan(t) or t == math.inf for t in tt):
            raise ValueError(f"theta_tilde entries must be < +inf, got {tt}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError("delta must be a positive finite precision")
        object.__setattr__(self, "theta_tilde", tt)

    @classmethod
    def from_theta(cls, theta, delta=DEFAULT_DELTA):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0):
            raise ValueError("kernel parameters must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(tuple(np.log(theta)), delta)

    @property
    def theta(self):
        return np.exp(np.asarray(self.theta_tilde))


class Variant(enum.Enum):
    FULL = "full"
    LOCAL = "local"
    MHA = "mha"


@dataclass(frozen=True)
class VariantSpec:
    kind: Variant = Variant.FULL
    group_size: int = 16
    gamma: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Variant(self.kind))
        if self.group_size < 2:
            raise ValueError("MHA groups need at least two channels")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


FULL = VariantSpec()


class DegenerateInputError(ValueError):
    """Fewer than two channels: no leave-one-out posterior exists."""


# ---------------------------------------------------------------------------
# per-channel building blocks


def kernel(xa, xb, theta):
    """Kernel between two flattened channels."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    diff = xa - xb
    arg = theta[1] * float(diff @ diff)
    gauss = theta[0] * math.exp(-arg) if arg <= _EXP_CUTOFF else 0.0
    return gauss + theta[2] + theta[3] * float(xa @ xb)


def _gram_parts(x, theta):
    x = np.asarray(x, dtype=float)
    n = x.shape[-2]
    G = x @ np.swapaxes(x, -1, -2)
    # BLAS does not promise an exactly symmetric x x^T
    G = np.add(G, np.swapaxes(G, -1, -2))
    G *= 0.5
    sq = np.einsum("...ii->...i", G)
    # sum the norms first so D is exactly symmetric too
    D = sq[..., :, None] + sq[..., None, :]
    D -= G
    D -= G
    np.maximum(D, 0.0, out=D)
    idx = np.arange(n)
    D[..., idx, idx] = 0.0
    E = D * -theta[1]
    cut = E < -_EXP_CUTOFF
    with np.errstate(under="ignore"):
        np.exp(E, out=E)
    E[cut] = 0.0
    K = E * theta[0]
    K += G * theta[3]
    K += theta[2]
    return K, G, D, E


def gram_matrix(x, params: KernelParams):
    """K[c, c'] = t0 exp(-t1 |x_c - x_c'|^2) + t2 + t3 <x_c, x_c'>.

    ``x`` has shape ``(..., C, S)``; the result ``(..., C, C)`` is exactly
    symmetric.
    """
    return _gram_parts(x, params.theta)[0]


def channel_correlations(K, c: int, delta: float):
    """Weights a_c = K[c, -c] (K[-c, -c] + I / delta)^-1 via one SPD solve."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if n < 2:
        raise DegenerateInputError("need at least two channels")
    rest = np.r_[0:c, c + 1:n]
    system = K[np.ix_(rest, rest)] + np.eye(n - 1) / delta
    return spd_solve(system, K[rest, c])


def pad_correlations(a_c, c: int, padding: float = 0.0):
    """Insert ``padding`` at position ``c`` so entry j lines up with channel j."""
    return np.insert(np.asarray(a_c, dtype=float), c, padding)


def posterior_mean_var(K, a_rows, padding: float = 0.0):
    """Mean A and variance B of every channel's weight.

    ``a_rows[c]`` is channel c's correlation vector (length C - 1).
    A_c averages the padded rows of the *other* channels at column c, so
    the padding value is never read; B_c = K[c, c] - a_c . K[c, -c].
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if n < 2:
        raise DegenerateInputError("need at least two channels")
    padded = np.array([pad_correlations(a_rows[c], c, padding) for c in range(n)])
    A = np.empty(n)
    B = np.empty(n)
    for c in range(n):
        others = [cp for cp in range(n) if cp != c]
        A[c] = sum(padded[cp, c] for cp in others) / (n - 1)
        B[c] = K[c, c] - float(np.asarray(a_rows[c]) @ K[c, others])
    return A, B


def attention_mask(A, B, probit_lambda: float = PROBIT_LAMBDA):
    """V = sigmoid(A / sqrt(1 + B / lambda^2)); tiny negative B count as 0."""
    B = np.maximum(np.asarray(B, dtype=float), 0.0)
    return sigmoid(np.asarray(A, dtype=float) / np.sqrt(1.0 + B / probit_lambda ** 2))


def sigmoid_gaussian_mean(A: float, B: float, abs_tol: float = 1e-12) -> float:
    """E[sigmoid(u)] for u ~ N(A, B), by quadrature (B = 0 gives sigmoid(A)).

    Reference value for :func:`attention_mask`. With sigmoid(u) - 1/2 =
    tanh(u / 2) / 2 and z = (u - A) / sqrt(B), the integrand is folded onto
    z in [0, 40]; the odd part cancels exactly, so A = 0 gives exactly 1/2.
    """
    A = float(A)
    B = float(B)
    if B < 0 or not math.isfinite(B):
        raise ValueError("variance must be finite and non-negative")
    if B == 0.0:
        return sigmoid(A)
    root = math.sqrt(B)
    spec = QuadratureSpec(0.0, 40.0, abs_tol=abs_tol / 2, initial_subdivisions=16)

    def folded(z):
        odd = np.tanh(0.5 * (A + root * z)) + np.tanh(0.5 * (A - root * z))
        return 0.5 * odd * np.exp(normal_logpdf(z))

    return 0.5 + integrate(folded, spec)


def local_neighborhood_size(C: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Nearest odd integer to log2(C)/gamma + b/gamma (ties go up), at least 1."""
    if C < 2:
        raise DegenerateInputError("need at least two channels")
    t = math.log2(C) / gamma + b / gamma
    below = 2 * math.floor((t - 1.0) / 2.0) + 1
    k = below if t - below < below + 2 - t else below + 2
    return max(k, 1)


# ---------------------------------------------------------------------------
# vectorized forward


@dataclass
class Block:
    """Windows of equal width run through the GP together.

    ``idx[w]`` lists the channels of window w; the masks at window
    positions ``out_pos[w]`` become the outputs for channels ``out_ch[w]``.
    """

    idx: np.ndarray
    out_pos: np.ndarray
    out_ch: np.ndarray


@dataclass
class BlockCache:
    x: np.ndarray
    theta: np.ndarray
    G: np.ndarray
    D: np.ndarray
    E: np.ndarray
    K: np.ndarray
    P: np.ndarray
    diag_p: np.ndarray
    a_tilde: np.ndarray  # padded correlation rows, diagonal holds the padding
    A: np.ndarray
    B_raw: np.ndarray
    scale: np.ndarray  # 1 + B / lambda^2
    V: np.ndarray
    probit_lambda: float


def _full_block(C):
    r = np.arange(C)[None, :]
    return Block(r, r, r)


def plan_windows(C: int, variant: VariantSpec):
    """Split ``C`` channels into the GP windows the variant prescribes."""
    if C < 2:
        raise DegenerateInputError(f"{variant.kind.value} GPCA needs at least two channels, got {C}")
    kind = variant.kind
    if kind is Variant.FULL:
        return [_full_block(C)]
    if kind is Variant.LOCAL:
        width = max(local_neighborhood_size(C, variant.gamma, variant.b), 3)
        if width >= C - 1:
            return [_full_block(C)]
        half = width // 2
        channels = np.arange(C)
        idx = (channels[:, None] + np.arange(-half, half + 1)[None, :]) % C
        return [Block(idx, np.full((C, 1), half), channels[:, None])]
    g = variant.group_size
    if g >= C:
        return [_full_block(C)]
    starts = list(range(0, C, g))
    bounds = [(s, min(s + g, C)) for s in starts]
    if bounds[-1][1] - bounds[-1][0] == 1:
        # a lone trailing channel joins the previous group
        bounds[-2] = (bounds[-2][0], C)
        bounds.pop()
    blocks = {}
    for lo, hi in bounds:
        blocks.setdefault(hi - lo, []).append(np.arange(lo, hi))
    out = []
    for width, groups in blocks.items():
        idx = np.stack(groups)
        pos = np.broadcast_to(np.arange(width), idx.shape)
        out.append(Block(idx, pos, idx))
    return out


def _block_forward(x, theta, delta, padding, probit_lambda):
    n = x.shape[-2]
    K, G, D, E = _gram_parts(x, theta)
    idx = np.arange(n)
    M = K.copy()
    M[..., idx, idx] += 1.0 / delta
    P = spd_inverse(M)
    diag_p = P[..., idx, idx]
    a_tilde = P / diag_p[..., :, None]
    np.negative(a_tilde, out=a_tilde)
    a_tilde[..., idx, idx] = 0.0
    A = a_tilde.sum(axis=-2) / (n - 1)
    B_raw = K[..., idx, idx] - np.einsum("...ij,...ij->...i", a_tilde, K)
    # padding goes in only after A and B are formed: it is never read
    a_tilde[..., idx, idx] = padding
    B = np.maximum(B_raw, 0.0)
    scale = 1.0 + B / probit_lambda ** 2
    V = sigmoid(A / np.sqrt(scale))
    return BlockCache(x, theta, G, D, E, K, P, diag_p, a_tilde, A, B_raw, scale, V,
                      probit_lambda)


@dataclass
class AttentionCache:
    """Everything a backward pass needs, plus per-channel A, B and V."""

    x: np.ndarray
    params: KernelParams
    variant: VariantSpec
    padding: float
    blocks: list  # of (Block, BlockCache)
    A: np.ndarray
    B_raw: np.ndarray
    V: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def B(self):
        return np.maximum(self.B_raw, 0.0)

    def _single_window(self):
        if len(self.blocks) != 1 or self.blocks[0][0].idx.shape[0] != 1:
            raise AttributeError("only defined when one GP window covers all channels")
        return self.blocks[0][1]

    @property
    def K(self):
        return self._single_window().K[..., 0, :, :]

    @property
    def a_tilde(self):
        return self._single_window().a_tilde[..., 0, :, :]

    @property
    def a_rows(self):
        """Correlation rows a_c (length C - 1) of a single-sample, single-window cache."""
        at = self.a_tilde
        if at.ndim != 2:
            raise AttributeError("a_rows is defined for a single sample")
        n = at.shape[0]
        return [np.delete(at[c], c) for c in range(n)]


def mask_forward(x, params: KernelParams, variant: VariantSpec = FULL,
                 padding: float = 0.0, probit_lambda: float = PROBIT_LAMBDA):
    """Attention masks V (shape ``(..., C)``) and the cache to differentiate them."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ValueError("feature map must have shape (..., C, S)")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map contains non-finite values")
    C = x.shape[-2]
    theta = params.theta
    lead = x.shape[:-2]
    V = np.empty(lead + (C,))
    A = np.empty(lead + (C,))
    B_raw = np.empty(lead + (C,))
    blocks = []
    for block in plan_windows(C, variant):
        bc = _block_forward(x[..., block.idx, :], theta, params.delta, padding, probit_lambda)
        win = np.arange(block.idx.shape[0])[:, None]
        V[..., block.out_ch] = bc.V[..., win, block.out_pos]
        A[..., block.out_ch] = bc.A[..., win, block.out_pos]
        B_raw[..., block.out_ch] = bc.B_raw[..., win, block.out_pos]
        blocks.append((block, bc))
    negative = B_raw < 0
    if np.any(negative):
        log.debug("clamped %d negative posterior variances (min %.3g)",
                  int(negative.sum()), float(B_raw.min()))
    cache = AttentionCache(x, params, variant, padding, blocks, A, B_raw, V)
    return V, cache


def gpca_forward(x, params: KernelParams = KernelParams(), variant: VariantSpec = FULL,
                 padding: float = 0.0, probit_lambda: float = PROBIT_LAMBDA):
    """Scale every channel by its GP attention mask: y_c = V_c x_c.

    Returns ``(y, cache)``. ``x`` has shape ``(..., C, S)``; leading axes
    are independent samples, each with its own Gram matrix.
    """
    V, cache = mask_forward(x, params, variant, padding, probit_lambda)
    return V[..., None] * cache.x, cache


def gpca_local_forward(x, params: KernelParams = KernelParams(), gamma: float = 2.0,
                       b: float = 1.0, **kwargs):
    return gpca_forward(x, params, VariantSpec(Variant.LOCAL, gamma=gamma, b=b), **kwargs)


def gpca_mha_forward(x, params: KernelParams = KernelParams(), group_size: int = 16, **kwargs):
    return gpca_forward(x, params, VariantSpec(Variant.MHA, group_size=group_size), **kwargs)


# ---------------------------------------------------------------------------
# references


def naive_forward(x, params: KernelParams = KernelParams(), padding: float = 0.0,
                  probit_lambda: float = PROBIT_LAMBDA):
    """Channel-by-channel loop over the full variant for one ``(C, S)`` sample.

    Builds K entry by entry, solves each leave-one-out system separately,
    then averages and masks. Returns ``(y, V, A, B)``.
    """
    x = np.asarray(x, dtype=float)
    C = x.shape[0]
    if C < 2:
        raise DegenerateInputError("need at least two channels")
    theta = params.theta
    K = np.empty((C, C))
    for c in range(C):
        for cp in range(c, C):
            K[c, cp] = K[cp, c] = kernel(x[c], x[cp], theta)
    a_rows = [channel_correlations(K, c, params.delta) for c in range(C)]
    A, B = posterior_mean_var(K, a_rows, padding)
    V = attention_mask(A, B, probit_lambda)
    y = np.empty_like(x)
    for c in range(C):
        y[c] = V[c] * x[c]
    return y, V, A, B


def feature_space_oracle(x, params: KernelParams, c: int):
    """(a_c, B_c) from the explicit weight-space GP posterior.

    Requires the Gaussian term off (theta_0 = 0) so the kernel has the
    finite feature map phi(x) = [sqrt(theta_2), sqrt(theta_3) x]. With the
    other channels' features stacked as columns of Phi and
    kappa = delta Phi Phi^T + I:

        a_c = delta phi_c^T kappa^-1 Phi,   B_c = phi_c^T kappa^-1 phi_c

    kappa^-1 is applied through the SVD Phi = U diag(s) W^T, since kappa
    itself has condition number ~ delta |Phi|^2.
    """
    theta = params.theta
    if theta[0] != 0.0:
        raise ValueError("feature-space oracle needs theta_0 = 0 (theta_tilde[0] = -inf)")
    x = np.asarray(x, dtype=float)
    C = x.shape[0]
    delta = params.delta
    phi = np.vstack([np.full((1, C), math.sqrt(theta[2])), math.sqrt(theta[3]) * x.T])
    rest = np.r_[0:c, c + 1:C]
    U, s, Wt = np.linalg.svd(phi[:, rest], full_matrices=False)
    phi_c = phi[:, c]
    proj = U.T @ phi_c
    # on range(U) kappa acts as 1 + delta s^2, elsewhere as the identity
    a_c = delta * (proj * s / (1.0 + delta * s * s)) @ Wt
    residual = phi_c - U @ proj
    B_c = float(residual @ residual + np.sum(proj * proj / (1.0 + delta * s * s)))
    return a_c, B_c
