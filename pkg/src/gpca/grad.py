"""Reverse-mode gradients of the GP attention forward pass.

The graph is small and fixed, so every adjoint is written out by hand:
mask -> (A, B) -> padded correlation rows -> P = (K + I/delta)^-1 -> K ->
(x, theta_tilde). Through the inverse, dM = -P dP P; theta_i = exp(theta_tilde_i)
contributes the factor theta_i.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionCache, BlockCache


@dataclass
class GpcaGradients:
    d_input: np.ndarray
    d_theta_tilde: np.ndarray


def _block_backward(bc: BlockCache, dV):
    """Adjoints of one window stack: returns (d_x, d_theta) for dV of shape (..., W, n)."""
    n = bc.V.shape[-1]
    idx = np.arange(n)
    off = ~np.eye(n, dtype=bool)
    lam2 = bc.probit_lambda ** 2

    dt = dV * bc.V * (1.0 - bc.V)
    inv_root = 1.0 / np.sqrt(bc.scale)
    dA = dt * inv_root
    d_scale = -0.5 * dt * bc.A * inv_root / bc.scale
    # the clamp max(B, 0) passes no gradient where it is active
    dB = np.where(bc.B_raw >= 0.0, d_scale / lam2, 0.0)

    a_read = np.where(off, bc.a_tilde, 0.0)
    dK = -dB[..., :, None] * a_read
    dK[..., idx, idx] += dB
    da = np.where(off, dA[..., None, :] / (n - 1) - dB[..., :, None] * bc.K, 0.0)

    # a[c, j] = -P[c, j] / P[c, c]
    d = bc.diag_p
    dP = -da / d[..., :, None]
    dP[..., idx, idx] += (da * bc.P).sum(axis=-1) / (d * d)
    dK -= bc.P @ dP @ bc.P

    theta = bc.theta
    E, D, G = bc.E, bc.D, bc.G
    # per-sample sums over windows and matrix entries
    axes = (-3, -2, -1)
    d_theta = np.stack([
        np.sum(dK * E, axis=axes),
        -theta[0] * np.sum(dK * D * E, axis=axes),
        np.sum(dK, axis=axes),
        np.sum(dK * G, axis=axes),
    ], axis=-1)
    dD = -theta[0] * theta[1] * dK * E
    dD[..., idx, idx] = 0.0
    dG = theta[3] * dK - 2.0 * dD
    d_sq = dD.sum(axis=-1) + dD.sum(axis=-2)
    x = bc.x
    dx = (dG + np.swapaxes(dG, -1, -2)) @ x + 2.0 * d_sq[..., None] * x
    return dx, d_theta


def mask_backward(cache: AttentionCache, dV, through_params: bool = True,
                  reduce: bool = True) -> GpcaGradients:
    """Pull an adjoint of the masks V (shape ``(..., C)``) back to x and theta_tilde.

    With ``reduce=False`` the theta_tilde gradient keeps one row per sample
    (shape ``(..., 4)``) so callers can sum a batch in an order they control.
    """
    dV = np.asarray(dV, dtype=float)
    if dV.shape != cache.V.shape:
        raise ValueError(f"mask adjoint has shape {dV.shape}, cache expects {cache.V.shape}")
    x = cache.x
    dx = np.zeros_like(x)
    d_theta = np.zeros(x.shape[:-2] + (4,))
    # windows of one block may share channels (Local variant): scatter with add.at
    dx_channels_first = np.moveaxis(dx, -2, 0)
    for block, bc in cache.blocks:
        win = np.arange(block.idx.shape[0])[:, None]
        dV_block = np.zeros_like(bc.V)
        dV_block[..., win, block.out_pos] = dV[..., block.out_ch]
        dxw, dth = _block_backward(bc, dV_block)
        d_theta += dth
        dxw = dxw.reshape(dxw.shape[:-3] + (-1, dxw.shape[-1]))
        np.add.at(dx_channels_first, block.idx.ravel(), np.moveaxis(dxw, -2, 0))
    if reduce:
        d_theta = d_theta.reshape(-1, 4).sum(axis=0)
    theta = cache.params.theta
    if through_params:
        # 0 * inf guards for switched-off terms
        d_theta_tilde = np.where(theta == 0.0, 0.0, d_theta * theta)
    else:
        d_theta_tilde = np.zeros_like(d_theta)
    return GpcaGradients(dx, d_theta_tilde)


def gpca_backward(cache: AttentionCache, d_output, through_mask: bool = True,
                  through_params: bool = True, reduce: bool = True) -> GpcaGradients:
    """Gradients of a scalar loss w.r.t. the input and theta_tilde.

    ``d_output`` is dLoss/dy with the shape of the forward output. Both
    paths of y_c = V_c x_c are followed: the direct scaling and the
    dependence of V on x through the Gram matrix. ``through_mask=False``
    severs the second one (V treated as a constant).
    """
    d_output = np.asarray(d_output, dtype=float)
    if d_output.shape != cache.x.shape:
        raise ValueError(f"output adjoint has shape {d_output.shape}, cache expects {cache.x.shape}")
    direct = cache.V[..., None] * d_output
    if not through_mask:
        shape = (4,) if reduce else cache.x.shape[:-2] + (4,)
        return GpcaGradients(direct, np.zeros(shape))
    dV = np.einsum("...cs,...cs->...c", d_output, cache.x)
    grads = mask_backward(cache, dV, through_params, reduce)
    grads.d_input += direct
    return grads


# ---------------------------------------------------------------------------
# finite differences

DEFAULT_STEP = 1e-5


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_coordinate: tuple
    step: float
    numeric: np.ndarray
    analytic: np.ndarray | None = None


def numeric_gradient(f: Callable[[np.ndarray], float], point, step: float = DEFAULT_STEP):
    """Central differences with per-coordinate step ``step * (1 + |x_i|)``."""
    if not step > 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=float)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * (1.0 + abs(orig))
        flat[i] = orig + h
        up = f(point)
        flat[i] = orig - h
        down = f(point)
        flat[i] = orig
        # divide by the step actually taken after rounding
        gflat[i] = (up - down) / ((orig + h) - (orig - h))
    return grad


def relative_errors(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[np.ndarray], float], point, analytic=None,
                      step: float = DEFAULT_STEP) -> FiniteDiffReport:
    """Compare ``analytic`` with central differences of ``f`` at ``point``.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). Without
    an analytic gradient the report only carries the numeric one.
    """
    numeric = numeric_gradient(f, point, step)
    if analytic is None:
        return FiniteDiffReport(float("nan"), (), step, numeric)
    analytic = np.asarray(analytic, dtype=float).reshape(numeric.shape)
    err = relative_errors(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return FiniteDiffReport(float(err.max()) if err.size else 0.0, tuple(int(i) for i in worst),
                            step, numeric, analytic)
