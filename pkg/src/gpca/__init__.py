"""Gaussian-process channel attention in numpy.

Submodules: ``numerics`` (special functions, SPD algebra, quadrature),
``beta_approx`` (beta-distribution approximations and KL study),
``attention`` (forward pass and variants), ``grad`` (hand-written backward
pass and finite differences), ``nn`` (small CNN harness), ``verify``,
``bench`` and ``cli``.
"""

from .attention import (FULL, KernelParams, Variant, VariantSpec, attention_mask, gpca_forward,
                        gram_matrix, mask_forward)
from .grad import finite_diff_check, gpca_backward

__all__ = [
    "FULL", "KernelParams", "Variant", "VariantSpec", "attention_mask", "gpca_forward",
    "gram_matrix", "mask_forward", "finite_diff_check", "gpca_backward",
]
__version__ = "0.1.0"
