"""Squared-exponential kernels on Gram matrices and on raw inputs."""

import logging
from dataclasses import dataclass
from typing import Any, Optional, Union

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeMismatch
from .numerics import JITTER, validate_sym_psd

logger = logging.getLogger(__name__)


@dataclass
class KernelConfig:
    """
    Squared-exponential hyperparameters.

    ``ard`` holds one lengthscale per input dimension and is only used by the
    kernel applied directly to inputs; Gram-matrix kernels are isotropic.
    """

    variance: Any = 1.0
    lengthscale: Any = 1.0
    ard: Optional[Any] = None

    def __post_init__(self):
        for name in ("variance", "lengthscale", "ard"):
            value = getattr(self, name)
            if value is not None and np.any(ad.value_of(value) <= 0):
                raise DomainError(f"Kernel {name} must be positive")


@dataclass
class BlockMatrix:
    """
    The blocks of a symmetric matrix over (inducing, test) points that the
    model propagates: the inducing block, the test-inducing cross block and
    the diagonal of the test block.
    """

    ii: Any
    ti: Any
    tt_diag: Any

    @property
    def n_inducing(self) -> int:
        return ad.value_of(self.ii).shape[0]

    @property
    def n_points(self) -> int:
        return ad.value_of(self.ti).shape[0]


@dataclass
class InputBlocks:
    """Raw inputs split into inducing inputs and test/train inputs."""

    inducing: Any
    points: Any

    def gram(self) -> BlockMatrix:
        """G_0 = X X^T / D over the blocks."""
        d = ad.value_of(self.inducing).shape[1]
        xi, xt = self.inducing, self.points
        return BlockMatrix(ii=(xi @ ad.transpose(xi)) / d,
                           ti=(xt @ ad.transpose(xi)) / d,
                           tt_diag=ad.sum(ad.square(xt), axis=1) / d)


Source = Union[BlockMatrix, InputBlocks]


def _column(v):
    return ad.reshape(v, (-1, 1))


def _row(v):
    return ad.reshape(v, (1, -1))


def gram_to_sqdist(g: Any):
    """
    Squared distances recovered from a Gram matrix.

    R_ij = G_ii - 2 G_ij + G_jj, with round-off negatives clamped to zero.
    Plain arrays are checked to be symmetric PSD first.
    """
    if not ad.is_var(g):
        g = validate_sym_psd(g, "Gram matrix")
    d = ad.diag(g)
    return ad.clip_min(_column(d) + _row(d) - 2.0 * g, 0.0)


def cross_sqdist(diag_a: Any, diag_b: Any, g_ab: Any):
    """Squared distances between two point sets from their Gram blocks."""
    return ad.clip_min(_column(diag_a) + _row(diag_b) - 2.0 * g_ab, 0.0)


def sqexp(r: Any, cfg: KernelConfig):
    """k(R) = s^2 exp(-R / (2 l^2))."""
    return cfg.variance * ad.exp(-0.5 * r / ad.square(cfg.lengthscale))


def jitter(cfg: KernelConfig):
    """Diagonal jitter of a kernel whose diagonal is the constant s^2."""
    return JITTER * cfg.variance


def sqexp_from_gram(g: Any, cfg: KernelConfig):
    """
    Isotropic squared-exponential kernel of a Gram matrix.

    Args:
        g: Gram matrix G = F F^T / nu
        cfg: Kernel hyperparameters

    Returns:
        K with K_ij = s^2 exp(-R_ij / (2 l^2)) and jitter on the diagonal
    """
    n = ad.value_of(g).shape[0]
    return sqexp(gram_to_sqdist(g), cfg) + jitter(cfg) * np.eye(n)


def sqexp_from_features(f: Any, cfg: KernelConfig):
    """Squared-exponential kernel of feature rows, with distances scaled by 1/nu."""
    f_v = ad.value_of(f)
    nu = f_v.shape[1]
    sq = ad.sum(ad.square(f), axis=1)
    r = ad.clip_min(_column(sq) + _row(sq) - 2.0 * (f @ ad.transpose(f)), 0.0) / nu
    return sqexp(r, cfg) + jitter(cfg) * np.eye(f_v.shape[0])


def _ard_scaled(x: Any, cfg: KernelConfig):
    if cfg.ard is None:
        raise ShapeMismatch("ARD kernel needs per-dimension lengthscales")
    ard_v = ad.value_of(cfg.ard)
    if ad.value_of(x).ndim != 2 or ad.value_of(x).shape[1] != ard_v.shape[0]:
        raise ShapeMismatch(f"Inputs of shape {ad.value_of(x).shape} do not match "
                            f"{ard_v.shape[0]} ARD lengthscales")
    return x / _row(cfg.ard)


def sqexp_ard_cross(x_a: Any, x_b: Any, cfg: KernelConfig):
    """K_ab = s^2 exp(-1/2 sum_d (x_ad - x_bd)^2 / l_d^2), no jitter."""
    za, zb = _ard_scaled(x_a, cfg), _ard_scaled(x_b, cfg)
    r = cross_sqdist(ad.sum(ad.square(za), axis=1), ad.sum(ad.square(zb), axis=1),
                     za @ ad.transpose(zb))
    return cfg.variance * ad.exp(-0.5 * r)


def sqexp_ard_from_inputs(x: Any, cfg: KernelConfig):
    """
    ARD squared-exponential kernel on raw inputs.

    Args:
        x: P x D inputs
        cfg: Hyperparameters with D ARD lengthscales

    Returns:
        P x P kernel with jitter on the diagonal
    """
    z = _ard_scaled(x, cfg)
    n = ad.value_of(z).shape[0]
    return cfg.variance * ad.exp(-0.5 * gram_to_sqdist(z @ ad.transpose(z))) + jitter(cfg) * np.eye(n)


def kernel_blocks(source: Source, cfg: KernelConfig) -> BlockMatrix:
    """
    Kernel blocks (K_ii, K_ti, diag K_tt) for the next layer.

    Raw inputs use the ARD kernel when ``cfg.ard`` is set and the isotropic
    kernel of G_0 = X X^T / D otherwise; Gram blocks always use the
    isotropic kernel.
    """
    if isinstance(source, InputBlocks) and cfg.ard is not None:
        k_ii = sqexp_ard_from_inputs(source.inducing, cfg)
        k_ti = sqexp_ard_cross(source.points, source.inducing, cfg)
        n_t = ad.value_of(source.points).shape[0]
    else:
        g = source.gram() if isinstance(source, InputBlocks) else source
        k_ii = sqexp_from_gram(g.ii, cfg)
        r_ti = cross_sqdist(g.tt_diag, ad.diag(g.ii), g.ti)
        k_ti = sqexp(r_ti, cfg)
        n_t = ad.value_of(g.ti).shape[0]
    k_tt_diag = (cfg.variance + jitter(cfg)) * np.ones(n_t)
    return BlockMatrix(ii=k_ii, ti=k_ti, tt_diag=k_tt_diag)
