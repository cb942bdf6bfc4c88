"""
Probability distributions: Gamma, Gaussian, matrix normal, Bartlett/singular
Wishart and the generalised singular Wishart.

Densities over Gram matrices are always evaluated through the lower
trapezoidal factor A (G = L A A^T L^T) together with the two Jacobian
corrections, never by re-factorising G. All functions accept plain arrays or
autodiff variables.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeMismatch, SingularLeadingBlock
from .numerics import (LowerTrapezoid, RngStream, SymMatrix, log_multigamma, validate_lower_trapezoid,
                       validate_sym_psd)

logger = logging.getLogger(__name__)

_LOG2 = float(np.log(2.0))
_LOG_2PI = float(np.log(2.0 * np.pi))
CONDITIONAL_VARIANCE_FLOOR = 1e-12


@dataclass
class GammaParams:
    """Gamma(shape alpha, rate beta)."""

    alpha: Any
    beta: Any

    def __post_init__(self):
        if np.any(ad.value_of(self.alpha) <= 0) or np.any(ad.value_of(self.beta) <= 0):
            raise DomainError("Gamma shape and rate must be positive")


def diag_index(p: int, nu: int) -> Tuple[np.ndarray, np.ndarray]:
    m = min(p, nu)
    return np.arange(m), np.arange(m)


def offdiag_index(p: int, nu: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major indices {(i, j): j < i < p, j < min(p, nu)} of the factor."""
    return np.tril_indices(p, -1, min(p, nu))


@dataclass
class GenWishartParams:
    """
    Parameters of the generalised singular Wishart.

    ``alpha``/``beta`` hold one Gamma shape/rate per diagonal entry of A;
    ``mu``/``sigma`` hold one Gaussian mean/std per strictly-lower entry of A,
    in the order of ``offdiag_index``.
    """

    scale_chol: Any
    dof: int
    alpha: Any
    beta: Any
    mu: Any
    sigma: Any

    @property
    def size(self) -> int:
        return ad.value_of(self.scale_chol).shape[0]

    @property
    def rank(self) -> int:
        return min(self.size, self.dof)

    @classmethod
    def default(cls, scale_chol: Any, dof: int) -> "GenWishartParams":
        """Parameters that reproduce the standard Wishart W(L L^T, dof)."""
        p = ad.value_of(scale_chol).shape[0]
        m = min(p, dof)
        n_off = len(offdiag_index(p, dof)[0])
        return cls(scale_chol=scale_chol, dof=dof,
                   alpha=0.5 * (dof - np.arange(m)), beta=np.full(m, 0.5),
                   mu=np.zeros(n_off), sigma=np.ones(n_off))

    def validate(self) -> "GenWishartParams":
        p, m = self.size, self.rank
        n_off = len(offdiag_index(p, self.dof)[0])
        if self.dof < 1:
            raise DomainError(f"Degrees of freedom must be positive, got {self.dof}")
        for name, expected in (("alpha", m), ("beta", m), ("mu", n_off), ("sigma", n_off)):
            if ad.value_of(getattr(self, name)).shape != (expected,):
                raise ShapeMismatch(f"{name} must have shape ({expected},)")
        for name in ("alpha", "beta", "sigma"):
            if np.any(ad.value_of(getattr(self, name)) <= 0):
                raise DomainError(f"{name} must be positive")
        return self

    def stop_gradient(self) -> "GenWishartParams":
        """Same primal values, no gradient into alpha, beta, mu, sigma."""
        return replace(self, alpha=ad.stop_gradient(self.alpha), beta=ad.stop_gradient(self.beta),
                       mu=ad.stop_gradient(self.mu), sigma=ad.stop_gradient(self.sigma))


@dataclass
class MatrixNormalCond:
    """
    Conditional matrix normal MN(mean, diag(row_var), I) of test features.

    Rows are conditionally independent, so only the diagonal of the row
    covariance is kept.
    """

    mean: Any
    row_var: Any

    def sample(self, noise: np.ndarray):
        clamped = int(np.sum(ad.value_of(self.row_var) < CONDITIONAL_VARIANCE_FLOOR))
        if clamped:
            logger.warning("Clamped %d conditional row variance(s) below %.0e (min %.3e)", clamped,
                           CONDITIONAL_VARIANCE_FLOOR, float(np.min(ad.value_of(self.row_var))))
        std = ad.sqrt(ad.clip_min(self.row_var, CONDITIONAL_VARIANCE_FLOOR))
        return self.mean + ad.reshape(std, (-1, 1)) * noise


# ---------------------------------------------------------------------------
# Gamma
# ---------------------------------------------------------------------------

def gamma_logpdf(x: Any, params: GammaParams):
    """
    Gamma log-density alpha log beta - lgamma(alpha) + (alpha - 1) log x - beta x.

    Args:
        x: Positive point(s)
        params: Shape and rate

    Returns:
        Elementwise log density
    """
    if np.any(ad.value_of(x) <= 0):
        raise DomainError("gamma_logpdf is defined for x > 0")
    return ad.gamma_logpdf(x, params.alpha, params.beta)


def gamma_sample_reparam(params: GammaParams, rng: RngStream, size: Optional[int] = None):
    """
    Reparameterised Gamma draw.

    The draw is a deterministic, differentiable function of (alpha, beta)
    given the uniform noise taken from ``rng``: dz/dbeta = -z / beta exactly,
    dz/dalpha by implicit differentiation of the Gamma CDF.
    """
    shape = size if size is not None else np.shape(ad.value_of(params.alpha))
    return ad.gamma_reparam(params.alpha, params.beta, rng.uniform(shape))


# ---------------------------------------------------------------------------
# Bartlett factor and Jacobians
# ---------------------------------------------------------------------------

def bartlett_sample(p: int, nu: int, rng: RngStream) -> LowerTrapezoid:
    """
    Bartlett factor A of a standard (possibly singular) Wishart draw.

    Args:
        p: Number of rows P
        nu: Degrees of freedom

    Returns:
        P x min(P, nu) factor with A_jj^2 ~ Gamma((nu - j + 1) / 2, 1/2)
        and standard normal strictly-lower entries
    """
    if p < 1 or nu < 1:
        raise DomainError(f"bartlett_sample needs P >= 1 and nu >= 1, got P={p}, nu={nu}")
    m = min(p, nu)
    a = np.zeros((p, m))
    a[diag_index(p, nu)] = np.sqrt(rng.chisquare(nu - np.arange(m)))
    rows, cols = offdiag_index(p, nu)
    a[rows, cols] = rng.normal(len(rows))
    return a


def logjac_chol_product(lam: Any):
    """
    log |dG / dLambda| for G = Lambda Lambda^T, Lambda lower trapezoidal.

    sum over the min(P, nu) diagonal entries of log 2 + (P + 1 - i) log Lambda_ii.
    """
    lam_v = ad.value_of(lam)
    p, m = lam_v.shape
    d = ad.diag(lam)
    if np.any(ad.value_of(d) <= 0):
        raise DomainError("logjac_chol_product needs a positive diagonal")
    weights = p - np.arange(m)
    return m * _LOG2 + ad.sum(weights * ad.log(d))


def logjac_left_mult(l: Any, p: int, nu: int):
    """log |dLambda / dA| for Lambda = L A: sum_i min(i, nu) log L_ii."""
    d = ad.diag(l)
    if np.any(ad.value_of(d) <= 0):
        raise DomainError("logjac_left_mult needs a positive diagonal")
    weights = np.minimum(np.arange(1, p + 1), nu)
    return ad.sum(weights * ad.log(d))


def std_singular_wishart_logpdf(z: SymMatrix, nu: int) -> float:
    """
    Closed-form log-density of the standard (Sigma = I) Wishart, singular or not.

    Uses the leading min(nu, p) block of Z, which carries the density on the
    rank-min(nu, p) manifold.
    """
    z = validate_sym_psd(z, "Z")
    p = z.shape[0]
    nt = min(nu, p)
    sign, logdet = np.linalg.slogdet(z[:nt, :nt])
    if sign <= 0:
        raise SingularLeadingBlock(f"Leading {nt}x{nt} block is singular")
    return float(0.5 * nu * (nt - p) * np.log(np.pi)
                 - 0.5 * nu * p * _LOG2
                 - log_multigamma(nt, 0.5 * nu)
                 + 0.5 * (nu - p - 1) * logdet
                 - 0.5 * np.trace(z))


# ---------------------------------------------------------------------------
# Generalised singular Wishart
# ---------------------------------------------------------------------------

def assemble_factor(diagonal: Any, offdiagonal: Any, p: int, nu: int):
    """Lower trapezoidal A from its diagonal and strictly-lower entries."""
    shape = (p, min(p, nu))
    a = ad.embed(diagonal, diag_index(p, nu), shape)
    if len(offdiag_index(p, nu)[0]):
        a = a + ad.embed(offdiagonal, offdiag_index(p, nu), shape)
    return a


def genwishart_sample(params: GenWishartParams, rng: RngStream):
    """
    Draw (G, A) with A_jj^2 ~ Gamma(alpha_j, beta_j), A_ij ~ N(mu_ij, sigma_ij^2)
    and G = L A A^T L^T.
    """
    p, m = params.size, params.rank
    u = rng.uniform(m)
    eps = rng.normal(len(offdiag_index(p, params.dof)[0]))
    diagonal = ad.sqrt(ad.gamma_reparam(params.alpha, params.beta, u))
    offdiagonal = params.mu + params.sigma * eps
    a = assemble_factor(diagonal, offdiagonal, p, params.dof)
    lam = params.scale_chol @ a
    return lam @ ad.transpose(lam), a


def genwishart_factor_logpdf(a: Any, params: GenWishartParams):
    """log Q(A): Gamma on A_jj^2 with the 2 A_jj change of variables, Gaussians below."""
    p = params.size
    d = ad.diag(a)
    if np.any(ad.value_of(d) <= 0):
        raise DomainError("Factor diagonal must be positive")
    log_q = ad.sum(ad.gamma_logpdf(ad.square(d), params.alpha, params.beta)) \
        + ad.sum(ad.log(d)) + params.rank * _LOG2
    rows, cols = offdiag_index(p, params.dof)
    if len(rows):
        log_q = log_q + ad.sum(ad.normal_logpdf(a[rows, cols], params.mu, params.sigma))
    return log_q


def genwishart_logpdf(a: Any, params: GenWishartParams):
    """
    log Q(G) of G = L A A^T L^T, evaluated on the factor A.

    Args:
        a: P x min(P, nu) lower trapezoidal factor
        params: Scale Cholesky, dof and the Bartlett parameters

    Returns:
        log Q(A) - logjac_left_mult(L) - logjac_chol_product(L A)
    """
    a_v = ad.value_of(a) if ad.is_var(a) else validate_lower_trapezoid(a)
    if a_v.shape != (params.size, params.rank):
        raise ShapeMismatch(f"Factor shape {a_v.shape} does not match ({params.size}, {params.rank})")
    lam = params.scale_chol @ a
    return (genwishart_factor_logpdf(a, params)
            - logjac_left_mult(params.scale_chol, params.size, params.dof)
            - logjac_chol_product(lam))


# ---------------------------------------------------------------------------
# Gaussian and conditional matrix normal
# ---------------------------------------------------------------------------

def gaussian_columns_logpdf(f: Any, mean: Any, chol: Any):
    """Sum over columns c of log N(f[:, c]; mean[:, c], chol chol^T)."""
    n, c = ad.value_of(f).shape
    z = ad.tri_solve(chol, f - mean)
    return -0.5 * n * c * _LOG_2PI - c * ad.log_diag_sum(chol) - 0.5 * ad.sum(ad.square(z))


def matnorm_conditional(k_ii_chol: Any, k_it: Any, k_tt_diag: Any, f_i: Any,
                        whitened: bool = False) -> MatrixNormalCond:
    """
    F_t | F_i ~ MN(K_ti K_ii^-1 F_i, K_tt.i, I) with a diagonal K_tt.i.

    Args:
        k_ii_chol: Cholesky of K_ii
        k_it: P_i x P_t cross block
        k_tt_diag: Diagonal of K_tt
        f_i: P_i x nu inducing features, or L^-1 F_i when ``whitened``
    """
    w = ad.tri_solve(k_ii_chol, k_it)
    u = f_i if whitened else ad.tri_solve(k_ii_chol, f_i)
    mean = ad.transpose(w) @ u
    row_var = k_tt_diag - ad.sum(ad.square(w), axis=0)
    return MatrixNormalCond(mean=mean, row_var=row_var)


def partition(k: Any, n_inducing: int):
    """Split a kernel over (inducing, test) points into (K_ii, K_ti, diag K_tt)."""
    k_ii = k[:n_inducing, :n_inducing]
    k_ti = k[n_inducing:, :n_inducing]
    k_tt_diag = ad.diag(k[n_inducing:, n_inducing:])
    return k_ii, k_ti, k_tt_diag


def matnorm_cond_sample(k: Any, f_i: Any, rng: RngStream):
    """
    Sample test features given inducing features under the joint kernel ``k``.

    The first ``f_i.shape[0]`` rows/columns of ``k`` belong to the inducing
    points; each test row is sampled independently.
    """
    n_inducing = ad.value_of(f_i).shape[0]
    k_ii, k_ti, k_tt_diag = partition(k, n_inducing)
    cond = matnorm_conditional(ad.cholesky(k_ii), ad.transpose(k_ti), k_tt_diag, f_i)
    return cond.sample(rng.normal(ad.value_of(cond.mean).shape))
