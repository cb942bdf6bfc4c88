"""
Executable checks of the mathematical identities the model relies on.

Each check returns a measured error (or a p-value) that is compared with a
fixed tolerance. Suites group the checks; ``all`` is their union. Monte Carlo
checks take a ``draws`` count, with full-size defaults that callers can lower.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import integrate, optimize, stats

from . import autodiff as ad
from . import numerics
from .errors import DomainError
from .inference import elbo_gradcheck
from .kernel import BlockMatrix, KernelConfig
from .matdist import (GammaParams, GenWishartParams, bartlett_sample, diag_index,
                      gamma_sample_reparam, genwishart_logpdf, genwishart_sample,
                      logjac_chol_product, logjac_left_mult, matnorm_conditional, offdiag_index,
                      std_singular_wishart_logpdf)
from .model import (DeepWishartProcess, LayerParams, ModelConfig, dgp_prior_sample,
                    dwp_prior_sample, sample_wishart_layer)
from .numerics import RngStream

logger = logging.getLogger(__name__)

SUITES = ("numerics", "jacobians", "density", "invariance", "gradients", "prior-equiv",
          "moments", "complexity")


@dataclass
class CheckResult:
    name: str
    suite: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


@dataclass
class Check:
    name: str
    suite: str
    fn: Callable[[RngStream, int], float]
    tolerance: float
    draws: int = 0
    # "max": measured <= tolerance; "min": measured >= tolerance (p-values)
    mode: str = "max"


CHECKS: List[Check] = []


def check(suite: str, tolerance: float, draws: int = 0, mode: str = "max"):
    def register(fn):
        CHECKS.append(Check(f"{suite}.{fn.__name__}", suite, fn, tolerance, draws, mode))
        return fn
    return register


def _random_lower(rng: RngStream, n: int, m: Optional[int] = None) -> np.ndarray:
    """Well-conditioned lower trapezoid with a positive diagonal."""
    m = n if m is None else m
    a = np.tril(rng.normal((n, m)) * 0.5)
    a[diag_index(n, m)] = 1.0 + rng.uniform(m)
    return a


def _trapezoid_coords(p: int, m: int):
    return np.tril_indices(p, 0, m)


def _numeric_logdet(fn: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, p: int, m: int,
                    h: float = 1e-6) -> float:
    """log |det| of the Jacobian of a trapezoid-to-trapezoid map by central differences."""
    coords = _trapezoid_coords(p, m)
    n = len(coords[0])
    jac = np.empty((n, n))
    for k in range(n):
        up, down = x0.copy(), x0.copy()
        up[coords[0][k], coords[1][k]] += h
        down[coords[0][k], coords[1][k]] -= h
        jac[:, k] = (fn(up)[coords] - fn(down)[coords]) / (2.0 * h)
    return float(np.linalg.slogdet(jac)[1])


def _zscore(a: np.ndarray, b: np.ndarray) -> float:
    """Largest |mean difference| / SE over the columns of two sample matrices."""
    se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    return float(np.max(np.abs(a.mean(axis=0) - b.mean(axis=0)) / np.maximum(se, 1e-300)))


def _random_pd(rng: RngStream, n: int) -> np.ndarray:
    l = _random_lower(rng, n)
    return l @ l.T


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

@check("numerics", 1e-8)
def cholesky_roundtrip(rng: RngStream, draws: int) -> float:
    worst = 0.0
    for seed in range(100):
        r = rng.split(seed)
        l = _random_lower(r, 1 + seed % 8)
        worst = max(worst, float(np.max(np.abs(numerics.cholesky(l @ l.T) - l))))
    return worst


@check("numerics", 1e-9)
def tri_solve_roundtrip(rng: RngStream, draws: int) -> float:
    worst = 0.0
    for seed in range(100):
        r = rng.split(seed)
        n = 1 + seed % 8
        l, x = _random_lower(r, n), r.normal((n, 3))
        worst = max(worst, float(np.max(np.abs(numerics.tri_solve(l, l @ x) - x))))
    return worst


@check("numerics", 1e-10)
def reg_inc_gamma_monotone(rng: RngStream, draws: int) -> float:
    """Largest decrease along x grids plus the distance from the 0 and 1 limits."""
    worst = 0.0
    for a in 0.1 + 10.0 * rng.uniform(20):
        grid = np.sort(a * 20.0 * rng.uniform(200))
        values = numerics.reg_inc_gamma(a, grid)
        worst = max(worst, float(np.max(-np.diff(values), initial=0.0)),
                    abs(numerics.reg_inc_gamma(a, 0.0)), abs(1.0 - numerics.reg_inc_gamma(a, 1e6 * a)))
    return worst


@check("numerics", 1e-12)
def lgamma_reference(rng: RngStream, draws: int) -> float:
    cases = [(1.0, 0.0), (0.5, 0.5 * np.log(np.pi)), (5.0, np.log(24.0))]
    return max(abs(numerics.lgamma(x) - ref) for x, ref in cases)


# ---------------------------------------------------------------------------
# jacobians
# ---------------------------------------------------------------------------

@check("jacobians", 1e-5)
def chol_product(rng: RngStream, draws: int) -> float:
    worst = 0.0
    for i in range(50):
        r = rng.split(i)
        p = 1 + i % 4
        nu = 1 + (i // 4) % 5
        m = min(p, nu)
        lam = _random_lower(r, p, m)
        numeric = _numeric_logdet(lambda x: x @ x.T, lam, p, m)
        analytic = float(logjac_chol_product(lam))
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1.0))
    return worst


@check("jacobians", 1e-5)
def left_mult(rng: RngStream, draws: int) -> float:
    worst = 0.0
    for i in range(50):
        r = rng.split(i)
        p = 1 + i % 4
        nu = 1 + (i // 4) % 5
        m = min(p, nu)
        l, a = _random_lower(r, p), _random_lower(r, p, m)
        numeric = _numeric_logdet(lambda x: l @ x, a, p, m)
        analytic = float(logjac_left_mult(l, p, nu))
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1.0))
    return worst


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------

@check("density", 1e-8)
def bartlett_matches_closed_form(rng: RngStream, draws: int) -> float:
    """Default-parameter generalised Wishart against the closed-form singular Wishart, P, nu <= 5."""
    worst = 0.0
    for p in range(1, 6):
        for nu in range(1, 6):
            a = bartlett_sample(p, nu, rng.split(10 * p + nu))
            ours = float(genwishart_logpdf(a, GenWishartParams.default(np.eye(p), nu)))
            ref = std_singular_wishart_logpdf(a @ a.T, nu)
            worst = max(worst, abs(ours - ref))
    return worst


@check("density", 1e-8)
def full_rank_general_scale(rng: RngStream, draws: int) -> float:
    worst = 0.0
    for i, (p, nu) in enumerate([(2, 2), (2, 4), (3, 3), (3, 5), (4, 6)]):
        r = rng.split(i)
        sigma = _random_pd(r, p)
        l = numerics.cholesky(sigma)
        a = bartlett_sample(p, nu, r)
        lam = l @ a
        ours = float(genwishart_logpdf(a, GenWishartParams.default(l, nu)))
        ref = float(stats.wishart.logpdf(lam @ lam.T, df=nu, scale=sigma))
        worst = max(worst, abs(ours - ref) / max(1.0, abs(ref)))
    return worst


@check("density", 1e-6)
def one_dimensional_normalisation(rng: RngStream, draws: int) -> float:
    """exp(log Q) integrates to 1 for P = 1 with non-default Gamma parameters."""
    params = GenWishartParams(scale_chol=np.array([[1.3]]), dof=2, alpha=np.array([1.7]),
                              beta=np.array([0.8]), mu=np.zeros(0), sigma=np.ones(0))

    def density(g):
        a = np.array([[np.sqrt(g) / 1.3]])
        return np.exp(float(genwishart_logpdf(a, params)))

    total, _ = integrate.quad(density, 0.0, np.inf, limit=200)
    return abs(total - 1.0)


@check("density", 3.0, draws=100_000)
def importance_normaliser(rng: RngStream, draws: int) -> float:
    """E_Q[W(G) / Q(G)] = 1 for random non-default Q; returns |estimate - 1| / SE."""
    p, nu = 3, 2
    l = numerics.cholesky(_random_pd(rng.split(0), p))
    prior = GenWishartParams.default(l, nu)
    n_off = len(offdiag_index(p, nu)[0])
    q = GenWishartParams(scale_chol=l, dof=nu, alpha=0.9 * prior.alpha, beta=np.full(2, 0.4),
                         mu=0.1 * rng.split(1).normal(n_off), sigma=np.full(n_off, 1.3))
    sample_rng = rng.split(2)
    weights = np.empty(draws)
    for i in range(draws):
        _, a = genwishart_sample(q, sample_rng)
        weights[i] = np.exp(float(genwishart_logpdf(a, prior)) - float(genwishart_logpdf(a, q)))
    se = weights.std(ddof=1) / np.sqrt(draws)
    return float(abs(weights.mean() - 1.0) / se)


# ---------------------------------------------------------------------------
# invariance
# ---------------------------------------------------------------------------

def _small_kernels(depth: int, d: int, ard: bool = True) -> List[KernelConfig]:
    first = KernelConfig(variance=1.0, lengthscale=1.0, ard=np.full(d, 1.5) if ard else None)
    return [first] + [KernelConfig(variance=1.0, lengthscale=1.2) for _ in range(depth)]


@check("invariance", 1e-10)
def unitary_gram(rng: RngStream, draws: int) -> float:
    """Right-multiplying features by an orthogonal matrix leaves every Gram matrix unchanged."""
    x = rng.split(0).normal((5, 2))
    widths, kernels = [3, 3], _small_kernels(2, 2)
    rotations = rng.split(1)
    plain = dgp_prior_sample(x, widths, kernels, rng.split(2))
    rotated = dgp_prior_sample(x, widths, kernels, rng.split(2),
                               feature_transform=lambda layer, f: f @ rotations.orthogonal(f.shape[1]))
    return max(float(np.max(np.abs(a - b))) for a, b in zip(plain.grams, rotated.grams))


@check("invariance", 5.0, draws=100_000)
def inducing_factor_choice(rng: RngStream, draws: int) -> float:
    """Moments of G_ti and G_tt do not depend on which factor F_i of G_ii is used."""
    p_i, p_t, nu = 3, 2, 2
    k = _random_pd(rng.split(0), p_i + p_t) / nu
    chol_ii = numerics.cholesky(k[:p_i, :p_i])
    f_i = chol_ii @ bartlett_sample(p_i, nu, rng.split(1))
    factors = [f_i, f_i @ rng.split(2).orthogonal(nu)]
    stats_per_factor = []
    for j, f in enumerate(factors):
        cond = matnorm_conditional(chol_ii, k[:p_i, p_i:], np.diag(k[p_i:, p_i:]), f)
        noise = rng.split(3 + j).normal((draws, p_t, nu))
        f_t = cond.mean[None] + np.sqrt(np.maximum(cond.row_var, 0.0))[None, :, None] * noise
        g_ti = f_t @ f.T
        g_tt = np.einsum("npk,nqk->npq", f_t, f_t)
        flat = np.concatenate([g_ti.reshape(draws, -1), g_tt.reshape(draws, -1)], axis=1)
        stats_per_factor.append(np.concatenate([flat, flat ** 2], axis=1))
    return _zscore(*stats_per_factor)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _primitive_cases(rng: RngStream):
    pd = _random_pd(rng.split(0), 4)
    l = numerics.cholesky(pd)
    pos = 0.5 + rng.split(1).uniform((3, 3))
    mat = rng.split(2).normal((3, 3))
    rhs = rng.split(3).normal((4, 2))
    return [
        (lambda x: ad.sum(ad.exp(x)), mat),
        (lambda x: ad.sum(ad.log(x)), pos),
        (lambda x: ad.sum(ad.square(x)), mat),
        (lambda x: ad.sum(ad.sqrt(x)), pos),
        (lambda x: ad.sum(ad.softplus(x)), mat),
        (lambda x: ad.sum(ad.sigmoid(x)), mat),
        (lambda x: ad.trace(x @ ad.transpose(x)), mat),
        (lambda x: ad.sum(ad.sum(x, axis=0) * np.arange(1.0, 4.0)), mat),
        (lambda x: ad.trace(ad.cholesky(x)), pd),
        (lambda x: ad.sum(ad.square(ad.cholesky(x))), pd),
        (lambda x: ad.sum(ad.tri_solve(x, rhs)), l),
        (lambda x: ad.log_diag_sum(x), l),
        (lambda x: ad.sum(ad.gamma_logpdf(pos, x, 1.5)), pos),
        (lambda x: ad.sum(ad.gamma_logpdf(pos, 2.0, x)), pos),
        (lambda x: ad.sum(ad.normal_logpdf(mat, x, 1.3)), mat),
        (lambda x: ad.sum(ad.normal_logpdf(mat, 0.2, x)), pos),
    ]


@check("gradients", 1e-5)
def primitives(rng: RngStream, draws: int) -> float:
    return max(ad.gradcheck(f, x) for f, x in _primitive_cases(rng))


@check("gradients", 1e-3)
def gamma_reparam(rng: RngStream, draws: int) -> float:
    u = rng.uniform(6)
    point = {"alpha": 0.3 + 4.0 * rng.uniform(6), "beta": 0.2 + rng.uniform(6)}
    return ad.gradcheck(lambda v: ad.sum(ad.gamma_reparam(v["alpha"], v["beta"], u)), point)


def small_model(rng: RngStream, depth: int = 1, n: int = 8, d: int = 2, inducing: int = 4):
    """Tiny model and data set used by the gradient and complexity checks."""
    x = rng.split(0).normal((n, d))
    y = np.sin(x.sum(axis=1))
    config = ModelConfig(depth=depth, inducing=inducing, batch_size=n, train_samples=1,
                         eval_samples=2, init_noise=0.3)
    model = DeepWishartProcess.initialize(config, x, rng.split(1))
    # move the variational parameters away from the prior
    perturb = rng.split(2)
    model.params = {k: v + 0.1 * perturb.normal(np.shape(v)) if k.split("/")[1] != "inducing_inputs" else v
                    for k, v in model.params.items()}
    return model, x, y


@check("gradients", 1e-3)
def elbo_single_layer(rng: RngStream, draws: int) -> float:
    model, x, y = small_model(rng)
    errors = elbo_gradcheck(model, x, y, seed=7, h=1e-5, floor=1e-6)
    logger.debug("ELBO gradcheck per group: %s", errors)
    return max(errors.values())


@check("gradients", 1e-10)
def stl_drops_score(rng: RngStream, draws: int) -> float:
    """
    The STL gradient of log Q equals the full gradient minus the score term.

    The three gradients replay one draw; the score term holds A fixed.
    """
    p, nu = 4, 2
    default = GenWishartParams.default(np.eye(p), nu)
    r = rng.split(0)
    values = [0.8 * default.alpha + 0.3, 0.6 * default.beta + r.uniform(2),
              0.2 * r.normal(np.shape(default.mu)), 0.5 + r.uniform(np.shape(default.sigma))]

    def grad(variant: str) -> np.ndarray:
        tape = ad.Tape()
        variables = [tape.variable(v) for v in values]
        params = GenWishartParams(np.eye(p), nu, *variables)
        _, a = genwishart_sample(params, rng.split(1))
        if variant == "stl":
            log_q = genwishart_logpdf(a, params.stop_gradient())
        elif variant == "score":
            log_q = genwishart_logpdf(ad.stop_gradient(a), params)
        else:
            log_q = genwishart_logpdf(a, params)
        return np.concatenate([g.ravel() for g in tape.gradient(log_q, variables)])

    full, stl, score = grad("full"), grad("stl"), grad("score")
    return float(np.max(np.abs(stl - (full - score))) / max(1.0, float(np.max(np.abs(full)))))


# ---------------------------------------------------------------------------
# prior equivalence
# ---------------------------------------------------------------------------

@check("prior-equiv", 4.0, draws=100_000)
def dwp_matches_dgp(rng: RngStream, draws: int) -> float:
    """Entrywise mean and variance of G_1, G_2 from the Wishart and feature samplers."""
    x = rng.split(0).normal((3, 2))
    widths, kernels = [2, 2], _small_kernels(2, 2)
    iu = np.triu_indices(3)
    samples = []
    for j, sampler in enumerate((dwp_prior_sample, dgp_prior_sample)):
        r = rng.split(1 + j)
        rows = np.empty((draws, 2 * len(iu[0])))
        for i in range(draws):
            grams = sampler(x, widths, kernels, r).grams
            rows[i] = np.concatenate([g[iu] for g in grams])
        samples.append(np.concatenate([rows, rows ** 2], axis=1))
    return _zscore(*samples)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

@check("moments", 4.0, draws=100_000)
def wishart_mean_and_variance(rng: RngStream, draws: int) -> float:
    """E[G] = nu Sigma and Var[G_ij] = nu (Sigma_ij^2 + Sigma_ii Sigma_jj)."""
    worst = 0.0
    p, nu = 3, 4
    iu = np.triu_indices(p)
    for j, sigma in enumerate((np.eye(p), _random_pd(rng.split(0), p))):
        params = GenWishartParams.default(numerics.cholesky(sigma), nu)
        r = rng.split(1 + j)
        g = np.empty((draws, len(iu[0])))
        for i in range(draws):
            g[i] = genwishart_sample(params, r)[0][iu]
        mean, var = g.mean(axis=0), g.var(axis=0, ddof=1)
        mean_se = np.sqrt(var / draws)
        centred = g - mean
        var_se = np.sqrt(np.maximum(np.mean(centred ** 4, axis=0) - var ** 2, 0.0) / draws)
        exp_mean = nu * sigma[iu]
        exp_var = nu * (sigma[iu] ** 2 + np.diag(sigma)[iu[0]] * np.diag(sigma)[iu[1]])
        worst = max(worst, float(np.max(np.abs(mean - exp_mean) / mean_se)),
                    float(np.max(np.abs(var - exp_var) / var_se)))
    return worst


@check("moments", 0.01, draws=100_000, mode="min")
def gamma_reparam_marginal(rng: RngStream, draws: int) -> float:
    """KS p-value of reparameterised Gamma(4, 2) draws."""
    z = gamma_sample_reparam(GammaParams(4.0, 2.0), rng, size=draws)
    return float(stats.kstest(z, stats.gamma(a=4.0, scale=0.5).cdf).pvalue)


@check("moments", 4.0, draws=100_000)
def conditional_matrix_normal(rng: RngStream, draws: int) -> float:
    """Sampled conditional mean and variance of one test row against the closed form."""
    k = _random_pd(rng.split(0), 3)
    f_i = rng.split(1).normal((2, 1))
    chol = numerics.cholesky(k[:2, :2])
    cond = matnorm_conditional(chol, k[:2, 2:], np.diag(k[2:, 2:]), f_i)
    f_t = cond.sample(rng.split(2).normal((1, draws)))[0]
    exp_mean = float(k[2, :2] @ np.linalg.solve(k[:2, :2], f_i[:, 0]))
    exp_var = float(k[2, 2] - k[2, :2] @ np.linalg.solve(k[:2, :2], k[:2, 2]))
    var = f_t.var(ddof=1)
    var_se = np.sqrt(max(np.mean((f_t - f_t.mean()) ** 4) - var ** 2, 0.0) / draws)
    return max(abs(f_t.mean() - exp_mean) / np.sqrt(var / draws), abs(var - exp_var) / var_se)


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------

def time_layer(p_i: int, p_t: int, nu: int, rng: RngStream, repeats: int = 3) -> float:
    """Median seconds for one differentiated Wishart layer sample."""
    x = rng.normal((p_i + p_t, nu))
    g = x @ x.T / nu
    k = np.exp(-0.5 * (np.diag(g)[:, None] + np.diag(g)[None, :] - 2 * g)) + 1e-6 * np.eye(p_i + p_t)
    blocks = BlockMatrix(ii=k[:p_i, :p_i], ti=k[p_i:, :p_i], tt_diag=np.diag(k)[p_i:])
    times = []
    for r in range(repeats):
        tape = ad.Tape()
        default = GenWishartParams.default(np.eye(p_i), nu)
        params = LayerParams(v=tape.variable(numerics.cholesky(blocks.ii / nu)), p_logit=tape.variable(0.0),
                             alpha_raw=tape.variable(ad.inv_softplus(default.alpha)),
                             beta_raw=tape.variable(ad.inv_softplus(default.beta)),
                             mu=tape.variable(default.mu),
                             sigma_raw=tape.variable(ad.inv_softplus(default.sigma)),
                             kernel=KernelConfig())
        start = time.perf_counter()
        sample = sample_wishart_layer(blocks, params, nu, rng.split(r))
        objective = sample.log_p - sample.log_q + ad.sum(sample.gram.tt_diag)
        tape.backward(objective)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def cubic_residual(sizes: np.ndarray, times: np.ndarray) -> float:
    """
    Largest relative residual of the non-negative fit t(P) = d + c P^3.

    Only a constant overhead and a cubic term are free, so timings that grow
    linearly or quadratically leave large residuals at the small sizes.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    cubes = (sizes / sizes.max()) ** 3
    design = np.stack([np.ones_like(sizes), cubes], axis=1)
    coef, _ = optimize.nnls(design, times)
    fitted = design @ coef
    logger.info("layer timings %s, fitted %s (overhead %.3g, cubic %.3g)", times, fitted, coef[0], coef[1])
    return float(np.max(np.abs(times - fitted) / np.maximum(times, 1e-12)))


@check("complexity", 0.2)
def cubic_scaling(rng: RngStream, draws: int) -> float:
    """Layer timings over P_i in {8, 16, 32, 64} against an overhead-plus-cubic fit."""
    sizes = np.array([8, 16, 32, 64], dtype=np.float64)
    times = np.array([time_layer(int(p), 32, 4, rng.split(int(p))) for p in sizes])
    return cubic_residual(sizes, times)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def checks_for(suite: str) -> List[Check]:
    if suite == "all":
        return list(CHECKS)
    if suite not in SUITES:
        raise DomainError(f"Unknown suite '{suite}'; choose from {list(SUITES) + ['all']}")
    return [c for c in CHECKS if c.suite == suite]


def run_check(chk: Check, seed: int = 0, draws: Optional[int] = None) -> CheckResult:
    rng = RngStream(seed, CHECKS.index(chk))
    n = chk.draws if draws is None or not chk.draws else min(draws, chk.draws)
    start = time.perf_counter()
    measured = float(chk.fn(rng, n))
    passed = measured >= chk.tolerance if chk.mode == "min" else measured <= chk.tolerance
    result = CheckResult(chk.name, chk.suite, measured, chk.tolerance, bool(passed),
                         time.perf_counter() - start)
    logger.debug(result.line())
    return result


def run_suite(suite: str = "all", seed: int = 0, draws: Optional[int] = None,
              workers: int = 1) -> List[CheckResult]:
    """
    Run every check of ``suite``.

    Args:
        suite: One of ``SUITES`` or ``all``
        seed: Base seed; every check owns the stream ``(seed, check index)``
        draws: Optional cap on Monte Carlo draws per check
        workers: Threads used to run checks concurrently; results keep registry order

    Returns:
        One CheckResult per check
    """
    selected = checks_for(suite)
    logger.info("Running %d checks of suite '%s'", len(selected), suite)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: run_check(c, seed, draws), selected))
    return [run_check(c, seed, draws) for c in selected]
