"""
Deep Wishart process: the layered generative model, the inducing-point
variational family and the model checkpoint container.

Parameters live in a flat ``{"layer{l}/{name}": array}`` store. Layer 0 holds
the inducing inputs, layers 1..L the Wishart layers and layer L+1 the output
GP. The same store can hold autodiff variables, so every forward function
below runs both as a plain sampler and as a differentiable ELBO term.
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import (DomainError, NotPositiveDefinite, NumericalFailure, ShapeMismatch,
                     SingularTriangular)
from .kernel import (BlockMatrix, InputBlocks, KernelConfig, Source, kernel_blocks,
                     sqexp_ard_from_inputs, sqexp_from_gram)
from .matdist import (GenWishartParams, bartlett_sample, gaussian_columns_logpdf,
                      genwishart_logpdf, genwishart_sample, matnorm_conditional)
from .numerics import RngStream, cholesky, tri_solve, validate_sym_psd

logger = logging.getLogger(__name__)

STL_GROUPS = ("wishart", "scale", "output")

# Parameter name -> group, used for STL flags and per-group gradient checks.
PARAMETER_GROUPS = {
    "inducing_inputs": "inducing",
    "v": "scale",
    "p_logit": "scale",
    "alpha_raw": "wishart",
    "beta_raw": "wishart",
    "mu": "wishart",
    "sigma_raw": "wishart",
    "means": "output",
    "chol_raw": "output",
    "noise_raw": "likelihood",
    "variance_raw": "kernel",
    "lengthscale_raw": "kernel",
    "ard_raw": "kernel",
}


def param_key(layer: int, name: str) -> str:
    return f"layer{layer}/{name}"


def parameter_group(key: str) -> str:
    return PARAMETER_GROUPS[key.split("/", 1)[1]]


@dataclass
class ModelConfig:
    """Architecture and sampling sizes; widths default to the input dimension."""

    depth: int = 2
    widths: Optional[List[int]] = None
    inducing: int = 100
    batch_size: int = 1000
    train_samples: int = 10
    eval_samples: int = 100
    ard: bool = True
    output_dim: int = 1
    init_noise: float = 0.1

    def validate(self) -> "ModelConfig":
        if self.depth < 0:
            raise DomainError(f"depth must be non-negative, got {self.depth}")
        for name in ("inducing", "batch_size", "train_samples", "eval_samples", "output_dim"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.init_noise <= 0:
            raise DomainError("init_noise must be positive")
        if self.widths is not None:
            if len(self.widths) != self.depth:
                raise ShapeMismatch(f"{len(self.widths)} widths given for depth {self.depth}")
            if any(w < 1 for w in self.widths):
                raise DomainError("widths must be positive")
        return self

    def resolved_widths(self, input_dim: int) -> List[int]:
        return list(self.widths) if self.widths is not None else [input_dim] * self.depth

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known}).validate()


def _kernel_config(store: Mapping[str, Any], layer: int) -> KernelConfig:
    variance = ad.softplus(store[param_key(layer, "variance_raw")])
    if param_key(layer, "ard_raw") in store:
        return KernelConfig(variance=variance, lengthscale=1.0,
                            ard=ad.softplus(store[param_key(layer, "ard_raw")]))
    return KernelConfig(variance=variance,
                        lengthscale=ad.softplus(store[param_key(layer, "lengthscale_raw")]))


@dataclass
class LayerParams:
    """Variational parameters of one Wishart layer plus its kernel."""

    v: Any
    p_logit: Any
    alpha_raw: Any
    beta_raw: Any
    mu: Any
    sigma_raw: Any
    kernel: KernelConfig

    @property
    def p(self):
        return ad.sigmoid(self.p_logit)

    def genwishart(self, scale_chol: Any, dof: int) -> GenWishartParams:
        return GenWishartParams(scale_chol=scale_chol, dof=dof,
                                alpha=ad.softplus(self.alpha_raw), beta=ad.softplus(self.beta_raw),
                                mu=self.mu, sigma=ad.softplus(self.sigma_raw))

    @classmethod
    def from_store(cls, store: Mapping[str, Any], layer: int) -> "LayerParams":
        return cls(**{name: store[param_key(layer, name)]
                      for name in ("v", "p_logit", "alpha_raw", "beta_raw", "mu", "sigma_raw")},
                   kernel=_kernel_config(store, layer))


@dataclass
class OutputLayerParams:
    """
    Whitened inducing output posterior: U ~ N(means, chol chol^T) per column and
    F_i = L U with L the Cholesky of K(G_ii), plus likelihood noise and kernel.
    """

    means: Any
    chol_raw: Any
    noise_raw: Any
    kernel: KernelConfig

    @property
    def chol(self):
        n = ad.value_of(self.chol_raw).shape[0]
        strict = self.chol_raw * np.tril(np.ones((n, n)), -1)
        return strict + ad.diag_matrix(ad.softplus(ad.diag(self.chol_raw)))

    @property
    def noise(self):
        return ad.softplus(self.noise_raw)

    @classmethod
    def from_store(cls, store: Mapping[str, Any], layer: int) -> "OutputLayerParams":
        return cls(means=store[param_key(layer, "means")],
                   chol_raw=store[param_key(layer, "chol_raw")],
                   noise_raw=store[param_key(layer, "noise_raw")],
                   kernel=_kernel_config(store, layer))


@dataclass
class LayerSample:
    gram: BlockMatrix
    factor: Any
    log_p: Any
    log_q: Any


@dataclass
class OutputSample:
    outputs: Any
    log_p: Any
    log_q: Any
    loglik: Any = None


@dataclass
class ForwardSample:
    """One posterior sample through every layer."""

    kl_terms: List[Any]
    loglik: Any
    outputs: Any
    grams: List[BlockMatrix] = field(default_factory=list)


@dataclass
class PriorSample:
    grams: List[np.ndarray]
    outputs: np.ndarray


@contextmanager
def numerical_term(layer: int, term: str):
    """Re-raise numerical errors as ``NumericalFailure`` naming the layer and term."""
    try:
        yield
    except (NotPositiveDefinite, SingularTriangular, DomainError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        raise NumericalFailure(layer, term, cause=str(exc)) from exc


def build_scale(k: Any, nu: int, v: Any, p: Any):
    """Posterior scale (1 - p) K / nu + p V V^T."""
    if not ad.is_var(k):
        k = validate_sym_psd(k, "K")
    return (1.0 - p) * k / nu + p * (v @ ad.transpose(v))


def _pad_columns(f: Any, nu: int):
    n, m = ad.value_of(f).shape
    if m >= nu:
        return f
    return ad.concat([f, np.zeros((n, nu - m))], axis=1)


def sample_wishart_layer(k: BlockMatrix, params: LayerParams, nu: int, rng: RngStream,
                         stl: Sequence[str] = (), layer: int = 0) -> LayerSample:
    """
    Sample one Wishart layer given the kernel blocks of its input.

    The inducing Gram matrix is drawn from the generalised Wishart posterior;
    test/train rows are drawn from the conditional prior given the inducing
    features F_i = L A (zero-padded to nu columns).

    Args:
        k: Kernel blocks K(G_prev)
        params: Variational parameters of the layer
        nu: Layer width (degrees of freedom)
        rng: Sample-owned random stream
        stl: Parameter groups whose gradients are stopped inside log Q
        layer: Layer index, used in error reports

    Returns:
        Propagated Gram blocks, the factor A and log P, log Q of the inducing Gram
    """
    with numerical_term(layer, "posterior_scale"):
        chol_q = ad.cholesky(build_scale(k.ii, nu, params.v, params.p))
        gw = params.genwishart(chol_q, nu)
        g_ii, a = genwishart_sample(gw, rng)
        lam = chol_q @ a

    with numerical_term(layer, "log_q"):
        gw_q = gw
        if "scale" in stl:
            frozen = build_scale(k.ii, nu, ad.stop_gradient(params.v), ad.stop_gradient(params.p))
            gw_q = replace(gw_q, scale_chol=ad.cholesky(frozen))
        if "wishart" in stl:
            gw_q = gw_q.stop_gradient()
        log_q = genwishart_logpdf(a, gw_q)

    with numerical_term(layer, "log_p"):
        chol_p = ad.cholesky(k.ii / nu)
        log_p = genwishart_logpdf(ad.tri_solve(chol_p, lam), GenWishartParams.default(chol_p, nu))

    n_t = k.n_points
    with numerical_term(layer, "conditional"):
        if n_t:
            f_i = _pad_columns(lam, nu)
            cond = matnorm_conditional(chol_p, ad.transpose(k.ti) / nu, k.tt_diag / nu, f_i)
            f_t = cond.sample(rng.normal((n_t, nu)))
            g_ti = f_t @ ad.transpose(f_i)
            g_tt_diag = ad.sum(ad.square(f_t), axis=1)
        else:
            g_ti, g_tt_diag = np.zeros((0, k.n_inducing)), np.zeros(0)
    return LayerSample(gram=BlockMatrix(ii=g_ii, ti=g_ti, tt_diag=g_tt_diag),
                       factor=a, log_p=log_p, log_q=log_q)


def layer_posterior_sample(g_prev: Any, params: LayerParams, nu: int, rng: RngStream,
                           stl: Sequence[str] = ()):
    """
    Sample G ~ Q(G | G_prev) with every point treated as inducing.

    Returns:
        (G, A, log P(G | G_prev), log Q(G | G_prev))
    """
    k = sqexp_from_gram(g_prev, params.kernel)
    n = ad.value_of(k).shape[0]
    blocks = BlockMatrix(ii=k, ti=np.zeros((0, n)), tt_diag=np.zeros(0))
    sample = sample_wishart_layer(blocks, params, nu, rng, stl)
    return sample.gram.ii, sample.factor, sample.log_p, sample.log_q


def output_layer(source: Source, params: OutputLayerParams, targets: Optional[np.ndarray],
                 rng: RngStream, stl: Sequence[str] = (), layer: int = 0) -> OutputSample:
    """
    Final GP layer: inducing outputs from q(F_i | G_ii), predictions from the
    conditional prior and the Gaussian log-likelihood N(y; F_t, noise) of ``targets``.

    q is whitened by the Cholesky L of K(G_ii), so log P - log Q is evaluated
    on U = L^-1 F_i, where the shared log |L| terms cancel.
    """
    with numerical_term(layer, "output_kernel"):
        k = kernel_blocks(source, params.kernel)
        chol_k = ad.cholesky(k.ii)
    n_i, out_dim = ad.value_of(params.means).shape
    with numerical_term(layer, "output_kl"):
        chol_q = params.chol
        u = params.means + chol_q @ rng.normal((n_i, out_dim))
        means_q, chol_q_eval = params.means, chol_q
        if "output" in stl:
            means_q, chol_q_eval = ad.stop_gradient(means_q), ad.stop_gradient(chol_q)
        log_q = gaussian_columns_logpdf(u, means_q, chol_q_eval)
        log_p = gaussian_columns_logpdf(u, 0.0, np.eye(n_i))
    with numerical_term(layer, "predictions"):
        if k.n_points:
            cond = matnorm_conditional(chol_k, ad.transpose(k.ti), k.tt_diag, u, whitened=True)
            f_t = cond.sample(rng.normal((k.n_points, out_dim)))
        else:
            f_t = np.zeros((0, out_dim))
    loglik = None
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64).reshape(ad.value_of(f_t).shape)
        with numerical_term(layer, "loglik"):
            loglik = ad.sum(ad.normal_logpdf(y, f_t, ad.sqrt(params.noise)))
    return OutputSample(outputs=f_t, log_p=log_p, log_q=log_q, loglik=loglik)


def output_predictive(source: Source, params: OutputLayerParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predictive mean and variance of the latent outputs, with the whitened
    inducing outputs integrated out analytically under q.

    Returns:
        (P_t x out mean, P_t variance shared by all output columns)
    """
    k = kernel_blocks(source, params.kernel)
    k_ii, k_ti, k_tt = (ad.value_of(k.ii), ad.value_of(k.ti), ad.value_of(k.tt_diag))
    chol_k = cholesky(0.5 * (k_ii + k_ii.T))
    w = tri_solve(chol_k, k_ti.T)
    means, chol_q = ad.value_of(params.means), ad.value_of(params.chol)
    mean = w.T @ means
    var = k_tt - np.sum(w * w, axis=0) + np.sum((chol_q.T @ w) ** 2, axis=0)
    return mean, np.maximum(var, 0.0)


class DeepWishartProcess:
    """
    A deep Wishart process regression model with its parameter store.

    Widths nu_l, the inducing count and the output dimension are fixed by the
    config; every array in ``params`` is a variational or kernel parameter.
    """

    def __init__(self, config: ModelConfig, input_dim: int, params: Dict[str, np.ndarray]):
        self.config = config.validate()
        self.input_dim = input_dim
        self.params = params

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def widths(self) -> List[int]:
        return self.config.resolved_widths(self.input_dim)

    @property
    def n_inducing(self) -> int:
        return self.params[param_key(0, "inducing_inputs")].shape[0]

    @classmethod
    def initialize(cls, config: ModelConfig, x_train: np.ndarray, rng: RngStream) -> "DeepWishartProcess":
        """
        Initialise so that q equals the prior at the prior-mean Gram matrices.

        Inducing inputs are a random subset of the training inputs; V is the
        Cholesky of K / nu propagated through the prior means; p = 1/2;
        Bartlett parameters sit at their prior values and the whitened output
        posterior is N(0, I), which equals the output prior for any G_ii.
        """
        config.validate()
        x_train = np.asarray(x_train, dtype=np.float64)
        n, d = x_train.shape
        widths = config.resolved_widths(d)
        z = x_train[rng.choice(n, min(config.inducing, n))].copy()
        n_i = z.shape[0]
        params: Dict[str, np.ndarray] = {param_key(0, "inducing_inputs"): z}

        source: Source = InputBlocks(z, np.zeros((0, d)))
        for layer in range(1, config.depth + 2):
            params[param_key(layer, "variance_raw")] = ad.inv_softplus(1.0)
            if layer == 1 and config.ard:
                params[param_key(layer, "ard_raw")] = ad.inv_softplus(np.full(d, np.sqrt(d)))
            else:
                params[param_key(layer, "lengthscale_raw")] = ad.inv_softplus(1.0)
            if layer == config.depth + 1:
                params[param_key(layer, "chol_raw")] = np.diag(ad.inv_softplus(np.ones(n_i)))
                params[param_key(layer, "means")] = np.zeros((n_i, config.output_dim))
                params[param_key(layer, "noise_raw")] = ad.inv_softplus(config.init_noise)
                break
            k = kernel_blocks(source, _kernel_config(params, layer))
            nu = widths[layer - 1]
            prior = GenWishartParams.default(np.eye(n_i), nu)
            params[param_key(layer, "v")] = cholesky(k.ii / nu)
            params[param_key(layer, "p_logit")] = np.array(0.0)
            params[param_key(layer, "alpha_raw")] = ad.inv_softplus(prior.alpha)
            params[param_key(layer, "beta_raw")] = ad.inv_softplus(prior.beta)
            params[param_key(layer, "mu")] = prior.mu
            params[param_key(layer, "sigma_raw")] = ad.inv_softplus(prior.sigma)
            source = BlockMatrix(ii=k.ii, ti=np.zeros((0, n_i)), tt_diag=np.zeros(0))

        logger.info("Initialised DWP: depth=%d widths=%s inducing=%d parameters=%d",
                    config.depth, widths, n_i, sum(np.size(v) for v in params.values()))
        return cls(config, d, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})

    def layer_params(self, store: Mapping[str, Any], layer: int) -> LayerParams:
        return LayerParams.from_store(store, layer)

    def output_params(self, store: Mapping[str, Any]) -> OutputLayerParams:
        return OutputLayerParams.from_store(store, self.depth + 1)

    def sample_hidden(self, x: np.ndarray, rng: RngStream, store: Optional[Mapping[str, Any]] = None,
                      stl: Sequence[str] = ()) -> Tuple[List[Any], List[BlockMatrix], Source]:
        """Propagate through the Wishart layers, returning (log P - log Q per layer, Gram blocks, last source)."""
        store = self.params if store is None else store
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"Expected inputs with {self.input_dim} columns, got shape {x.shape}")
        source: Source = InputBlocks(store[param_key(0, "inducing_inputs")], x)
        kl_terms, grams = [], []
        for layer, nu in enumerate(self.widths, start=1):
            params = self.layer_params(store, layer)
            with numerical_term(layer, "kernel"):
                k = kernel_blocks(source, params.kernel)
            sample = sample_wishart_layer(k, params, nu, rng, stl, layer)
            kl_terms.append(sample.log_p - sample.log_q)
            grams.append(sample.gram)
            source = sample.gram
        return kl_terms, grams, source

    def sample(self, x: np.ndarray, rng: RngStream, y: Optional[np.ndarray] = None,
               store: Optional[Mapping[str, Any]] = None, stl: Sequence[str] = ()) -> ForwardSample:
        """One joint posterior sample of every layer for the points ``x``."""
        store = self.params if store is None else store
        kl_terms, grams, source = self.sample_hidden(x, rng, store, stl)
        out = output_layer(source, self.output_params(store), y, rng, stl, self.depth + 1)
        kl_terms.append(out.log_p - out.log_q)
        return ForwardSample(kl_terms=kl_terms, loglik=out.loglik, outputs=out.outputs, grams=grams)

    def predict(self, x: np.ndarray, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
        """Predictive (mean, latent variance) for one sample of the hidden layers."""
        _, _, source = self.sample_hidden(x, rng)
        with numerical_term(self.depth + 1, "predictive"):
            return output_predictive(source, self.output_params(self.params))

    def noise_variance(self) -> float:
        return float(ad.softplus(self.params[param_key(self.depth + 1, "noise_raw")]))

    # -- checkpoint container ------------------------------------------------

    def save(self, path: str, standardizer: Optional[Mapping[str, np.ndarray]] = None) -> None:
        """Write an ``.npz`` checkpoint with ``meta/config`` and optional ``standardizer/*`` entries."""
        meta = {"config": asdict(self.config), "input_dim": self.input_dim}
        arrays = dict(self.params)
        arrays["meta/config"] = np.array(json.dumps(meta, sort_keys=True))
        for name, value in (standardizer or {}).items():
            arrays[f"standardizer/{name}"] = np.asarray(value, dtype=np.float64)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
        logger.info("Checkpoint written to %s", path)

    @classmethod
    def load(cls, path: str) -> Tuple["DeepWishartProcess", Optional[Dict[str, np.ndarray]]]:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta/config"]))
            params = {k: np.array(data[k]) for k in data.files if k.startswith("layer")}
            standardizer = {k.split("/", 1)[1]: np.array(data[k])
                            for k in data.files if k.startswith("standardizer/")}
        model = cls(ModelConfig.from_dict(meta["config"]), int(meta["input_dim"]), params)
        return model, (standardizer or None)


# ---------------------------------------------------------------------------
# Prior samplers
# ---------------------------------------------------------------------------

def _input_kernel(x: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    if cfg.ard is not None:
        return sqexp_ard_from_inputs(x, cfg)
    return sqexp_from_gram(x @ x.T / x.shape[1], cfg)


def _layer_kernel(layer: int, x: np.ndarray, grams: List[np.ndarray],
                  kernels: Sequence[KernelConfig]) -> np.ndarray:
    if layer == 1:
        return _input_kernel(x, kernels[0])
    return sqexp_from_gram(grams[layer - 2], kernels[layer - 1])


def _check_kernels(widths: Sequence[int], kernels: Sequence[KernelConfig]) -> None:
    if len(kernels) != len(widths) + 1:
        raise ShapeMismatch(f"{len(widths)} Wishart layers need {len(widths) + 1} kernels, "
                            f"got {len(kernels)}")


def dwp_prior_sample(x: np.ndarray, widths: Sequence[int], kernels: Sequence[KernelConfig],
                     rng: RngStream, output_dim: int = 1) -> PriorSample:
    """
    Sample the deep Wishart process prior G_l | G_l-1 ~ W(K(G_l-1) / nu, nu).

    Args:
        x: P x D inputs
        widths: nu_1..nu_L
        kernels: One kernel per layer 1..L+1; the first acts on the inputs
        rng: Random stream

    Returns:
        Gram matrices G_1..G_L and the P x output_dim GP outputs
    """
    x = np.asarray(x, dtype=np.float64)
    _check_kernels(widths, kernels)
    p = x.shape[0]
    grams: List[np.ndarray] = []
    for layer, nu in enumerate(widths, start=1):
        chol = cholesky(_layer_kernel(layer, x, grams, kernels) / nu)
        lam = chol @ bartlett_sample(p, nu, rng)
        grams.append(lam @ lam.T)
    k_out = _layer_kernel(len(widths) + 1, x, grams, kernels)
    return PriorSample(grams=grams, outputs=cholesky(k_out) @ rng.normal((p, output_dim)))


def dgp_prior_sample(x: np.ndarray, widths: Sequence[int], kernels: Sequence[KernelConfig],
                     rng: RngStream, output_dim: int = 1,
                     feature_transform: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
                     ) -> PriorSample:
    """
    Sample the equivalent deep GP prior by drawing features: F_l columns
    ~ N(0, K(G_l-1)) and G_l = F_l F_l^T / nu.

    ``feature_transform(layer, F)`` may replace F before the Gram matrix is
    formed (e.g. a right-multiplication by an orthogonal matrix).
    """
    x = np.asarray(x, dtype=np.float64)
    _check_kernels(widths, kernels)
    p = x.shape[0]
    grams: List[np.ndarray] = []
    for layer, nu in enumerate(widths, start=1):
        f = cholesky(_layer_kernel(layer, x, grams, kernels)) @ rng.normal((p, nu))
        if feature_transform is not None:
            f = feature_transform(layer, f)
        grams.append(f @ f.T / nu)
    k_out = _layer_kernel(len(widths) + 1, x, grams, kernels)
    return PriorSample(grams=grams, outputs=cholesky(k_out) @ rng.normal((p, output_dim)))
