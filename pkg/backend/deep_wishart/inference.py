"""Doubly-stochastic ELBO, Adam, schedules, training loop and test log-likelihood."""

import json
import logging
from contextlib import ExitStack
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import autodiff as ad
from .errors import DomainError, NonFiniteGradient, NumericalFailure, ShapeMismatch
from .model import STL_GROUPS, DeepWishartProcess, parameter_group
from .numerics import RngStream

logger = logging.getLogger(__name__)

Callback = Callable[[int, Dict[str, Any], DeepWishartProcess], None]


@dataclass
class TrainSchedule:
    """Optimiser schedule; the defaults are the 20k-step Adam recipe."""

    steps: int = 20000
    lr_initial: float = 1e-2
    lr_drop_step: int = 10000
    lr_final: float = 1e-3
    kl_anneal_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stl: List[str] = field(default_factory=lambda: ["wishart"])

    def validate(self) -> "TrainSchedule":
        if self.steps < 0 or self.lr_drop_step < 0 or self.kl_anneal_steps < 0:
            raise DomainError("Step counts must be non-negative")
        if self.lr_initial <= 0 or self.lr_final <= 0 or self.eps <= 0:
            raise DomainError("Learning rates and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1)")
        unknown = set(self.stl) - set(STL_GROUPS)
        if unknown:
            raise DomainError(f"Unknown STL groups {sorted(unknown)}; choose from {list(STL_GROUPS)}")
        return self

    def learning_rate(self, step: int) -> float:
        return self.lr_initial if step < self.lr_drop_step else self.lr_final

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainSchedule":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known}).validate()


@dataclass
class ElboEstimate:
    """
    Monte Carlo ELBO estimate for one batch.

    ``kl_terms`` are the per-layer log P - log Q contributions (Wishart layers
    then the output layer), so total = loglik_term + anneal * sum(kl_terms).
    """

    total: float
    loglik_term: float
    kl_terms: List[float]
    anneal: float = 1.0
    gradients: Optional[Dict[str, np.ndarray]] = None


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


@dataclass
class TrainResult:
    model: DeepWishartProcess
    trace: List[Dict[str, Any]]


def kl_anneal_factor(step: int, sched: TrainSchedule) -> float:
    """Linear ramp min(1, step / kl_anneal_steps)."""
    if step < 0:
        raise DomainError(f"step must be non-negative, got {step}")
    if sched.kl_anneal_steps == 0:
        return 1.0
    return min(1.0, step / sched.kl_anneal_steps)


def elbo_sample(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, n_total: int,
                rng: RngStream, anneal: float = 1.0, stl: Sequence[str] = (),
                store: Optional[Mapping[str, Any]] = None):
    """
    Single-sample ELBO: (N / B) log p(y | F_t) + anneal * sum_l (log P_l - log Q_l).

    Returns:
        (total, loglik_term, kl_terms); Vars when ``store`` holds Vars
    """
    sample = model.sample(x, rng, y=y, store=store, stl=stl)
    loglik_term = (n_total / x.shape[0]) * sample.loglik
    total = loglik_term
    for term in sample.kl_terms:
        total = total + anneal * term
    return total, loglik_term, sample.kl_terms


def _check_finite(loglik_term: float, kl_terms: Sequence[float], depth: int) -> None:
    for layer, term in enumerate(kl_terms, start=1):
        if not np.isfinite(term):
            raise NumericalFailure(layer, "kl", cause=f"value {term}")
    if not np.isfinite(loglik_term):
        raise NumericalFailure(depth + 1, "loglik", cause=f"value {loglik_term}")


def elbo_batch(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, n_total: int, samples: int,
               rng: RngStream, anneal: float = 1.0, stl: Sequence[str] = (),
               with_gradients: bool = True) -> ElboEstimate:
    """
    Average of ``samples`` reparameterised ELBO samples for one minibatch.

    Every sample owns a Tape and the child stream ``rng.split(s)``; gradients
    are reduced in sample order, so the estimate is deterministic given ``rng``.

    Args:
        model: Model whose ``params`` are differentiated
        x: B x D batch inputs
        y: B targets
        n_total: Dataset size N, the likelihood is scaled by N / B
        samples: Number of Monte Carlo samples S
        rng: Step stream
        anneal: KL annealing factor
        stl: Parameter groups with sticking-the-landing gradients

    Returns:
        ElboEstimate with gradients of the mean total (when requested)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("ELBO batch must be a non-empty 2-D array")
    if samples < 1:
        raise DomainError(f"samples must be positive, got {samples}")
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    if y.shape[1] != model.config.output_dim:
        raise ShapeMismatch(f"Targets have {y.shape[1]} columns, model has {model.config.output_dim}")

    totals, logliks, kls = [], [], []
    grads = {k: np.zeros_like(v) for k, v in model.params.items()} if with_gradients else None
    for s in range(samples):
        sample_rng = rng.split(s)
        if with_gradients:
            tape = ad.Tape()
            store = {k: tape.variable(v) for k, v in model.params.items()}
            total, loglik_term, kl_terms = elbo_sample(model, x, y, n_total, sample_rng, anneal, stl, store)
        else:
            total, loglik_term, kl_terms = elbo_sample(model, x, y, n_total, sample_rng, anneal, stl)
        kl_values = [float(term) for term in kl_terms]
        _check_finite(float(loglik_term), kl_values, model.depth)
        if with_gradients:
            for key, g in zip(store, tape.gradient(total, list(store.values()))):
                grads[key] += g / samples
        totals.append(float(total))
        logliks.append(float(loglik_term))
        kls.append(kl_values)

    return ElboEstimate(total=float(np.mean(totals)), loglik_term=float(np.mean(logliks)),
                        kl_terms=[float(v) for v in np.mean(np.asarray(kls), axis=0)],
                        anneal=anneal, gradients=grads)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam descent step.

    Returns:
        New parameter dict and new state; the inputs are left untouched
    """
    for name in params:
        if name not in grads:
            raise ShapeMismatch(f"Missing gradient for parameter '{name}'")
        if np.shape(grads[name]) != np.shape(params[name]):
            raise ShapeMismatch(f"Gradient shape {np.shape(grads[name])} does not match "
                                f"parameter '{name}' of shape {np.shape(params[name])}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)

    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        new_m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        new_v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = new_m[name] / (1.0 - beta1 ** t)
        v_hat = new_v[name] / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def train(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, sched: TrainSchedule,
          rng: RngStream, callbacks: Iterable[Callback] = (), trace_path: Optional[str] = None,
          checkpoint_path: Optional[str] = None,
          standardizer: Optional[Mapping[str, np.ndarray]] = None) -> TrainResult:
    """
    Maximise the ELBO with Adam.

    Step ``t`` draws its minibatch from ``rng.split(t)`` and its Monte Carlo
    samples from ``rng.split(t).split(0)``, so a run is reproducible from the
    seed. On a numerical failure the last good parameters are checkpointed
    (when ``checkpoint_path`` is given) and the error is re-raised.

    Args:
        model: Initialised model, updated in place
        x: N x D standardised inputs
        y: N standardised targets
        sched: Schedule (steps, learning rates, annealing, STL groups)
        rng: Run stream
        callbacks: Called as ``callback(step, record, model)`` after every step
        trace_path: Optional JSONL metrics trace
        checkpoint_path: Optional checkpoint written at the end or on failure

    Returns:
        The model and the per-step metrics trace
    """
    sched.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    batch = min(model.config.batch_size, n)
    state = AdamState.zeros(model.params)
    trace: List[Dict[str, Any]] = []
    logger.info("Training for %d steps (N=%d, batch=%d, samples=%d, stl=%s)",
                sched.steps, n, batch, model.config.train_samples, sched.stl)

    with ExitStack() as stack:
        trace_file = stack.enter_context(open(trace_path, "w")) if trace_path else None
        for step in range(sched.steps):
            step_rng = rng.split(step)
            idx = np.sort(step_rng.choice(n, batch)) if batch < n else np.arange(n)
            anneal = kl_anneal_factor(step, sched)
            lr = sched.learning_rate(step)
            try:
                est = elbo_batch(model, x[idx], y[idx], n, model.config.train_samples,
                                 step_rng.split(0), anneal, sched.stl)
                descent = {k: -g for k, g in est.gradients.items()}
                params, state = adam_step(model.params, descent, state, lr,
                                          sched.beta1, sched.beta2, sched.eps)
            except (NumericalFailure, NonFiniteGradient) as exc:
                logger.error("Training aborted at step %d: %s", step, exc)
                if checkpoint_path:
                    model.save(checkpoint_path, standardizer)
                raise
            record = {"step": step, "elbo": est.total, "loglik_term": est.loglik_term,
                      "kl_per_layer": est.kl_terms, "lr": lr, "anneal": anneal}
            trace.append(record)
            if trace_file is not None:
                trace_file.write(json.dumps(record) + "\n")
            logger.debug("step %d elbo %.6f loglik %.6f kl %s", step, est.total,
                         est.loglik_term, est.kl_terms)
            model.params = params
            for callback in callbacks:
                callback(step, record, model)

    if checkpoint_path:
        model.save(checkpoint_path, standardizer)
    return TrainResult(model=model, trace=trace)


def evaluate_elbo(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, samples: int,
                  rng: RngStream) -> float:
    """Full-batch ELBO per datapoint with the annealing factor at 1."""
    n = np.asarray(x).shape[0]
    est = elbo_batch(model, x, y, n, samples, rng, anneal=1.0, with_gradients=False)
    return est.total / n


def test_loglik(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, samples: int,
                rng: RngStream, target_scale: Any = 1.0) -> float:
    """
    Average test log-likelihood of the mixture predictive.

    Per point: logsumexp over samples of log N(y; mean_s, var_s + noise),
    minus log S. ``target_scale`` (the training std of the targets) converts
    the result to unstandardised units.
    """
    if samples < 1:
        raise DomainError(f"samples must be positive, got {samples}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    noise = model.noise_variance()
    per_sample = np.empty((samples, x.shape[0]))
    for s in range(samples):
        mean, var = model.predict(x, rng.split(s))
        std = np.sqrt(var + noise)[:, None]
        per_sample[s] = stats.norm.logpdf(y, loc=mean, scale=std).sum(axis=1)
    ll = logsumexp(per_sample, axis=0) - np.log(samples)
    return float(np.mean(ll) - np.sum(np.log(np.broadcast_to(target_scale, (y.shape[1],)))))


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average over ``window`` values."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or values.size < window:
        raise DomainError(f"Cannot smooth {values.size} values with window {window}")
    return np.convolve(values, np.ones(window) / window, mode="valid")


def elbo_gradcheck(model: DeepWishartProcess, x: np.ndarray, y: np.ndarray, seed: int,
                   keys: Optional[Sequence[str]] = None, samples: int = 1, anneal: float = 1.0,
                   h: float = 1e-5, floor: float = 1e-8) -> Dict[str, float]:
    """
    Finite-difference check of ELBO gradients under common random numbers.

    Every evaluation replays ``RngStream(seed)``, so the stochastic objective
    becomes a fixed smooth function of the parameters. STL is off, since it
    changes gradients but not values.

    Returns:
        Max relative error per parameter group
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    keys = list(model.params) if keys is None else list(keys)

    def objective(point):
        store = dict(model.params)
        store.update(point)
        rng = RngStream(seed)
        total = 0.0
        for s in range(samples):
            total = total + elbo_sample(model, x, y, x.shape[0], rng.split(s), anneal, (), store)[0]
        return total / samples

    errors = {}
    for group in sorted({parameter_group(k) for k in keys}):
        point = {k: model.params[k] for k in keys if parameter_group(k) == group}
        errors[group] = ad.gradcheck(objective, point, h=h, floor=floor)
        logger.debug("gradcheck group %s: %.3e", group, errors[group])
    return errors
