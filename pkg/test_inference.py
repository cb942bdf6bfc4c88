"""
Tests for the ELBO estimator, Adam, schedules, training and test log-likelihood.
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), 'backend'))

from deep_wishart import autodiff as ad
from deep_wishart import harness, inference
from deep_wishart.errors import DomainError, NonFiniteGradient, NumericalFailure, ShapeMismatch
from deep_wishart.inference import AdamState, TrainSchedule
from deep_wishart.kernel import InputBlocks, KernelConfig, kernel_blocks
from deep_wishart.model import DeepWishartProcess, ModelConfig, dwp_prior_sample, param_key
from deep_wishart.numerics import RngStream


def make_model(depth=1, n=10, d=2, inducing=4, seed=0, perturb=0.0, **overrides):
    rng = RngStream(seed)
    x = rng.split(0).normal((n, d))
    y = np.sin(x.sum(axis=1)) + 0.1 * rng.split(1).normal(n)
    settings = dict(depth=depth, inducing=inducing, batch_size=n, train_samples=2, eval_samples=3)
    settings.update(overrides)
    config = ModelConfig(**settings)
    model = DeepWishartProcess.initialize(config, x, rng.split(2))
    if perturb:
        noise = rng.split(3)
        model.params = {k: v + perturb * noise.normal(np.shape(v)) for k, v in model.params.items()}
    return model, x, y


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def test_kl_anneal_factor():
    sched = TrainSchedule()
    assert inference.kl_anneal_factor(0, sched) == 0.0
    assert inference.kl_anneal_factor(500, sched) == pytest.approx(0.5)
    assert inference.kl_anneal_factor(5000, sched) == 1.0
    assert inference.kl_anneal_factor(0, TrainSchedule(kl_anneal_steps=0)) == 1.0


def test_learning_rate_drop():
    sched = TrainSchedule()
    assert sched.learning_rate(0) == 1e-2
    assert sched.learning_rate(9999) == 1e-2
    assert sched.learning_rate(10000) == 1e-3


def test_schedule_validation():
    with pytest.raises(DomainError):
        TrainSchedule(stl=["bogus"]).validate()
    with pytest.raises(DomainError):
        TrainSchedule(lr_initial=0.0).validate()
    assert TrainSchedule.from_dict({"steps": 5, "extra": True}).steps == 5


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    params = {"a": np.array([1.0, -2.0])}
    new, state = inference.adam_step(params, {"a": np.zeros(2)}, AdamState.zeros(params), 0.1)
    np.testing.assert_array_equal(new["a"], params["a"])
    assert state.t == 1


def test_adam_first_step_is_signed_learning_rate():
    params = {"a": np.zeros(3)}
    grads = {"a": np.array([0.5, -3.0, 1e-3])}
    new, _ = inference.adam_step(params, grads, AdamState.zeros(params), 0.01)
    np.testing.assert_allclose(new["a"], -0.01 * np.sign(grads["a"]), rtol=1e-4)


def test_adam_constant_gradient_drift_is_bounded():
    params = {"a": np.array(0.0)}
    state = AdamState.zeros(params)
    values = []
    for _ in range(100):
        params, state = inference.adam_step(params, {"a": np.array(2.0)}, state, 0.01)
        values.append(float(params["a"]))
    steps = -np.diff([0.0] + values)
    assert np.all(steps > 0)
    assert np.all(steps <= 0.01 * (1 + 1e-6))


def test_adam_leaves_inputs_untouched():
    params = {"a": np.ones(2)}
    state = AdamState.zeros(params)
    inference.adam_step(params, {"a": np.ones(2)}, state, 0.1)
    np.testing.assert_array_equal(params["a"], np.ones(2))
    assert state.t == 0


def test_adam_rejects_bad_gradients():
    params = {"a": np.ones(2)}
    with pytest.raises(NonFiniteGradient) as exc:
        inference.adam_step(params, {"a": np.array([1.0, np.nan])}, AdamState.zeros(params), 0.1)
    assert exc.value.name == "a"
    with pytest.raises(ShapeMismatch):
        inference.adam_step(params, {"a": np.ones(3)}, AdamState.zeros(params), 0.1)
    with pytest.raises(ShapeMismatch):
        inference.adam_step(params, {}, AdamState.zeros(params), 0.1)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def test_elbo_at_prior_is_likelihood_term():
    model, x, y = make_model(depth=0)
    est = inference.elbo_batch(model, x, y, len(x), 3, RngStream(1), with_gradients=False)
    assert est.kl_terms == pytest.approx([0.0], abs=1e-8)
    assert est.total == pytest.approx(est.loglik_term, abs=1e-8)


def test_elbo_first_layer_at_prior():
    model, x, y = make_model(depth=2)
    est = inference.elbo_batch(model, x, y, len(x), 2, RngStream(1), with_gradients=False)
    assert len(est.kl_terms) == 3
    assert est.kl_terms[0] == pytest.approx(0.0, abs=1e-6)


def test_elbo_total_combines_terms():
    model, x, y = make_model(perturb=0.05)
    est = inference.elbo_batch(model, x, y, 40, 1, RngStream(2), anneal=0.3, with_gradients=False)
    assert est.total == pytest.approx(est.loglik_term + 0.3 * sum(est.kl_terms), rel=1e-12)


def test_elbo_is_deterministic_and_has_gradients():
    model, x, y = make_model(perturb=0.05)
    a = inference.elbo_batch(model, x, y, len(x), 2, RngStream(3), stl=["wishart"])
    b = inference.elbo_batch(model, x, y, len(x), 2, RngStream(3), stl=["wishart"])
    assert a.total == b.total
    assert set(a.gradients) == set(model.params)
    for k in model.params:
        np.testing.assert_array_equal(a.gradients[k], b.gradients[k])
        assert a.gradients[k].shape == np.shape(model.params[k])


def test_elbo_value_does_not_depend_on_stl():
    model, x, y = make_model(perturb=0.05)
    plain = inference.elbo_batch(model, x, y, len(x), 2, RngStream(4), stl=[])
    stl = inference.elbo_batch(model, x, y, len(x), 2, RngStream(4), stl=["wishart", "scale", "output"])
    assert plain.total == pytest.approx(stl.total, rel=1e-12)


def test_elbo_sample_count_reduces_variance():
    model, x, y = make_model(perturb=0.05)
    rng = RngStream(5)
    two = np.array([inference.elbo_batch(model, x, y, len(x), 2, rng.split(i), with_gradients=False).total
                    for i in range(100)])
    four = np.array([inference.elbo_batch(model, x, y, len(x), 4, rng.split(1000 + i), with_gradients=False).total
                     for i in range(100)])
    se = np.sqrt(two.var(ddof=1) / 100 + four.var(ddof=1) / 100)
    assert abs(two.mean() - four.mean()) < 4 * se
    assert 1.2 < two.var(ddof=1) / four.var(ddof=1) < 3.5


def test_minibatch_elbo_is_unbiased():
    model, x, y = make_model(n=12, perturb=0.05)
    rng = RngStream(50)
    replicates = 300
    full = np.array([inference.elbo_batch(model, x, y, 12, 1, rng.split(i), with_gradients=False).total
                     for i in range(replicates)])
    mini = []
    for i in range(replicates):
        draw = rng.split(10000 + i)
        idx = np.sort(draw.choice(12, 4))
        mini.append(inference.elbo_batch(model, x[idx], y[idx], 12, 1, draw.split(0),
                                         with_gradients=False).total)
    mini = np.array(mini)
    se = np.sqrt(full.var(ddof=1) / replicates + mini.var(ddof=1) / replicates)
    assert abs(full.mean() - mini.mean()) < 4 * se
    # subsampling adds variance on top of the Monte Carlo noise
    assert mini.var(ddof=1) > full.var(ddof=1)


def test_elbo_rejects_bad_batches():
    model, x, y = make_model()
    with pytest.raises(DomainError):
        inference.elbo_batch(model, x[:0], y[:0], 10, 1, RngStream(0))
    with pytest.raises(DomainError):
        inference.elbo_batch(model, x, y, 10, 0, RngStream(0))
    with pytest.raises(ShapeMismatch):
        inference.elbo_batch(model, x, np.ones((len(x), 2)), 10, 1, RngStream(0))


def test_single_layer_elbo_gradients():
    model, x, y = make_model(depth=1, n=8, perturb=0.05)
    errors = inference.elbo_gradcheck(model, x, y, seed=11, floor=1e-4)
    assert set(errors) == {"inducing", "scale", "wishart", "output", "likelihood", "kernel"}
    assert max(errors.values()) < 1e-4


def test_stl_removes_wishart_score_from_gradient():
    model, x, y = make_model(depth=1, n=8, perturb=0.05)
    key = param_key(1, "mu")

    def grad(stl):
        tape = ad.Tape()
        store = {k: tape.variable(v) for k, v in model.params.items()}
        sample = model.sample(x, RngStream(6), y, store=store, stl=stl)
        return tape.gradient(sample.kl_terms[0], [store[key]])[0]

    # with the score removed only the pathwise terms remain, so the two differ
    assert not np.allclose(grad(()), grad(("wishart",)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_train_zero_steps_keeps_model():
    model, x, y = make_model()
    before = {k: v.copy() for k, v in model.params.items()}
    result = inference.train(model, x, y, TrainSchedule(steps=0), RngStream(0))
    assert result.trace == []
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_train_is_reproducible(tmp_path):
    traces = []
    for run in range(2):
        model, x, y = make_model()
        path = str(tmp_path / f"trace{run}.jsonl")
        inference.train(model, x, y, TrainSchedule(steps=3, kl_anneal_steps=2), RngStream(9), trace_path=path)
        with open(path) as f:
            traces.append(f.read())
    assert traces[0] == traces[1]
    records = [json.loads(line) for line in traces[0].splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2]
    assert [r["anneal"] for r in records] == [0.0, 0.5, 1.0]
    assert set(records[0]) == {"step", "elbo", "loglik_term", "kl_per_layer", "lr", "anneal"}
    assert len(records[0]["kl_per_layer"]) == 2


def test_train_calls_callbacks_and_updates_parameters(tmp_path):
    model, x, y = make_model(n=12, batch_size=6)
    before = {k: v.copy() for k, v in model.params.items()}
    seen = []
    checkpoint = str(tmp_path / "ckpt.npz")
    inference.train(model, x, y, TrainSchedule(steps=2), RngStream(1),
                    callbacks=[lambda step, record, m: seen.append(step)], checkpoint_path=checkpoint)
    assert seen == [0, 1]
    assert any(not np.array_equal(model.params[k], before[k]) for k in before)
    assert os.path.exists(checkpoint)


def test_train_checkpoints_on_failure(tmp_path):
    model, x, y = make_model()
    model.params[param_key(2, "noise_raw")] = np.array(np.nan)
    checkpoint = str(tmp_path / "failed.npz")
    with pytest.raises(NumericalFailure) as exc:
        inference.train(model, x, y, TrainSchedule(steps=2), RngStream(0), checkpoint_path=checkpoint)
    assert exc.value.term == "loglik"
    assert os.path.exists(checkpoint)


@pytest.mark.slow
def test_training_improves_elbo():
    rng = RngStream(21)
    x = np.sort(rng.split(0).uniform(60) * 6.0 - 3.0)[:, None]
    k = np.exp(-0.5 * (x - x.T) ** 2) + 1e-6 * np.eye(60)
    y = np.linalg.cholesky(k) @ rng.split(1).normal(60) + 0.1 * rng.split(2).normal(60)
    config = ModelConfig(depth=1, inducing=10, batch_size=60, train_samples=2, eval_samples=10)
    model = DeepWishartProcess.initialize(config, x, rng.split(3))
    sched = TrainSchedule(steps=500, lr_drop_step=500, kl_anneal_steps=0)
    result = inference.train(model, x, y, sched, rng.split(4))
    elbo = inference.smoothed([r["elbo"] for r in result.trace], 25)
    assert elbo[-1] > elbo[0] + 10.0


@pytest.mark.slow
def test_desk_scale_training_on_prior_data(tmp_path):
    preset = harness.load_preset("desk-scale")
    rng = RngStream(23)
    x = rng.split(0).uniform((256, 2)) * 4.0 - 2.0
    prior = dwp_prior_sample(x, [2, 2], [KernelConfig() for _ in range(3)], rng.split(1))
    y = prior.outputs[:, 0] + 0.1 * rng.split(2).normal(256)
    config = ModelConfig.from_dict(preset["model"])
    sched = TrainSchedule.from_dict(preset["schedule"])
    assert (config.depth, config.inducing, sched.steps) == (2, 20, 2000)

    model = DeepWishartProcess.initialize(config, x, rng.split(3))
    initial = np.array([inference.elbo_batch(model, x, y, 256, config.train_samples, rng.split(4).split(i),
                                             with_gradients=False).total for i in range(30)])
    path = str(tmp_path / "trace.jsonl")
    result = inference.train(model, x, y, sched, rng.split(5), trace_path=path)
    elbo = inference.smoothed([r["elbo"] for r in result.trace], 50)
    assert elbo[-1] - initial.mean() > 5 * initial.std(ddof=1)

    # the same seed replays the same steps bit for bit
    replay = DeepWishartProcess.initialize(config, x, rng.split(3))
    short = TrainSchedule.from_dict({**preset["schedule"], "steps": 20})
    replay_path = str(tmp_path / "replay.jsonl")
    inference.train(replay, x, y, short, rng.split(5), trace_path=replay_path)
    with open(path) as f:
        head = f.read().splitlines()[:20]
    with open(replay_path) as f:
        assert f.read().splitlines() == head


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def test_evaluate_elbo_is_per_point():
    model, x, y = make_model(perturb=0.05)
    per_point = inference.evaluate_elbo(model, x, y, 2, RngStream(0))
    est = inference.elbo_batch(model, x, y, len(x), 2, RngStream(0), with_gradients=False)
    assert per_point == pytest.approx(est.total / len(x))


def test_loglik_with_identical_samples():
    model, x, y = make_model(depth=0, perturb=0.05)
    one = inference.test_loglik(model, x, y, 1, RngStream(0))
    many = inference.test_loglik(model, x, y, 7, RngStream(0))
    assert many == pytest.approx(one, rel=1e-12)


def test_loglik_of_perfect_prediction():
    model, x, y = make_model(depth=0, n=6, inducing=6)
    z = model.params[param_key(0, "inducing_inputs")]
    targets = np.cos(z[:, 0])
    kernel = model.output_params(model.params).kernel
    chol = np.linalg.cholesky(kernel_blocks(InputBlocks(z, np.zeros((0, 2))), kernel).ii)
    model.params[param_key(1, "means")] = np.linalg.solve(chol, targets[:, None])
    model.params[param_key(1, "chol_raw")] = np.diag(ad.inv_softplus(np.full(6, 1e-8)))
    model.params[param_key(1, "noise_raw")] = ad.inv_softplus(1.0)
    ll = inference.test_loglik(model, z, targets, 1, RngStream(0))
    assert ll == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-4)


def test_loglik_unit_conversion():
    model, x, y = make_model(depth=1, perturb=0.05)
    standardised = inference.test_loglik(model, x, y, 3, RngStream(2))
    original = inference.test_loglik(model, x, y, 3, RngStream(2), target_scale=4.0)
    assert original == pytest.approx(standardised - np.log(4.0), rel=1e-12)


def test_loglik_rejects_zero_samples():
    model, x, y = make_model()
    with pytest.raises(DomainError):
        inference.test_loglik(model, x, y, 0, RngStream(0))


def test_smoothed():
    np.testing.assert_allclose(inference.smoothed([1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5])
    with pytest.raises(DomainError):
        inference.smoothed([1.0], 3)
