import math
from itertools import product

import numpy as np
import pytest

from osaka.algorithms import (
    AdamState,
    BgdState,
    ConfigError,
    LearnerConfig,
    PretrainConfig,
    adam_step,
    bgd_step,
    make_learner,
    meta_loss,
    pretrain_maml,
    shift_detected,
    update_modulation,
)
from osaka.eval import boundary_metrics, run_episode
from osaka.models import NetSpec, inner_adapt, init_params, loss_fn
from osaka.ndcore import NonFiniteError, Tape, Tensor
from osaka.stream import PoolConfig, Stream, StreamConfig, build_pools, pretrain_episode

from .helpers import bgd_loop_oracle, no_pap_reference

SMALL = NetSpec(16, (12,), 5, seed=3)


@pytest.fixture(scope="module")
def small_stream():
    cfg = StreamConfig(alpha=0.9, episode_length=120, seed=2)
    return Stream(cfg, build_pools(cfg))


@pytest.fixture(scope="module")
def phi():
    return init_params(SMALL, inner_lr=0.2)


# ---------------------------------------------------------------- ADAM


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    out = adam_step(AdamState.zeros_like(p), p, [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(out[0], p[0])


@pytest.mark.parametrize("g", [3.0, -0.5, 1e-3])
def test_adam_first_step_closed_form(g):
    out = adam_step(AdamState.zeros_like([np.zeros(1)]), [np.zeros(1)], [np.array([g])], lr=0.01)
    # m_hat = g and v_hat = g**2 after bias correction
    assert out[0][0] == pytest.approx(-0.01 * g / (abs(g) + 1e-8), abs=1e-15)


def test_adam_quadratic_descent():
    w = [np.array([1.0])]
    state = AdamState.zeros_like(w)
    path = [abs(w[0][0])]
    for _ in range(100):
        w = adam_step(state, w, [w[0].copy()], lr=0.005)
        path.append(abs(w[0][0]))
    assert all(b < a for a, b in zip(path, path[1:]))
    assert state.step == 100


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.zeros_like([np.zeros(2)]), [np.zeros(2)], [np.array([1.0, np.nan])], 0.1)


# ---------------------------------------------------------------- BGD


@pytest.mark.parametrize("beta,sigma0", list(product([0.5, 1.0, 10.0], [0.001, 0.01, 0.1])))
def test_bgd_matches_loop_oracle(beta, sigma0):
    rng = np.random.default_rng(0)
    a, c = rng.uniform(0.5, 3.0, 10), rng.standard_normal(10)
    grad_fn = lambda v: a * (np.asarray(v) - c)  # noqa: E731
    state = BgdState.init(rng.standard_normal(10), sigma0, mc_samples=5, beta=beta)
    for _ in range(3):
        eps = np.random.default_rng(42).standard_normal((5, 10))
        want_mu, want_sigma = bgd_loop_oracle(state.mu, state.sigma, beta, grad_fn, eps)
        state = bgd_step(state, grad_fn, np.random.default_rng(42))
        np.testing.assert_allclose(state.mu, want_mu, atol=1e-12, rtol=0)
        np.testing.assert_allclose(state.sigma, want_sigma, atol=1e-12, rtol=0)
        assert np.all(state.sigma > 0)


def test_bgd_zero_gradient_is_null_update():
    state = BgdState.init(np.arange(3.0), 0.1)
    new = bgd_step(state, lambda v: np.zeros(3), np.random.default_rng(0))
    np.testing.assert_array_equal(new.mu, state.mu)
    np.testing.assert_array_equal(new.sigma, state.sigma)


def test_bgd_sigma_domain_error():
    # g * eps strongly negative makes 1 + sigma * E[g eps] / 2 negative
    state = BgdState.init(np.zeros(1), 1.0, mc_samples=1)
    with pytest.raises(NonFiniteError):
        bgd_step(state, lambda v: -100.0 * np.sign(v) * np.ones(1), np.random.default_rng(1))


# ---------------------------------------------------------------- modulation and detector


def test_update_modulation_values():
    assert update_modulation(1.3, 1.3) == 0.5
    assert update_modulation(2.0, 1.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert update_modulation(2.0, 1.0) == pytest.approx(0.73106, abs=1e-5)
    assert update_modulation(1e4, 1.0) == pytest.approx(1.0)
    assert update_modulation(0.0, 1e3) < 1e-300 or update_modulation(0.0, 1e3) == 0.0
    xs = np.linspace(0, 6, 50)
    vals = [update_modulation(x, 2.0) for x in xs]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        update_modulation(1.0, 0.0)


def test_detector_on_constructed_loss_profile():
    rng = np.random.default_rng(0)
    T = 50
    true = np.zeros(T, bool)
    true[[7, 19, 31, 44]] = True
    incurred = rng.uniform(0.1, 0.6, T)
    virtual = incurred - rng.uniform(-0.3, 0.49, T)  # within-task improvement < 0.5
    incurred[true] += rng.uniform(2.0, 3.5, true.sum())  # spikes of at least 2
    detected = np.array([shift_detected(i, v, 1.0) for i, v in zip(incurred, virtual)])
    np.testing.assert_array_equal(detected, true)
    assert boundary_metrics(true, detected) == (1.0, 1.0, 1.0)


# ---------------------------------------------------------------- learner construction


def test_config_validation():
    with pytest.raises(ConfigError):
        LearnerConfig(kind="cmaml", gamma=0.0)
    with pytest.raises(ConfigError):
        LearnerConfig(kind="cmaml", lam=-1.0)
    with pytest.raises(ConfigError):
        LearnerConfig(kind="nope")
    cfg = LearnerConfig.from_dict({"kind": "cmaml", "lambda": 2.5, "gamma": "inf"})
    assert cfg.lam == 2.5 and cfg.gamma == math.inf
    assert LearnerConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kind", ["fine_tuning", "maml", "anil", "cmaml", "cmaml_no_pap"])
def test_missing_checkpoint(kind):
    with pytest.raises(ConfigError):
        make_learner(LearnerConfig(kind=kind), SMALL, None)


def test_scratch_learners_need_no_checkpoint():
    for kind in ("online_adam", "bgd", "meta_bgd"):
        make_learner(LearnerConfig(kind=kind), SMALL, None)
    make_learner(LearnerConfig(kind="cmaml", pretrained=False), SMALL, None)


ALL_KINDS = ["online_adam", "fine_tuning", "maml", "anil", "bgd", "meta_bgd", "cmaml", "cmaml_no_pap"]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_loss_is_scored_before_update(kind, phi, small_stream):
    learner = make_learner(LearnerConfig(kind=kind, gamma=0.5, inner_steps=2), SMALL, phi, seed=1)
    for t in range(40):
        batch = small_stream[t].visible()
        before = learner.current_params()
        learner.predict(batch.x)
        incurred = learner.incurred_loss(batch)
        assert incurred == pytest.approx(float(loss_fn(before, batch.x, batch.y).data), abs=1e-12)
        learner.update(batch)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_learners_are_deterministic(kind, phi, small_stream):
    cfg = LearnerConfig(kind=kind, gamma=0.5)
    a = run_episode(make_learner(cfg, SMALL, phi, seed=4), small_stream)
    b = run_episode(make_learner(cfg, SMALL, phi, seed=4), small_stream)
    assert a.loss.tobytes() == b.loss.tobytes()
    assert a.detected_boundary.tobytes() == b.detected_boundary.tobytes()


def test_maml_slow_weights_frozen(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="maml"), SMALL, phi)
    run_episode(learner, small_stream)
    assert learner.phi.flat().tobytes() == phi.flat().tobytes()


def test_anil_adapts_only_head(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="anil", inner_steps=3), SMALL, phi)
    for t in range(5):
        learner.update(small_stream[t].visible())
        for (w0, b0), (w1, b1) in zip(phi.layers[:-1], learner.theta.layers[:-1]):
            assert w0.data.tobytes() == w1.data.tobytes() and b0.data.tobytes() == b1.data.tobytes()
        assert not np.array_equal(phi.layers[-1][0].data, learner.theta.layers[-1][0].data)


def test_bgd_sigma_stays_positive(small_stream):
    learner = make_learner(LearnerConfig(kind="bgd", sigma0=0.1, beta=10.0), SMALL, None)
    for t in range(30):
        learner.update(small_stream[t].visible())
        assert np.all(learner.state.sigma > 0)


# ---------------------------------------------------------------- C-MAML


def test_infinite_gamma_freezes_phi(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml", gamma=math.inf), SMALL, phi)
    trace = run_episode(learner, small_stream)
    assert learner.phi.flat().tobytes() == phi.flat().tobytes()
    assert not trace.detected_boundary.any()


def test_large_lambda_silences_modulation(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml", gamma=0.5, lam=1e6), SMALL, phi)
    trace = run_episode(learner, small_stream)
    factors = trace.modulation[~np.isnan(trace.modulation)]
    assert len(factors) > 0
    assert np.all(factors < 1e-6)


def test_um_disabled_gives_unit_factor(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml", gamma=0.5, um=False), SMALL, phi)
    trace = run_episode(learner, small_stream)
    factors = trace.modulation[~np.isnan(trace.modulation)]
    assert len(factors) > 0 and np.all(factors == 1.0)


def test_buffer_spans_one_detected_segment(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml", gamma=0.7), SMALL, phi)
    since = []
    for t in range(len(small_stream)):
        batch = small_stream[t].visible()
        learner.predict(batch.x)
        diag = learner.update(batch)
        if diag.detected_boundary:
            since = []
            assert learner.buffer == []
        else:
            since.append(batch)
            assert len(learner.buffer) == len(since)
            assert all(a is b for a, b in zip(learner.buffer, since))


def test_empty_buffer_boundary_skips_consolidation(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml", gamma=-math.inf), SMALL, phi)
    batch = small_stream[0].visible()
    learner.predict(batch.x)
    diag = learner.update(batch)
    assert diag.detected_boundary and math.isnan(diag.modulation)
    assert learner.phi.flat().tobytes() == phi.flat().tobytes()
    np.testing.assert_array_equal(learner.theta.flat(), inner_adapt(phi, batch.x, batch.y).flat())


def test_always_firing_detector_variants_coincide(phi, small_stream):
    traces = []
    for kind in ("cmaml", "cmaml_no_pap"):
        learner = make_learner(LearnerConfig(kind=kind, gamma=-math.inf), SMALL, phi)
        traces.append(run_episode(learner, small_stream))
        assert learner.phi.flat().tobytes() == phi.flat().tobytes()
    maml = run_episode(make_learner(LearnerConfig(kind="maml"), SMALL, phi), small_stream)
    for tr in traces:
        assert tr.loss.tobytes() == maml.loss.tobytes()
        assert tr.detected_boundary.all()


@pytest.mark.parametrize("gamma", [math.inf, 0.3])
def test_no_pap_matches_reference_trace(phi, small_stream, gamma):
    cfg = LearnerConfig(kind="cmaml_no_pap", gamma=gamma, lam=0.5, eta=0.01)
    learner = make_learner(cfg, SMALL, phi)
    batches = [small_stream[t].visible() for t in range(60)]
    ref, ref_layers, ref_lr = no_pap_reference(phi, batches, gamma, 0.5, 0.01)
    for batch, (incurred, detected) in zip(batches, ref):
        learner.predict(batch.x)
        assert learner.incurred_loss(batch) == pytest.approx(incurred, abs=1e-12)
        assert learner.update(batch).detected_boundary == detected
    for (w, b), (rw, rb) in zip(learner.phi.layers, ref_layers):
        np.testing.assert_allclose(w.data, rw, atol=1e-12, rtol=0)
        np.testing.assert_allclose(b.data, rb, atol=1e-12, rtol=0)
    np.testing.assert_allclose(learner.phi.inner_lr_values(), np.exp(ref_lr), atol=1e-12, rtol=0)


def test_no_pap_fast_weights_use_only_current_batch(phi, small_stream):
    learner = make_learner(LearnerConfig(kind="cmaml_no_pap", gamma=0.5, eta=0.01), SMALL, phi)
    for t in range(30):
        batch = small_stream[t].visible()
        slow = learner.phi
        learner.predict(batch.x)
        learner.update(batch)
        expected = inner_adapt(slow, batch.x, batch.y)
        np.testing.assert_array_equal(learner.theta.flat(False), expected.flat(False))


# ---------------------------------------------------------------- pretraining


def test_zero_epochs_returns_init():
    cfg = StreamConfig()
    result = pretrain_maml(SMALL, cfg, build_pools(cfg), PretrainConfig(epochs=0))
    assert result.params.flat().tobytes() == init_params(SMALL, 0.1).flat().tobytes()


def test_meta_loss_modes_agree_with_zero_inner_lr():
    cfg = StreamConfig()
    episode = pretrain_episode(cfg, build_pools(cfg), 3, 5, np.random.default_rng(0))
    phi = init_params(SMALL)
    phi = phi.with_tensors(phi.weight_tensors() + [Tensor(-np.inf)] * 2)
    grads = []
    for exact in (True, False):
        with Tape() as tape:
            w = phi.watch(tape)
            value, _ = meta_loss(w, episode, 1, exact)
            grads.append([g.data for g in tape.grad(value, w.weight_tensors())])
    for a, b in zip(*grads):
        np.testing.assert_array_equal(a, b)


def test_short_pretraining_reduces_meta_loss():
    cfg = StreamConfig(pools=PoolConfig(n_pretrain=32))
    result = pretrain_maml(SMALL, cfg, build_pools(cfg), PretrainConfig(epochs=3, steps_per_epoch=30))
    assert result.epoch_loss[-1] < result.epoch_loss[0]
