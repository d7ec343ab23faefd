import numpy as np
import pytest
from helpers import linear_dataset, uniform_transitions
from scipy.linalg import null_space

from exoendo.decompose import ExoProjection, grds
from exoendo.envs import LinearMdpConfig, exo_reward, make_linear_mdp
from exoendo.errors import DimensionError
from exoendo.manifold import StiefelPoint
from exoendo.regress import (
    ExoRewardEstimator,
    RegressionSchedule,
    RewardModel,
    endo_reward,
    fit_linear,
    fit_mlp_phase1,
    model_from_text,
    model_to_text,
    update_mlp_online,
)


def test_fit_linear_hand_example():
    model = fit_linear([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    assert model.params[0][0] == pytest.approx(2.0)
    assert model.params[1][0] == pytest.approx(0.0, abs=1e-12)


def test_fit_linear_exact_and_orthogonal_residuals(rng):
    x = rng.standard_normal((200, 3))
    r = x @ [1.0, -2.0, 0.5] + 4.0
    model = fit_linear(x, r)
    rss = np.sum((model.predict(x) - r) ** 2)
    assert rss / np.sum(r ** 2) < 1e-18
    noisy = r + rng.standard_normal(200)
    resid = noisy - fit_linear(x, noisy).predict(x)
    design = np.hstack([x, np.ones((200, 1))])
    np.testing.assert_allclose(design.T @ resid, 0, atol=1e-8)


def test_fit_linear_independent_target(rng):
    n = 40_000
    x, r = rng.standard_normal((n, 2)), 1.5 + rng.standard_normal(n)
    model = fit_linear(x, r)
    assert np.max(np.abs(model.params[0])) < 5 / np.sqrt(n)
    assert model.predict(np.zeros(2)) == pytest.approx(r.mean(), abs=5 / np.sqrt(n))


def test_fit_linear_rank_deficient(rng):
    x = rng.standard_normal((50, 1))
    model = fit_linear(np.hstack([x, x]), x[:, 0])
    assert model.diagnostics and "rank" in model.diagnostics[0]


def test_mlp_constant_target(rng):
    x = rng.standard_normal((500, 3))
    model = fit_mlp_phase1(x, np.full(500, 2.5))
    np.testing.assert_allclose(model.predict(rng.standard_normal((20, 3))), 2.5, atol=1e-3)


def _holdout_rmse(x, r, n_train, seed=0):
    model = fit_mlp_phase1(x[:n_train], r[:n_train], seed=seed)
    return np.sqrt(np.mean((model.predict(x[n_train:]) - r[n_train:]) ** 2)), r.std()


@pytest.mark.slow
def test_mlp_linear_target(rng):
    x = rng.standard_normal((4000, 5))
    rmse, sd = _holdout_rmse(x, 3 * x.mean(axis=1), 3000)
    assert rmse < 0.05 * sd


@pytest.mark.slow
def test_mlp_two_mode_target(rng):
    x = rng.standard_normal((6000, 5)) * 1.5
    r = np.array([exo_reward("r3", row) for row in x])
    rmse, sd = _holdout_rmse(x, r, 5000)
    assert rmse < 0.15 * sd


def _small_mlp(rng):
    x = rng.standard_normal((256, 2))
    model = fit_mlp_phase1(x, x.sum(axis=1), RegressionSchedule(phase1_max_epochs=2))
    return model, x


def test_online_empty_batch_leaves_model(rng):
    model, _ = _small_mlp(rng)
    before = [p.copy() for p in model.params]
    update_mlp_online(model, np.zeros((0, 2)), np.zeros(0))
    for a, b in zip(before, model.params):
        np.testing.assert_array_equal(a, b)


def test_online_zero_learning_rate_bitwise(rng):
    x = rng.standard_normal((256, 2))
    model = fit_mlp_phase1(x, x.sum(axis=1), RegressionSchedule(learning_rate=0.0, phase1_max_epochs=3))
    before = [p.copy() for p in model.params]
    update_mlp_online(model, x, x.sum(axis=1))
    for a, b in zip(before, model.params):
        np.testing.assert_array_equal(a, b)


def test_online_updates_decrease_loss(rng):
    model, x = _small_mlp(rng)
    r = x.sum(axis=1)
    losses = []
    for _ in range(50):
        update_mlp_online(model, x, r)
        losses.append(np.mean((model.predict(x) - r) ** 2))
    assert np.sum(np.diff(losses) > 0) <= 5
    assert losses[-1] < losses[0]


def test_online_shape_mismatch(rng):
    model, _ = _small_mlp(rng)
    with pytest.raises(DimensionError):
        update_mlp_online(model, np.zeros((4, 2)), np.zeros(3))


def test_endo_reward_zero_rank(rng):
    s = rng.standard_normal((100, 4))
    r = rng.standard_normal(100) + 3.0
    proj = ExoProjection(StiefelPoint.empty(4), center=s.mean(axis=0))
    model = fit_linear(proj.features(s), r)
    np.testing.assert_allclose(endo_reward(model, proj, s, r), r - r.mean(), atol=1e-12)


def test_endo_reward_zero_model(rng):
    proj = ExoProjection(StiefelPoint(np.eye(3)[:, :2]))
    model = RewardModel("linear", 2, [np.zeros(2), np.zeros(1)])
    s, r = rng.standard_normal((5, 3)), rng.standard_normal(5)
    np.testing.assert_array_equal(endo_reward(model, proj, s, r), r)


@pytest.fixture(scope="module")
def linear5():
    env, data = linear_dataset(2, 3, 3000, seed=0)
    return env, data


def _exo_parts(env, data):
    # replay the same seeded trajectory to read the oracle reward split
    env2 = make_linear_mdp(env.config)
    env2.reset(seed=0)
    parts = []
    for a in data.a.data:
        parts.append(env2.step(a).reward_parts)
    return np.array(parts)


def test_endo_reward_recovers_true_split(linear5):
    env, data = linear5
    parts = _exo_parts(env, data)
    raw_s = data.s.data + data.center
    np.testing.assert_allclose(parts.sum(axis=1), data.r, atol=1e-12)
    proj = grds(data, objective_mode="simplified", seed=0).projection
    model = fit_linear(proj.features(raw_s), parts[:, 0])
    endo = endo_reward(model, proj, raw_s, data.r)
    rmse = np.sqrt(np.mean((endo - parts[:, 1]) ** 2))
    assert rmse < 0.1 * parts[:, 0].std()


def test_exact_subspace_gives_exact_split(linear5):
    env, data = linear5
    parts = _exo_parts(env, data)
    raw_s = data.s.data + data.center
    u = env.mix[:, :2] @ env.m_a
    proj = ExoProjection(StiefelPoint(null_space(u.T)), center=data.center)
    model = fit_linear(proj.features(raw_s), parts[:, 0])
    np.testing.assert_allclose(endo_reward(model, proj, raw_s, data.r), parts[:, 1], atol=1e-9)


@pytest.mark.parametrize("mode", ["single_linear", "online_mlp"])
def test_variance_reduction_linear_family(linear5, mode):
    _, data = linear5
    raw_s = data.s.data + data.center
    proj = grds(data, objective_mode="simplified", seed=0).projection
    est = ExoRewardEstimator(RegressionSchedule(mode=mode), proj, seed=0)
    endo = est.fit_initial(raw_s, data.r)
    assert endo.var() < data.r.var()


def test_anticorrelated_variance_not_increased():
    env = make_linear_mdp(LinearMdpConfig(n_exo=1, n_end=1, reward_kind="anticorrelated", seed=0))
    data = uniform_transitions(env, 10_000, seed=0)
    raw_s = data.s.data + data.center
    proj = grds(data, objective_mode="simplified", seed=0).projection
    est = ExoRewardEstimator(RegressionSchedule(mode="single_linear"), proj)
    endo = est.fit_initial(raw_s, data.r)
    assert endo.var() <= 1.05 * data.r.var()


def test_estimator_repeated_linear_refits(linear5):
    _, data = linear5
    raw_s = data.s.data + data.center
    proj = grds(data, objective_mode="simplified", seed=0).projection
    est = ExoRewardEstimator(RegressionSchedule(mode="repeated_linear", repeated_interval=100), proj)
    est.fit_initial(raw_s[:1000], data.r[:1000])
    first = est.model
    for s, r in zip(raw_s[1000:1100], data.r[1000:1100]):
        est.transform(s, r)
    assert est.model is not first
    ref = fit_linear(proj.features(raw_s[:1100]), data.r[:1100])
    np.testing.assert_allclose(est.model.params[0], ref.params[0], atol=1e-10)


def test_model_text_round_trip(rng):
    model, x = _small_mlp(rng)
    back = model_from_text(model_to_text(model))
    np.testing.assert_array_equal(back.predict(x), model.predict(x))
    lin = fit_linear(x, x[:, 0])
    np.testing.assert_array_equal(model_from_text(model_to_text(lin)).predict(x), lin.predict(x))
