import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exoendo.envs import (
    LinearMdpConfig,
    RoutingMdpConfig,
    covariance_probe,
    exo_reward,
    make_linear_mdp,
    make_routing_mdp,
)
from exoendo.errors import ConfigError, DomainError


def _uniform_policy(env):
    grid = np.asarray(env.config.action_grid)
    return lambda obs, rng: [grid[rng.integers(len(grid))]]


def test_linear_mdp_deterministic_construction():
    a = make_linear_mdp(LinearMdpConfig(n_exo=3, n_end=2, seed=4))
    b = make_linear_mdp(LinearMdpConfig(n_exo=3, n_end=2, seed=4))
    for name in ("m_exo", "m_end", "m_a", "mix"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("seed", range(5))
def test_row_sums(seed):
    env = make_linear_mdp(LinearMdpConfig(n_exo=4, n_end=3, seed=seed))
    for mat in (env.m_exo, env.m_end, env.mix):
        np.testing.assert_allclose(mat.sum(axis=1), 0.99, atol=1e-9)


def test_partial_disjoint_action_matrix():
    cfg = LinearMdpConfig(n_exo=15, n_end=15, n_action_vars=8, action_matrix_kind="partial_disjoint", seed=1)
    m_a = make_linear_mdp(cfg).m_a
    nonzero_rows = np.flatnonzero(np.any(m_a != 0, axis=1))
    assert len(nonzero_rows) == 8
    assert np.all(np.count_nonzero(m_a[nonzero_rows], axis=1) == 1)
    assert np.all(np.count_nonzero(m_a, axis=0) == 1)


def test_partial_kinds_reject_too_many_actions():
    with pytest.raises(ConfigError):
        LinearMdpConfig(n_exo=2, n_end=2, n_action_vars=3, action_matrix_kind="partial_dense")


def test_fixed_point_with_zero_noise():
    # the default grid has no exact zero, so use one that does
    env = make_linear_mdp(LinearMdpConfig(n_exo=3, n_end=2, exo_noise_std=0.0, end_noise_std=0.0,
                                          action_grid=(-1.0, 0.0, 1.0)))
    env._e, env._x = np.zeros(2), np.zeros(3)
    res = env.step([0.0])
    e, x = env.oracle.hidden_state
    np.testing.assert_array_equal(e, 0)
    np.testing.assert_array_equal(x, 0)
    assert res.reward_parts == (pytest.approx(0.0), pytest.approx(np.exp(-1)))


def test_endo_reward_maximal_at_one():
    env = make_linear_mdp(LinearMdpConfig(n_exo=2, n_end=2))
    env._e = np.array([0.5, 1.5])
    assert env.step([env.config.action_grid[0]]).reward_parts[1] == pytest.approx(1.0)


def test_r3_reward_zero_at_origin():
    assert exo_reward("r3", np.zeros(3)) == pytest.approx(0.0, abs=1e-15)


def test_off_grid_action_rejected():
    env = make_linear_mdp(LinearMdpConfig(n_exo=2, n_end=2))
    with pytest.raises(DomainError):
        env.step([0.123])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_exo_chain_ignores_actions(seed):
    cfg = LinearMdpConfig(n_exo=3, n_end=2, seed=seed)
    grid = np.asarray(cfg.action_grid)
    r = np.random.default_rng(seed)
    xs = []
    for _ in range(2):
        env = make_linear_mdp(cfg)
        env.reset(seed=7)
        traj = []
        for _ in range(20):
            env.step([grid[r.integers(len(grid))]])
            traj.append(env.oracle.hidden_state[1])
        xs.append(np.array(traj))
    np.testing.assert_array_equal(xs[0], xs[1])


@pytest.mark.parametrize("seed", range(5))
def test_observation_invertible(seed):
    env = make_linear_mdp(LinearMdpConfig(n_exo=5, n_end=5, seed=seed))
    obs = env.step([env.config.action_grid[3]]).observation
    e, x = env.oracle.hidden_state
    np.testing.assert_allclose(env.mix_inv @ obs, np.concatenate([e, x]), atol=1e-8)


# routing ------------------------------------------------------------------

def test_routing_deterministic_edge():
    env = make_routing_mdp()
    env._node = 5
    res = env.step(0)
    assert env.node == 8 and res.done


def test_routing_stochastic_frequencies():
    env = make_routing_mdp(RoutingMdpConfig(stochastic=True, seed=3))
    n = 100_000
    counts = {1: 0, 2: 0, 4: 0}
    for _ in range(n):
        env._node = 0
        env.step(0)
        counts[env.node] += 1
    for node, p in zip((1, 2, 4), (0.5, 0.3, 0.2)):
        assert abs(counts[node] / n - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_routing_zero_exo_contributes_nothing():
    env = make_routing_mdp()
    env.reset(seed=0)
    res = env.step(1)
    assert res.reward_parts[0] == 0.0
    assert res.reward == res.reward_parts[1] == -env.config.edge_costs[(0, 2)]


def test_routing_invalid_action():
    env = make_routing_mdp()
    env._node = 5
    with pytest.raises(DomainError):
        env.step(1)


@pytest.mark.parametrize("stochastic", [False, True])
def test_routing_terminates_within_five_steps(stochastic):
    env = make_routing_mdp(RoutingMdpConfig(stochastic=stochastic, seed=1))
    rng = np.random.default_rng(0)
    for _ in range(200):
        env.reset()
        for t in range(6):
            k = int(env.action_mask()[0].sum())
            if env.step(int(rng.integers(k))).done:
                break
        assert t < 5


def test_routing_observation_layout():
    env = make_routing_mdp()
    obs = env.reset(seed=0)
    assert obs.shape == (13,)
    assert obs[0] == 1 and obs[1:9].sum() == 0


# covariance probe ---------------------------------------------------------

class _ConstantEnv:
    def reset(self, seed=None):
        return np.zeros(1)

    def step(self, action):
        from exoendo.envs import StepResult
        return StepResult(np.zeros(1), 3.0, (1.0, 2.0), False)


class _IndependentEnv:
    def __init__(self):
        self.rng = np.random.default_rng(0)

    def reset(self, seed=None):
        return np.zeros(1)

    def step(self, action):
        from exoendo.envs import StepResult
        a, b = self.rng.standard_normal(2)
        return StepResult(np.zeros(1), a + b, (a, b), False)


def test_probe_constant_rewards():
    assert covariance_probe(_ConstantEnv(), lambda o, r: 0, episodes=2, steps_per_episode=50) == (0.0, 0.0)


def test_probe_independent_streams():
    n = 20_000
    var, neg2cov = covariance_probe(_IndependentEnv(), lambda o, r: 0, episodes=1, steps_per_episode=n)
    assert var == pytest.approx(1.0, rel=0.05)
    assert abs(neg2cov) < 3 * 2 / np.sqrt(n)


def test_probe_needs_samples():
    with pytest.raises(DomainError):
        covariance_probe(_ConstantEnv(), lambda o, r: 0, episodes=0)


def test_probe_anticorrelated_family():
    """Var(R_exo) near 0.026 and -2 Cov near 0.04, each within 30 percent (mean over 5 seeds)."""
    vals = []
    for seed in range(5):
        env = make_linear_mdp(LinearMdpConfig(n_exo=1, n_end=1, reward_kind="anticorrelated", seed=seed))
        vals.append(covariance_probe(env, _uniform_policy(env), episodes=30, seed=seed))
    var, neg2cov = np.mean(vals, axis=0)
    assert 0.7 * 0.026 <= var <= 1.3 * 0.026
    assert 0.7 * 0.04 <= neg2cov <= 1.3 * 0.04
