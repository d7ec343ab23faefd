"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from exoendo.decompose import TransitionDataset
from exoendo.envs import LinearMdpConfig, make_linear_mdp


def uniform_transitions(env, steps: int, seed: int) -> TransitionDataset:
    """Transitions under a uniformly random grid policy."""
    rng = np.random.default_rng(seed)
    n_choices = env.action_choices
    obs = env.reset(seed=seed)
    s, a, r, sn = [], [], [], []
    for _ in range(steps):
        idx = [int(rng.integers(k)) for k in n_choices]
        res = env.step(env.action_from_indices(idx))
        s.append(obs)
        a.append(env.action_features(idx))
        r.append(res.reward)
        sn.append(res.observation)
        obs = env.reset() if res.done else res.observation
    return TransitionDataset.from_arrays(np.array(s), np.array(a), np.array(r), np.array(sn))


def linear_dataset(n_end: int, n_exo: int, steps: int, seed: int, **kw):
    env = make_linear_mdp(LinearMdpConfig(n_exo=n_exo, n_end=n_end, seed=seed, **kw))
    return env, uniform_transitions(env, steps, seed)


def _draw(rng, probs):
    """One categorical draw per row of ``probs``."""
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), probs.shape[1] - 1)


def simulate_factored_returns(fmdp, start, horizon, n, seed):
    """Monte Carlo exo and endo returns from ``start = (e, x)`` with Gaussian reward noise."""
    rng = np.random.default_rng(seed)
    e = np.full(n, start[0])
    x = np.full(n, start[1])
    b_x, b_e = np.zeros(n), np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        a = _draw(rng, fmdp.policy[e, x])
        r_x = fmdp.exo_mean[x] + np.sqrt(fmdp.exo_var[x]) * rng.standard_normal(n)
        r_e = fmdp.endo_mean[e, x, a] + np.sqrt(fmdp.endo_var[e, x, a]) * rng.standard_normal(n)
        b_x += disc * r_x
        b_e += disc * r_e
        x_next = _draw(rng, fmdp.exo_transition[x])
        if fmdp.full_setting:
            e = _draw(rng, fmdp.endo_transition[e, x, a, x_next])
        else:
            e = _draw(rng, fmdp.endo_transition[e, x, a])
        x = x_next
        disc *= fmdp.gamma
    return b_x, b_e


def variance_with_se(samples):
    """Sample variance and its standard error."""
    c = samples - samples.mean()
    var = np.mean(c ** 2)
    return var, np.sqrt(max(np.mean(c ** 4) - var ** 2, 0.0) / len(samples))


def covariance_with_se(a, b):
    prod = (a - a.mean()) * (b - b.mean())
    return prod.mean(), prod.std() / np.sqrt(len(a))
