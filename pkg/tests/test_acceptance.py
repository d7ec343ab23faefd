"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from helpers import (  # noqa: E402
    covariance_with_se,
    linear_dataset,
    simulate_factored_returns,
    uniform_transitions,
    variance_with_se,
)

from exoendo.analysis import (  # noqa: E402
    DbnTemplate,
    action_disconnected,
    bellman_split_check,
    covariance_dp,
    random_factored_mdp,
    variance_dp,
)
from exoendo.cli import run_experiment, sensitivity_sweep  # noqa: E402
from exoendo.config import ExperimentConfig  # noqa: E402
from exoendo.decompose import grds, oracle_grds_tabular  # noqa: E402
from exoendo.envs import LinearMdpConfig, counterexample_tabular_model, covariance_probe, make_linear_mdp  # noqa: E402
from exoendo.manifold import minimize  # noqa: E402
from exoendo.regress import ExoRewardEstimator, RegressionSchedule  # noqa: E402
from exoendo.rl import RunSchedule  # noqa: E402
from exoendo.statcore import ccc, cmi_tabular  # noqa: E402

RESULTS = {}


def _record(number, title, passed, detail, elapsed, limit):
    passed = bool(passed) and elapsed < limit
    line = (f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail} "
            f"({elapsed:.1f}s, limit {limit:.0f}s)")
    RESULTS[number] = line
    print(line)
    return passed


# 1 ---------------------------------------------------------------------------

def check_ccc():
    t0 = time.perf_counter()
    ci, dep = [], []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        n = 10_000
        z = rng.standard_normal((n, 1))
        x = z + rng.standard_normal((n, 1))
        y = z + rng.standard_normal((n, 1))
        ci.append(ccc(x, y, z))
        dep.append(ccc(x, x + 0.1 * rng.standard_normal((n, 1)), z))
    ok = max(ci) < 0.02 and min(dep) > 0.2
    detail = f"max CCC under independence {max(ci):.4f} (< 0.02), min dependent {min(dep):.3f} (> 0.2)"
    return _record(1, "CCC conditional-independence fidelity", ok, detail, time.perf_counter() - t0, 5)


# 2 ---------------------------------------------------------------------------

def check_optimizer():
    t0 = time.perf_counter()
    val_err, ang_err = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((6, 6))
        a = (a + a.T) / 2
        vals, vecs = np.linalg.eigh(a)
        res = minimize(lambda w: float(np.trace(w.T @ a @ w)), 6, 1, rng_seed=seed, gradient=lambda w: 2 * a @ w)
        val_err = max(val_err, abs(res.final_value - vals[0]))
        cos = min(1.0, abs(float(res.point.w[:, 0] @ vecs[:, 0])))
        ang_err = max(ang_err, float(np.arccos(cos)))
    ok = val_err < 1e-6 and ang_err < 1e-3
    detail = f"max |f - lambda_min| {val_err:.2e} (< 1e-6), max eigenvector angle {ang_err:.2e} rad (< 1e-3)"
    return _record(2, "Manifold optimizer vs eigendecomposition", ok, detail, time.perf_counter() - t0, 10)


# 3 ---------------------------------------------------------------------------

def check_ranks():
    t0 = time.perf_counter()
    hits = {}
    for (m, n, L, target) in [(2, 3, 2000, 4), (5, 5, 3000, 9)]:
        ranks = []
        for seed in range(10):
            _, data = linear_dataset(m, n, L, seed)
            ranks.append(grds(data, objective_mode="simplified", seed=seed).rank)
        hits[m + n] = (sum(r == target for r in ranks), ranks)
    ok = hits[5][0] >= 8 and hits[10][0] >= 8
    detail = (f"5-D rank 4 in {hits[5][0]}/10 {hits[5][1]}, 10-D rank 9 in {hits[10][0]}/10 {hits[10][1]} "
              f"(need >= 8 each)")
    return _record(3, "Simplified-GRDS rank reproduction", ok, detail, time.perf_counter() - t0, 600)


# 4 ---------------------------------------------------------------------------

def check_tabular_oracle():
    t0 = time.perf_counter()
    model = counterexample_tabular_model(seed=0)
    found = oracle_grds_tabular(model)
    template = DbnTemplate.from_parents([["S0", "S1", "S1'"], ["S1"], ["S0", "S2", "A"]])
    structural = action_disconnected(template)
    single = cmi_tabular(model, [0])
    ok = found == (0, 1) and set(found) == set(structural) and single > 1e-9
    detail = (f"oracle {{{', '.join(f'S{i + 1}' for i in found)}}}, action-disconnected "
              f"{{{', '.join(f'S{i + 1}' for i in sorted(structural))}}}, CMI of {{S1}} alone {single:.3g} (> 0)")
    return _record(4, "Tabular oracle and subset non-closure", ok, detail, time.perf_counter() - t0, 1)


# 5 ---------------------------------------------------------------------------

def check_dp_vs_monte_carlo():
    t0 = time.perf_counter()
    # 5 endo states x 5 exo states, stochastic rewards, H = 10
    f = random_factored_mdp(5, 5, 2, seed=11, gamma=0.95, horizon=10, full_setting=True)
    var_full = variance_dp(f.joint_mdp())[10].reshape(5, 5)
    var_x = variance_dp(f.exo_mrp())[10]
    var_e = variance_dp(f.endo_mdp())[10].reshape(5, 5)
    cov = covariance_dp(f)[10]
    identity = float(np.max(np.abs(var_full - (var_x[None, :] + var_e + 2 * cov))))
    worst = 0.0
    for k, start in enumerate([(0, 0), (2, 3), (4, 1)]):
        b_x, b_e = simulate_factored_returns(f, start, 10, 200_000, seed=k)
        for mc, dp in [(variance_with_se(b_x + b_e), var_full[start]),
                       (variance_with_se(b_x), var_x[start[1]]),
                       (variance_with_se(b_e), var_e[start]),
                       (covariance_with_se(b_x, b_e), cov[start])]:
            worst = max(worst, abs(mc[0] - dp) / mc[1])
    ok = worst < 3 and identity < 1e-8
    detail = f"worst |MC - DP| = {worst:.2f} SE (< 3) over 12 comparisons, variance identity residual {identity:.1e}"
    return _record(5, "Variance/covariance DPs vs Monte Carlo", ok, detail, time.perf_counter() - t0, 120)


# 6 ---------------------------------------------------------------------------

def check_bellman_split():
    t0 = time.perf_counter()
    resid = max(bellman_split_check(random_factored_mdp(3, 4, 3, seed=s, full_setting=s % 2 == 1))
                for s in range(20))
    f = random_factored_mdp(3, 4, 3, seed=0)
    control = bellman_split_check(f, full_reward=f.exo_mean[None, :, None] * f.endo_mean)
    ok = resid < 1e-10 and control > 1e-3
    detail = f"max residual over 20 instances {resid:.1e} (< 1e-10), product-reward control {control:.3g} (> 1e-3)"
    return _record(6, "Bellman split", ok, detail, time.perf_counter() - t0, 30)


# 7 ---------------------------------------------------------------------------

def rl_config(method, out):
    return ExperimentConfig(
        name=method, method=method,
        environment={"family": "linear", "n_exo": 5, "n_end": 5},
        schedule=RunSchedule(total_steps=50_000, decomposition_steps=3000),
        replications=5, base_seed=0, output_dir=str(out),
    )


def check_rl():
    t0 = time.perf_counter()
    finals = {}
    with tempfile.TemporaryDirectory() as out:
        for method in ("simplified_grds", "oracle", "baseline"):
            res = run_experiment(rl_config(method, out))
            finals[method] = (res.summary["final_eval_reward"][0], res.summary["final_eval_total"][0],
                              res.summary["rank"][0], len(res.failed))
    ok = (finals["simplified_grds"][0] >= 0.65 and finals["oracle"][0] >= 0.65
          and finals["baseline"][0] <= 0.45 and all(v[3] == 0 for v in finals.values()))
    detail = ", ".join(f"{m} {v[0]:.3f} (total {v[1]:.3f}, rank {v[2]:.1f})" for m, v in finals.items())
    detail += " [final mean eval endo reward over 5 seeds; need >= 0.65, >= 0.65, <= 0.45]"
    return _record(7, "End-to-end RL speedup (10-D, N=50k)", ok, detail, time.perf_counter() - t0, 2700)


# 8 ---------------------------------------------------------------------------

def check_anticorrelated():
    t0 = time.perf_counter()
    probes = []
    for seed in range(5):
        env = make_linear_mdp(LinearMdpConfig(n_exo=1, n_end=1, reward_kind="anticorrelated", seed=seed))
        grid = np.asarray(env.config.action_grid)
        probes.append(covariance_probe(env, lambda obs, rng: [grid[rng.integers(len(grid))]],
                                       episodes=30, steps_per_episode=1000, seed=seed))
    var, neg2cov = np.mean(probes, axis=0)
    var_ok = 0.7 * 0.026 <= var <= 1.3 * 0.026
    cov_ok = 0.7 * 0.04 <= neg2cov <= 1.3 * 0.04
    env = make_linear_mdp(LinearMdpConfig(n_exo=1, n_end=1, reward_kind="anticorrelated", seed=0))
    data = uniform_transitions(env, 10_000, seed=0)
    proj = grds(data, objective_mode="simplified", seed=0).projection
    endo = ExoRewardEstimator(RegressionSchedule(), proj).fit_initial(data.s.data + data.center, data.r)
    ratio = endo.var() / data.r.var()
    ok = var_ok and cov_ok and ratio <= 1.05
    detail = (f"Var(R_exo) {var:.4f} in [0.0182, 0.0338]: {'yes' if var_ok else 'no'}; "
              f"-2Cov {neg2cov:.4f} in [0.028, 0.052]: {'yes' if cov_ok else 'no'}; "
              f"endo/raw variance ratio {ratio:.3f} (<= 1.05, rank {proj.d_exo})")
    return _record(8, "Anti-correlated rewards", ok, detail, time.perf_counter() - t0, 300)


# 9 ---------------------------------------------------------------------------

def check_sweep():
    t0 = time.perf_counter()
    cfg = replace(rl_config("simplified_grds", "unused"), replications=1)
    points = sensitivity_sweep(cfg, [250, 500, 1000, 2000, 4000])
    ranks = [p.rank for p in points]
    last_angle = points[-1].angle_to_previous
    ok = all(r == 9 for r in ranks) and len(ranks) == 5 and last_angle < 0.01
    angles = ", ".join(f"{p.angle_to_previous:.4f}" for p in points[1:])
    detail = f"ranks {ranks} (all 9), consecutive angles [{angles}] rad, last {last_angle:.4f} (< 0.01)"
    return _record(9, "Sensitivity sweep over L", ok, detail, time.perf_counter() - t0, 900)


CHECKS = [check_ccc, check_optimizer, check_ranks, check_tabular_oracle, check_dp_vs_monte_carlo,
          check_bellman_split, check_rl, check_anticorrelated, check_sweep]
SLOW = {check_ranks, check_dp_vs_monte_carlo, check_rl, check_anticorrelated, check_sweep}


@pytest.mark.parametrize("check", [pytest.param(c, marks=pytest.mark.slow) if c in SLOW else c for c in CHECKS],
                         ids=[c.__name__[6:] for c in CHECKS])
def test_acceptance(check):
    assert check(), RESULTS[CHECKS.index(check) + 1]


if __name__ == "__main__":
    outcomes = [c() for c in CHECKS]
    print(f"{sum(outcomes)}/{len(outcomes)} criteria passed")
    sys.exit(0 if all(outcomes) else 1)
