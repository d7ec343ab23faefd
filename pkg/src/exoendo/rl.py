"""Clipped-surrogate actor-critic (PPO) in numpy and the two-phase training driver.

Phase 1 trains on raw rewards while the first L transitions are logged.
The configured discovery routine then runs on that log, an exogenous reward
model is fitted and the logged rewards are rewritten to endo rewards. Phase 2
keeps training with rewards replaced on the fly. After every policy update the
frozen policy is evaluated in a second simulator reset with a fixed seed.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .decompose import DecompositionReport, TransitionDataset, grds, sras
from .errors import ConfigError, ExoEndoError, NumericError
from .nets import Adam, global_norm_clip, init_mlp, mlp_backward, mlp_forward
from .regress import ExoRewardEstimator, RegressionSchedule

__all__ = [
    "PpoSettings",
    "RunSchedule",
    "PolicyValueNets",
    "RolloutBuffer",
    "collect_rollout",
    "gae_advantages",
    "ppo_update",
    "evaluate_policy",
    "TwoPhaseResult",
    "run_two_phase",
    "run_discovery",
    "METHODS",
]

METHODS = ("baseline", "grds", "simplified_grds", "sras", "oracle")
MASKED_LOGIT = -1e9


@dataclass(frozen=True)
class PpoSettings:
    clip: float = 0.2
    value_coeff: float = 0.5
    entropy_coeff: float = 0.0
    gae_lambda: float = 0.95
    gamma: float = 0.99
    learning_rate: float = 3e-4
    minibatch: int = 64
    rollout_steps: int = 1536
    epochs_per_update: int = 10
    adam_eps: float = 1e-5
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    hidden: int = 64

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError("clip must be positive")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if min(self.minibatch, self.rollout_steps, self.epochs_per_update, self.hidden) < 1:
            raise ConfigError("batch sizes, epochs and hidden width must be positive")
        if self.learning_rate < 0 or self.max_grad_norm <= 0:
            raise ConfigError("learning_rate must be >= 0 and max_grad_norm > 0")


@dataclass(frozen=True)
class RunSchedule:
    total_steps: int
    decomposition_steps: int
    regression_interval: int = 256
    eval_steps: int = 1000
    eval_seed: int = 12345

    def __post_init__(self):
        if self.total_steps < 1 or self.decomposition_steps < 1:
            raise ConfigError("step counts must be positive")
        if self.decomposition_steps > self.total_steps:
            raise ConfigError("decomposition_steps must not exceed total_steps")
        if self.regression_interval < 1 or self.eval_steps < 1:
            raise ConfigError("intervals must be positive")


# ---------------------------------------------------------------------------
# networks

def _log_softmax(logits: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    z = logits if mask is None else np.where(mask, logits, MASKED_LOGIT)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class PolicyValueNets:
    """Separate tanh MLPs for the factored categorical policy and the state value.

    The policy's output layer starts at zero, so the initial policy is
    exactly uniform over every action variable.
    """

    def __init__(self, obs_dim: int, action_choices: Sequence[int], settings: PpoSettings = PpoSettings(),
                 seed: int = 0):
        self.obs_dim = int(obs_dim)
        self.action_choices = tuple(int(c) for c in action_choices)
        self.settings = settings
        rng = np.random.default_rng([seed, 5])
        h = settings.hidden
        self.policy = init_mlp([self.obs_dim, h, h, sum(self.action_choices)], rng, zero_last=True)
        self.value_params = init_mlp([self.obs_dim, h, h, 1], rng)
        self.optimizer = Adam(self.policy + self.value_params, settings.learning_rate, eps=settings.adam_eps)
        self._splits = np.cumsum(self.action_choices)[:-1]

    @property
    def all_params(self) -> List[np.ndarray]:
        return self.policy + self.value_params

    def snapshot(self) -> "PolicyValueNets":
        return copy.deepcopy(self)

    def head_log_probs(self, obs: np.ndarray, masks: Optional[np.ndarray] = None) -> List[np.ndarray]:
        """Per-head log-probabilities; ``masks`` is a bool array over the concatenated heads."""
        logits, _ = mlp_forward(self.policy, np.atleast_2d(obs), "tanh")
        heads = np.split(logits, self._splits, axis=1)
        mheads = [None] * len(heads) if masks is None else np.split(np.atleast_2d(masks), self._splits, axis=1)
        return [_log_softmax(z, m) for z, m in zip(heads, mheads)]

    def probabilities(self, obs, masks=None) -> List[np.ndarray]:
        return [np.exp(lp) for lp in self.head_log_probs(obs, masks)]

    def value(self, obs) -> np.ndarray:
        out, _ = mlp_forward(self.value_params, np.atleast_2d(obs), "tanh")
        return out[:, 0]

    def act(self, obs, rng: np.random.Generator, mask=None):
        """Sample one action per head; returns (indices, joint log-prob, value)."""
        logps = self.head_log_probs(obs, mask)
        idx = np.empty(len(logps), dtype=int)
        total = 0.0
        for k, lp in enumerate(logps):
            p = np.exp(lp[0])
            choice = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            choice = min(choice, len(p) - 1)
            idx[k] = choice
            total += lp[0, choice]
        return idx, total, float(self.value(obs)[0])


def _flat_mask(env) -> Optional[np.ndarray]:
    m = env.action_mask()
    return None if m is None else np.concatenate(m)


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray          # (K, n_heads) choice indices
    action_values: np.ndarray    # (K, l) numeric action features
    logp: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    reward_parts: np.ndarray     # (K, 2) oracle (r_exo, r_end)
    values: np.ndarray
    dones: np.ndarray
    masks: Optional[np.ndarray]
    next_obs: np.ndarray         # (K, d) observation after each step
    last_obs: np.ndarray
    last_value: float = 0.0

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def concat(cls, parts: Sequence["RolloutBuffer"]) -> "RolloutBuffer":
        if len(parts) == 1:
            return parts[0]
        masks = None if parts[0].masks is None else np.concatenate([p.masks for p in parts])
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(cat("obs"), cat("actions"), cat("action_values"), cat("logp"), cat("rewards"),
                   cat("raw_rewards"), cat("reward_parts"), cat("values"), cat("dones"), masks,
                   cat("next_obs"), parts[-1].last_obs, parts[-1].last_value)


RewardTransform = Callable[[np.ndarray, object], float]


def collect_rollout(nets: PolicyValueNets, env, steps: int, rng: np.random.Generator,
                    obs: Optional[np.ndarray] = None,
                    reward_transform: Optional[RewardTransform] = None) -> RolloutBuffer:
    """Run the current stochastic policy for ``steps`` transitions.

    ``reward_transform(obs, step_result)`` replaces the stored reward when
    given; the raw reward is kept in ``raw_rewards``. Episodic simulators are
    reset when they terminate.
    """
    if obs is None:
        obs = env.reset()
    d = nets.obs_dim
    n_heads = len(nets.action_choices)
    use_mask = env.action_mask() is not None
    buf_obs = np.empty((steps, d))
    buf_next = np.empty((steps, d))
    acts = np.empty((steps, n_heads), dtype=int)
    avals = []
    logp = np.empty(steps)
    rewards = np.empty(steps)
    raw = np.empty(steps)
    parts = np.empty((steps, 2))
    values = np.empty(steps)
    dones = np.zeros(steps, dtype=bool)
    masks = np.empty((steps, sum(nets.action_choices)), dtype=bool) if use_mask else None
    for t in range(steps):
        mask = _flat_mask(env) if use_mask else None
        idx, lp, v = nets.act(obs, rng, mask)
        res = env.step(env.action_from_indices(idx))
        buf_obs[t] = obs
        acts[t] = idx
        avals.append(np.atleast_1d(env.action_features(idx)))
        logp[t] = lp
        values[t] = v
        raw[t] = res.reward
        parts[t] = res.reward_parts
        rewards[t] = res.reward if reward_transform is None else reward_transform(obs, res)
        dones[t] = res.done
        buf_next[t] = res.observation
        if masks is not None:
            masks[t] = mask
        obs = env.reset() if res.done else res.observation
    return RolloutBuffer(buf_obs, acts, np.array(avals, dtype=float).reshape(steps, -1), logp, rewards,
                         raw, parts, values, dones, masks, buf_next, obs)


def gae_advantages(buffer, gamma: float, lam: float):
    """Generalized advantage estimates and value targets (advantages are not normalized here).

    delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t) and
    A_t = delta_t + gamma lam (1 - done_t) A_{t+1}; returns = A + V.
    """
    rewards = np.asarray(buffer.rewards, dtype=float)
    values = np.asarray(buffer.values, dtype=float)
    dones = np.asarray(buffer.dones, dtype=float)
    n = len(rewards)
    adv = np.zeros(n)
    next_value = float(buffer.last_value)
    running = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def ppo_update(nets: PolicyValueNets, buffer: RolloutBuffer, settings: PpoSettings,
               rng: np.random.Generator) -> Dict[str, float]:
    """Shuffled mini-batch epochs on the clipped surrogate plus value regression."""
    adv, returns = gae_advantages(buffer, settings.gamma, settings.gae_lambda)
    if settings.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    n_pol = len(nets.policy)
    splits = nets._splits
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0,
             "approx_kl": 0.0, "skipped": 0.0}
    count = 0
    for _ in range(settings.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, settings.minibatch):
            idx = order[start:start + settings.minibatch]
            b = len(idx)
            obs = buffer.obs[idx]
            masks = None if buffer.masks is None else buffer.masks[idx]
            logits, pcache = mlp_forward(nets.policy, obs, "tanh")
            heads = np.split(logits, splits, axis=1)
            mheads = [None] * len(heads) if masks is None else np.split(masks, splits, axis=1)
            logps = [_log_softmax(z, m) for z, m in zip(heads, mheads)]
            acts = buffer.actions[idx]
            new_logp = sum(lp[np.arange(b), acts[:, k]] for k, lp in enumerate(logps))
            log_ratio = new_logp - buffer.logp[idx]
            ratio = np.exp(log_ratio)
            a = adv[idx]
            unclipped = ratio * a
            clipped = np.clip(ratio, 1 - settings.clip, 1 + settings.clip) * a
            pg_loss = -float(np.mean(np.minimum(unclipped, clipped)))
            # the gradient flows only where the unclipped term is the minimum
            active = unclipped <= clipped
            d_logp = -(a * ratio * active) / b
            probs = [np.exp(lp) for lp in logps]
            ent = [-np.sum(np.where(p > 0, p * lp, 0.0), axis=1) for p, lp in zip(probs, logps)]
            entropy = float(np.mean(sum(ent)))
            grad_heads = []
            for k, (p, lp) in enumerate(zip(probs, logps)):
                onehot = np.zeros_like(p)
                onehot[np.arange(b), acts[:, k]] = 1.0
                g = d_logp[:, None] * (onehot - p)
                if settings.entropy_coeff:
                    safe_lp = np.where(p > 0, lp, 0.0)
                    g += settings.entropy_coeff * p * (safe_lp + ent[k][:, None]) / b
                grad_heads.append(g)
            v_out, vcache = mlp_forward(nets.value_params, obs, "tanh")
            v_err = v_out[:, 0] - returns[idx]
            v_loss = float(np.mean(v_err ** 2))
            loss = pg_loss + settings.value_coeff * v_loss - settings.entropy_coeff * entropy
            if not np.isfinite(loss):
                stats["skipped"] += 1
                continue
            g_pol = mlp_backward(nets.policy, pcache, np.hstack(grad_heads), "tanh")
            g_val = mlp_backward(nets.value_params, vcache,
                                 (settings.value_coeff * 2.0 * v_err / b)[:, None], "tanh")
            grads = g_pol + g_val
            global_norm_clip(grads, settings.max_grad_norm)
            params = nets.all_params
            nets.optimizer.step(params, grads)
            nets.policy, nets.value_params = params[:n_pol], params[n_pol:]
            stats["policy_loss"] += pg_loss
            stats["value_loss"] += v_loss
            stats["entropy"] += entropy
            stats["clip_fraction"] += float(np.mean(np.abs(ratio - 1) > settings.clip))
            stats["approx_kl"] += float(np.mean((ratio - 1) - log_ratio))
            count += 1
    for key in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl"):
        stats[key] /= max(count, 1)
    return stats


def evaluate_policy(nets: PolicyValueNets, env, steps: int, seed: int):
    """Mean (endo, total) reward of the stochastic policy over ``steps`` steps from ``reset(seed)``."""
    rng = np.random.default_rng([seed, 3])
    obs = env.reset(seed=seed)
    endo = total = 0.0
    use_mask = env.action_mask() is not None
    for _ in range(steps):
        mask = _flat_mask(env) if use_mask else None
        idx, _, _ = nets.act(obs, rng, mask)
        res = env.step(env.action_from_indices(idx))
        total += res.reward
        endo += res.reward_parts[1]
        obs = env.reset() if res.done else res.observation
    return endo / steps, total / steps


# ---------------------------------------------------------------------------
# two-phase driver

CURVE_COLUMNS = ("update", "env_steps", "phase", "mean_eval_reward", "eval_endo", "eval_total")


@dataclass
class TwoPhaseResult:
    method: str
    seed: int
    curve: List[tuple] = field(default_factory=list)
    report: Optional[DecompositionReport] = None
    estimator: Optional[ExoRewardEstimator] = None
    phase1_raw_rewards: Optional[np.ndarray] = None
    phase1_rewritten: Optional[np.ndarray] = None
    phase1_dataset: Optional[TransitionDataset] = None
    total_time: float = 0.0
    decomposition_time: float = 0.0
    notes: List[str] = field(default_factory=list)
    update_stats: List[Dict[str, float]] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return 0 if self.report is None else self.report.rank

    @property
    def final_eval(self) -> float:
        return self.curve[-1][3] if self.curve else float("nan")


def run_discovery(method: str, data: TransitionDataset, config, seed: int) -> DecompositionReport:
    """Dispatch to GRDS, Simplified-GRDS or SRAS with the config's CCC and descent settings."""
    if method == "sras":
        return sras(data, config.ccc, config.descent, seed=seed)
    mode = "simplified" if method == "simplified_grds" else config.objective_mode
    return grds(data, config.ccc, config.descent, objective_mode=mode, seed=seed)


def run_two_phase(config, replication: int = 0) -> TwoPhaseResult:
    """Algorithm-1 style training run for one replication of ``config``.

    ``config`` is an :class:`~exoendo.config.ExperimentConfig`. The
    replication seed ``base_seed + replication`` fixes the simulator structure,
    the network initialization and all sampling.
    """
    method = config.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    start = time.perf_counter()
    seed = config.base_seed + replication
    sched: RunSchedule = config.schedule
    ppo: PpoSettings = config.ppo
    env = config.build_env(seed)
    eval_env = env.spawn()
    nets = PolicyValueNets(env.obs_dim, env.action_choices, ppo, seed)
    rng = np.random.default_rng([seed, 2])
    result = TwoPhaseResult(method, seed)
    use_endo_metric = config.eval_metric == "endo"

    transform: Optional[RewardTransform] = None
    if method == "oracle":
        transform = lambda obs, res: float(res.reward_parts[1])
    needs_discovery = method in ("grds", "simplified_grds", "sras")

    obs = env.reset(seed=seed)
    pending: List[RolloutBuffer] = []
    logged: List[RolloutBuffer] = []
    steps = 0
    update = 0
    K = ppo.rollout_steps
    L = sched.decomposition_steps
    while steps < sched.total_steps:
        in_buffer = sum(len(p) for p in pending)
        chunk = min(K - in_buffer, sched.total_steps - steps)
        if steps < L:
            chunk = min(chunk, L - steps)
        part = collect_rollout(nets, env, chunk, rng, obs, transform)
        obs = part.last_obs
        pending.append(part)
        if steps < L:
            logged.append(part)
        steps += chunk

        if steps == L and needs_discovery:
            transform = _finish_phase1(config, result, logged, pending, seed, L)
        if sum(len(p) for p in pending) == K or steps == sched.total_steps:
            buf = RolloutBuffer.concat(pending)
            buf.last_value = float(nets.value(buf.last_obs)[0])
            stats = ppo_update(nets, buf, ppo, rng)
            result.update_stats.append(stats)
            pending = []
            update += 1
            endo, total = evaluate_policy(nets, eval_env, sched.eval_steps, sched.eval_seed)
            headline = endo if use_endo_metric else total
            result.curve.append((update, steps, 1 if steps <= L else 2, headline, endo, total))
    result.total_time = time.perf_counter() - start
    return result


def _finish_phase1(config, result: TwoPhaseResult, logged, pending, seed: int, L: int):
    """Discovery, reward-model fit and reward rewrite at the end of Phase 1."""
    log = RolloutBuffer.concat(logged)
    data = TransitionDataset.from_arrays(log.obs, log.action_values, log.raw_rewards, log.next_obs)
    result.phase1_dataset = data
    t0 = time.perf_counter()
    try:
        report = run_discovery(config.method, data, config, seed)
    except ExoEndoError as exc:
        result.notes.append(f"discovery failed: {exc}; continuing as baseline")
        result.decomposition_time = time.perf_counter() - t0
        return None
    result.decomposition_time = time.perf_counter() - t0
    result.report = report
    if report.rank == 0:
        result.notes.append("discovery returned rank 0; continuing as baseline")
        return None
    reg: RegressionSchedule = replace(config.regression, update_interval=config.schedule.regression_interval)
    estimator = ExoRewardEstimator(reg, report.projection, seed)
    try:
        rewritten = estimator.fit_initial(log.obs, log.raw_rewards)
    except (ExoEndoError, NumericError) as exc:
        result.notes.append(f"reward regression failed: {exc}; continuing as baseline")
        return None
    result.estimator = estimator
    result.phase1_raw_rewards = log.raw_rewards.copy()
    result.phase1_rewritten = rewritten
    # the not-yet-used part of the logged data lives in the pending rollout buffer
    offset = L - sum(len(p) for p in pending)
    for p in pending:
        p.rewards = rewritten[offset:offset + len(p)].copy()
        offset += len(p)
    return lambda obs, res: estimator.transform(obs, res.reward)
