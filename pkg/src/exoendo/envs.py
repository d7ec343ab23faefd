"""Seeded simulators for the synthetic MDP families.

Every simulator exposes ``reset``/``step`` plus an ``oracle`` view holding the
hidden state and ground-truth reward split. Learner code should only touch
observations and total rewards; the oracle is for the Endo Reward Oracle
baseline and for tests.

Structure (matrices, graph) is a function of ``config.seed``. Noise and the
initial state come from a separate stream reseeded by ``reset(seed)``, so a
second instance built from the same config can be replayed with a fixed
evaluation seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainError
from .statcore import TabularModel

__all__ = [
    "LinearMdpConfig",
    "LinearMdp",
    "RoutingMdpConfig",
    "RoutingMdp",
    "StepResult",
    "DEFAULT_EDGE_COSTS",
    "make_linear_mdp",
    "make_routing_mdp",
    "covariance_probe",
    "exo_reward",
    "counterexample_tabular_model",
    "factored_tabular_model",
]

DEFAULT_GRID = tuple(float(v) for v in np.linspace(-1.0, 1.0, 10))
MAX_COND = 1e6
MAX_REDRAWS = 100_000


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    reward_parts: Tuple[float, float]  # (r_exo, r_end), oracle channel
    done: bool


# ---------------------------------------------------------------------------
# rewards

def exo_reward(kind: str, x: np.ndarray) -> float:
    """Exogenous reward of a hidden exo state for the given reward family."""
    ax = float(np.mean(x))
    if kind == "linear":
        return -3.0 * ax
    if kind == "r1":
        val = 6.0 * (ax + np.mean(x ** 2) / 3.0 - 2.0 / 15.0 * np.mean(x ** 3))
        return float(np.clip(val, -5.0, 5.0))
    if kind == "r2":
        return float(-3.0 * np.exp(-abs(ax) ** 1.5))
    if kind == "r3":
        return float(-3.0 * (np.exp(-(ax + 1.5) ** 2) - np.exp(-(ax - 1.5) ** 2)))
    if kind == "r4":
        return float(-3.0 * (np.exp(-(ax + 1.0) ** 2) + 1.5 * np.exp(-(ax - 1.5) ** 2)
                             - 5.0 / 3.0 * np.exp(-ax ** 2)))
    if kind == "anticorrelated":
        return float(np.exp(-abs(ax + 2.5) / 3.0))
    raise ConfigError(f"unknown reward kind {kind!r}")


def _end_reward(kind: str, e: np.ndarray) -> float:
    if kind == "anticorrelated":
        return float(np.exp(-abs(np.mean(e) - 2.5) / 3.0))
    return float(np.exp(-abs(np.mean(e) - 1.0)))


# ---------------------------------------------------------------------------
# linear and nonlinear continuous families

REWARD_KINDS = ("linear", "r1", "r2", "r3", "r4", "anticorrelated")
DYNAMICS = ("linear", "m1", "m2", "m3", "anticorrelated")
ACTION_KINDS = ("ones", "dense", "partial_dense", "partial_disjoint")
# default noise std devs (exo, endo) per dynamics family
NOISE_DEFAULTS = {
    "linear": (0.3, 0.2),
    "m1": (0.3, 0.2),
    "m2": (0.3, 0.2),
    "m3": (0.4, 0.3),
    "anticorrelated": (0.4, 0.2),
}


@dataclass(frozen=True)
class LinearMdpConfig:
    """Parameters of the linear-mixture MDP families.

    ``dynamics`` selects the transition equations (``None`` picks
    ``anticorrelated`` for that reward kind and ``linear`` otherwise).
    Noise standard deviations default per family when left as ``None``.
    """

    n_exo: int
    n_end: int
    n_action_vars: int = 1
    action_grid: Tuple[float, ...] = DEFAULT_GRID
    exo_noise_std: Optional[float] = None
    end_noise_std: Optional[float] = None
    row_sum: float = 0.99
    action_matrix_kind: str = "ones"
    end_matrix_sparsity: float = 1.0
    reward_kind: str = "linear"
    dynamics: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        dyn = self.dynamics
        if dyn is None:
            dyn = "anticorrelated" if self.reward_kind == "anticorrelated" else "linear"
            object.__setattr__(self, "dynamics", dyn)
        object.__setattr__(self, "action_grid", tuple(float(v) for v in self.action_grid))
        ex, en = NOISE_DEFAULTS.get(dyn, (None, None))
        if self.exo_noise_std is None:
            object.__setattr__(self, "exo_noise_std", ex)
        if self.end_noise_std is None:
            object.__setattr__(self, "end_noise_std", en)
        self.validate()

    def validate(self):
        if self.n_exo < 1 or self.n_end < 1 or self.n_action_vars < 1:
            raise ConfigError("dimensions must be positive")
        if len(set(self.action_grid)) < 2:
            raise ConfigError("action grid needs at least 2 distinct values")
        if not 0 < self.row_sum < 1:
            raise ConfigError("row_sum must lie in (0, 1)")
        if self.reward_kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.reward_kind!r}")
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"unknown dynamics {self.dynamics!r}")
        if self.action_matrix_kind not in ACTION_KINDS:
            raise ConfigError(f"unknown action matrix kind {self.action_matrix_kind!r}")
        if self.action_matrix_kind == "ones" and self.n_action_vars != 1:
            raise ConfigError("the all-ones action vector needs a single action variable")
        if self.action_matrix_kind.startswith("partial") and self.n_action_vars > self.n_end:
            raise ConfigError("partial action matrices need n_action_vars <= n_end")
        if not 0 < self.end_matrix_sparsity <= 1:
            raise ConfigError("end_matrix_sparsity must lie in (0, 1]")
        if self.dynamics == "anticorrelated" and self.n_exo != self.n_end:
            raise ConfigError("the anticorrelated family needs n_exo == n_end")
        if self.exo_noise_std < 0 or self.end_noise_std < 0:
            raise ConfigError("noise std devs must be nonnegative")

    @property
    def d(self) -> int:
        return self.n_exo + self.n_end


def _row_normalized(rng, rows, cols, row_sum, mask=None):
    """Nonnegative matrix with Gaussian-magnitude entries and rows summing to ``row_sum``."""
    mat = np.abs(rng.standard_normal((rows, cols)))
    if mask is not None:
        mat = mat * mask
    return mat / mat.sum(axis=1, keepdims=True) * row_sum


class _Oracle:
    """Ground-truth view of a simulator; not for learner code."""

    def __init__(self, env):
        self._env = env

    @property
    def hidden_state(self):
        return self._env._e.copy(), self._env._x.copy()

    @property
    def last_reward_parts(self):
        return self._env._last_parts

    def exo_basis(self) -> np.ndarray:
        """Orthonormal basis of the observation subspace driven only by x."""
        return self._env.exo_basis()


class LinearMdp:
    """Continuing MDP with hidden endo state e, exo state x and mixed observation s = M [e; x]."""

    def __init__(self, config: LinearMdpConfig):
        self.config = config
        cfg = config
        m, n = cfg.n_end, cfg.n_exo
        rng = np.random.default_rng([cfg.seed, 0])
        rs = cfg.row_sum
        self.m_exo = _row_normalized(rng, n, n, rs)
        if cfg.dynamics == "anticorrelated":
            self.m_end = _row_normalized(rng, m, m, rs)
        else:
            mask = None
            if cfg.end_matrix_sparsity < 1.0:
                mask = rng.random((m, m + n)) < cfg.end_matrix_sparsity
                # each row keeps at least one nonzero entry
                for i in np.flatnonzero(~mask.any(axis=1)):
                    mask[i, rng.integers(m + n)] = True
            self.m_end = _row_normalized(rng, m, m + n, rs, mask)
        self.n_exo_quad = None
        self.k_exo_cubic = None
        self.n_a = None
        if cfg.dynamics in ("m1", "m2"):
            self.n_exo_quad = _row_normalized(rng, n, n, rs)
            self.k_exo_cubic = _row_normalized(rng, n, n, rs)
        if cfg.dynamics == "m2":
            self.n_a = rng.uniform(0.5, 1.5, size=m)
        self.m_a = self._action_matrix(rng)
        for _ in range(MAX_REDRAWS):
            mix = _row_normalized(rng, m + n, m + n, rs)
            if np.all(np.isfinite(mix)) and np.linalg.cond(mix) < MAX_COND:
                break
        else:
            raise ConfigError("could not draw a well-conditioned mixing matrix")
        self.mix = mix
        self.mix_inv = np.linalg.inv(mix)
        self._grid = np.asarray(cfg.action_grid)
        self._noise_rng = np.random.default_rng([cfg.seed, 1])
        self._e = np.zeros(m)
        self._x = np.zeros(n)
        self._last_parts = (0.0, 0.0)
        self.oracle = _Oracle(self)
        self.reset()

    def _action_matrix(self, rng):
        cfg = self.config
        m, l, rs = cfg.n_end, cfg.n_action_vars, cfg.row_sum
        kind = cfg.action_matrix_kind
        if kind == "ones":
            return np.ones((m, 1))
        if kind == "dense":
            mat = rng.random((m, l))
            return mat / mat.sum(axis=1, keepdims=True) * rs
        controlled = np.sort(rng.choice(m, size=l, replace=False))
        mat = np.zeros((m, l))
        if kind == "partial_dense":
            block = rng.random((l, l))
            mat[controlled] = block / block.sum(axis=1, keepdims=True) * rs
        else:
            mat[controlled, np.arange(l)] = rng.uniform(0.5, 1.5, size=l)
        return mat

    # -- interface -----------------------------------------------------------
    @property
    def obs_dim(self) -> int:
        return self.config.d

    @property
    def action_choices(self) -> Tuple[int, ...]:
        return (len(self._grid),) * self.config.n_action_vars

    @property
    def episodic(self) -> bool:
        return False

    def action_from_indices(self, idx) -> np.ndarray:
        return self._grid[np.asarray(idx, dtype=int).reshape(-1)]

    def action_features(self, idx) -> np.ndarray:
        """Numeric action columns for discovery: the grid values themselves."""
        return self.action_from_indices(idx)

    def action_mask(self):
        return None

    def observe(self) -> np.ndarray:
        return self.mix @ np.concatenate([self._e, self._x])

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Reseed noise (if ``seed`` given) and redraw e, x uniformly on [0, 1]."""
        if seed is not None:
            self._noise_rng = np.random.default_rng([seed, 1])
        self._e = self._noise_rng.uniform(0.0, 1.0, self.config.n_end)
        self._x = self._noise_rng.uniform(0.0, 1.0, self.config.n_exo)
        return self.observe()

    def _check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.size != self.config.n_action_vars:
            raise DomainError(f"expected {self.config.n_action_vars} action values, got {a.size}")
        on_grid = np.min(np.abs(a[:, None] - self._grid[None, :]), axis=1) < 1e-9
        if not np.all(on_grid):
            raise DomainError(f"action {a} is not on the action grid")
        return a

    def step(self, action) -> StepResult:
        """Advance one step; reward is computed on the pre-transition state."""
        cfg = self.config
        a = self._check_action(action)
        e, x = self._e, self._x
        r_exo = exo_reward(cfg.reward_kind, x)
        r_end = _end_reward(cfg.reward_kind, e)
        # exo noise first, then endo noise
        eps_x = cfg.exo_noise_std * self._noise_rng.standard_normal(cfg.n_exo)
        eps_e = cfg.end_noise_std * self._noise_rng.standard_normal(cfg.n_end)
        dyn = cfg.dynamics
        if dyn == "anticorrelated":
            x_next = 0.9 * self.m_exo @ x + eps_x
            e_next = 0.45 * self.m_end @ e + 0.55 * self.m_exo @ x + self.m_a @ a + eps_e
        elif dyn == "m3":
            x_next = np.clip(5.0 * np.sign(x) * np.sqrt(np.abs(x)) - np.sin(x), -2.0, 2.0) + eps_x
            e_next = self.m_end @ np.concatenate([e, x]) + np.sin(3.0 * a).sum() + eps_e
        else:
            if dyn in ("m1", "m2"):
                drift = self.m_exo @ x + self.n_exo_quad @ x ** 2 / 3.0 - 2.0 / 15.0 * self.k_exo_cubic @ x ** 3
                x_next = np.clip(drift, -4.0, 4.0) + eps_x
            else:
                x_next = self.m_exo @ x + eps_x
            e_next = self.m_end @ np.concatenate([e, x]) + self.m_a @ a + eps_e
            if dyn == "m2":
                e_next = e_next + self.n_a * np.sum(a ** 2)
        self._e, self._x = e_next, x_next
        self._last_parts = (r_exo, r_end)
        return StepResult(self.observe(), r_exo + r_end, (r_exo, r_end), False)

    def exo_basis(self) -> np.ndarray:
        """Orthonormal basis of span(M[:, m:]), the observation directions of x."""
        q, _ = np.linalg.qr(self.mix[:, self.config.n_end:])
        return q

    def maximal_exo_rank(self) -> int:
        """Dimension of the largest action-independent subspace for linear action coupling."""
        coupling = self.mix[:, : self.config.n_end] @ self.m_a
        return self.config.d - int(np.linalg.matrix_rank(coupling))

    def spawn(self) -> "LinearMdp":
        """A second instance with identical structure (for frozen-policy evaluation)."""
        return LinearMdp(self.config)


def make_linear_mdp(config: LinearMdpConfig) -> LinearMdp:
    """Build a linear-mixture MDP; a deterministic function of ``config.seed``."""
    return LinearMdp(config)


# ---------------------------------------------------------------------------
# routing MDP

N_NODES = 9
TERMINAL = 8
# outbound edges in action order
OUT_EDGES: Dict[int, Tuple[int, ...]] = {
    0: (1, 2, 4),
    1: (4, 5),
    2: (3, 4),
    3: (6, 7),
    4: (5, 6, 8),
    5: (8,),
    6: (7,),
    7: (8,),
}
DEFAULT_EDGE_COSTS: Dict[Tuple[int, int], float] = {
    (0, 1): 2.0, (0, 2): 1.0, (0, 4): 4.0,
    (1, 4): 1.0, (1, 5): 3.0,
    (2, 3): 2.0, (2, 4): 2.0,
    (3, 6): 1.0, (3, 7): 3.0,
    (4, 5): 1.0, (4, 6): 2.0, (4, 8): 5.0,
    (5, 8): 2.0, (6, 7): 1.0, (7, 8): 1.0,
}
# node -> per-action probabilities over OUT_EDGES[node]
STOCHASTIC_TABLE: Dict[int, Tuple[Tuple[float, ...], ...]] = {
    0: ((0.5, 0.3, 0.2), (0.3, 0.5, 0.2), (0.3, 0.2, 0.5)),
    1: ((0.6, 0.4), (0.5, 0.5)),
    2: ((0.5, 0.5), (0.3, 0.7)),
    3: ((0.7, 0.3), (0.4, 0.6)),
    4: ((0.6, 0.2, 0.2), (0.0, 1.0, 0.0), (0.3, 0.2, 0.5)),
    5: ((1.0,),),
    6: ((1.0,),),
    7: ((1.0,),),
}
N_ROUTE_EXO = 4


@dataclass(frozen=True)
class RoutingMdpConfig:
    edge_costs: Dict[Tuple[int, int], float] = field(default_factory=lambda: dict(DEFAULT_EDGE_COSTS))
    stochastic: bool = False
    exo_decay: float = 0.9
    exo_noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        costs = {tuple(int(v) for v in k): float(c) for k, c in dict(self.edge_costs).items()}
        object.__setattr__(self, "edge_costs", costs)
        expected = {(u, v) for u, outs in OUT_EDGES.items() for v in outs}
        if set(costs) != expected:
            raise ConfigError("edge_costs must cover exactly the rightward edges of the 9-node network")
        if any(c <= 0 for c in costs.values()):
            raise ConfigError("edge costs must be positive")
        for node, rows in STOCHASTIC_TABLE.items():
            for row in rows:
                if abs(sum(row) - 1.0) > 1e-12:
                    raise ConfigError(f"transition row at node {node} does not sum to 1")


class RoutingMdp:
    """Episodic shortest-path MDP on a 9-node network with 4 exogenous AR(1) variables.

    Observation is the 9-way one-hot node code followed by the exo values.
    The exo chain keeps evolving across episode boundaries.
    """

    def __init__(self, config: RoutingMdpConfig):
        self.config = config
        self._noise_rng = np.random.default_rng([config.seed, 1])
        self._node = 0
        self._x = np.zeros(N_ROUTE_EXO)
        self._e = np.zeros(N_NODES)
        self._last_parts = (0.0, 0.0)
        self.oracle = _Oracle(self)
        self.reset()

    @property
    def obs_dim(self) -> int:
        return N_NODES + N_ROUTE_EXO

    @property
    def action_choices(self) -> Tuple[int, ...]:
        return (3,)

    @property
    def episodic(self) -> bool:
        return True

    @property
    def node(self) -> int:
        return self._node

    def action_from_indices(self, idx) -> int:
        return int(np.asarray(idx).reshape(-1)[0])

    def action_features(self, idx) -> np.ndarray:
        """One-hot code of the chosen out-edge slot."""
        out = np.zeros(3)
        out[self.action_from_indices(idx)] = 1.0
        return out

    def action_mask(self) -> List[np.ndarray]:
        mask = np.zeros(3, dtype=bool)
        mask[: len(OUT_EDGES.get(self._node, (0,)))] = True
        return [mask]

    def observe(self) -> np.ndarray:
        one_hot = np.zeros(N_NODES)
        one_hot[self._node] = 1.0
        self._e = one_hot
        return np.concatenate([one_hot, self._x])

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Return to v0. With a seed, also reseed noise and zero the exo state."""
        if seed is not None:
            self._noise_rng = np.random.default_rng([seed, 1])
            self._x = np.zeros(N_ROUTE_EXO)
        self._node = 0
        return self.observe()

    def step(self, action) -> StepResult:
        if self._node == TERMINAL:
            raise DomainError("episode has terminated; call reset()")
        outs = OUT_EDGES[self._node]
        act = int(action)
        if not 0 <= act < len(outs):
            raise DomainError(f"action {act} invalid at node v{self._node} (out-degree {len(outs)})")
        cfg = self.config
        eps = cfg.exo_noise_std * self._noise_rng.standard_normal(N_ROUTE_EXO)
        if cfg.stochastic:
            probs = STOCHASTIC_TABLE[self._node][act]
            nxt = outs[int(self._noise_rng.choice(len(outs), p=probs))]
        else:
            nxt = outs[act]
        r_end = -cfg.edge_costs[(self._node, nxt)]
        r_exo = -float(np.sum(self._x))
        self._x = cfg.exo_decay * self._x + eps
        self._node = nxt
        self._last_parts = (r_exo, r_end)
        return StepResult(self.observe(), r_exo + r_end, (r_exo, r_end), nxt == TERMINAL)

    def exo_basis(self) -> np.ndarray:
        return np.eye(self.obs_dim)[:, N_NODES:]

    def spawn(self) -> "RoutingMdp":
        return RoutingMdp(self.config)


def make_routing_mdp(config: RoutingMdpConfig = RoutingMdpConfig()) -> RoutingMdp:
    return RoutingMdp(config)


# ---------------------------------------------------------------------------
# probes and tabular fixtures

def covariance_probe(env, policy, episodes: int, steps_per_episode: int = 1000,
                     burn_in: int = 0, seed: int = 0) -> Tuple[float, float]:
    """Monte Carlo Var(R_exo) and -2 Cov(R_end, R_exo) under ``policy``.

    ``policy(obs, rng)`` returns an action accepted by ``env.step``. Each
    episode resets ``env`` with seed ``seed + k`` and discards the first
    ``burn_in`` steps.
    """
    if episodes < 1 or steps_per_episode <= burn_in:
        raise DomainError("covariance_probe needs at least one recorded sample")
    rng = np.random.default_rng(seed)
    r_exo, r_end = [], []
    for k in range(episodes):
        obs = env.reset(seed=seed + k)
        for t in range(steps_per_episode):
            res = env.step(policy(obs, rng))
            if t >= burn_in:
                r_exo.append(res.reward_parts[0])
                r_end.append(res.reward_parts[1])
            obs = res.observation
            if res.done:
                obs = env.reset()
    r_exo, r_end = np.asarray(r_exo), np.asarray(r_end)
    var_exo = float(np.mean((r_exo - r_exo.mean()) ** 2))
    cov = float(np.mean((r_exo - r_exo.mean()) * (r_end - r_end.mean())))
    return var_exo, -2.0 * cov


def _random_cpd(rng, n_parents_states, card):
    table = rng.uniform(0.2, 1.0, size=(n_parents_states, card))
    return table / table.sum(axis=1, keepdims=True)


def counterexample_tabular_model(seed: int = 0, card: int = 2, n_actions: int = 2) -> TabularModel:
    """Exact joint P(S, A, S') for the 3-variable subset-non-closure example.

    S2 is an exogenous root, S1' depends on S1, S2 and S2', and S3' depends on
    S1, S3 and the action. The action is drawn uniformly, independent of the
    state (a fully randomized policy).
    """
    rng = np.random.default_rng(seed)
    c = card
    p_s = rng.uniform(0.2, 1.0, size=(c, c, c))
    p_s /= p_s.sum()
    p_s2n = _random_cpd(rng, c, c)                  # P(S2' | S2)
    p_s1n = _random_cpd(rng, c * c * c, c).reshape(c, c, c, c)  # P(S1' | S1, S2, S2')
    p_s3n = _random_cpd(rng, c * c * n_actions, c).reshape(c, c, n_actions, c)  # P(S3' | S1, S3, A)
    pi = np.full(n_actions, 1.0 / n_actions)
    joint = np.einsum(
        "ijk,a,jm,ijml,ikan->ijkalmn",
        p_s, pi, p_s2n, p_s1n, p_s3n,
    )
    return TabularModel((c, c, c), n_actions, joint / joint.sum())


def factored_tabular_model(parents: Sequence[Sequence[str]], seed: int = 0, card: int = 2,
                           n_actions: int = 2) -> TabularModel:
    """Exact joint for a binary DBN given the parent list of each next-state variable.

    ``parents[j]`` lists parent names of S_j' drawn from ``"S0".."S{d-1}"``,
    ``"A"`` and already-defined primed names ``"S{i}'"`` with i < j. The
    action is uniform and independent of the state.
    """
    rng = np.random.default_rng(seed)
    d = len(parents)
    c = card
    p_s = rng.uniform(0.2, 1.0, size=(c,) * d)
    p_s /= p_s.sum()
    shape = (c,) * d + (n_actions,) + (c,) * d
    joint = np.zeros(shape)
    cpds = []
    for j, par in enumerate(parents):
        sizes = [n_actions if p == "A" else c for p in par]
        table = _random_cpd(rng, int(np.prod(sizes)) if sizes else 1, c).reshape(*sizes, c)
        cpds.append(table)
    for idx in np.ndindex(*shape):
        s, a, sn = idx[:d], idx[d], idx[d + 1:]
        prob = p_s[s] / n_actions
        for j, par in enumerate(parents):
            key = []
            for p in par:
                if p == "A":
                    key.append(a)
                elif p.endswith("'"):
                    key.append(sn[int(p[1:-1])])
                else:
                    key.append(s[int(p[1:])])
            prob *= cpds[j][tuple(key) + (sn[j],)]
        joint[idx] = prob
    return TabularModel((c,) * d, n_actions, joint / joint.sum())
