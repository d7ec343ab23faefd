"""Finite-horizon dynamic programs, variance diagnostics and structural exogeneity checks.

The return tables are indexed ``[h, state]`` with ``h = 0..H``; the h = 0
row is the zero base case. Factored models index joint states as
``s = e * n_x + x``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import FrozenSet, Iterable, NamedTuple, Optional, Set, Tuple

import numpy as np

from .errors import DimensionError, DomainError, NumericError, StructureError

__all__ = [
    "TabularMdp",
    "FactoredTabularMdp",
    "random_factored_mdp",
    "value_dp",
    "variance_dp",
    "covariance_dp",
    "chebychev_n",
    "covariance_condition",
    "bellman_split_check",
    "optimal_value_dp",
    "principal_angles",
    "PrincipalAngles",
    "DbnTemplate",
    "action_disconnected",
    "template_match",
]

STOCH_TOL = 1e-12


def _check_stochastic(table: np.ndarray, name: str):
    if np.any(table < -STOCH_TOL):
        raise DomainError(f"{name} has negative entries")
    if np.max(np.abs(table.sum(axis=-1) - 1.0)) > STOCH_TOL * max(1, table.shape[-1]):
        raise DomainError(f"{name} rows do not sum to 1")


@dataclass
class TabularMdp:
    """Finite MDP with a fixed stochastic policy and per-(s, a) reward mean and variance."""

    transition: np.ndarray      # (S, A, S)
    reward_mean: np.ndarray     # (S, A)
    reward_var: np.ndarray      # (S, A)
    policy: np.ndarray          # (S, A)
    gamma: float = 1.0
    horizon: int = 10

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        s, a = self.transition.shape[:2]
        if self.transition.shape != (s, a, s):
            raise DimensionError(f"transition must be (S, A, S), got {self.transition.shape}")
        self.reward_mean = np.broadcast_to(np.asarray(self.reward_mean, dtype=float), (s, a)).copy()
        self.reward_var = np.broadcast_to(np.asarray(self.reward_var, dtype=float), (s, a)).copy()
        self.policy = np.broadcast_to(np.asarray(self.policy, dtype=float), (s, a)).copy()
        _check_stochastic(self.transition, "transition")
        _check_stochastic(self.policy, "policy")
        if np.any(self.reward_var < 0):
            raise DomainError("reward variances must be nonnegative")
        if self.horizon < 0:
            raise DomainError("horizon must be nonnegative")
        if not 0 <= self.gamma <= 1:
            raise DomainError("gamma must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass
class FactoredTabularMdp:
    """Exo chain over x and endo transition over e, with additive independent reward noise.

    ``endo_transition`` is either P(e'|e, x, a) with shape (E, X, A, E) or,
    in the full setting, P(e'|e, x, a, x') with shape (E, X, A, X, E).
    """

    exo_transition: np.ndarray       # (X, X)
    endo_transition: np.ndarray
    exo_mean: np.ndarray             # (X,)
    exo_var: np.ndarray              # (X,)
    endo_mean: np.ndarray            # (E, X, A)
    endo_var: np.ndarray             # (E, X, A)
    policy: np.ndarray               # (E, X, A)
    gamma: float = 1.0
    horizon: int = 10

    def __post_init__(self):
        self.exo_transition = np.asarray(self.exo_transition, dtype=float)
        self.endo_transition = np.asarray(self.endo_transition, dtype=float)
        nx = self.exo_transition.shape[0]
        ne, nx2, na = self.endo_transition.shape[:3]
        if self.exo_transition.shape != (nx, nx) or nx2 != nx:
            raise DimensionError("exo and endo transition shapes disagree")
        if self.endo_transition.shape not in ((ne, nx, na, ne), (ne, nx, na, nx, ne)):
            raise DimensionError(f"endo transition has shape {self.endo_transition.shape}")
        self.exo_mean = np.broadcast_to(np.asarray(self.exo_mean, dtype=float), (nx,)).copy()
        self.exo_var = np.broadcast_to(np.asarray(self.exo_var, dtype=float), (nx,)).copy()
        shape = (ne, nx, na)
        self.endo_mean = np.broadcast_to(np.asarray(self.endo_mean, dtype=float), shape).copy()
        self.endo_var = np.broadcast_to(np.asarray(self.endo_var, dtype=float), shape).copy()
        self.policy = np.broadcast_to(np.asarray(self.policy, dtype=float), shape).copy()
        _check_stochastic(self.exo_transition, "exo transition")
        _check_stochastic(self.endo_transition, "endo transition")
        _check_stochastic(self.policy, "policy")
        if np.any(self.exo_var < 0) or np.any(self.endo_var < 0):
            raise DomainError("reward variances must be nonnegative")

    @property
    def n_exo(self) -> int:
        return self.exo_transition.shape[0]

    @property
    def n_endo(self) -> int:
        return self.endo_transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.endo_transition.shape[2]

    @property
    def full_setting(self) -> bool:
        return self.endo_transition.ndim == 5

    def joint_transition(self) -> np.ndarray:
        """P(e', x' | e, x, a) as an (S, A, S) array."""
        ne, nx, na = self.n_endo, self.n_exo, self.n_actions
        if self.full_setting:
            p = np.einsum("xy,exayf->exafy", self.exo_transition, self.endo_transition)
        else:
            p = np.einsum("xy,exaf->exafy", self.exo_transition, self.endo_transition)
        return p.reshape(ne * nx, na, ne * nx)

    def _flat(self, arr):
        return arr.reshape(self.n_endo * self.n_exo, self.n_actions)

    def joint_mdp(self, reward_mean: Optional[np.ndarray] = None) -> TabularMdp:
        """Full MDP with reward m_exo(x) + m_end(e, x, a) unless ``reward_mean`` (E, X, A) is given."""
        if reward_mean is None:
            reward_mean = self.exo_mean[None, :, None] + self.endo_mean
        var = self.exo_var[None, :, None] + self.endo_var
        return TabularMdp(self.joint_transition(), self._flat(np.asarray(reward_mean, dtype=float)),
                          self._flat(var), self._flat(self.policy), self.gamma, self.horizon)

    def exo_mrp(self) -> TabularMdp:
        """The action-free exo chain with reward m_exo, as a one-action MDP."""
        return TabularMdp(self.exo_transition[:, None, :], self.exo_mean[:, None], self.exo_var[:, None],
                          np.ones((self.n_exo, 1)), self.gamma, self.horizon)

    def endo_mdp(self) -> TabularMdp:
        """Joint-state MDP that only pays the endo reward."""
        return TabularMdp(self.joint_transition(), self._flat(self.endo_mean), self._flat(self.endo_var),
                          self._flat(self.policy), self.gamma, self.horizon)


def _random_stochastic(rng, shape):
    t = rng.uniform(0.05, 1.0, size=shape)
    return t / t.sum(axis=-1, keepdims=True)


def random_factored_mdp(n_endo: int, n_exo: int, n_actions: int, seed: int = 0, gamma: float = 0.9,
                        horizon: int = 10, full_setting: bool = False) -> FactoredTabularMdp:
    """Random dense factored instance with a random stochastic policy and noisy rewards."""
    rng = np.random.default_rng(seed)
    ne, nx, na = n_endo, n_exo, n_actions
    endo_shape = (ne, nx, na, nx, ne) if full_setting else (ne, nx, na, ne)
    return FactoredTabularMdp(
        exo_transition=_random_stochastic(rng, (nx, nx)),
        endo_transition=_random_stochastic(rng, endo_shape),
        exo_mean=rng.normal(size=nx),
        exo_var=rng.uniform(0.0, 1.0, size=nx),
        endo_mean=rng.normal(size=(ne, nx, na)),
        endo_var=rng.uniform(0.0, 1.0, size=(ne, nx, na)),
        policy=_random_stochastic(rng, (ne, nx, na)),
        gamma=gamma,
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# policy evaluation programs

def _horizon(mdp, h):
    h = mdp.horizon if h is None else int(h)
    if h < 0:
        raise DomainError("horizon must be nonnegative")
    return h


def value_dp(mdp: TabularMdp, h: Optional[int] = None) -> np.ndarray:
    """V(s; k) for k = 0..h under the MDP's policy: V(s;k) = m(s,pi) + gamma E[V(s';k-1)]."""
    h = _horizon(mdp, h)
    pi, p, g = mdp.policy, mdp.transition, mdp.gamma
    m_pi = np.sum(pi * mdp.reward_mean, axis=1)
    p_pi = np.einsum("sa,sat->st", pi, p)
    v = np.zeros((h + 1, mdp.n_states))
    for k in range(1, h + 1):
        v[k] = m_pi + g * p_pi @ v[k - 1]
    return v


def variance_dp(mdp: TabularMdp, h: Optional[int] = None) -> np.ndarray:
    """Var[B(s; k)] of the k-step return for k = 0..h.

    Var[B(s;k)] = sigma^2(s,pi) - V(s;k)^2 + gamma^2 E[Var B(s';k-1)]
                  + E_{a,s'}[(m(s,a) + gamma V(s';k-1))^2].
    """
    h = _horizon(mdp, h)
    pi, p, g = mdp.policy, mdp.transition, mdp.gamma
    v = value_dp(mdp, h)
    s2_pi = np.sum(pi * mdp.reward_var, axis=1)
    p_pi = np.einsum("sa,sat->st", pi, p)
    var = np.zeros_like(v)
    for k in range(1, h + 1):
        inner = mdp.reward_mean[:, :, None] + g * v[k - 1][None, None, :]
        second = np.einsum("sa,sat,sat->s", pi, p, inner ** 2)
        var[k] = s2_pi - v[k] ** 2 + g * g * p_pi @ var[k - 1] + second
        lo = var[k].min()
        if lo < -1e-9 * max(1.0, float(np.max(np.abs(second)))):
            raise NumericError(f"negative return variance {lo:.3g} at horizon {k}")
        var[k] = np.maximum(var[k], 0.0)
    return var


def covariance_dp(fmdp: FactoredTabularMdp, h: Optional[int] = None) -> np.ndarray:
    """Cov[B_exo(x;k), B_end(e,x;k)] for k = 0..h, shaped (h+1, E, X).

    Cov(e,x;k) = E_{a,e',x'}{gamma^2 Cov(e',x';k-1)
                 + [m_x(x) + gamma V_x(x';k-1)] [m_e(e,x,a) + gamma V_e(e',x';k-1)]}
                 - V_x(x;k) V_e(e,x;k).
    Reward noise of the two parts is independent.
    """
    h = _horizon(fmdp, h)
    g = fmdp.gamma
    ne, nx, na = fmdp.n_endo, fmdp.n_exo, fmdp.n_actions
    vx = value_dp(fmdp.exo_mrp(), h)                       # (h+1, X)
    ve = value_dp(fmdp.endo_mdp(), h)                      # (h+1, S)
    p = fmdp.joint_transition().reshape(ne, nx, na, ne, nx)
    pi = fmdp.policy
    cov = np.zeros((h + 1, ne, nx))
    for k in range(1, h + 1):
        # axes (e, x, a, e', x')
        left = fmdp.exo_mean[None, :, None, None, None] + g * vx[k - 1][None, None, None, None, :]
        right = fmdp.endo_mean[:, :, :, None, None] + g * ve[k - 1].reshape(ne, nx)[None, None, None]
        bracket = g * g * cov[k - 1][None, None, None] + left * right
        cov[k] = np.einsum("exa,exafy,exafy->ex", pi, p, bracket) - vx[k][None, :] * ve[k].reshape(ne, nx)
    return cov


def chebychev_n(variance: float, epsilon: float, delta: float) -> int:
    """Smallest N with Var / (N eps^2) <= delta, i.e. ceil(Var / (delta eps^2))."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if variance < 0:
        raise DomainError("variance must be nonnegative")
    q = variance / (delta * epsilon * epsilon)
    # guard against ceil(40.000000000000007) style round-off
    return int(math.ceil(q - 1e-9 * max(1.0, q)))


class CovarianceCondition(NamedTuple):
    holds: bool
    var_exo: float
    neg2cov: float


def covariance_condition(fmdp: FactoredTabularMdp, state: Tuple[int, int], h: Optional[int] = None
                         ) -> CovarianceCondition:
    """Whether Var[B_exo(x;h)] > -2 Cov[B_exo, B_end](e,x;h) at ``state = (e, x)``."""
    h = _horizon(fmdp, h)
    e, x = state
    var_x = float(variance_dp(fmdp.exo_mrp(), h)[h, x])
    neg2cov = float(-2.0 * covariance_dp(fmdp, h)[h, e, x])
    return CovarianceCondition(var_x > neg2cov, var_x, neg2cov)


def optimal_value_dp(mdp: TabularMdp, h: Optional[int] = None) -> np.ndarray:
    """Finite-horizon optimal values V*(s; k) for k = 0..h."""
    h = _horizon(mdp, h)
    v = np.zeros((h + 1, mdp.n_states))
    for k in range(1, h + 1):
        q = mdp.reward_mean + mdp.gamma * mdp.transition @ v[k - 1]
        v[k] = q.max(axis=1)
    return v


class BellmanSplit(NamedTuple):
    residual: float
    v_full: np.ndarray     # (E, X)
    v_exo: np.ndarray      # (X,)
    v_end: np.ndarray      # (E, X)


def bellman_split_check(fmdp: FactoredTabularMdp, h: Optional[int] = None,
                        full_reward: Optional[np.ndarray] = None, detail: bool = False):
    """Max |V - (V_exo + V_end)| between optimal values of the full MDP and its split.

    V_exo follows the exo chain with reward m_exo; V_end is the optimal value
    of the endo MDP. ``full_reward`` (E, X, A) replaces the additive reward of
    the full MDP, for negative controls.
    """
    h = _horizon(fmdp, h)
    ne, nx = fmdp.n_endo, fmdp.n_exo
    v = optimal_value_dp(fmdp.joint_mdp(full_reward), h)[h].reshape(ne, nx)
    vx = value_dp(fmdp.exo_mrp(), h)[h]
    ve = optimal_value_dp(fmdp.endo_mdp(), h)[h].reshape(ne, nx)
    resid = float(np.max(np.abs(v - (vx[None, :] + ve))))
    if detail:
        return BellmanSplit(resid, v, vx, ve)
    return resid


# ---------------------------------------------------------------------------
# subspace diagnostics

class PrincipalAngles(NamedTuple):
    angles: np.ndarray
    dimension_mismatch: bool


def principal_angles(w1, w2) -> PrincipalAngles:
    """Principal angles (radians, ascending) between span(W1) and span(W2).

    Both inputs need orthonormal columns. With unequal column counts the
    min(p1, p2) smallest angles are returned and the mismatch is flagged.
    """
    a = np.asarray(getattr(w1, "w", w1), dtype=float)
    b = np.asarray(getattr(w2, "w", w2), dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"bases must share the ambient dimension, got {a.shape} and {b.shape}")
    mismatch = a.shape[1] != b.shape[1]
    k = min(a.shape[1], b.shape[1])
    if k == 0:
        return PrincipalAngles(np.zeros(0), mismatch)
    sv = np.linalg.svd(a.T @ b, compute_uv=False)[:k]
    angles = np.arccos(np.clip(sv, 0.0, 1.0))
    return PrincipalAngles(np.sort(angles), mismatch)


# ---------------------------------------------------------------------------
# DBN templates

def _parse_node(name: str, d: int, n_actions: int):
    """('S', i, primed) or ('A', j, False)."""
    if name == "A" and n_actions == 1:
        return ("A", 0, False)
    primed = name.endswith("'")
    core = name[:-1] if primed else name
    kind, idx = core[:1], core[1:]
    if kind not in ("S", "A") or not idx.isdigit():
        raise StructureError(f"bad node name {name!r}")
    i = int(idx)
    if kind == "A":
        if primed or i >= n_actions:
            raise StructureError(f"bad action node {name!r}")
        return ("A", i, False)
    if i >= d:
        raise StructureError(f"state index out of range in {name!r}")
    return ("S", i, primed)


@dataclass(frozen=True)
class DbnTemplate:
    """Two-slice DBN over state variables S0..S{d-1}, action nodes and primed copies.

    Edges are (parent, child) name pairs such as ``("S0", "S1'")``,
    ``("A", "S2'")`` or ``("S0'", "S1'")``. Children are always primed.
    """

    d: int
    edges: FrozenSet[Tuple[str, str]]
    n_actions: int = 1
    horizon: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset((str(u), str(v)) for u, v in self.edges))
        if self.d < 1 or self.n_actions < 1:
            raise StructureError("template needs at least one variable and one action node")
        for u, v in self.edges:
            pu = _parse_node(u, self.d, self.n_actions)
            pv = _parse_node(v, self.d, self.n_actions)
            if pv[0] != "S" or not pv[2]:
                raise StructureError(f"edge {u}->{v}: children must be primed state variables")
            if pu[0] == "S" and pu[2] and pu[1] == pv[1]:
                raise StructureError(f"self loop {u}->{v}")
        self._check_acyclic()

    def parsed(self):
        return [(_parse_node(u, self.d, self.n_actions), _parse_node(v, self.d, self.n_actions))
                for u, v in self.edges]

    def _check_acyclic(self):
        children = {i: set() for i in range(self.d)}
        indeg = [0] * self.d
        for pu, pv in self.parsed():
            if pu[0] == "S" and pu[2] and pv[1] not in children[pu[1]]:
                children[pu[1]].add(pv[1])
                indeg[pv[1]] += 1
        queue = deque(i for i in range(self.d) if indeg[i] == 0)
        seen = 0
        while queue:
            i = queue.popleft()
            seen += 1
            for j in children[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    queue.append(j)
        if seen != self.d:
            raise StructureError("same-slice edges among primed variables form a cycle")

    @classmethod
    def from_parents(cls, parents, n_actions: int = 1) -> "DbnTemplate":
        """Build from a per-variable parent list, the format used by the tabular fixtures."""
        edges = {(p, f"S{j}'") for j, ps in enumerate(parents) for p in ps}
        return cls(len(parents), frozenset(edges), n_actions)

    def without(self, edge: Tuple[str, str]) -> "DbnTemplate":
        return DbnTemplate(self.d, self.edges - {edge}, self.n_actions, self.horizon)


def action_disconnected(dbn: DbnTemplate, h: Optional[int] = None) -> FrozenSet[int]:
    """Variables with no directed path from any action node in the unrolled DBN.

    The template is unrolled over slices 0..h (default ``dbn.horizon`` or 2d)
    and searched forward from every action copy.
    """
    if h is None:
        h = dbn.horizon if dbn.horizon is not None else 2 * dbn.d
    if h < 1:
        raise DomainError("unrolling horizon must be at least 1")
    lag, sync, from_action = [], [], []
    for pu, pv in dbn.parsed():
        j = pv[1]
        if pu[0] == "A":
            from_action.append(j)
        elif pu[2]:
            sync.append((pu[1], j))
        else:
            lag.append((pu[1], j))
    # nodes are (variable, slice); action copies A_t feed slice t + 1
    succ = {}
    for t in range(h + 1):
        for i, j in lag:
            if t < h:
                succ.setdefault((i, t), []).append((j, t + 1))
        for i, j in sync:
            if t >= 1:
                succ.setdefault((i, t), []).append((j, t))
    reached: Set[Tuple[int, int]] = set()
    queue = deque((j, t + 1) for t in range(h) for j in from_action)
    reached.update(queue)
    while queue:
        node = queue.popleft()
        for nxt in succ.get(node, ()):
            if nxt not in reached:
                reached.add(nxt)
                queue.append(nxt)
    touched = {i for i, _ in reached}
    return frozenset(i for i in range(dbn.d) if i not in touched)


def template_match(dbn: DbnTemplate, exo_index_set: Iterable[int]) -> str:
    """Classify a partition against the exogenous templates.

    'full' when no E->X', A->X' or E'->X' edge exists, 'diachronic' when in
    addition there is no X'->E' edge, otherwise 'none'.
    """
    exo = {int(i) for i in exo_index_set}
    if any(i < 0 or i >= dbn.d for i in exo):
        raise DomainError(f"index set {sorted(exo)} outside range({dbn.d})")
    has_sync_x_to_e = False
    for pu, pv in dbn.parsed():
        child_exo = pv[1] in exo
        if pu[0] == "A":
            if child_exo:
                return "none"
            continue
        parent_exo = pu[1] in exo
        if child_exo and not parent_exo:
            return "none"
        if pu[2] and parent_exo and not child_exo:
            has_sync_x_to_e = True
    return "full" if has_sync_x_to_e else "diachronic"
