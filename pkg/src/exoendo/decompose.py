"""Exogenous-subspace discovery: GRDS, Simplified-GRDS, SRAS and tabular Oracle-GRDS.

The linear discovery routines never touch the raw samples inside the
optimizer loop. The joint covariance of ``[S, S', A]`` is computed once and
every candidate projection W is scored through projected blocks
``M^T Sigma M``, which gives the same CCC as recomputing it from the projected
samples. The CCC gradient with respect to W is derived in closed form from
the trace expression ``tr(A^-1 B C^-1 B^T)``.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import null_space

from .errors import CapacityError, DimensionError, DomainError, ExoEndoError
from .manifold import DescentSettings, StiefelPoint, minimize, random_point
from .statcore import CccParams, SampleMatrix, TabularModel, cmi_tabular

__all__ = [
    "TransitionDataset",
    "ExoProjection",
    "DecompositionReport",
    "CccObjective",
    "grds",
    "sras",
    "oracle_grds_tabular",
    "verify_projection",
    "canonicalize",
]

MODES = ("full", "diachronic", "simplified")
ORACLE_CMI_TOL = 1e-9
ORACLE_MAX_VARS = 12


@dataclass(frozen=True)
class TransitionDataset:
    """Transitions (s, a, r, s') with states centered by the mean of s."""

    s: SampleMatrix
    a: SampleMatrix
    r: np.ndarray
    s_next: SampleMatrix
    center: np.ndarray

    @classmethod
    def from_arrays(cls, s, a, r, s_next) -> "TransitionDataset":
        s = np.asarray(s, dtype=float)
        s_next = np.asarray(s_next, dtype=float)
        a = np.asarray(a, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        r = np.asarray(r, dtype=float).reshape(-1)
        n = s.shape[0]
        if not (s_next.shape == s.shape and a.shape[0] == n and r.shape[0] == n):
            raise DimensionError("s, a, r and s_next must share the row count (and s, s_next the width)")
        center = s.mean(axis=0)
        return cls(
            SampleMatrix(s - center),
            SampleMatrix(a),
            r,
            SampleMatrix(s_next - center),
            center,
        )

    @property
    def n(self) -> int:
        return self.s.n

    @property
    def d(self) -> int:
        return self.s.p

    @property
    def l(self) -> int:
        return self.a.p

    def prefix(self, length: int) -> "TransitionDataset":
        """Dataset built from the first ``length`` raw transitions."""
        raw_s = self.s.data + self.center
        raw_sn = self.s_next.data + self.center
        return TransitionDataset.from_arrays(raw_s[:length], self.a.data[:length],
                                             self.r[:length], raw_sn[:length])


@dataclass
class ExoProjection:
    """Orthonormal basis of the exogenous subspace and the induced split of s."""

    w_exo: StiefelPoint
    achieved_ccc_full: float = 0.0
    mode: str = "full"
    center: Optional[np.ndarray] = None

    @property
    def d(self) -> int:
        return self.w_exo.d

    @property
    def d_exo(self) -> int:
        return self.w_exo.p

    @classmethod
    def empty(cls, d: int, center=None, mode: str = "full") -> "ExoProjection":
        return cls(StiefelPoint.empty(d), 0.0, mode, center)

    def exo(self, s) -> np.ndarray:
        w = self.w_exo.w
        return np.asarray(s, dtype=float) @ w @ w.T

    def endo(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return s - self.exo(s)

    def features(self, s) -> np.ndarray:
        """Exo coordinates W^T (s - center), the inputs to the reward model."""
        s = np.asarray(s, dtype=float)
        if self.center is not None:
            s = s - self.center
        return s @ self.w_exo.w


@dataclass
class DecompositionReport:
    projection: ExoProjection
    per_rank_ccc: List[Tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    algorithm: str = ""
    diagnostics: List[str] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.projection.d_exo

    def to_tsv(self, include_timing: bool = False) -> str:
        """Tab-separated record: header rows then per-rank CCC and W_exo rows.

        Wall time is left out by default so the record is a pure function of
        the data and seeds.
        """
        proj = self.projection
        lines = [
            "key\tvalue",
            f"algorithm\t{self.algorithm}",
            f"rank\t{proj.d_exo}",
            f"d\t{proj.d}",
            f"mode\t{proj.mode}",
            f"achieved_ccc\t{proj.achieved_ccc_full!r}",
        ]
        if include_timing:
            lines.append(f"wall_time\t{self.wall_time!r}")
        for rank, val in self.per_rank_ccc:
            lines.append(f"ccc_rank_{rank}\t{val!r}")
        for i, row in enumerate(proj.w_exo.w):
            lines.append(f"w_row_{i}\t" + " ".join(repr(float(v)) for v in row))
        for note in self.diagnostics:
            lines.append(f"note\t{note}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# projected CCC with analytic gradient

def _trace_ccc_and_block_grads(blocks, lam):
    sxx, sxy, sxz, szz, szy, syy = blocks
    px, py = sxy.shape
    pz = szz.shape[0]
    ai = np.linalg.inv(sxx + lam * np.eye(px))
    ci = np.linalg.inv(syy + lam * np.eye(py))
    if pz:
        ki = np.linalg.inv(szz + lam * np.eye(pz))
        b = sxy - sxz @ ki @ szy
    else:
        ki = np.zeros((0, 0))
        b = sxy
    aib = ai @ b
    bci = b @ ci
    value = float(np.sum(aib * bci))
    g_b = 2.0 * aib @ ci
    g_xx = -aib @ ci @ b.T @ ai
    g_yy = -ci @ b.T @ aib @ ci
    if pz:
        g_xz = -g_b @ szy.T @ ki
        g_zy = -ki @ sxz.T @ g_b
        g_zz = ki @ sxz.T @ g_b @ szy.T @ ki
    else:
        g_xz = np.zeros((px, 0))
        g_zy = np.zeros((0, py))
        g_zz = np.zeros((0, 0))
    return value, (g_xx, g_b, g_xz, g_zz, g_zy, g_yy)


class CccObjective:
    """CCC of a projection W scored from the joint covariance of [S, S', A].

    Parameters
    ----------
    data : TransitionDataset
    mode : {'full', 'diachronic', 'simplified'}
        Which Y block to test: ``[S - S W W^T, A]``, that plus
        ``S' - S' W W^T``, or ``A`` alone.
    lam : float
        Tikhonov strength.
    """

    def __init__(self, data: TransitionDataset, mode: str, lam: float):
        if mode not in MODES:
            raise DomainError(f"unknown objective mode {mode!r}")
        self.mode = mode
        self.lam = lam
        self.d = data.d
        self.l = data.l
        joint = np.hstack([data.s.data, data.s_next.data, data.a.data])
        joint = joint - joint.mean(axis=0)
        self.sigma = joint.T @ joint / joint.shape[0]

    def _maps(self, w):
        d, l = self.d, self.l
        p = w.shape[1]
        rows = 2 * d + l
        mx = np.zeros((rows, p))
        mx[d:2 * d] = w
        mz = np.zeros((rows, p))
        mz[:d] = w
        proj = np.eye(d) - w @ w.T
        if self.mode == "simplified":
            my = np.zeros((rows, l))
            my[2 * d:] = np.eye(l)
        elif self.mode == "full":
            my = np.zeros((rows, d + l))
            my[:d, :d] = proj
            my[2 * d:, d:] = np.eye(l)
        else:
            my = np.zeros((rows, 2 * d + l))
            my[:d, :d] = proj
            my[2 * d:, d:d + l] = np.eye(l)
            my[d:2 * d, d + l:] = proj
        return mx, my, mz

    def value_and_grad(self, w) -> Tuple[float, np.ndarray]:
        w = np.asarray(w, dtype=float)
        d, l = self.d, self.l
        if w.shape[1] == 0:
            return 0.0, np.zeros_like(w)
        mx, my, mz = self._maps(w)
        sig = self.sigma
        smx, smy, smz = sig @ mx, sig @ my, sig @ mz
        blocks = (mx.T @ smx, mx.T @ smy, mx.T @ smz, mz.T @ smz, mz.T @ smy, my.T @ smy)
        value, (g_xx, g_xy, g_xz, g_zz, g_zy, g_yy) = _trace_ccc_and_block_grads(blocks, self.lam)
        grad_mx = smx @ (g_xx + g_xx.T) + smy @ g_xy.T + smz @ g_xz.T
        grad_mz = smz @ (g_zz + g_zz.T) + smx @ g_xz + smy @ g_zy.T
        grad = grad_mx[d:2 * d] + grad_mz[:d]
        if self.mode != "simplified":
            grad_my = smy @ (g_yy + g_yy.T) + smx @ g_xy + smz @ g_zy
            g_proj = grad_my[:d, :d]
            grad -= (g_proj + g_proj.T) @ w
            if self.mode == "diachronic":
                g_proj2 = grad_my[d:2 * d, d + l:]
                grad -= (g_proj2 + g_proj2.T) @ w
        return value, grad

    def __call__(self, w) -> float:
        return self.value_and_grad(w)[0]

    def gradient(self, w) -> np.ndarray:
        return self.value_and_grad(w)[1]


def canonicalize(w: np.ndarray, data: TransitionDataset) -> np.ndarray:
    """Rotate W within its span to principal axes of S W, ordered by descending variance.

    Column signs are fixed so the largest-magnitude entry is positive.
    """
    if w.shape[1] == 0:
        return w
    proj = data.s.data @ w
    cov = proj.T @ proj / proj.shape[0]
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(vals)[::-1]
    out = w @ vecs[:, order]
    for j in range(out.shape[1]):
        k = np.argmax(np.abs(out[:, j]))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    q, r = np.linalg.qr(out)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _check_floor(data: TransitionDataset):
    if data.n < data.d + 10:
        raise DimensionError(f"need at least d + 10 = {data.d + 10} transitions, got {data.n}")


def grds(
    data: TransitionDataset,
    params: CccParams = CccParams(),
    settings: DescentSettings = DescentSettings(),
    objective_mode: str = "full",
    seed: int = 0,
    restarts: int = 1,
    verify_epsilon: Optional[float] = None,
) -> DecompositionReport:
    """Rank-descending search for the largest W whose verification CCC is below epsilon.

    ``objective_mode='simplified'`` optimizes CCC(S'W; A | SW) and then checks
    the full-setting CCC; the other modes optimize and check the same
    objective. Ranks are scanned from d down to 1.
    """
    if objective_mode not in MODES:
        raise DomainError(f"unknown objective mode {objective_mode!r}")
    _check_floor(data)
    start = time.perf_counter()
    eps = params.threshold_epsilon if verify_epsilon is None else verify_epsilon
    lam = params.tikhonov_lambda
    check_mode = "diachronic" if objective_mode == "diachronic" else "full"
    objective = CccObjective(data, objective_mode, lam)
    checker = objective if objective_mode == check_mode else CccObjective(data, check_mode, lam)
    report = DecompositionReport(ExoProjection.empty(data.d, data.center, check_mode),
                                 algorithm="simplified_grds" if objective_mode == "simplified" else "grds")
    d = data.d
    for p in range(d, 0, -1):
        best = None
        try:
            for r in range(max(1, restarts)):
                init = random_point(d, p, rng_seed=[seed, p, r])
                res = minimize(objective, d, p, init=init, settings=settings,
                               gradient=objective.gradient)
                if best is None or res.final_value < best.final_value:
                    best = res
            check = checker(best.point.w)
        except (ExoEndoError, np.linalg.LinAlgError) as exc:
            report.per_rank_ccc.append((p, float("nan")))
            report.diagnostics.append(f"rank {p} failed: {exc}")
            continue
        report.per_rank_ccc.append((p, check))
        if check < eps:
            w = canonicalize(best.point.w, data)
            report.projection = ExoProjection(StiefelPoint(w), check, check_mode, data.center)
            break
    report.wall_time = time.perf_counter() - start
    return report


def sras(
    data: TransitionDataset,
    params: CccParams = CccParams(),
    settings: DescentSettings = DescentSettings(),
    seed: int = 0,
    screen_epsilon: Optional[float] = None,
    full_epsilon: Optional[float] = None,
) -> DecompositionReport:
    """Stepwise rank-ascending construction of W_exo one column at a time.

    Every step minimizes the simplified CCC over unit vectors in the null
    space of all earlier candidates. A candidate passing the simplified screen
    joins W_temp, and W_temp becomes W_exo whenever it also passes the
    full-setting check. Rejected candidates still shrink the null space.
    """
    _check_floor(data)
    start = time.perf_counter()
    eps_sim = params.threshold_epsilon if screen_epsilon is None else screen_epsilon
    eps_full = params.threshold_epsilon if full_epsilon is None else full_epsilon
    lam = params.tikhonov_lambda
    d = data.d
    simple = CccObjective(data, "simplified", lam)
    full = CccObjective(data, "full", lam)
    w_exo = np.zeros((d, 0))
    w_temp = np.zeros((d, 0))
    cands = np.zeros((d, 0))
    report = DecompositionReport(ExoProjection.empty(d, data.center), algorithm="sras")
    best_full = 0.0
    for k in range(d):
        try:
            basis = null_space(cands.T) if cands.shape[1] else np.eye(d)
        except (np.linalg.LinAlgError, ValueError) as exc:
            report.diagnostics.append(f"null space failed at step {k}: {exc}")
            break
        if basis.shape[1] == 0:
            report.diagnostics.append(f"null space empty at step {k}")
            break
        fixed = w_temp

        def obj(v, fixed=fixed, basis=basis):
            return simple(np.hstack([fixed, basis @ v]))

        def grad(v, fixed=fixed, basis=basis):
            g = simple.gradient(np.hstack([fixed, basis @ v]))
            return basis.T @ g[:, fixed.shape[1]:]

        q = basis.shape[1]
        init = random_point(q, 1, rng_seed=[seed, k])
        res = minimize(obj, q, 1, init=init, settings=settings, gradient=grad)
        w_new = basis @ res.point.w
        w_new /= np.linalg.norm(w_new)
        cands = np.hstack([cands, w_new])
        ccc_sim = simple(np.hstack([w_temp, w_new]))
        report.per_rank_ccc.append((k + 1, ccc_sim))
        if ccc_sim < eps_sim:
            w_temp = np.hstack([w_temp, w_new])
            ccc_full = full(w_temp)
            if ccc_full < eps_full:
                w_exo = w_temp.copy()
                best_full = ccc_full
    if w_exo.shape[1]:
        w = canonicalize(w_exo, data)
        report.projection = ExoProjection(StiefelPoint(w), best_full, "full", data.center)
    report.wall_time = time.perf_counter() - start
    return report


def verify_projection(data: TransitionDataset, projection: ExoProjection,
                      params: CccParams = CccParams()) -> Tuple[float, bool]:
    """Recompute the full or diachronic CCC of a projection; valid iff below epsilon."""
    if projection.d != data.d:
        raise DimensionError(f"projection is {projection.d}-D but data are {data.d}-D")
    if projection.d_exo == 0:
        return 0.0, True
    mode = "diachronic" if projection.mode == "diachronic" else "full"
    value = CccObjective(data, mode, params.tikhonov_lambda)(projection.w_exo.w)
    return value, value < params.threshold_epsilon


def oracle_grds_tabular(model: TabularModel, mode: str = "full") -> Tuple[int, ...]:
    """Largest variable subset whose exact exogeneity CMI vanishes.

    Sizes are scanned from d down to 0 and the first zero-CMI subset in
    lexicographic order is returned.
    """
    d = model.d
    if d > ORACLE_MAX_VARS:
        raise CapacityError(f"exhaustive search limited to {ORACLE_MAX_VARS} variables, got {d}")
    for size in range(d, 0, -1):
        for subset in itertools.combinations(range(d), size):
            if cmi_tabular(model, subset, mode) < ORACLE_CMI_TOL:
                return subset
    return ()
