"""Covariance estimation, the conditional correlation coefficient and tabular CMI.

These are the numerical exogeneity tests used by the discovery algorithms.
Covariances use the population convention (divide by N) and every input to
:func:`ccc` is centered on each call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, DomainError, NumericError, SingularityError

__all__ = [
    "SampleMatrix",
    "CccParams",
    "TabularModel",
    "as_samples",
    "covariance",
    "cross_covariance",
    "inv_sqrt_spd",
    "ccc",
    "ccc_from_blocks",
    "cmi_tabular",
    "cmi_tabular_detail",
]

ArrayLike = Union["SampleMatrix", np.ndarray, Sequence]


@dataclass(frozen=True)
class SampleMatrix:
    """N observations of a p-dimensional variable, one row per observation."""

    data: np.ndarray
    centered: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise DimensionError(f"sample matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise DimensionError(f"need at least 2 rows, got {arr.shape[0]}")
        if self.centered and arr.shape[1] > 0:
            tol = 1e-9 * (arr.std(axis=0) + 1.0)
            if np.any(np.abs(arr.mean(axis=0)) > tol):
                raise DimensionError("matrix flagged centered but column means are nonzero")
        object.__setattr__(self, "data", arr)

    @classmethod
    def centered_from(cls, x) -> "SampleMatrix":
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        return cls(arr - arr.mean(axis=0), centered=True)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CccParams:
    """Tikhonov strength and acceptance threshold for the CCC test."""

    tikhonov_lambda: float = 0.01
    threshold_epsilon: float = 0.05

    def __post_init__(self):
        if not self.tikhonov_lambda > 0:
            raise DomainError("tikhonov_lambda must be positive")
        if not self.threshold_epsilon > 0:
            raise DomainError("threshold_epsilon must be positive")


@dataclass
class TabularModel:
    """Explicit joint distribution over (S, A, S') for d discrete state variables.

    ``joint`` has shape ``(*state_cardinalities, action_cardinality,
    *state_cardinalities)``.
    """

    state_cardinalities: Tuple[int, ...]
    action_cardinality: int
    joint: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.state_cardinalities = tuple(int(c) for c in self.state_cardinalities)
        if any(c < 1 for c in self.state_cardinalities) or self.action_cardinality < 1:
            raise DomainError("cardinalities must be positive")
        shape = self.state_cardinalities + (int(self.action_cardinality),) + self.state_cardinalities
        joint = np.asarray(self.joint, dtype=float)
        if joint.shape != shape:
            raise DimensionError(f"joint has shape {joint.shape}, expected {shape}")
        if np.any(joint < 0):
            raise DomainError("joint table has negative entries")
        if abs(joint.sum() - 1.0) > 1e-12:
            raise DomainError(f"joint table sums to {joint.sum()!r}, not 1")
        self.joint = joint

    @property
    def d(self) -> int:
        return len(self.state_cardinalities)


def as_samples(x: ArrayLike) -> np.ndarray:
    """Return a float 2-D array view of ``x`` (column vector for 1-D input)."""
    if isinstance(x, SampleMatrix):
        return x.data
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D sample matrix, got shape {arr.shape}")
    return arr


def _centered(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0)


def covariance(x: ArrayLike) -> np.ndarray:
    """Population covariance ``Xc^T Xc / N`` of the column-centered samples."""
    arr = as_samples(x)
    if arr.shape[0] < 2:
        raise DimensionError(f"covariance needs at least 2 rows, got {arr.shape[0]}")
    xc = _centered(arr)
    cov = xc.T @ xc / arr.shape[0]
    return (cov + cov.T) / 2


def cross_covariance(x: ArrayLike, y: ArrayLike) -> np.ndarray:
    """Population cross-covariance ``Xc^T Yc / N``."""
    xa, ya = as_samples(x), as_samples(y)
    if xa.shape[0] != ya.shape[0]:
        raise DimensionError(f"row counts differ: {xa.shape[0]} vs {ya.shape[0]}")
    if xa.shape[0] < 2:
        raise DimensionError("cross-covariance needs at least 2 rows")
    return _centered(xa).T @ _centered(ya) / xa.shape[0]


def inv_sqrt_spd(mat: np.ndarray, floor: float, block: str = "matrix") -> np.ndarray:
    """Inverse square root of a symmetric matrix by eigendecomposition.

    Eigenvalues below ``floor`` are raised to ``floor`` before the power.
    """
    try:
        vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"eigendecomposition failed for block {block}") from exc
    vals = np.maximum(vals, floor)
    out = (vecs / np.sqrt(vals)) @ vecs.T
    if not np.all(np.isfinite(out)):
        raise SingularityError(f"inverse square root is not finite for block {block}")
    return out


def ccc_from_blocks(sxx, sxy, sxz, szz, szy, syy, lam: float) -> float:
    """CCC from precomputed covariance blocks.

    V = (Sxx+lam I)^-1/2 (Sxy - Sxz (Szz+lam I)^-1 Szy) (Syy+lam I)^-1/2 and
    the result is tr(V^T V).
    """
    px, py = sxy.shape
    if px == 0 or py == 0:
        return 0.0
    floor = lam / 10.0
    b = sxy
    if szz.shape[0] > 0:
        reg_z = szz + lam * np.eye(szz.shape[0])
        try:
            b = sxy - sxz @ np.linalg.solve(reg_z, szy)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("regularized Z covariance is singular") from exc
    left = inv_sqrt_spd(sxx + lam * np.eye(px), floor, "XX")
    right = inv_sqrt_spd(syy + lam * np.eye(py), floor, "YY")
    v = left @ b @ right
    return float(max(np.sum(v * v), 0.0))


def ccc(x: ArrayLike, y: ArrayLike, z: ArrayLike | None, params: CccParams = CccParams()) -> float:
    """Conditional correlation coefficient between x and y given z.

    Parameters
    ----------
    x, y, z : array_like or SampleMatrix
        Sample matrices with equal row counts. ``z`` may be None or have
        zero columns, in which case the unconditional coefficient is returned.
    params : CccParams
        Regularization strength ``tikhonov_lambda`` is applied to all three
        inverted blocks.

    Returns
    -------
    float
        ``tr(V^T V)``, nonnegative.
    """
    xa, ya = as_samples(x), as_samples(y)
    n = xa.shape[0]
    za = np.zeros((n, 0)) if z is None else as_samples(z)
    if not (ya.shape[0] == n and za.shape[0] == n):
        raise DimensionError("x, y and z must have the same number of rows")
    if n < 2:
        raise DimensionError("ccc needs at least 2 rows")
    for name, arr in (("x", xa), ("y", ya), ("z", za)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")
    joint = _centered(np.hstack([xa, ya, za]))
    cov = joint.T @ joint / n
    ix = slice(0, xa.shape[1])
    iy = slice(xa.shape[1], xa.shape[1] + ya.shape[1])
    iz = slice(xa.shape[1] + ya.shape[1], cov.shape[0])
    return ccc_from_blocks(
        cov[ix, ix], cov[ix, iy], cov[ix, iz], cov[iz, iz], cov[iz, iy], cov[iy, iy],
        params.tikhonov_lambda,
    )


def _xlogx_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(num[mask]) - np.log(den[mask]))))


def cmi_tabular_detail(model: TabularModel, exo_index_set: Iterable[int], mode: str = "full") -> Tuple[float, bool]:
    """Exact exogeneity CMI of a tabular model plus an empty-support flag.

    ``mode='full'`` gives I(X'; [E, A] | X) and ``mode='diachronic'`` gives
    I(X'; [E, A, E'] | X), in nats. The flag is True when X is empty, in which
    case there is nothing to test and 0 is returned.
    """
    if mode not in ("full", "diachronic"):
        raise DomainError(f"unknown mode {mode!r}")
    d = model.d
    exo = sorted(set(int(i) for i in exo_index_set))
    if any(i < 0 or i >= d for i in exo):
        raise DomainError(f"index set {exo} is not a subset of range({d})")
    if not exo:
        return 0.0, True
    endo = [i for i in range(d) if i not in exo]
    # joint axes: S_0..S_{d-1}, A, S'_0..S'_{d-1}
    a_ax = d
    x_ax = exo
    xn_ax = [d + 1 + i for i in exo]
    en_ax = [d + 1 + i for i in endo]
    # reorder to (X, E, A, X', E')
    order = x_ax + endo + [a_ax] + xn_ax + en_ax
    p = np.transpose(model.joint, order)
    nx, ne, nxn = len(exo), len(endo), len(exo)
    if mode == "full":
        p = p.sum(axis=tuple(range(nx + ne + 1 + nxn, p.ndim)))
        # cond block (E, A) sits between X and X'
        cond_axes = tuple(range(nx, nx + ne + 1))
    else:
        # move E' next to E, A so the "other" block is (E, A, E')
        perm = list(range(nx + ne + 1)) + list(range(nx + ne + 1 + nxn, p.ndim)) + list(range(nx + ne + 1, nx + ne + 1 + nxn))
        p = np.transpose(p, perm)
        cond_axes = tuple(range(nx, p.ndim - nxn))
    xprime_axes = tuple(range(p.ndim - nxn, p.ndim))
    p_x = p.sum(axis=cond_axes + xprime_axes, keepdims=True)
    p_x_other = p.sum(axis=xprime_axes, keepdims=True)
    p_x_xprime = p.sum(axis=cond_axes, keepdims=True)
    if p_x.sum() <= 0:
        return 0.0, True
    num = p * p_x
    den = p_x_other * p_x_xprime
    num, den = np.broadcast_arrays(num, den)
    value = _xlogx_ratio(p, num, den)
    return max(value, 0.0), False


def cmi_tabular(model: TabularModel, exo_index_set: Iterable[int], mode: str = "full") -> float:
    """Exact conditional mutual information testing exogeneity of a variable set."""
    return cmi_tabular_detail(model, exo_index_set, mode)[0]
