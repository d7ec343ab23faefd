"""Riemannian steepest descent on the Stiefel manifold {W : W^T W = I}.

The solver uses the embedded geometry: Euclidean gradients are projected onto
the tangent space, steps are mapped back with a sign-fixed QR retraction and
the step length is chosen by Armijo backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .errors import DimensionError, DomainError, NumericError, RetractionError

__all__ = [
    "StiefelPoint",
    "DescentSettings",
    "MinimizeResult",
    "tangent_project",
    "retract",
    "numeric_gradient",
    "random_point",
    "minimize",
]

ORTHO_TOL = 1e-8
REPAIR_TOL = 1e-4


def _qr_positive(mat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(mat)
    diag = np.diag(r)
    if diag.size and np.min(np.abs(diag)) <= 1e-12 * max(1.0, np.max(np.abs(diag))):
        raise RetractionError("matrix is rank deficient")
    signs = np.where(diag < 0, -1.0, 1.0)
    return q * signs


def _ortho_residual(w: np.ndarray) -> float:
    if w.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(w.T @ w - np.eye(w.shape[1]))))


class StiefelPoint:
    """A d x p matrix with orthonormal columns.

    Inputs within 1e-4 of orthonormality are repaired by a QR pass; anything
    further off is rejected.
    """

    __slots__ = ("w",)

    def __init__(self, w):
        arr = np.array(w, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] > arr.shape[0]:
            raise DimensionError(f"Stiefel point needs shape (d, p) with p <= d, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("Stiefel point has non-finite entries")
        res = _ortho_residual(arr)
        if res > REPAIR_TOL:
            raise DomainError(f"columns are not orthonormal (residual {res:.3g})")
        if res > ORTHO_TOL:
            arr = _qr_positive(arr)
        self.w = arr

    @classmethod
    def empty(cls, d: int) -> "StiefelPoint":
        return cls(np.zeros((d, 0)))

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def residual(self) -> float:
        return _ortho_residual(self.w)

    def __repr__(self):
        return f"StiefelPoint(d={self.d}, p={self.p})"


@dataclass(frozen=True)
class DescentSettings:
    max_iterations: int = 400
    gradient_norm_tolerance: float = 1e-6
    armijo_sufficient_decrease: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    fd_step: float = 1e-6
    # stop when the relative decrease over this many iterations is below rel_tolerance
    stall_window: int = 5
    rel_tolerance: float = 1e-12

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_backtracks < 1 or self.stall_window < 1:
            raise DomainError("iteration counts must be positive")
        if not self.gradient_norm_tolerance > 0 or not self.fd_step > 0:
            raise DomainError("tolerances must be positive")
        if not 0 < self.armijo_sufficient_decrease < 1 or not 0 < self.backtrack_factor < 1:
            raise DomainError("Armijo constants must lie in (0, 1)")


class MinimizeResult(NamedTuple):
    point: StiefelPoint
    final_value: float
    iterations: int
    converged: bool
    history: List[float]


def _as_matrix(point) -> np.ndarray:
    return point.w if isinstance(point, StiefelPoint) else np.asarray(point, dtype=float)


def tangent_project(point, euclidean_grad) -> np.ndarray:
    """Project a Euclidean gradient onto the tangent space at ``point``: G - W sym(W^T G)."""
    w = _as_matrix(point)
    g = np.asarray(euclidean_grad, dtype=float)
    if g.shape != w.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match point shape {w.shape}")
    wtg = w.T @ g
    return g - w @ ((wtg + wtg.T) / 2)


def retract(point, tangent_step) -> StiefelPoint:
    """QR retraction of ``W + step`` with the diagonal of R made positive."""
    w = _as_matrix(point)
    step = np.asarray(tangent_step, dtype=float)
    if step.shape != w.shape:
        raise DimensionError(f"step shape {step.shape} does not match point shape {w.shape}")
    if w.shape[1] == 0:
        return StiefelPoint(w.copy())
    return StiefelPoint(_qr_positive(w + step))


def numeric_gradient(objective: Callable[[np.ndarray], float], point, fd_step: float = 1e-6) -> np.ndarray:
    """Entrywise central-difference Euclidean gradient of ``objective`` at ``point``."""
    w = _as_matrix(point)
    grad = np.empty_like(w)
    probe = w.copy()
    for idx in np.ndindex(*w.shape):
        orig = probe[idx]
        probe[idx] = orig + fd_step
        f_plus = objective(probe)
        probe[idx] = orig - fd_step
        f_minus = objective(probe)
        probe[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"objective is not finite when probing entry {idx}")
        grad[idx] = (f_plus - f_minus) / (2 * fd_step)
    return grad


def random_point(d: int, p: int, rng_seed: int) -> StiefelPoint:
    """Q factor of a seeded standard Gaussian d x p matrix."""
    rng = np.random.default_rng(rng_seed)
    if p == 0:
        return StiefelPoint.empty(d)
    return StiefelPoint(_qr_positive(rng.standard_normal((d, p))))


def minimize(
    objective: Callable[[np.ndarray], float],
    d: int,
    p: int,
    init: Optional[StiefelPoint] = None,
    settings: DescentSettings = DescentSettings(),
    rng_seed: int = 0,
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> MinimizeResult:
    """Minimize a smooth function over d x p orthonormal matrices.

    Parameters
    ----------
    objective : callable
        Maps a (d, p) array to a float.
    d, p : int
        Manifold dimensions, 1 <= p <= d.
    init : StiefelPoint, optional
        Starting point; defaults to a seeded random orthonormal matrix.
    settings : DescentSettings
    rng_seed : int
        Seed for the default initializer.
    gradient : callable, optional
        Analytic Euclidean gradient. Central finite differences are used
        when omitted.

    Returns
    -------
    MinimizeResult
        ``(point, final_value, iterations, converged, history)``; ``history``
        holds the objective value after each accepted iterate.
    """
    if not 1 <= p <= d:
        raise DimensionError(f"need 1 <= p <= d, got p={p}, d={d}")
    point = init if init is not None else random_point(d, p, rng_seed)
    if point.w.shape != (d, p):
        raise DimensionError(f"init has shape {point.w.shape}, expected {(d, p)}")

    def evaluate(w):
        val = float(objective(w))
        if np.isnan(val):
            raise NumericError("objective returned NaN")
        return val

    def egrad(w):
        if gradient is not None:
            return np.asarray(gradient(w), dtype=float)
        return numeric_gradient(objective, w, settings.fd_step)

    value = evaluate(point.w)
    history = [value]
    prev_value = None
    converged = False
    it = 0
    while it < settings.max_iterations:
        rgrad = tangent_project(point, egrad(point.w))
        gnorm2 = float(np.sum(rgrad * rgrad))
        if np.sqrt(gnorm2) < settings.gradient_norm_tolerance:
            converged = True
            break
        # quadratic-interpolation guess from the last decrease; doubling the
        # last accepted step instead can bounce across a minimum indefinitely
        t = 1.0
        if prev_value is not None:
            guess = 2.0 * (prev_value - value) / gnorm2
            if np.isfinite(guess) and guess > 0:
                t = min(guess, 1e3)
        accepted = False
        for _ in range(settings.max_backtracks):
            try:
                cand = retract(point, -t * rgrad)
            except RetractionError:
                t *= settings.backtrack_factor
                continue
            cand_val = evaluate(cand.w)
            if cand_val <= value - settings.armijo_sufficient_decrease * t * gnorm2:
                accepted = True
                break
            t *= settings.backtrack_factor
        if not accepted:
            break
        if cand.residual() > ORTHO_TOL:
            raise NumericError("iterate left the manifold")
        prev_value = value
        point, value = cand, cand_val
        history.append(value)
        it += 1
        w_ = settings.stall_window
        if len(history) > w_:
            ref = history[-1 - w_]
            if ref - value <= settings.rel_tolerance * max(abs(ref), 1e-300):
                converged = True
                break
    return MinimizeResult(point, value, it, converged, history)
