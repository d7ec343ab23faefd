"""Exogenous reward models and the endogenous reward r - m_exo(W^T s).

Three schedules are supported: one least-squares fit after discovery, a
least-squares refit every ``repeated_interval`` steps, and a 50-25 ReLU
network trained once and then updated online every ``update_interval`` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericError
from .nets import Adam, init_mlp, mlp_backward, mlp_forward

__all__ = [
    "RewardModel",
    "RegressionSchedule",
    "fit_linear",
    "fit_mlp_phase1",
    "update_mlp_online",
    "endo_reward",
    "ExoRewardEstimator",
    "model_to_text",
    "model_from_text",
]

HIDDEN = (50, 25)
SCHEDULE_MODES = ("single_linear", "repeated_linear", "online_mlp")
CONVERGENCE_WINDOW = 5
CONVERGENCE_REL = 1e-5


@dataclass(frozen=True)
class RegressionSchedule:
    mode: str = "online_mlp"
    update_interval: int = 256
    repeated_interval: int = 1000
    learning_rate: float = 3e-4
    l2: float = 3e-5
    batch_size: int = 256
    phase1_max_epochs: int = 125
    # repeated_linear only: refit on the most recent window (None = all data)
    window: Optional[int] = None

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError(f"unknown regression mode {self.mode!r}")
        if min(self.update_interval, self.repeated_interval, self.batch_size, self.phase1_max_epochs) < 1:
            raise ConfigError("regression intervals, batch size and epochs must be positive")
        if self.learning_rate < 0 or self.l2 < 0:
            raise ConfigError("learning_rate and l2 must be nonnegative")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be positive")


@dataclass
class RewardModel:
    """Linear or MLP predictor of the exogenous reward from d_exo coordinates.

    The MLP works on standardized inputs and targets; ``scale`` holds the
    (x_mean, x_std, r_mean, r_std) used for that.
    """

    kind: str
    d_exo: int
    params: List[np.ndarray]
    optimizer: Optional[Adam] = None
    scale: Optional[Dict[str, np.ndarray]] = None
    l2: float = 0.0
    diagnostics: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "linear":
            if len(self.params) != 2 or self.params[0].shape != (self.d_exo,):
                raise DimensionError("linear model needs [weights(d_exo), intercept]")
        elif self.kind == "mlp":
            sizes = [self.d_exo, *HIDDEN, 1]
            shapes = []
            for a, b in zip(sizes[:-1], sizes[1:]):
                shapes += [(a, b), (b,)]
            if [p.shape for p in self.params] != shapes:
                raise DimensionError(f"mlp parameter shapes do not match d_exo={self.d_exo}")
        else:
            raise DomainError(f"unknown model kind {self.kind!r}")

    @property
    def step_count(self) -> int:
        return 0 if self.optimizer is None else self.optimizer.t

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = x.reshape(1, -1) if single else x
        if x.shape[1] != self.d_exo:
            raise DimensionError(f"expected {self.d_exo} exo features, got {x.shape[1]}")
        if self.kind == "linear":
            out = x @ self.params[0] + self.params[1][0]
        else:
            sc = self.scale
            out, _ = mlp_forward(self.params, (x - sc["x_mean"]) / sc["x_std"], "relu")
            out = out[:, 0] * sc["r_std"][0] + sc["r_mean"][0]
        return out[0] if single else out


def _check_xr(x, r):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    r = np.asarray(r, dtype=float).reshape(-1)
    if x.shape[0] != r.shape[0]:
        raise DimensionError(f"{x.shape[0]} feature rows but {r.shape[0]} rewards")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
        raise NumericError("non-finite regression inputs")
    return x, r


def fit_linear(x, r) -> RewardModel:
    """Ordinary least squares with an intercept, minimum-norm when rank deficient."""
    x, r = _check_xr(x, r)
    n, d_exo = x.shape
    if n < d_exo:
        raise DimensionError(f"need at least {d_exo} samples, got {n}")
    design = np.hstack([x, np.ones((n, 1))])
    coef, _, rank, _ = np.linalg.lstsq(design, r, rcond=None)
    model = RewardModel("linear", d_exo, [coef[:d_exo].copy(), coef[d_exo:].copy()])
    if rank < d_exo + 1:
        model.diagnostics.append(f"design rank {rank} < {d_exo + 1}; minimum-norm solution")
    return model


def _mlp_loss_grads(model: RewardModel, xb, yb):
    out, cache = mlp_forward(model.params, xb, "relu")
    resid = out[:, 0] - yb
    loss = 0.5 * float(np.mean(resid ** 2))
    grads = mlp_backward(model.params, cache, resid[:, None] / len(yb), "relu")
    if model.l2 > 0:
        for k in range(0, len(grads), 2):
            grads[k] = grads[k] + model.l2 * model.params[k]
    return loss, grads


def _standardize(model: RewardModel, x, r):
    sc = model.scale
    return (x - sc["x_mean"]) / sc["x_std"], (r - sc["r_mean"][0]) / sc["r_std"][0]


def fit_mlp_phase1(x, r, schedule: RegressionSchedule = RegressionSchedule(), seed: int = 0) -> RewardModel:
    """Train the 50-25 ReLU regressor with shuffled mini-batch Adam until convergence.

    Training stops after ``phase1_max_epochs`` or once the mean epoch loss
    improved by less than 1e-5 (relative) over the last 5 epochs.
    """
    x, r = _check_xr(x, r)
    n, d_exo = x.shape
    if n < 1:
        raise DimensionError("need at least one sample")
    rng = np.random.default_rng([seed, 7])
    x_std = x.std(axis=0) if n > 1 else np.ones(d_exo)
    r_std = r.std() if n > 1 else 1.0
    scale = {
        "x_mean": x.mean(axis=0),
        "x_std": np.where(x_std > 1e-12, x_std, 1.0),
        "r_mean": np.array([r.mean()]),
        "r_std": np.array([r_std if r_std > 1e-12 else 1.0]),
    }
    # zero output layer: the untrained model predicts the training mean
    params = init_mlp([max(d_exo, 1), *HIDDEN, 1], rng, zero_last=True)
    if d_exo == 0:
        # no exo coordinates: the prediction is the training mean
        params[0] = np.zeros((0, HIDDEN[0]))
    model = RewardModel("mlp", d_exo, params, Adam(params, schedule.learning_rate), scale, schedule.l2)
    xs, ys = _standardize(model, x, r)
    bs = min(schedule.batch_size, n)
    history: List[float] = []
    for epoch in range(schedule.phase1_max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = _mlp_loss_grads(model, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch offset {start}")
            model.optimizer.step(model.params, grads)
            total += loss * len(idx)
        history.append(total / n)
        if len(history) > CONVERGENCE_WINDOW:
            ref = history[-1 - CONVERGENCE_WINDOW]
            if ref - history[-1] < CONVERGENCE_REL * abs(ref):
                break
    model.diagnostics.append(f"phase1 epochs {len(history)} final loss {history[-1]!r}")
    return model


def update_mlp_online(model: RewardModel, x_batch, r_batch, batch_size: int = 256) -> RewardModel:
    """One pass of mini-batch Adam steps over the given samples, in order."""
    if model.kind != "mlp":
        raise DomainError("online updates need an mlp model")
    x, r = _check_xr(np.asarray(x_batch, dtype=float).reshape(-1, model.d_exo), r_batch)
    n = x.shape[0]
    if n == 0:
        return model
    xs, ys = _standardize(model, x, r)
    for start in range(0, n, batch_size):
        loss, grads = _mlp_loss_grads(model, xs[start:start + batch_size], ys[start:start + batch_size])
        if not np.isfinite(loss):
            model.diagnostics.append("online update skipped: non-finite loss")
            continue
        model.optimizer.step(model.params, grads)
    return model


def endo_reward(model: RewardModel, projection, s, r):
    """r - m_exo(W^T (s - center)); works on a single state or a batch of states."""
    s = np.asarray(s, dtype=float)
    feats = projection.features(s)
    return np.asarray(r, dtype=float) - model.predict(feats)


class ExoRewardEstimator:
    """Owns a reward model and applies the configured refit schedule during Phase 2."""

    def __init__(self, schedule: RegressionSchedule, projection, seed: int = 0):
        self.schedule = schedule
        self.projection = projection
        self.seed = seed
        self.model: Optional[RewardModel] = None
        self._feats: List[np.ndarray] = []
        self._rewards: List[float] = []
        self._since_update = 0

    def fit_initial(self, s, r) -> np.ndarray:
        """Fit on Phase-1 data and return the rewritten (endo) rewards."""
        feats = self.projection.features(np.asarray(s, dtype=float))
        r = np.asarray(r, dtype=float).reshape(-1)
        self._feats = list(feats)
        self._rewards = list(r)
        if self.schedule.mode == "online_mlp":
            self.model = fit_mlp_phase1(feats, r, self.schedule, self.seed)
        else:
            self.model = fit_linear(feats, r)
        return r - self.model.predict(feats)

    def transform(self, s, r: float) -> float:
        """Endo reward for one new transition, then advance the refit schedule."""
        f = self.projection.features(np.asarray(s, dtype=float))
        out = float(r - self.model.predict(f))
        self._feats.append(f)
        self._rewards.append(float(r))
        self._since_update += 1
        sch = self.schedule
        if sch.mode == "online_mlp" and self._since_update >= sch.update_interval:
            k = sch.update_interval
            update_mlp_online(self.model, np.array(self._feats[-k:]), np.array(self._rewards[-k:]),
                              sch.batch_size)
            self._since_update = 0
        elif sch.mode == "repeated_linear" and self._since_update >= sch.repeated_interval:
            lo = 0 if sch.window is None else max(0, len(self._rewards) - sch.window)
            self.model = fit_linear(np.array(self._feats[lo:]), np.array(self._rewards[lo:]))
            self._since_update = 0
        return out


def model_to_text(model: RewardModel) -> str:
    """Tab-separated checkpoint: one line per array (name, shape, flat values)."""
    lines = ["name\tshape\tvalues", f"kind\t-\t{model.kind}", f"d_exo\t-\t{model.d_exo}",
             f"l2\t-\t{model.l2!r}", f"step_count\t-\t{model.step_count}"]
    arrays = [(f"param_{i}", p) for i, p in enumerate(model.params)]
    if model.scale is not None:
        arrays += [(f"scale_{k}", v) for k, v in sorted(model.scale.items())]
    for name, arr in arrays:
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t" + " ".join(repr(float(v)) for v in arr.ravel()))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> RewardModel:
    """Inverse of :func:`model_to_text` (optimizer moments are not restored)."""
    meta, arrays = {}, {}
    for line in text.strip().splitlines()[1:]:
        name, shape, values = (line.split("\t") + [""])[:3]
        if shape == "-":
            meta[name] = values
            continue
        dims = tuple(int(s) for s in shape.split("x") if s != "")
        vals = np.array([float(v) for v in values.split()], dtype=float)
        arrays[name] = vals.reshape(dims)
    n_params = len([k for k in arrays if k.startswith("param_")])
    params = [arrays[f"param_{i}"] for i in range(n_params)]
    scale = {k[6:]: v for k, v in arrays.items() if k.startswith("scale_")} or None
    model = RewardModel(meta["kind"], int(meta["d_exo"]), params, scale=scale, l2=float(meta["l2"]))
    if model.kind == "mlp":
        model.optimizer = Adam(model.params, 0.0)
    return model
