"""Experiment configuration: a TOML file with a schema version and one table per block.

Grammar (schema_version 1)::

    schema_version = 1
    name = "linear10"              # experiment directory name
    method = "simplified_grds"     # baseline | grds | simplified_grds | sras | oracle
    replications = 5
    base_seed = 0
    output_dir = "results"
    workers = 0                    # 0 = min(replications, cores)
    eval_metric = "endo"           # endo | total
    objective_mode = "full"        # objective of plain GRDS: full | diachronic

    [environment]                  # family plus simulator parameters
    family = "linear"              # linear | routing
    n_exo = 5
    n_end = 5

    [schedule]                     # total_steps, decomposition_steps, regression_interval, eval_steps, eval_seed
    [ccc]                          # tikhonov_lambda, threshold_epsilon
    [regression]                   # mode, learning_rate, l2, batch_size, phase1_max_epochs, ...
    [ppo]                          # clip, gamma, gae_lambda, rollout_steps, minibatch, ...
    [descent]                      # manifold optimizer settings

Tables other than ``[environment]`` and ``[schedule]`` may be omitted and
take their defaults. Unknown keys are errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

import tomli

from .envs import LinearMdpConfig, RoutingMdpConfig, make_linear_mdp, make_routing_mdp
from .errors import ConfigError
from .manifold import DescentSettings
from .regress import RegressionSchedule
from .rl import METHODS, PpoSettings, RunSchedule
from .statcore import CccParams

__all__ = ["ExperimentConfig", "parse_config", "load_config", "dump_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
FAMILIES = ("linear", "routing")
EVAL_METRICS = ("endo", "total")
_SECTIONS = {
    "schedule": RunSchedule,
    "ccc": CccParams,
    "regression": RegressionSchedule,
    "ppo": PpoSettings,
    "descent": DescentSettings,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    method: str
    environment: Dict[str, Any]
    schedule: RunSchedule
    ccc: CccParams = CccParams()
    regression: RegressionSchedule = RegressionSchedule()
    ppo: PpoSettings = PpoSettings()
    descent: DescentSettings = DescentSettings()
    objective_mode: str = "full"
    replications: int = 1
    base_seed: int = 0
    output_dir: str = "results"
    workers: int = 0
    eval_metric: str = "endo"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.workers < 0:
            raise ConfigError("workers must be nonnegative")
        if self.eval_metric not in EVAL_METRICS:
            raise ConfigError(f"eval_metric must be one of {EVAL_METRICS}")
        if self.objective_mode not in ("full", "diachronic"):
            raise ConfigError("objective_mode must be full or diachronic")
        if not self.name or "/" in self.name or self.name.startswith("."):
            raise ConfigError(f"invalid experiment name {self.name!r}")
        if self.environment.get("family") not in FAMILIES:
            raise ConfigError(f"environment.family must be one of {FAMILIES}")
        # fail early on bad simulator parameters
        self.env_config(self.base_seed)

    def env_config(self, seed: int):
        params = {k: v for k, v in self.environment.items() if k != "family"}
        try:
            if self.environment["family"] == "linear":
                return LinearMdpConfig(**params, seed=seed)
            if "edge_costs" in params:
                params["edge_costs"] = {tuple(int(v) for v in k.split("-")): c
                                        for k, c in params["edge_costs"].items()}
            return RoutingMdpConfig(**params, seed=seed)
        except TypeError as exc:
            raise ConfigError(f"bad environment parameters: {exc}") from exc

    def build_env(self, seed: int):
        cfg = self.env_config(seed)
        if isinstance(cfg, LinearMdpConfig):
            return make_linear_mdp(cfg)
        return make_routing_mdp(cfg)

    def resolved_output_dir(self) -> str:
        """``output_dir`` unless the EXOENDO_OUTPUT_ROOT environment variable overrides it."""
        return os.environ.get("EXOENDO_OUTPUT_ROOT", self.output_dir)


def _build_section(cls, table: Dict[str, Any], where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    if "environment" not in raw or "schedule" not in raw:
        raise ConfigError("config needs [environment] and [schedule] tables")
    kwargs: Dict[str, Any] = {"environment": dict(raw.pop("environment"))}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build_section(cls, raw.pop(key), key)
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS) - {"environment"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    missing = {"name", "method"} - set(raw)
    if missing:
        raise ConfigError(f"missing required keys: {sorted(missing)}")
    kwargs.update(raw)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v:
            return "nan"
        if v in (float("inf"), float("-inf")):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value {v!r}")


def _toml_table(name: str, table: Dict[str, Any]) -> list:
    lines, subtables = [f"[{name}]"], []
    for k, v in table.items():
        if v is None:
            continue
        if isinstance(v, dict):
            subtables.append((f"{name}.{k}", v))
        else:
            lines.append(f"{json.dumps(k) if '-' in k else k} = {_toml_value(v)}")
    lines.append("")
    for sub, tbl in subtables:
        lines += _toml_table(sub, {str(k): x for k, x in tbl.items()})
    return lines


def dump_config(config: ExperimentConfig) -> str:
    """Serialize to the TOML grammar above; ``parse_config(dump_config(c)) == c``."""
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS or f.name == "environment":
            continue
        lines.append(f"{f.name} = {_toml_value(getattr(config, f.name))}")
    lines.append("")
    lines += _toml_table("environment", config.environment)
    for key in _SECTIONS:
        lines += _toml_table(key, asdict(getattr(config, key)))
    return "\n".join(lines)
