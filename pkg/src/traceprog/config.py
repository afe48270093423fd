"""Run configuration: every tunable in one place.

Values load from a flat ``key = value`` text file and are overridden by CLI
flags.  Defaults reproduce the shipped experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any

__all__ = ["RunConfig", "load_config", "parse_override"]


@dataclass(frozen=True)
class RunConfig:
    # error specification
    spec: str = "auto"                 # continuous | continuous_sq | demo | auto
    d_max: float = 10.0
    e_max: float | None = None         # None: calibrated from the trace
    e_acc: float | None = None         # None: 1e-3 * T
    # complexity weights: depth, free parameters, variable reads
    w_depth: float = 10.0
    w_params: float = 5.0
    w_vars: float = 1.0
    # optimisation
    lr: float = 0.5
    delta_stab: float = 1e-8
    inner_budget: int = 4000
    patience: int = 400
    grad_mode: str = "squared"         # squared | exact descent seeds
    exit_frac: float = 0.1             # inner loop stops at exit_frac * e_acc
    engine: str | None = None          # tape | reference | None (auto)
    backend: str | None = None         # numba | numpy | None (env/auto)
    # search
    outer_budget: int = 1000
    best_k: int = 3
    seed: int = 0
    workers: int = 1
    exec_policy: str | None = None     # repeat_body | single_pass | None (auto)
    act_zero_tol: float = 1e-5

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_depth, self.w_params, self.w_vars)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_FIELDS = {"inner_budget", "patience", "outer_budget", "best_k", "seed", "workers"}
_FLOAT_FIELDS = {"d_max", "e_max", "e_acc", "w_depth", "w_params", "w_vars",
                 "lr", "delta_stab", "act_zero_tol", "exit_frac"}
_OPTIONAL = {"e_max", "e_acc", "engine", "backend", "exec_policy"}


def parse_override(name: str, raw: str) -> Any:
    if name not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {name!r}")
    text = raw.strip()
    if name in _OPTIONAL and text.lower() in ("none", "auto", ""):
        return None
    if name in _INT_FIELDS:
        return int(text)
    if name in _FLOAT_FIELDS:
        return float(text)
    return text


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat key = value file; '#' starts a comment."""
    cfg = base or RunConfig()
    updates = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                updates[key] = parse_override(key, value)
            except KeyError as exc:
                raise ValueError(f"{path}:{ln_no}: {exc}") from exc
    return replace(cfg, **updates)
