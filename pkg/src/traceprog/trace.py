"""Observation traces, error specifications, and the trace loss.

A trace is a time-ordered sequence of (state, action(theta)) records emitted
by some black-box transition system.  An :class:`ErrorSpec` defines what it
means for an executed action sequence to match the observed one: a per-action
error ``sigma_act`` and a length error ``sigma_len``, plus the thresholds
``e_max`` (per-action abort) and ``e_acc`` (total-loss acceptance).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Schema",
    "Step",
    "ObservationTrace",
    "ErrorSpec",
    "TraceError",
    "loss",
    "builtin_specs",
    "continuous_spec",
    "continuous_sq_spec",
    "demo_spec",
    "resolve_thresholds",
    "load_trace",
    "save_trace",
    "ACT_L2",
    "ACT_L2_SQ",
    "ACT_DEMO",
    "ACT_CUSTOM",
    "LEN_ZERO",
    "LEN_SQDIFF",
    "LEN_CUSTOM",
]

# sigma_act / sigma_len kinds.  Integer codes so the fit kernels can branch on
# them without calling back into Python; CUSTOM forces the interpreted path.
ACT_L2 = 0
ACT_L2_SQ = 1
ACT_DEMO = 2
ACT_CUSTOM = -1

LEN_ZERO = 0
LEN_SQDIFF = 1
LEN_CUSTOM = -1


class TraceError(ValueError):
    """Raised for malformed traces or trace files."""


def _as_vector(value, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise TraceError(f"expected a flat vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise TraceError(f"expected dim {dim}, got {arr.shape[0]}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Schema:
    """Declares the state variables and actions a trace binds.

    ``variables`` maps variable id -> dimension, ``actions`` maps action
    id -> dimension of the action's real-vector argument.
    """

    variables: Mapping[str, int]
    actions: Mapping[str, int]

    def __post_init__(self):
        for name, dim in {**self.variables, **self.actions}.items():
            if not isinstance(dim, int) or dim < 1:
                raise TraceError(f"bad dimension for {name!r}: {dim!r}")
        if not self.actions:
            raise TraceError("schema declares no actions")

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.variables))

    @property
    def action_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.actions))

    def vars_of_dim(self, dim: int) -> tuple[str, ...]:
        return tuple(n for n in self.var_names if self.variables[n] == dim)

    def to_json(self) -> dict:
        return {"variables": dict(sorted(self.variables.items())),
                "actions": dict(sorted(self.actions.items()))}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Schema":
        try:
            return cls(dict(obj["variables"]), dict(obj["actions"]))
        except KeyError as exc:
            raise TraceError(f"schema header missing key {exc}") from exc


@dataclass(frozen=True)
class Step:
    state: Mapping[str, np.ndarray]
    action: str
    theta: np.ndarray


class ObservationTrace:
    """Immutable, whole-in-memory observation trace.

    Every step binds the same variable schema; ``theta`` dims match the
    acting action's declared dimension.
    """

    def __init__(self, schema: Schema, steps: Sequence[Step]):
        self.schema = schema
        checked = []
        for i, step in enumerate(steps):
            if set(step.state) != set(schema.variables):
                raise TraceError(f"step {i + 1} binds {sorted(step.state)}, "
                                 f"schema declares {sorted(schema.variables)}")
            state = {}
            for name, value in step.state.items():
                state[name] = _as_vector(value, schema.variables[name])
            if step.action not in schema.actions:
                raise TraceError(f"step {i + 1}: unknown action {step.action!r}")
            theta = _as_vector(step.theta, schema.actions[step.action])
            checked.append(Step(state, step.action, theta))
        self.steps: tuple[Step, ...] = tuple(checked)

    @property
    def T(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def var_matrix(self, name: str) -> np.ndarray:
        """Values of one variable over time, shape (T, dim)."""
        return np.stack([s.state[name] for s in self.steps])

    def theta_matrix(self) -> list[np.ndarray]:
        return [s.theta for s in self.steps]


def _l2(u: np.ndarray) -> float:
    return float(np.sqrt(np.dot(u, u)))


@dataclass(frozen=True)
class ErrorSpec:
    """Pluggable pair (sigma_act, sigma_len) plus matching thresholds.

    Builtin presets are identified by ``act_kind``/``len_kind`` codes and are
    picklable; custom callables force the interpreted execution path and
    single-worker search.
    """

    name: str
    act_kind: int
    len_kind: int
    d_max: float = math.inf
    e_max: float | None = None
    e_acc: float | None = None
    custom_act: Callable | None = field(default=None, compare=False)
    custom_act_grad: Callable | None = field(default=None, compare=False)
    custom_len: Callable | None = field(default=None, compare=False)

    @property
    def is_builtin(self) -> bool:
        return self.act_kind != ACT_CUSTOM and self.len_kind != LEN_CUSTOM

    def sigma_act(self, a_hat: str, theta_hat, a: str, theta) -> float:
        th_hat = np.asarray(theta_hat, dtype=np.float64)
        th = np.asarray(theta, dtype=np.float64)
        if self.act_kind == ACT_L2:
            # single-action domains: name mismatch impossible, fall through
            return _l2(th_hat - th)
        if self.act_kind == ACT_L2_SQ:
            u = th_hat - th
            return float(np.dot(u, u))
        if self.act_kind == ACT_DEMO:
            if a_hat != a:
                return self.d_max
            return _l2(th_hat - th)
        return float(self.custom_act(a_hat, th_hat, a, th))

    def sigma_act_grad(self, a_hat: str, theta_hat, a: str, theta) -> np.ndarray:
        """d(sigma_act)/d(theta_hat); subgradient 0 at the L2 kink."""
        th_hat = np.asarray(theta_hat, dtype=np.float64)
        th = np.asarray(theta, dtype=np.float64)
        u = th_hat - th
        if self.act_kind in (ACT_L2, ACT_DEMO):
            if self.act_kind == ACT_DEMO and a_hat != a:
                return np.zeros_like(u)
            n = _l2(u)
            return u / n if n > 0.0 else np.zeros_like(u)
        if self.act_kind == ACT_L2_SQ:
            return 2.0 * u
        return np.asarray(self.custom_act_grad(a_hat, th_hat, a, th), dtype=np.float64)

    def descent_seed(self, a_hat: str, theta_hat, a: str, theta) -> np.ndarray:
        """Smooth surrogate gradient (residual vector) used for descent.

        Equals the gradient of the squared per-action error up to a constant
        factor; agrees in minimiser with sigma_act on noiseless traces.
        """
        th_hat = np.asarray(theta_hat, dtype=np.float64)
        th = np.asarray(theta, dtype=np.float64)
        if self.act_kind == ACT_DEMO and a_hat != a:
            return np.zeros_like(th_hat)
        if self.act_kind == ACT_CUSTOM:
            return self.sigma_act_grad(a_hat, th_hat, a, th)
        return th_hat - th

    def sigma_len(self, T: int, T_exec: int) -> float:
        if self.len_kind == LEN_ZERO:
            return 0.0
        if self.len_kind == LEN_SQDIFF:
            d = float(T_exec - T)
            return d * d
        return float(self.custom_len(T, T_exec))


def continuous_spec(e_max: float | None = None, e_acc: float | None = None) -> ErrorSpec:
    """sigma_act = ||theta_hat - theta||_2, sigma_len = 0."""
    return ErrorSpec("continuous", ACT_L2, LEN_ZERO, e_max=e_max, e_acc=e_acc)


def continuous_sq_spec(e_max: float | None = None, e_acc: float | None = None) -> ErrorSpec:
    """Smooth squared variant of the continuous preset (analysis/testing)."""
    return ErrorSpec("continuous_sq", ACT_L2_SQ, LEN_ZERO, e_max=e_max, e_acc=e_acc)


def demo_spec(d_max: float, e_max: float | None = None, e_acc: float | None = None) -> ErrorSpec:
    """Demonstration preset: exact action-name match or d_max; squared length error."""
    if not (d_max > 0):
        raise ValueError("demo spec requires d_max > 0")
    return ErrorSpec("demo", ACT_DEMO, LEN_SQDIFF, d_max=d_max, e_max=e_max, e_acc=e_acc)


def builtin_specs(d_max: float = 10.0) -> dict[str, ErrorSpec]:
    return {
        "continuous": continuous_spec(),
        "continuous_sq": continuous_sq_spec(),
        "demo": demo_spec(d_max),
    }


def loss(executed: Iterable[tuple[str, np.ndarray]], observed: ObservationTrace,
         spec: ErrorSpec) -> float:
    """Total error between an executed action sequence and the observed trace.

    Per-action errors are summed over the first min(T, T') steps, then the
    length error over (T, T') is added.
    """
    executed = list(executed)
    T, T_exec = observed.T, len(executed)
    total = 0.0
    for t in range(min(T, T_exec)):
        a_hat, th_hat = executed[t]
        step = observed.steps[t]
        total += spec.sigma_act(a_hat, th_hat, step.action, step.theta)
    return total + spec.sigma_len(T, T_exec)


def _calibrate_e_max(spec: ErrorSpec, trace: ObservationTrace) -> float:
    """Default abort threshold: 10x the per-step error of the best constant
    program (coordinate-wise median theta per action), floored relative to
    the theta scale so exact-fit traces do not abort everything."""
    by_action: dict[str, list[np.ndarray]] = {}
    for step in trace.steps:
        by_action.setdefault(step.action, []).append(step.theta)
    per_step = []
    scale = []
    for step in trace.steps:
        med = np.median(np.stack(by_action[step.action]), axis=0)
        per_step.append(spec.sigma_act(step.action, med, step.action, step.theta))
        scale.append(_l2(step.theta))
    mean_err = float(np.mean(per_step)) if per_step else 0.0
    floor = 1e-2 * (1.0 + (float(np.mean(scale)) if scale else 0.0))
    e_max = max(10.0 * mean_err, floor)
    if math.isfinite(spec.d_max):
        # a name mismatch (sigma = d_max) must trigger the abort rule
        e_max = min(e_max, 0.99 * spec.d_max)
    return e_max


def resolve_thresholds(spec: ErrorSpec, trace: ObservationTrace) -> ErrorSpec:
    """Fill unset e_max / e_acc from the trace (calibration pre-pass)."""
    e_max = spec.e_max if spec.e_max is not None else _calibrate_e_max(spec, trace)
    e_acc = spec.e_acc if spec.e_acc is not None else 1e-3 * max(trace.T, 1)
    return replace(spec, e_max=e_max, e_acc=e_acc)


# ---------------------------------------------------------------------------
# Trace files: one JSON record per line, schema header first.

def save_trace(trace: ObservationTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": trace.schema.to_json()}, sort_keys=True) + "\n")
        for i, step in enumerate(trace.steps):
            rec = {
                "t": i + 1,
                "state": {k: [float(x) for x in v] for k, v in sorted(step.state.items())},
                "action": step.action,
                "theta": [float(x) for x in step.theta],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> ObservationTrace:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise TraceError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}:1: bad JSON: {exc}") from exc
    if "schema" not in header:
        raise TraceError(f"{path}: first line must carry the schema header")
    schema = Schema.from_json(header["schema"])
    steps = []
    for ln_no, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{path}:{ln_no}: bad JSON: {exc}") from exc
        try:
            steps.append(Step(rec["state"], rec["action"], rec["theta"]))
        except KeyError as exc:
            raise TraceError(f"{path}:{ln_no}: missing key {exc}") from exc
    return ObservationTrace(schema, steps)
