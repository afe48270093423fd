"""The abstract machine: executes a program against an observation trace.

Execution keeps a time counter that advances on every primitive action,
rebinds state variables from the recorded trace (pure replay), aborts when a
per-action error exceeds ``e_max``, and records a call trace of every function
application with full argument provenance so the loss can be differentiated
in reverse through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .sexpr import (ActionCall, ConstVec, Expr, FuncCall, FunctionLibrary,
                    ParamRef, Program, REPEAT_BODY, SINGLE_PASS, VarRef)
from .trace import ErrorSpec, ObservationTrace

__all__ = [
    "MemoryState", "CallTrace", "CallNode", "Emission",
    "ParamArg", "VarArg", "NodeArg", "ConstArg", "Instr",
    "ExecResult", "COMPLETED", "ABORTED",
    "Machine", "execute", "KdIndex", "NoVariableError", "nearest_variable",
]

COMPLETED = "completed"
ABORTED = "aborted"


@dataclass
class MemoryState:
    """vars mirror the observed state at time t; params are the induced values."""
    vars: Mapping[str, np.ndarray]
    params: Mapping[str, np.ndarray]
    t: int


# Argument provenance inside the call trace.  Values are frozen as read:
# later memory updates never mutate them.
@dataclass(frozen=True)
class ParamArg:
    name: str
    value: np.ndarray
    path: tuple


@dataclass(frozen=True)
class VarArg:
    name: str
    t_read: int
    value: np.ndarray
    path: tuple


@dataclass(frozen=True)
class NodeArg:
    index: int


@dataclass(frozen=True)
class ConstArg:
    value: np.ndarray
    path: tuple


ArgSource = Union[ParamArg, VarArg, NodeArg, ConstArg]


@dataclass(frozen=True)
class CallNode:
    kind: str               # "func" | "action"
    name: str
    value: np.ndarray
    args: tuple[ArgSource, ...]
    path: tuple


@dataclass(frozen=True)
class Emission:
    action: str
    theta_hat: np.ndarray
    t: int
    sigma: float | None     # None when the trace was already exhausted
    arg: ArgSource
    node: int               # index of the action node in the call trace


@dataclass
class CallTrace:
    nodes: list[CallNode] = field(default_factory=list)
    emitted: list[Emission] = field(default_factory=list)


@dataclass(frozen=True)
class Instr:
    kind: str               # "func" | "action"
    name: str
    values: tuple[np.ndarray, ...]
    sources: tuple[ArgSource, ...]
    path: tuple


@dataclass(frozen=True)
class ExecResult:
    loss: float
    chi: CallTrace
    status: str
    abort_t: int | None
    t_exec: int

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


class _Abort(Exception):
    def __init__(self, t: int):
        self.t = t


class Machine:
    def __init__(self, trace: ObservationTrace, spec: ErrorSpec,
                 lib: FunctionLibrary | None = None):
        if spec.e_max is None:
            raise ValueError("spec.e_max is unset; resolve_thresholds() first")
        self.trace = trace
        self.spec = spec
        self.lib = lib or FunctionLibrary.default()

    # -- instruction semantics -------------------------------------------
    def exec_step(self, mem: MemoryState, instr: Instr, chi: CallTrace) -> MemoryState:
        """Apply one instruction: functions append to the call trace and leave
        memory untouched; actions emit, advance t, and rebind the variables."""
        if instr.kind == "func":
            entry = self.lib.entries.get(instr.name)
            if entry is None:
                raise KeyError(f"unknown function {instr.name!r}")
            value = entry.fn(*instr.values)
            chi.nodes.append(CallNode("func", instr.name, value, instr.sources, instr.path))
            return mem

        theta_hat = instr.values[0]
        t = mem.t
        T = self.trace.T
        chi.nodes.append(CallNode("action", instr.name, theta_hat, instr.sources, instr.path))
        node_idx = len(chi.nodes) - 1
        sigma = None
        if t <= T:
            step = self.trace.steps[t - 1]
            sigma = self.spec.sigma_act(instr.name, theta_hat, step.action, step.theta)
        chi.emitted.append(Emission(instr.name, theta_hat, t, sigma, instr.sources[0], node_idx))
        next_t = t + 1
        next_vars = self.trace.steps[next_t - 1].state if next_t <= T else mem.vars
        new_mem = MemoryState(next_vars, mem.params, next_t)
        if sigma is not None and sigma > self.spec.e_max:
            raise _Abort(t)
        return new_mem

    # -- expression evaluation -------------------------------------------
    def _eval(self, expr: Expr, mem: MemoryState, chi: CallTrace,
              path: tuple) -> tuple[np.ndarray, ArgSource, MemoryState]:
        if isinstance(expr, VarRef):
            value = mem.vars[expr.name]
            return value, VarArg(expr.name, mem.t, value, path), mem
        if isinstance(expr, ParamRef):
            value = mem.params[expr.name]
            return value, ParamArg(expr.name, value, path), mem
        if isinstance(expr, ConstVec):
            value = np.asarray(expr.value, dtype=np.float64)
            return value, ConstArg(value, path), mem
        if isinstance(expr, FuncCall):
            values, sources = [], []
            for i, arg in enumerate(expr.args):
                v, s, mem = self._eval(arg, mem, chi, path + (i,))
                values.append(v)
                sources.append(s)
            mem = self.exec_step(mem, Instr("func", expr.name, tuple(values),
                                            tuple(sources), path), chi)
            node_idx = len(chi.nodes) - 1
            return chi.nodes[node_idx].value, NodeArg(node_idx), mem
        raise TypeError(f"cannot evaluate {expr!r}")

    def _exec_action(self, action: ActionCall, mem: MemoryState, chi: CallTrace,
                     body_index: int) -> MemoryState:
        value, source, mem = self._eval(action.arg, mem, chi, (body_index, 0))
        return self.exec_step(mem, Instr("action", action.name, (value,),
                                         (source,), (body_index,)), chi)

    # -- program execution ------------------------------------------------
    def execute(self, program: Program) -> ExecResult:
        trace, spec = self.trace, self.spec
        T = trace.T
        chi = CallTrace()
        init_vars = trace.steps[0].state if T else {}
        mem = MemoryState(init_vars, program.params, 1)
        status, abort_t = COMPLETED, None
        try:
            if program.body:
                if program.exec_policy == REPEAT_BODY:
                    while mem.t <= T:
                        for b, action in enumerate(program.body):
                            if mem.t > T:
                                break
                            mem = self._exec_action(action, mem, chi, b)
                else:
                    for b, action in enumerate(program.body):
                        mem = self._exec_action(action, mem, chi, b)
        except _Abort as abort:
            status, abort_t = ABORTED, abort.t
        t_exec = len(chi.emitted)
        total = 0.0
        for em in chi.emitted:
            if em.sigma is not None:
                total += em.sigma
        total += spec.sigma_len(T, t_exec)
        return ExecResult(total, chi, status, abort_t, t_exec)


def execute(program: Program, trace: ObservationTrace, spec: ErrorSpec,
            lib: FunctionLibrary | None = None) -> ExecResult:
    return Machine(trace, spec, lib).execute(program)


# ---------------------------------------------------------------------------
# Nearest-variable index

class NoVariableError(LookupError):
    """No variable of the queried dimension exists in memory."""


class KdIndex:
    """Per (t, dim) nearest-neighbour index over the variables in memory.

    Variable sets here are tiny (a handful per dim), so the index stores the
    per-dim value arrays and answers queries by exact scan; names are sorted
    so equidistant results break ties lexicographically.  Built lazily per
    dim on first query; traces are immutable so nothing is ever rebuilt.
    """

    def __init__(self, trace: ObservationTrace):
        self._trace = trace
        self._by_dim: dict[int, tuple[tuple[str, ...], np.ndarray]] = {}

    def _table(self, dim: int) -> tuple[tuple[str, ...], np.ndarray]:
        cached = self._by_dim.get(dim)
        if cached is not None:
            return cached
        names = self._trace.schema.vars_of_dim(dim)
        if not names:
            raise NoVariableError(f"no variables of dim {dim}")
        values = np.stack([self._trace.var_matrix(n) for n in names])  # (V, T, dim)
        values.flags.writeable = False
        table = (names, values)
        self._by_dim[dim] = table
        return table

    def query(self, t: int, value) -> tuple[str, np.ndarray]:
        """Euclidean-nearest variable to ``value`` at time t (1-based)."""
        q = np.asarray(value, dtype=np.float64).reshape(-1)
        names, values = self._table(q.shape[0])
        if not (1 <= t <= self._trace.T):
            raise IndexError(f"time {t} outside trace of length {self._trace.T}")
        diffs = values[:, t - 1, :] - q
        d2 = np.einsum("ij,ij->i", diffs, diffs)
        best = int(np.argmin(d2))  # first minimum: lexicographic tie-break
        return names[best], values[best, t - 1, :]


def nearest_variable(idx: KdIndex, t: int, value) -> tuple[str, np.ndarray]:
    """The variable whose value at time t is nearest to ``value``."""
    return idx.query(t, value)
