"""Reverse-mode differentiation of the trace loss through a call trace.

The call trace is the tape: every function application appears after its
arguments, so one backward sweep with vector-Jacobian products yields the
gradient with respect to every parameter, every variable read (at its frozen
read-time value), and every AST leaf.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .machine import (CallTrace, ConstArg, ExecResult, Machine, NodeArg,
                      ParamArg, VarArg, execute)
from .sexpr import FunctionLibrary, Program
from .trace import ErrorSpec, ObservationTrace

__all__ = ["GradientSet", "backprop", "check_gradients", "check_gradients_report",
           "GradCheckReport", "SEED_EXACT", "SEED_SQUARED"]

SEED_EXACT = "exact"
SEED_SQUARED = "squared"


@dataclass
class GradientSet:
    by_param: dict[str, np.ndarray] = field(default_factory=dict)
    by_var: dict[str, np.ndarray] = field(default_factory=dict)
    by_leaf: dict[tuple, np.ndarray] = field(default_factory=dict)

    def max_leaf_norm(self) -> float:
        if not self.by_leaf:
            return 0.0
        return max(float(np.linalg.norm(g)) for g in self.by_leaf.values())


def backprop(chi: CallTrace, spec: ErrorSpec, trace: ObservationTrace,
             lib: FunctionLibrary | None = None,
             seed_mode: str = SEED_EXACT) -> GradientSet:
    """Traverse the call trace backward, accumulating loss gradients.

    ``seed_mode`` picks the per-action seed: the exact sigma_act derivative,
    or the smooth squared-error surrogate the optimiser descends on.
    """
    lib = lib or FunctionLibrary.default()
    grads = GradientSet()
    node_grads: list[np.ndarray | None] = [None] * len(chi.nodes)

    # entries exist for exactly the leaves/params/vars the execution touched
    for node in chi.nodes:
        for src in node.args:
            if isinstance(src, ParamArg):
                grads.by_param.setdefault(src.name, np.zeros(src.value.shape[0]))
                grads.by_leaf.setdefault(src.path, np.zeros(src.value.shape[0]))
            elif isinstance(src, VarArg):
                grads.by_var.setdefault(src.name, np.zeros(src.value.shape[0]))
                grads.by_leaf.setdefault(src.path, np.zeros(src.value.shape[0]))
            elif isinstance(src, ConstArg):
                grads.by_leaf.setdefault(src.path, np.zeros(src.value.shape[0]))

    def route(src, g: np.ndarray) -> None:
        if isinstance(src, NodeArg):
            held = node_grads[src.index]
            node_grads[src.index] = g.copy() if held is None else held + g
        elif isinstance(src, ParamArg):
            grads.by_param[src.name] = grads.by_param[src.name] + g
            grads.by_leaf[src.path] = grads.by_leaf[src.path] + g
        elif isinstance(src, VarArg):
            grads.by_var[src.name] = grads.by_var[src.name] + g
            grads.by_leaf[src.path] = grads.by_leaf[src.path] + g
        else:
            grads.by_leaf[src.path] = grads.by_leaf[src.path] + g

    T = trace.T
    for em in chi.emitted:
        if em.sigma is None:
            continue  # past the trace: contributes through sigma_len only
        step = trace.steps[em.t - 1]
        if seed_mode == SEED_SQUARED:
            seed = spec.descent_seed(em.action, em.theta_hat, step.action, step.theta)
        else:
            seed = spec.sigma_act_grad(em.action, em.theta_hat, step.action, step.theta)
        route(NodeArg(em.node), seed)

    for idx in range(len(chi.nodes) - 1, -1, -1):
        g = node_grads[idx]
        if g is None:
            continue
        node = chi.nodes[idx]
        if node.kind == "action":
            route(node.args[0], g)
            continue
        entry = lib.entries.get(node.name)
        if entry is None:
            raise KeyError(f"unknown function {node.name!r} in call trace")
        values = [_source_value(chi, s) for s in node.args]
        for pos, src in enumerate(node.args):
            route(src, entry.vjp(values, pos, g))
    return grads


def _source_value(chi: CallTrace, src) -> np.ndarray:
    if isinstance(src, NodeArg):
        return chi.nodes[src.index].value
    return src.value


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    excluded: tuple[tuple[str, int], ...]  # (param, coordinate) at abort boundaries


def check_gradients_report(program: Program, trace: ObservationTrace,
                           spec: ErrorSpec, eps: float = 1e-6,
                           lib: FunctionLibrary | None = None) -> GradCheckReport:
    """Central finite differences on every parameter coordinate vs backprop.

    Coordinates whose perturbation crosses the e_max abort boundary (the
    execution outcome changes between the two sides) are non-differentiable
    points and are excluded from the comparison.
    """
    machine = Machine(trace, spec, lib)
    base = machine.execute(program)
    if not base.completed:
        raise ValueError("gradient check requires a completed execution")
    analytic = backprop(base.chi, spec, trace, lib, seed_mode=SEED_EXACT)

    max_err = 0.0
    n_checked = 0
    excluded: list[tuple[str, int]] = []
    for name in sorted(program.params):
        vec = program.params[name]
        for k in range(vec.shape[0]):
            outs = []
            for sign in (+1.0, -1.0):
                shifted = dict(program.params)
                bumped = vec.copy()
                bumped[k] += sign * eps
                shifted[name] = bumped
                outs.append(machine.execute(program.with_params(shifted)))
            hi, lo = outs
            if (hi.status, hi.t_exec) != (base.status, base.t_exec) or \
               (lo.status, lo.t_exec) != (base.status, base.t_exec):
                excluded.append((name, k))
                continue
            fd = (hi.loss - lo.loss) / (2.0 * eps)
            bp = float(analytic.by_param.get(name, np.zeros(vec.shape[0]))[k])
            err = abs(fd - bp) / max(1.0, abs(fd), abs(bp))
            max_err = max(max_err, err)
            n_checked += 1
    return GradCheckReport(max_err, n_checked, tuple(excluded))


def check_gradients(program: Program, trace: ObservationTrace, spec: ErrorSpec,
                    eps: float = 1e-6, lib: FunctionLibrary | None = None) -> float:
    """Max relative deviation between backprop and central finite differences."""
    return check_gradients_report(program, trace, spec, eps, lib).max_rel_err
