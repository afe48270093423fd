"""Parameter optimisation of a fixed-structure candidate.

The loop is: execute, backpropagate, AdaGrad step, snap pass.  One variable
leaf (the one with the largest gradient norm) is tracked by a temporary
parameter: a drifting value initialised from the variable's read-time value
and updated by AdaGrad alongside the real parameters.  After every step the
temporary is compared against memory via the nearest-variable index; if a
different variable is now closer, the leaf is rebound to it, the temporary
is reset to that variable's value, and all gradient history is cleared.  On
exit temporaries are substituted by their closest variables and the real
parameters get a refinement pass.

Structure never changes here: only leaf values and variable identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .autodiff import GradientSet, SEED_EXACT, SEED_SQUARED, backprop
from .machine import ExecResult, KdIndex, Machine, NoVariableError, VarArg
from .sexpr import (FunctionLibrary, ParamRef, Program, VarRef, leaves,
                    replace_leaf)
from .tape import FitConfig, SEED_MODE_EXACT, SEED_MODE_SQUARED, compile_tape, run_fit, tape_supported
from .trace import ErrorSpec, ObservationTrace

__all__ = ["OptimState", "OptConfig", "OptimizeResult", "TempParam",
           "SnapResult", "adagrad_step", "snap_variable", "optimize"]

_SHADOW_KEY = "~temp"  # reserved pseudo-parameter id used by the reference engine


@dataclass
class TempParam:
    origin: str
    t_read: int
    value: np.ndarray


@dataclass
class SnapResult:
    kept: bool
    variable: str
    value: np.ndarray


@dataclass
class OptimState:
    lr: float = 0.5
    delta_stab: float = 1e-8
    accum: dict[str, np.ndarray] = field(default_factory=dict)
    temp_params: dict[tuple, TempParam] = field(default_factory=dict)
    iter: int = 0
    best_loss: float = math.inf


@dataclass(frozen=True)
class OptConfig:
    lr: float = 0.5
    delta_stab: float = 1e-8
    inner_budget: int = 4000
    patience: int = 400
    seed_mode: str = SEED_SQUARED
    engine: str | None = None          # None: tape when supported, else reference
    backend: str | None = None         # kernels backend override
    exit_loss: float | None = None     # None: stop once loss <= spec.e_acc


@dataclass
class OptimizeResult:
    program: Program
    loss: float
    grads: GradientSet | None
    result: ExecResult | None
    iterations: int
    failed: bool = False


def adagrad_step(state: OptimState, params: Mapping[str, np.ndarray],
                 grads: GradientSet) -> dict[str, np.ndarray]:
    """One AdaGrad update over every parameter coordinate.

    accum += g^2 first, then p -= lr * g / (sqrt(accum) + delta).
    """
    out: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads.by_param.get(name)
        if g is None:
            out[name] = value
            continue
        acc = state.accum.setdefault(name, np.zeros_like(np.asarray(value, dtype=np.float64)))
        acc += g * g
        out[name] = value - state.lr * g / (np.sqrt(acc) + state.delta_stab)
    state.iter += 1
    return out


def snap_variable(state: OptimState, path: tuple, value: np.ndarray,
                  idx: KdIndex, t: int) -> SnapResult:
    """Snap one temporary parameter to the nearest in-memory variable.

    A changed nearest variable rebinds the temporary (value := that
    variable's value at t, new origin recorded) and resets ALL gradient
    history; otherwise the drifted value is kept untouched.
    """
    temp = state.temp_params[path]
    try:
        name, stored = idx.query(t, value)
    except NoVariableError:
        return SnapResult(True, temp.origin, temp.value)
    if name == temp.origin:
        temp.value = np.asarray(value, dtype=np.float64)
        temp.t_read = t
        return SnapResult(True, name, temp.value)
    temp.origin = name
    temp.value = stored.copy()
    temp.t_read = t
    for acc in state.accum.values():
        acc[:] = 0.0
    return SnapResult(False, name, temp.value)


def _pick_shadow(program: Program, grads: GradientSet) -> tuple | None:
    """Variable leaf with the largest gradient norm, if any is non-zero."""
    best_path, best_norm = None, 0.0
    for path, leaf in leaves(program):
        if isinstance(leaf, VarRef):
            g = grads.by_leaf.get(path)
            norm = float(np.linalg.norm(g)) if g is not None else 0.0
            if norm > best_norm:
                best_path, best_norm = path, norm
    return best_path


def _last_read(chi, path: tuple, T: int) -> int:
    t = -1
    for node in chi.nodes:
        for src in node.args:
            if isinstance(src, VarArg) and src.path == path:
                t = max(t, min(src.t_read, T))
    return t


def _finite(program: Program, loss: float) -> bool:
    if not math.isfinite(loss):
        return False
    return all(np.all(np.isfinite(v)) for v in program.params.values())


def optimize(program: Program, trace: ObservationTrace, spec: ErrorSpec,
             config: OptConfig | None = None, idx: KdIndex | None = None,
             lib: FunctionLibrary | None = None) -> OptimizeResult:
    """Fit a candidate's parameters and variable identities to the trace.

    Returns the finalised program (temporaries substituted by variables),
    its re-evaluated loss, and the gradient set of the final execution.
    """
    config = config or OptConfig()
    lib = lib or FunctionLibrary.default()
    if spec.e_max is None or spec.e_acc is None:
        raise ValueError("spec thresholds unset; resolve_thresholds() first")
    machine = Machine(trace, spec, lib)
    idx = idx or KdIndex(trace)

    def finish(prog: Program, iterations: int) -> OptimizeResult:
        res = machine.execute(prog)
        if not _finite(prog, res.loss):
            return OptimizeResult(prog, math.inf, None, res, iterations, failed=True)
        grads = backprop(res.chi, spec, trace, lib, seed_mode=SEED_EXACT)
        return OptimizeResult(prog, res.loss, grads, res, iterations)

    base = machine.execute(program)
    if not _finite(program, base.loss):
        return OptimizeResult(program, math.inf, None, base, 0, failed=True)
    shadow_path = None
    if trace.T > 0 and base.chi.nodes:
        seed_grads = backprop(base.chi, spec, trace, lib,
                              seed_mode=config.seed_mode)
        shadow_path = _pick_shadow(program, seed_grads)
    if not program.params and shadow_path is None:
        return finish(program, 0)

    use_tape = config.engine != "reference" and tape_supported(program, spec, lib)
    if config.engine == "tape" and not use_tape:
        raise ValueError("tape engine unsupported for this program/spec")
    runner = _tape_phase if use_tape else _reference_phase

    budget = max(int(config.inner_budget), 1)
    iterations = 0
    current = program
    if shadow_path is not None:
        phase1 = max(budget // 2, 1)
        current, used = runner(current, trace, spec, machine, idx, lib, config,
                               phase1, shadow_path)
        iterations += used
        budget = max(budget - used, 1)
    if current.params:
        current, used = runner(current, trace, spec, machine, idx, lib, config,
                               budget, None)
        iterations += used
    return finish(current, iterations)


# ---------------------------------------------------------------------------
# Tape engine

def _tape_phase(program: Program, trace: ObservationTrace, spec: ErrorSpec,
                machine: Machine, idx: KdIndex, lib: FunctionLibrary,
                config: OptConfig, budget: int,
                shadow_path: tuple | None) -> tuple[Program, int]:
    tape = compile_tape(program, trace, spec, shadow_path, lib)
    exit_loss = float(spec.e_acc if config.exit_loss is None else config.exit_loss)
    fit_cfg = FitConfig(
        lr=config.lr, delta_stab=config.delta_stab, max_iter=budget,
        patience=config.patience, exit_loss=exit_loss,
        seed_mode=SEED_MODE_SQUARED if config.seed_mode == SEED_SQUARED else SEED_MODE_EXACT)
    fit = run_fit(tape, fit_cfg, backend=config.backend)
    out = program.with_params(fit.params) if fit.params else program
    if shadow_path is not None and fit.shadow_value is not None and fit.shadow_t > 0:
        # substitute the temporary with its closest variable
        name, _ = idx.query(fit.shadow_t, fit.shadow_value)
        d = int(fit.shadow_value.shape[0])
        out = replace_leaf(out, shadow_path, VarRef(name, d), lib=lib)
    return out, fit.iterations


# ---------------------------------------------------------------------------
# Reference engine (spec semantics, interpreted; also serves custom specs)

def _reference_phase(program: Program, trace: ObservationTrace, spec: ErrorSpec,
                     machine: Machine, idx: KdIndex, lib: FunctionLibrary,
                     config: OptConfig, budget: int,
                     shadow_path: tuple | None) -> tuple[Program, int]:
    state = OptimState(lr=config.lr, delta_stab=config.delta_stab)
    current = program
    shadow: TempParam | None = None
    if shadow_path is not None:
        leaf = dict(leaves(program))[shadow_path]
        res0 = machine.execute(program)
        t0 = _last_read(res0.chi, shadow_path, trace.T)
        if t0 > 0:
            shadow = TempParam(leaf.name, t0,
                               trace.steps[t0 - 1].state[leaf.name].copy())
            state.temp_params[shadow_path] = shadow

    best_loss = math.inf
    best_program = current
    no_improve = 0
    iters = 0
    for _ in range(budget):
        iters += 1
        res = machine.execute(current)
        if not _finite(current, res.loss):
            break
        if res.loss < best_loss:
            best_loss = res.loss
            best_program = current
            no_improve = 0
        else:
            no_improve += 1
        exit_loss = spec.e_acc if config.exit_loss is None else config.exit_loss
        if res.loss <= exit_loss or no_improve >= config.patience:
            break
        grads = backprop(res.chi, spec, trace, lib, seed_mode=config.seed_mode)
        params = dict(current.params)
        if shadow is not None:
            params[_SHADOW_KEY] = shadow.value
            g = grads.by_leaf.get(shadow_path)
            if g is not None:
                grads.by_param[_SHADOW_KEY] = g
        updated = adagrad_step(state, params, grads)
        if shadow is not None:
            drifted = updated.pop(_SHADOW_KEY)
            shadow.value = drifted
            t_read = _last_read(res.chi, shadow_path, trace.T)
            if t_read > 0:
                snap = snap_variable(state, shadow_path, drifted, idx, t_read)
                if not snap.kept:
                    current = replace_leaf(
                        current, shadow_path,
                        VarRef(snap.variable, drifted.shape[0]), lib=lib)
        current = current.with_params(updated)

    current = best_program
    if shadow is not None:
        try:
            name, _ = idx.query(max(shadow.t_read, 1), shadow.value)
            current = replace_leaf(current, shadow_path,
                                   VarRef(name, shadow.value.shape[0]), lib=lib)
        except NoVariableError:
            pass
    return current, iters
