"""Flat tape representation of a program for the fit kernels.

A program plus a trace compiles to plain arrays: one post-order instruction
list per body expression, the occurrence list (which body expression runs at
which timestep), parameter/constant/variable tables, and the observed
actions.  The kernels in :mod:`traceprog.kernels` run the entire inner
optimisation loop (forward, backward, AdaGrad step, snap pass) over these
arrays; the tree-walking machine remains the reference semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sexpr import (ActionCall, ConstVec, FuncCall, FunctionLibrary, ParamRef,
                    Program, REPEAT_BODY, VarRef)
from .trace import ACT_DEMO, ACT_L2, ACT_L2_SQ, ErrorSpec, ObservationTrace

__all__ = ["Tape", "FitConfig", "FitResult", "compile_tape", "run_fit",
           "tape_supported", "OP_CONST", "OP_PARAM", "OP_VAR", "OP_ADD",
           "OP_SUB", "OP_SCALE", "SEED_MODE_EXACT", "SEED_MODE_SQUARED"]

OP_CONST, OP_PARAM, OP_VAR, OP_ADD, OP_SUB, OP_SCALE = range(6)
_FUNC_OPS = {"add": OP_ADD, "sub": OP_SUB, "scale": OP_SCALE}

SEED_MODE_EXACT = 0
SEED_MODE_SQUARED = 1


@dataclass
class Tape:
    # nodes, post-order per body expression
    ops: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    ref: np.ndarray
    nd: np.ndarray
    expr_lo: np.ndarray
    expr_hi: np.ndarray
    # occurrences
    occ_expr: np.ndarray
    occ_t: np.ndarray
    occ_scored: np.ndarray
    occ_match: np.ndarray
    # tables
    const_vals: np.ndarray
    var_vals: np.ndarray
    var_dims: np.ndarray
    obs_theta: np.ndarray
    params0: np.ndarray
    param_dims: np.ndarray
    # bookkeeping
    param_names: tuple[str, ...]
    var_names: tuple[str, ...]
    shadow_node: int
    shadow_row: int
    shadow_expr: int
    shadow_bind: int
    shadow_t: int
    shadow_path: tuple | None
    # spec
    act_kind: int
    len_kind: int
    d_max: float
    e_max: float
    T: int
    max_dim: int


@dataclass(frozen=True)
class FitConfig:
    lr: float = 0.5
    delta_stab: float = 1e-8
    max_iter: int = 2000
    patience: int = 250
    exit_loss: float = 0.0
    seed_mode: int = SEED_MODE_SQUARED


@dataclass(frozen=True)
class FitResult:
    params: dict[str, np.ndarray]
    shadow_value: np.ndarray | None
    shadow_bind: str | None
    shadow_t: int          # 1-based read time for the final KD query; 0 if none
    loss: float
    iterations: int


def tape_supported(program: Program, spec: ErrorSpec,
                   lib: FunctionLibrary | None = None) -> bool:
    """Kernels cover the builtin function library and builtin error specs."""
    if not spec.is_builtin or spec.act_kind not in (ACT_L2, ACT_L2_SQ, ACT_DEMO):
        return False
    lib = lib or FunctionLibrary.default()

    def ok(expr) -> bool:
        if isinstance(expr, ActionCall):
            return ok(expr.arg)
        if isinstance(expr, FuncCall):
            return expr.name in _FUNC_OPS and all(ok(a) for a in expr.args)
        return True

    return all(ok(e) for e in program.body)


def compile_tape(program: Program, trace: ObservationTrace, spec: ErrorSpec,
                 shadow_path: tuple | None = None,
                 lib: FunctionLibrary | None = None) -> Tape:
    if spec.e_max is None:
        raise ValueError("spec.e_max is unset; resolve_thresholds() first")
    lib = lib or FunctionLibrary.default()
    schema = trace.schema
    T = trace.T
    var_names = schema.var_names
    var_index = {n: i for i, n in enumerate(var_names)}
    param_names = tuple(sorted(program.params))
    param_index = {n: i for i, n in enumerate(param_names)}
    max_dim = max([1] + [schema.variables[n] for n in var_names]
                  + [v.shape[0] for v in program.params.values()]
                  + [schema.actions[a] for a in schema.actions])

    ops: list[int] = []
    a1: list[int] = []
    a2: list[int] = []
    ref: list[int] = []
    nd: list[int] = []
    paths: list[tuple] = []
    consts: list[np.ndarray] = []

    def emit(op, ref_i, dim, c1, c2, path) -> int:
        ops.append(op)
        ref.append(ref_i)
        nd.append(dim)
        a1.append(c1)
        a2.append(c2)
        paths.append(path)
        return len(ops) - 1

    def compile_expr(expr, path) -> int:
        if isinstance(expr, VarRef):
            return emit(OP_VAR, var_index[expr.name], expr.dim, -1, -1, path)
        if isinstance(expr, ParamRef):
            return emit(OP_PARAM, param_index[expr.name], expr.dim, -1, -1, path)
        if isinstance(expr, ConstVec):
            consts.append(np.asarray(expr.value, dtype=np.float64))
            return emit(OP_CONST, len(consts) - 1, expr.dim, -1, -1, path)
        if isinstance(expr, FuncCall):
            children = [compile_expr(arg, path + (i,)) for i, arg in enumerate(expr.args)]
            dims = [nd[c] for c in children]
            return emit(_FUNC_OPS[expr.name], -1, dims[-1], children[0], children[1], path)
        raise TypeError(f"cannot compile {expr!r}")

    expr_lo, expr_hi, act_ids = [], [], []
    for b, action in enumerate(program.body):
        lo = len(ops)
        root = compile_expr(action.arg, (b, 0))
        expr_lo.append(lo)
        expr_hi.append(root)
        act_ids.append(action.name)

    B = len(program.body)
    if B and program.exec_policy == REPEAT_BODY:
        J = T
        occ_expr = np.arange(J, dtype=np.int64) % B
        occ_t = np.arange(J, dtype=np.int64)
        occ_scored = np.ones(J, dtype=np.uint8)
    else:
        J = B
        occ_expr = np.arange(J, dtype=np.int64)
        occ_t = np.arange(J, dtype=np.int64)
        occ_scored = (occ_t < T).astype(np.uint8)

    occ_match = np.zeros(J, dtype=np.uint8)
    for j in range(J):
        if occ_scored[j]:
            occ_match[j] = act_ids[occ_expr[j]] == trace.steps[occ_t[j]].action

    const_vals = np.zeros((max(len(consts), 1), max_dim))
    for i, c in enumerate(consts):
        const_vals[i, :c.shape[0]] = c

    var_vals = np.zeros((max(len(var_names), 1), max(T, 1), max_dim))
    var_dims = np.zeros(max(len(var_names), 1), dtype=np.int64)
    for i, n in enumerate(var_names):
        d = schema.variables[n]
        var_dims[i] = d
        if T:
            var_vals[i, :, :d] = trace.var_matrix(n)

    obs_theta = np.zeros((max(T, 1), max_dim))
    for t, step in enumerate(trace.steps):
        obs_theta[t, :step.theta.shape[0]] = step.theta

    R = len(param_names) + 1  # trailing row is the snap shadow
    params0 = np.zeros((R, max_dim))
    param_dims = np.zeros(R, dtype=np.int64)
    for n, i in param_index.items():
        v = program.params[n]
        param_dims[i] = v.shape[0]
        params0[i, :v.shape[0]] = v

    shadow_node = shadow_row = shadow_expr = shadow_bind = -1
    shadow_t = -1
    if shadow_path is not None:
        try:
            shadow_node = paths.index(shadow_path)
        except ValueError:
            raise ValueError(f"no leaf at path {shadow_path}") from None
        if ops[shadow_node] != OP_VAR:
            raise ValueError(f"shadow path {shadow_path} is not a variable leaf")
        shadow_row = R - 1
        shadow_expr = shadow_path[0]
        shadow_bind = ref[shadow_node]
        d = nd[shadow_node]
        param_dims[shadow_row] = d
        reads = [int(t) for e, t in zip(occ_expr, occ_t) if e == shadow_expr and t < T]
        shadow_t = max(reads) if reads else (T - 1 if T else -1)
        if shadow_t >= 0:
            params0[shadow_row, :d] = var_vals[shadow_bind, shadow_t, :d]

    return Tape(
        ops=np.asarray(ops, dtype=np.int64),
        a1=np.asarray(a1, dtype=np.int64),
        a2=np.asarray(a2, dtype=np.int64),
        ref=np.asarray(ref, dtype=np.int64),
        nd=np.asarray(nd, dtype=np.int64),
        expr_lo=np.asarray(expr_lo, dtype=np.int64),
        expr_hi=np.asarray(expr_hi, dtype=np.int64),
        occ_expr=occ_expr, occ_t=occ_t, occ_scored=occ_scored, occ_match=occ_match,
        const_vals=const_vals, var_vals=var_vals, var_dims=var_dims,
        obs_theta=obs_theta, params0=params0, param_dims=param_dims,
        param_names=param_names, var_names=var_names,
        shadow_node=shadow_node, shadow_row=shadow_row, shadow_expr=shadow_expr,
        shadow_bind=shadow_bind, shadow_t=shadow_t, shadow_path=shadow_path,
        act_kind=spec.act_kind, len_kind=spec.len_kind,
        d_max=float(spec.d_max), e_max=float(spec.e_max),
        T=T, max_dim=max_dim)


def run_fit(tape: Tape, cfg: FitConfig, backend: str | None = None) -> FitResult:
    """Run the inner optimisation loop over a compiled tape."""
    from . import kernels

    fit = kernels.get_fit(backend)
    params = tape.params0.copy()
    out_params, out_bind, out_loss, iters, out_t = fit(
        tape.ops, tape.a1, tape.a2, tape.ref, tape.nd,
        tape.expr_lo, tape.expr_hi,
        tape.occ_expr, tape.occ_t, tape.occ_scored, tape.occ_match,
        tape.const_vals, tape.var_vals, tape.var_dims, tape.obs_theta,
        params, tape.param_dims,
        tape.shadow_node, tape.shadow_row, tape.shadow_expr,
        tape.shadow_bind, tape.shadow_t,
        tape.act_kind, tape.len_kind, tape.d_max, tape.e_max,
        cfg.lr, cfg.delta_stab, int(cfg.max_iter), int(cfg.patience),
        cfg.exit_loss, int(cfg.seed_mode), tape.T)

    fitted = {n: out_params[i, :tape.param_dims[i]].copy()
              for i, n in enumerate(tape.param_names)}
    shadow_value = shadow_bind = None
    if tape.shadow_node >= 0:
        d = tape.param_dims[tape.shadow_row]
        shadow_value = out_params[tape.shadow_row, :d].copy()
        shadow_bind = tape.var_names[out_bind]
    return FitResult(fitted, shadow_value, shadow_bind,
                     int(out_t) + 1 if out_t >= 0 else 0,
                     float(out_loss), int(iters))


def evaluate_loss(tape: Tape, params: np.ndarray, bind: int) -> float:
    """Single forward pass over the tape (numpy); used by tests."""
    from .kernels import numpy_backend

    return numpy_backend.forward_loss(
        tape.ops, tape.a1, tape.a2, tape.ref, tape.nd,
        tape.expr_lo, tape.expr_hi,
        tape.occ_expr, tape.occ_t, tape.occ_scored, tape.occ_match,
        tape.const_vals, tape.var_vals, tape.obs_theta,
        params, tape.shadow_node, bind,
        tape.act_kind, tape.len_kind, tape.d_max, tape.e_max, tape.T)
