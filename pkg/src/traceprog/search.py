"""Best-first search over program structure.

Nodes of the structure graph are program ASTs; an edge replaces exactly one
leaf with a depth-1 subtree (one function application).  Candidates are
scored by f_total = complexity + loss, kept in a priority queue, and the
queue head is either returned (when its execution matches the trace) or
expanded into new candidates via gradient-guided leaf selection.
"""

from __future__ import annotations

import heapq
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np

from .autodiff import GradientSet
from .config import RunConfig
from .machine import KdIndex, Machine
from .optimizer import OptConfig, OptimizeResult, optimize
from .sexpr import (ActionCall, ConstVec, FuncCall, FunctionLibrary,
                    ParamRef, Program, SINGLE_PASS, VarRef,
                    body_slot_path, canonical, canonical_key, default_policy,
                    depth, leaves, replace_leaf)
from .trace import ErrorSpec, ObservationTrace, builtin_specs, resolve_thresholds

__all__ = ["Candidate", "InduceResult", "complexity", "select_leaf", "expand",
           "induce", "count_programs", "make_spec"]

_PARAM_STD = math.sqrt(0.1)  # leaf parameters are drawn from N(0, 0.1)


@dataclass
class Candidate:
    program: Program
    loss: float
    complexity: float
    score: float
    grads: GradientSet | None
    status: str
    t_exec: int
    accepted: bool
    cand_id: int
    parent_id: int | None
    iterations: int = 0
    action_error: float = 0.0          # loss minus the length term

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.score)


@dataclass
class InduceResult:
    candidates: list[Candidate]        # ranked: accepted first, then by score
    accepted: Candidate | None
    iterations: int                    # queue pops performed
    evaluated: int                     # candidates optimised
    progress: list[dict]
    spec: ErrorSpec
    exec_policy: str


def complexity(program: Program,
               weights: Sequence[float] = (10.0, 5.0, 1.0)) -> float:
    """Weighted sum of AST depth, free parameter count, and variable reads.

    Constants count as parameters only when the search induced them; written
    constants in user programs are free.
    """
    w_depth, w_params, w_vars = weights
    params: set[str] = set()
    n_vars = 0
    n_induced_consts = 0
    for _, leaf in leaves(program):
        if isinstance(leaf, ParamRef):
            params.add(leaf.name)
        elif isinstance(leaf, VarRef):
            n_vars += 1
        elif isinstance(leaf, ConstVec) and leaf.induced:
            n_induced_consts += 1
    return (w_depth * depth(program)
            + w_params * (len(params) + n_induced_consts)
            + w_vars * n_vars)


def _selectable(candidate: Candidate, policy: str) -> list[tuple]:
    paths = [path for path, _ in leaves(candidate.program)]
    if policy == SINGLE_PASS or candidate.program.is_empty:
        paths.append(body_slot_path(candidate.program))
    return paths


def select_leaf(candidate: Candidate, rng: np.random.Generator,
                policy: str, act_zero_tol: float = 1e-5) -> tuple:
    """Leaf with the largest loss-gradient norm.

    When nothing is left for a leaf edit to fix (per-action error is
    negligible, or every gradient vanished on the mismatch branch) the choice
    falls back to a seeded-uniform draw over the leaves, including the
    body-slot pseudo-leaf where a new action may grow.
    """
    program = candidate.program
    if program.is_empty:
        return body_slot_path(program)
    options = _selectable(candidate, policy)
    if candidate.grads is not None:
        norms = []
        for path, leaf in leaves(program):
            if isinstance(leaf, (ParamRef, VarRef)):
                g = candidate.grads.by_leaf.get(path)
                norms.append((float(np.linalg.norm(g)) if g is not None else 0.0, path))
        zero_thr = act_zero_tol * max(1, candidate.t_exec)
        if norms and candidate.action_error > zero_thr:
            best = max(norms, key=lambda item: item[0])
            if best[0] > 0.0:
                return best[1]
    return options[int(rng.integers(len(options)))]


def _fresh_names(program: Program, count: int) -> list[str]:
    used = set(program.params)
    names = []
    i = 0
    while len(names) < count:
        name = f"p{i}"
        if name not in used:
            names.append(name)
            used.add(name)
        i += 1
    return names


def _draw_param(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.normal(0.0, _PARAM_STD, dim)


def _draw_var(rng: np.random.Generator, schema, dim: int) -> str | None:
    pool = schema.vars_of_dim(dim)
    if not pool:
        return None
    return pool[int(rng.integers(len(pool)))]


def expand(candidate: Candidate, lib: FunctionLibrary, schema,
           rng: np.random.Generator, policy: str,
           leaf_path: tuple | None = None,
           act_zero_tol: float = 1e-5) -> list[Program]:
    """Propose all depth-1 replacements of one selected leaf.

    For each type-compatible function and each parameter/variable argument
    pattern, one candidate: fresh parameters ~ N(0, 0.1), variable slots
    bound to a uniformly drawn dim-compatible variable (falling back to a
    parameter when none exists).  The body slot instead seeds one new action
    per action id and leaf kind.  Duplicates (canonical form) are dropped.
    """
    program = candidate.program
    if leaf_path is None:
        leaf_path = select_leaf(candidate, rng, policy, act_zero_tol)
    out: list[Program] = []
    seen: set[str] = set()

    def push(prog: Program) -> None:
        key = canonical_key(prog, lib)
        if key not in seen:
            seen.add(key)
            out.append(canonical(prog, lib))

    if len(leaf_path) == 1 and leaf_path[0] == len(program.body):
        for action in schema.action_names:
            dim = schema.actions[action]
            for kind in ("param", "var"):
                if kind == "param":
                    name = _fresh_names(program, 1)[0]
                    arg = ParamRef(name, dim)
                    values = {name: _draw_param(rng, dim)}
                else:
                    var = _draw_var(rng, schema, dim)
                    if var is None:
                        continue
                    arg, values = VarRef(var, dim), None
                push(replace_leaf(program, leaf_path, ActionCall(action, arg),
                                  new_params=values, lib=lib))
        return out

    target = dict(leaves(program))[leaf_path]
    dim = target.dim if not isinstance(target, ConstVec) else len(target.value)
    for fname in lib.names:
        entry = lib.entries[fname]
        arg_dims = entry.arg_dims(dim)
        for pattern in itertools.product(("param", "var"), repeat=entry.arity):
            names = _fresh_names(program, entry.arity)
            args: list = []
            values: dict[str, np.ndarray] = {}
            for slot, (kind, d) in enumerate(zip(pattern, arg_dims)):
                if kind == "var":
                    var = _draw_var(rng, schema, d)
                    if var is not None:
                        args.append(VarRef(var, d))
                        continue
                name = names[slot]
                args.append(ParamRef(name, d))
                values[name] = _draw_param(rng, d)
            push(replace_leaf(program, leaf_path, FuncCall(fname, tuple(args)),
                              new_params=values, lib=lib))
    return out


def make_spec(name: str, trace: ObservationTrace, config: RunConfig) -> ErrorSpec:
    """Resolve a spec preset name (or 'auto') against a trace and config."""
    resolved = name
    if resolved == "auto":
        resolved = "continuous" if len(trace.schema.actions) == 1 else "demo"
    presets = builtin_specs(d_max=config.d_max)
    if resolved not in presets:
        raise ValueError(f"unknown error spec {resolved!r} "
                         f"(choose from {sorted(presets)} or auto)")
    spec = presets[resolved]
    if config.e_max is not None:
        spec = dc_replace(spec, e_max=config.e_max)
    if config.e_acc is not None:
        spec = dc_replace(spec, e_acc=config.e_acc)
    return resolve_thresholds(spec, trace)


def _accepted(cand_loss: float, result, trace: ObservationTrace,
              spec: ErrorSpec) -> bool:
    """Matching the trace: completed, one emission per observed step, and
    total loss within the acceptance threshold."""
    return (result is not None and result.completed
            and result.t_exec == trace.T and trace.T > 0
            and cand_loss <= spec.e_acc)


def _optimize_one(args) -> OptimizeResult:
    program, trace, spec, opt_cfg = args
    return optimize(program, trace, spec, opt_cfg)


def induce(trace: ObservationTrace, spec: ErrorSpec,
           config: RunConfig | None = None,
           lib: FunctionLibrary | None = None) -> InduceResult:
    """Best-first induction loop.

    Pops the lowest-score candidate; returns it when its execution matches
    the observation trace, otherwise expands it, optimises all children (in
    parallel when configured), and pushes them.  Ends on acceptance, queue
    exhaustion, or the outer iteration budget; always reports the best
    candidates found, flagged accepted or not.
    """
    config = config or RunConfig()
    lib = lib or FunctionLibrary.default()
    if trace.T == 0:
        raise ValueError("cannot induce from an empty trace")
    spec = resolve_thresholds(spec, trace)
    policy = config.exec_policy or default_policy(trace.schema)
    rng = np.random.default_rng(config.seed)
    opt_cfg = OptConfig(lr=config.lr, delta_stab=config.delta_stab,
                        inner_budget=config.inner_budget,
                        patience=config.patience, seed_mode=config.grad_mode,
                        engine=config.engine, backend=config.backend,
                        exit_loss=config.exit_frac * spec.e_acc)
    machine = Machine(trace, spec, lib)
    idx = KdIndex(trace)

    counter = itertools.count()
    next_id = itertools.count()
    heap: list[tuple[float, float, int, int]] = []
    by_id: dict[int, Candidate] = {}
    all_cands: list[Candidate] = []
    seen: set[str] = set()
    progress: list[dict] = []
    best_score = math.inf
    evaluated = 0

    def admit(result: OptimizeResult, parent: int | None) -> Candidate:
        nonlocal best_score, evaluated
        evaluated += 1
        comp = complexity(result.program, config.weights)
        score = comp + result.loss
        res = result.result
        t_exec = res.t_exec if res else 0
        act_err = result.loss - spec.sigma_len(trace.T, t_exec)
        cand = Candidate(
            program=result.program, loss=result.loss, complexity=comp,
            score=score, grads=result.grads,
            status=res.status if res else "failed",
            t_exec=t_exec,
            accepted=_accepted(result.loss, res, trace, spec),
            cand_id=next(next_id), parent_id=parent,
            iterations=result.iterations,
            action_error=max(act_err, 0.0))
        by_id[cand.cand_id] = cand
        all_cands.append(cand)
        if math.isfinite(score):
            if score != comp + result.loss:
                raise AssertionError("f_total must equal complexity + loss")
            heapq.heappush(heap, (score, comp, next(counter), cand.cand_id))
            if not cand.program.is_empty:
                best_score = min(best_score, score)
        return cand

    empty = Program((), {}, policy)
    seen.add(canonical_key(empty, lib))
    admit(optimize(empty, trace, spec, opt_cfg, idx=idx, lib=lib), None)

    pool = None
    if config.workers > 1 and spec.is_builtin:
        pool = ProcessPoolExecutor(max_workers=config.workers)
    accepted: Candidate | None = None
    iterations = 0
    try:
        while heap and iterations < config.outer_budget:
            iterations += 1
            _, _, _, cid = heapq.heappop(heap)
            current = by_id[cid]
            if current.accepted:
                recheck = machine.execute(current.program)
                if _accepted(recheck.loss, recheck, trace, spec):
                    accepted = current
                    progress.append({"iteration": iterations, "queue": len(heap),
                                     "best_score": _finite_or_none(best_score)})
                    break
            children = expand(current, lib, trace.schema, rng, policy,
                              act_zero_tol=config.act_zero_tol)
            fresh = []
            for prog in children:
                key = canonical_key(prog, lib)
                if key not in seen:
                    seen.add(key)
                    fresh.append(prog)
            if pool is not None:
                results = list(pool.map(
                    _optimize_one,
                    [(p, trace, spec, opt_cfg) for p in fresh]))
            else:
                results = [optimize(p, trace, spec, opt_cfg, idx=idx, lib=lib)
                           for p in fresh]
            for res in results:
                admit(res, current.cand_id)
            progress.append({"iteration": iterations, "queue": len(heap),
                             "best_score": _finite_or_none(best_score)})
    finally:
        if pool is not None:
            pool.shutdown()

    ranked = _rank(all_cands, accepted)
    return InduceResult(ranked[:max(config.best_k, 1)], accepted, iterations,
                        evaluated, progress, spec, policy)


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _rank(cands: list[Candidate], accepted: Candidate | None) -> list[Candidate]:
    """Accepted solution first, then ascending score.  The empty start node
    is reported only when nothing else was evaluated (its sigma_len-free
    score is an artifact, not an explanation)."""
    rest = [c for c in cands
            if c is not accepted and not c.failed and not c.program.is_empty]
    rest.sort(key=lambda c: (c.score, c.complexity, c.cand_id))
    out = ([accepted] if accepted is not None else []) + rest
    if not out:
        out = [c for c in cands if not c.failed][:1]
    return out


# ---------------------------------------------------------------------------
# Search-space diagnostic

def count_programs(schema, lib: FunctionLibrary | None = None,
                   max_depth: int = 2) -> int:
    """Exact count of typechecked program ASTs up to the given depth.

    Depth counts edges from the action-call root (a bare-leaf argument is
    depth 1).  The grammar is the candidate grammar the search explores:
    leaves are one undistinguished parameter or any dim-compatible variable;
    interior nodes are library functions; argument orders count separately
    and the empty program is the single depth-0 AST.
    """
    lib = lib or FunctionLibrary.default()
    memo: dict[tuple[int, int], int] = {}

    def trees(dim: int, budget: int) -> int:
        key = (dim, budget)
        if key in memo:
            return memo[key]
        total = 1 + len(schema.vars_of_dim(dim))  # parameter | variables
        if budget >= 1:
            for name in lib.names:
                entry = lib.entries[name]
                prod = 1
                for d in entry.arg_dims(dim):
                    prod *= trees(d, budget - 1)
                total += prod
        memo[key] = total
        return total

    if max_depth <= 0:
        return 1  # the empty program
    return sum(trees(schema.actions[a], max_depth - 1)
               for a in schema.action_names)
