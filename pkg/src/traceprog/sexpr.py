"""Program AST, its textual S-expression form, and structural queries/edits.

Programs are values: every edit returns a new program.  The grammar is tiny:
action calls at the roots, the arithmetic function library below them, and
variable / parameter / constant-vector leaves.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .trace import Schema

__all__ = [
    "VarRef", "ParamRef", "ConstVec", "FuncCall", "ActionCall", "BodySlot",
    "Expr", "Program", "FunctionLibrary", "FuncEntry",
    "REPEAT_BODY", "SINGLE_PASS", "default_policy",
    "ParseError", "TypecheckError",
    "parse", "parse_expr", "format_program", "format_expr",
    "depth", "leaves", "body_slot_path", "replace_leaf", "typecheck",
    "expr_dim", "canonical", "canonical_key", "structural_equal",
    "substitute_params", "fresh_param_name",
]

REPEAT_BODY = "repeat_body"
SINGLE_PASS = "single_pass"


class ParseError(ValueError):
    def __init__(self, msg: str, pos: int | None = None):
        self.pos = pos
        super().__init__(msg if pos is None else f"at position {pos}: {msg}")


class TypecheckError(ValueError):
    def __init__(self, msg: str, path: tuple = ()):
        self.path = path
        super().__init__(f"at {list(path)}: {msg}" if path else msg)


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class VarRef:
    name: str
    dim: int


@dataclass(frozen=True)
class ParamRef:
    name: str
    dim: int


@dataclass(frozen=True)
class ConstVec:
    value: tuple[float, ...]
    induced: bool = False

    @property
    def dim(self) -> int:
        return len(self.value)


@dataclass(frozen=True)
class FuncCall:
    name: str
    args: tuple["Expr", ...]


@dataclass(frozen=True)
class ActionCall:
    name: str
    arg: "Expr"


@dataclass(frozen=True)
class BodySlot:
    """Pseudo-leaf marking where a new action can be appended to the body."""
    index: int


Expr = Union[VarRef, ParamRef, ConstVec, FuncCall, ActionCall]
Leaf = Union[VarRef, ParamRef, ConstVec]


# ---------------------------------------------------------------------------
# Function library

@dataclass(frozen=True)
class FuncEntry:
    name: str
    arity: int
    # arg dims implied by the result dim; None entries mean "same as result"
    arg_dims: Callable[[int], tuple[int, ...]]
    fn: Callable[..., np.ndarray]
    # vjp(args, idx, upstream) -> gradient w.r.t. args[idx]
    vjp: Callable[[Sequence[np.ndarray], int, np.ndarray], np.ndarray]
    commutative: bool = False


def _scale_vjp(args, idx, g):
    c, v = args
    if idx == 0:
        return np.array([float(np.dot(g, v))])
    return float(c[0]) * g


_DEFAULT_ENTRIES = {
    "add": FuncEntry(
        "add", 2, lambda d: (d, d),
        lambda a, b: a + b,
        lambda args, idx, g: g,
        commutative=True),
    "sub": FuncEntry(
        "sub", 2, lambda d: (d, d),
        lambda a, b: a - b,
        lambda args, idx, g: g if idx == 0 else -g),
    "scale": FuncEntry(
        "scale", 2, lambda d: (1, d),
        lambda c, v: float(c[0]) * v,
        _scale_vjp),
}

_SYMBOLS = {"add": "+", "sub": "-", "scale": "*"}
_BY_SYMBOL = {sym: name for name, sym in _SYMBOLS.items()}


@dataclass(frozen=True)
class FunctionLibrary:
    entries: Mapping[str, FuncEntry]

    @classmethod
    def default(cls) -> "FunctionLibrary":
        return cls(dict(_DEFAULT_ENTRIES))

    def resolve(self, token: str) -> FuncEntry | None:
        name = _BY_SYMBOL.get(token, token)
        return self.entries.get(name)

    def symbol(self, name: str) -> str:
        return _SYMBOLS.get(name, name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.entries))

    @property
    def max_arity(self) -> int:
        return max(e.arity for e in self.entries.values())


_DEFAULT_LIB = FunctionLibrary.default()


def default_policy(schema: Schema) -> str:
    """One action id: the body repeats over the trace; otherwise single pass."""
    return REPEAT_BODY if len(schema.actions) == 1 else SINGLE_PASS


# ---------------------------------------------------------------------------
# Program

@dataclass(frozen=True, eq=False)
class Program:
    body: tuple[ActionCall, ...]
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    exec_policy: str = REPEAT_BODY

    def __post_init__(self):
        frozen = {}
        for name, value in self.params.items():
            arr = np.asarray(value, dtype=np.float64).reshape(-1).copy()
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def is_empty(self) -> bool:
        return not self.body

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Program":
        return Program(self.body, dict(params), self.exec_policy)

    def param_names(self) -> tuple[str, ...]:
        seen: list[str] = []
        for _, leaf in leaves(self):
            if isinstance(leaf, ParamRef) and leaf.name not in seen:
                seen.append(leaf.name)
        return tuple(seen)


def structural_equal(a: Program, b: Program) -> bool:
    """AST equality: parameter values are ignored, names and shapes are not."""
    return a.body == b.body and a.exec_policy == b.exec_policy


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(r"\(|\)|\[|\]|[^\s()\[\]]+")
_NUMBER_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = [(m.group(0), m.start()) for m in _TOKEN_RE.finditer(text)]
    return tokens


def _read(tokens: list[tuple[str, int]], i: int):
    """Read one form starting at token i; returns (form, next_i).

    Forms: ("atom", text, pos) | ("vec", floats, pos) | ("list", items, pos).
    """
    if i >= len(tokens):
        raise ParseError("unexpected end of input")
    tok, pos = tokens[i]
    if tok == "(":
        items = []
        i += 1
        while True:
            if i >= len(tokens):
                raise ParseError("unclosed '('", pos)
            if tokens[i][0] == ")":
                return ("list", items, pos), i + 1
            form, i = _read(tokens, i)
            items.append(form)
    if tok == "[":
        values = []
        i += 1
        while True:
            if i >= len(tokens):
                raise ParseError("unclosed '['", pos)
            inner, ipos = tokens[i]
            if inner == "]":
                return ("vec", values, pos), i + 1
            if not _NUMBER_RE.match(inner):
                raise ParseError(f"vector literals hold numbers, got {inner!r}", ipos)
            values.append(float(inner))
            i += 1
    if tok in (")", "]"):
        raise ParseError(f"unbalanced {tok!r}", pos)
    return ("atom", tok, pos), i + 1


class _BuildCtx:
    def __init__(self, schema: Schema, lib: FunctionLibrary):
        self.schema = schema
        self.lib = lib
        self.params: dict[str, int] = {}


def _build_expr(form, want_dim: int, ctx: _BuildCtx) -> Expr:
    kind, payload, pos = form
    if kind == "vec":
        if len(payload) != want_dim:
            raise ParseError(f"vector literal has dim {len(payload)}, expected {want_dim}", pos)
        return ConstVec(tuple(payload))
    if kind == "atom":
        if _NUMBER_RE.match(payload):
            if want_dim != 1:
                raise ParseError(f"scalar literal where dim {want_dim} expected", pos)
            return ConstVec((float(payload),))
        if payload in ctx.schema.variables:
            d = ctx.schema.variables[payload]
            if d != want_dim:
                raise ParseError(f"variable {payload!r} has dim {d}, expected {want_dim}", pos)
            return VarRef(payload, d)
        if payload in ctx.schema.actions or ctx.lib.resolve(payload) is not None:
            raise ParseError(f"{payload!r} cannot appear as a leaf", pos)
        # any other identifier introduces (or reuses) a parameter
        seen = ctx.params.get(payload)
        if seen is not None and seen != want_dim:
            raise ParseError(f"parameter {payload!r} used with dims {seen} and {want_dim}", pos)
        ctx.params[payload] = want_dim
        return ParamRef(payload, want_dim)
    # list
    if not payload:
        raise ParseError("empty call", pos)
    head_kind, head, head_pos = payload[0]
    if head_kind != "atom":
        raise ParseError("call head must be an identifier", head_pos)
    if head in ctx.schema.actions:
        raise ParseError(f"action {head!r} cannot be nested inside an expression", head_pos)
    entry = ctx.lib.resolve(head)
    if entry is None:
        raise ParseError(f"unknown identifier {head!r}", head_pos)
    args = payload[1:]
    if len(args) != entry.arity:
        raise ParseError(f"{head!r} takes {entry.arity} args, got {len(args)}", pos)
    dims = entry.arg_dims(want_dim)
    built = tuple(_build_expr(a, d, ctx) for a, d in zip(args, dims))
    return FuncCall(entry.name, built)


def _build_action(form, ctx: _BuildCtx) -> ActionCall:
    kind, payload, pos = form
    if kind != "list" or not payload or payload[0][0] != "atom":
        raise ParseError("program body expects action calls", pos)
    head = payload[0][1]
    if head not in ctx.schema.actions:
        raise ParseError(f"unknown action {head!r}", payload[0][2])
    if len(payload) != 2:
        raise ParseError(f"action {head!r} takes exactly one argument", pos)
    arg = _build_expr(payload[1], ctx.schema.actions[head], ctx)
    return ActionCall(head, arg)


def parse(text: str, schema: Schema, exec_policy: str | None = None,
          lib: FunctionLibrary | None = None) -> Program:
    """Parse program text against a schema.

    A program is a sequence of action calls, or a single ``(do ...)`` wrapper
    around one.  Bare identifiers that are not schema variables become fresh
    parameters (value zero until optimised or bound by the caller).
    """
    lib = lib or _DEFAULT_LIB
    tokens = _tokenize(text)
    forms = []
    i = 0
    while i < len(tokens):
        form, i = _read(tokens, i)
        forms.append(form)
    if len(forms) == 1 and forms[0][0] == "list" and forms[0][1] \
            and forms[0][1][0][:2] == ("atom", "do") and "do" not in schema.actions:
        forms = forms[0][1][1:]
    ctx = _BuildCtx(schema, lib)
    body = tuple(_build_action(f, ctx) for f in forms)
    program = Program(body, {n: np.zeros(d) for n, d in ctx.params.items()},
                      exec_policy or default_policy(schema))
    typecheck(program, schema, lib)
    return program


def parse_expr(text: str, schema: Schema, dim: int,
               lib: FunctionLibrary | None = None) -> Expr:
    """Parse a single non-action expression of known dimension."""
    lib = lib or _DEFAULT_LIB
    tokens = _tokenize(text)
    form, i = _read(tokens, 0)
    if i != len(tokens):
        raise ParseError("trailing tokens after expression", tokens[i][1])
    return _build_expr(form, dim, _BuildCtx(schema, lib))


# ---------------------------------------------------------------------------
# Printing

def _fmt_float(x: float) -> str:
    return repr(float(x))


def format_expr(expr: Expr, lib: FunctionLibrary | None = None) -> str:
    lib = lib or _DEFAULT_LIB
    if isinstance(expr, VarRef) or isinstance(expr, ParamRef):
        return expr.name
    if isinstance(expr, ConstVec):
        if expr.dim == 1:
            return _fmt_float(expr.value[0])
        return "[" + " ".join(_fmt_float(v) for v in expr.value) + "]"
    if isinstance(expr, FuncCall):
        inner = " ".join(format_expr(a, lib) for a in expr.args)
        return f"({lib.symbol(expr.name)} {inner})"
    if isinstance(expr, ActionCall):
        return f"({expr.name} {format_expr(expr.arg, lib)})"
    raise TypeError(f"not an expression: {expr!r}")


def format_program(program: Program, lib: FunctionLibrary | None = None) -> str:
    if not program.body:
        return "(do)"
    if len(program.body) == 1:
        return format_expr(program.body[0], lib)
    return "(do " + " ".join(format_expr(e, lib) for e in program.body) + ")"


# ---------------------------------------------------------------------------
# Structural queries

def _expr_depth(expr: Expr) -> int:
    if isinstance(expr, FuncCall):
        return 1 + max(_expr_depth(a) for a in expr.args)
    return 0


def depth(program: Program) -> int:
    """Longest root-to-leaf edge count; each action call is a root."""
    if not program.body:
        return 0
    return max(1 + _expr_depth(a.arg) for a in program.body)


def _walk_leaves(expr: Expr, path: tuple, out: list) -> None:
    if isinstance(expr, FuncCall):
        for i, a in enumerate(expr.args):
            _walk_leaves(a, path + (i,), out)
    elif isinstance(expr, ActionCall):
        _walk_leaves(expr.arg, path + (0,), out)
    else:
        out.append((path, expr))


def leaves(program: Program) -> list[tuple[tuple, Leaf]]:
    """All VarRef/ParamRef/ConstVec positions, in left-to-right order.

    Paths are tuples: body index, then argument indices (an action call's
    argument is index 0).
    """
    out: list[tuple[tuple, Leaf]] = []
    for b, action in enumerate(program.body):
        _walk_leaves(action, (b,), out)
    return out


def body_slot_path(program: Program) -> tuple:
    """Path of the pseudo-leaf where a new action may be appended."""
    return (len(program.body),)


def expr_dim(expr: Expr, lib: FunctionLibrary | None = None) -> int:
    lib = lib or _DEFAULT_LIB
    if isinstance(expr, (VarRef, ParamRef)):
        return expr.dim
    if isinstance(expr, ConstVec):
        return expr.dim
    if isinstance(expr, FuncCall):
        # result dim equals the dim of the last (non-scalar) argument slot
        entry = lib.entries[expr.name]
        arg_ds = [expr_dim(a, lib) for a in expr.args]
        want = entry.arg_dims(arg_ds[-1])
        if tuple(arg_ds) != tuple(want):
            raise TypecheckError(f"{expr.name} applied to dims {arg_ds}")
        return arg_ds[-1]
    if isinstance(expr, ActionCall):
        return expr_dim(expr.arg, lib)
    raise TypeError(f"not an expression: {expr!r}")


def _replace_in(expr: Expr, path: tuple, sub: Expr) -> Expr:
    if not path:
        return sub
    if isinstance(expr, ActionCall):
        if path[0] != 0:
            raise TypecheckError("invalid path", path)
        return ActionCall(expr.name, _replace_in(expr.arg, path[1:], sub))
    if isinstance(expr, FuncCall):
        i = path[0]
        if not (0 <= i < len(expr.args)):
            raise TypecheckError("invalid path", path)
        args = list(expr.args)
        args[i] = _replace_in(args[i], path[1:], sub)
        return FuncCall(expr.name, tuple(args))
    raise TypecheckError("path descends below a leaf", path)


def _leaf_at(program: Program, path: tuple) -> Expr:
    node: Expr = program.body[path[0]]
    for i in path[1:]:
        if isinstance(node, ActionCall):
            if i != 0:
                raise TypecheckError("invalid path", path)
            node = node.arg
        elif isinstance(node, FuncCall):
            if not (0 <= i < len(node.args)):
                raise TypecheckError("invalid path", path)
            node = node.args[i]
        else:
            raise TypecheckError("path descends below a leaf", path)
    return node


def replace_leaf(program: Program, path: tuple, subtree: Expr,
                 new_params: Mapping[str, np.ndarray] | None = None,
                 lib: FunctionLibrary | None = None) -> Program:
    """Replace exactly one leaf (or fill the body slot) with a subtree.

    The original program is unchanged.  ``new_params`` supplies values for
    parameters the subtree introduces; anything else defaults to zero.
    """
    lib = lib or _DEFAULT_LIB
    params = dict(program.params)

    def register(expr: Expr) -> None:
        for _, leaf in _collect_leaves(expr):
            if isinstance(leaf, ParamRef):
                have = params.get(leaf.name)
                if have is not None and have.shape[0] != leaf.dim:
                    raise TypecheckError(
                        f"parameter {leaf.name!r} dim {leaf.dim} collides with dim {have.shape[0]}",
                        path)
                if have is None:
                    value = None if new_params is None else new_params.get(leaf.name)
                    params[leaf.name] = (np.zeros(leaf.dim) if value is None
                                         else np.asarray(value, dtype=np.float64))

    if len(path) == 1 and path[0] == len(program.body):
        if not isinstance(subtree, ActionCall):
            raise TypecheckError("the body slot accepts an action call", path)
        register(subtree)
        return Program(program.body + (subtree,), params, program.exec_policy)

    if not (path and isinstance(path[0], int) and 0 <= path[0] < len(program.body)):
        raise TypecheckError("invalid path", path)
    target = _leaf_at(program, path)
    if isinstance(target, (ActionCall, FuncCall)):
        raise TypecheckError("path does not address a leaf", path)
    if isinstance(subtree, ActionCall):
        raise TypecheckError("actions cannot replace expression leaves", path)
    want = expr_dim(target, lib)
    got = expr_dim(subtree, lib)  # raises on internally inconsistent subtree
    if want != got:
        raise TypecheckError(f"subtree has dim {got}, leaf has dim {want}", path)
    register(subtree)
    body = list(program.body)
    body[path[0]] = _replace_in(body[path[0]], path[1:], subtree)
    return Program(tuple(body), params, program.exec_policy)


def _collect_leaves(expr: Expr) -> list[tuple[tuple, Leaf]]:
    out: list[tuple[tuple, Leaf]] = []
    _walk_leaves(expr, (), out)
    return out


def typecheck(program: Program, schema: Schema,
              lib: FunctionLibrary | None = None) -> None:
    """Verify arity and dimension rules throughout; raises TypecheckError."""
    lib = lib or _DEFAULT_LIB
    param_dims: dict[str, int] = {}

    def check(expr: Expr, want: int, path: tuple) -> None:
        if isinstance(expr, VarRef):
            have = schema.variables.get(expr.name)
            if have is None:
                raise TypecheckError(f"unknown variable {expr.name!r}", path)
            if have != expr.dim or have != want:
                raise TypecheckError(
                    f"variable {expr.name!r}: dim {have}, node expects {want}", path)
        elif isinstance(expr, ParamRef):
            if expr.dim != want:
                raise TypecheckError(
                    f"parameter {expr.name!r}: dim {expr.dim}, node expects {want}", path)
            seen = param_dims.setdefault(expr.name, expr.dim)
            if seen != expr.dim:
                raise TypecheckError(f"parameter {expr.name!r} reused with dim {expr.dim}", path)
            bound = program.params.get(expr.name)
            if bound is None:
                raise TypecheckError(f"parameter {expr.name!r} has no value entry", path)
            if bound.shape[0] != expr.dim:
                raise TypecheckError(f"parameter {expr.name!r} value has dim {bound.shape[0]}", path)
        elif isinstance(expr, ConstVec):
            if expr.dim != want:
                raise TypecheckError(f"constant has dim {expr.dim}, node expects {want}", path)
        elif isinstance(expr, FuncCall):
            entry = lib.entries.get(expr.name)
            if entry is None:
                raise TypecheckError(f"unknown function {expr.name!r}", path)
            if len(expr.args) != entry.arity:
                raise TypecheckError(
                    f"{expr.name} takes {entry.arity} args, got {len(expr.args)}", path)
            for i, (arg, d) in enumerate(zip(expr.args, entry.arg_dims(want))):
                check(arg, d, path + (i,))
        else:
            raise TypecheckError("actions cannot be nested", path)

    for b, action in enumerate(program.body):
        if not isinstance(action, ActionCall):
            raise TypecheckError("body entries must be action calls", (b,))
        want = schema.actions.get(action.name)
        if want is None:
            raise TypecheckError(f"unknown action {action.name!r}", (b,))
        check(action.arg, want, (b, 0))


# ---------------------------------------------------------------------------
# Canonical form (for deduplication during search)

def _mask_key(expr: Expr, lib: FunctionLibrary) -> str:
    if isinstance(expr, ParamRef):
        return "?"
    if isinstance(expr, FuncCall):
        return f"({lib.symbol(expr.name)} " + \
               " ".join(_mask_key(a, lib) for a in expr.args) + ")"
    return format_expr(expr, lib)


def _canon_expr(expr: Expr, lib: FunctionLibrary) -> Expr:
    if isinstance(expr, ActionCall):
        return ActionCall(expr.name, _canon_expr(expr.arg, lib))
    if isinstance(expr, FuncCall):
        args = tuple(_canon_expr(a, lib) for a in expr.args)
        entry = lib.entries[expr.name]
        commutes = entry.commutative or (
            expr.name == "scale" and all(expr_dim(a, lib) == 1 for a in args))
        if commutes:
            args = tuple(sorted(args, key=lambda a: _mask_key(a, lib)))
        return FuncCall(expr.name, args)
    return expr


def canonical(program: Program, lib: FunctionLibrary | None = None) -> Program:
    """Sort commutative arguments, rename parameters positionally (p0, p1...)."""
    lib = lib or _DEFAULT_LIB
    body = tuple(_canon_expr(a, lib) for a in program.body)
    staged = Program(body, program.params, program.exec_policy)
    rename: dict[str, str] = {}
    for _, leaf in leaves(staged):
        if isinstance(leaf, ParamRef) and leaf.name not in rename:
            rename[leaf.name] = f"p{len(rename)}"

    def apply(expr: Expr) -> Expr:
        if isinstance(expr, ActionCall):
            return ActionCall(expr.name, apply(expr.arg))
        if isinstance(expr, FuncCall):
            return FuncCall(expr.name, tuple(apply(a) for a in expr.args))
        if isinstance(expr, ParamRef):
            return ParamRef(rename[expr.name], expr.dim)
        return expr

    params = {rename[k]: v for k, v in program.params.items() if k in rename}
    return Program(tuple(apply(a) for a in body), params, program.exec_policy)


def canonical_key(program: Program, lib: FunctionLibrary | None = None) -> str:
    return format_program(canonical(program, lib), lib)


def substitute_params(program: Program, lib: FunctionLibrary | None = None) -> Program:
    """Replace every parameter reference by its current value as a constant."""
    def sub(expr: Expr) -> Expr:
        if isinstance(expr, ActionCall):
            return ActionCall(expr.name, sub(expr.arg))
        if isinstance(expr, FuncCall):
            return FuncCall(expr.name, tuple(sub(a) for a in expr.args))
        if isinstance(expr, ParamRef):
            return ConstVec(tuple(float(x) for x in program.params[expr.name]))
        return expr

    return Program(tuple(sub(a) for a in program.body), {}, program.exec_policy)


def fresh_param_name(program: Program, taken: set[str] | None = None) -> str:
    used = set(program.params) | (taken or set())
    i = 0
    while f"p{i}" in used:
        i += 1
    return f"p{i}"
