"""traceprog: induce interpretable programs that explain observed traces.

A trace of (state, action) pairs goes in; small S-expression programs over
the observed variables come out, found by best-first search over program
structure with gradient-based parameter fitting inside each candidate.
"""

__version__ = "0.1.0"

from .trace import (ErrorSpec, ObservationTrace, Schema, Step, builtin_specs,
                    load_trace, loss, resolve_thresholds, save_trace)
from .sexpr import (Program, FunctionLibrary, parse, format_program, depth,
                    leaves, replace_leaf, typecheck, canonical_key)
from .machine import KdIndex, Machine, execute, nearest_variable
from .autodiff import GradientSet, backprop, check_gradients
from .optimizer import OptConfig, adagrad_step, optimize, snap_variable
from .search import Candidate, complexity, count_programs, expand, induce, select_leaf
from .config import RunConfig, load_config

__all__ = [
    "__version__",
    "ErrorSpec", "ObservationTrace", "Schema", "Step", "builtin_specs",
    "load_trace", "loss", "resolve_thresholds", "save_trace",
    "Program", "FunctionLibrary", "parse", "format_program", "depth",
    "leaves", "replace_leaf", "typecheck", "canonical_key",
    "KdIndex", "Machine", "execute", "nearest_variable",
    "GradientSet", "backprop", "check_gradients",
    "OptConfig", "adagrad_step", "optimize", "snap_variable",
    "Candidate", "complexity", "count_programs", "expand", "induce", "select_leaf",
    "RunConfig", "load_config",
]
