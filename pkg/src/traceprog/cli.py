"""Command-line surface: generate traces, induce programs, evaluate, count.

Exit codes: 0 ok, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

from . import __version__
from .config import RunConfig, load_config, parse_override
from .domains import (DemoScenario, PaddlePolicy, SecondOrderSystem,
                      generate_demo, generate_paddle_trace, random_demo_scenario,
                      simulate_second_order)
from .machine import Machine
from .search import Candidate, InduceResult, complexity, count_programs, induce, make_spec
from .sexpr import (FunctionLibrary, default_policy, format_program, parse,
                    substitute_params, typecheck)
from .trace import TraceError, load_trace, resolve_thresholds, save_trace

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="traceprog",
                     description="Induce interpretable programs from observation traces.")
    parser.add_argument("--version", action="version", version=f"traceprog {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a trace file")
    gen_sub = gen.add_subparsers(dest="domain", required=True)

    pend = gen_sub.add_parser("pendulum",
                              help="second-order system x'' = k1*x + k2*x'")
    pend.add_argument("--k1", type=float, default=-9.8)
    pend.add_argument("--k2", type=float, default=-0.1)
    pend.add_argument("--x0", type=float, default=1.0)
    pend.add_argument("--v0", type=float, default=0.0)
    pend.add_argument("--dt", type=float, default=0.01)
    pend.add_argument("--steps", type=int, default=100)
    pend.add_argument("--out", required=True)

    paddle = gen_sub.add_parser("paddle", help="scripted proportional paddle controller")
    paddle.add_argument("--agent-gain", type=float, default=-0.31)
    paddle.add_argument("--ball-gain", type=float, default=0.34)
    paddle.add_argument("--steps", type=int, default=200)
    paddle.add_argument("--clip", action="store_true",
                        help="emit discrete actions in {-1, 0, 1}")
    paddle.add_argument("--out", required=True)

    demo = gen_sub.add_parser("demo", help="pick/place tower demonstration")
    demo.add_argument("--cubes", type=int, default=3)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--jitter", type=float, default=0.0)
    demo.add_argument("--out", required=True)

    ind = sub.add_parser("induce", help="induce programs explaining a trace")
    ind.add_argument("trace")
    ind.add_argument("--config", help="flat key = value config file")
    ind.add_argument("--report", help="write line-delimited report records here")
    ind.add_argument("--spec", default=None, help="continuous | continuous_sq | demo | auto")
    ind.add_argument("--seed", type=int, default=None)
    ind.add_argument("--outer-budget", type=int, default=None)
    ind.add_argument("--inner-budget", type=int, default=None)
    ind.add_argument("--lr", type=float, default=None)
    ind.add_argument("--e-max", type=float, default=None)
    ind.add_argument("--e-acc", type=float, default=None)
    ind.add_argument("--d-max", type=float, default=None)
    ind.add_argument("--best-k", type=int, default=None)
    ind.add_argument("--workers", type=int, default=None)
    ind.add_argument("--exec-policy", choices=["repeat_body", "single_pass"], default=None)
    ind.add_argument("--backend", choices=["numba", "numpy"], default=None)
    ind.add_argument("--engine", choices=["tape", "reference"], default=None)
    ind.add_argument("--quiet", action="store_true", help="suppress progress logs")
    ind.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config key")

    ev = sub.add_parser("eval", help="execute a program against a trace")
    ev.add_argument("program", help="program text, or @path to read it from a file")
    ev.add_argument("trace")
    ev.add_argument("--spec", default="auto")
    ev.add_argument("--d-max", type=float, default=10.0)
    ev.add_argument("--e-max", type=float, default=None)
    ev.add_argument("--exec-policy", choices=["repeat_body", "single_pass"], default=None)

    cnt = sub.add_parser("count", help="count typechecked programs up to a depth")
    cnt.add_argument("trace", help="trace file supplying the schema")
    cnt.add_argument("--max-depth", type=int, default=2)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    direct = {
        "spec": args.spec, "seed": args.seed, "outer_budget": args.outer_budget,
        "inner_budget": args.inner_budget, "lr": args.lr, "e_max": args.e_max,
        "e_acc": args.e_acc, "d_max": args.d_max, "best_k": args.best_k,
        "workers": args.workers, "exec_policy": args.exec_policy,
        "backend": args.backend, "engine": args.engine,
    }
    cfg = replace(cfg, **{k: v for k, v in direct.items() if v is not None})
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        try:
            cfg = replace(cfg, **{key: parse_override(key, value)})
        except KeyError as exc:
            raise _UsageError(str(exc)) from exc
    return cfg


def _cmd_gen(args) -> int:
    if args.domain == "pendulum":
        trace = simulate_second_order(SecondOrderSystem(
            k1=args.k1, k2=args.k2, x0=args.x0, v0=args.v0,
            dt=args.dt, steps=args.steps))
    elif args.domain == "paddle":
        trace = generate_paddle_trace(
            PaddlePolicy(c_agent=args.agent_gain, c_ball=args.ball_gain,
                         clip=args.clip), steps=args.steps)
    else:
        scenario = random_demo_scenario(args.cubes, args.seed, jitter=args.jitter)
        trace = generate_demo(scenario)
    save_trace(trace, args.out)
    print(f"wrote {trace.T} steps to {args.out}")
    return 0


def _solution_record(rank: int, cand: Candidate) -> dict:
    return {
        "record": "solution",
        "rank": rank,
        "program": format_program(cand.program),
        "program_values": format_program(substitute_params(cand.program)),
        "loss": float(cand.loss),
        "complexity": float(cand.complexity),
        "f_total": float(cand.score),
        "accepted": bool(cand.accepted),
        "status": cand.status,
        "t_exec": int(cand.t_exec),
    }


def _cmd_induce(args) -> int:
    cfg = _config_from_args(args)
    trace = load_trace(args.trace)
    spec = make_spec(cfg.spec, trace, cfg)
    started = time.perf_counter()
    result = induce(trace, spec, cfg)
    elapsed = time.perf_counter() - started

    records = [{
        "record": "config",
        "spec": spec.name, "e_max": float(spec.e_max), "e_acc": float(spec.e_acc),
        "d_max": float(spec.d_max) if spec.d_max != float("inf") else None,
        "weights": list(cfg.weights), "lr": cfg.lr,
        "inner_budget": cfg.inner_budget, "outer_budget": cfg.outer_budget,
        "seed": cfg.seed, "workers": cfg.workers,
        "exec_policy": result.exec_policy, "best_k": cfg.best_k,
    }]
    records += [{"record": "progress", **p} for p in result.progress]
    records += [_solution_record(i + 1, cand)
                for i, cand in enumerate(result.candidates)]
    records.append({
        "record": "summary",
        "iterations": result.iterations,
        "evaluated": result.evaluated,
        "accepted": result.accepted is not None,
    })

    if not args.quiet:
        for rec in records:
            if rec["record"] == "progress":
                print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    print(f"# induced in {result.iterations} iterations "
          f"({result.evaluated} candidates, {elapsed:.1f}s wall)")
    for i, cand in enumerate(result.candidates):
        flag = "accepted" if cand.accepted else "candidate"
        print(f"[{i + 1}] {flag}  f_total={cand.score:.6g}  "
              f"loss={cand.loss:.6g}  C={cand.complexity:.6g}")
        print(f"    {format_program(substitute_params(cand.program))}")
    if result.accepted is None:
        print("# no candidate matched the trace within budget")
    return 0


def _cmd_eval(args) -> int:
    text = args.program
    if text.startswith("@"):
        with open(text[1:], "r", encoding="utf-8") as fh:
            text = fh.read()
    trace = load_trace(args.trace)
    cfg = RunConfig(d_max=args.d_max, e_max=args.e_max)
    spec = make_spec(args.spec, trace, cfg)
    program = parse(text, trace.schema,
                    exec_policy=args.exec_policy or default_policy(trace.schema))
    typecheck(program, trace.schema)
    res = Machine(trace, spec).execute(program)
    for i, em in enumerate(res.chi.emitted):
        print(json.dumps({"record": "step", "t": em.t,
                          "action": em.action,
                          "sigma": em.sigma if em.sigma is None else float(em.sigma)},
                         sort_keys=True))
    print(json.dumps({"record": "eval", "loss": float(res.loss),
                      "status": res.status, "t_exec": res.t_exec,
                      "complexity": float(complexity(program))}, sort_keys=True))
    return 0


def _cmd_count(args) -> int:
    trace = load_trace(args.trace)
    n = count_programs(trace.schema, max_depth=args.max_depth)
    print(json.dumps({
        "record": "count", "max_depth": args.max_depth, "programs": n,
        "grammar": ("leaves: one parameter or any dim-compatible variable; "
                    "functions: add/sub/scale; argument orders counted; "
                    "depth counts edges from the action root"),
    }, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "induce":
            return _cmd_induce(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_count(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (OSError, TraceError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
