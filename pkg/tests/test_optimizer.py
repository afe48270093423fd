import math

import numpy as np
import pytest

from traceprog.autodiff import GradientSet
from traceprog.machine import KdIndex
from traceprog.optimizer import (OptConfig, OptimState, TempParam,
                                 adagrad_step, optimize, snap_variable)
from traceprog.sexpr import format_program, leaves, parse, structural_equal
from traceprog.trace import (ObservationTrace, Schema, Step, continuous_spec,
                             continuous_sq_spec, demo_spec, resolve_thresholds)
from conftest import make_demo_trace


def grads_for(**kw):
    return GradientSet(by_param={k: np.asarray(v, dtype=float) for k, v in kw.items()})


class TestAdagradStep:
    def test_zero_gradient_is_identity(self):
        state = OptimState(lr=0.1)
        params = {"p0": np.array([1.0, 2.0])}
        out = adagrad_step(state, params, grads_for(p0=[0.0, 0.0]))
        assert np.array_equal(out["p0"], params["p0"])
        assert np.all(state.accum["p0"] == 0.0)

    def test_first_step_magnitude(self):
        state = OptimState(lr=0.1, delta_stab=1e-8)
        out = adagrad_step(state, {"p0": np.array([0.0])}, grads_for(p0=[4.0]))
        assert out["p0"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_repeated_equal_gradients_shrink(self):
        state = OptimState(lr=0.1)
        params = {"p0": np.array([0.0])}
        first = adagrad_step(state, params, grads_for(p0=[4.0]))
        second = adagrad_step(state, first, grads_for(p0=[4.0]))
        step1 = abs(first["p0"][0] - params["p0"][0])
        step2 = abs(second["p0"][0] - first["p0"][0])
        assert step2 < step1

    def test_param_without_gradient_untouched(self):
        state = OptimState(lr=0.1)
        out = adagrad_step(state, {"a": np.array([1.0]), "b": np.array([2.0])},
                           grads_for(a=[1.0]))
        assert out["b"][0] == 2.0


class TestSnapVariable:
    def make_state(self, origin="x"):
        state = OptimState()
        state.temp_params[(0, 0)] = TempParam(origin, 1, np.array([0.9]))
        state.accum = {"p0": np.array([4.0])}
        return state

    def trace(self):
        schema = Schema({"x": 1, "v": 1}, {"accel": 1})
        return ObservationTrace(
            schema, [Step({"x": [0.9], "v": [0.1]}, "accel", [0.0])])

    def test_drift_to_other_variable_snaps_and_resets(self):
        state = self.make_state(origin="x")
        res = snap_variable(state, (0, 0), np.array([0.15]), KdIndex(self.trace()), 1)
        assert not res.kept
        assert res.variable == "v"
        assert state.temp_params[(0, 0)].origin == "v"
        assert state.temp_params[(0, 0)].value[0] == pytest.approx(0.1)
        assert np.all(state.accum["p0"] == 0.0)

    def test_still_nearest_keeps_drifted_value(self):
        state = self.make_state(origin="x")
        res = snap_variable(state, (0, 0), np.array([0.8]), KdIndex(self.trace()), 1)
        assert res.kept
        assert state.temp_params[(0, 0)].value[0] == pytest.approx(0.8)
        assert state.accum["p0"][0] == 4.0  # history preserved

    def test_single_candidate_never_resets(self):
        schema = Schema({"x": 1}, {"accel": 1})
        trace = ObservationTrace(
            schema, [Step({"x": [0.9]}, "accel", [0.0])])
        state = self.make_state(origin="x")
        res = snap_variable(state, (0, 0), np.array([-3.0]), KdIndex(trace), 1)
        assert res.kept
        assert state.accum["p0"][0] == 4.0


class TestOptimize:
    def test_linear_recovery(self, linear_trace, continuous):
        p = parse("(accel (* p0 x))", linear_trace.schema)
        out = optimize(p, linear_trace, continuous,
                       OptConfig(inner_budget=3000, exit_loss=1e-7 * linear_trace.T))
        assert out.program.params["p0"][0] == pytest.approx(2.0, abs=1e-3)
        assert out.loss < 1e-5 * linear_trace.T

    def test_already_converged_returns_quickly(self, oscillator_trace):
        spec = resolve_thresholds(continuous_spec(), oscillator_trace)
        p = parse("(accel (+ (* a x) (* b v)))", oscillator_trace.schema)
        p = p.with_params({"a": [-1.0], "b": [-0.2]})
        out = optimize(p, oscillator_trace, spec)
        assert out.iterations <= 1
        assert out.loss <= spec.e_acc

    def test_two_parameter_recovery_matches_regression_oracle(self, oscillator_trace):
        spec = resolve_thresholds(continuous_spec(), oscillator_trace)
        p = parse("(accel (+ (* p0 x) (* p1 v)))", oscillator_trace.schema)
        out = optimize(p, oscillator_trace, spec,
                       OptConfig(inner_budget=4000, exit_loss=0.1 * spec.e_acc))
        X = np.column_stack([oscillator_trace.var_matrix("x")[:, 0],
                             oscillator_trace.var_matrix("v")[:, 0]])
        y = np.array([s.theta[0] for s in oscillator_trace.steps])
        oracle, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert out.program.params["p0"][0] == pytest.approx(oracle[0], abs=1e-2)
        assert out.program.params["p1"][0] == pytest.approx(oracle[1], abs=1e-2)

    def test_structure_unchanged_up_to_variable_identity(self, oscillator_trace):
        spec = resolve_thresholds(continuous_spec(), oscillator_trace)
        p = parse("(accel (+ (* p0 x) (* p1 v)))", oscillator_trace.schema)
        out = optimize(p, oscillator_trace, spec)
        stripped = [type(leaf).__name__ for _, leaf in leaves(out.program)]
        assert stripped == [type(leaf).__name__ for _, leaf in leaves(p)]

    def test_convex_loss_never_worsens(self, linear_trace):
        spec = resolve_thresholds(continuous_sq_spec(), linear_trace)
        p = parse("(accel (* p0 x))", linear_trace.schema).with_params({"p0": [1.5]})
        from traceprog.machine import execute
        entry = execute(p, linear_trace, spec).loss
        out = optimize(p, linear_trace, spec, OptConfig(inner_budget=500))
        assert out.loss <= entry

    def test_snap_fixes_wrong_pick_variable(self):
        trace = make_demo_trace()
        spec = resolve_thresholds(demo_spec(d_max=20.0, e_max=30.0), trace)
        p = parse("(pick loc_c1)", trace.schema, exec_policy="single_pass")
        out = optimize(p, trace, spec, OptConfig(inner_budget=600))
        got = [leaf.name for _, leaf in leaves(out.program)]
        assert got == ["loc_c2"]
        assert out.loss == pytest.approx(1.0)  # only sigma_len(2,1) remains

    def test_no_temp_params_survive(self):
        trace = make_demo_trace()
        spec = resolve_thresholds(demo_spec(d_max=20.0, e_max=30.0), trace)
        p = parse("(do (pick loc_c2) (place (+ loc_c1 q)))", trace.schema,
                  exec_policy="single_pass")
        out = optimize(p, trace, spec, OptConfig(inner_budget=3000))
        kinds = {type(leaf).__name__ for _, leaf in leaves(out.program)}
        assert kinds <= {"VarRef", "ParamRef"}
        assert set(out.program.params) == set(p.params)
        assert out.loss < 1e-2

    def test_offset_parameter_recovered(self):
        trace = make_demo_trace()
        spec = resolve_thresholds(demo_spec(d_max=20.0, e_max=30.0), trace)
        p = parse("(do (pick loc_c2) (place (+ loc_c1 q)))", trace.schema,
                  exec_policy="single_pass")
        out = optimize(p, trace, spec,
                       OptConfig(inner_budget=6000, exit_loss=1e-5))
        assert out.program.params["q"] == pytest.approx([-0.05, 1.17], abs=1e-3)

    def test_nonfinite_marks_failed(self, linear_trace, continuous):
        p = parse("(accel (* p0 x))", linear_trace.schema)
        p = p.with_params({"p0": [float("nan")]})
        out = optimize(p, linear_trace, continuous)
        assert out.failed
        assert math.isinf(out.loss)

    def test_paramless_varless_program_executes_once(self, linear_trace, continuous):
        p = parse("(accel 2.0)", linear_trace.schema)
        out = optimize(p, linear_trace, continuous)
        assert out.iterations == 0
        assert structural_equal(out.program, p)
