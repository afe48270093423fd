import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from traceprog.sexpr import (ActionCall, ConstVec, FuncCall, FunctionLibrary,
                             ParamRef, ParseError, Program, TypecheckError,
                             VarRef, body_slot_path, canonical, canonical_key,
                             depth, expr_dim, format_expr, format_program,
                             leaves, parse, parse_expr, replace_leaf,
                             structural_equal, substitute_params, typecheck)
from traceprog.trace import Schema

LIB = FunctionLibrary.default()


def demo2_schema():
    return Schema({"loc": 2}, {"pick": 2, "place": 2})


class TestParse:
    def test_vector_offset_expression(self):
        schema = demo2_schema()
        expr = parse_expr("(+ loc [-0.05 1.17])", schema, dim=2)
        assert expr == FuncCall("add", (VarRef("loc", 2), ConstVec((-0.05, 1.17))))

    def test_single_leaf_action(self, physics_schema):
        p = parse("(accel x)", physics_schema)
        assert p.body == (ActionCall("accel", VarRef("x", 1)),)

    def test_nested_params_registered(self, physics_schema):
        p = parse("(accel (+ (* p0 x) (* p1 v)))", physics_schema)
        assert set(p.params) == {"p0", "p1"}
        assert all(v.shape == (1,) for v in p.params.values())
        assert format_program(p) == "(accel (+ (* p0 x) (* p1 v)))"

    def test_round_trip_examples(self, physics_schema):
        for text in ["(accel x)", "(accel (+ (* p0 x) (* p1 v)))",
                     "(accel (- v 3.0))", "(do)",
                     "(do (accel x) (accel (* p0 v)))"]:
            p = parse(text, physics_schema)
            assert structural_equal(parse(format_program(p), physics_schema), p)

    def test_do_wrapper_multi_action(self):
        schema = demo2_schema()
        p = parse("(do (pick loc) (place (+ loc [0.0 1.0])))", schema)
        assert len(p.body) == 2
        assert format_program(p).startswith("(do (pick loc)")

    def test_syntax_error_reports_position(self, physics_schema):
        with pytest.raises(ParseError) as err:
            parse("(accel (add x)", physics_schema)
        assert err.value.pos is not None

    def test_unknown_function(self, physics_schema):
        with pytest.raises(ParseError, match="unknown identifier"):
            parse("(accel (div x x))", physics_schema)

    def test_arity_mismatch(self, physics_schema):
        with pytest.raises(ParseError, match="takes 2 args"):
            parse("(accel (+ x))", physics_schema)

    def test_dim_mismatch_scalar_into_vector(self):
        schema = demo2_schema()
        with pytest.raises(ParseError):
            parse("(pick (+ loc 3.0))", schema)

    def test_scalar_scale_ok(self):
        schema = Schema({"y": 1}, {"move": 1})
        p = parse("(move (* k y))", schema)
        typecheck(p, schema)

    def test_nested_action_rejected(self, physics_schema):
        with pytest.raises(ParseError, match="nested"):
            parse("(accel (accel x))", physics_schema)

    def test_param_dim_conflict(self):
        schema = demo2_schema()
        with pytest.raises(ParseError, match="dims"):
            parse("(pick (+ loc (* k k)))", schema)  # k scalar and 2-vector


class TestDepth:
    def test_empty_program(self, physics_schema):
        assert depth(parse("(do)", physics_schema)) == 0

    def test_bare_action(self, physics_schema):
        assert depth(parse("(accel x)", physics_schema)) == 1

    def test_nested(self, physics_schema):
        assert depth(parse("(accel (+ (* p0 x) (* p1 v)))", physics_schema)) == 3

    def test_max_over_body(self):
        schema = demo2_schema()
        p = parse("(do (pick loc) (place (+ loc p0)))", schema)
        assert depth(p) == 2


class TestLeaves:
    def test_single(self, physics_schema):
        p = parse("(accel x)", physics_schema)
        assert leaves(p) == [((0, 0), VarRef("x", 1))]

    def test_two_leaves(self, physics_schema):
        p = parse("(accel (+ p0 x))", physics_schema)
        got = leaves(p)
        assert [leaf for _, leaf in got] == [ParamRef("p0", 1), VarRef("x", 1)]
        assert [path for path, _ in got] == [(0, 0, 0), (0, 0, 1)]

    def test_empty_program_has_body_slot(self, physics_schema):
        p = parse("(do)", physics_schema)
        assert leaves(p) == []
        assert body_slot_path(p) == (0,)


class TestReplaceLeaf:
    def test_grow_scale(self, physics_schema):
        p = parse("(accel x)", physics_schema)
        q = replace_leaf(p, (0, 0), FuncCall("scale", (ParamRef("p0", 1), VarRef("x", 1))))
        assert format_program(q) == "(accel (* p0 x))"
        assert format_program(p) == "(accel x)"  # original unchanged
        assert "p0" in q.params

    def test_replace_param_by_subtree(self, physics_schema):
        p = parse("(accel (* p0 x))", physics_schema)
        q = replace_leaf(p, (0, 0, 0), FuncCall("add", (ParamRef("p1", 1), VarRef("v", 1))))
        assert format_program(q) == "(accel (* (+ p1 v) x))"

    def test_dim_mismatch_rejected(self):
        schema = demo2_schema()
        p = parse("(pick loc)", schema)
        with pytest.raises(TypecheckError):
            replace_leaf(p, (0, 0), FuncCall("add", (ParamRef("q", 1), ParamRef("r", 1))))

    def test_invalid_path(self, physics_schema):
        p = parse("(accel x)", physics_schema)
        with pytest.raises(TypecheckError):
            replace_leaf(p, (0, 0, 5), VarRef("v", 1))

    def test_body_slot_appends_action(self):
        schema = demo2_schema()
        p = parse("(pick loc)", schema)
        q = replace_leaf(p, body_slot_path(p), ActionCall("place", ParamRef("p0", 2)))
        assert [a.name for a in q.body] == ["pick", "place"]

    def test_leaf_count_grows_by_arity_minus_one(self, physics_schema):
        p = parse("(accel (+ p0 x))", physics_schema)
        before = len(leaves(p))
        q = replace_leaf(p, (0, 0, 1), FuncCall("add", (VarRef("x", 1), VarRef("v", 1))))
        assert len(leaves(q)) == before + 1

    def test_depth_grows_by_at_most_one(self, physics_schema):
        p = parse("(accel (+ p0 x))", physics_schema)
        for path, _ in leaves(p):
            q = replace_leaf(p, path, FuncCall("add", (ParamRef("q0", 1), VarRef("v", 1))))
            assert depth(q) in (depth(p), depth(p) + 1)


class TestTypecheck:
    def test_ok(self, physics_schema):
        typecheck(parse("(accel (+ x v))", physics_schema), physics_schema)

    def test_unknown_variable_flagged_with_path(self, physics_schema):
        p = Program((ActionCall("accel", VarRef("y", 1)),), {})
        with pytest.raises(TypecheckError) as err:
            typecheck(p, physics_schema)
        assert err.value.path == (0, 0)

    def test_runtime_dims_never_break_after_typecheck(self, physics_schema, linear_trace, continuous):
        from traceprog.machine import execute
        p = parse("(accel (+ (* p0 x) (* p1 v)))", physics_schema)
        typecheck(p, physics_schema)
        execute(p, linear_trace, continuous)  # must not raise


class TestCanonical:
    def test_add_argument_order(self, physics_schema):
        a = parse("(accel (+ x (* p0 v)))", physics_schema)
        b = parse("(accel (+ (* p0 v) x))", physics_schema)
        assert canonical_key(a) == canonical_key(b)

    def test_scalar_scale_commutes(self, physics_schema):
        a = parse("(accel (* p0 x))", physics_schema)
        b = parse("(accel (* x p0))", physics_schema)
        assert canonical_key(a) == canonical_key(b)

    def test_sub_does_not_commute(self, physics_schema):
        a = parse("(accel (- x v))", physics_schema)
        b = parse("(accel (- v x))", physics_schema)
        assert canonical_key(a) != canonical_key(b)

    def test_params_renamed_positionally_with_values(self, physics_schema):
        p = parse("(accel (+ (* q9 v) (* q2 x)))", physics_schema)
        p = p.with_params({"q9": np.array([3.0]), "q2": np.array([5.0])})
        c = canonical(p)
        assert set(c.params) == {"p0", "p1"}
        # values follow their leaves through the rename
        by_leaf = {leaf.name: path for path, leaf in leaves(c) if isinstance(leaf, ParamRef)}
        assert sorted(by_leaf) == ["p0", "p1"]
        vals = sorted(float(v[0]) for v in c.params.values())
        assert vals == [3.0, 5.0]

    def test_substitute_params(self, physics_schema):
        p = parse("(accel (* p0 x))", physics_schema).with_params({"p0": np.array([2.5])})
        assert format_program(substitute_params(p)) == "(accel (* 2.5 x))"


# random AST generator for the round-trip property
def _expr_strategy(schema, dim, max_depth):
    leaf = st.one_of(
        st.sampled_from([VarRef(n, d) for n, d in schema.variables.items() if d == dim]
                        or [ParamRef("q", dim)]),
        st.builds(lambda i: ParamRef(f"q{i}", dim), st.integers(0, 3)),
        st.builds(lambda xs: ConstVec(tuple(round(x, 3) for x in xs)),
                  st.lists(st.floats(-5, 5, allow_nan=False), min_size=dim, max_size=dim)),
    )
    if max_depth == 0:
        return leaf

    def compound(children):
        return st.one_of(
            leaf,
            st.builds(lambda a, b: FuncCall("add", (a, b)), children, children),
            st.builds(lambda a, b: FuncCall("sub", (a, b)), children, children),
            st.builds(lambda c, v: FuncCall("scale", (c, v)),
                      _expr_strategy(schema, 1, 0), children),
        )

    return compound(_expr_strategy(schema, dim, max_depth - 1))


@settings(max_examples=150, deadline=None)
@given(data=st.data())
def test_round_trip_property(data):
    schema = Schema({"x": 1, "v": 1}, {"accel": 1})
    expr = data.draw(_expr_strategy(schema, 1, 3))
    program = Program((ActionCall("accel", expr),),
                      {leaf.name: np.zeros(leaf.dim)
                       for _, leaf in leaves(Program((ActionCall("accel", expr),), {}))
                       if isinstance(leaf, ParamRef)})
    typecheck(program, schema)
    text = format_program(program)
    again = parse(text, schema)
    assert structural_equal(again, program)
    assert format_program(again) == text
