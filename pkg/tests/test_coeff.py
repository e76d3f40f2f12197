import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbm import coeff
from ccbm.coeff import BinOp, Call, Const, Neg, Num, Pow, Var


def ev(text, x=0.3, y=-0.7):
    return coeff.eval_expr(coeff.parse_expr(text), (x, y))


def test_precedence_and_associativity():
    assert ev("1 + 2 * 3") == 7
    assert ev("2 - 3 - 4") == -5
    assert ev("8 / 4 / 2") == 1
    assert ev("-2^2") == -4
    assert ev("(1 + 2) * 3") == 9
    assert ev("2 * x^3", x=2.0) == 16


def test_default_coefficients():
    x, y = 0.25, 0.5
    assert ev("1.1 + sin(pi*x)*sin(pi*y)", x, y) == pytest.approx(1.1 + math.sin(math.pi * x) * math.sin(math.pi * y))
    t = math.atan2(y, x)
    assert ev("1.1 - sin(t)", x, y) == pytest.approx(1.1 - math.sin(t))
    assert ev("2 + cos(t)", x, y) == pytest.approx(2 + math.cos(t))


def test_functions_and_constants():
    assert ev("exp(0) + log(1) + sqrt(4) + abs(-3)") == 6
    assert ev("pi") == math.pi
    assert ev("1e-3 * 2") == 0.002


@pytest.mark.parametrize(
    "text,offset",
    [("1 + * x", 4), ("sin(x", 5), ("2 ^ x", 4), ("foo(x)", 0), ("x $ y", 2), ("", 0), ("(1))", 3)],
)
def test_syntax_errors_report_offset(text, offset):
    with pytest.raises(coeff.ExprSyntaxError) as err:
        coeff.parse_expr(text)
    assert err.value.offset == offset


def test_offset_is_in_bytes():
    with pytest.raises(coeff.ExprSyntaxError) as err:
        coeff.parse_expr("x + é")
    assert err.value.offset == 4


@pytest.mark.parametrize("text,point", [("1/x", (0, 1)), ("log(x)", (-1, 0)), ("sqrt(y)", (0, -1)), ("t", (0, 0))])
def test_domain_errors(text, point):
    with pytest.raises(coeff.ExprDomainError):
        coeff.eval_expr(coeff.parse_expr(text), point)


def test_vectorised_evaluation_and_gradient():
    node = coeff.parse_expr("x^2 + 3*y")
    x = np.linspace(-1, 1, 7)
    y = np.linspace(0, 2, 7)
    np.testing.assert_allclose(coeff.evaluate(node, x, y), x**2 + 3 * y)
    gx, gy = coeff.gradient(node, x, y)
    np.testing.assert_allclose(gx, 2 * x, atol=1e-8)
    np.testing.assert_allclose(gy, 3.0, atol=1e-8)
    cx, cy = coeff.gradient(coeff.parse_expr("2 + pi"), x, y)
    assert not cx.any() and not cy.any()


def test_constant_detection():
    assert coeff.is_constant(coeff.parse_expr("2*pi + sin(1)"))
    assert not coeff.is_constant(coeff.parse_expr("1 + 0*x"))
    assert coeff.uses_angle(coeff.parse_expr("cos(t)"))


leaves = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False).map(Num),
    st.sampled_from([Var("x"), Var("y"), Var("t"), Const("pi")]),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(children, st.integers(0, 4)).map(lambda a: Pow(*a)),
        st.tuples(st.sampled_from(coeff.FUNCTIONS), children).map(lambda a: Call(*a)),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(trees)
def test_print_parse_round_trip(tree):
    assert coeff.parse_expr(coeff.to_string(tree)) == tree
