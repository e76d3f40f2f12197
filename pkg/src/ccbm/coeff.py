"""Scalar coefficient expressions.

A tiny arithmetic language for the diffusion coefficient, the advection
field components and boundary data::

    1.1 + sin(pi*x)*sin(pi*y)
    1.1 - sin(t)
    2 + cos(t)

Variables are ``x``, ``y`` and ``t`` (the polar angle ``atan2(y, x)``),
the only constant is ``pi``.  ``^`` takes a non-negative integer literal
exponent and is expanded into repeated multiplication.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")
VARIABLES = ("x", "y", "t")


class ExprSyntaxError(ValueError):
    """Raised when an expression cannot be parsed.

    Attributes:
        offset: byte offset into the source text where parsing failed.
        expected: human readable description of what was expected.
    """

    def __init__(self, text: str, offset: int, expected: str):
        self.text = text
        self.offset = offset
        self.expected = expected
        super().__init__(f"syntax error at offset {offset}: expected {expected} in {text!r}")


class ExprDomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its domain."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Const, Var, Neg, BinOp, Pow, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(text, len(text[:start].encode()), "number, name, operator or parenthesis")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), len(text[: m.start(kind)].encode())))
        pos = m.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected):
        raise ExprSyntaxError(self.text, self.peek()[2], expected)

    def expect_op(self, op):
        kind, val, _ = self.peek()
        if kind != "op" or val != op:
            self.fail(repr(op))
        self.take()

    def parse(self) -> Expr:
        node = self.additive()
        if self.peek()[0] != "end":
            self.fail("operator or end of input")
        return node

    def additive(self):
        node = self.multiplicative()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.multiplicative())
        return node

    def multiplicative(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        node = self.primary()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            kind, val, _ = self.peek()
            if kind != "num" or not re.fullmatch(r"\d+", val):
                self.fail("non-negative integer exponent")
            self.take()
            node = Pow(node, int(val))
        return node

    def primary(self):
        kind, val, _ = self.peek()
        if kind == "num":
            self.take()
            return Num(float(val))
        if kind == "name":
            self.take()
            if val in FUNCTIONS:
                self.expect_op("(")
                arg = self.additive()
                self.expect_op(")")
                return Call(val, arg)
            if val in VARIABLES:
                return Var(val)
            if val == "pi":
                return Const("pi")
            self.i -= 1
            self.fail(f"variable, 'pi' or function (got {val!r})")
        if kind == "op" and val == "(":
            self.take()
            node = self.additive()
            self.expect_op(")")
            return node
        self.fail("number, variable, function or '('")


def parse_expr(text: str) -> Expr:
    """Parse ``text`` into an immutable expression tree.

    Raises:
        ExprSyntaxError: with the byte offset of the offending token.
    """
    return _Parser(text).parse()


def to_string(node: Expr) -> str:
    """Render a fully parenthesised expression that parses back to ``node``."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, (Const, Var)):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_string(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_string(node.left)} {node.op} {to_string(node.right)})"
    if isinstance(node, Pow):
        return f"({to_string(node.base)}^{node.exponent})"
    if isinstance(node, Call):
        return f"{node.func}({to_string(node.arg)})"
    raise TypeError(f"not an expression node: {node!r}")


def uses_angle(node: Expr) -> bool:
    if isinstance(node, Var):
        return node.name == "t"
    if isinstance(node, Neg):
        return uses_angle(node.operand)
    if isinstance(node, BinOp):
        return uses_angle(node.left) or uses_angle(node.right)
    if isinstance(node, Pow):
        return uses_angle(node.base)
    if isinstance(node, Call):
        return uses_angle(node.arg)
    return False


def _eval(node, x, y):
    if isinstance(node, Num):
        return node.value + 0.0 * x
    if isinstance(node, Const):
        return math.pi + 0.0 * x
    if isinstance(node, Var):
        if node.name == "x":
            return x + 0.0
        if node.name == "y":
            return y + 0.0
        return np.arctan2(y, x)
    if isinstance(node, Neg):
        return -_eval(node.operand, x, y)
    if isinstance(node, BinOp):
        a = _eval(node.left, x, y)
        b = _eval(node.right, x, y)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(b == 0):
            raise ExprDomainError("division by zero")
        return a / b
    if isinstance(node, Pow):
        base = _eval(node.base, x, y)
        out = 1.0 + 0.0 * base
        for _ in range(node.exponent):
            out = out * base
        return out
    if isinstance(node, Call):
        a = _eval(node.arg, x, y)
        if node.func == "log" and np.any(a <= 0):
            raise ExprDomainError("log of non-positive argument")
        if node.func == "sqrt" and np.any(a < 0):
            raise ExprDomainError("sqrt of negative argument")
        return getattr(np, node.func)(a)
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(node: Expr, x, y) -> np.ndarray:
    """Vectorised evaluation at coordinate arrays ``x``, ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if uses_angle(node) and np.any((x == 0) & (y == 0)):
        raise ExprDomainError("polar angle 't' is undefined at the origin")
    with np.errstate(all="ignore"):
        return np.asarray(_eval(node, x, y), dtype=float)


def eval_expr(node: Expr, point) -> float:
    """Evaluate ``node`` at a single 2-vector ``point``."""
    px, py = float(point[0]), float(point[1])
    return float(evaluate(node, np.array(px), np.array(py)))


def gradient(node: Expr, x, y, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of an expression at coordinate arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if is_constant(node):
        return np.zeros_like(x), np.zeros_like(y)
    gx = (evaluate(node, x + h, y) - evaluate(node, x - h, y)) / (2 * h)
    gy = (evaluate(node, x, y + h) - evaluate(node, x, y - h)) / (2 * h)
    return gx, gy


def is_constant(node: Expr) -> bool:
    if isinstance(node, (Num, Const)):
        return True
    if isinstance(node, Var):
        return False
    if isinstance(node, Neg):
        return is_constant(node.operand)
    if isinstance(node, BinOp):
        return is_constant(node.left) and is_constant(node.right)
    if isinstance(node, Pow):
        return is_constant(node.base)
    if isinstance(node, Call):
        return is_constant(node.arg)
    return False
