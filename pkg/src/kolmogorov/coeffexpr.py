"""Arithmetic expressions for coefficient fields.

Grammar (recursive descent)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

``^`` binds tighter than unary minus and is right-associative, so
``-2^2 == -4`` and ``2^3^2 == 512``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

VARIABLES = ("x1", "x2", "x3", "y")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = {
    "sin": 1, "cos": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1, "tanh": 1,
    "min": 2, "max": 2,
}


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprError):
    pass


class ArityError(ExprError):
    pass


class MissingVariableError(ExprError):
    pass


class EvalDomainError(ExprError):
    """Raised for log/sqrt of a negative argument, division by zero, ...

    ``mask`` is set when the failure happened during array evaluation and
    marks the offending entries.
    """

    def __init__(self, message: str, mask=None):
        super().__init__(message)
        self.mask = mask


# --- tree -----------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


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
class Call:
    func: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]


# --- lexer / parser -------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None:
            offset = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {source[offset]!r}", offset)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def take(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, value: str):
        kind, text, offset = self.tok
        if text != value or kind != "op":
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, got {what}", offset)
        self.take()

    def parse(self) -> Expr:
        node = self.expr()
        kind, text, offset = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", offset)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.tok[0] == "op" and self.tok[1] == "-":
            self.take()
            operand = self.unary()
            # fold "-<literal>" so unparse/reparse is a fixed point
            if isinstance(operand, Num):
                return Num(-operand.value)
            return Neg(operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, text, offset = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.tok[0] == "op" and self.tok[1] == "(":
                if text not in FUNCTIONS:
                    raise UnknownIdentifierError(f"unknown function {text!r} at offset {offset}")
                self.take()
                args = [self.expr()]
                while self.tok[0] == "op" and self.tok[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ArityError(
                        f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)} (offset {offset})"
                    )
                return Call(text, tuple(args))
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            if text in VARIABLES:
                return Var(text)
            if text in FUNCTIONS:
                raise ExprSyntaxError(f"function {text!r} needs arguments", offset)
            raise UnknownIdentifierError(f"unknown identifier {text!r} at offset {offset}")
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", offset)


def parse(source: str) -> Expr:
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(source).parse()


def unparse(expr: Expr) -> str:
    """Fully parenthesised source text; ``parse(unparse(e)) == e``."""
    if isinstance(expr, Num):
        text = repr(expr.value)
        if not math.isfinite(expr.value):
            raise ExprError(f"cannot unparse non-finite literal {text}")
        return f"({text})" if expr.value < 0 or text.startswith("-") else text
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{unparse(expr.operand)})"
    if isinstance(expr, BinOp):
        return f"({unparse(expr.left)} {expr.op} {unparse(expr.right)})"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(unparse(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")


def variables(expr: Expr) -> set:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Neg):
        return variables(expr.operand)
    if isinstance(expr, BinOp):
        return variables(expr.left) | variables(expr.right)
    if isinstance(expr, Call):
        return set().union(*(variables(a) for a in expr.args))
    return set()


# --- scalar evaluation ----------------------------------------------------

def _env(point) -> Mapping[str, float]:
    if isinstance(point, Mapping):
        return point
    return {f"x{i + 1}": float(v) for i, v in enumerate(np.atleast_1d(point))}


def _pow(a: float, b: float) -> float:
    try:
        return math.pow(a, b)
    except OverflowError:
        if a < 0 and b == int(b) and int(b) % 2:
            return -math.inf
        return math.inf
    except ValueError:
        raise EvalDomainError(f"{a!r} ^ {b!r} is undefined") from None


def _scalar(expr: Expr, env) -> float:
    v = _scalar_node(expr, env)
    if v != v:
        raise EvalDomainError(f"undefined result in {unparse(expr)}")
    return v


def _scalar_node(expr: Expr, env) -> float:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return float(env[expr.name])
        except KeyError:
            raise MissingVariableError(f"no value for variable {expr.name!r}") from None
    if isinstance(expr, Neg):
        return -_scalar(expr.operand, env)
    if isinstance(expr, BinOp):
        a = _scalar(expr.left, env)
        b = _scalar(expr.right, env)
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            if b == 0.0:
                raise EvalDomainError("division by zero")
            return a / b
        return _pow(a, b)
    args = [_scalar(a, env) for a in expr.args]
    f = expr.func
    x = args[0]
    if f == "log":
        if x <= 0.0:
            raise EvalDomainError(f"log of nonpositive value {x!r}")
        return math.log(x)
    if f == "sqrt":
        if x < 0.0:
            raise EvalDomainError(f"sqrt of negative value {x!r}")
        return math.sqrt(x)
    if f == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            return math.inf
    if f == "min":
        return min(args)
    if f == "max":
        return max(args)
    if f in ("sin", "cos") and math.isinf(x):
        raise EvalDomainError(f"{f} of infinite value")
    return {"sin": math.sin, "cos": math.cos, "abs": abs, "tanh": math.tanh}[f](x)


def evaluate(expr: Expr, point: Union[Sequence[float], Mapping[str, float]]) -> float:
    """Evaluate at one point.

    ``point`` is either a coordinate vector (bound to x1, x2, x3) or a
    mapping from variable names to values.
    """
    return float(_scalar(expr, _env(point)))


# --- array evaluation (used by field sampling) ----------------------------

def _fail(message: str, mask):
    raise EvalDomainError(message, mask=np.asarray(mask))


def evaluate_array(expr: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Elementwise evaluation over same-shaped coordinate arrays.

    Same domain rules as :func:`evaluate`; on failure the raised
    :class:`EvalDomainError` carries a boolean ``mask`` of bad entries.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _array(expr, env)


def _array(expr: Expr, env):
    v = _array_node(expr, env)
    bad = np.isnan(v)
    if np.any(bad):
        _fail(f"undefined result in {unparse(expr)}", bad)
    return v


def _array_node(expr: Expr, env):
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise MissingVariableError(f"no value for variable {expr.name!r}") from None
    if isinstance(expr, Neg):
        return -_array(expr.operand, env)
    if isinstance(expr, BinOp):
        a = _array(expr.left, env)
        b = _array(expr.right, env)
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            bad = np.asarray(b) == 0.0
            if np.any(bad):
                _fail("division by zero", bad)
            return a / b
        a_arr, b_arr = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        bad = (a_arr < 0) & (b_arr != np.round(b_arr))
        bad |= (a_arr == 0) & (b_arr < 0)
        if np.any(bad):
            _fail("undefined power", bad)
        return np.power(a_arr, b_arr)
    args = [_array(a, env) for a in expr.args]
    f = expr.func
    x = args[0]
    if f == "log":
        bad = np.asarray(x) <= 0.0
        if np.any(bad):
            _fail("log of nonpositive value", bad)
        return np.log(x)
    if f == "sqrt":
        bad = np.asarray(x) < 0.0
        if np.any(bad):
            _fail("sqrt of negative value", bad)
        return np.sqrt(x)
    if f == "min":
        return np.minimum(args[0], args[1])
    if f == "max":
        return np.maximum(args[0], args[1])
    return {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs, "tanh": np.tanh}[f](x)
