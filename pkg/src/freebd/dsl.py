"""A small arithmetic language for user-supplied scalar fields.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power        # only at the start of an expression,
                                       # after '(' or after ','
    power  := atom ('^' power)?        # right associative, no unary minus
    atom   := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

An operator directly followed by a unary minus (``2*-x``, ``x^-1``) is a
syntax error; write ``2*(-x)`` instead.

Evaluation accepts floats or numpy arrays for the variables and raises
:class:`DomainError` instead of ever returning a non-finite value.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import EvaluationError, FreeBDError

__all__ = [
    "Num", "Var", "Const", "Neg", "BinOp", "Call", "Expr",
    "ParseError", "DomainError", "UnboundVariableError",
    "parse", "to_text", "evaluate", "variables", "compile_field",
]

VARIABLES = ("x", "y", "z")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = {
    "sin": 1, "cos": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1,
    "min": 2, "max": 2,
}
MAX_DEPTH = 100


class ParseError(FreeBDError, ValueError):
    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f"{message} at offset {offset}"
        if expected:
            detail += f" (expected one of: {', '.join(expected)})"
        super().__init__(detail)


class DomainError(EvaluationError):
    pass


class UnboundVariableError(EvaluationError, KeyError):
    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
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
    name: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, Const, Neg, BinOp, Call]


# --------------------------------------------------------------------------- lexer

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r\n]+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num", "name", "op", "end"
    text: str
    offset: int


def _tokenize(text: str) -> list[_Tok]:
    # offsets are byte offsets into the UTF-8 encoding
    out = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", byte)
        kind = m.lastgroup
        if kind != "ws":
            out.append(_Tok(kind, m.group(), byte))
        byte += len(m.group().encode("utf-8"))
        pos = m.end()
    out.append(_Tok("end", "", byte))
    return out


# --------------------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.depth = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _prev_text(self) -> str | None:
        return self.toks[self.i - 1].text if self.i > 0 else None

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text or self.tok.kind != "op":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.offset, (repr(text),))
        return self.advance()

    @staticmethod
    def _describe(t: _Tok) -> str:
        return "end of input" if t.kind == "end" else repr(t.text)

    def enter(self):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ParseError("expression nested too deeply", self.tok.offset)

    def leave(self):
        self.depth -= 1

    def parse(self) -> Expr:
        if self.tok.kind == "end":
            raise ParseError("empty expression", self.tok.offset, ("number", "name", "'('", "'-'"))
        e = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.offset,
                             ("operator", "end of input"))
        return e

    def expr(self) -> Expr:
        self.enter()
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            left = BinOp(op, left, self.term())
        self.leave()
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            prev = self._prev_text()
            if prev is not None and prev not in ("(", ","):
                raise ParseError("unary minus directly after an operator; add parentheses",
                                 self.tok.offset, ("number", "name", "'('"))
            self.advance()
            self.enter()
            operand = self.unary_operand()
            self.leave()
            return Neg(operand)
        return self.power()

    def unary_operand(self) -> Expr:
        # "--x" is an operator followed by a unary minus as well
        if self.tok.kind == "op" and self.tok.text == "-":
            raise ParseError("unary minus directly after an operator; add parentheses",
                             self.tok.offset, ("number", "name", "'('"))
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "-":
                raise ParseError("unary minus directly after an operator; add parentheses",
                                 self.tok.offset, ("number", "name", "'('"))
            self.enter()
            exponent = self.power()
            self.leave()
            return BinOp("^", base, exponent)
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            value = float(t.text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {t.text!r} overflows", t.offset)
            return Num(value)
        if t.kind == "name":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(t)
            if t.text in VARIABLES:
                return Var(t.text)
            if t.text in CONSTANTS:
                return Const(t.text)
            if t.text in FUNCTIONS:
                raise ParseError(f"function {t.text!r} needs an argument list", self.tok.offset, ("'('",))
            raise ParseError(f"unknown identifier {t.text!r}", t.offset)
        if t.kind == "op" and t.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {self._describe(t)}", t.offset,
                         ("number", "name", "'('"))

    def call(self, name_tok: _Tok) -> Expr:
        name = name_tok.text
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", name_tok.offset)
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ParseError(f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}", name_tok.offset)
        return Call(name, tuple(args))


def parse(text: str) -> Expr:
    """Parse ``text`` into an immutable expression tree."""
    if not isinstance(text, str):
        raise TypeError("expression must be a string")
    return _Parser(text).parse()


# --------------------------------------------------------------------------- printing

def to_text(e: Expr) -> str:
    """Fully parenthesised text that re-parses to the same tree."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, (Var, Const)):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_text(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_text(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def variables(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        return set().union(*(variables(a) for a in e.args))
    return set()


# --------------------------------------------------------------------------- evaluation

def _first_bad(mask, point):
    """Describe the first offending sample for an error message."""
    mask = np.asarray(mask)
    if mask.ndim == 0:
        return {k: float(np.asarray(v)) for k, v in point.items()}
    idx = tuple(int(i) for i in np.argwhere(mask)[0])
    out = {}
    for k, v in point.items():
        arr = np.asarray(v)
        out[k] = float(arr[idx]) if arr.ndim else float(arr)
    return out


def _checked(result, point, what):
    bad = ~np.isfinite(result)
    if np.any(bad):
        raise DomainError(f"{what} is not finite", _first_bad(bad, point))
    return result


def evaluate(e: Expr, point: Mapping[str, object]):
    """Evaluate ``e`` with variables bound by ``point`` (floats or broadcastable arrays)."""
    with np.errstate(all="ignore"):
        return _eval(e, point)


def _eval(e, point):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Const):
        return CONSTANTS[e.name]
    if isinstance(e, Var):
        if e.name not in point:
            raise UnboundVariableError(f"variable {e.name!r} is not bound")
        v = point[e.name]
        return v if isinstance(v, float) else np.asarray(v, dtype=float)
    if isinstance(e, Neg):
        return -_eval(e.operand, point)
    if isinstance(e, BinOp):
        a = _eval(e.left, point)
        b = _eval(e.right, point)
        if e.op == "+":
            r = a + b
        elif e.op == "-":
            r = a - b
        elif e.op == "*":
            r = a * b
        elif e.op == "/":
            if np.any(np.asarray(b) == 0.0):
                raise DomainError("division by zero", _first_bad(np.broadcast_to(np.asarray(b) == 0.0, np.broadcast(a, b).shape), point))
            r = a / b
        else:
            r = np.power(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else _scalar_pow(a, b, point)
        return _checked(r, point, f"result of {e.op!r}")
    if isinstance(e, Call):
        args = [_eval(a, point) for a in e.args]
        return _call(e.name, args, point)
    raise TypeError(f"not an expression node: {e!r}")


def _scalar_pow(a, b, point):
    try:
        r = math.pow(a, b)
    except (ValueError, OverflowError, ZeroDivisionError):
        raise DomainError(f"{a}^{b} is undefined", dict(point)) from None
    return r


def _call(name, args, point):
    x = args[0]
    if name == "sqrt":
        if np.any(np.asarray(x) < 0):
            raise DomainError("sqrt of a negative number", _first_bad(np.asarray(x) < 0, point))
        r = np.sqrt(x)
    elif name == "log":
        if np.any(np.asarray(x) <= 0):
            raise DomainError("log of a non-positive number", _first_bad(np.asarray(x) <= 0, point))
        r = np.log(x)
    elif name == "min":
        r = np.minimum(x, args[1])
    elif name == "max":
        r = np.maximum(x, args[1])
    else:
        r = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}[name](x)
    if isinstance(r, np.ndarray) and r.ndim == 0:
        r = float(r)
    elif isinstance(r, np.floating):
        r = float(r)
    return _checked(r, point, f"{name}(...)")


def compile_field(text: str, dim: int):
    """Parse ``text`` and return ``f(points)`` evaluating it on arrays of shape ``(..., dim)``.

    Spatial variables are x (and y in 2D); ``z`` stays unbound unless passed
    explicitly through the second argument.
    """
    e = parse(text)
    names = VARIABLES[:dim]
    extra = variables(e) - set(names) - {"z"}
    if extra:
        raise ParseError(f"variable(s) {sorted(extra)} not available in {dim}D", 0)

    def field(points, z=None):
        points = np.asarray(points, dtype=float)
        env = {n: points[..., k] for k, n in enumerate(names)}
        if z is not None:
            env["z"] = z
        out = evaluate(e, env)
        return np.broadcast_to(np.asarray(out, dtype=float), points.shape[:-1]).copy()

    field.expr = e
    field.text = text
    return field
