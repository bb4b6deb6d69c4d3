"""
Factor formula language.

Formulas combine `$field` references, numeric literals, + - * / and a closed
set of time-series operators (Ref, Mean, Std, Sum, Corr, Rsquare, Resi, Less,
Greater, Abs, Log). Parsing builds an immutable AST; evaluation walks it over
a panel with per-instrument time-series semantics.

Windowed operators need w complete, NaN-free observations ending at t.
Every node result is finite-or-NaN: non-finite values (division by zero,
log of non-positive) become NaN as soon as they appear.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ArityError, FieldNotFound, FormulaSyntaxError, InvalidWindow, UnknownOp
from .panel import FactorValues

logger = logging.getLogger(__name__)

# rows * T * w elements materialized per chunk of a rolling computation
_CHUNK_ELEMENTS = 2_000_000


# -- AST ------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldRef:
    name: str


@dataclass(frozen=True)
class NumLit:
    value: float


@dataclass(frozen=True)
class UnaryOp:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[FieldRef, NumLit, UnaryOp, BinOp, Call]


@dataclass(frozen=True)
class FactorExpr:
    ast: Node
    text: str = field(default="", compare=False)

    def __str__(self):
        return to_formula(self)


# -- operator table ---------------------------------------------------------------


def _shift(x, d):
    out = np.full_like(x, np.nan)
    if d < x.shape[1]:
        out[:, d:] = x[:, :-d]
    return out


def _rolling(arrays, w, reducer):
    """Apply `reducer` to trailing windows of one or more N x T arrays."""
    n, t = arrays[0].shape
    out = np.full((n, t), np.nan)
    if w > t:
        return out
    step = max(1, _CHUNK_ELEMENTS // max(1, t * w))
    for lo in range(0, n, step):
        windows = [sliding_window_view(a[lo : lo + step], w, axis=1) for a in arrays]
        out[lo : lo + step, w - 1 :] = reducer(*windows)
    return out


def _constant(windows):
    return np.ptp(windows, axis=-1) == 0


def _mean(x, w):
    return _rolling([x], w, lambda a: a.mean(axis=-1))


def _sum(x, w):
    return _rolling([x], w, lambda a: a.sum(axis=-1))


def _std(x, w):
    return _rolling([x], w, lambda a: a.std(axis=-1))


def _corr_windows(a, b):
    da = a - a.mean(axis=-1, keepdims=True)
    db = b - b.mean(axis=-1, keepdims=True)
    r = (da * db).sum(axis=-1) / np.sqrt((da * da).sum(axis=-1) * (db * db).sum(axis=-1))
    r[_constant(a) | _constant(b)] = np.nan
    return r


def _corr(x, y, w):
    return _rolling([x, y], w, _corr_windows)


def _time_regression(a):
    """Slope terms of each window regressed on time index 0..w-1."""
    w = a.shape[-1]
    tc = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
    da = a - a.mean(axis=-1, keepdims=True)
    sxy = (da * tc).sum(axis=-1)
    stt = (tc * tc).sum()
    return da, tc, sxy, stt


def _rsquare_windows(a):
    da, _, sxy, stt = _time_regression(a)
    r2 = sxy * sxy / (stt * (da * da).sum(axis=-1))
    r2[_constant(a)] = np.nan
    return r2


def _resi_windows(a):
    da, tc, sxy, stt = _time_regression(a)
    return da[..., -1] - (sxy / stt) * tc[-1]


def _rsquare(x, w):
    return _rolling([x], w, _rsquare_windows)


def _resi(x, w):
    return _rolling([x], w, _resi_windows)


def _log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), np.nan)


@dataclass(frozen=True)
class OperatorSpec:
    arity: int
    func: Callable
    window_arg: Optional[int] = None


# Rsquare/Resi regress the window on its time index; swap the entries here to
# change that reading.
OPERATORS = {
    "Ref": OperatorSpec(2, _shift, window_arg=1),
    "Mean": OperatorSpec(2, _mean, window_arg=1),
    "Std": OperatorSpec(2, _std, window_arg=1),
    "Sum": OperatorSpec(2, _sum, window_arg=1),
    "Corr": OperatorSpec(3, _corr, window_arg=2),
    "Rsquare": OperatorSpec(2, _rsquare, window_arg=1),
    "Resi": OperatorSpec(2, _resi, window_arg=1),
    "Less": OperatorSpec(2, np.minimum),
    "Greater": OperatorSpec(2, np.maximum),
    "Abs": OperatorSpec(1, np.abs),
    "Log": OperatorSpec(1, _log),
}

BINARY_OPS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
}

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


# -- parsing --------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
    |(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
    |(?P<field>\$[A-Za-z_][A-Za-z0-9_]*)
    |(?P<name>[A-Za-z_][A-Za-z0-9_]*)
    |(?P<punct>[-+*/(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _byte_offset(text, position):
    return len(text[:position].encode("utf-8"))


def _tokenize(text):
    tokens = []
    position = 0
    while position < len(text):
        match = _TOKEN.match(text, position)
        if not match:
            raise FormulaSyntaxError(
                f"unexpected character {text[position]!r}", _byte_offset(text, position)
            )
        if match.lastgroup != "ws":
            tokens.append(_Token(match.lastgroup, match.group(), _byte_offset(text, position)))
        position = match.end()
    tokens.append(_Token("eof", "", _byte_offset(text, len(text))))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        token = self.tokens[self.i]
        self.i += 1
        return token

    def expect(self, text):
        token = self.advance()
        if token.text != text:
            found = repr(token.text) if token.kind != "eof" else "end of formula"
            raise FormulaSyntaxError(f"expected {text!r}, found {found}", token.offset)
        return token

    def parse(self):
        node = self.expression()
        token = self.peek()
        if token.kind != "eof":
            raise FormulaSyntaxError(f"unexpected {token.text!r}", token.offset)
        return node

    def expression(self):
        node = self.term()
        while self.peek().text in ("+", "-") and self.peek().kind == "punct":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek().text in ("*", "/") and self.peek().kind == "punct":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek().kind == "punct" and self.peek().text == "-":
            self.advance()
            return UnaryOp(self.unary())
        return self.primary()

    def primary(self):
        token = self.advance()
        if token.kind == "number":
            return NumLit(float(token.text))
        if token.kind == "field":
            return FieldRef(token.text[1:])
        if token.kind == "name":
            return self.call(token)
        if token.text == "(":
            node = self.expression()
            self.expect(")")
            return node
        found = repr(token.text) if token.kind != "eof" else "end of formula"
        raise FormulaSyntaxError(f"unexpected {found}", token.offset)

    def call(self, name_token):
        name = name_token.text
        if self.peek().text != "(":
            raise FormulaSyntaxError(f"expected '(' after {name!r}", self.peek().offset)
        spec = OPERATORS.get(name)
        if spec is None:
            raise UnknownOp(name)
        self.expect("(")
        args = []
        if self.peek().text != ")":
            args.append(self.expression())
            while self.peek().text == ",":
                self.advance()
                args.append(self.expression())
        self.expect(")")
        if len(args) != spec.arity:
            raise ArityError(name, spec.arity, len(args))
        if spec.window_arg is not None:
            window = args[spec.window_arg]
            if not (
                isinstance(window, NumLit) and window.value.is_integer() and window.value >= 1
            ):
                raise InvalidWindow(f"{name} needs a positive integer literal window")
        return Call(name, tuple(args))


def parse(text):
    return FactorExpr(_Parser(text).parse(), text)


# -- printing / inspection ---------------------------------------------------------


def _format_number(value):
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _precedence(node):
    if isinstance(node, BinOp):
        return _PRECEDENCE[node.op]
    if isinstance(node, UnaryOp):
        return 3
    return 4


def _render(node):
    if isinstance(node, NumLit):
        return _format_number(node.value)
    if isinstance(node, FieldRef):
        return "$" + node.name
    if isinstance(node, Call):
        return f"{node.name}({', '.join(_render(a) for a in node.args)})"
    if isinstance(node, UnaryOp):
        inner = _render(node.operand)
        return "-" + (f"({inner})" if _precedence(node.operand) < 3 else inner)
    p = _PRECEDENCE[node.op]
    left = _render(node.left)
    right = _render(node.right)
    if _precedence(node.left) < p:
        left = f"({left})"
    if _precedence(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def to_formula(expr):
    node = expr.ast if isinstance(expr, FactorExpr) else expr
    return _render(node)


def _children(node):
    if isinstance(node, UnaryOp):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    return ()


def expr_depth(expr):
    node = expr.ast if isinstance(expr, FactorExpr) else expr
    children = _children(node)
    return 1 + max((expr_depth(c) for c in children), default=0)


def referenced_fields(expr):
    node = expr.ast if isinstance(expr, FactorExpr) else expr
    if isinstance(node, FieldRef):
        return {node.name}
    found = set()
    for child in _children(node):
        found |= referenced_fields(child)
    return found


def longest_window(expr):
    """Largest window literal of any rolling operator in the formula, 0 if none."""
    node = expr.ast if isinstance(expr, FactorExpr) else expr
    own = 0
    if isinstance(node, Call):
        spec = OPERATORS[node.name]
        if spec.window_arg is not None:
            own = int(node.args[spec.window_arg].value)
    return max([own] + [longest_window(c) for c in _children(node)])


# -- evaluation -----------------------------------------------------------------------


def _finite_or_nan(values):
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        values = np.where(np.isfinite(values), values, np.nan)
    return values


class _Evaluator:
    def __init__(self, panel):
        self.panel = panel
        self.shape = panel.values.shape[:2]

    def visit(self, node):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return _finite_or_nan(self._visit(node))

    def _visit(self, node):
        if isinstance(node, NumLit):
            return np.full(self.shape, node.value)
        if isinstance(node, FieldRef):
            return np.array(self.panel.field(node.name))
        if isinstance(node, UnaryOp):
            return -self.visit(node.operand)
        if isinstance(node, BinOp):
            return BINARY_OPS[node.op](self.visit(node.left), self.visit(node.right))
        spec = OPERATORS[node.name]
        if spec.window_arg is None:
            return spec.func(*(self.visit(a) for a in node.args))
        series = [self.visit(a) for i, a in enumerate(node.args) if i != spec.window_arg]
        window = int(node.args[spec.window_arg].value)
        return spec.func(*series, window)


def evaluate(expr, panel, name="", max_window=None):
    for field_name in referenced_fields(expr):
        if not panel.has_field(field_name):
            raise FieldNotFound(field_name)
    if max_window is not None and longest_window(expr) > max_window:
        raise InvalidWindow(
            f"window {longest_window(expr)} exceeds the {max_window}-day lookback limit"
        )
    node = expr.ast if isinstance(expr, FactorExpr) else expr
    values = _Evaluator(panel).visit(node)
    return FactorValues(panel.instruments, panel.dates, values, name)
