"""Scalar expression trees with forward-mode automatic differentiation.

Expressions are written in a small fixed grammar over the position variables
``x1..x9`` and velocity variables ``v1..v9``::

    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := "-" factor | base ("^" number)?
    base   := number | ident | "(" expr ")" | func base
    func   := "sin" | "cos" | "exp" | "log" | "sqrt"

Exponents must be numeric constants.  Unary minus binds looser than "^"
(``-x1^2`` is ``-(x1^2)``), function application binds tighter
(``sin(x1)^2`` is ``(sin x1)^2``).

Evaluation works over plain floats or over :class:`Dual` scalars, which carry
directional derivatives up to third order and may be nested (a dual whose
coefficients are themselves duals), giving exact higher derivatives of any
composite numerical routine built on them.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Dual",
    "DualScalar",
    "ExprError",
    "ParseError",
    "EvalDomainError",
    "parse",
    "to_source",
    "variables_of",
    "evaluate",
    "eval_dual",
    "val_of",
    "const",
    "var",
    "add",
    "sub",
    "mul",
    "neg",
    "powc",
]


class ExprError(Exception):
    """Base class for expression-layer failures."""


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class EvalDomainError(ExprError):
    """Raised when evaluation leaves a function's domain (log/sqrt/division)."""

    def __init__(self, message: str, node: "ExprNode"):
        super().__init__(f"{message} in subexpression '{to_source(node)}'")
        self.node = node


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    # 0..n-1 are x1..xn, n..2n-1 are v1..vn for the declared dimension n
    index: int


@dataclass(frozen=True)
class Unary:
    op: str  # neg, sin, cos, exp, log, sqrt
    arg: "ExprNode"


@dataclass(frozen=True)
class Binary:
    op: str  # add, sub, mul, div, pow (right child of pow is Const)
    left: "ExprNode"
    right: "ExprNode"


ExprNode = Const | Var | Unary | Binary

_FUNCS = ("sin", "cos", "exp", "log", "sqrt")


def const(value: float) -> Const:
    return Const(float(value))


def var(index: int) -> Var:
    return Var(index)


def add(a: ExprNode, b: ExprNode) -> Binary:
    return Binary("add", a, b)


def sub(a: ExprNode, b: ExprNode) -> Binary:
    return Binary("sub", a, b)


def mul(a: ExprNode, b: ExprNode) -> Binary:
    return Binary("mul", a, b)


def neg(a: ExprNode) -> Unary:
    return Unary("neg", a)


def powc(a: ExprNode, exponent: float) -> Binary:
    return Binary("pow", a, Const(float(exponent)))


def variables_of(node: ExprNode) -> set[int]:
    """Set of variable indices appearing in the tree."""
    out: set[int] = set()
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Var):
            out.add(cur.index)
        elif isinstance(cur, Unary):
            stack.append(cur.arg)
        elif isinstance(cur, Binary):
            stack.append(cur.left)
            stack.append(cur.right)
    return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)
_VAR_RE = re.compile(r"^([xv])([1-9])$")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", len(source) - len(stripped))
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, dimension: int):
        self.tokens = _tokenize(source)
        self.pos = 0
        self.n = dimension

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, text, off = self.peek()
        if kind != "op" or text != op:
            raise ParseError(f"expected {op!r}", off)
        self.advance()

    def parse(self) -> ExprNode:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {text!r}", off)
        return node

    def expr(self) -> ExprNode:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                rhs = self.term()
                node = Binary("add" if text == "+" else "sub", node, rhs)
            else:
                return node

    def term(self) -> ExprNode:
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                rhs = self.factor()
                node = Binary("mul" if text == "*" else "div", node, rhs)
            else:
                return node

    def factor(self) -> ExprNode:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Unary("neg", self.factor())
        node = self.base()
        kind, text, off = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            node = Binary("pow", node, self.exponent())
        return node

    def exponent(self) -> Const:
        sign = 1.0
        kind, text, off = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            sign = -1.0
            kind, text, off = self.peek()
        if kind != "num":
            raise ParseError("exponent must be a numeric constant", off)
        self.advance()
        return Const(sign * float(text))

    def base(self) -> ExprNode:
        kind, text, off = self.advance()
        if kind == "num":
            return Const(float(text))
        if kind == "ident":
            if text in _FUNCS:
                return Unary(text, self.base())
            m = _VAR_RE.match(text)
            if m is None:
                raise ParseError(f"unknown identifier {text!r}", off)
            idx = int(m.group(2))
            if idx > self.n:
                raise ParseError(
                    f"variable {text!r} out of range for dimension {self.n}", off
                )
            return Var(idx - 1 if m.group(1) == "x" else self.n + idx - 1)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {text!r}", off)


def parse(source: str, dimension: int) -> ExprNode:
    """Parse ``source`` into an expression tree over 2*dimension variables."""
    if not 1 <= dimension <= 9:
        raise ValueError("dimension must be between 1 and 9")
    return _Parser(source, dimension).parse()


def to_source(node: ExprNode) -> str:
    """Render a tree back to parseable text (fully parenthesized)."""
    if isinstance(node, Const):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Var):
        # printing does not know the dimension; use the convention that
        # indices below 9 are positions.  Parsing output requires the same
        # dimension the tree was built with, which callers track anyway.
        return f"__{node.index}__"
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{to_source(node.arg)})"
        return f"{node.op}({to_source(node.arg)})"
    if node.op == "pow":
        return f"({to_source(node.left)})^{node.right.value!r}"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
    return f"({to_source(node.left)} {sym} {to_source(node.right)})"


def to_source_dim(node: ExprNode, dimension: int) -> str:
    """Render with x1../v1.. names for a known dimension."""
    if isinstance(node, Var):
        if node.index < dimension:
            return f"x{node.index + 1}"
        return f"v{node.index - dimension + 1}"
    if isinstance(node, Const):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Unary):
        inner = to_source_dim(node.arg, dimension)
        return f"(-{inner})" if node.op == "neg" else f"{node.op}({inner})"
    if node.op == "pow":
        return f"({to_source_dim(node.left, dimension)})^{node.right.value!r}"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
    return f"({to_source_dim(node.left, dimension)} {sym} {to_source_dim(node.right, dimension)})"


# ---------------------------------------------------------------------------
# Dual scalars
# ---------------------------------------------------------------------------

def val_of(x) -> float:
    """Unwrap (possibly nested) duals down to the underlying float value."""
    while isinstance(x, Dual):
        x = x.val
    return float(x)


class Dual:
    """Truncated Taylor scalar: value plus derivatives in ``m`` directions.

    ``grad`` is a list of length m, ``hess`` an m x m list of lists (orders
    >= 2) and ``third`` an m^3 nested list (order 3).  Coefficients may be
    floats or further ``Dual`` instances; ``tag`` separates nesting levels so
    that duals from different levels never silently combine.
    """

    __slots__ = ("m", "order", "tag", "val", "grad", "hess", "third")

    def __init__(self, m, order, tag, val, grad, hess=None, third=None):
        self.m = m
        self.order = order
        self.tag = tag
        self.val = val
        self.grad = grad
        self.hess = hess
        self.third = third

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(value, m, order=1, tag=0) -> "Dual":
        g = [0.0] * m
        h = [[0.0] * m for _ in range(m)] if order >= 2 else None
        t = (
            [[[0.0] * m for _ in range(m)] for _ in range(m)]
            if order >= 3
            else None
        )
        return Dual(m, order, tag, value, g, h, t)

    @staticmethod
    def seed(value, m, direction, order=1, tag=0) -> "Dual":
        d = Dual.constant(value, m, order, tag)
        d.grad[direction] = 1.0
        return d

    # -- helpers -----------------------------------------------------------

    def _like(self, val, grad, hess, third) -> "Dual":
        return Dual(self.m, self.order, self.tag, val, grad, hess, third)

    def _check(self, other: "Dual"):
        if self.m != other.m or self.tag != other.tag:
            raise ValueError("dual arithmetic across incompatible contexts")

    def __repr__(self):
        return f"Dual(val={self.val!r}, grad={self.grad!r})"

    # -- ring operations ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            self._check(other)
            m = self.m
            g = [self.grad[i] + other.grad[i] for i in range(m)]
            h = t = None
            if self.order >= 2:
                h = [
                    [self.hess[i][j] + other.hess[i][j] for j in range(m)]
                    for i in range(m)
                ]
            if self.order >= 3:
                t = [
                    [
                        [self.third[i][j][k] + other.third[i][j][k] for k in range(m)]
                        for j in range(m)
                    ]
                    for i in range(m)
                ]
            return self._like(self.val + other.val, g, h, t)
        return self._like(self.val + other, list(self.grad), self.hess, self.third)

    __radd__ = __add__

    def __neg__(self):
        m = self.m
        g = [-gi for gi in self.grad]
        h = t = None
        if self.order >= 2:
            h = [[-self.hess[i][j] for j in range(m)] for i in range(m)]
        if self.order >= 3:
            t = [
                [[-self.third[i][j][k] for k in range(m)] for j in range(m)]
                for i in range(m)
            ]
        return self._like(-self.val, g, h, t)

    def __sub__(self, other):
        return self.__add__(-other if isinstance(other, Dual) else -other)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, Dual):
            self._check(other)
            m = self.m
            a0, b0 = self.val, other.val
            a1, b1 = self.grad, other.grad
            g = [a1[i] * b0 + a0 * b1[i] for i in range(m)]
            h = t = None
            if self.order >= 2:
                a2, b2 = self.hess, other.hess
                # cross terms grouped so the result is bit-exactly symmetric
                h = [
                    [
                        a2[i][j] * b0
                        + a0 * b2[i][j]
                        + (a1[i] * b1[j] + a1[j] * b1[i])
                        for j in range(m)
                    ]
                    for i in range(m)
                ]
            if self.order >= 3:
                a3, b3 = self.third, other.third
                t = [
                    [
                        [
                            a3[i][j][k] * b0
                            + a0 * b3[i][j][k]
                            + a2[i][j] * b1[k]
                            + a2[i][k] * b1[j]
                            + a2[j][k] * b1[i]
                            + b2[i][j] * a1[k]
                            + b2[i][k] * a1[j]
                            + b2[j][k] * a1[i]
                            for k in range(m)
                        ]
                        for j in range(m)
                    ]
                    for i in range(m)
                ]
            return self._like(a0 * b0, g, h, t)
        m = self.m
        g = [gi * other for gi in self.grad]
        h = t = None
        if self.order >= 2:
            h = [[self.hess[i][j] * other for j in range(m)] for i in range(m)]
        if self.order >= 3:
            t = [
                [[self.third[i][j][k] * other for k in range(m)] for j in range(m)]
                for i in range(m)
            ]
        return self._like(self.val * other, g, h, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other._reciprocal()
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            raise ValueError("dual exponents are not supported")
        p = float(exponent)
        u = self.val
        f0 = _pow(u, p)
        f1 = 0.0 if p == 0.0 else p * _pow(u, p - 1.0)
        f2 = f3 = None
        if self.order >= 2:
            f2 = 0.0 if p in (0.0, 1.0) else p * (p - 1.0) * _pow(u, p - 2.0)
        if self.order >= 3:
            f3 = (
                0.0
                if p in (0.0, 1.0, 2.0)
                else p * (p - 1.0) * (p - 2.0) * _pow(u, p - 3.0)
            )
        return self._chain(f0, f1, f2, f3)

    # -- chain rule for smooth unary functions ------------------------------

    def _chain(self, f0, f1, f2=None, f3=None) -> "Dual":
        m = self.m
        g1 = self.grad
        g = [f1 * g1[i] for i in range(m)]
        h = t = None
        if self.order >= 2:
            h1 = self.hess
            h = [
                [f1 * h1[i][j] + f2 * (g1[i] * g1[j]) for j in range(m)]
                for i in range(m)
            ]
        if self.order >= 3:
            t1 = self.third
            t = [
                [
                    [
                        f1 * t1[i][j][k]
                        + f2 * (g1[i] * h1[j][k] + g1[j] * h1[i][k] + g1[k] * h1[i][j])
                        + f3 * g1[i] * g1[j] * g1[k]
                        for k in range(m)
                    ]
                    for j in range(m)
                ]
                for i in range(m)
            ]
        return self._like(f0, g, h, t)

    def _reciprocal(self) -> "Dual":
        u = self.val
        if val_of(u) == 0.0:
            raise ZeroDivisionError("division by zero")
        inv = 1.0 / u
        f2 = 2.0 * inv * inv * inv if self.order >= 2 else None
        f3 = -6.0 * inv * inv * inv * inv if self.order >= 3 else None
        return self._chain(inv, -inv * inv, f2, f3)

    def sin(self):
        s, c = _sin(self.val), _cos(self.val)
        return self._chain(s, c, -s if self.order >= 2 else None, -c if self.order >= 3 else None)

    def cos(self):
        s, c = _sin(self.val), _cos(self.val)
        return self._chain(c, -s, -c if self.order >= 2 else None, s if self.order >= 3 else None)

    def exp(self):
        e = _exp(self.val)
        return self._chain(e, e, e if self.order >= 2 else None, e if self.order >= 3 else None)

    def log(self):
        if val_of(self.val) <= 0.0:
            raise ValueError("log of non-positive value")
        u = self.val
        inv = 1.0 / u
        f2 = -inv * inv if self.order >= 2 else None
        f3 = 2.0 * inv * inv * inv if self.order >= 3 else None
        return self._chain(_log(u), inv, f2, f3)

    def sqrt(self):
        if val_of(self.val) < 0.0:
            raise ValueError("sqrt of negative value")
        r = _sqrt(self.val)
        f1 = 0.5 / r
        f2 = -0.25 / (r * r * r) if self.order >= 2 else None
        f3 = 0.375 / (r * r * r * r * r) if self.order >= 3 else None
        return self._chain(r, f1, f2, f3)


def _sin(u):
    return u.sin() if isinstance(u, Dual) else math.sin(u)


def _cos(u):
    return u.cos() if isinstance(u, Dual) else math.cos(u)


def _exp(u):
    return u.exp() if isinstance(u, Dual) else math.exp(u)


def _log(u):
    if isinstance(u, Dual):
        return u.log()
    if u <= 0.0:
        raise ValueError("log of non-positive value")
    return math.log(u)


def _sqrt(u):
    if isinstance(u, Dual):
        return u.sqrt()
    if u < 0.0:
        raise ValueError("sqrt of negative value")
    return math.sqrt(u)


def _pow(u, p):
    if isinstance(u, Dual):
        return u**p
    if u < 0.0 and p != round(p):
        raise ValueError("fractional power of negative base")
    return u**p


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(node: ExprNode, values):
    """Evaluate a tree over a sequence of scalars (floats or duals).

    ``values`` must cover every variable index in the tree.  Domain failures
    (log/sqrt out of range, division by zero, overflow) are reported with the
    offending subexpression.
    """
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return values[node.index]
    try:
        if isinstance(node, Unary):
            u = evaluate(node.arg, values)
            if node.op == "neg":
                return -u
            if node.op == "sin":
                return _sin(u)
            if node.op == "cos":
                return _cos(u)
            if node.op == "exp":
                return _exp(u)
            if node.op == "log":
                return _log(u)
            if node.op == "sqrt":
                return _sqrt(u)
            raise ValueError(f"unknown unary op {node.op!r}")
        a = evaluate(node.left, values)
        if node.op == "pow":
            return _pow(a, node.right.value)
        b = evaluate(node.right, values)
        if node.op == "add":
            return a + b
        if node.op == "sub":
            return a - b
        if node.op == "mul":
            return a * b
        if node.op == "div":
            if isinstance(b, Dual):
                if val_of(b.val) == 0.0:
                    raise ZeroDivisionError("division by zero")
            elif b == 0.0:
                raise ZeroDivisionError("division by zero")
            return a / b
        raise ValueError(f"unknown binary op {node.op!r}")
    except EvalDomainError:
        raise
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise EvalDomainError(str(exc), node) from exc


@dataclass
class DualScalar:
    """Result of a seeded dual evaluation at a plain-float point."""

    value: float
    first: list[float]
    second: list[list[float]] | None = None


def eval_dual(node: ExprNode, point, directions=None, order: int = 1, tag: int = 0):
    """Evaluate with derivatives in the chosen variable directions.

    ``point`` lists all 2n variable values; ``directions`` is an ordered
    subset of variable indices (default: all of them).  ``order`` 1 gives the
    gradient, 2 adds the symmetric Hessian.  Entries of ``point`` may
    themselves be Dual scalars of a different tag, in which case the result
    coefficients nest.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if directions is None:
        directions = list(range(len(point)))
    directions = list(directions)
    m = len(directions)
    pos = {v: i for i, v in enumerate(directions)}
    seeds = []
    for idx, value in enumerate(point):
        if idx in pos:
            seeds.append(Dual.seed(value, m, pos[idx], order, tag))
        else:
            seeds.append(value)
    out = evaluate(node, seeds)
    if not isinstance(out, Dual):
        out = Dual.constant(out, m, order, tag)
    return out


def dual_scalar(node: ExprNode, point, directions=None, order: int = 1) -> DualScalar:
    """Like :func:`eval_dual` but packaged as plain-float DualScalar."""
    d = eval_dual(node, point, directions, order)
    first = [val_of(g) for g in d.grad]
    second = None
    if order >= 2:
        second = [[val_of(h) for h in row] for row in d.hess]
    return DualScalar(val_of(d.val), first, second)
