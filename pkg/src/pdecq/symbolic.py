"""Polynomial differential expressions in a field and its spatial derivatives.

An expression is a finite sum of monomials over jet variables ``u``, ``u_x``,
``u_xx``, ... (and ``v``, ``v_x``, ... for systems).  Coefficients are kept as
exact :class:`fractions.Fraction` values; floats only appear at evaluation.

A jet variable is identified by a ``(field, order)`` pair, so ``u_xx`` is
``(0, 2)`` and ``v_x`` is ``(1, 1)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_FIELDS",
    "MAX_ORDER",
    "DimensionError",
    "ParseError",
    "Monomial",
    "DiffExpr",
    "var",
    "const",
    "parse",
    "partial",
    "total_x_derivative",
    "nth_total_derivative",
    "evaluate",
    "is_total_derivative",
]

DEFAULT_FIELDS = ("u", "v", "w")
MAX_ORDER = 8

Powers = tuple  # tuple of ((field, order), exponent), sorted by key


class DimensionError(ValueError):
    """Raised when a jet does not carry enough derivative orders."""


class ParseError(ValueError):
    """Raised on malformed expression text; ``position`` is the 0-based offset."""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        pointer = ""
        if text:
            pointer = "\n  " + text + "\n  " + " " * position + "^"
        super().__init__(f"{message} at position {position}{pointer}")


def _coerce(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, (float, np.floating)):
        return Fraction(float(value)).limit_denominator(10**12)
    if isinstance(value, str):
        return Fraction(value)
    raise TypeError(f"cannot use {type(value).__name__} as a coefficient")


@dataclass(frozen=True)
class Monomial:
    """``coefficient * prod(jet[key] ** exp for key, exp in powers)``."""

    coefficient: Fraction
    powers: Powers

    def degree(self) -> int:
        return sum(e for _, e in self.powers)

    def derivative_count(self) -> int:
        """Total number of x-derivatives, counted with multiplicity."""
        return sum(order * e for (_, order), e in self.powers)

    def max_order(self) -> int:
        return max((order for (_, order), _ in self.powers), default=-1)


def _mul_powers(a: Powers, b: Powers) -> Powers:
    if not a:
        return b
    if not b:
        return a
    merged = dict(a)
    for key, e in b:
        merged[key] = merged.get(key, 0) + e
    return tuple(sorted(merged.items()))


def _sort_key(powers: Powers):
    degree = sum(e for _, e in powers)
    return (degree, tuple((f, o, e) for (f, o), e in powers))


class DiffExpr:
    """Immutable polynomial in jet variables with rational coefficients.

    Terms with identical power maps are merged and zero coefficients dropped on
    construction, so two equal polynomials always compare equal.
    """

    __slots__ = ("_terms", "_hash")

    def __init__(self, terms: Mapping[Powers, object] | Iterable[tuple[Powers, object]] = ()):
        acc: dict[Powers, Fraction] = {}
        items = terms.items() if isinstance(terms, Mapping) else terms
        for powers, coeff in items:
            merged: dict = {}
            for k, e in powers:
                merged[tuple(k)] = merged.get(tuple(k), 0) + int(e)
            powers = tuple(sorted((k, e) for k, e in merged.items() if e != 0))
            for (_, order), e in powers:
                if e < 0 or order < 0:
                    raise ValueError("exponents and derivative orders must be non-negative")
            acc[powers] = acc.get(powers, Fraction(0)) + _coerce(coeff)
        self._terms = {p: c for p, c in sorted(acc.items(), key=lambda kv: _sort_key(kv[0])) if c != 0}
        self._hash = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_monomials(cls, monomials: Iterable[Monomial]) -> "DiffExpr":
        return cls((m.powers, m.coefficient) for m in monomials)

    @property
    def terms(self) -> list[Monomial]:
        return [Monomial(c, p) for p, c in self._terms.items()]

    def items(self):
        return self._terms.items()

    def canonicalize(self) -> "DiffExpr":
        return DiffExpr(self._terms)

    # -- inspection -----------------------------------------------------------

    def is_zero(self) -> bool:
        return not self._terms

    def max_order(self, field: int | None = None) -> int:
        """Largest derivative order present (``-1`` for constants/zero)."""
        orders = [
            o for p in self._terms for (f, o), _ in p if field is None or f == field
        ]
        return max(orders, default=-1)

    def fields(self) -> set[int]:
        return {f for p in self._terms for (f, _), _ in p}

    def degree(self) -> int:
        return max((sum(e for _, e in p) for p in self._terms), default=0)

    def coefficient(self, powers: Powers) -> Fraction:
        return self._terms.get(tuple(sorted(powers)), Fraction(0))

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _as_expr(other)
        if other is NotImplemented:
            return other
        return DiffExpr(list(self._terms.items()) + list(other._terms.items()))

    __radd__ = __add__

    def __neg__(self):
        return DiffExpr({p: -c for p, c in self._terms.items()})

    def __sub__(self, other):
        other = _as_expr(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = _as_expr(other)
        if other is NotImplemented:
            return other
        out: list[tuple[Powers, Fraction]] = []
        for pa, ca in self._terms.items():
            for pb, cb in other._terms.items():
                out.append((_mul_powers(pa, pb), ca * cb))
        return DiffExpr(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (Fraction(1) / _coerce(other))

    def __pow__(self, n: int):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        result = const(1)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def __eq__(self, other):
        other = _as_expr(other)
        if other is NotImplemented:
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(tuple(self._terms.items()))
        return self._hash

    def __repr__(self):
        return f"DiffExpr({self.to_string()!r})"

    def __str__(self):
        return self.to_string()

    # -- printing -------------------------------------------------------------

    def to_string(self, fields: Sequence[str] = DEFAULT_FIELDS) -> str:
        if not self._terms:
            return "0"
        parts = []
        for i, (powers, coeff) in enumerate(reversed(list(self._terms.items()))):
            sign = "-" if coeff < 0 else "+"
            mag = abs(coeff)
            factors = [_var_name(k, fields) + (f"^{e}" if e > 1 else "") for k, e in reversed(powers)]
            if not factors:
                body = _frac_str(mag)
            elif mag == 1:
                body = "*".join(factors)
            else:
                body = _frac_str(mag) + "*" + "*".join(factors)
            if i == 0:
                parts.append(("-" if sign == "-" else "") + body)
            else:
                parts.append(f" {sign} {body}")
        return "".join(parts)


def _frac_str(f: Fraction) -> str:
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def _var_name(key, fields: Sequence[str] = DEFAULT_FIELDS) -> str:
    field, order = key
    name = fields[field] if field < len(fields) else f"u{field}"
    if order == 0:
        return name
    if order <= 3:
        return f"{name}_{'x' * order}"
    return f"{name}_{order}x"


def _as_expr(value):
    if isinstance(value, DiffExpr):
        return value
    try:
        return const(value)
    except TypeError:
        return NotImplemented


def var(order: int = 0, field: int = 0, power: int = 1) -> DiffExpr:
    """Single jet variable ``u_{order x}`` of ``field`` raised to ``power``."""
    return DiffExpr({(((field, order), power),): 1})


def const(value) -> DiffExpr:
    return DiffExpr({(): _coerce(value)})


# -- calculus -----------------------------------------------------------------


def partial(expr: DiffExpr, n: int, field: int = 0) -> DiffExpr:
    """Partial derivative with respect to the jet variable ``u_{nx}``."""
    key = (field, n)
    out = []
    for powers, coeff in expr.items():
        d = dict(powers)
        e = d.get(key, 0)
        if e == 0:
            continue
        if e == 1:
            del d[key]
        else:
            d[key] = e - 1
        out.append((tuple(d.items()), coeff * e))
    return DiffExpr(out)


def total_x_derivative(expr: DiffExpr) -> DiffExpr:
    """d/dx by the chain rule: every ``u_{nx}`` factor yields ``u_{(n+1)x}``."""
    out = []
    for powers, coeff in expr.items():
        for idx, ((field, order), e) in enumerate(powers):
            d = dict(powers)
            if e == 1:
                del d[(field, order)]
            else:
                d[(field, order)] = e - 1
            nxt = (field, order + 1)
            d[nxt] = d.get(nxt, 0) + 1
            out.append((tuple(d.items()), coeff * e))
    return DiffExpr(out)


def nth_total_derivative(expr: DiffExpr, n: int) -> DiffExpr:
    if n < 0:
        raise ValueError("n must be non-negative")
    for _ in range(n):
        expr = total_x_derivative(expr)
    return expr


def is_total_derivative(expr: DiffExpr, antiderivative: DiffExpr) -> bool:
    return total_x_derivative(antiderivative) == expr


# -- evaluation ---------------------------------------------------------------


def evaluate(expr: DiffExpr, jet, dtype=np.float64):
    """Evaluate ``expr`` pointwise.

    ``jet`` is either an array-like whose last axis indexes derivative order
    (single field) or a mapping / list of ``np.ndarray`` indexed by field.
    Leading axes broadcast, so a ``(P, N, order+1)`` ensemble evaluates in one
    call.
    """
    if isinstance(jet, Mapping):
        jets = dict(jet)
    elif isinstance(jet, (list, tuple)) and jet and all(isinstance(a, np.ndarray) for a in jet):
        jets = dict(enumerate(jet))
    else:
        jets = {0: jet}
    jets = {f: np.asarray(a, dtype=dtype) for f, a in jets.items()}
    for field in expr.fields():
        if field not in jets:
            raise DimensionError(f"no jet supplied for field {field}")
        need = expr.max_order(field)
        have = jets[field].shape[-1]
        if have <= need:
            raise DimensionError(
                f"jet for field {field} has {have} orders, expression needs {need + 1}"
            )
    shape = np.broadcast_shapes(*(a.shape[:-1] for a in jets.values()))
    total = np.zeros(shape, dtype=dtype)
    cache: dict = {}
    for powers, coeff in expr.items():
        term = np.full(shape, float(coeff), dtype=dtype)
        for key, e in powers:
            pk = (key, e)
            if pk not in cache:
                base = jets[key[0]][..., key[1]]
                cache[pk] = base if e == 1 else base**e
            term = term * cache[pk]
        total = total + term
    if total.ndim == 0:
        return float(total)
    return total


# -- parsing ------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z][A-Za-z0-9]*(?:_(?:\d+x|x+))?)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ParseError(f"unexpected character {text[start]!r}", start, text)
        kind = m.lastgroup
        start = m.start(kind)
        value = m.group(kind)
        if value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, fields: Sequence[str]):
        self.text = text
        self.fields = list(fields)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        raise ParseError(message, tok[2], self.text)

    def parse(self) -> DiffExpr:
        if self.peek()[0] == "end":
            self.error("empty expression")
        expr = self.expr()
        if self.peek()[0] != "end":
            self.error(f"unexpected token {self.peek()[1]!r}")
        return expr

    def expr(self) -> DiffExpr:
        sign = 1
        if self.peek()[1] in "+-" and self.peek()[0] == "op":
            sign = -1 if self.take()[1] == "-" else 1
        result = self.term() * sign
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            rhs = self.term()
            result = result + rhs if op == "+" else result - rhs
        return result

    def term(self) -> DiffExpr:
        result = self.power()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()
            rhs = self.power()
            if op[1] == "*":
                result = result * rhs
            else:
                if rhs.max_order() >= 0 or rhs.is_zero():
                    self.error("division only by non-zero numeric literals", op)
                result = result / rhs.coefficient(())
        return result

    def power(self) -> DiffExpr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            tok = self.peek()
            if tok[0] != "num" or not tok[1].isdigit():
                self.error("exponent must be a non-negative integer literal")
            self.take()
            base = base ** int(tok[1])
        return base

    def atom(self) -> DiffExpr:
        tok = self.take()
        kind, value, pos = tok
        if kind == "num":
            return const(Fraction(value))
        if kind == "name":
            return self.variable(value, tok)
        if kind == "op" and value == "(":
            inner = self.expr()
            if self.peek()[1] != ")":
                self.error("expected ')'")
            self.take()
            return inner
        if kind == "op" and value == "-":
            return -self.power()
        self.error("expected a number, variable or '('" if kind != "end" else "unexpected end of input", tok)

    def variable(self, name: str, tok) -> DiffExpr:
        base, _, suffix = name.partition("_")
        if base not in self.fields:
            self.error(f"unknown field {base!r}", tok)
        field = self.fields.index(base)
        if not suffix:
            order = 0
        elif set(suffix) == {"x"}:
            order = len(suffix)
        elif suffix.endswith("x") and suffix[:-1].isdigit():
            order = int(suffix[:-1])
        else:
            self.error(f"malformed derivative {name!r}", tok)
        return var(order, field)


def parse(text: str, fields: Sequence[str] = DEFAULT_FIELDS) -> DiffExpr:
    """Parse ``u_x^2*u - 1/2*u_xx^2`` style text into a :class:`DiffExpr`.

    Parentheses and integer powers of sums are expanded, so ``(u_x+u_xxx)^3``
    is accepted.
    """
    return _Parser(text, fields).parse()
