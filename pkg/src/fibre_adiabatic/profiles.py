"""Smooth scalar profiles with exact first and second derivatives.

A profile is a small arithmetic expression in one variable, e.g.
``"0.25 + 0.1*cos(x)"`` or ``"2*pi*exp(0.1*sin(x))"``.  Expressions are
parsed with :mod:`ast` and evaluated as second-order jets, so derivatives are
exact up to rounding and never finite-differenced.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Jet = tuple[np.ndarray, np.ndarray, np.ndarray]

_CONSTANTS = {"pi": math.pi, "e": math.e}


class ProfileSyntaxError(ValueError):
    """Malformed profile expression; carries the offending column and token."""

    def __init__(self, source: str, column: int, token: str, reason: str):
        self.source = source
        self.column = column
        self.token = token
        super().__init__(
            f"cannot parse profile {source!r}: {reason} at column {column} (token {token!r})"
        )


# value, first and second derivative of the outer function at g
_UNARY: dict[str, Callable[[np.ndarray], Jet]] = {
    "cos": lambda g: (np.cos(g), -np.sin(g), -np.cos(g)),
    "sin": lambda g: (np.sin(g), np.cos(g), -np.sin(g)),
    "exp": lambda g: (np.exp(g), np.exp(g), np.exp(g)),
    "log": lambda g: (np.log(g), 1.0 / g, -1.0 / g**2),
    "sqrt": lambda g: (np.sqrt(g), 0.5 / np.sqrt(g), -0.25 / g**1.5),
    "cosh": lambda g: (np.cosh(g), np.sinh(g), np.cosh(g)),
    "sinh": lambda g: (np.sinh(g), np.cosh(g), np.sinh(g)),
}


def _const(c: float, x: np.ndarray) -> Jet:
    z = np.zeros_like(x)
    return z + c, z, z.copy()


def _mul(f: Jet, g: Jet) -> Jet:
    return (
        f[0] * g[0],
        f[1] * g[0] + f[0] * g[1],
        f[2] * g[0] + 2.0 * f[1] * g[1] + f[0] * g[2],
    )


def _reciprocal(g: Jet) -> Jet:
    v, d1, d2 = g
    return 1.0 / v, -d1 / v**2, 2.0 * d1**2 / v**3 - d2 / v**2


def _power(f: Jet, p: float) -> Jet:
    v, d1, d2 = f
    if float(p).is_integer() and p >= 0:
        n = int(p)
        vm1 = v ** (n - 1) if n >= 1 else np.zeros_like(v)
        vm2 = v ** (n - 2) if n >= 2 else np.zeros_like(v)
        return v**n, n * vm1 * d1, n * (n - 1) * vm2 * d1**2 + n * vm1 * d2
    return v**p, p * v ** (p - 1) * d1, p * (p - 1) * v ** (p - 2) * d1**2 + p * v ** (p - 1) * d2


def _compose(name: str, g: Jet) -> Jet:
    f0, f1, f2 = _UNARY[name](g[0])
    return f0, f1 * g[1], f2 * g[1] ** 2 + f1 * g[2]


class _Compiler:
    def __init__(self, source: str, var: str):
        self.source = source
        self.var = var

    def fail(self, node: ast.AST, reason: str):
        col = getattr(node, "col_offset", 0)
        end = getattr(node, "end_col_offset", col + 1) or col + 1
        raise ProfileSyntaxError(self.source, col + 1, self.source[col:end], reason)

    def constant_value(self, node: ast.AST) -> float | None:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self.constant_value(node.operand)
            if inner is not None:
                return -inner if isinstance(node.op, ast.USub) else inner
        return None

    def compile(self, node: ast.AST) -> Callable[[np.ndarray], Jet]:
        if isinstance(node, ast.Expression):
            return self.compile(node.body)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                self.fail(node, "only numeric literals are allowed")
            c = float(node.value)
            return lambda x: _const(c, x)
        if isinstance(node, ast.Name):
            if node.id == self.var:
                return lambda x: (np.array(x, dtype=float), np.ones_like(x), np.zeros_like(x))
            if node.id in _CONSTANTS:
                c = _CONSTANTS[node.id]
                return lambda x: _const(c, x)
            self.fail(node, f"unknown identifier (expected {self.var!r})")
        if isinstance(node, ast.UnaryOp):
            inner = self.compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda x: tuple(-t for t in inner(x))
            if isinstance(node.op, ast.UAdd):
                return inner
            self.fail(node, "unsupported unary operator")
        if isinstance(node, ast.BinOp):
            left = self.compile(node.left)
            if isinstance(node.op, ast.Pow):
                p = self.constant_value(node.right)
                if p is None:
                    self.fail(node.right, "exponent must be a constant")
                return lambda x: _power(left(x), p)
            right = self.compile(node.right)
            if isinstance(node.op, ast.Add):
                return lambda x: tuple(a + b for a, b in zip(left(x), right(x)))
            if isinstance(node.op, ast.Sub):
                return lambda x: tuple(a - b for a, b in zip(left(x), right(x)))
            if isinstance(node.op, ast.Mult):
                return lambda x: _mul(left(x), right(x))
            if isinstance(node.op, ast.Div):
                return lambda x: _mul(left(x), _reciprocal(right(x)))
            self.fail(node, "unsupported binary operator")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _UNARY:
                self.fail(node.func, "unknown function")
            if len(node.args) != 1 or node.keywords:
                self.fail(node, "functions take exactly one argument")
            name = node.func.id
            arg = self.compile(node.args[0])
            return lambda x: _compose(name, arg(x))
        self.fail(node, "unsupported syntax")


def _parse(source: str, var: str) -> tuple[str, Callable[[np.ndarray], Jet]]:
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        col = exc.offset or 1
        text = source.strip()
        token = text[col - 1 : col] if 0 < col <= len(text) else "<end>"
        raise ProfileSyntaxError(source, col, token, exc.msg) from None
    fn = _Compiler(source.strip(), var).compile(tree)
    return ast.unparse(tree), fn


@dataclass(frozen=True)
class Profile:
    """Parsed expression ``source`` in the variable ``var``."""

    source: str
    var: str = "x"
    canonical: str = field(init=False, repr=False, compare=False)
    _fn: Callable[[np.ndarray], Jet] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        canonical, fn = _parse(self.source, self.var)
        object.__setattr__(self, "canonical", canonical)
        object.__setattr__(self, "_fn", fn)

    @classmethod
    def constant(cls, c: float, var: str = "x") -> Profile:
        return cls(repr(float(c)), var)

    def jet(self, x) -> Jet:
        """Value, first and second derivative at ``x``."""
        x = np.asarray(x, dtype=float)
        v, d1, d2 = self._fn(x)
        shape = x.shape
        return (
            np.broadcast_to(v, shape).astype(float),
            np.broadcast_to(d1, shape).astype(float),
            np.broadcast_to(d2, shape).astype(float),
        )

    def __call__(self, x) -> np.ndarray:
        return self.jet(x)[0]

    def derivative(self, x, order: int = 1) -> np.ndarray:
        if order not in (0, 1, 2):
            raise ValueError("only derivatives of order 0, 1, 2 are available")
        return self.jet(x)[order]

    def is_constant(self, samples: np.ndarray) -> bool:
        _, d1, d2 = self.jet(samples)
        return bool(np.all(d1 == 0.0) and np.all(d2 == 0.0))

    def __str__(self) -> str:
        return self.canonical


def as_profile(value, var: str = "x") -> Profile:
    if isinstance(value, Profile):
        return value
    if isinstance(value, (int, float)):
        return Profile.constant(value, var)
    return Profile(str(value), var)
