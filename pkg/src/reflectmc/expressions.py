"""Closed-form coefficient fields over (t, x1..xn) with exact derivatives.

Fields are given as strings in a small arithmetic grammar (identifiers
t, x1..xn; operators + - * / ^; functions sin, cos, exp; numeric literals)
and compiled to vectorized numpy callables.  Keeping fields symbolic means
spatial derivatives needed for the divergence-form rewrite are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy as sp

_ALLOWED_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp}


class ExpressionError(ValueError):
    """Raised when a field expression cannot be parsed or differentiated."""


def _symbols(dim: int):
    return (sp.Symbol("t"),) + tuple(sp.Symbol(f"x{i+1}") for i in range(dim))


def _parse(text: str, dim: int) -> sp.Expr:
    syms = _symbols(dim)
    local = {s.name: s for s in syms}
    local.update(_ALLOWED_FUNCS)
    try:
        expr = sp.sympify(text, locals=local, convert_xor=True, evaluate=True)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from None
    extra = expr.free_symbols - set(syms)
    if extra:
        raise ExpressionError(
            f"unknown identifiers {sorted(str(s) for s in extra)} in {text!r} "
            f"(allowed: t, x1..x{dim})"
        )
    return expr


@dataclass(frozen=True)
class ScalarField:
    """A scalar function of (t, x) on [0,T] x Omega-bar, symbolic under the hood."""

    expr: sp.Expr
    dim: int
    _fn: object = field(default=None, repr=False, compare=False)

    @classmethod
    def parse(cls, text: str, dim: int) -> "ScalarField":
        return cls.from_expr(_parse(text, dim), dim)

    @classmethod
    def from_expr(cls, expr: sp.Expr, dim: int) -> "ScalarField":
        expr = sp.sympify(expr)
        fn = sp.lambdify(_symbols(dim), expr, modules="numpy")
        return cls(expr=expr, dim=dim, _fn=fn)

    @classmethod
    def constant(cls, value: float, dim: int) -> "ScalarField":
        return cls.from_expr(sp.Float(value) if value else sp.Integer(0), dim)

    @property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    @property
    def is_zero(self) -> bool:
        return self.expr == 0

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ExpressionError(f"field {self.expr} is not constant")
        return float(self.expr)

    def diff(self, var: str) -> "ScalarField":
        syms = {s.name: s for s in _symbols(self.dim)}
        if var not in syms:
            raise ExpressionError(f"unknown variable {var!r}")
        return ScalarField.from_expr(sp.diff(self.expr, syms[var]), self.dim)

    def __call__(self, t, x):
        """Evaluate at time(s) t and points x of shape (..., dim) or (dim,)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        coords = [x[..., i] for i in range(self.dim)]
        out = self._fn(t, *coords)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               np.broadcast_shapes(np.shape(t), x.shape[:-1])).copy()


@dataclass(frozen=True)
class VectorField:
    components: tuple

    @classmethod
    def parse(cls, texts, dim: int) -> "VectorField":
        if len(texts) != dim:
            raise ExpressionError(f"vector field needs {dim} components, got {len(texts)}")
        return cls(tuple(ScalarField.parse(s, dim) for s in texts))

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        return cls(tuple(ScalarField.constant(0.0, dim) for _ in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def is_zero(self) -> bool:
        return all(c.is_zero for c in self.components)

    @property
    def is_constant(self) -> bool:
        return all(c.is_constant for c in self.components)

    def constant_value(self) -> np.ndarray:
        return np.array([c.constant_value() for c in self.components])

    def __call__(self, t, x):
        """Evaluate to an array of shape (..., dim)."""
        return np.stack([c(t, x) for c in self.components], axis=-1)

    def divergence(self) -> ScalarField:
        expr = sum(c.diff(f"x{i+1}").expr for i, c in enumerate(self.components))
        return ScalarField.from_expr(expr, self.dim)


@dataclass(frozen=True)
class MatrixField:
    rows: tuple  # tuple of tuples of ScalarField

    @classmethod
    def parse(cls, texts, dim: int) -> "MatrixField":
        if len(texts) != dim or any(len(r) != dim for r in texts):
            raise ExpressionError(f"matrix field must be {dim}x{dim}")
        return cls(tuple(tuple(ScalarField.parse(s, dim) for s in row) for row in texts))

    @classmethod
    def isotropic(cls, value: float, dim: int) -> "MatrixField":
        zero = ScalarField.constant(0.0, dim)
        diag = ScalarField.constant(value, dim)
        return cls(tuple(tuple(diag if i == j else zero for j in range(dim))
                         for i in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.rows)

    @property
    def is_constant(self) -> bool:
        return all(e.is_constant for row in self.rows for e in row)

    def constant_value(self) -> np.ndarray:
        return np.array([[e.constant_value() for e in row] for row in self.rows])

    def entry(self, i: int, j: int) -> ScalarField:
        return self.rows[i][j]

    def is_symmetric(self) -> bool:
        n = self.dim
        return all(sp.simplify(self.rows[i][j].expr - self.rows[j][i].expr) == 0
                   for i in range(n) for j in range(i + 1, n))

    def __call__(self, t, x):
        """Evaluate to an array of shape (..., dim, dim)."""
        return np.stack(
            [np.stack([e(t, x) for e in row], axis=-1) for row in self.rows],
            axis=-2,
        )
