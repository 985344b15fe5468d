"""Closed-form scalar expressions with exact derivative evaluators.

Scenario files carry functions and surface constraints as strings in a small
arithmetic grammar (+, -, *, /, ** and the functions sin, cos, exp).  Parsing
goes through sympy so first and second derivatives are exact; anything outside
the grammar is rejected up front.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

_ALLOWED_FUNCS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp}

_VAR_NAMES = ("x", "y", "z", "w")


class ExpressionError(ValueError):
    """Raised when a scenario expression falls outside the grammar."""


def _check_grammar(tree: sp.Expr) -> None:
    allowed = (
        sp.Add, sp.Mul, sp.Pow, sp.Symbol, sp.Integer, sp.Float, sp.Rational,
        sp.sin, sp.cos, sp.exp,
    )
    for node in sp.preorder_traversal(tree):
        if isinstance(node, sp.AtomicExpr) and node.is_number:
            continue
        if not isinstance(node, allowed):
            raise ExpressionError(f"disallowed construct in expression: {node!r}")


class ScalarExpression:
    """A smooth function R^n -> R given in closed form.

    Provides exact value/gradient/Hessian evaluators (sympy-generated, so the
    derivatives are symbolic, not numeric).  Immutable after construction.
    """

    def __init__(self, text: str, ambient_dim: int, var_names=None):
        names = var_names if var_names is not None else _VAR_NAMES[:ambient_dim]
        if not 1 <= ambient_dim <= len(names):
            raise ExpressionError(f"ambient_dim must be 1..{len(names)}")
        self.text = text
        self.ambient_dim = ambient_dim
        self.symbols = sp.symbols(" ".join(names[:ambient_dim]), seq=True)
        local = {str(sym): sym for sym in self.symbols}
        local.update(_ALLOWED_FUNCS)
        try:
            tree = sp.sympify(text, locals=local, rational=False)
        except (sp.SympifyError, SyntaxError, TypeError) as exc:
            raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from exc
        tree = sp.sympify(tree)
        _check_grammar(tree)
        extra = tree.free_symbols - set(self.symbols)
        if extra:
            raise ExpressionError(f"unknown symbols {sorted(map(str, extra))} in {text!r}")
        self.tree = tree
        grad = [sp.diff(tree, s) for s in self.symbols]
        hess = [[sp.diff(g, s) for s in self.symbols] for g in grad]
        self._f = sp.lambdify(self.symbols, tree, modules="numpy")
        self._g = sp.lambdify(self.symbols, grad, modules="numpy")
        self._h = sp.lambdify(self.symbols, hess, modules="numpy")

    def value(self, p) -> float:
        return float(self._f(*np.asarray(p, dtype=float)))

    def gradient(self, p) -> np.ndarray:
        return np.array(self._g(*np.asarray(p, dtype=float)), dtype=float)

    def hessian(self, p) -> np.ndarray:
        return np.array(self._h(*np.asarray(p, dtype=float)), dtype=float)

    def __repr__(self):
        return f"ScalarExpression({self.text!r}, dim={self.ambient_dim})"
