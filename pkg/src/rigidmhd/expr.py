"""Whitelisted arithmetic expressions for field specifications.

Expressions use the coordinates ``x, y, z`` (and ``t`` for sources), numbers,
``+ - * / **``, the constant ``pi`` and a few numpy functions.  Anything
else (attributes, subscripts, lambdas, unknown names) is rejected before the
expression is evaluated.
"""
from __future__ import annotations

import ast
from functools import lru_cache

import numpy as np

FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "tanh": np.tanh, "abs": np.abs, "minimum": np.minimum,
    "maximum": np.maximum, "where": np.where,
}
CONSTANTS = {"pi": np.pi, "e": np.e}
VARIABLES = ("x", "y", "z", "t")

_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
    ast.UAdd, ast.Compare, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)


class ExpressionError(ValueError):
    pass


@lru_cache(maxsize=256)
def compile_expr(src: str):
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {src!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ExpressionError(f"{type(node).__name__} not allowed in {src!r}")
        if isinstance(node, ast.Name) and node.id not in FUNCTIONS and node.id not in CONSTANTS \
                and node.id not in VARIABLES:
            raise ExpressionError(f"unknown name {node.id!r} in {src!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS):
            raise ExpressionError(f"only {sorted(FUNCTIONS)} may be called in {src!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric literal in {src!r}")
    return compile(tree, "<expr>", "eval")


def evaluate(src: str, **variables) -> np.ndarray:
    """Evaluate ``src`` with numpy broadcasting over the given variables."""
    code = compile_expr(str(src))
    ns = {"__builtins__": {}}
    ns.update(FUNCTIONS)
    ns.update(CONSTANTS)
    ns.update({k: variables.get(k, 0.0) for k in VARIABLES})
    return np.asarray(eval(code, ns), dtype=float)
