"""Flux expressions in the coordinates ``x1`` and ``x2``."""
import logging
from tokenize import TokenError

import numpy as np
import sympy
from django.core.exceptions import ValidationError
from sympy.core.function import AppliedUndef
from sympy.parsing.sympy_parser import parse_expr
from sympy.parsing.sympy_parser import standard_transformations


log = logging.getLogger(__name__)  # noqa

x1, x2 = sympy.symbols("x1 x2", real=True)

ALLOWED_NAMES = {
    "x1": x1,
    "x2": x2,
    "pi": sympy.pi,
    "e": sympy.E,
    "sin": sympy.sin,
    "cos": sympy.cos,
    "tan": sympy.tan,
    "exp": sympy.exp,
    "log": sympy.log,
    "sqrt": sympy.sqrt,
    "abs": sympy.Abs,
    "atan2": sympy.atan2,
}


class Expression:

    """A parsed expression that evaluates on arrays of points."""

    def __init__(self, text):
        self.text = text.strip()
        self.expr = parse_flux(self.text)
        self._function = sympy.lambdify((x1, x2), self.expr, modules="numpy")

    def __repr__(self):
        return f"<Expression {self.text!r}>"

    def __call__(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        values = self._function(points[:, 0], points[:, 1])
        # Constant expressions come back as scalars
        return np.broadcast_to(np.asarray(values, dtype=float), (len(points),)).copy()


def parse_flux(text):
    """
    Parse a flux expression.

    :raises ValidationError: on syntax errors, unknown names or free symbols
        other than ``x1`` and ``x2``
    """
    if not text or not text.strip():
        raise ValidationError("Empty expression", code="expression")
    try:
        expr = parse_expr(
            text,
            local_dict=dict(ALLOWED_NAMES),
            global_dict={
                "__builtins__": {},
                "Integer": sympy.Integer,
                "Float": sympy.Float,
                "Rational": sympy.Rational,
                "Symbol": sympy.Symbol,
            },
            transformations=standard_transformations,
            evaluate=True,
        )
    except (
        SyntaxError,
        TokenError,
        ValueError,
        TypeError,
        NameError,
        AttributeError,
        sympy.SympifyError,
    ) as error:
        raise ValidationError(
            "Cannot parse expression %(text)s: %(error)s",
            params={"text": text, "error": error},
            code="expression",
        )
    if not isinstance(expr, sympy.Expr):
        raise ValidationError(
            "Expression %(text)s is not a scalar",
            params={"text": text},
            code="expression",
        )
    unknown = {str(symbol) for symbol in expr.free_symbols - {x1, x2}}
    unknown.update(str(call.func) for call in expr.atoms(AppliedUndef))
    if unknown:
        raise ValidationError(
            "Expression %(text)s uses unknown names %(names)s",
            params={"text": text, "names": ", ".join(sorted(unknown))},
            code="expression",
        )
    return expr
