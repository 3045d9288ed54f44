"""
Small arithmetic expression language for case files.

Expressions use the variables x, y, z, t, the constants pi and e, the
functions sin, cos and exp, numbers, parentheses and + - * / **. They
are parsed with :mod:`ast` and evaluated on numpy arrays; nothing else is
accepted.
"""
import ast
import operator

import numpy as np

__all__ = ["ExpressionError", "compile_expr", "compile_laplacian", "VARIABLES"]

VARIABLES = ("x", "y", "z", "t")
_CONSTANTS = {"pi": np.pi, "e": np.e}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


class ExpressionError(ValueError):
    pass


def _check(node):
    if isinstance(node, ast.Expression):
        return _check(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"unsupported literal {node.value!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in VARIABLES and node.id not in _CONSTANTS:
            raise ExpressionError(f"unknown name {node.id!r}")
        return
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed")
        _check(node.left)
        _check(node.right)
        return
    if isinstance(node, ast.UnaryOp):
        if type(node.op) not in _UNOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed")
        _check(node.operand)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("only sin, cos and exp may be called")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        _check(node.args[0])
        return
    raise ExpressionError(f"unsupported syntax: {type(node).__name__}")


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTANTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNOPS[type(node.op)](_eval(node.operand, env))
    return _FUNCS[node.func.id](_eval(node.args[0], env))


def compile_expr(src):
    """
    Parse `src` and return ``f(x, y, z, t=0.0)`` evaluating it with numpy
    broadcasting.

    Raises
    ------
    ExpressionError
        On syntax errors or anything outside the grammar.
    """
    if isinstance(src, (int, float)) and not isinstance(src, bool):
        src = repr(float(src))
    if not isinstance(src, str):
        raise ExpressionError("expression must be a string or a number")
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {src!r}: {exc.msg}") from None
    _check(tree)
    body = tree.body

    def fn(x, y, z, t=0.0):
        out = _eval(body, {"x": x, "y": y, "z": z, "t": t})
        return np.broadcast_to(np.asarray(out, dtype=np.float64), np.broadcast(x, y, z).shape)

    fn.source = src
    return fn


class _Jet:
    """Value with first and second derivative along one direction."""

    __slots__ = ("v", "d", "dd")

    def __init__(self, v, d=0.0, dd=0.0):
        self.v, self.d, self.dd = v, d, dd

    @staticmethod
    def lift(a):
        return a if isinstance(a, _Jet) else _Jet(a)

    def __add__(self, o):
        o = _Jet.lift(o)
        return _Jet(self.v + o.v, self.d + o.d, self.dd + o.dd)

    __radd__ = __add__

    def __neg__(self):
        return _Jet(-self.v, -self.d, -self.dd)

    def __pos__(self):
        return self

    def __sub__(self, o):
        return self + (-_Jet.lift(o))

    def __rsub__(self, o):
        return _Jet.lift(o) - self

    def __mul__(self, o):
        o = _Jet.lift(o)
        return _Jet(self.v * o.v, self.d * o.v + self.v * o.d, self.dd * o.v + 2 * self.d * o.d + self.v * o.dd)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = _Jet.lift(o)
        inv = _chain(o, 1.0 / o.v, -1.0 / o.v**2, 2.0 / o.v**3)
        return self * inv

    def __rtruediv__(self, o):
        return _Jet.lift(o) / self

    def __pow__(self, o):
        o = _Jet.lift(o)
        if isinstance(o.d, float) and o.d == 0.0 and isinstance(o.dd, float) and o.dd == 0.0:
            c = o.v
            return _chain(self, self.v**c, c * self.v ** (c - 1), c * (c - 1) * self.v ** (c - 2))
        return _jexp(o * _jlog(self))

    def __rpow__(self, o):
        return _Jet.lift(o) ** self


def _chain(u, f, f1, f2):
    return _Jet(f, f1 * u.d, f2 * u.d**2 + f1 * u.dd)


def _jexp(u):
    e = np.exp(u.v)
    return _chain(u, e, e, e)


def _jlog(u):
    return _chain(u, np.log(u.v), 1.0 / u.v, -1.0 / u.v**2)


_JFUNCS = {
    "sin": lambda u: _chain(u, np.sin(u.v), np.cos(u.v), -np.sin(u.v)),
    "cos": lambda u: _chain(u, np.cos(u.v), -np.sin(u.v), -np.cos(u.v)),
    "exp": _jexp,
}


def _jeval(node, env):
    if isinstance(node, ast.Constant):
        return _Jet(float(node.value))
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _Jet(_CONSTANTS[node.id])
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_jeval(node.left, env), _jeval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNOPS[type(node.op)](_jeval(node.operand, env))
    return _JFUNCS[node.func.id](_jeval(node.args[0], env))


def compile_laplacian(src):
    """
    ``f(x, y, z, t=0.0)`` returning the exact Laplacian in x, y, z of the
    expression, by second-order forward differentiation of the parse tree.
    """
    base = compile_expr(src)
    body = ast.parse(str(base.source).strip(), mode="eval").body

    def fn(x, y, z, t=0.0):
        shape = np.broadcast(x, y, z).shape
        total = np.zeros(shape)
        xyz = {"x": x, "y": y, "z": z}
        for axis in "xyz":
            env = {k: _Jet(v, 1.0 if k == axis else 0.0) for k, v in xyz.items()}
            env["t"] = _Jet(t)
            total = total + _Jet.lift(_jeval(body, env)).dd
        return np.broadcast_to(total, shape)

    return fn
