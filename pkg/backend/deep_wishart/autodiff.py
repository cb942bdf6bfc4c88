"""
Reverse-mode automatic differentiation over the matrix operations of the ELBO.

Define-by-run: every primitive applied to a ``Var`` appends a node (its
parents and one vector-Jacobian product per parent) to the owning ``Tape``.
Append order is a topological order, so ``Tape.backward`` walks the node
list once in reverse.

Primitives are polymorphic: called on plain arrays they compute the primal
value and return an array without touching any tape. Higher-level code
(distributions, kernels, the model) is therefore written once and runs both
as a plain numerical function and as a differentiable one.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, special

from . import numerics
from .errors import ShapeMismatch

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
Vjp = Callable[[Array], Array]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Node:
    kind: str
    parents: Tuple[int, ...]
    vjps: Tuple[Vjp, ...]
    value: Array


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value: Any) -> "Var":
        """Register a leaf (an input we differentiate with respect to)."""
        return self._append(Node("leaf", (), (), np.array(value, dtype=np.float64)))

    def record(self, kind: str, value: Array, parents: Sequence[Tuple["Var", Vjp]]) -> "Var":
        for parent, _ in parents:
            if parent.tape is not self:
                raise ShapeMismatch("Cannot combine variables from different tapes")
        node = Node(kind, tuple(p.index for p, _ in parents), tuple(v for _, v in parents),
                    np.asarray(value, dtype=np.float64))
        return self._append(node)

    def _append(self, node: Node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def backward(self, output: "Var") -> List[Optional[Array]]:
        """Adjoints of every node with respect to the scalar ``output``."""
        if output.tape is not self:
            raise ShapeMismatch("Output does not belong to this tape")
        if output.value.size != 1:
            raise ShapeMismatch(f"backward needs a scalar output, got shape {output.shape}")
        adjoints: List[Optional[Array]] = [None] * len(self.nodes)
        adjoints[output.index] = np.ones_like(output.value)
        self.visits = 0
        for index in range(len(self.nodes) - 1, -1, -1):
            self.visits += 1
            grad = adjoints[index]
            if grad is None:
                continue
            node = self.nodes[index]
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = vjp(grad)
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(contribution, dtype=np.float64)
                else:
                    adjoints[parent] = adjoints[parent] + contribution
        return adjoints

    def gradient(self, output: "Var", wrt: Sequence["Var"]) -> List[Array]:
        adjoints = self.backward(output)
        grads = []
        for var in wrt:
            grad = adjoints[var.index]
            grads.append(np.zeros_like(var.value) if grad is None else grad.reshape(var.shape))
        return grads


class Var:
    """Handle to a node on a tape. The shape never changes after creation."""

    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def __len__(self) -> int:
        return self.shape[0]

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return mul(-1.0, self)
    def __getitem__(self, index): return getitem(self, index)


Operand = Union[Var, Array, float]


def value_of(x: Operand) -> Array:
    """Primal value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(x: Any) -> bool:
    return isinstance(x, Var)


def _primitive(kind: str, value: Array, *pairs: Tuple[Operand, Vjp]) -> Union[Var, Array]:
    parents = [(x, vjp) for x, vjp in pairs if isinstance(x, Var)]
    if not parents:
        return value
    return parents[0][0].tape.record(kind, value, parents)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Array, b: Array) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"Incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv)
    return _primitive("add", av + bv,
                      (a, lambda g: _unbroadcast(g, av.shape)),
                      (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv)
    return _primitive("sub", av - bv,
                      (a, lambda g: _unbroadcast(g, av.shape)),
                      (b, lambda g: -_unbroadcast(g, bv.shape)))


def mul(a: Operand, b: Operand):
    """Elementwise product; a scalar operand gives scalar multiplication."""
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv)
    return _primitive("mul", av * bv,
                      (a, lambda g: _unbroadcast(g * bv, av.shape)),
                      (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv)
    out = av / bv
    return _primitive("div", out,
                      (a, lambda g: _unbroadcast(g / bv, av.shape)),
                      (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a: Operand, b: Operand):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul of shapes {av.shape} and {bv.shape}")
    return _primitive("matmul", av @ bv,
                      (a, lambda g: g @ bv.T),
                      (b, lambda g: av.T @ g))


def transpose(a: Operand):
    av = value_of(a)
    return _primitive("transpose", av.T.copy(), (a, lambda g: g.T))


def reshape(a: Operand, shape: Tuple[int, ...]):
    av = value_of(a)
    return _primitive("reshape", av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def getitem(a: Operand, index: Any):
    av = value_of(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return out

    return _primitive("getitem", np.array(av[index], dtype=np.float64), (a, vjp))


def embed(values: Operand, index: Any, shape: Tuple[int, ...]):
    """Zero array of ``shape`` with ``values`` scattered at ``index``."""
    vv = value_of(values)
    out = np.zeros(shape, dtype=np.float64)
    out[index] = vv
    return _primitive("embed", out, (values, lambda g: np.asarray(g[index]).reshape(vv.shape)))


def concat(parts: Sequence[Operand], axis: int = 0):
    values = [value_of(p) for p in parts]
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    pairs = []
    for part, start, stop in zip(parts, bounds[:-1], bounds[1:]):
        def vjp(g, start=start, stop=stop):
            return np.take(g, np.arange(start, stop), axis=axis)
        pairs.append((part, vjp))
    return _primitive("concat", np.concatenate(values, axis=axis), *pairs)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

def exp(a: Operand):
    out = np.exp(value_of(a))
    return _primitive("exp", out, (a, lambda g: g * out))


def log(a: Operand):
    av = value_of(a)
    return _primitive("log", np.log(av), (a, lambda g: g / av))


def square(a: Operand):
    av = value_of(a)
    return _primitive("square", av * av, (a, lambda g: 2.0 * g * av))


def sqrt(a: Operand):
    out = np.sqrt(value_of(a))
    return _primitive("sqrt", out, (a, lambda g: 0.5 * g / out))


def softplus(a: Operand):
    """log(1 + e^x), the positivity transform for constrained parameters."""
    av = value_of(a)
    return _primitive("softplus", np.logaddexp(0.0, av), (a, lambda g: g * special.expit(av)))


def sigmoid(a: Operand):
    out = special.expit(value_of(a))
    return _primitive("sigmoid", out, (a, lambda g: g * out * (1.0 - out)))


def clip_min(a: Operand, lower: float):
    av = value_of(a)
    return _primitive("clip_min", np.maximum(av, lower), (a, lambda g: g * (av > lower)))


def inv_softplus(y: Union[float, Array]) -> Array:
    """Inverse of softplus, for initialising raw parameters (plain arrays only)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# Reductions and matrix functions
# ---------------------------------------------------------------------------

def sum(a: Operand, axis: Optional[int] = None):  # noqa: A001 - mirrors numpy
    av = value_of(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _primitive("sum", np.asarray(av.sum(axis=axis), dtype=np.float64), (a, vjp))


def trace(a: Operand):
    av = value_of(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeMismatch(f"trace needs a square matrix, got {av.shape}")
    return _primitive("trace", np.asarray(np.trace(av)), (a, lambda g: g * np.eye(av.shape[0])))


def diag(a: Operand):
    """Main diagonal of a (possibly rectangular) matrix."""
    av = value_of(a)
    k = min(av.shape)

    def vjp(g):
        out = np.zeros_like(av)
        out[np.arange(k), np.arange(k)] = g
        return out

    return _primitive("diag", np.diagonal(av).copy(), (a, vjp))


def diag_matrix(v: Operand):
    """Square matrix with ``v`` on the diagonal."""
    vv = value_of(v)
    return _primitive("diag_matrix", np.diag(vv), (v, lambda g: np.diagonal(g).copy()))


def log_diag_sum(a: Operand):
    """Sum of the logs of the leading min(shape) diagonal entries."""
    av = value_of(a)
    d = np.diagonal(av)
    k = d.shape[0]

    def vjp(g):
        out = np.zeros_like(av)
        out[np.arange(k), np.arange(k)] = g / d
        return out

    return _primitive("log_diag_sum", np.asarray(np.sum(np.log(d))), (a, vjp))


def _phi(a: Array) -> Array:
    out = np.tril(a)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _cholesky_backward_blocked(chol: Array, chol_bar: Array, block: int = 256) -> Array:
    """
    Level-3 blocked backward recurrence for the Cholesky factorisation.

    Takes tril(L_bar) and returns tril(Sigma_bar) in the convention where the
    strictly-lower entries hold the sensitivity to a symmetric pair.
    """
    abar = np.tril(chol_bar).copy()
    n = chol.shape[0]
    for k in range(n, 0, -block):
        j = max(0, k - block)
        r, d, b, c = chol[j:k, :j], chol[j:k, j:k], chol[k:, :j], chol[k:, j:k]
        rbar, dbar, bbar, cbar = abar[j:k, :j], abar[j:k, j:k], abar[k:, :j], abar[k:, j:k]
        if cbar.size:
            cbar[:] = linalg.solve_triangular(d, cbar.T, lower=True, trans=1).T
            bbar -= cbar @ r
            dbar[:] = np.tril(dbar) - np.tril(cbar.T @ c)
        p = _phi(d.T @ dbar)
        inner = linalg.solve_triangular(d, (p + p.T).T, lower=True, trans=1).T
        dbar[:] = _phi(linalg.solve_triangular(d, inner, lower=True, trans=1))
        if rbar.size:
            rbar -= (cbar.T @ b if cbar.size else 0.0) + (dbar + dbar.T) @ r
    return abar


def cholesky(m: Operand):
    """Cholesky of the symmetric part of ``m`` (a no-op for symmetric input)."""
    mv = value_of(m)
    chol = numerics.cholesky(0.5 * (mv + mv.T))

    def vjp(g):
        sigma_bar = _cholesky_backward_blocked(chol, g)
        return 0.5 * (sigma_bar + sigma_bar.T)

    return _primitive("cholesky", chol, (m, vjp))


def tri_solve(l: Operand, b: Operand):
    """x with l @ x = b for square lower-triangular ``l``."""
    lv, bv = value_of(l), value_of(b)
    x = numerics.tri_solve(lv, bv)

    def vjp_b(g):
        return numerics.tri_solve(lv, g, transpose=True)

    def vjp_l(g):
        b_bar = numerics.tri_solve(lv, g, transpose=True)
        if x.ndim == 1:
            return -np.tril(np.outer(b_bar, x))
        return -np.tril(b_bar @ x.T)

    return _primitive("tri_solve", x, (l, vjp_l), (b, vjp_b))


# ---------------------------------------------------------------------------
# Log densities and reparameterised draws
# ---------------------------------------------------------------------------

def gamma_logpdf(x: Operand, alpha: Operand, beta: Operand):
    """Elementwise log Gamma(x; shape alpha, rate beta)."""
    xv, av, bv = value_of(x), value_of(alpha), value_of(beta)
    try:
        shape = np.broadcast_shapes(xv.shape, av.shape, bv.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"gamma_logpdf shapes {xv.shape}, {av.shape}, {bv.shape}") from exc
    out = av * np.log(bv) - special.gammaln(av) + (av - 1.0) * np.log(xv) - bv * xv
    out = np.broadcast_to(out, shape).astype(np.float64)
    return _primitive(
        "gamma_logpdf", out,
        (x, lambda g: _unbroadcast(g * ((av - 1.0) / xv - bv), xv.shape)),
        (alpha, lambda g: _unbroadcast(g * (np.log(bv) - special.digamma(av) + np.log(xv)), av.shape)),
        (beta, lambda g: _unbroadcast(g * (av / bv - xv), bv.shape)))


def normal_logpdf(x: Operand, mean: Operand, std: Operand):
    """Elementwise log N(x; mean, std^2)."""
    xv, mv, sv = value_of(x), value_of(mean), value_of(std)
    z = (xv - mv) / sv
    out = -0.5 * _LOG_2PI - np.log(sv) - 0.5 * z * z
    return _primitive(
        "normal_logpdf", np.asarray(out, dtype=np.float64),
        (x, lambda g: _unbroadcast(-g * z / sv, xv.shape)),
        (mean, lambda g: _unbroadcast(g * z / sv, mv.shape)),
        (std, lambda g: _unbroadcast(g * (z * z - 1.0) / sv, sv.shape)))


def gamma_quantile_alpha_derivative(alpha: Array, g: Array) -> Array:
    """
    dg/dalpha of the unit-rate Gamma quantile g = P^-1(alpha, u) at fixed u.

    Implicit differentiation of P(alpha, g) = u: dg/dalpha = -(dP/dalpha) / (dP/dg),
    with dP/dalpha by central differences of step 1e-4 * max(1, alpha).
    """
    h = 1e-4 * np.maximum(1.0, alpha)
    dp_dalpha = (special.gammainc(alpha + h, g) - special.gammainc(alpha - h, g)) / (2.0 * h)
    log_density = (alpha - 1.0) * np.log(g) - g - special.gammaln(alpha)
    return -dp_dalpha / np.exp(log_density)


def gamma_reparam(alpha: Operand, beta: Operand, u: Array):
    """Gamma(alpha, beta) draw from uniform noise ``u`` by inverse CDF."""
    av, bv = value_of(alpha), value_of(beta)
    u = np.asarray(u, dtype=np.float64)
    g = np.maximum(special.gammaincinv(av, u), np.finfo(np.float64).tiny)
    z = g / bv
    return _primitive(
        "gamma_reparam", np.asarray(z, dtype=np.float64),
        (alpha, lambda grad: _unbroadcast(grad * gamma_quantile_alpha_derivative(av, g) / bv, av.shape)),
        (beta, lambda grad: _unbroadcast(-grad * z / bv, bv.shape)))


def stop_gradient(a: Operand):
    """Pass the primal through; ancestors receive no adjoint from this path."""
    if isinstance(a, Var):
        return a.tape.record("stop_gradient", a.value.copy(), [])
    return value_of(a)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradcheck(f: Callable[[Any], Operand], point: Union[Array, Mapping[str, Array]],
              h: float = 1e-5, floor: float = 1e-8) -> float:
    """
    Compare reverse-mode gradients of a scalar function with central differences.

    Args:
        f: Function of a Var (or a dict of Vars when ``point`` is a mapping)
        point: Where to evaluate
        h: Finite difference step
        floor: Added to |analytic| in the relative error denominator

    Returns:
        max over coordinates of |analytic - numeric| / (|analytic| + floor)
    """
    named = isinstance(point, Mapping)
    points: Dict[Any, Array] = ({k: np.array(v, dtype=np.float64) for k, v in point.items()}
                                if named else {None: np.array(point, dtype=np.float64)})

    def call(args: Dict[Any, Any]):
        return f(args if named else args[None])

    tape = Tape()
    variables = {k: tape.variable(v) for k, v in points.items()}
    out = call(variables)
    if not isinstance(out, Var):
        raise ShapeMismatch("gradcheck: function does not depend on its input")
    analytic = dict(zip(variables, tape.gradient(out, list(variables.values()))))

    worst = 0.0
    for key, base in points.items():
        for idx in np.ndindex(base.shape):
            shifted = {k: v.copy() for k, v in points.items()}
            shifted[key][idx] = base[idx] + h
            upper = float(value_of(call(shifted)))
            shifted[key][idx] = base[idx] - h
            lower = float(value_of(call(shifted)))
            numeric = (upper - lower) / (2.0 * h)
            a = float(analytic[key][idx])
            worst = max(worst, abs(a - numeric) / (abs(a) + floor))
    logger.debug("gradcheck max relative error %.3e", worst)
    return worst
