"""Spatial Taylor jets and parameter-space Jacobian products.

Spatial derivatives (gradients, Laplacians, time derivatives, third
derivatives for curl ansatzes) are carried by :class:`Jet`, a dense truncated
multivariate Taylor polynomial.  Coefficients are stored in normalized form,
``coeffs[alpha] = d^alpha f / alpha!``, so products are plain truncated
convolutions.  Multi-indices are graded (all degree-0, then degree-1, ...), so
truncating to a lower order is a prefix slice.

Parameter derivatives of the assembled residual go through JAX: forward
tangents for ``param_jvp`` and a reverse pass for ``param_vjp``.  The jet
arithmetic is written in ``jax.numpy`` so both compose.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache, partial
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ArgumentError, CapacityError, NumericalError

MAX_ORDER = 3
SEED_ORDERS = (2, 3)


@dataclass(frozen=True)
class JetSpace:
    """Index bookkeeping for jets in ``nvars`` variables truncated at ``order``."""

    nvars: int
    order: int

    @cached_property
    def multi_indices(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for deg in range(self.order + 1):
            for combo in itertools.combinations_with_replacement(range(self.nvars), deg):
                alpha = [0] * self.nvars
                for v in combo:
                    alpha[v] += 1
                out.append(tuple(alpha))
        return tuple(out)

    @cached_property
    def index(self) -> dict[tuple[int, ...], int]:
        return {a: i for i, a in enumerate(self.multi_indices)}

    @property
    def size(self) -> int:
        return len(self.multi_indices)

    @cached_property
    def factorials(self) -> np.ndarray:
        return np.array([math.prod(math.factorial(k) for k in a) for a in self.multi_indices], dtype=float)

    @cached_property
    def mul_table(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """For each output coefficient, the (lhs, rhs) index pairs of non-constant factors.

        Pairs with a constant factor are handled as scalings in ``Jet.__mul__``.
        """
        rows = [[] for _ in self.multi_indices]
        for i, a in enumerate(self.multi_indices):
            for j, b in enumerate(self.multi_indices):
                if sum(a) >= 1 and sum(b) >= 1 and sum(a) + sum(b) <= self.order:
                    rows[self.index[tuple(x + y for x, y in zip(a, b))]].append((i, j))
        return tuple(tuple(r) for r in rows)

    def unit(self, var: int) -> int:
        alpha = [0] * self.nvars
        alpha[var] = 1
        return self.index[tuple(alpha)]

    def lowered(self) -> "JetSpace":
        return jet_space(self.nvars, self.order - 1)

    @cached_property
    def diff_tables(self):
        """Per variable: (source index, factor) producing the d/dx_var jet one order lower."""
        low = self.lowered()
        tables = []
        for var in range(self.nvars):
            src, fac = [], []
            for beta in low.multi_indices:
                shifted = list(beta)
                shifted[var] += 1
                src.append(self.index[tuple(shifted)])
                fac.append(float(shifted[var]))
            tables.append((np.array(src), np.array(fac)))
        return tables


@lru_cache(maxsize=None)
def jet_space(nvars: int, order: int) -> JetSpace:
    if nvars < 1:
        raise ArgumentError(f"jets need at least one variable, got {nvars}")
    if not 0 <= order <= MAX_ORDER:
        raise ArgumentError(f"jet order must lie in [0, {MAX_ORDER}], got {order}")
    return JetSpace(nvars, order)


@jax.tree_util.register_pytree_node_class
class Jet:
    """Truncated Taylor expansion of a scalar field at a point.

    ``coeffs`` has shape ``(space.size, *batch)``; the batch axes let one Jet
    hold a whole layer of neurons.  The expansion point itself is implicit:
    it is whatever the seeded coordinates were.
    """

    __slots__ = ("coeffs", "space")
    __array_priority__ = 1000

    def __init__(self, coeffs, space: JetSpace):
        self.coeffs = coeffs
        self.space = space

    def tree_flatten(self):
        return (self.coeffs,), self.space

    @classmethod
    def tree_unflatten(cls, space, children):
        return cls(children[0], space)

    def __repr__(self):
        return f"Jet(nvars={self.space.nvars}, order={self.space.order}, shape={jnp.shape(self.coeffs)})"

    @property
    def order(self) -> int:
        return self.space.order

    @property
    def value(self):
        return self.coeffs[0]

    @property
    def batch_shape(self):
        return jnp.shape(self.coeffs)[1:]

    def coeff(self, alpha: Sequence[int]):
        return self.coeffs[self.space.index[tuple(alpha)]]

    def derivative(self, alpha: Sequence[int]):
        """The partial derivative d^alpha f at the expansion point."""
        alpha = tuple(alpha)
        if len(alpha) != self.space.nvars or sum(alpha) > self.order:
            raise ArgumentError(f"multi-index {alpha} not available in {self!r}")
        i = self.space.index[alpha]
        return self.space.factorials[i] * self.coeffs[i]

    def partial(self, *vars_: int):
        """Mixed partial over the listed variables, e.g. ``partial(0, 0)`` is f_xx."""
        alpha = [0] * self.space.nvars
        for v in vars_:
            alpha[v] += 1
        return self.derivative(alpha)

    def laplacian(self, vars_: Sequence[int]):
        return sum(self.partial(v, v) for v in vars_)

    def d(self, var: int) -> "Jet":
        """Jet of the partial derivative in ``var``; one order is consumed."""
        if self.order < 1:
            raise ArgumentError("cannot differentiate an order-0 jet")
        src, fac = self.space.diff_tables[var]
        rows = _rows(self.coeffs, self.space.size)
        return Jet(jnp.concatenate([rows[i] * f for i, f in zip(src, fac)]), self.space.lowered())

    def truncate(self, order: int) -> "Jet":
        if order > self.order:
            raise ArgumentError(f"cannot raise jet order from {self.order} to {order}")
        low = jet_space(self.space.nvars, order)
        return Jet(self.coeffs[: low.size], low)

    def __getitem__(self, idx) -> "Jet":
        idx = idx if isinstance(idx, tuple) else (idx,)
        return Jet(self.coeffs[(slice(None),) + idx], self.space)

    # arithmetic
    def _check(self, other: "Jet"):
        if other.space != self.space:
            raise ArgumentError(f"jet metadata mismatch: {self.space} vs {other.space}")

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(self.coeffs + other.coeffs, self.space)
        return Jet(_add_to_value(self.coeffs, other), self.space)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.coeffs, self.space)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(_truncated_product(self.coeffs, other.coeffs, self.space), self.space)
        return Jet(self.coeffs * jnp.asarray(other)[None], self.space)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise ArgumentError("division by a jet is not supported")
        return self * (1.0 / jnp.asarray(other))

    def compose(self, taylor: Sequence) -> "Jet":
        """f(self) given ``taylor[k] = f^(k)(value) / k!`` for k = 0..order."""
        head, tail = jnp.split(self.coeffs, [1])
        h = Jet(jnp.concatenate([jnp.zeros_like(head), tail]), self.space)
        acc = h * taylor[self.order]
        for k in range(self.order - 1, 0, -1):
            acc = (acc + taylor[k]) * h
        return acc + taylor[0] if self.order > 0 else Jet(jnp.asarray(taylor[0])[None], self.space)

    def tanh(self):
        t = jnp.tanh(self.value)
        s = 1.0 - t * t
        return self.compose([t, s, -t * s, s * (3.0 * t * t - 1.0) / 3.0])

    def sin(self):
        s, c = jnp.sin(self.value), jnp.cos(self.value)
        return self.compose([s, c, -s / 2.0, -c / 6.0])

    def cos(self):
        s, c = jnp.sin(self.value), jnp.cos(self.value)
        return self.compose([c, -s, -c / 2.0, s / 6.0])

    def exp(self):
        e = jnp.exp(self.value)
        return self.compose([e, e, e / 2.0, e / 6.0])


def _rows(coeffs, n):
    # split/concatenate instead of indexing/scatter: their transposes are
    # each other, which keeps reverse-mode passes over jets cheap
    return jnp.split(coeffs, n)


def _add_to_value(coeffs, c):
    head, tail = jnp.split(coeffs, [1])
    return jnp.concatenate([head + jnp.asarray(c)[None], tail])


def _truncated_product(f, g, space: JetSpace):
    # unrolled so XLA fuses the whole product into one elementwise kernel
    f = _rows(f, space.size)
    g = _rows(g, space.size)
    rows = [f[0] * g[0]]
    for k, pairs in enumerate(space.mul_table[1:], start=1):
        acc = f[0] * g[k] + g[0] * f[k]
        for i, j in pairs:
            acc = acc + f[i] * g[j]
        rows.append(acc)
    return jnp.concatenate(rows)


def constant_jet(value, space: JetSpace) -> Jet:
    value = jnp.asarray(value, dtype=float)
    coeffs = jnp.zeros((space.size,) + value.shape).at[0].set(value)
    return Jet(coeffs, space)


def jet_seed(x, var_index: int, order: int) -> Jet:
    """Jet of the coordinate function ``x -> x[var_index]`` expanded at ``x``."""
    x = jnp.asarray(x, dtype=float)
    m = x.shape[0]
    if order not in SEED_ORDERS:
        raise ArgumentError(f"jet order must be one of {SEED_ORDERS}, got {order}")
    if not 0 <= var_index < m:
        raise ArgumentError(f"var_index {var_index} out of range for {m} variables")
    space = jet_space(m, order)
    coeffs = jnp.zeros((space.size,) + x.shape[1:])
    coeffs = coeffs.at[0].set(x[var_index]).at[space.unit(var_index)].set(1.0)
    return Jet(coeffs, space)


def seed_coordinates(x, order: int) -> list[Jet]:
    return [jet_seed(x, i, order) for i in range(jnp.shape(x)[0])]


def affine(x: Jet, weight, bias) -> Jet:
    """Coefficient-wise ``x @ weight + bias`` over the last batch axis of ``x``."""
    coeffs = jnp.matmul(x.coeffs, weight)
    return Jet(_add_to_value(coeffs, bias), x.space)


def _unary(name):
    def f(x):
        if isinstance(x, Jet):
            return getattr(x, name)()
        return getattr(jnp, name)(x)

    f.__name__ = name
    return f


tanh = _unary("tanh")
sin = _unary("sin")
cos = _unary("cos")
exp = _unary("exp")

_PRIMITIVES = {
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "neg": lambda a: -a,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "affine": affine,
}


def jet_primitive(name: str, *args):
    try:
        op = _PRIMITIVES[name]
    except KeyError:
        raise ArgumentError(f"unknown jet primitive {name!r}; expected one of {sorted(_PRIMITIVES)}") from None
    jets = [a for a in args if isinstance(a, Jet)]
    if not jets:
        raise ArgumentError(f"{name} needs at least one Jet argument")
    for j in jets[1:]:
        jets[0]._check(j)
    return op(*args)


# ---------------------------------------------------------------------------
# parameter-space derivatives of a pointwise residual


@dataclass(frozen=True, eq=False)
class PointGroup:
    """``fn(theta, x) -> (ncomp,)`` evaluated at every point of one collocation set.

    Rows are laid out component-major (all points of component 0, then 1, ...)
    and scaled by ``1/sqrt(N)``.  Hashing is by identity so a group can key
    JAX's compilation cache.
    """

    name: str
    fn: Callable
    ncomp: int


@dataclass(frozen=True, eq=False)
class ResidualAssembly:
    groups: tuple[PointGroup, ...]
    points: tuple[np.ndarray, ...]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.points)

    @property
    def size(self) -> int:
        return sum(g.ncomp * n for g, n in zip(self.groups, self.counts))

    def spans(self):
        """(group name, start row, stop row) for every group."""
        out, start = [], 0
        for g, n in zip(self.groups, self.counts):
            out.append((g.name, start, start + g.ncomp * n))
            start += g.ncomp * n
        return out

    def __call__(self, theta) -> np.ndarray:
        r = np.asarray(_residual(self.groups, jnp.asarray(theta), self.points))
        check_finite(r, self)
        return r


def check_finite(vec, assembly: ResidualAssembly):
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size == 0:
        return
    row = int(bad[0])
    for name, start, stop in assembly.spans():
        if start <= row < stop:
            raise NumericalError("non-finite residual entry", block=name, index=row - start)
    raise NumericalError("non-finite entry", index=row)


def _residual_impl(groups, theta, points):
    parts = []
    for g, x in zip(groups, points):
        vals = jax.vmap(g.fn, in_axes=(None, 0))(theta, x)
        parts.append((vals.T / math.sqrt(x.shape[0])).reshape(-1))
    return jnp.concatenate(parts)


_residual = jax.jit(_residual_impl, static_argnums=0)


@partial(jax.jit, static_argnums=0)
def _jvp(groups, theta, points, v):
    return jax.jvp(lambda t: _residual_impl(groups, t, points), (theta,), (v,))[1]


@partial(jax.jit, static_argnums=0)
def _vjp(groups, theta, points, w):
    _, pullback = jax.vjp(lambda t: _residual_impl(groups, t, points), theta)
    return pullback(w)[0]


@partial(jax.jit, static_argnums=0)
def _gauss_newton_matvec(groups, theta, points, v):
    # linearize once and transpose, rather than tracing the residual for both passes
    _, jvp = jax.linearize(lambda t: _residual_impl(groups, t, points), theta)
    return jax.linear_transpose(jvp, theta)(jvp(v))[0]


@partial(jax.jit, static_argnums=0)
def _point_jacobian(group, theta, x):
    jac = jax.vmap(jax.jacrev(group.fn), in_axes=(None, 0))(theta, x)
    return jnp.transpose(jac, (1, 0, 2))


def _params(params) -> jnp.ndarray:
    return jnp.asarray(getattr(params, "values", params), dtype=float)


def param_jvp(residual: ResidualAssembly, params, v) -> np.ndarray:
    """J v by forward tangent propagation through the whole residual."""
    theta = _params(params)
    v = jnp.asarray(getattr(v, "values", v), dtype=float)
    if v.shape != theta.shape:
        raise ArgumentError(f"tangent has shape {v.shape}, parameters have {theta.shape}")
    out = np.asarray(_jvp(residual.groups, theta, residual.points, v))
    check_finite(out, residual)
    return out


def param_vjp(residual: ResidualAssembly, params, w) -> np.ndarray:
    """J^T w by a reverse pass; J is never formed."""
    theta = _params(params)
    w = jnp.asarray(w, dtype=float)
    if w.shape != (residual.size,):
        raise ArgumentError(f"cotangent has shape {w.shape}, residual has length {residual.size}")
    out = np.asarray(_vjp(residual.groups, theta, residual.points, w))
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite vector-Jacobian product", block="vjp")
    return out


def gauss_newton_product(residual: ResidualAssembly, params, v) -> np.ndarray:
    """J^T (J v) in a single compiled call."""
    theta = _params(params)
    out = np.asarray(_gauss_newton_matvec(residual.groups, theta, residual.points, jnp.asarray(v, dtype=float)))
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Gramian-vector product", block="matvec")
    return out


DEFAULT_BUDGET_BYTES = 2 * 1024**3


def dense_jacobian(residual: ResidualAssembly, params, budget_bytes: int = DEFAULT_BUDGET_BYTES, chunk: int = 1024) -> np.ndarray:
    """Full R x P Jacobian, rows in residual layout order.

    Built point-wise (reverse mode over each point's few outputs) in chunks of
    ``chunk`` points, which keeps peak memory near the size of J itself.
    """
    theta = _params(params)
    nbytes = residual.size * theta.size * 8
    if nbytes > budget_bytes:
        raise CapacityError(
            f"dense Jacobian needs {nbytes / 2**20:.0f} MiB (> budget {budget_bytes / 2**20:.0f} MiB); "
            "use the matrix-free solver (solver = cg)"
        )
    jac = np.empty((residual.size, theta.size))
    row = 0
    for g, x in zip(residual.groups, residual.points):
        n = len(x)
        block = np.empty((g.ncomp, n, theta.size))
        size = min(chunk, n)
        for lo in range(0, n, size):
            part = x[lo : lo + size]
            m = len(part)
            if m < size:  # pad so every call has the same shape and compiles once
                part = np.concatenate([part, np.repeat(part[-1:], size - m, axis=0)])
            block[:, lo : lo + m] = np.asarray(_point_jacobian(g, theta, jnp.asarray(part)))[:, :m]
        block /= math.sqrt(n)
        jac[row : row + g.ncomp * n] = block.reshape(g.ncomp * n, theta.size)
        row += g.ncomp * n
    if not np.all(np.isfinite(jac)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(jac), axis=1))[0])
        check_finite(np.where(np.arange(residual.size) == bad, np.nan, 0.0), residual)
    return jac
