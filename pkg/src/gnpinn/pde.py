"""Navier-Stokes residuals, collocation sampling and the least-squares loss.

The discrete residual stacks, in this order, the momentum equations (one block
per velocity component), the divergence, the boundary mismatch (one block per
component) and the initial mismatch (one block per component).  Every entry
of a block over N points carries the factor 1/sqrt(N), so ``0.5 * |r|^2`` is a
quadrature estimate of the continuous energy.  Blocks whose condition is
imposed exactly by the ansatz are omitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import autodiff as ad
from .autodiff import Jet, PointGroup, ResidualAssembly
from .errors import ArgumentError
from .network import Ansatz, ConstraintMode, FlatParams, Topology


@dataclass(frozen=True)
class FlowProblem:
    """A benchmark: geometry, viscosity, closed-form solution and constraint mode.

    ``solution(coords)`` takes a sequence of coordinates ``(x, y[, z][, t])``
    (jets or arrays) and returns ``(u_1, ..., u_d, p)``.  Boundary and initial
    data are that solution restricted to the boundary / to t = 0.
    """

    name: str
    dim: int
    unsteady: bool
    nu: float
    domain: tuple[tuple[float, float], ...]
    solution: Callable
    constraints: ConstraintMode = ConstraintMode()
    time_interval: Optional[tuple[float, float]] = None
    forcing: Optional[Callable] = None

    def __post_init__(self):
        if self.nu <= 0:
            raise ArgumentError(f"viscosity must be positive, got {self.nu}")
        if len(self.domain) != self.dim:
            raise ArgumentError(f"domain has {len(self.domain)} axes for d={self.dim}")
        if self.unsteady and self.time_interval is None:
            raise ArgumentError("unsteady problems need a time interval")
        self.constraints.validate(self.dim, self.unsteady)

    @property
    def n_coords(self) -> int:
        return self.dim + int(self.unsteady)

    @property
    def components(self) -> tuple[str, ...]:
        return ("u", "v", "w")[: self.dim] + ("p",)

    @property
    def final_time(self) -> Optional[float]:
        return self.time_interval[1] if self.unsteady else None

    def initial_velocity(self, spatial_coords):
        """u_0 as a function of spatial coordinates (jets or arrays)."""
        x0 = spatial_coords[0]
        t0 = x0 * 0.0 if not isinstance(x0, Jet) else ad.constant_jet(jnp.zeros_like(x0.value), x0.space)
        return list(self.solution(list(spatial_coords) + [t0])[: self.dim])


@dataclass(frozen=True)
class CollocationSet:
    interior: np.ndarray
    boundary: np.ndarray
    initial: np.ndarray
    validation: np.ndarray

    @property
    def counts(self) -> dict:
        return {"interior": len(self.interior), "boundary": len(self.boundary), "initial": len(self.initial)}


@dataclass(frozen=True)
class Block:
    name: str
    ncomp: int
    npoints: int

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.npoints)

    @property
    def size(self) -> int:
        return self.ncomp * self.npoints


@dataclass(frozen=True)
class ResidualLayout:
    blocks: tuple[Block, ...]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def slice(self, name: str) -> slice:
        start = 0
        for b in self.blocks:
            if b.name == name:
                return slice(start, start + b.size)
            start += b.size
        raise KeyError(name)

    def get(self, name: str) -> Block:
        return next(b for b in self.blocks if b.name == name)


@dataclass(frozen=True, eq=False)
class ResidualVector:
    values: np.ndarray
    layout: ResidualLayout

    def block(self, name: str) -> np.ndarray:
        """Scaled entries of one block, shape (ncomp, npoints)."""
        b = self.layout.get(name)
        return self.values[self.layout.slice(name)].reshape(b.ncomp, b.npoints)

    @classmethod
    def from_blocks(cls, layout: ResidualLayout, blocks: dict) -> "ResidualVector":
        return cls(np.concatenate([np.ravel(blocks[b.name]) for b in layout.blocks]), layout)

    def partial_losses(self) -> dict:
        return {b.name: 0.5 * float(np.sum(self.block(b.name) ** 2)) for b in self.layout.blocks}


# ---------------------------------------------------------------------------
# operators


def _require_order(jets: Sequence[Jet], order: int):
    for j in jets:
        if not isinstance(j, Jet) or j.order < order:
            raise ArgumentError(f"operator needs jets of order >= {order}")


def momentum_residual(u: Sequence[Jet], p: Jet, nu: float, f=None, unsteady: bool = False) -> list:
    """[d_t u_k] - nu lap u_k + sum_j u_j d_j u_k + d_k p - f_k for each k.

    Spatial variables are the first ``len(u)`` jet variables; time (if
    unsteady) is the next one.
    """
    _require_order(list(u) + [p], 2)
    d = len(u)
    spatial = range(d)
    out = []
    for k in range(d):
        uk = u[k]
        res = -nu * uk.laplacian(spatial) + sum(u[j].value * uk.partial(j) for j in spatial) + p.partial(k)
        if unsteady:
            res = res + uk.partial(d)
        if f is not None:
            res = res - f[k]
        out.append(res)
    return out


def divergence_residual(u: Sequence[Jet]):
    _require_order(u, 1)
    return sum(u[k].partial(k) for k in range(len(u)))


def boundary_residual(u_value, g_value):
    u_value, g_value = jnp.asarray(u_value), jnp.asarray(g_value)
    if u_value.shape != g_value.shape:
        raise ArgumentError(f"shape mismatch {u_value.shape} vs {g_value.shape}")
    return u_value - g_value


def initial_residual(u0_pred, u0_true):
    return boundary_residual(u0_pred, u0_true)


# ---------------------------------------------------------------------------
# assembly


def make_ansatz(problem: FlowProblem, topology: Topology) -> Ansatz:
    return Ansatz(
        topology=topology,
        constraints=problem.constraints,
        dim=problem.dim,
        unsteady=problem.unsteady,
        initial_velocity=problem.initial_velocity,
    )


class ResidualModel:
    """Pointwise residual functions of one (problem, topology) pair.

    Built once and reused, so JAX compiles each residual kernel once per
    collocation-set shape.
    """

    def __init__(self, problem: FlowProblem, topology: Topology):
        self.problem = problem
        self.topology = topology
        self.ansatz = make_ansatz(problem, topology)
        c = problem.constraints
        d = problem.dim
        self.has_divergence = not c.divergence_free
        self.has_boundary = c.boundary_soft
        self.has_initial = problem.unsteady and not c.exact_initial
        n_int = d + int(self.has_divergence)
        self.interior_group = PointGroup("interior", self._interior, n_int)
        self.boundary_group = PointGroup("boundary", self._dirichlet, d)
        self.initial_group = PointGroup("initial", self._dirichlet, d)

    def _interior(self, theta, x):
        coords = ad.seed_coordinates(x, self.ansatz.order)
        u, p = self.ansatz.fields(theta, coords)
        f = None if self.problem.forcing is None else self.problem.forcing([c.value for c in coords])
        out = momentum_residual(u, p, self.problem.nu, f, self.problem.unsteady)
        if self.has_divergence:
            out.append(divergence_residual(u))
        return jnp.stack(out)

    def _dirichlet(self, theta, x):
        u, _ = self.ansatz.point_fields(theta, x, velocity_order=0)
        exact = self.problem.solution(list(x))[: self.problem.dim]
        return boundary_residual(jnp.stack([uk.value for uk in u]), jnp.stack(exact))

    def groups_and_points(self, colloc: CollocationSet):
        groups, points = [self.interior_group], [colloc.interior]
        if self.has_boundary:
            groups.append(self.boundary_group)
            points.append(colloc.boundary)
        if self.has_initial:
            groups.append(self.initial_group)
            points.append(colloc.initial)
        for g, pts in zip(groups, points):
            if len(pts) == 0:
                raise ArgumentError(f"collocation set has no points for active block {g.name!r}")
        return tuple(groups), tuple(np.asarray(p, dtype=np.float64) for p in points)

    def assembly(self, colloc: CollocationSet) -> ResidualAssembly:
        groups, points = self.groups_and_points(colloc)
        return ResidualAssembly(groups, points)

    def layout(self, colloc: CollocationSet) -> ResidualLayout:
        d = self.problem.dim
        blocks = [Block("momentum", d, len(colloc.interior))]
        if self.has_divergence:
            blocks.append(Block("divergence", 1, len(colloc.interior)))
        if self.has_boundary:
            blocks.append(Block("boundary", d, len(colloc.boundary)))
        if self.has_initial:
            blocks.append(Block("initial", d, len(colloc.initial)))
        return ResidualLayout(tuple(blocks))

    def loss_fn(self, colloc: CollocationSet) -> Callable:
        """Compiled ``theta -> L(theta)`` for this collocation set."""
        assembly = self.assembly(colloc)
        return partial(_loss, assembly.groups, points=assembly.points)

    def losses_along(self, colloc: CollocationSet, theta, direction, steps) -> np.ndarray:
        """L(theta - eta * direction) for every eta in ``steps``."""
        assembly = self.assembly(colloc)
        return np.asarray(
            _losses_along(assembly.groups, assembly.points, jnp.asarray(theta), jnp.asarray(direction), jnp.asarray(steps))
        )


@partial(jax.jit, static_argnums=0)
def _loss(groups, theta, points):
    r = ad._residual_impl(groups, theta, points)
    return 0.5 * jnp.dot(r, r)


@partial(jax.jit, static_argnums=0)
def _losses_along(groups, points, theta, direction, steps):
    def one(eta):
        r = ad._residual_impl(groups, theta - eta * direction, points)
        return 0.5 * jnp.dot(r, r)

    return jax.lax.map(one, steps)


@lru_cache(maxsize=32)
def residual_model(problem: FlowProblem, topology: Topology) -> ResidualModel:
    return ResidualModel(problem, topology)


def assemble_residual(params: FlatParams, colloc: CollocationSet, problem: FlowProblem) -> ResidualVector:
    model = residual_model(problem, params.topology)
    values = model.assembly(colloc)(params.values)
    return ResidualVector(values, model.layout(colloc))


@dataclass(frozen=True)
class LossValue:
    total: float
    parts: dict


def loss_from_residual(r: ResidualVector) -> LossValue:
    return LossValue(0.5 * float(np.dot(r.values, r.values)), r.partial_losses())


def loss(params: FlatParams, colloc: CollocationSet, problem: FlowProblem) -> LossValue:
    """L = 0.5 |r|^2 with per-block partial sums."""
    return loss_from_residual(assemble_residual(params, colloc, problem))


# ---------------------------------------------------------------------------
# sampling


def _grid(bounds, shape):
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _int_root(n: int, d: int) -> Optional[int]:
    k = round(n ** (1.0 / d))
    for c in (k - 1, k, k + 1):
        if c > 0 and c**d == n:
            return c
    return None


def validation_shape(bounds, count: int) -> tuple[int, ...]:
    """Grid shape with about ``count`` nodes and spacing matched to the box.

    In 2D an exact factorization of ``count`` is used when one exists with a
    reasonable aspect ratio, so 26010 -> 153 x 170 on [-0.5, 1] x [-0.5, 1.5].
    """
    lengths = np.array([hi - lo for lo, hi in bounds], dtype=float)
    d = len(bounds)
    if d == 2:
        target = lengths[0] / lengths[1]
        best = None
        for nx in range(2, int(math.isqrt(count) * 4) + 1):
            if count % nx:
                continue
            ny = count // nx
            if ny < 2:
                continue
            err = abs(math.log(((nx - 1) / (ny - 1)) / target))
            if best is None or err < best[0]:
                best = (err, (nx, ny))
        if best is not None and best[0] < math.log(1.5):
            return best[1]
    scale = (count / np.prod(lengths)) ** (1.0 / d)
    return tuple(max(2, int(math.ceil(scale * L))) for L in lengths)


def _boundary_points_2d(bounds, count):
    if count % 4:
        raise ArgumentError(f"2D boundary count must split over 4 edges, got {count}")
    k = count // 4
    (x0, x1), (y0, y1) = bounds
    s = np.linspace(0.0, 1.0, k, endpoint=False)
    edges = [
        np.stack([x0 + (x1 - x0) * s, np.full(k, y0)], 1),
        np.stack([np.full(k, x1), y0 + (y1 - y0) * s], 1),
        np.stack([x1 - (x1 - x0) * s, np.full(k, y1)], 1),
        np.stack([np.full(k, x0), y1 - (y1 - y0) * s], 1),
    ]
    return np.concatenate(edges)


def _boundary_points_3d(bounds, count):
    if count % 6:
        raise ArgumentError(f"3D boundary count must split over 6 faces, got {count}")
    k = _int_root(count // 6, 2)
    if k is None:
        raise ArgumentError(f"3D boundary count per face must be a square, got {count // 6}")
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        face = _grid([bounds[a] for a in others], (k, k))
        for side in bounds[axis]:
            pts = np.empty((k * k, 3))
            pts[:, others] = face
            pts[:, axis] = side
            faces.append(pts)
    return np.concatenate(faces)


STRATEGIES = ("equidistant_grid", "uniform_random")


def sample_collocation(problem: FlowProblem, strategy: str, counts: dict, seed: int, validation_factor: int = 10) -> CollocationSet:
    """Interior, boundary, initial and validation points for ``problem``.

    ``counts`` has keys ``interior``, ``boundary`` and ``initial`` (the last two
    may be 0 when the corresponding block is hard-constrained).  Boundary
    points are equidistant per edge/face; their time coordinates, if any, are
    uniform random.  Validation points form a grid with ``validation_factor``
    times the interior count, at the final time for unsteady problems.
    """
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown sampling strategy {strategy!r}; expected one of {STRATEGIES}")
    rng = np.random.default_rng(seed)
    d = problem.dim
    bounds = list(problem.domain)
    n_int = int(counts.get("interior", 0))
    n_bdry = int(counts.get("boundary", 0))
    n_init = int(counts.get("initial", 0))
    if n_int <= 0:
        raise ArgumentError("need a positive interior count")
    space_time = bounds + ([problem.time_interval] if problem.unsteady else [])

    if strategy == "equidistant_grid":
        k = _int_root(n_int, len(space_time))
        if k is None:
            raise ArgumentError(f"interior count {n_int} is not a perfect power for a {len(space_time)}-axis grid")
        interior = _grid(space_time, (k,) * len(space_time))
    else:
        lo = np.array([b[0] for b in space_time])
        hi = np.array([b[1] for b in space_time])
        interior = lo + (hi - lo) * rng.random((n_int, len(space_time)))

    boundary = np.empty((0, problem.n_coords))
    if n_bdry:
        spatial = _boundary_points_2d(bounds, n_bdry) if d == 2 else _boundary_points_3d(bounds, n_bdry)
        if problem.unsteady:
            t0, t1 = problem.time_interval
            spatial = np.concatenate([spatial, t0 + (t1 - t0) * rng.random((len(spatial), 1))], axis=1)
        boundary = spatial

    initial = np.empty((0, problem.n_coords))
    if n_init:
        if not problem.unsteady:
            raise ArgumentError("initial points requested for a steady problem")
        k = _int_root(n_init, d)
        if k is not None:
            spatial = _grid(bounds, (k,) * d)
        else:
            lo = np.array([b[0] for b in bounds])
            hi = np.array([b[1] for b in bounds])
            spatial = lo + (hi - lo) * rng.random((n_init, d))
        initial = np.concatenate([spatial, np.full((len(spatial), 1), problem.time_interval[0])], axis=1)

    shape = validation_shape(bounds, validation_factor * n_int)
    validation = _grid(bounds, shape)
    if problem.unsteady:
        validation = np.concatenate([validation, np.full((len(validation), 1), problem.final_time)], axis=1)
    return CollocationSet(interior, boundary, initial, validation)
