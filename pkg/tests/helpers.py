"""Small problem fixtures shared by unit and acceptance tests."""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np

from gnpinn import autodiff as ad
from gnpinn.flows import get_problem
from gnpinn.network import FlatParams, build_topology, glorot_init
from gnpinn.pde import CollocationSet, divergence_residual, momentum_residual, sample_collocation

SMALL_COUNTS = {
    "kovasznay": {"interior": 25, "boundary": 16},
    "beltrami": {"interior": 60, "boundary": 54, "initial": 16},
    "taylor_green": {"interior": 60, "boundary": 0, "initial": 16},
}


def small_case(name="kovasznay", constraints="soft", width=8, depth=2, seed=0, counts=None, strategy=None):
    problem = get_problem(name, constraints)
    topo = build_topology(problem.dim, problem.unsteady, problem.constraints, width, depth)
    params = glorot_init(topo, seed)
    counts = dict(counts or SMALL_COUNTS[name])
    if not problem.constraints.boundary_soft:
        counts["boundary"] = 0
    if not (problem.unsteady and not problem.constraints.exact_initial):
        counts["initial"] = 0
    if strategy is None:
        strategy = "equidistant_grid" if name == "kovasznay" else "uniform_random"
    colloc = sample_collocation(problem, strategy, counts, seed)
    return problem, params, colloc


def perturbed(params: FlatParams, scale=0.3, seed=1) -> FlatParams:
    """Glorot init has zero biases; add some so every code path is exercised."""
    rng = np.random.default_rng(seed)
    return params.replace(params.values + scale * rng.standard_normal(params.size))


def random_points(problem, n, seed=0, margin=0.0):
    rng = np.random.default_rng(seed)
    bounds = list(problem.domain) + ([problem.time_interval] if problem.unsteady else [])
    lo = np.array([b[0] for b in bounds]) + margin
    hi = np.array([b[1] for b in bounds]) - margin
    return lo + (hi - lo) * rng.random((n, len(bounds)))


def with_interior(colloc: CollocationSet, pts) -> CollocationSet:
    return CollocationSet(np.asarray(pts), colloc.boundary, colloc.initial, colloc.validation)


def exact_interior_residual(problem, pts) -> np.ndarray:
    """Momentum and divergence residuals of the closed-form solution, shape (n, d + 1)."""

    def one(x):
        coords = ad.seed_coordinates(x, 2)
        sol = problem.solution(coords)
        u, p = list(sol[: problem.dim]), sol[problem.dim]
        return jnp.stack(momentum_residual(u, p, problem.nu, None, problem.unsteady) + [divergence_residual(u)])

    return np.asarray(jax.vmap(one)(jnp.asarray(pts)))
