"""Gauss-Newton natural gradient (GNNG) with a logarithmic line search, and Adam.

One GNNG step::

    r, grad = residual(theta), J^T r
    (G + lam I) d = grad,  G = J^T J,  lam = min(1e-5, L)
    eta* = argmin over {1, 1/2, ..., 2^-30, 0} of L(theta - eta d)
    theta <- theta - eta* d

``G`` is either formed densely and Cholesky-factored, or only applied through
Jacobian products inside conjugate gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

from . import autodiff as ad
from .errors import ArgumentError, CapacityError, NumericalError, UnsupportedError
from .network import FlatParams
from .pde import CollocationSet, FlowProblem, momentum_residual, residual_model

log = logging.getLogger(__name__)

MAX_DAMPING = 1e-5
ETA_GRID = np.concatenate([2.0 ** -np.arange(31), [0.0]])


def damping_for(loss: float) -> float:
    return min(MAX_DAMPING, float(loss))


@dataclass(frozen=True, eq=False)
class GramianHandle:
    """Damped Gramian ``G + damping * I``, dense or as a product closure."""

    mode: str
    damping: float
    matrix: Optional[np.ndarray] = None
    product: Optional[Callable] = None  # v -> G v, undamped

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        gv = self.matrix @ v if self.mode == "dense" else self.product(v)
        return gv + self.damping * v


def _assembly(params, colloc, problem):
    return residual_model(problem, params.topology).assembly(colloc)


def gradient(params: FlatParams, colloc: CollocationSet, problem: FlowProblem) -> np.ndarray:
    """grad L = J^T r, by a reverse pass seeded with the residual."""
    asm = _assembly(params, colloc, problem)
    r = asm(params.values)
    return ad.param_vjp(asm, params, r)


def _check_budget(rows: int, cols: int, budget_bytes: int):
    need = 8 * (rows * cols + cols * cols)
    if need > budget_bytes:
        raise CapacityError(
            f"dense Gramian path needs {need / 2**20:.0f} MiB (> budget {budget_bytes / 2**20:.0f} MiB); "
            "use the matrix-free solver (solver = cg)"
        )


def gram(jac: np.ndarray) -> np.ndarray:
    g = jac.T @ jac
    return 0.5 * (g + g.T)


def gramian_dense(params: FlatParams, colloc: CollocationSet, problem: FlowProblem, budget_bytes: int = ad.DEFAULT_BUDGET_BYTES) -> GramianHandle:
    asm = _assembly(params, colloc, problem)
    _check_budget(asm.size, params.size, budget_bytes)
    r = asm(params.values)
    jac = ad.dense_jacobian(asm, params, budget_bytes)
    return GramianHandle("dense", damping_for(0.5 * r @ r), matrix=gram(jac))


def gramian_matvec(params: FlatParams, colloc: CollocationSet, problem: FlowProblem, v) -> np.ndarray:
    """G v = J^T (J v) without forming J."""
    asm = _assembly(params, colloc, problem)
    v = np.asarray(getattr(v, "values", v), dtype=float)
    if v.shape != params.values.shape:
        raise ArgumentError(f"vector has shape {v.shape}, expected {params.values.shape}")
    return ad.gauss_newton_product(asm, params, v)


def gramian_matrix_free(params: FlatParams, colloc: CollocationSet, problem: FlowProblem) -> GramianHandle:
    asm = _assembly(params, colloc, problem)
    r = asm(params.values)
    return GramianHandle(
        "matrix_free", damping_for(0.5 * r @ r), product=lambda v: ad.gauss_newton_product(asm, params, v)
    )


# ---------------------------------------------------------------------------
# linear solves


def solve_direct(gramian, rhs, loss: Optional[float] = None, damping: Optional[float] = None, retries: int = 5) -> np.ndarray:
    """Solve (G + lam I) d = rhs by Cholesky.

    ``lam`` is ``damping`` if given, else ``min(1e-5, loss)``, else the
    handle's own damping.  A failed factorization is retried with ten times
    the damping, up to ``retries`` times.
    """
    if isinstance(gramian, GramianHandle):
        matrix = gramian.matrix
        if matrix is None:
            raise ArgumentError("solve_direct needs a dense Gramian")
        lam = gramian.damping
    else:
        matrix = np.atleast_2d(np.asarray(gramian, dtype=float))
        lam = None
    if damping is not None:
        lam = float(damping)
    elif loss is not None:
        lam = damping_for(loss)
    if lam is None:
        raise ArgumentError("need a loss value or an explicit damping")
    rhs = np.asarray(getattr(rhs, "values", rhs), dtype=float)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    eye = np.eye(matrix.shape[0])
    for attempt in range(retries + 1):
        try:
            factor = scipy.linalg.cho_factor(matrix + lam * eye, lower=True, check_finite=True)
            d = scipy.linalg.cho_solve(factor, rhs)
            if np.all(np.isfinite(d)):
                return d
        except (np.linalg.LinAlgError, ValueError):
            pass
        floor = 1e-14 * max(1.0, float(np.max(np.abs(np.diag(matrix)))))
        log.warning("Cholesky failed with damping %.3e (attempt %d)", lam, attempt + 1)
        lam = max(10.0 * lam, floor)
    evals = np.linalg.eigvalsh(0.5 * (matrix + matrix.T)) if np.all(np.isfinite(matrix)) else np.array([np.nan])
    raise NumericalError(
        f"damped Gramian not factorizable after {retries} retries "
        f"(eigenvalues in [{evals.min():.3e}, {evals.max():.3e}], final damping {lam:.3e})",
        block="solve_direct",
    )


def solve_symmetric(matrix, rhs, damping: float) -> np.ndarray:
    """Damped solve for a symmetric, possibly indefinite matrix (ENGD)."""
    a = np.asarray(matrix) + damping * np.eye(len(matrix))
    d = scipy.linalg.solve(a, rhs, assume_a="sym")
    if not np.all(np.isfinite(d)):
        raise NumericalError("non-finite ENGD direction", block="solve_symmetric")
    return d


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    relative_residual: float


def _cg_core(matvec, b, tol, max_iter, x0):
    bnorm = jnp.linalg.norm(b)
    r = b - matvec(x0)
    p = r
    rr = r @ r

    def cond(c):
        k, x, r, p, rr, best_x, best_res, bad = c
        return (k < max_iter) & (jnp.sqrt(rr) > tol * bnorm) & ~bad

    def body(c):
        k, x, r, p, rr, best_x, best_res, bad = c
        ap = matvec(p)
        alpha = rr / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        res = jnp.sqrt(rr_new)
        bad = ~jnp.isfinite(res) | ~jnp.all(jnp.isfinite(x))
        better = (res < best_res) & ~bad
        best_x = jnp.where(better, x, best_x)
        best_res = jnp.where(better, res, best_res)
        return k + 1, x, r, p, rr_new, best_x, best_res, bad

    init = (0, x0, r, p, rr, x0, jnp.sqrt(rr), jnp.array(False))
    k, x, r, p, rr, best_x, best_res, bad = jax.lax.while_loop(cond, body, init)
    return best_x, k, best_res / jnp.where(bnorm > 0, bnorm, 1.0), bad


def solve_cg(matvec: Callable, rhs, tol: float = 1e-5, max_iter: Optional[int] = None, x0=None) -> CGResult:
    """Conjugate gradients for an SPD operator ``matvec`` (JAX-traceable).

    Stops when ||b - A x|| <= tol ||b|| or after ``max_iter`` iterations; in
    the latter case the iterate with the smallest residual is returned and
    ``converged`` is False.
    """
    b = jnp.asarray(getattr(rhs, "values", rhs), dtype=float)
    max_iter = 10 * b.size if max_iter is None else int(max_iter)
    x0 = jnp.zeros_like(b) if x0 is None else jnp.asarray(x0, dtype=float)
    if not bool(jnp.any(b != 0)):
        return CGResult(np.zeros(b.shape), True, 0, 0.0)
    x, k, rel, bad = jax.jit(partial(_cg_core, matvec), static_argnums=())(b, tol, max_iter, x0)
    return _cg_result(x, k, rel, bad, tol)


def _cg_result(x, k, rel, bad, tol) -> CGResult:
    x = np.asarray(x)
    if bool(bad) or not np.all(np.isfinite(x)):
        raise NumericalError("non-finite conjugate-gradient iterate", block="solve_cg", index=int(k))
    rel = float(rel)
    return CGResult(x, rel <= tol, int(k), rel)


@partial(jax.jit, static_argnums=0)
def _gauss_newton_cg(groups, theta, points, rhs, damping, tol, max_iter, x0):
    f = lambda t: ad._residual_impl(groups, t, points)
    _, f_jvp = jax.linearize(f, theta)
    f_vjp = jax.linear_transpose(f_jvp, theta)
    matvec = lambda v: f_vjp(f_jvp(v))[0] + damping * v
    return _cg_core(matvec, rhs, tol, max_iter, x0)


def solve_cg_gramian(assembly: ad.ResidualAssembly, theta, rhs, damping: float, tol: float, max_iter: int, x0=None) -> CGResult:
    """CG on the damped Gramian with one linearization shared by all iterations."""
    rhs = jnp.asarray(rhs, dtype=float)
    if not bool(jnp.any(rhs != 0)):
        return CGResult(np.zeros(rhs.shape), True, 0, 0.0)
    x0 = jnp.zeros_like(rhs) if x0 is None else jnp.asarray(x0)
    out = _gauss_newton_cg(assembly.groups, jnp.asarray(theta), assembly.points, rhs, damping, tol, max_iter, x0)
    return _cg_result(*out, tol)


# ---------------------------------------------------------------------------
# line search


def grid_argmin(losses, grid=ETA_GRID) -> int:
    """Index of the smallest finite loss; ties go to the larger step."""
    losses = np.where(np.isfinite(losses), losses, np.inf)
    if not np.any(np.isfinite(losses)):
        raise NumericalError("every line-search evaluation is non-finite", block="line_search")
    order = np.argsort(-np.asarray(grid), kind="stable")
    best = order[np.argmin(losses[order])]
    return int(best)


def line_search(params: FlatParams, direction, colloc: CollocationSet, problem: FlowProblem, grid=ETA_GRID) -> tuple[float, float]:
    """Best step on the logarithmic grid for theta - eta * direction; returns (eta, loss)."""
    direction = np.asarray(getattr(direction, "values", direction), dtype=float)
    if not np.all(np.isfinite(direction)):
        raise NumericalError("non-finite search direction", block="line_search")
    model = residual_model(problem, params.topology)
    losses = model.losses_along(colloc, params.values, direction, grid)
    i = grid_argmin(losses, grid)
    return float(grid[i]), float(losses[i])


# ---------------------------------------------------------------------------
# optimizer state and steps


@dataclass(frozen=True, eq=False)
class OptState:
    params: FlatParams
    iteration: int = 0
    loss: float = math.nan
    eta: float = math.nan
    damping: float = math.nan
    cg_iterations: int = 0
    cg_converged: bool = True
    line_search_index: int = -1
    failed: bool = False
    message: str = ""
    direction: Optional[np.ndarray] = None
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None


@dataclass(frozen=True)
class GNNGConfig:
    solver: str = "dense"  # "dense" or "cg"
    cg_tol: float = 1e-5
    cg_max_iter: Optional[int] = None  # default 10 * P
    warm_start: bool = False
    engd: bool = False
    budget_bytes: int = ad.DEFAULT_BUDGET_BYTES

    def __post_init__(self):
        if self.solver not in ("dense", "cg"):
            raise ArgumentError(f"solver must be 'dense' or 'cg', got {self.solver!r}")
        if self.engd and self.solver != "dense":
            raise ArgumentError("ENGD needs the dense solver")


def gnng_direction(state: OptState, colloc: CollocationSet, problem: FlowProblem, config: GNNGConfig):
    """(direction, loss, damping, cg result or None) at ``state.params``."""
    params = state.params
    asm = _assembly(params, colloc, problem)
    r = asm(params.values)
    loss_value = 0.5 * float(r @ r)
    lam = damping_for(loss_value)
    if config.solver == "dense":
        _check_budget(asm.size, params.size, config.budget_bytes)
        jac = ad.dense_jacobian(asm, params, config.budget_bytes)
        grad = jac.T @ r
        g = gram(jac)
        del jac
        if config.engd:
            g = g + engd_hessian_term(params, colloc, problem)
            return solve_symmetric(g, grad, lam), loss_value, lam, None
        return solve_direct(g, grad, damping=lam), loss_value, lam, None
    grad = ad.param_vjp(asm, params, r)
    max_iter = 10 * params.size if config.cg_max_iter is None else config.cg_max_iter
    x0 = state.direction if (config.warm_start and state.direction is not None) else None
    res = solve_cg_gramian(asm, params.values, grad, lam, config.cg_tol, max_iter, x0)
    return res.x, loss_value, lam, res


def gnng_step(state: OptState, colloc: CollocationSet, problem: FlowProblem, config: GNNGConfig = GNNGConfig()) -> OptState:
    """One GNNG iteration; on a numerical failure the parameters are left unchanged."""
    try:
        d, loss_value, lam, cg = gnng_direction(state, colloc, problem, config)
        eta, new_loss = line_search(state.params, d, colloc, problem)
    except NumericalError as exc:
        return replace(state, failed=True, message=str(exc))
    idx = int(np.flatnonzero(ETA_GRID == eta)[0])
    new_params = state.params.replace(state.params.values - eta * d) if eta > 0 else state.params
    return replace(
        state,
        params=new_params,
        iteration=state.iteration + 1,
        loss=new_loss,
        eta=eta,
        damping=lam,
        cg_iterations=0 if cg is None else cg.iterations,
        cg_converged=True if cg is None else cg.converged,
        line_search_index=idx,
        direction=d,
        failed=False,
        message="",
    )


@dataclass(frozen=True)
class AdamSchedule:
    """Piecewise-constant learning rate: ``initial`` before ``hold`` steps, then
    multiplied by ``factor`` at step ``hold`` and again every ``every`` steps."""

    initial: float = 1e-3
    hold: int = 15000
    every: int = 10000
    factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr(self, k: int) -> float:
        if k < self.hold:
            return self.initial
        return self.initial * self.factor ** (1 + (k - self.hold) // self.every)


@partial(jax.jit, static_argnums=0)
def _value_and_grad(groups, theta, points):
    def loss(t):
        r = ad._residual_impl(groups, t, points)
        return 0.5 * jnp.dot(r, r)

    return jax.value_and_grad(loss)(theta)


def adam_step(state: OptState, colloc: CollocationSet, problem: FlowProblem, schedule: AdamSchedule = AdamSchedule()) -> OptState:
    """One Adam update at learning rate ``schedule.lr(state.iteration)``.

    ``state.loss`` after the step is the loss at the parameters the gradient
    was taken at.
    """
    params = state.params
    asm = _assembly(params, colloc, problem)
    value, g = _value_and_grad(asm.groups, jnp.asarray(params.values), asm.points)
    value, g = float(value), np.asarray(g)
    if not (math.isfinite(value) and np.all(np.isfinite(g))):
        return replace(state, failed=True, message="non-finite Adam gradient")
    k = state.iteration
    new, m, v, lr = adam_update(params.values, g, state.adam_m, state.adam_v, k, schedule)
    return replace(state, params=params.replace(new), iteration=k + 1, loss=value, eta=lr, adam_m=m, adam_v=v, failed=False, message="")


def adam_update(x, g, m, v, k: int, schedule: AdamSchedule = AdamSchedule()):
    """Bias-corrected Adam update of ``x`` at step ``k``; returns (x, m, v, lr)."""
    m = np.zeros_like(g) if m is None else m
    v = np.zeros_like(g) if v is None else v
    m = schedule.beta1 * m + (1 - schedule.beta1) * g
    v = schedule.beta2 * v + (1 - schedule.beta2) * g * g
    m_hat = m / (1 - schedule.beta1 ** (k + 1))
    v_hat = v / (1 - schedule.beta2 ** (k + 1))
    lr = schedule.lr(k)
    return x - lr * m_hat / (np.sqrt(v_hat) + schedule.eps), m, v, lr


# ---------------------------------------------------------------------------
# ENGD


def _velocity_tangent_fn(model):
    d = model.problem.dim

    def q(theta, x):
        u, _ = model.ansatz.point_fields(theta, x, velocity_order=1)
        vals = jnp.stack([uk.value for uk in u])
        grads = jnp.stack([jnp.stack([uk.partial(j) for j in range(d)]) for uk in u])
        return vals, grads

    return q


def _momentum_fn(model):
    def res(theta, x):
        coords = ad.seed_coordinates(x, model.ansatz.order)
        u, p = model.ansatz.fields(theta, coords)
        f = None if model.problem.forcing is None else model.problem.forcing([c.value for c in coords])
        return jnp.stack(momentum_residual(u, p, model.problem.nu, f, model.problem.unsteady))

    return res


def engd_hessian_term(params: FlatParams, colloc: CollocationSet, problem: FlowProblem) -> np.ndarray:
    """Residual-weighted convection Hessian.

    H_ij = (1/N) sum_n < res(x_n), (du_i . grad) du_j + (du_j . grad) du_i >(x_n)
    with du_i = d u / d param_i and ``res`` the momentum residual.
    """
    if problem.unsteady:
        raise UnsupportedError("the ENGD Hessian term is only defined for steady problems")
    model = residual_model(problem, params.topology)
    theta = jnp.asarray(params.values)
    x = jnp.asarray(colloc.interior)
    n = x.shape[0]
    res = np.asarray(jax.jit(jax.vmap(_momentum_fn(model), in_axes=(None, 0)))(theta, x))  # (n, d)
    tu, tg = jax.jit(jax.vmap(jax.jacfwd(_velocity_tangent_fn(model)), in_axes=(None, 0)))(theta, x)
    tu, tg = np.asarray(tu), np.asarray(tg)  # (n, d, P), (n, d, d, P): tg[n, k, l] = d_l u_k
    weighted = np.einsum("nk,nklj->nlj", res, tg)
    m = tu.reshape(-1, tu.shape[-1]).T @ weighted.reshape(-1, weighted.shape[-1]) / n
    return m + m.T


def engd_gramian(params: FlatParams, colloc: CollocationSet, problem: FlowProblem, budget_bytes: int = ad.DEFAULT_BUDGET_BYTES) -> GramianHandle:
    """G^GN plus the Hessian term; may be indefinite."""
    if problem.unsteady:
        raise UnsupportedError("ENGD is only available for steady problems")
    gn = gramian_dense(params, colloc, problem, budget_bytes)
    return GramianHandle("dense", gn.damping, matrix=gn.matrix + engd_hessian_term(params, colloc, problem))
