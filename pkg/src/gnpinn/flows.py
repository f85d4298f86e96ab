"""Closed-form benchmark flows, relative L2 evaluation and pushforward export."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import cos, exp, sin
from .errors import ArgumentError
from .network import ConstraintMode, FlatParams
from .pde import FlowProblem, residual_model

TWO_PI = 2.0 * math.pi

KOVASZNAY_NU = 1.0 / 40.0
BELTRAMI_NU = 1.0
TAYLOR_GREEN_NU = 1.0 / 500.0


def kovasznay_lambda(nu: float = KOVASZNAY_NU) -> float:
    # rationalized to avoid cancelling a - sqrt(a^2 + b)
    a = 1.0 / (2.0 * nu)
    return -4.0 * math.pi**2 / (a + math.sqrt(a * a + 4.0 * math.pi**2))


def kovasznay_solution(x, y, nu: float = KOVASZNAY_NU):
    lam = kovasznay_lambda(nu)
    e = exp(x * lam)
    u = 1.0 - e * cos(y * TWO_PI)
    v = e * sin(y * TWO_PI) * (lam / TWO_PI)
    p = 0.5 * (1.0 - exp(x * (2.0 * lam)))
    return u, v, p


def beltrami_solution(x, y, z, t):
    """Ethier-Steinman flow with a = d = 1 (Re = 1)."""
    decay = exp(-t)
    ex, ey, ez = exp(x), exp(y), exp(z)
    sxy, syz, szx = sin(x + y), sin(y + z), sin(z + x)
    cxy, cyz, czx = cos(x + y), cos(y + z), cos(z + x)
    u = -(ex * syz + ez * cxy) * decay
    v = -(ey * szx + ex * cyz) * decay
    w = -(ez * sxy + ey * czx) * decay
    p = -0.5 * (
        exp(x * 2.0)
        + exp(y * 2.0)
        + exp(z * 2.0)
        + 2.0 * sxy * czx * exp(y + z)
        + 2.0 * syz * cxy * exp(z + x)
        + 2.0 * szx * cyz * exp(x + y)
    ) * exp(t * -2.0)
    return u, v, w, p


def taylor_green_solution(x, y, t, nu: float = TAYLOR_GREEN_NU):
    f = exp(t * (-2.0 * nu))
    u = sin(x) * cos(y) * f
    v = -(cos(x) * sin(y) * f)
    p = 0.25 * (cos(x * 2.0) + cos(y * 2.0)) * (f * f)
    return u, v, p


def _kovasznay(coords):
    return kovasznay_solution(coords[0], coords[1])


def _beltrami(coords):
    return beltrami_solution(*coords[:4])


def _taylor_green(coords):
    return taylor_green_solution(coords[0], coords[1], coords[2])


PROBLEMS = ("kovasznay", "beltrami", "taylor_green")
CONSTRAINT_MODES = ("soft", "hard")


def constraint_mode(problem: str, mode: str) -> ConstraintMode:
    if mode not in CONSTRAINT_MODES:
        raise ArgumentError(f"constraints must be one of {CONSTRAINT_MODES}, got {mode!r}")
    hard = mode == "hard"
    if problem == "kovasznay":
        return ConstraintMode(divergence_free=hard)
    if problem == "beltrami":
        return ConstraintMode(divergence_free=hard, exact_initial=hard)
    if problem == "taylor_green":
        # periodicity is always built in; "soft" keeps divergence and initial data in the loss
        return ConstraintMode(divergence_free=hard, exact_initial=hard, periods=(TWO_PI, TWO_PI), boundary_soft=False)
    raise ArgumentError(f"unknown problem {problem!r}; expected one of {PROBLEMS}")


@lru_cache(maxsize=None)
def get_problem(name: str, constraints: str = "soft") -> FlowProblem:
    mode = constraint_mode(name, constraints)
    if name == "kovasznay":
        return FlowProblem("kovasznay", 2, False, KOVASZNAY_NU, ((-0.5, 1.0), (-0.5, 1.5)), _kovasznay, mode)
    if name == "beltrami":
        return FlowProblem("beltrami", 3, True, BELTRAMI_NU, ((-1.0, 1.0),) * 3, _beltrami, mode, (0.0, 1.0))
    return FlowProblem("taylor_green", 2, True, TAYLOR_GREEN_NU, ((0.0, TWO_PI),) * 2, _taylor_green, mode, (0.0, 10.0))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ErrorReport:
    components: tuple[str, ...]
    errors: tuple[float, ...]
    time: Optional[float]
    n_points: int

    @property
    def mean(self) -> float:
        return float(sum(self.errors) / len(self.errors))

    def as_dict(self) -> dict:
        out = {f"e_{c}": e for c, e in zip(self.components, self.errors)}
        out["E_m"] = self.mean
        return out


def relative_errors(pred, true, components: Sequence[str], center_pressure: bool = True) -> tuple[float, ...]:
    """Per-component ||pred - true|| / ||true|| over columns of (n, ncomp) arrays.

    Pressure (component ``"p"``) is compared after removing each field's mean.
    """
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    errs = []
    for k, name in enumerate(components):
        a, b = pred[:, k], true[:, k]
        if name == "p" and center_pressure:
            a, b = a - a.mean(), b - b.mean()
        norm = np.linalg.norm(b)
        if norm == 0.0:
            raise ArgumentError(f"true component {name!r} has zero norm; relative error undefined")
        errs.append(float(np.linalg.norm(a - b) / norm))
    return tuple(errs)


@partial(jax.jit, static_argnums=0)
def _predict(ansatz, theta, x):
    return jax.vmap(ansatz.values, in_axes=(None, 0))(theta, x)


def predict(params: FlatParams, problem: FlowProblem, points, chunk: int = 4096) -> np.ndarray:
    """Network (u_1..u_d, p) at each row of ``points``, shape (n, d + 1)."""
    ansatz = residual_model(problem, params.topology).ansatz
    theta = jnp.asarray(params.values)
    points = np.asarray(points, dtype=float)
    out = [np.asarray(_predict(ansatz, theta, jnp.asarray(points[lo : lo + chunk]))) for lo in range(0, len(points), chunk)]
    return np.concatenate(out)


def exact_values(problem: FlowProblem, points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    cols = [np.asarray(c) for c in problem.solution([points[:, i] for i in range(points.shape[1])])]
    return np.stack(cols, axis=1)


def relative_l2(params: FlatParams, problem: FlowProblem, eval_points, time_slice: Optional[float] = None, n_train: Optional[int] = None) -> ErrorReport:
    """Relative L2 error per component and their mean E_m.

    Unsteady problems are evaluated on the spatial points at ``time_slice``
    (default: the final time).
    """
    points = np.array(eval_points, dtype=float)
    if n_train is not None and len(points) < 10 * n_train:
        raise ArgumentError(f"{len(points)} evaluation points is fewer than 10x the {n_train} training points")
    t = None
    if problem.unsteady:
        t = problem.final_time if time_slice is None else float(time_slice)
        points[:, problem.dim] = t
    errs = relative_errors(predict(params, problem, points), exact_values(problem, points), problem.components)
    return ErrorReport(problem.components, errs, t, len(points))


# ---------------------------------------------------------------------------
# pushforward of parameter directions


@partial(jax.jit, static_argnums=0)
def _push(ansatz, theta, direction, x):
    f = lambda t: jax.vmap(ansatz.values, in_axes=(None, 0))(t, x)
    return jax.jvp(f, (theta,), (direction,))


@dataclass(frozen=True, eq=False)
class FieldExport:
    points: np.ndarray
    coord_names: tuple[str, ...]
    fields: dict  # name -> (n,) array


def _normed(a):
    m = np.max(np.abs(a))
    return a / m if m > 0 else a


def pushforward_field(params: FlatParams, problem: FlowProblem, direction, grid, normalize: bool = True, prefix: str = "push") -> FieldExport:
    """Sum_i direction_i * d(network output)/d(param_i) on ``grid``, plus the error u_theta - u*.

    With ``normalize`` each exported field is scaled by its max-abs value.
    """
    ansatz = residual_model(problem, params.topology).ansatz
    grid = np.asarray(grid, dtype=float)
    direction = np.asarray(getattr(direction, "values", direction), dtype=float)
    if direction.shape != params.values.shape:
        raise ArgumentError(f"direction has shape {direction.shape}, expected {params.values.shape}")
    values, push = _push(ansatz, jnp.asarray(params.values), jnp.asarray(direction), jnp.asarray(grid))
    values, push = np.asarray(values), np.asarray(push)
    err = values - exact_values(problem, grid)
    fields = {}
    for k, c in enumerate(problem.components):
        fields[f"{prefix}_{c}"] = push[:, k]
    for k, c in enumerate(problem.components):
        fields[f"error_{c}"] = err[:, k]
    if normalize:
        fields = {k: _normed(v) for k, v in fields.items()}
    names = ("x", "y", "z")[: problem.dim] + (("t",) if problem.unsteady else ())
    return FieldExport(grid, names, fields)


def merge_exports(*exports: FieldExport) -> FieldExport:
    fields = {}
    for e in exports:
        fields.update(e.fields)
    return FieldExport(exports[0].points, exports[0].coord_names, fields)


def _current_umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


_UMASK = _current_umask()


def atomic_write_text(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_fields_csv(export: FieldExport, path: str):
    """Long-format CSV: coordinates, component, value."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(export.coord_names) + ["component", "value"])
    for name, vals in export.fields.items():
        for pt, val in zip(export.points, vals):
            writer.writerow([repr(float(c)) for c in pt] + [name, repr(float(val))])
    atomic_write_text(path, buf.getvalue())
