"""Experiment runner: configuration, training loop, reports and checkpoints."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import optim
from .errors import ArgumentError, CapacityError, ConfigError
from .flows import (
    CONSTRAINT_MODES,
    PROBLEMS,
    ErrorReport,
    atomic_write_text,
    export_fields_csv,
    get_problem,
    merge_exports,
    pushforward_field,
    relative_l2,
)
from .network import FlatParams, Topology, build_topology, glorot_init
from .pde import STRATEGIES, CollocationSet, loss, sample_collocation

OPTIMIZERS = ("gnng", "adam")
SOLVERS = ("dense", "cg")

# iteration budgets: (optimizer, solver) -> iterations
DEFAULT_ITERS = {("gnng", "dense"): 5000, ("adam", "dense"): 200_000, ("gnng", "cg"): 1000, ("adam", "cg"): 100_000}
DEFAULT_EVAL_EVERY = {"gnng": 10, "adam": 1000}
DEFAULT_CONSTRAINTS = {"kovasznay": "soft", "beltrami": "soft", "taylor_green": "hard"}
DEFAULT_STRATEGY = {"kovasznay": "equidistant_grid", "beltrami": "uniform_random", "taylor_green": "uniform_random"}
# (interior, boundary, initial) for the soft problem; hard constraints drop the blocks they satisfy
DEFAULT_COUNTS = {"kovasznay": (2601, 400, 0), "beltrami": (10_000, 5766, 961), "taylor_green": (8000, 0, 961)}

LOSS_COLUMNS = (("loss_momentum", "momentum"), ("loss_div", "divergence"), ("loss_bdry", "boundary"), ("loss_init", "initial"))


@dataclass(frozen=True)
class RunConfig:
    """One training run.  ``None`` fields are filled in by :meth:`resolved`."""

    problem: str = "kovasznay"
    constraints: Optional[str] = None
    width: int = 50
    depth: int = 4
    optimizer: str = "gnng"
    solver: str = "dense"
    iters: Optional[int] = None
    seed: int = 0
    strategy: Optional[str] = None
    interior: Optional[int] = None
    boundary: Optional[int] = None
    initial: Optional[int] = None
    eval_every: Optional[int] = None
    cg_tol: float = 1e-5
    cg_max_iter: Optional[int] = None
    warm_start: bool = False
    engd: bool = False
    budget_mb: int = 2048  # cap on dense Jacobian + Gramian memory
    out: Optional[str] = None
    wall_time: bool = True

    def resolved(self) -> "RunConfig":
        self._check_enum("problem", self.problem, PROBLEMS)
        constraints = self.constraints or DEFAULT_CONSTRAINTS[self.problem]
        self._check_enum("constraints", constraints, CONSTRAINT_MODES)
        self._check_enum("optimizer", self.optimizer, OPTIMIZERS)
        self._check_enum("solver", self.solver, SOLVERS)
        strategy = self.strategy or DEFAULT_STRATEGY[self.problem]
        self._check_enum("strategy", strategy, STRATEGIES)

        mode = get_problem(self.problem, constraints).constraints
        n_int, n_bdry, n_init = DEFAULT_COUNTS[self.problem]
        if not mode.boundary_soft:
            n_bdry = 0
        if mode.exact_initial:
            n_init = 0
        cfg = replace(
            self,
            constraints=constraints,
            strategy=strategy,
            iters=DEFAULT_ITERS[(self.optimizer, self.solver)] if self.iters is None else self.iters,
            interior=n_int if self.interior is None else self.interior,
            boundary=n_bdry if self.boundary is None else self.boundary,
            initial=n_init if self.initial is None else self.initial,
            eval_every=DEFAULT_EVAL_EVERY[self.optimizer] if self.eval_every is None else self.eval_every,
        )
        cfg._validate()
        return cfg

    @staticmethod
    def _check_enum(key, value, allowed):
        if value not in allowed:
            raise ConfigError(f"must be one of {allowed}, got {value!r}", key=key)

    def _validate(self):
        for key in ("iters", "width", "depth", "interior", "eval_every", "budget_mb"):
            if getattr(self, key) <= 0:
                raise ConfigError("must be positive", key=key)
        for key in ("boundary", "initial", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError("must be non-negative", key=key)
        if not self.cg_tol > 0:
            raise ConfigError("must be positive", key="cg_tol")
        problem = get_problem(self.problem, self.constraints)
        if self.engd:
            if problem.unsteady:
                raise ConfigError("ENGD is only available for steady problems", key="engd")
            if self.solver != "dense":
                raise ConfigError("ENGD needs the dense solver", key="engd")
            if self.optimizer != "gnng":
                raise ConfigError("ENGD is a GNNG variant", key="engd")
        if self.initial and not problem.unsteady:
            raise ConfigError("initial points only apply to unsteady problems", key="initial")
        if self.boundary and not problem.constraints.boundary_soft:
            raise ConfigError("this problem has no boundary term", key="boundary")
        if self.initial and problem.constraints.exact_initial:
            raise ConfigError("hard constraints satisfy the initial condition exactly", key="initial")

    def gnng_config(self) -> optim.GNNGConfig:
        return optim.GNNGConfig(self.solver, self.cg_tol, self.cg_max_iter, self.warm_start, self.engd, self.budget_mb * 2**20)


# ---------------------------------------------------------------------------
# configuration parsing

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str, line: Optional[int] = None):
    kind = _field_types()[key]
    optional = kind.startswith("Optional[")
    base = kind[len("Optional[") : -1] if optional else kind
    if optional and text.lower() in ("", "none", "default"):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {base}", key=key, line=line) from None
    return text


def _parse_text(text: str) -> dict:
    known = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in content.split("=", 1))
        if key not in known:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("key given twice", key=key, line=lineno)
        values[key] = _convert(key, value, lineno)
    return values


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Resolved RunConfig from a ``key = value`` file, with ``overrides`` taking precedence.

    Blank lines and ``#`` comments are ignored.  Override values may be
    strings (converted like file values) or already-typed values; ``None``
    means "not given".
    """
    values = {}
    if path is not None:
        with open(path) as fh:
            values = _parse_text(fh.read())
    known = _field_types()
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError("unknown key", key=key)
        if value is None:
            continue
        values[key] = _convert(key, value) if isinstance(value, str) else value
    return RunConfig(**values).resolved()


# ---------------------------------------------------------------------------
# reports


@dataclass(eq=True)
class TrainReport:
    config: RunConfig
    components: tuple[str, ...]
    records: list = field(default_factory=list)  # one dict per checkpoint, keyed by csv_columns()
    final: Optional[ErrorReport] = None
    failure: Optional[dict] = None  # {"iteration", "message"} when the run stopped early

    def csv_columns(self) -> list:
        return csv_columns(self.components)

    def to_dict(self) -> dict:
        final = None
        if self.final is not None:
            final = {"components": list(self.final.components), "errors": list(self.final.errors), "time": self.final.time, "n_points": self.final.n_points, "E_m": self.final.mean}
        return {"config": asdict(self.config), "components": list(self.components), "records": self.records, "final": final, "failure": self.failure}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainReport":
        final = data.get("final")
        if final is not None:
            final = ErrorReport(tuple(final["components"]), tuple(final["errors"]), final["time"], final["n_points"])
        return cls(RunConfig(**data["config"]), tuple(data["components"]), list(data["records"]), final, data.get("failure"))


def csv_columns(components) -> list:
    cols = ["iteration", "loss"] + [c for c, _ in LOSS_COLUMNS]
    cols += [f"e_{c}" for c in components]
    return cols + ["E_m", "eta", "cg_iters", "wall_ms"]


def _report_csv(report: TrainReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = report.csv_columns()
    writer.writerow(cols)
    for rec in report.records:
        writer.writerow([rec[c] if isinstance(rec[c], int) else repr(float(rec[c])) for c in cols])
    return buf.getvalue()


def emit_report(report: TrainReport, fmt: str, directory: str) -> str:
    """Write ``report.csv`` or ``report.json`` into ``directory`` atomically; returns the path."""
    if fmt not in ("csv", "json"):
        raise ArgumentError(f"format must be 'csv' or 'json', got {fmt!r}")
    if not os.path.isdir(directory):
        raise OSError(f"report directory {directory!r} does not exist")
    path = os.path.join(directory, f"report.{fmt}")
    text = _report_csv(report) if fmt == "csv" else json.dumps(report.to_dict(), indent=1, allow_nan=False)
    atomic_write_text(path, text)
    return path


def load_report(path: str) -> TrainReport:
    with open(path) as fh:
        return TrainReport.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# parameter checkpoints


def save_params(params: FlatParams, path: str, meta: Optional[dict] = None):
    """Little-endian float64 values at ``path`` plus a JSON sidecar ``path + '.json'``."""
    directory = os.path.dirname(os.path.abspath(path))
    tmp = os.path.join(directory, f".tmp-{os.path.basename(path)}")
    with open(tmp, "wb") as fh:
        fh.write(np.asarray(params.values, dtype="<f8").tobytes())
    os.replace(tmp, path)
    sidecar = {"topology": params.topology.to_dict(), "size": params.size, **(meta or {})}
    atomic_write_text(path + ".json", json.dumps(sidecar, indent=1))


def load_params(path: str) -> tuple[FlatParams, dict]:
    if os.path.isdir(path):
        path = os.path.join(path, "params.bin")
    with open(path + ".json") as fh:
        meta = json.load(fh)
    values = np.fromfile(path, dtype="<f8").astype(np.float64)
    topo = Topology.from_dict(meta["topology"])
    if values.size != meta["size"]:
        raise ArgumentError(f"{path} holds {values.size} values, sidecar says {meta['size']}")
    return FlatParams(values, topo), meta


# ---------------------------------------------------------------------------
# training


def setup(config: RunConfig):
    """(problem, initial params, collocation) for a resolved config."""
    problem = get_problem(config.problem, config.constraints)
    topo = build_topology(problem.dim, problem.unsteady, problem.constraints, config.width, config.depth)
    params = glorot_init(topo, config.seed)
    counts = {"interior": config.interior, "boundary": config.boundary, "initial": config.initial}
    colloc = sample_collocation(problem, config.strategy, counts, config.seed)
    return problem, params, colloc


def _record(iteration, params, colloc, problem, n_train, eta, cg_iters, wall_ms) -> tuple[dict, ErrorReport]:
    value = loss(params, colloc, problem)
    err = relative_l2(params, problem, colloc.validation, n_train=n_train)
    rec = {"iteration": iteration, "loss": value.total}
    for col, block in LOSS_COLUMNS:
        rec[col] = value.parts.get(block, 0.0)
    rec.update({f"e_{c}": e for c, e in zip(err.components, err.errors)})
    rec.update({"E_m": err.mean, "eta": float(eta), "cg_iters": int(cg_iters), "wall_ms": float(wall_ms)})
    return rec, err


def _finite(rec: dict) -> bool:
    return all(math.isfinite(v) for v in rec.values())


def run_experiment(config: RunConfig, progress=None) -> TrainReport:
    """Train per ``config`` and return the report.

    With ``config.out`` set, the CSV/JSON reports and a parameter checkpoint
    are rewritten at every evaluation.  The iteration-0 row describes the
    initialization (eta and cg_iters are 0 there).  A numerical failure, or a
    non-finite metric, ends the run and is recorded in ``report.failure``;
    the last finite checkpoint is kept.
    """
    config = config.resolved()
    problem, params, colloc = setup(config)
    n_train = len(colloc.interior)
    report = TrainReport(config, problem.components)
    out = config.out
    if out is not None:
        os.makedirs(out, exist_ok=True)
    gn_config = config.gnng_config() if config.optimizer == "gnng" else None
    start = time.perf_counter()

    def wall_ms():
        return (time.perf_counter() - start) * 1e3 if config.wall_time else 0.0

    def checkpoint(state, rec, err):
        report.records.append(rec)
        report.final = err
        if out is not None:
            save_params(state.params, os.path.join(out, "params.bin"), {"iteration": rec["iteration"], "config": asdict(config)})
            emit_report(report, "csv", out)
            emit_report(report, "json", out)
        if progress is not None:
            progress(rec)

    def fail(iteration, message):
        report.failure = {"iteration": iteration, "message": message}
        if out is not None:
            emit_report(report, "json", out)

    state = optim.OptState(params)
    rec, err = _record(0, params, colloc, problem, n_train, 0.0, 0, wall_ms())
    if not _finite(rec):
        fail(0, "non-finite metrics at initialization")
        return report
    checkpoint(state, rec, err)

    for k in range(1, config.iters + 1):
        if gn_config is not None:
            new = optim.gnng_step(state, colloc, problem, gn_config)
        else:
            new = optim.adam_step(state, colloc, problem)
        if new.failed or not np.all(np.isfinite(new.params.values)):
            fail(k, new.message or "non-finite parameters")
            return report
        state = new
        if k % config.eval_every == 0 or k == config.iters:
            rec, err = _record(k, state.params, colloc, problem, n_train, state.eta, state.cg_iterations, wall_ms())
            if not _finite(rec):
                fail(k, "non-finite metrics")
                return report
            checkpoint(state, rec, err)
    return report


# ---------------------------------------------------------------------------
# pushforward export


def parse_grid(text: str) -> tuple[int, int]:
    try:
        n, m = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise ArgumentError(f"grid must look like NxM, got {text!r}") from None
    if n < 2 or m < 2:
        raise ArgumentError("grid needs at least 2 points per axis")
    return n, m


def pushforward_export(checkpoint: str, grid: tuple[int, int], out: str, engd: bool = False) -> str:
    """Pushforwards of the GNNG and gradient directions at a checkpoint, plus the error.

    The grid spans the first two spatial axes (z = 0 for 3D flows) at the
    final time for unsteady flows.  Returns the CSV path.
    """
    params, meta = load_params(checkpoint)
    config = RunConfig(**meta["config"]).resolved()
    problem, _, colloc = setup(config)
    (x0, x1), (y0, y1) = problem.domain[:2]
    xs, ys = np.meshgrid(np.linspace(x0, x1, grid[0]), np.linspace(y0, y1, grid[1]), indexing="ij")
    pts = [xs.ravel(), ys.ravel()]
    if problem.dim == 3:
        pts.append(np.zeros(xs.size))
    if problem.unsteady:
        pts.append(np.full(xs.size, problem.final_time))
    pts = np.stack(pts, axis=1)

    state = optim.OptState(params)
    d_gn, *_ = optim.gnng_direction(state, colloc, problem, replace(config, engd=False).gnng_config())
    exports = [
        pushforward_field(params, problem, d_gn, pts, prefix="push_gnng"),
        pushforward_field(params, problem, optim.gradient(params, colloc, problem), pts, prefix="push_grad"),
    ]
    if engd:
        d_en, *_ = optim.gnng_direction(state, colloc, problem, replace(config, solver="dense", engd=True).gnng_config())
        exports.append(pushforward_field(params, problem, d_en, pts, prefix="push_engd"))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "pushforward.csv")
    export_fields_csv(merge_exports(*exports), path)
    return path


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnpinn", description="Gauss-Newton natural gradient PINNs for Navier-Stokes")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a network and write reports")
    run.add_argument("problem", choices=PROBLEMS)
    run.add_argument("--optimizer", choices=OPTIMIZERS)
    run.add_argument("--solver", choices=SOLVERS)
    run.add_argument("--iters", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--width", type=int)
    run.add_argument("--depth", type=int)
    run.add_argument("--constraints", choices=CONSTRAINT_MODES)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--interior", type=int)
    run.add_argument("--boundary", type=int)
    run.add_argument("--initial", type=int)
    run.add_argument("--eval-every", dest="eval_every", type=int)
    run.add_argument("--cg-tol", dest="cg_tol", type=float)
    run.add_argument("--engd", action="store_const", const=True)
    run.add_argument("--budget-mb", dest="budget_mb", type=int)
    run.add_argument("--no-wall-time", dest="wall_time", action="store_const", const=False)
    run.add_argument("--out", default=None)
    run.add_argument("--config", default=None, help="key = value file; flags override it")
    run.add_argument("--quiet", action="store_true")

    push = sub.add_parser("pushforward", help="export update-direction pushforwards from a checkpoint")
    push.add_argument("checkpoint", help="params.bin or the run directory holding it")
    push.add_argument("--grid", default="101x101")
    push.add_argument("--out", required=True)
    push.add_argument("--engd", action="store_true", help="also export the ENGD direction")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "quiet")}
            if overrides["out"] is None:
                overrides["out"] = os.path.join("runs", args.problem)
            config = parse_config(args.config, overrides)

            def show(rec):
                if not args.quiet:
                    print(f"{rec['iteration']:>7d}  loss {rec['loss']:.3e}  E_m {rec['E_m']:.3e}  eta {rec['eta']:.2e}", flush=True)

            report = run_experiment(config, progress=show)
            if report.failure is not None:
                print(f"stopped at iteration {report.failure['iteration']}: {report.failure['message']}", file=sys.stderr)
                return 2
            print(f"final E_m {report.final.mean:.4e}; reports in {config.out}")
            return 0
        path = pushforward_export(args.checkpoint, parse_grid(args.grid), args.out, args.engd)
        print(path)
        return 0
    except (ConfigError, ArgumentError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
