"""Gauss-Newton natural gradient training of PINNs for incompressible Navier-Stokes."""

import os

_workers = os.environ.get("GNPINN_WORKERS")
if _workers:
    os.environ.setdefault("OMP_NUM_THREADS", _workers)
    os.environ.setdefault("OPENBLAS_NUM_THREADS", _workers)
    os.environ.setdefault(
        "XLA_FLAGS", f"--xla_cpu_multi_thread_eigen=true intra_op_parallelism_threads={_workers}"
    )

import jax

# Everything here runs in double precision; single precision stalls GNNG around 1e-4.
jax.config.update("jax_enable_x64", True)

from .errors import ArgumentError, CapacityError, ConfigError, NumericalError, UnsupportedError

__all__ = [
    "ArgumentError",
    "CapacityError",
    "ConfigError",
    "NumericalError",
    "UnsupportedError",
]
