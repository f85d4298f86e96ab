"""MLP ansatz for velocity and pressure, plus the hard-constraint transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import jax.numpy as jnp
import numpy as np

from . import autodiff as ad
from .autodiff import Jet
from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class Topology:
    """Layer widths (input and output included) of the two sub-networks."""

    velocity: tuple[int, ...]
    pressure: tuple[int, ...]
    activation: str = "tanh"
    periods: Optional[tuple[float, ...]] = None  # periodic input embedding, one period per spatial dim

    def __post_init__(self):
        for name, widths in (("velocity", self.velocity), ("pressure", self.pressure)):
            if len(widths) < 2:
                raise ArgumentError(f"{name} network needs at least input and output widths, got {widths}")
            if any(int(w) < 1 for w in widths):
                raise ArgumentError(f"{name} network has a zero-width layer: {widths}")
        if self.activation != "tanh":
            raise ArgumentError(f"unsupported activation {self.activation!r}")

    @staticmethod
    def _count(widths):
        return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))

    @property
    def n_velocity(self) -> int:
        return self._count(self.velocity)

    @property
    def n_pressure(self) -> int:
        return self._count(self.pressure)

    @property
    def size(self) -> int:
        return self.n_velocity + self.n_pressure

    def to_dict(self) -> dict:
        return {
            "velocity": list(self.velocity),
            "pressure": list(self.pressure),
            "activation": self.activation,
            "periods": None if self.periods is None else list(self.periods),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        periods = data.get("periods")
        return cls(
            velocity=tuple(data["velocity"]),
            pressure=tuple(data["pressure"]),
            activation=data.get("activation", "tanh"),
            periods=None if periods is None else tuple(periods),
        )


def _unflatten_net(theta, widths, offset):
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers, offset


def unflatten(topology: Topology, theta):
    """Split a flat vector into ``(velocity layers, pressure layers)`` of (W, b) pairs."""
    if theta.shape != (topology.size,):
        raise ArgumentError(f"parameter vector has shape {theta.shape}, topology needs ({topology.size},)")
    vel, offset = _unflatten_net(theta, topology.velocity, 0)
    pres, _ = _unflatten_net(theta, topology.pressure, offset)
    return vel, pres


def flatten(velocity_layers, pressure_layers) -> np.ndarray:
    parts = []
    for w, b in list(velocity_layers) + list(pressure_layers):
        parts += [np.ravel(w), np.ravel(b)]
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class FlatParams:
    values: np.ndarray
    topology: Topology

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.topology.size,):
            raise ArgumentError(f"expected {self.topology.size} parameters, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def theta(self) -> np.ndarray:
        return self.values[: self.topology.n_velocity]

    @property
    def psi(self) -> np.ndarray:
        return self.values[self.topology.n_velocity :]

    def layers(self):
        return unflatten(self.topology, self.values)

    def replace(self, values) -> "FlatParams":
        return FlatParams(np.asarray(values, dtype=np.float64), self.topology)


def glorot_init(topology: Topology, seed: int) -> FlatParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for widths in (topology.velocity, topology.pressure):
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
    return FlatParams(np.concatenate(parts), topology)


def _stack(jets: Sequence[Jet]) -> Jet:
    return Jet(jnp.stack([j.coeffs for j in jets], axis=-1), jets[0].space)


def mlp_layers_eval(layers, inputs: Sequence[Jet]) -> list[Jet]:
    """Affine + tanh hidden layers and an affine output layer, through jet arithmetic."""
    if len(inputs) != layers[0][0].shape[0]:
        raise ArgumentError(f"network expects {layers[0][0].shape[0]} inputs, got {len(inputs)}")
    h = _stack(inputs)
    for w, b in layers[:-1]:
        h = ad.affine(h, w, b).tanh()
    w, b = layers[-1]
    h = ad.affine(h, w, b)
    return [h[..., k] for k in range(w.shape[1])]


def mlp_forward(layers, x):
    """Plain forward pass on an array of shape (..., n_in)."""
    h = jnp.asarray(x)
    for w, b in layers[:-1]:
        h = jnp.tanh(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def mlp_eval(params, inputs: Sequence[Jet], topology: Optional[Topology] = None):
    """Evaluate both sub-networks; returns (velocity-net outputs, pressure jet)."""
    topology = topology or params.topology
    theta = params.values if isinstance(params, FlatParams) else params
    vel, pres = unflatten(topology, jnp.asarray(theta))
    return mlp_layers_eval(vel, inputs), mlp_layers_eval(pres, inputs)[0]


def periodic_embed(x, periods: Sequence[float]):
    """Replace each spatial coordinate by (cos(2 pi x/P), sin(2 pi x/P)).

    ``x`` is a sequence of coordinates (jets or arrays); entries past
    ``len(periods)`` (time) pass through unchanged.
    """
    if any(p <= 0 for p in periods):
        raise ArgumentError(f"periods must be positive, got {tuple(periods)}")
    if len(x) < len(periods):
        raise ArgumentError(f"{len(periods)} periods given for {len(x)} coordinates")
    out = []
    for xj, period in zip(x, periods):
        arg = xj * (2.0 * math.pi / period)
        out += [ad.cos(arg), ad.sin(arg)]
    return out + list(x[len(periods) :])


def divergence_free_wrap(potential: Sequence[Jet], dim: int, min_order: int = 3) -> list[Jet]:
    """Velocity as the curl of a stream function (2D) or vector potential (3D).

    The result is one jet order lower than the potential.  ``min_order`` guards
    against potentials too short for second derivatives of the velocity; pass a
    lower value only when the caller needs plain values or first derivatives.
    """
    need = {2: 1, 3: 3}
    if dim not in need:
        raise ArgumentError(f"divergence-free wrap supports d=2 or 3, got {dim}")
    if len(potential) != need[dim]:
        raise ArgumentError(f"d={dim} needs {need[dim]} potential component(s), got {len(potential)}")
    if any(j.order < max(min_order, 1) for j in potential):
        raise ArgumentError(f"divergence-free wrap needs potential jets of order >= {max(min_order, 1)}")
    if dim == 2:
        (psi,) = potential
        return [psi.d(1), -psi.d(0)]
    a1, a2, a3 = potential
    return [a3.d(1) - a2.d(2), a1.d(2) - a3.d(0), a2.d(0) - a1.d(1)]


def _time_identity(t):
    return t


def ic_wrap(raw: Sequence[Jet], t: Jet, g: Sequence[Jet], ell: Callable = _time_identity) -> list[Jet]:
    """``g(x) + ell(t) * N(t, x)``; the result equals ``g`` at t = 0 exactly."""
    if abs(float(np.asarray(ell(np.zeros(()))))) != 0.0:
        raise ConfigError("time multiplier must vanish at t = 0")
    if len(raw) != len(g):
        raise ArgumentError(f"initial condition has {len(g)} components, network has {len(raw)}")
    order = min([j.order for j in raw] + [t.order] + [j.order for j in g])
    mult = ell(t.truncate(order))
    return [gk.truncate(order) + mult * nk.truncate(order) for gk, nk in zip(g, raw)]


@dataclass(frozen=True)
class ConstraintMode:
    divergence_free: bool = False
    exact_initial: bool = False
    periods: Optional[tuple[float, ...]] = None
    boundary_soft: bool = True

    @property
    def periodic(self) -> bool:
        return self.periods is not None

    @property
    def jet_order(self) -> int:
        return 3 if self.divergence_free else 2

    def validate(self, dim: int, unsteady: bool):
        if self.exact_initial and not unsteady:
            raise ConfigError("exact initial conditions need an unsteady problem", key="constraints")
        if self.periodic and len(self.periods) != dim:
            raise ConfigError(f"need {dim} periods, got {len(self.periods)}", key="constraints")
        if self.periodic and self.boundary_soft:
            raise ConfigError("periodic embedding replaces the boundary residual", key="constraints")


def build_topology(dim: int, unsteady: bool, constraints: ConstraintMode, width: int, depth: int) -> Topology:
    n_raw = dim + int(unsteady)
    n_in = n_raw + dim if constraints.periodic else n_raw
    n_vel = (1 if dim == 2 else 3) if constraints.divergence_free else dim
    hidden = (int(width),) * int(depth)
    return Topology(
        velocity=(n_in,) + hidden + (n_vel,),
        pressure=(n_in,) + hidden + (1,),
        periods=constraints.periods,
    )


@dataclass(frozen=True, eq=False)
class Ansatz:
    """Network plus constraint transforms, mapping coordinate jets to (u, p) jets.

    ``initial_velocity`` maps spatial coordinate jets to the initial velocity
    jets; it is only used when ``constraints.exact_initial`` is set.
    """

    topology: Topology
    constraints: ConstraintMode
    dim: int
    unsteady: bool
    initial_velocity: Optional[Callable] = field(default=None)

    @property
    def order(self) -> int:
        return self.constraints.jet_order

    def fields(self, theta, coords: Sequence[Jet]):
        inputs = periodic_embed(coords, self.constraints.periods) if self.constraints.periodic else list(coords)
        vel, pres = unflatten(self.topology, theta)
        u = mlp_layers_eval(vel, inputs)
        # the momentum equation needs p only to second order, even when the curl
        # wrap asks third-order jets of the velocity potential
        p = mlp_layers_eval(pres, [c.truncate(min(c.order, 2)) for c in inputs])[0]
        if self.constraints.divergence_free:
            u = divergence_free_wrap(u, self.dim, min_order=1)
        if self.constraints.exact_initial:
            g = self.initial_velocity(coords[: self.dim])
            u = ic_wrap(u, coords[self.dim], g)
        return u, p

    def point_fields(self, theta, x, velocity_order: Optional[int] = None):
        """Jets of (u_1..u_d, p) at a single raw coordinate point ``x``.

        ``velocity_order`` caps the derivatives computed for u (default: the
        second order the residuals need).
        """
        if velocity_order is None:
            return self.fields(theta, ad.seed_coordinates(x, self.order))
        order = velocity_order + int(self.constraints.divergence_free)
        coords = ad.seed_coordinates(x, max(order, 2))
        return self.fields(theta, [c.truncate(order) for c in coords])

    def values(self, theta, x):
        """Plain values (u_1..u_d, p) at one point."""
        u, p = self.point_fields(theta, x, velocity_order=0)
        return jnp.stack([uk.value for uk in u] + [p.value])
