"""Ground-truth chaotic systems with analytic vector fields and Jacobians.

All fields and Jacobians accept batched inputs with the state on the last
axis; shapes broadcast as ``(..., d) -> (..., d)`` and ``(..., d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LORENZ63 = "lorenz63"
CHEN_HYPER = "chen_hyper"
LORENZ96 = "lorenz96"

SYSTEM_NAMES = (LORENZ63, CHEN_HYPER, LORENZ96)


@dataclass(frozen=True)
class SystemSpec:
    """A ground-truth dynamical system plus its data-generation settings."""

    name: str
    dim: int
    params: dict = field(default_factory=dict)
    init_mean: np.ndarray = None
    init_std: np.ndarray = None
    burn_in: float = 1.0

    def __post_init__(self):
        if self.name not in SYSTEM_NAMES:
            raise ValueError(f"unknown system name: {self.name!r}")
        object.__setattr__(self, "init_mean", np.asarray(self.init_mean, dtype=float))
        object.__setattr__(self, "init_std", np.asarray(self.init_std, dtype=float))
        if self.init_mean.shape != (self.dim,) or self.init_std.shape != (self.dim,):
            raise ValueError("init_mean/init_std must have shape (dim,)")
        if not np.all(self.init_std > 0):
            raise ValueError("init_std must be componentwise positive")
        if not self.burn_in > 0:
            raise ValueError("burn_in must be positive")


def lorenz63(sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> SystemSpec:
    """The classic three-variable convection model in its chaotic regime."""
    return SystemSpec(
        name=LORENZ63,
        dim=3,
        params={"sigma": float(sigma), "rho": float(rho), "beta": float(beta)},
        init_mean=np.zeros(3),
        init_std=np.ones(3),
        burn_in=50.0,
    )


def chen_hyper(a=35.0, b=3.0, c=12.0, d=7.0, r=0.58) -> SystemSpec:
    """Four-variable hyperchaotic Chen system (two positive exponents)."""
    return SystemSpec(
        name=CHEN_HYPER,
        dim=4,
        params={"a": float(a), "b": float(b), "c": float(c), "d": float(d), "r": float(r)},
        init_mean=np.array([0.0, 0.0, 20.0, 0.0]),
        init_std=np.ones(4),
        burn_in=100.0,
    )


def lorenz96(n_sites=6, forcing=10.0) -> SystemSpec:
    """Cyclic Lorenz 96 lattice; chaotic for sufficiently strong forcing."""
    if n_sites < 4:
        raise ValueError("lorenz96 needs at least 4 sites")
    return SystemSpec(
        name=LORENZ96,
        dim=int(n_sites),
        params={"F": float(forcing)},
        init_mean=np.zeros(n_sites),
        init_std=np.ones(n_sites),
        burn_in=1000.0,
    )


def from_name(name: str) -> SystemSpec:
    """Build the default spec for a CLI system name."""
    factories = {LORENZ63: lorenz63, CHEN_HYPER: chen_hyper, LORENZ96: lorenz96}
    if name not in factories:
        raise ValueError(
            f"unknown system {name!r}; expected one of {', '.join(SYSTEM_NAMES)}"
        )
    return factories[name]()


def _check_state(spec: SystemSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (spec.dim,):
        raise ValueError(
            f"state has trailing dimension {u.shape[-1:]}, expected ({spec.dim},)"
        )
    return u


def eval_vector_field(spec: SystemSpec, u) -> np.ndarray:
    """Evaluate f(u) for the named system; batched over leading axes."""
    u = _check_state(spec, u)
    p = spec.params
    if spec.name == LORENZ63:
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        return np.stack(
            [
                p["sigma"] * (y - x),
                x * (p["rho"] - z) - y,
                x * y - p["beta"] * z,
            ],
            axis=-1,
        )
    if spec.name == CHEN_HYPER:
        x, y, z, w = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
        return np.stack(
            [
                p["a"] * (y - x) + w,
                x * (p["d"] - z) + p["c"] * y,
                x * y - p["b"] * z,
                y * z + p["r"] * w,
            ],
            axis=-1,
        )
    # lorenz96: dx_i = (x_{i+1} - x_{i-2}) * x_{i-1} - x_i + F
    xp1 = np.roll(u, -1, axis=-1)
    xm1 = np.roll(u, 1, axis=-1)
    xm2 = np.roll(u, 2, axis=-1)
    return (xp1 - xm2) * xm1 - u + p["F"]


def eval_jacobian(spec: SystemSpec, u) -> np.ndarray:
    """Analytic Jacobian of the vector field at u; batched over leading axes."""
    u = _check_state(spec, u)
    d = spec.dim
    p = spec.params
    J = np.zeros(u.shape[:-1] + (d, d))
    if spec.name == LORENZ63:
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        J[..., 0, 0] = -p["sigma"]
        J[..., 0, 1] = p["sigma"]
        J[..., 1, 0] = p["rho"] - z
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -x
        J[..., 2, 0] = y
        J[..., 2, 1] = x
        J[..., 2, 2] = -p["beta"]
        return J
    if spec.name == CHEN_HYPER:
        x, y, z, w = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
        J[..., 0, 0] = -p["a"]
        J[..., 0, 1] = p["a"]
        J[..., 0, 3] = 1.0
        J[..., 1, 0] = p["d"] - z
        J[..., 1, 1] = p["c"]
        J[..., 1, 2] = -x
        J[..., 2, 0] = y
        J[..., 2, 1] = x
        J[..., 2, 2] = -p["b"]
        J[..., 3, 1] = z
        J[..., 3, 2] = y
        J[..., 3, 3] = p["r"]
        return J
    # lorenz96; += handles coinciding cyclic offsets for small d
    for i in range(d):
        J[..., i, (i - 2) % d] += -u[..., (i - 1) % d]
        J[..., i, (i - 1) % d] += u[..., (i + 1) % d] - u[..., (i - 2) % d]
        J[..., i, i % d] += -1.0
        J[..., i, (i + 1) % d] += u[..., (i - 1) % d]
    return J


@dataclass(frozen=True)
class AffineTransform:
    """Componentwise normalization v = (u - shift) / scale and its inverse."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if self.shift.shape != self.scale.shape or self.shift.ndim != 1:
            raise ValueError("shift and scale must be 1-d arrays of equal length")
        if not np.all(self.scale > 0):
            raise ValueError("scale must be componentwise positive")

    @classmethod
    def identity(cls, dim: int) -> "AffineTransform":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_data(cls, states) -> "AffineTransform":
        """Fit shift/scale to the per-dimension mean and std of a state cloud."""
        flat = np.asarray(states, dtype=float).reshape(-1, np.shape(states)[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    def apply(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.shift) / self.scale

    def invert(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.scale + self.shift


def transform_field(spec: SystemSpec, t: AffineTransform, v) -> np.ndarray:
    """Vector field of the normalized coordinates: f(scale*v + shift) / scale."""
    v = _check_state(spec, v)
    return eval_vector_field(spec, t.invert(v)) / t.scale


def transform_jacobian(spec: SystemSpec, t: AffineTransform, v) -> np.ndarray:
    """Jacobian of the normalized-coordinate field: diag(1/s) J diag(s)."""
    v = _check_state(spec, v)
    J = eval_jacobian(spec, t.invert(v))
    return J * (t.scale[None, :] / t.scale[:, None])
