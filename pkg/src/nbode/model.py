"""Learned MLP vector field and its differentiable rollouts.

The forward pass is generic over the array types of the autodiff engine,
so the same code serves plain numpy evaluation, forward-mode directional
derivatives, and tape-tracked training rollouts.

``rollout_neighborhood`` advances a center state together with a batch of
perturbation vectors.  Each perturbation follows the second-order expansion
of the field around the moving center: its rate of change is the Jacobian
action on the offset plus half the bilinear second-derivative action, so
finite-size offsets are transported consistently with the local geometry
of the learned flow.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import RolloutError

CHECKPOINT_FORMAT = 1


@dataclass
class MlpVectorField:
    """Parameter container for the learned vector field.

    Hidden layers use tanh, the output layer is linear.  ``weights[i]`` has
    shape (fan_in, fan_out) so evaluation is ``x @ W + b``.  During training
    the lists may temporarily hold tape variables instead of arrays.
    """

    layer_dims: tuple
    weights: list
    biases: list
    activation: str = "tanh"
    seed: int | None = None
    step: int = 0
    val_loss: float | None = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least input and output sizes")
        if self.layer_dims[0] != self.layer_dims[-1]:
            raise ValueError("vector field must map R^d to R^d")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activation is supported")

    @property
    def dim(self) -> int:
        return self.layer_dims[0]

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def field(self, u):
        return model_field(self, u)

    def jacobian(self, u):
        return model_jacobian(self, u)

    def flat_params(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(np.asarray(W, dtype=float).ravel())
            parts.append(np.asarray(b, dtype=float).ravel())
        return np.concatenate(parts)

    def with_flat_params(self, flat) -> "MlpVectorField":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.param_count,):
            raise ValueError("flat parameter vector has wrong length")
        weights, biases = [], []
        pos = 0
        dims = self.layer_dims
        for i in range(len(dims) - 1):
            n = dims[i] * dims[i + 1]
            weights.append(flat[pos:pos + n].reshape(dims[i], dims[i + 1]).copy())
            pos += n
            biases.append(flat[pos:pos + dims[i + 1]].copy())
            pos += dims[i + 1]
        return replace(self, weights=weights, biases=biases)


@dataclass
class PerturbationBatch:
    """A center state with K offset vectors to transport alongside it.

    ``center`` may carry leading batch axes; ``offsets`` adds one K axis
    before the state axis.
    """

    center: np.ndarray
    offsets: np.ndarray
    horizon: int
    n_sub: int = 2

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.offsets.shape[-1] != self.center.shape[-1]:
            raise ValueError("offsets and center disagree on state dimension")
        if self.offsets.ndim != self.center.ndim + 1:
            raise ValueError("offsets must have exactly one extra K axis")
        if self.offsets.shape[-2] < 2:
            raise ValueError("need at least 2 offsets per neighborhood")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets must be finite")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def init_params(seed, dims=(3, 64, 64, 3)) -> MlpVectorField:
    """Seeded init: weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases 0."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dims = tuple(int(d) for d in dims)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        bound = np.sqrt(1.0 / dims[i])
        weights.append(rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    return MlpVectorField(layer_dims=dims, weights=weights, biases=biases, seed=seed)


def _apply(weights, biases, x):
    """MLP forward pass generic over numpy arrays, Vars, and Duals."""
    h = x
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if i < last:
            h = ad.tanh(h)
    return h


def model_field(m: MlpVectorField, u):
    """Evaluate the learned field; batched over leading axes via flattening."""
    if isinstance(u, (ad.Var, ad.Dual)):
        return _apply(m.weights, m.biases, u)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != m.dim:
        raise ValueError(f"state dimension {u.shape[-1]} != model dim {m.dim}")
    flat = u.reshape(-1, m.dim)
    out = _apply(m.weights, m.biases, flat)
    return out.reshape(u.shape)


def model_jacobian(m: MlpVectorField, u):
    """Jacobian columns assembled from d forward-mode passes along the basis."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != m.dim:
        raise ValueError(f"state dimension {u.shape[-1]} != model dim {m.dim}")
    d = m.dim
    flat = u.reshape(-1, d)
    J = np.empty((flat.shape[0], d, d))
    for i in range(d):
        v = np.zeros_like(flat)
        v[:, i] = 1.0
        J[:, :, i] = ad.jvp(lambda x: _apply(m.weights, m.biases, x), flat, v)
    return J.reshape(u.shape[:-1] + (d, d))


def _taylor2_components(weights, biases, x, w):
    """Fused (first, second) directional derivatives of the MLP along w at x."""
    p, t, h = x, w, None
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        p = p @ W + b
        t = t @ W
        h = None if h is None else h @ W
        if i < last:
            p, t, h = ad.tanh_t2(p, t, h)
    return t, h


def _perturbation_rhs(weights, biases, u_stage, w_stage, k_nbrs, dim, taylor_order):
    """Offset velocities: Jacobian action plus half the second-order action."""
    u3 = ad.reshape(u_stage, u_stage.shape[:-1] + (1, dim))
    x = ad.reshape(u3 + np.zeros((k_nbrs, dim)), (-1, dim))
    w = ad.reshape(w_stage, (-1, dim))
    if taylor_order >= 2:
        first, second = _taylor2_components(weights, biases, x, w)
        rhs = first
        if second is not None:  # structurally zero for purely linear models
            rhs = rhs + 0.5 * second
    else:
        out = _apply(weights, biases, ad.Dual(x, w))
        rhs = out.t
    return ad.reshape(rhs, w_stage.shape)


def _rk4_pair(weights, biases, u, w, h, k_nbrs, dim, taylor_order):
    """One RK4 step of the coupled (center, offsets) system.

    The center stages are computed exactly as a standalone RK4 step would,
    so the center trajectory is bit-identical with or without offsets.
    """
    def f(x):
        return _apply(weights, biases, x)

    k1 = f(u)
    u2 = u + (h / 2.0) * k1
    k2 = f(u2)
    u3 = u + (h / 2.0) * k2
    k3 = f(u3)
    u4 = u + h * k3
    k4 = f(u4)
    u_next = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if w is None:
        return u_next, None

    def g(us, ws):
        return _perturbation_rhs(weights, biases, us, ws, k_nbrs, dim, taylor_order)

    q1 = g(u, w)
    q2 = g(u2, w + (h / 2.0) * q1)
    q3 = g(u3, w + (h / 2.0) * q2)
    q4 = g(u4, w + h * q3)
    w_next = w + (h / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
    return u_next, w_next


def _advance_pair(weights, biases, u, w, dt, n_sub, k_nbrs, dim, taylor_order):
    h = dt / n_sub
    for _ in range(n_sub):
        u, w = _rk4_pair(weights, biases, u, w, h, k_nbrs, dim, taylor_order)
    return u, w


def _state_value(u):
    return u.value if isinstance(u, ad.Var) else np.asarray(u)


def rollout_center(m: MlpVectorField, u0, s_steps: int, dt: float, n_sub: int = 2):
    """Advance u0 for s_steps intervals of dt using n_sub RK4 substeps each.

    Returns the s_steps advanced states stacked on axis -2 (the initial
    state is not included).  Differentiable when the model parameters are
    tape variables.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = u0 if isinstance(u0, ad.Var) else np.asarray(u0, dtype=float)
    states = []
    for s in range(s_steps):
        u, _ = _advance_pair(m.weights, m.biases, u, None, dt, n_sub, 0, m.dim, 2)
        if not np.all(np.isfinite(_state_value(u))):
            raise RolloutError(f"non-finite state at rollout step {s + 1}", step=s + 1)
        states.append(u)
    return ad.stack(states, axis=-2)


def rollout_neighborhood(m: MlpVectorField, batch: PerturbationBatch, dt: float,
                         taylor_order: int = 2):
    """Advance a center and its offsets; reconstruct the evolved neighbors.

    Returns ``(center_traj, neighbors)`` where center_traj stacks the
    s = 1..S center states on axis -2 and neighbors has shape
    ``offsets.shape[:-1] + (S, d)`` holding center(s dt) + offset(s dt).
    """
    u = batch.center
    w = batch.offsets
    k_nbrs = w.shape[-2]
    dim = m.dim
    centers, nbrs = [], []
    for s in range(batch.horizon):
        u, w = _advance_pair(m.weights, m.biases, u, w, dt, batch.n_sub,
                             k_nbrs, dim, taylor_order=taylor_order)
        if not np.all(np.isfinite(_state_value(u))) or not np.all(
                np.isfinite(_state_value(w))):
            raise RolloutError(f"non-finite state at rollout step {s + 1}", step=s + 1)
        centers.append(u)
        nbrs.append(ad.reshape(u, u.shape[:-1] + (1, dim)) + w)
    center_traj = ad.stack(centers, axis=-2)
    neighbors = ad.stack(nbrs, axis=-2)
    return center_traj, neighbors


def save_model(m: MlpVectorField, directory) -> None:
    """Write model.json + params.bin (flat float64, layer-major, little-endian)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "layer_dims": list(m.layer_dims),
        "activation": m.activation,
        "seed": m.seed,
        "step": m.step,
        "val_loss": m.val_loss,
    }
    with open(directory / "model.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    m.flat_params().astype("<f8").tofile(directory / "params.bin")


def load_model(directory) -> MlpVectorField:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {meta.get('format')}")
    dims = tuple(meta["layer_dims"])
    template = MlpVectorField(
        layer_dims=dims,
        weights=[np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
        biases=[np.zeros(dims[i + 1]) for i in range(len(dims) - 1)],
        activation=meta["activation"],
        seed=meta["seed"],
        step=meta["step"],
        val_loss=meta["val_loss"],
    )
    flat = np.fromfile(directory / "params.bin", dtype="<f8")
    return template.with_flat_params(flat)
