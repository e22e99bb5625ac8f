"""Scikit-learn style estimator wrapping the full training pipeline.

``NeighborhoodODE.fit`` consumes an (n_trajectories, n_times, d) array of
uniformly sampled states, builds the annulus neighbor cover, and trains the
surrogate vector field; ``predict`` applies the learned time-dt map and
``rollout`` produces multi-step forecasts, both in the original (unscaled)
coordinates.  The estimator follows the usual conventions: constructor
arguments are hyperparameters, fitted state lives in trailing-underscore
attributes, and ``get_params``/``set_params`` compose with model selection
utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cover import build_cover, calibrate_radii
from .dataset import TrajectoryDataset
from .errors import NbodeError
from .model import rollout_center
from .systems import AffineTransform
from .train import KernelConfig, TrainConfig, train, trajectory_loss


def check_trajectories(X, min_times=2):
    """Validate a trajectory tensor: finite float (n, m, d) with m >= min_times."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError(
            f"expected trajectories of shape (n_trajectories, n_times, d); "
            f"got ndim={X.ndim}"
        )
    if X.shape[1] < min_times:
        raise ValueError(f"need at least {min_times} time points per trajectory")
    if not np.all(np.isfinite(X)):
        raise ValueError("trajectories must be finite")
    return X


class NeighborhoodODE(BaseEstimator):
    """Surrogate ODE learner regularized by evolving attractor neighborhoods.

    Parameters mirror the training configuration: ``nbhd_weight=0`` recovers
    plain multi-step trajectory fitting, positive weights add the
    neighborhood matching term with ``n_neighbors`` samples per cover set.

    Examples
    --------
    >>> est = NeighborhoodODE(n_steps=50, batch_size=64, dt=0.05)
    >>> est.fit(X)                      # X: (n_traj, n_times, d)
    >>> u_next = est.predict(X[:, 0])   # one sampling interval ahead
    """

    def __init__(self, dt=0.01, n_neighbors=16, nbhd_weight=10.0,
                 rollout_steps=10, batch_size=2048, learning_rate=2e-3,
                 n_steps=5000, hidden=(64, 64), n_sub=2, taylor_order=2,
                 noise_std=0.0, r_min_multiplier=8.0, target_occupancy=0.05,
                 val_fraction=0.2, val_every=100, normalize=True,
                 random_state=0):
        self.dt = dt
        self.n_neighbors = n_neighbors
        self.nbhd_weight = nbhd_weight
        self.rollout_steps = rollout_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.hidden = hidden
        self.n_sub = n_sub
        self.taylor_order = taylor_order
        self.noise_std = noise_std
        self.r_min_multiplier = r_min_multiplier
        self.target_occupancy = target_occupancy
        self.val_fraction = val_fraction
        self.val_every = val_every
        self.normalize = normalize
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            rollout_steps=self.rollout_steps,
            batch_size=self.batch_size,
            n_neighbors=self.n_neighbors,
            nbhd_weight=self.nbhd_weight,
            learning_rate=self.learning_rate,
            n_steps=self.n_steps,
            val_every=self.val_every,
            seed=self.random_state,
            n_sub=self.n_sub,
            taylor_order=self.taylor_order,
            hidden=tuple(self.hidden),
            kernel=KernelConfig(),
        )

    def fit(self, X, y=None):
        """Learn the vector field from trajectories X of shape (n, m, d)."""
        X = check_trajectories(X, min_times=self.rollout_steps + 1)
        n, m, d = X.shape
        self.n_features_in_ = d
        if self.normalize:
            transform = AffineTransform.from_data(X)
        else:
            transform = AffineTransform.identity(d)
        states = transform.apply(X)

        n_val = max(1, int(round(self.val_fraction * n))) if n > 1 else 0
        if n_val >= n:
            n_val = n - 1
        train_states = states[: n - n_val] if n_val else states
        val_states = states[n - n_val:] if n_val else states

        def as_ds(arr, split):
            return TrajectoryDataset(
                states=arr, dt=float(self.dt), tau=float(self.dt) * 100.0,
                transform=transform, noise_std=float(self.noise_std),
                seed=int(self.random_state), split=split, system="custom",
                clean_states=None)

        train_ds = as_ds(train_states, "train")
        val_ds = as_ds(val_states, "val")

        cover = None
        if self.nbhd_weight > 0:
            r_min, r_max = calibrate_radii(
                train_states.reshape(-1, d), self.noise_std,
                target_frac=self.target_occupancy,
                multiplier=self.r_min_multiplier,
                seed=self.random_state)
            cover = build_cover(train_ds, (r_min, r_max), self.rollout_steps)
            self.r_min_ = r_min
            self.r_max_ = r_max
        model, rows, elapsed_ms = train(train_ds, cover, self._train_config(), val_ds)
        self.model_ = model
        self.transform_ = transform
        self.history_ = rows
        self.elapsed_ms_ = elapsed_ms
        self.val_loss_ = model.val_loss
        return self

    def _advance(self, X0, n_steps):
        X0 = np.asarray(X0, dtype=float)
        if X0.ndim != 2 or X0.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected states of shape (n, {self.n_features_in_})"
            )
        z = self.transform_.apply(X0)
        traj = rollout_center(self.model_, z, n_steps, float(self.dt), self.n_sub)
        return self.transform_.invert(traj)

    def predict(self, X):
        """Advance states one sampling interval; X has shape (n, d)."""
        check_is_fitted(self, "model_")
        return self._advance(X, 1)[:, 0, :]

    def rollout(self, X0, n_steps):
        """Forecast n_steps intervals ahead; returns (n, n_steps, d)."""
        check_is_fitted(self, "model_")
        return self._advance(X0, int(n_steps))

    def vector_field(self, X):
        """Learned velocities in original coordinates at the given states."""
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=float)
        z = self.transform_.apply(X)
        return self.model_.field(z) * self.transform_.scale

    def score(self, X, y=None):
        """Negative multi-step trajectory loss on held-out trajectories."""
        check_is_fitted(self, "model_")
        X = check_trajectories(X, min_times=self.rollout_steps + 1)
        states = self.transform_.apply(X)
        segs = []
        for i in range(states.shape[0]):
            for j in range(0, states.shape[1] - self.rollout_steps,
                           self.rollout_steps):
                segs.append(states[i, j: j + self.rollout_steps + 1])
        try:
            loss = trajectory_loss(self.model_, np.stack(segs),
                                   self.rollout_steps, float(self.dt), self.n_sub)
        except NbodeError:
            return -np.inf
        return -loss
