"""Losses and the training loop.

The combined objective is a mean squared multi-step rollout error plus a
weighted neighborhood term: per sampled center and rollout step, the squared
maximum mean discrepancy between the data-evolved neighbor cloud and the
model-transported neighbor cloud (center rollout plus Taylor-evolved
offsets).  Optimization uses AdaBelief with bias correction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .cover import NeighborCover
from .dataset import TrajectoryDataset
from .errors import ConfigError, RolloutError, TrainingAbortedError
from .model import MlpVectorField, _advance_pair, init_params


@dataclass(frozen=True)
class KernelConfig:
    """Mixture of rational quadratic kernels sum_q s_q^2 / (s_q^2 + r^2)."""

    bandwidths: tuple = (0.2, 0.5, 0.9, 1.3)

    def __post_init__(self):
        if not all(b > 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")


@dataclass
class TrainConfig:
    rollout_steps: int = 10          # steps per sampled segment
    batch_size: int = 2048           # states per step, B'(K+1) <= batch_size
    n_neighbors: int = 16            # K
    nbhd_weight: float = 10.0        # lambda
    learning_rate: float = 2e-3
    n_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    val_every: int = 100
    seed: int = 0
    n_sub: int = 2
    taylor_order: int = 2
    hidden: tuple = (64, 64)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    max_consecutive_skips: int = 50

    def __post_init__(self):
        if self.rollout_steps < 1:
            raise ConfigError("rollout_steps must be >= 1")
        if self.nbhd_weight < 0:
            raise ConfigError("nbhd_weight must be >= 0")
        if self.batch_size // (self.n_neighbors + 1) < 1:
            raise ConfigError("batch_size too small for n_neighbors + 1")
        if self.taylor_order not in (1, 2):
            raise ConfigError("taylor_order must be 1 or 2")

    @property
    def centers_per_batch(self) -> int:
        return self.batch_size // (self.n_neighbors + 1)


def rq_kernel(u, v, cfg: KernelConfig = KernelConfig()) -> float:
    """Rational quadratic mixture kernel between two state vectors."""
    sq = float(np.sum((np.asarray(u, float) - np.asarray(v, float)) ** 2))
    return float(sum(b * b / (b * b + sq) for b in cfg.bandwidths))


def _rq_from_sq(sq, cfg: KernelConfig):
    """Kernel mixture from squared distances; generic over Vars."""
    out = None
    for b in cfg.bandwidths:
        term = (b * b) / (sq + b * b)
        out = term if out is None else out + term
    return out


def _pairwise_sq(x, y, k: int, d: int):
    """Squared distances between the K-clouds on the trailing axes."""
    lead = x.shape[:-2]
    a = ad.reshape(x, lead + (k, 1, d))
    b = ad.reshape(y, lead + (1, k, d))
    diff = a - b
    return ad.vsum(diff * diff, axis=-1)


def mmd2(x, y, cfg: KernelConfig = KernelConfig()) -> float:
    """Unbiased two-sample estimate of the squared maximum mean discrepancy.

    Off-diagonal within-sample sums are normalized by K(K-1) and the full
    cross term by K^2, so the estimate can be negative.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("need equal-count (K, d) samples")
    k = x.shape[0]
    if k < 2:
        raise ValueError("mmd2 needs at least 2 samples per side")
    kxx = _rq_from_sq(_pairwise_sq(x, x, k, x.shape[1]), cfg)
    kyy = _rq_from_sq(_pairwise_sq(y, y, k, x.shape[1]), cfg)
    kxy = _rq_from_sq(_pairwise_sq(x, y, k, x.shape[1]), cfg)
    off = kxx.sum() - np.trace(kxx) + kyy.sum() - np.trace(kyy)
    return float(off / (k * (k - 1)) - 2.0 * kxy.sum() / (k * k))


def mmd2_biased(x, y, cfg: KernelConfig = KernelConfig()) -> float:
    """Biased variant (diagonals included, both terms / K^2); >= 0, 0 iff X=Y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("need equal-count (K, d) samples")
    k = x.shape[0]
    kxx = _rq_from_sq(_pairwise_sq(x, x, k, x.shape[1]), cfg).sum()
    kyy = _rq_from_sq(_pairwise_sq(y, y, k, x.shape[1]), cfg).sum()
    kxy = _rq_from_sq(_pairwise_sq(x, y, k, x.shape[1]), cfg).sum()
    return float((kxx + kyy) / (k * k) - 2.0 * kxy / (k * k))


@dataclass
class NeighborhoodBatch:
    """Arrays for one optimization step over B' centers with K neighbors."""

    centers: np.ndarray           # (B', d) noisy initial center states
    offsets: np.ndarray           # (B', K, d) neighbor - center offsets
    center_targets: np.ndarray    # (B', S, d)
    neighbor_targets: np.ndarray  # (B', K, S, d)


def _rollout_states(weights, biases, u, w, s_steps, dt, n_sub, k, d, taylor_order):
    """Yield (center, offsets) after each saved interval."""
    for _ in range(s_steps):
        u, w = _advance_pair(weights, biases, u, w, dt, n_sub, k, d, taylor_order)
        yield u, w


def _loss_terms(weights, biases, batch: NeighborhoodBatch, cfg: TrainConfig, dt):
    """Total, trajectory, and neighborhood losses on one batch (trackable)."""
    bprime, d = batch.centers.shape
    k = batch.offsets.shape[1] if batch.offsets is not None else 0
    s_steps = batch.center_targets.shape[1]
    use_nbhd = cfg.nbhd_weight > 0 and k > 0
    offdiag = 1.0 - np.eye(k) if use_nbhd else None

    traj_acc = 0.0
    nbhd_acc = 0.0
    u = batch.centers
    w = batch.offsets if use_nbhd else None
    for s, (u, w) in enumerate(_rollout_states(
            weights, biases, u, w, s_steps, dt, cfg.n_sub, k, d, cfg.taylor_order)):
        diff = u - batch.center_targets[:, s]
        traj_acc = traj_acc + ad.vsum(diff * diff)
        if not use_nbhd:
            continue
        model_nb = ad.reshape(u, (bprime, 1, d)) + w
        data_nb = batch.neighbor_targets[:, :, s]
        k_mm = _rq_from_sq(_pairwise_sq(model_nb, model_nb, k, d), cfg.kernel)
        k_md = _rq_from_sq(_pairwise_sq(model_nb, data_nb, k, d), cfg.kernel)
        k_dd = _rq_from_sq(_pairwise_sq(data_nb, data_nb, k, d), cfg.kernel)
        off_mm = ad.vsum(k_mm * offdiag)
        off_dd = float((k_dd * offdiag).sum())
        cross = ad.vsum(k_md)
        nbhd_acc = nbhd_acc + (off_mm + off_dd) / (k * (k - 1)) - 2.0 * cross / (k * k)

    denom = float(s_steps * bprime)
    traj = traj_acc / denom
    nbhd = nbhd_acc / denom if use_nbhd else 0.0
    total = traj + cfg.nbhd_weight * nbhd if use_nbhd else traj
    return total, traj, nbhd


def trajectory_loss(m: MlpVectorField, segments, s_steps: int, dt: float,
                    n_sub: int = 2) -> float:
    """Mean squared rollout error over (B, S+1, d) segments (Eq.-style mean)."""
    segments = np.asarray(segments, dtype=float)
    batch = NeighborhoodBatch(
        centers=segments[:, 0], offsets=None,
        center_targets=segments[:, 1:s_steps + 1], neighbor_targets=None,
    )
    cfg = TrainConfig(rollout_steps=s_steps, n_sub=n_sub, nbhd_weight=0.0,
                      batch_size=2048, n_neighbors=0 or 1)
    total, _, _ = _loss_terms(m.weights, m.biases, batch, cfg, dt)
    return float(total)


def neighborhood_loss(m: MlpVectorField, batch: NeighborhoodBatch, s_steps: int,
                      dt: float, kernel: KernelConfig = KernelConfig(),
                      n_sub: int = 2, taylor_order: int = 2) -> float:
    """Mean MMD^2 between data-evolved and model-evolved neighbor clouds."""
    cfg = TrainConfig(rollout_steps=s_steps, n_sub=n_sub, taylor_order=taylor_order,
                      nbhd_weight=1.0, kernel=kernel,
                      n_neighbors=batch.offsets.shape[1],
                      batch_size=(batch.offsets.shape[1] + 1) * batch.centers.shape[0])
    _, _, nbhd = _loss_terms(m.weights, m.biases, batch, cfg, dt)
    return float(nbhd)


def adabelief_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-16):
    """One AdaBelief update; returns (new params, new state).

    m_t tracks the gradient, s_t the variance of the gradient around m_t
    (plus eps); both are bias-corrected before the update.
    """
    if state is None:
        state = {"t": 0,
                 "m": [np.zeros_like(p) for p in params],
                 "s": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_s = [], [], []
    for p, g, m, s in zip(params, grads, state["m"], state["s"]):
        m = beta1 * m + (1.0 - beta1) * g
        diff = g - m
        s = beta2 * s + (1.0 - beta2) * diff * diff + eps
        update = lr * (m / c1) / (np.sqrt(s / c2) + eps)
        new_params.append(p - update)
        new_m.append(m)
        new_s.append(s)
    return new_params, {"t": t, "m": new_m, "s": new_s}


@dataclass
class TrainLogRow:
    step: int
    train_loss: float
    traj_loss: float
    nbhd_loss: float
    val_loss: float | None
    wallclock_ms: int


def _format_float(x: float) -> str:
    return repr(float(x))


def log_rows_to_csv(rows) -> str:
    lines = ["step,train_loss,traj_loss,nbhd_loss,val_loss,wallclock_ms"]
    for r in rows:
        val = "" if r.val_loss is None else _format_float(r.val_loss)
        lines.append(
            f"{r.step},{_format_float(r.train_loss)},{_format_float(r.traj_loss)},"
            f"{_format_float(r.nbhd_loss)},{val},{r.wallclock_ms}"
        )
    return "\n".join(lines) + "\n"


def _segment_starts(n, m, s_steps):
    """Flat indices of all segment starts with a full horizon ahead."""
    j_max = m - 1 - s_steps
    if j_max < 0:
        raise ConfigError("rollout_steps exceeds trajectory length")
    grid_j = np.tile(np.arange(m), n)
    return np.flatnonzero(grid_j <= j_max)


def _gather_segments(states, flat_idx, s_steps):
    n, m, d = states.shape
    i = flat_idx // m
    j = flat_idx % m
    steps = np.arange(s_steps + 1)
    return states[i[:, None], j[:, None] + steps[None, :]]


def _validation_batch(val_ds: TrajectoryDataset, s_steps: int, max_segments: int = 128):
    starts = _segment_starts(val_ds.n_traj, val_ds.n_time, s_steps)
    stride = max(1, starts.size // max_segments)
    return _gather_segments(val_ds.states, starts[::stride][:max_segments], s_steps)


def _eligible_centers(cover: NeighborCover, k: int):
    counts = cover.occupancy_counts
    keep = np.flatnonzero(counts >= k)
    if keep.size == 0:
        raise ConfigError(
            "no cover center has enough members for the requested neighbor count"
        )
    return keep


def train(dataset: TrajectoryDataset, cover: NeighborCover | None,
          cfg: TrainConfig, val_dataset: TrajectoryDataset,
          model: MlpVectorField | None = None):
    """Minibatch training loop; returns (best model, list of TrainLogRow).

    With a cover and nbhd_weight > 0 each step samples B' centers and K
    neighbors per center (trajectory term over the B' center segments);
    otherwise it samples batch_size plain segments (the trajectory-only
    baseline).  Every val_every steps the trajectory loss on the noisy
    validation split is evaluated and the best parameters are retained.
    NaN losses skip the step; too many consecutive skips abort.
    """
    states = dataset.states
    n, m, d = states.shape
    dt = dataset.dt
    s_steps = cfg.rollout_steps
    use_nbhd = cfg.nbhd_weight > 0 and cover is not None
    if use_nbhd and cover.horizon < s_steps:
        raise ConfigError("cover horizon is shorter than rollout_steps")

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 7411]))
    if model is None:
        model = init_params(cfg.seed, (d, *cfg.hidden, d))
    params = [*model.weights, *model.biases]
    n_w = len(model.weights)

    if use_nbhd:
        eligible_rows = _eligible_centers(cover, cfg.n_neighbors)
        bprime = cfg.centers_per_batch
    else:
        seg_starts = _segment_starts(n, m, s_steps)
        bprime = min(cfg.batch_size, seg_starts.size)

    val_segments = _validation_batch(val_dataset, s_steps)
    flat = states.reshape(-1, d)

    def make_batch():
        if not use_nbhd:
            pick = rng.choice(seg_starts.size, size=bprime,
                              replace=seg_starts.size < bprime)
            segs = _gather_segments(states, seg_starts[pick], s_steps)
            return NeighborhoodBatch(centers=segs[:, 0], offsets=None,
                                     center_targets=segs[:, 1:], neighbor_targets=None)
        rows = rng.choice(eligible_rows.size, size=bprime,
                          replace=eligible_rows.size < bprime)
        rows = eligible_rows[rows]
        center_idx = cover.centers[rows]
        segs = _gather_segments(states, center_idx, s_steps)
        nb_idx = np.empty((bprime, cfg.n_neighbors), dtype=np.int64)
        for b, row in enumerate(rows):
            nb_idx[b] = rng.choice(cover.members[row], size=cfg.n_neighbors,
                                   replace=False)
        nb_segs = _gather_segments(states, nb_idx.ravel(), s_steps)
        nb_segs = nb_segs.reshape(bprime, cfg.n_neighbors, s_steps + 1, d)
        offsets = nb_segs[:, :, 0] - segs[:, None, 0]
        return NeighborhoodBatch(centers=segs[:, 0], offsets=offsets,
                                 center_targets=segs[:, 1:],
                                 neighbor_targets=nb_segs[:, :, 1:])

    def val_loss_of(weights, biases):
        probe = replace(model, weights=weights, biases=biases)
        try:
            return trajectory_loss(probe, val_segments, s_steps, dt, cfg.n_sub)
        except RolloutError:
            return float("nan")

    state = None
    rows_out = []
    best = None
    skips = 0
    t_start = time.monotonic()
    for step in range(cfg.n_steps):
        batch = make_batch()

        def closure(ps):
            w, b = ps[:n_w], ps[n_w:]
            total, traj, nbhd = _loss_terms(w, b, batch, cfg, dt)
            traj_v = traj.value if isinstance(traj, ad.Var) else float(traj)
            nbhd_v = nbhd.value if isinstance(nbhd, ad.Var) else float(nbhd)
            return total, (float(traj_v), float(nbhd_v))

        try:
            total, grads, aux = ad.value_and_grad_multi(closure, params)
        except RolloutError:
            total, grads, aux = float("nan"), None, (float("nan"), float("nan"))
        traj_v, nbhd_v = aux

        val_v = None
        if np.isfinite(total):
            skips = 0
            params, state = adabelief_step(
                params, grads, state, cfg.learning_rate,
                cfg.beta1, cfg.beta2, cfg.eps)
            if step % cfg.val_every == 0 or step == cfg.n_steps - 1:
                val_v = val_loss_of(params[:n_w], params[n_w:])
                if np.isfinite(val_v) and (best is None or val_v < best[0]):
                    best = (val_v, step, [p.copy() for p in params])
        else:
            skips += 1
            if skips > cfg.max_consecutive_skips:
                raise TrainingAbortedError(
                    f"aborted after {skips} consecutive skipped steps at step {step}"
                )
        rows_out.append(TrainLogRow(
            step=step, train_loss=float(total), traj_loss=traj_v, nbhd_loss=nbhd_v,
            val_loss=val_v, wallclock_ms=0,
        ))
    elapsed_ms = int((time.monotonic() - t_start) * 1000.0)
    if best is None:
        raise TrainingAbortedError("training never produced a finite validation loss")
    val_best, step_best, params_best = best
    out = replace(model, weights=params_best[:n_w], biases=params_best[n_w:],
                  step=step_best, val_loss=float(val_best))
    return out, rows_out, elapsed_ms
