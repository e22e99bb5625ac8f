"""Evaluation suite: short-term accuracy, long-term statistics, local errors.

All evaluation runs against the clean (noiseless) states of the test or
validation split; functions refuse datasets without them.  The learned
model is represented by any object exposing ``field(u)`` and
``jacobian(u)`` over batched states, so ground-truth adapters can be
injected wherever a model is expected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TrajectoryDataset, sample_on_attractor
from .errors import IntegrationError, NbodeError
from .integrate import StepControl, integrate_adaptive, lyapunov_spectrum
from .systems import AffineTransform, SystemSpec, transform_field, transform_jacobian
from .train import KernelConfig, TrainConfig, train

EVAL_CONTROL = StepControl(rtol=1e-6, atol=1e-8)


class GroundTruthModel:
    """Normalized-coordinate ground truth behind the model interface."""

    def __init__(self, spec: SystemSpec, transform: AffineTransform):
        self.spec = spec
        self.transform = transform

    def field(self, u):
        return transform_field(self.spec, self.transform, u)

    def jacobian(self, u):
        return transform_jacobian(self.spec, self.transform, u)


@dataclass
class EvalConfig:
    lambda1: float                      # max Lyapunov exponent, precomputed
    vpt_threshold: float = 0.3
    attractor_samples: int = 5000
    lyapunov_horizon: float = 100.0     # in units of 1/lambda1
    mmd_times: int = 101
    kernel: KernelConfig = field(default_factory=KernelConfig)
    sinkhorn_epsilon: float | None = None   # None: 0.05 * mean squared distance
    sinkhorn_max_iter: int = 2000
    sinkhorn_tol: float = 1e-6
    rollout_ctrl: StepControl = EVAL_CONTROL

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError("lambda1 must be positive")
        if not self.vpt_threshold > 0:
            raise ValueError("vpt_threshold must be positive")


@dataclass
class EvalReport:
    vpt_mean: float
    vpt_per_traj: list
    nrmse_mean: list
    mmd_times: list
    mmd_curve: list
    mmd_plateau: float
    baseline_mmd2: float
    rel_vf_errors: list
    rel_jac_errors: list
    lyapunov_mae: float | None
    model_lyapunov: list | None
    truth_lyapunov: list | None
    sinkhorn_score: float | None
    sinkhorn_converged: bool | None
    diverged: bool = False


def _require_clean(ds: TrajectoryDataset) -> np.ndarray:
    if ds.clean_states is None:
        raise NbodeError(
            f"{ds.split} dataset has no clean states; evaluation requires them"
        )
    return ds.clean_states


def _rollout_model(model, u0, times, ctrl):
    """Integrate the model field from u0 over a saved time grid."""
    return integrate_adaptive(model.field, u0, (0.0, float(times[-1])), ctrl,
                              save_at=times)


def nrmse_vpt(model, test_ds: TrajectoryDataset, cfg: EvalConfig):
    """Per-trajectory NRMSE curves and valid prediction times.

    NRMSE(t_j) compares the model rollout from each clean initial state to
    the clean trajectory, scaled by 1/sqrt(d); the VPT is the last time
    before the threshold is first exceeded, scaled by lambda1.  Divergent
    rollouts truncate their trajectory's VPT at the divergence time.
    """
    clean = _require_clean(test_ds)
    n, m, d = clean.shape
    times = np.arange(m) * test_ds.dt
    nrmse = np.full((n, m), np.inf)
    diverged = False
    for i in range(n):
        try:
            pred = _rollout_model(model, clean[i, 0], times, cfg.rollout_ctrl)
            nrmse[i] = np.linalg.norm(pred - clean[i], axis=1) / np.sqrt(d)
        except IntegrationError as exc:
            diverged = True
            t_ok = exc.t if exc.t is not None else 0.0
            j_ok = int(np.searchsorted(times, t_ok, side="right"))
            nrmse[i, 0] = 0.0
            if j_ok > 1:
                try:
                    pred = _rollout_model(model, clean[i, 0], times[:j_ok],
                                          cfg.rollout_ctrl)
                    nrmse[i, :j_ok] = np.linalg.norm(
                        pred - clean[i, :j_ok], axis=1) / np.sqrt(d)
                except IntegrationError:
                    pass
    vpt = np.empty(n)
    for i in range(n):
        bad = np.flatnonzero(~(nrmse[i] <= cfg.vpt_threshold))
        last_ok = (bad[0] - 1) if bad.size else (m - 1)
        vpt[i] = cfg.lambda1 * times[max(last_ok, 0)]
    return nrmse, vpt, float(vpt.mean()), diverged


def _rq_sum_chunked(x, y, cfg: KernelConfig, block: int = 1024) -> float:
    """Sum of the kernel matrix between two clouds, in blocks."""
    total = 0.0
    for s in range(0, x.shape[0], block):
        xs = x[s:s + block]
        sq = ((xs[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        for b in cfg.bandwidths:
            total += float((b * b / (sq + b * b)).sum())
    return total


def mmd2_biased_large(x, y, cfg: KernelConfig) -> float:
    """Biased MMD^2 for large equal-count clouds (chunked kernel sums)."""
    k = x.shape[0]
    sxx = _rq_sum_chunked(x, x, cfg)
    syy = _rq_sum_chunked(y, y, cfg)
    sxy = _rq_sum_chunked(x, y, cfg)
    return (sxx + syy) / (k * k) - 2.0 * sxy / (k * k)


def _evolve_cloud(field, points, times, ctrl, chunk: int = 512):
    """Evolve a point cloud through a saved time grid; flags divergence.

    Returns (states, alive) where states has shape (len(times), N, d) and
    alive marks, per time index, whether every chunk was still finite.
    """
    n = points.shape[0]
    out = np.full((len(times), n, points.shape[1]), np.nan)
    alive_until = len(times)
    for s in range(0, n, chunk):
        block = points[s:s + chunk]
        try:
            traj = integrate_adaptive(field, block, (0.0, float(times[-1])),
                                      ctrl, save_at=times)
            out[:, s:s + block.shape[0]] = traj
        except IntegrationError as exc:
            t_ok = exc.t if exc.t is not None else 0.0
            j_ok = int(np.searchsorted(times, t_ok, side="right"))
            if j_ok > 0:
                traj = integrate_adaptive(field, block, (0.0, float(times[j_ok - 1])),
                                          ctrl, save_at=times[:j_ok])
                out[:j_ok, s:s + block.shape[0]] = traj
            alive_until = min(alive_until, j_ok)
    return out, alive_until


def attractor_mmd_curve(model, spec: SystemSpec, transform: AffineTransform,
                        cfg: EvalConfig, seed: int = 0):
    """MMD^2 between ground-truth- and model-evolved attractor samples.

    Both copies start from the same on-attractor sample (so the curve is
    exactly zero at time zero) and are compared on a grid of Lyapunov
    times via the biased estimator.  The plateau is the mean over the last
    fifth of the grid; divergence truncates the curve and marks the
    plateau infinite.
    """
    pts_raw = sample_on_attractor(spec, cfg.attractor_samples, seed)
    pts = transform.apply(pts_raw)
    tbar = np.linspace(0.0, cfg.lyapunov_horizon, cfg.mmd_times)
    times = tbar / cfg.lambda1
    truth = GroundTruthModel(spec, transform)
    gt_states, gt_alive = _evolve_cloud(truth.field, pts, times[1:], cfg.rollout_ctrl)
    md_states, md_alive = _evolve_cloud(model.field, pts, times[1:], cfg.rollout_ctrl)
    alive = min(gt_alive, md_alive) + 1
    curve = np.full(len(times), np.inf)
    curve[0] = 0.0
    for j in range(1, alive):
        curve[j] = mmd2_biased_large(gt_states[j - 1], md_states[j - 1], cfg.kernel)
    plateau_from = int(np.ceil(0.8 * (len(times) - 1)))
    if alive <= plateau_from:
        plateau = float("inf")
    else:
        plateau = float(np.mean(curve[plateau_from:alive]))
    return tbar[:alive], curve[:alive], plateau


def attractor_mmd_baseline(spec: SystemSpec, transform: AffineTransform,
                           cfg: EvalConfig, seed_a: int = 1, seed_b: int = 2) -> float:
    """Time-averaged MMD^2 between two independently sampled ground-truth
    clouds, both evolved with the true dynamics."""
    pts_a = transform.apply(sample_on_attractor(spec, cfg.attractor_samples, seed_a))
    pts_b = transform.apply(sample_on_attractor(spec, cfg.attractor_samples, seed_b))
    tbar = np.linspace(0.0, cfg.lyapunov_horizon, cfg.mmd_times)
    times = tbar / cfg.lambda1
    truth = GroundTruthModel(spec, transform)
    a_states, a_alive = _evolve_cloud(truth.field, pts_a, times[1:], cfg.rollout_ctrl)
    b_states, b_alive = _evolve_cloud(truth.field, pts_b, times[1:], cfg.rollout_ctrl)
    alive = min(a_alive, b_alive)
    vals = [mmd2_biased_large(pts_a, pts_b, cfg.kernel)]
    vals += [mmd2_biased_large(a_states[j], b_states[j], cfg.kernel)
             for j in range(alive)]
    return float(np.mean(vals))


def relative_errors(model, spec: SystemSpec, transform: AffineTransform, points):
    """Relative vector-field and Jacobian errors at the given test points.

    Points where the true field vanishes are skipped and counted.
    """
    points = np.asarray(points, dtype=float).reshape(-1, spec.dim)
    f_true = transform_field(spec, transform, points)
    f_model = model.field(points)
    f_norm = np.linalg.norm(f_true, axis=1)
    keep = f_norm > 0
    vf_err = np.linalg.norm(f_model[keep] - f_true[keep], axis=1) / f_norm[keep]
    j_true = transform_jacobian(spec, transform, points)
    j_model = model.jacobian(points)
    j_norm = np.linalg.norm(j_true, axis=(1, 2))
    keepj = keep & (j_norm > 0)
    jac_err = (np.linalg.norm(j_model[keepj] - j_true[keepj], axis=(1, 2))
               / j_norm[keepj])
    skipped = int(np.count_nonzero(~keep))
    return vf_err, jac_err, skipped


def lyapunov_mae(model, spec: SystemSpec, transform: AffineTransform, ics,
                 horizon: float, reorth_dt: float = 1.0,
                 ctrl: StepControl = StepControl()):
    """Mean absolute error between mean model and truth Lyapunov spectra."""
    ics = np.asarray(ics, dtype=float)
    truth = GroundTruthModel(spec, transform)

    def mean_spectrum(m_obj):
        spectra = [lyapunov_spectrum(m_obj.field, m_obj.jacobian, ic,
                                     horizon, reorth_dt, ctrl).exponents
                   for ic in ics]
        return np.mean(spectra, axis=0)

    lam_model = mean_spectrum(model)
    lam_truth = mean_spectrum(truth)
    mae = float(np.mean(np.abs(lam_model - lam_truth)))
    return mae, lam_model, lam_truth


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_potentials(cost, epsilon, max_iter, tol):
    """Log-domain alternating updates for uniform marginals.

    Stops when the dual objective <mu,f> + <nu,g> changes by less than tol
    between iterations (the potentials themselves may keep oscillating on
    symmetric problems while the value is long converged).
    """
    n, m = cost.shape
    log_mu = -np.log(n)
    log_nu = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    value = 0.0
    converged = False
    for _ in range(max_iter):
        f = -epsilon * _logsumexp((g[None, :] - cost) / epsilon + log_nu, axis=1)
        g = -epsilon * _logsumexp((f[:, None] - cost) / epsilon + log_mu, axis=0)
        new_value = f.mean() + g.mean()
        if abs(new_value - value) < tol:
            value = new_value
            converged = True
            break
        value = new_value
    return f, g, converged


def _ot_eps(x, y, epsilon, max_iter, tol):
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    f, g, converged = _sinkhorn_potentials(cost, epsilon, max_iter, tol)
    return float(f.mean() + g.mean()), converged


def sinkhorn_divergence(x, y, epsilon, max_iter: int = 2000, tol: float = 1e-6):
    """Debiased entropic transport divergence between two point clouds."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    oxy, c1 = _ot_eps(x, y, epsilon, max_iter, tol)
    oxx, c2 = _ot_eps(x, x, epsilon, max_iter, tol)
    oyy, c3 = _ot_eps(y, y, epsilon, max_iter, tol)
    return oxy - 0.5 * oxx - 0.5 * oyy, (c1 and c2 and c3)


def sinkhorn_score(model, val_ds: TrajectoryDataset, cfg: EvalConfig,
                   n_segments_per_traj: int = 10):
    """Transport divergence between data and model segment endpoints.

    Each clean validation trajectory is cut into equal segments; the model
    advances every segment's initial state to the segment end, and the
    debiased divergence compares the two endpoint clouds.
    """
    clean = _require_clean(val_ds)
    n, m, d = clean.shape
    seg = m // n_segments_per_traj
    if seg < 2:
        raise ValueError("trajectories are too short for that many segments")
    starts = clean[:, 0: n_segments_per_traj * seg: seg, :].reshape(-1, d)
    ends = clean[:, seg - 1: n_segments_per_traj * seg: seg, :].reshape(-1, d)
    times = np.array([(seg - 1) * val_ds.dt])
    pred = np.empty_like(starts)
    for s in range(0, starts.shape[0], 512):
        block = starts[s:s + 512]
        pred[s:s + block.shape[0]] = integrate_adaptive(
            model.field, block, (0.0, float(times[-1])), cfg.rollout_ctrl,
            save_at=times)[-1]
    epsilon = cfg.sinkhorn_epsilon
    if epsilon is None:
        cost = ((ends[:, None, :] - pred[None, :, :]) ** 2).sum(axis=-1)
        epsilon = 0.05 * float(cost.mean())
    value, converged = sinkhorn_divergence(ends, pred, epsilon,
                                           cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
    return value, converged


def hyperparam_sweep(train_ds: TrajectoryDataset, val_ds: TrajectoryDataset,
                     cover, base_cfg: TrainConfig, eval_cfg: EvalConfig,
                     neighbor_grid=(8, 16, 32, 64), weight_grid=(1.0, 10.0, 100.0, 1000.0)):
    """Grid search scored by the transport divergence on clean validation data.

    Returns (best (K, lambda), rows) where rows carry one dict per cell;
    failed cells are kept in the table but excluded from the argmin.  Ties
    break toward smaller lambda, then smaller K.
    """
    from dataclasses import replace as dc_replace

    rows = []
    best = None
    for k in neighbor_grid:
        for lam in weight_grid:
            row = {"K": int(k), "lambda": float(lam), "score": float("nan"),
                   "status": "ok"}
            try:
                cfg = dc_replace(base_cfg, n_neighbors=int(k),
                                 nbhd_weight=float(lam))
                model, _, _ = train(train_ds, cover, cfg, val_ds)
                score, converged = sinkhorn_score(model, val_ds, eval_cfg)
                row["score"] = float(score)
                if not converged:
                    row["status"] = "no-convergence"
            except NbodeError as exc:
                row["status"] = f"failed: {exc}"
            rows.append(row)
            if np.isfinite(row["score"]):
                key = (row["score"], row["lambda"], row["K"])
                if best is None or key < best[0]:
                    best = (key, (int(k), float(lam)))
    if best is None:
        raise NbodeError("every sweep cell failed")
    return best[1], rows


def sweep_rows_to_csv(rows) -> str:
    lines = ["K,lambda,score,status"]
    for r in rows:
        lines.append(f"{r['K']},{r['lambda']!r},{r['score']!r},{r['status']}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory) -> None:
    """Write report.json plus the plot-ready CSV files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scalars = {
        "vpt_mean": report.vpt_mean,
        "mmd_plateau": report.mmd_plateau,
        "baseline_mmd2": report.baseline_mmd2,
        "rel_vf_error_median": float(np.median(report.rel_vf_errors))
        if len(report.rel_vf_errors) else None,
        "rel_jac_error_median": float(np.median(report.rel_jac_errors))
        if len(report.rel_jac_errors) else None,
        "lyapunov_mae": report.lyapunov_mae,
        "model_lyapunov": report.model_lyapunov,
        "truth_lyapunov": report.truth_lyapunov,
        "sinkhorn_score": report.sinkhorn_score,
        "sinkhorn_converged": report.sinkhorn_converged,
        "diverged": report.diverged,
        "vpt_per_traj": report.vpt_per_traj,
    }
    with open(directory / "report.json", "w") as fh:
        json.dump(scalars, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "nrmse.csv", "w") as fh:
        fh.write("step,nrmse_mean\n")
        for j, v in enumerate(report.nrmse_mean):
            fh.write(f"{j},{v!r}\n")
    with open(directory / "mmd_curve.csv", "w") as fh:
        fh.write("lyapunov_time,mmd2,baseline\n")
        for t, v in zip(report.mmd_times, report.mmd_curve):
            fh.write(f"{t!r},{v!r},{report.baseline_mmd2!r}\n")
    with open(directory / "rel_errors.csv", "w") as fh:
        fh.write("rel_vf_error,rel_jac_error\n")
        n = max(len(report.rel_vf_errors), len(report.rel_jac_errors))
        for i in range(n):
            a = report.rel_vf_errors[i] if i < len(report.rel_vf_errors) else ""
            b = report.rel_jac_errors[i] if i < len(report.rel_jac_errors) else ""
            fh.write(f"{a!r},{b!r}\n")
    if report.model_lyapunov is not None:
        with open(directory / "lyapunov.csv", "w") as fh:
            fh.write("rank,model,truth\n")
            for r, (a, b) in enumerate(zip(report.model_lyapunov,
                                           report.truth_lyapunov), start=1):
                fh.write(f"{r},{a!r},{b!r}\n")
