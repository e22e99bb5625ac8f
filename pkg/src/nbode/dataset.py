"""Trajectory dataset generation and its bit-exact on-disk format.

The generation pipeline follows four stages: draw initial conditions in the
basin of attraction and burn them in, estimate the characteristic timescale
from averaged frequency spectra, simulate trajectories sampled at 0.01 of
that timescale, then normalize everything with the train split's statistics
and (for train/val) add relative Gaussian noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from .errors import EstimationError, GenerationError, IntegrationError, SequencingError
from .integrate import StepControl, integrate_adaptive
from .systems import AffineTransform, SystemSpec, eval_vector_field, from_name

DATA_CONTROL = StepControl(rtol=1e-8, atol=1e-10)
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")

# Fixed tags deriving independent child seeds from the master seed.
_SEED_TIMESCALE = 101
_SEED_INIT = {"train": 111, "val": 112, "test": 113}
_SEED_NOISE = {"train": 121, "val": 122}


@dataclass
class TrajectoryDataset:
    """n trajectories of m states each, in normalized coordinates."""

    states: np.ndarray          # (n, m, d), noisy for train/val
    dt: float                   # sampling interval = 0.01 * tau
    tau: float                  # characteristic timescale
    transform: AffineTransform  # train-split normalization
    noise_std: float
    seed: int
    split: str
    system: str
    clean_states: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise ValueError("states must have shape (n, m, d)")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def n_time(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def _child_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


def _integrate_rows(field, ics, t_end, save_at, ctrl=DATA_CONTROL):
    """Integrate each row of ics over [0, t_end]; returns (n, len(save_at), d).

    The rows are advanced as one stacked state for speed (the tolerance then
    applies to the stacked error norm); on failure the rows are retried one
    by one so the offending trajectory index can be reported.
    """
    ics = np.asarray(ics, dtype=float)
    try:
        out = integrate_adaptive(field, ics, (0.0, t_end), ctrl, save_at=save_at)
        return np.moveaxis(out, 0, 1)
    except IntegrationError:
        pass
    rows = []
    for i in range(ics.shape[0]):
        try:
            rows.append(integrate_adaptive(field, ics[i], (0.0, t_end), ctrl,
                                           save_at=save_at))
        except IntegrationError as exc:
            raise GenerationError(f"trajectory {i} diverged: {exc}") from exc
    return np.stack(rows)


def sample_on_attractor(spec: SystemSpec, n: int, seed) -> np.ndarray:
    """Draw n basin points from the init distribution and burn them in."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n == 0:
        return np.zeros((0, spec.dim))
    draws = spec.init_mean + spec.init_std * rng.standard_normal((n, spec.dim))
    field = lambda u: eval_vector_field(spec, u)
    try:
        return _integrate_rows(field, draws, spec.burn_in, [spec.burn_in])[:, -1, :]
    except GenerationError as exc:
        raise GenerationError(f"burn-in failed: {exc}") from exc


def timescale_from_signals(signals: np.ndarray, dt: float, smooth_sigma: float = 2.0) -> float:
    """Characteristic timescale from uniformly sampled multivariate signals.

    Per dimension: magnitude spectrum of the mean-removed signal, averaged
    over trajectories, Gaussian-smoothed, then the most prominent peak.
    The timescale is the median over dimensions of 1/f_peak.  Dimensions
    without any peak are skipped; no peak anywhere raises.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 3:
        raise ValueError("signals must have shape (n_traj, n_samples, d)")
    n_traj, n_samples, d = signals.shape
    centered = signals - signals.mean(axis=1, keepdims=True)
    spectra = np.abs(np.fft.rfft(centered, axis=1)).mean(axis=0)  # (n_freq, d)
    freqs = np.fft.rfftfreq(n_samples, d=dt)
    periods = []
    for k in range(d):
        smooth = gaussian_filter1d(spectra[:, k], sigma=smooth_sigma)
        peaks, props = find_peaks(smooth, prominence=0.0)
        keep = peaks > 0  # the DC bin is not a physical frequency
        peaks, prom = peaks[keep], props["prominences"][keep]
        if peaks.size == 0:
            continue
        best = peaks[np.argmax(prom)]
        periods.append(1.0 / freqs[best])
    if not periods:
        raise EstimationError("no prominent frequency peak found in any dimension")
    return float(np.median(periods))


def estimate_timescale(spec: SystemSpec, n_traj: int = 8, horizon: float = 100.0,
                       seed=0, n_samples: int = 8192) -> float:
    """Estimate the system timescale from on-attractor trajectory spectra."""
    ics = sample_on_attractor(spec, n_traj, _child_rng(seed, _SEED_TIMESCALE))
    dt = horizon / n_samples
    save_at = np.arange(n_samples) * dt
    field = lambda u: eval_vector_field(spec, u)
    signals = _integrate_rows(field, ics, horizon, save_at)
    return timescale_from_signals(signals, dt)


def generate_dataset(spec: SystemSpec, split: str, noise_std: float, seed: int,
                     tau: float | None = None, transform: AffineTransform | None = None,
                     n_traj: int = 50, n_time: int = 1000) -> TrajectoryDataset:
    """Simulate one split: n_traj trajectories of n_time points at dt = 0.01 tau.

    The train split fits its own normalization; val/test must be handed the
    train transform.  Noise (i.i.d. Gaussian, applied after normalization so
    noise_std is relative) corrupts train and val only; test stays clean.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if split != "train" and transform is None:
        raise SequencingError(
            f"generating the {split} split requires the train transform"
        )
    if tau is None:
        tau = estimate_timescale(spec, seed=seed)
    dt = 0.01 * tau
    ics = sample_on_attractor(spec, n_traj, _child_rng(seed, _SEED_INIT[split]))
    save_at = np.arange(n_time) * dt
    field = lambda u: eval_vector_field(spec, u)
    raw = _integrate_rows(field, ics, save_at[-1] if n_time > 1 else dt, save_at)
    if split == "train":
        transform = AffineTransform.from_data(raw)
    clean = transform.apply(raw)
    states = clean.copy()
    if split != "test" and noise_std > 0:
        rng = _child_rng(seed, _SEED_NOISE[split])
        states = states + noise_std * rng.standard_normal(states.shape)
    return TrajectoryDataset(
        states=states, dt=dt, tau=float(tau), transform=transform,
        noise_std=float(noise_std), seed=int(seed), split=split,
        system=spec.name, clean_states=clean,
    )


def generate_splits(spec: SystemSpec, noise_std: float, seed: int,
                    tau: float | None = None, n_traj: int = 50, n_time: int = 1000,
                    timescale_traj: int = 8, timescale_horizon: float = 100.0):
    """Generate train/val/test with a shared timescale and train transform."""
    if tau is None:
        tau = estimate_timescale(spec, n_traj=timescale_traj,
                                 horizon=timescale_horizon, seed=seed)
    train = generate_dataset(spec, "train", noise_std, seed, tau=tau,
                             n_traj=n_traj, n_time=n_time)
    val = generate_dataset(spec, "val", noise_std, seed, tau=tau,
                           transform=train.transform, n_traj=n_traj, n_time=n_time)
    test = generate_dataset(spec, "test", 0.0, seed, tau=tau,
                            transform=train.transform, n_traj=n_traj, n_time=n_time)
    return {"train": train, "val": val, "test": test}


def save_dataset(ds: TrajectoryDataset, directory) -> None:
    """Write meta.json + states.bin/clean.bin (little-endian f64, row-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = from_name(ds.system)
    meta = {
        "format": FORMAT_VERSION,
        "system": ds.system,
        "params": spec.params,
        "n": ds.n_traj,
        "m": ds.n_time,
        "d": ds.dim,
        "dt": ds.dt,
        "tau": ds.tau,
        "shift": ds.transform.shift.tolist(),
        "scale": ds.transform.scale.tolist(),
        "noise_std": ds.noise_std,
        "seed": ds.seed,
        "split": ds.split,
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ds.states.astype("<f8").tofile(directory / "states.bin")
    if ds.clean_states is not None:
        ds.clean_states.astype("<f8").tofile(directory / "clean.bin")


def load_dataset(directory) -> TrajectoryDataset:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format: {meta.get('format')}")
    shape = (meta["n"], meta["m"], meta["d"])
    states = np.fromfile(directory / "states.bin", dtype="<f8").reshape(shape)
    clean = None
    clean_path = directory / "clean.bin"
    if clean_path.exists():
        clean = np.fromfile(clean_path, dtype="<f8").reshape(shape)
    return TrajectoryDataset(
        states=states,
        dt=meta["dt"],
        tau=meta["tau"],
        transform=AffineTransform(np.array(meta["shift"]), np.array(meta["scale"])),
        noise_std=meta["noise_std"],
        seed=meta["seed"],
        split=meta["split"],
        system=meta["system"],
        clean_states=clean,
    )
