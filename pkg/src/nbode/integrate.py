"""Numerical ODE integration.

Three entry points:

* :func:`rk4_step` -- one classical fixed step; generic over the array type
  so it can also drive differentiable rollouts.
* :func:`integrate_adaptive` -- an embedded 5(4) pair (Tsitouras tableau)
  with a PI step-size controller and cubic-Hermite dense output.  Used for
  data generation and evaluation; fully deterministic.
* :func:`lyapunov_spectrum` -- variational integration with modified
  Gram-Schmidt reorthonormalization at fixed intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, IntegrationError, NbodeError, StiffnessError

# Tsitouras 5(4) coefficients.  b equals the last a-row (FSAL); bt is the
# difference between the 5th- and embedded 4th-order weights.
_C = (0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0)
_A = (
    (0.161,),
    (-0.008480655492356989, 0.335480655492357),
    (2.8971530571054935, -6.359448489975075, 4.3622954328695815),
    (5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525),
    (5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401,
     -0.028269050394068383),
    (0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
     -3.290069515436081, 2.324710524099774),
)
_BT = (
    -0.00178001105222577714,
    -0.0008164344596567469,
    0.007880878010261995,
    -0.1447110071732629,
    0.5823571654525552,
    -0.45808210592918697,
    0.015151515151515152,
)

_ORDER = 5
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / _ORDER
_PI_BETA = 0.4 / _ORDER


@dataclass(frozen=True)
class StepControl:
    """Adaptive step-size settings (Hairer-style mixed error norm)."""

    rtol: float = 1e-8
    atol: float = 1e-10
    dt_init: float = 1e-3
    dt_max: float = 1.0
    safety: float = 0.9

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.dt_init <= self.dt_max:
            raise ValueError("dt_init must not exceed dt_max")
        if not 0.0 < self.safety < 1.0:
            raise ValueError("safety must lie in (0, 1)")


@dataclass(frozen=True)
class LyapunovResult:
    """Lyapunov exponents (descending, units 1/time) plus run settings."""

    exponents: np.ndarray
    horizon: float
    reorth_dt: float

    def __post_init__(self):
        object.__setattr__(self, "exponents", np.asarray(self.exponents, dtype=float))
        if not np.all(np.isfinite(self.exponents)):
            raise ValueError("exponents must be finite")
        if np.any(np.diff(self.exponents) > 0):
            raise ValueError("exponents must be sorted descending")


def rk4_step(field, u, dt):
    """One classical Runge-Kutta step; works on any type with array arithmetic."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = field(u)
    k2 = field(u + (dt / 2.0) * k1)
    k3 = field(u + (dt / 2.0) * k2)
    k4 = field(u + dt * k3)
    out = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if isinstance(out, np.ndarray) and not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state in rk4 stage", t=dt)
    return out


def _hermite(theta, h, u0, f0, u1, f1):
    # Cubic Hermite interpolant on an accepted step (4th-order accurate).
    return (1.0 - theta) * u0 + theta * u1 + theta * (theta - 1.0) * (
        (1.0 - 2.0 * theta) * (u1 - u0) + (theta - 1.0) * h * f0 + theta * h * f1
    )


def integrate_adaptive(field, u0, t_span, ctrl: StepControl = StepControl(), save_at=None):
    """Integrate du/dt = field(u) over t_span, returning states at save_at.

    Dense output between accepted steps uses cubic Hermite interpolation,
    so save_at points need not coincide with solver steps.  Identical
    inputs always produce identical step sequences and outputs.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must satisfy t1 > t0")
    u = np.array(u0, dtype=float)
    if save_at is None:
        save_at = np.array([t1])
    save_at = np.asarray(save_at, dtype=float)
    if save_at.size and (np.any(np.diff(save_at) < 0)
                         or save_at[0] < t0 or save_at[-1] > t1):
        raise ValueError("save_at must be sorted ascending within t_span")

    out = np.empty((save_at.size,) + u.shape)
    si = 0
    while si < save_at.size and save_at[si] <= t0:
        out[si] = u
        si += 1

    f0 = np.asarray(field(u), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise DivergenceError("field non-finite at initial state", t=t0, last_state=u)

    t = t0
    dt = min(ctrl.dt_init, ctrl.dt_max, t1 - t0)
    err_prev = 1.0
    k = [None] * 7
    while t < t1 and si < save_at.size:
        clipped = dt >= t1 - t
        h = min(dt, t1 - t)
        k[0] = f0
        bad = False
        for i in range(6):
            acc = _A[i][0] * k[0]
            for j in range(1, i + 1):
                acc = acc + _A[i][j] * k[j]
            stage = u + h * acc
            k[i + 1] = np.asarray(field(stage), dtype=float)
            if not np.all(np.isfinite(k[i + 1])):
                bad = True
                break
        if not bad:
            u_new = stage  # 7th stage state equals the 5th-order solution (FSAL)
            err_vec = h * sum(bt * ki for bt, ki in zip(_BT, k))
            scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(u), np.abs(u_new))
            err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
            err = max(err, 1e-16)  # exact solutions must not break the controller
            bad = not (np.all(np.isfinite(u_new)) and math.isfinite(err))
        if bad:
            dt = h * _MIN_FACTOR
            if dt < 1e-14 * (t1 - t0):
                raise DivergenceError(
                    "state diverged (non-finite)", t=t, last_state=u
                )
            continue

        if err <= 1.0:
            t_new = t1 if clipped else t + h
            while si < save_at.size and save_at[si] <= t_new:
                theta = min(1.0, (save_at[si] - t) / h)
                out[si] = _hermite(theta, h, u, f0, u_new, k[6])
                si += 1
            t, u, f0 = t_new, u_new, k[6]
            factor = ctrl.safety * err ** -_PI_ALPHA * err_prev ** _PI_BETA
            err_prev = max(err, 1e-10)
            dt = min(h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor)), ctrl.dt_max)
        else:
            dt = h * max(_MIN_FACTOR, ctrl.safety * err ** (-1.0 / _ORDER))
        if dt < 1e-14 * (t1 - t0):
            raise StiffnessError("step size underflow", t=t)
    while si < save_at.size:  # save points at/after the final time
        out[si] = u
        si += 1
    return out


def _modified_gram_schmidt(A):
    Q = np.array(A, dtype=float)
    d = Q.shape[1]
    diag = np.empty(d)
    for j in range(d):
        r = np.linalg.norm(Q[:, j])
        if not (np.isfinite(r) and r > 1e-300):
            raise NbodeError("degenerate frame in Gram-Schmidt reorthonormalization")
        diag[j] = r
        Q[:, j] /= r
        for m in range(j + 1, d):
            Q[:, m] -= (Q[:, j] @ Q[:, m]) * Q[:, j]
    return Q, diag


def lyapunov_spectrum(field, jacobian, u0, horizon, reorth_dt=1.0,
                      ctrl: StepControl = StepControl()) -> LyapunovResult:
    """Lyapunov exponents via the variational equation dM/dt = J(u) M.

    The coupled (u, M) system is integrated adaptively; every ``reorth_dt``
    the frame M is reorthonormalized with modified Gram-Schmidt and the
    logs of the diagonal growth factors are accumulated.
    """
    u0 = np.asarray(u0, dtype=float)
    d = u0.shape[0]
    if not horizon > reorth_dt > 0:
        raise ValueError("need horizon > reorth_dt > 0")

    def coupled(y):
        u = y[:d]
        M = y[d:].reshape(d, d)
        return np.concatenate([
            np.asarray(field(u), dtype=float),
            (np.asarray(jacobian(u), dtype=float) @ M).ravel(),
        ])

    y = np.concatenate([u0, np.eye(d).ravel()])
    logs = np.zeros(d)
    t_acc = 0.0
    while t_acc < horizon - 1e-12 * horizon:
        span = min(reorth_dt, horizon - t_acc)
        y = integrate_adaptive(coupled, y, (0.0, span), ctrl, save_at=[span])[-1]
        Q, diag = _modified_gram_schmidt(y[d:].reshape(d, d))
        logs += np.log(diag)
        y[d:] = Q.ravel()
        t_acc += span
    exponents = np.sort(logs / t_acc)[::-1]
    return LyapunovResult(exponents=exponents, horizon=t_acc, reorth_dt=reorth_dt)
