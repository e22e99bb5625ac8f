import numpy as np
import pytest
from scipy.linalg import expm

from nbode.errors import DivergenceError, IntegrationError
from nbode.integrate import (
    LyapunovResult,
    StepControl,
    integrate_adaptive,
    lyapunov_spectrum,
    rk4_step,
)
from nbode.systems import (
    AffineTransform,
    eval_jacobian,
    eval_vector_field,
    lorenz63,
    transform_field,
    transform_jacobian,
)

TIGHT = StepControl(rtol=1e-8, atol=1e-10)


def l63_field(u):
    return eval_vector_field(lorenz63(), u)


def l63_jac(u):
    return eval_jacobian(lorenz63(), u)


def test_rk4_zero_field_is_identity():
    out = rk4_step(lambda u: 0.0 * u, np.array([1.0, 2.0]), 0.1)
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_rk4_exponential_oracle():
    # closed-form solution of du/dt = u over one step
    out = rk4_step(lambda u: u, np.array([1.0]), 0.01)
    assert abs(out[0] - 1.0100501670841678) <= 1e-12


def test_rk4_linear_field_is_truncated_matrix_exponential():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    u = rng.normal(size=3)
    dt = 0.05
    out = rk4_step(lambda x: x @ A.T, u, dt)
    # expanding the tableau for f(u) = A u gives sum_{k<=4} (dt A)^k / k!
    T = np.eye(3)
    term = np.eye(3)
    for k in range(1, 5):
        term = term @ (dt * A) / k
        T = T + term
    np.testing.assert_allclose(out, T @ u, rtol=0, atol=1e-14)


def test_rk4_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        rk4_step(lambda u: u, np.array([1.0]), 0.0)


def test_rk4_nonfinite_stage_raises():
    with pytest.raises(IntegrationError):
        rk4_step(lambda u: u * np.inf, np.array([1.0]), 0.1)


def test_adaptive_zero_field_constant():
    u0 = np.array([3.0, -1.0])
    out = integrate_adaptive(lambda u: 0.0 * u, u0, (0.0, 2.0), TIGHT,
                             save_at=[0.0, 0.7, 2.0])
    for row in out:
        np.testing.assert_array_equal(row, u0)


def test_adaptive_exponential_endpoint():
    out = integrate_adaptive(lambda u: u, np.array([1.0]), (0.0, 1.0),
                             StepControl(rtol=1e-8, atol=1e-10), save_at=[1.0])
    assert abs(out[-1, 0] - np.e) <= 1e-7


def test_adaptive_dense_output_accuracy():
    save = np.linspace(0.0, 1.0, 17)
    out = integrate_adaptive(lambda u: u, np.array([1.0]), (0.0, 1.0), TIGHT,
                             save_at=save)
    np.testing.assert_allclose(out[:, 0], np.exp(save), rtol=1e-6)


def test_adaptive_lorenz_self_convergence():
    u0 = np.array([1.0, 1.0, 1.0])
    a = integrate_adaptive(l63_field, u0, (0.0, 1.0), TIGHT, save_at=[1.0])
    ref = integrate_adaptive(l63_field, u0, (0.0, 1.0),
                             StepControl(rtol=1e-12, atol=1e-14), save_at=[1.0])
    assert np.linalg.norm(a - ref) <= 1e-5


def test_adaptive_deterministic():
    u0 = np.array([1.0, 1.0, 1.0])
    save = np.linspace(0.0, 2.0, 9)
    a = integrate_adaptive(l63_field, u0, (0.0, 2.0), TIGHT, save_at=save)
    b = integrate_adaptive(l63_field, u0, (0.0, 2.0), TIGHT, save_at=save)
    assert np.array_equal(a, b)


def test_adaptive_tolerance_self_consistency():
    # tightening the tolerance moves the endpoint by less than the prior
    # distance to a much tighter reference
    u0 = np.array([1.0, 1.0, 1.0])
    ref = integrate_adaptive(l63_field, u0, (0.0, 1.0),
                             StepControl(rtol=1e-12, atol=1e-14), save_at=[1.0])
    loose = integrate_adaptive(l63_field, u0, (0.0, 1.0),
                               StepControl(rtol=1e-6, atol=1e-8), save_at=[1.0])
    half = integrate_adaptive(l63_field, u0, (0.0, 1.0),
                              StepControl(rtol=5e-7, atol=5e-9), save_at=[1.0])
    err_prior = np.linalg.norm(loose - ref)
    change = np.linalg.norm(half - loose)
    assert change <= err_prior * 1.5 + 1e-14
    assert np.linalg.norm(half - ref) <= err_prior


def test_adaptive_divergence_error():
    # field turns non-finite past a threshold: solver must report divergence
    # with the last finite state rather than grinding the step to zero
    def field(u):
        return np.where(np.abs(u) > 10.0, np.inf, u * u)

    with pytest.raises(DivergenceError) as exc_info:
        integrate_adaptive(field, np.array([1.0]), (0.0, 2.0),
                           StepControl(rtol=1e-6, atol=1e-8, dt_max=10.0),
                           save_at=[2.0])
    assert exc_info.value.t is not None
    assert np.all(np.isfinite(exc_info.value.last_state))


def test_adaptive_stiffness_error_on_blowup():
    # du/dt = u^2 from 1 explodes at t = 1; the error control tracks the
    # singularity until the step underflows
    from nbode.errors import StiffnessError

    with pytest.raises(StiffnessError):
        integrate_adaptive(lambda u: u * u, np.array([1.0]), (0.0, 2.0),
                           StepControl(rtol=1e-6, atol=1e-8, dt_max=10.0),
                           save_at=[2.0])


def test_adaptive_validates_span_and_grid():
    with pytest.raises(ValueError):
        integrate_adaptive(lambda u: u, np.array([1.0]), (1.0, 0.0))
    with pytest.raises(ValueError):
        integrate_adaptive(lambda u: u, np.array([1.0]), (0.0, 1.0),
                           save_at=[0.5, 0.2])


def test_lyapunov_diagonal_linear_system():
    a = np.array([-1.0, 0.5])
    res = lyapunov_spectrum(lambda u: a * u, lambda u: np.diag(a),
                            np.array([1.0, 1.0]), horizon=50.0, reorth_dt=1.0)
    np.testing.assert_allclose(res.exponents, [0.5, -1.0], atol=1e-8)


@pytest.fixture(scope="module")
def l63_spectrum():
    return lyapunov_spectrum(l63_field, l63_jac, np.array([1.0, 1.0, 1.05]),
                             horizon=300.0, reorth_dt=1.0, ctrl=TIGHT)


def test_lyapunov_lorenz_sum_matches_divergence(l63_spectrum):
    assert abs(l63_spectrum.exponents.sum() - (-41.0 / 3.0)) <= 0.05


def test_lyapunov_lorenz_zero_exponent(l63_spectrum):
    assert abs(l63_spectrum.exponents[1]) <= 0.02


def test_lyapunov_reorth_invariance(l63_spectrum):
    for reorth in (0.1, 0.5):
        res = lyapunov_spectrum(l63_field, l63_jac, np.array([1.0, 1.0, 1.05]),
                                horizon=300.0, reorth_dt=reorth, ctrl=TIGHT)
        assert np.all(np.abs(res.exponents - l63_spectrum.exponents) <= 0.02)


def test_lyapunov_invariant_under_normalization(l63_spectrum):
    spec = lorenz63()
    t = AffineTransform(np.array([0.0, 0.5, 23.0]), np.array([7.9, 9.0, 8.6]))
    res = lyapunov_spectrum(
        lambda v: transform_field(spec, t, v),
        lambda v: transform_jacobian(spec, t, v),
        t.apply(np.array([1.0, 1.0, 1.05])), horizon=300.0, reorth_dt=1.0,
        ctrl=TIGHT)
    assert np.all(np.abs(res.exponents - l63_spectrum.exponents) <= 0.02)


def test_lyapunov_result_validates_sorting():
    with pytest.raises(ValueError):
        LyapunovResult(exponents=np.array([0.0, 1.0]), horizon=1.0, reorth_dt=0.1)


def test_step_control_validation():
    with pytest.raises(ValueError):
        StepControl(rtol=0.0)
    with pytest.raises(ValueError):
        StepControl(dt_init=2.0, dt_max=1.0)
    with pytest.raises(ValueError):
        StepControl(safety=1.5)
