import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbode.systems import (
    AffineTransform,
    chen_hyper,
    eval_jacobian,
    eval_vector_field,
    from_name,
    lorenz63,
    lorenz96,
    transform_field,
    transform_jacobian,
)

ALL_SPECS = [lorenz63(), chen_hyper(), lorenz96()]


def fd_jacobian(spec, u, h=1e-5):
    d = len(u)
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        J[:, i] = (eval_vector_field(spec, u + e) - eval_vector_field(spec, u - e)) / (2 * h)
    return J


def test_lorenz63_hand_value():
    # sigma*(y-x)=0, x*(rho-z)-y=26, x*y-beta*z=-5/3 at (1,1,1)
    f = eval_vector_field(lorenz63(), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(f, [0.0, 26.0, -5.0 / 3.0], rtol=0, atol=1e-14)


def test_lorenz96_origin_forcing():
    f = eval_vector_field(lorenz96(), np.zeros(6))
    np.testing.assert_array_equal(f, np.full(6, 10.0))


def test_chen_origin_fixed_point():
    f = eval_vector_field(chen_hyper(), np.zeros(4))
    np.testing.assert_array_equal(f, np.zeros(4))


def test_lorenz63_jacobian_first_row():
    J = eval_jacobian(lorenz63(), np.random.default_rng(0).normal(size=3))
    np.testing.assert_array_equal(J[0], [-10.0, 10.0, 0.0])


def test_lorenz63_trace_is_constant_divergence():
    rng = np.random.default_rng(3)
    for _ in range(5):
        J = eval_jacobian(lorenz63(), rng.normal(size=3) * 10)
        assert abs(np.trace(J) - (-41.0 / 3.0)) < 1e-12


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.name)
def test_jacobian_matches_finite_differences(spec):
    rng = np.random.default_rng(11)
    for _ in range(100):
        u = rng.normal(size=spec.dim) * 5.0
        J = eval_jacobian(spec, u)
        J_fd = fd_jacobian(spec, u)
        rel = np.linalg.norm(J - J_fd) / max(np.linalg.norm(J_fd), 1e-300)
        assert rel <= 1e-6


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        eval_vector_field(lorenz63(), np.zeros(4))
    with pytest.raises(ValueError):
        eval_jacobian(lorenz96(), np.zeros(3))


def test_batched_evaluation_matches_loop():
    spec = chen_hyper()
    rng = np.random.default_rng(5)
    U = rng.normal(size=(7, 4))
    F = eval_vector_field(spec, U)
    J = eval_jacobian(spec, U)
    for i in range(7):
        np.testing.assert_array_equal(F[i], eval_vector_field(spec, U[i]))
        np.testing.assert_array_equal(J[i], eval_jacobian(spec, U[i]))


def test_from_name_and_unknown():
    assert from_name("lorenz63").dim == 3
    assert from_name("chen_hyper").dim == 4
    assert from_name("lorenz96").dim == 6
    with pytest.raises(ValueError):
        from_name("roessler")


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3),
       st.lists(st.floats(0.1, 20), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_affine_round_trip(shift, scale):
    t = AffineTransform(np.array(shift), np.array(scale))
    u = np.array([1.7, -2.3, 9.1])
    back = t.invert(t.apply(u))
    assert np.all(np.abs(back - u) <= 1e-12 * np.maximum(np.abs(u), 1.0))


def test_affine_requires_positive_scale():
    with pytest.raises(ValueError):
        AffineTransform(np.zeros(2), np.array([1.0, 0.0]))


def test_transform_field_identity_is_bit_exact():
    spec = lorenz63()
    t = AffineTransform.identity(3)
    u = np.array([0.3, -1.4, 11.0])
    np.testing.assert_array_equal(transform_field(spec, t, u),
                                  eval_vector_field(spec, u))
    np.testing.assert_array_equal(transform_jacobian(spec, t, u),
                                  eval_jacobian(spec, u))


def test_transform_field_uniform_scale_chain_rule():
    spec = lorenz96()
    t = AffineTransform(np.zeros(6), np.full(6, 2.0))
    v = np.random.default_rng(2).normal(size=6)
    np.testing.assert_allclose(transform_field(spec, t, v),
                               eval_vector_field(spec, 2.0 * v) / 2.0,
                               rtol=1e-14)


def test_transform_jacobian_trace_invariant():
    # diagonal similarity preserves the trace
    spec = lorenz63()
    t = AffineTransform(np.array([1.0, -2.0, 5.0]), np.array([2.0, 0.5, 7.0]))
    v = np.array([0.2, 0.4, -1.0])
    J = transform_jacobian(spec, t, v)
    assert abs(np.trace(J) - (-41.0 / 3.0)) < 1e-12


def test_transform_jacobian_matches_finite_differences():
    spec = chen_hyper()
    t = AffineTransform(np.array([0.1, 0.2, 18.0, -0.4]),
                        np.array([1.5, 2.5, 6.0, 0.7]))
    rng = np.random.default_rng(8)
    for _ in range(10):
        v = rng.normal(size=4)
        J = transform_jacobian(spec, t, v)
        h = 1e-5
        J_fd = np.empty((4, 4))
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            J_fd[:, i] = (transform_field(spec, t, v + e)
                          - transform_field(spec, t, v - e)) / (2 * h)
        rel = np.linalg.norm(J - J_fd) / np.linalg.norm(J_fd)
        assert rel <= 1e-6
