import numpy as np
import pytest
from sklearn.base import clone

from nbode.estimator import NeighborhoodODE, check_trajectories
from nbode.model import init_params, rollout_center


@pytest.fixture(scope="module")
def toy_trajectories():
    # trajectories of a small random stable system, enough points for covers
    m_true = init_params(3, (2, 8, 2))
    rng = np.random.default_rng(0)
    u0 = rng.normal(size=(5, 2))
    traj = rollout_center(m_true, u0, 79, 0.05, n_sub=4)
    return np.concatenate([u0[:, None, :], traj], axis=1) * 2.0 + 1.0


def test_check_trajectories_validation():
    with pytest.raises(ValueError):
        check_trajectories(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        check_trajectories(np.zeros((2, 1, 3)))
    with pytest.raises(ValueError):
        check_trajectories(np.full((1, 5, 2), np.nan))
    out = check_trajectories([[[0.0, 1.0], [1.0, 2.0]]])
    assert out.shape == (1, 2, 2)


def test_get_set_params_round_trip():
    est = NeighborhoodODE(n_neighbors=8, nbhd_weight=5.0)
    params = est.get_params()
    assert params["n_neighbors"] == 8
    assert params["nbhd_weight"] == 5.0
    est.set_params(n_neighbors=4)
    assert est.n_neighbors == 4
    with pytest.raises(ValueError):
        est.set_params(bogus=1)


def test_clone_preserves_params():
    est = NeighborhoodODE(n_steps=7, random_state=3)
    dup = clone(est)
    assert dup.get_params() == est.get_params()
    assert dup is not est


def test_fit_predict_rollout(toy_trajectories):
    est = NeighborhoodODE(dt=0.05, n_neighbors=3, nbhd_weight=1.0,
                          rollout_steps=3, batch_size=16, n_steps=10,
                          hidden=(8,), val_every=5, random_state=0,
                          target_occupancy=0.2)
    est.fit(toy_trajectories)
    assert est.n_features_in_ == 2
    assert est.model_.val_loss is not None
    assert est.r_max_ > est.r_min_ >= 0.0

    X0 = toy_trajectories[:, 0, :]
    one = est.predict(X0)
    assert one.shape == X0.shape
    multi = est.rollout(X0, 4)
    assert multi.shape == (5, 4, 2)
    np.testing.assert_allclose(multi[:, 0, :], one, atol=1e-12)

    vf = est.vector_field(X0)
    assert vf.shape == X0.shape
    score = est.score(toy_trajectories)
    assert np.isfinite(score)


def test_fit_is_deterministic(toy_trajectories):
    kw = dict(dt=0.05, n_neighbors=3, nbhd_weight=1.0, rollout_steps=3,
              batch_size=16, n_steps=6, hidden=(8,), val_every=3,
              random_state=1, target_occupancy=0.2)
    a = NeighborhoodODE(**kw).fit(toy_trajectories)
    b = NeighborhoodODE(**kw).fit(toy_trajectories)
    np.testing.assert_array_equal(a.model_.flat_params(), b.model_.flat_params())


def test_vanilla_mode_skips_cover(toy_trajectories):
    est = NeighborhoodODE(dt=0.05, nbhd_weight=0.0, rollout_steps=3,
                          batch_size=16, n_steps=5, hidden=(8,), val_every=2,
                          random_state=0)
    est.fit(toy_trajectories)
    assert not hasattr(est, "r_max_")


def test_predict_before_fit_raises():
    est = NeighborhoodODE()
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 2)))


def test_predict_validates_dimension(toy_trajectories):
    est = NeighborhoodODE(dt=0.05, nbhd_weight=0.0, rollout_steps=2,
                          batch_size=8, n_steps=3, hidden=(4,), val_every=2)
    est.fit(toy_trajectories)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 5)))
