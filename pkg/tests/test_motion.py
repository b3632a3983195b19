import numpy as np
import pytest
from hitrack.errors import ConditioningError, NumericError, ParameterError
from hitrack.motion import (
    KalmanConfig,
    KalmanState,
    innovation,
    km_init,
    km_predict,
    km_update,
    motion_map,
    predict_search_center,
)
from hitrack.signal import cosine_window
from numpy.testing import assert_allclose, assert_array_equal
from parametrization import Parametrization as P


@pytest.fixture
def config() -> KalmanConfig:
    return KalmanConfig.constant_velocity()


def state_at(x, y, dx, dy) -> KalmanState:
    return KalmanState(np.array([x, y, dx, dy], dtype=float), np.diag([1.0, 1.0, 100.0, 100.0]))


def track(config, steps, velocity, noise, seed):
    rng = np.random.default_rng(seed)
    truth = np.array([10.0, 20.0]) + np.outer(np.arange(steps), velocity)
    measured = truth + rng.normal(0.0, noise, truth.shape)
    state = km_init(tuple(measured[0]))
    estimates = [measured[0]]
    for z in measured[1:]:
        state = km_update(km_predict(state, config), tuple(z), config)
        estimates.append(state.x_hat[:2])
    return truth, measured, np.array(estimates), state


def test_constant_velocity_matrices(config):
    expected = np.eye(4)
    expected[0, 2] = expected[1, 3] = 1
    assert_array_equal(config.F, expected)
    assert_array_equal(config.H, np.eye(2, 4))
    assert_allclose(config.Q, 1e-2 * np.diag([0.25, 0.25, 1, 1]))
    assert_allclose(config.R, 4.0 * np.eye(2))


@P.autodetect_parameters()
@P.case(name="negative_q", q=-1.0, r=1.0)
@P.case(name="negative_r", q=1.0, r=-1.0)
def test_negative_noise_is_rejected(q, r):
    with pytest.raises(ParameterError):
        KalmanConfig.constant_velocity(q, r)


def test_config_rejects_asymmetric_noise(config):
    with pytest.raises(ParameterError):
        KalmanConfig(config.F, config.H, np.triu(np.ones((4, 4))), config.R)


def test_init_has_zero_velocity_and_wide_velocity_variance():
    state = km_init((3.0, 4.0))
    assert state.position == (3.0, 4.0)
    assert state.velocity == (0.0, 0.0)
    assert_array_equal(np.diag(state.P), [1, 1, 100, 100])


@P.autodetect_parameters()
@P.case(name="static", start=(5, 7, 0, 0), expected=(5, 7))
@P.case(name="moving", start=(0, 0, 2, -1), expected=(2, -1))
def test_predict_moves_by_the_velocity(start, expected, config):
    assert km_predict(state_at(*start), config).position == expected


def test_predict_grows_uncertainty(config):
    state = state_at(0, 0, 1, 1)
    assert np.trace(km_predict(state, config).P) >= np.trace(state.P)


def test_predict_rejects_non_finite_state(config):
    with pytest.raises(NumericError):
        km_predict(state_at(np.nan, 0, 0, 0), config)


def test_update_with_a_perfect_measurement_keeps_the_position(config):
    predicted = km_predict(state_at(10, 10, 1, 0), config)
    updated = km_update(predicted, predicted.position, config)
    assert_allclose(updated.position, predicted.position)


def test_untrusted_measurements_are_ignored():
    config = KalmanConfig.constant_velocity(r=1e12)
    predicted = km_predict(state_at(10, 10, 1, 0), config)
    updated = km_update(predicted, (50.0, -30.0), config)
    assert np.linalg.norm(updated.x_hat - predicted.x_hat) < 1e-6


def test_exact_measurements_are_adopted():
    config = KalmanConfig.constant_velocity(r=0.0)
    predicted = km_predict(state_at(10, 10, 1, 0), config)
    updated = km_update(predicted, (14.0, 8.0), config)
    assert_allclose(updated.position, (14.0, 8.0), atol=1e-8)


def test_singular_innovation_covariance_is_reported():
    config = KalmanConfig.constant_velocity(q=0.0, r=0.0)
    singular = KalmanState(np.zeros(4), np.zeros((4, 4)))
    with pytest.raises(ConditioningError):
        km_update(singular, (1.0, 1.0), config)


def test_innovation_is_the_measurement_residual(config):
    predicted = state_at(3, 4, 0, 0)
    assert_allclose(innovation(predicted, (5.0, 1.0), config), [2.0, -3.0])


def test_velocity_is_learned_from_noisy_measurements(config):
    truth, measured, estimates, state = track(config, 200, (3.0, -2.0), 2.0, seed=4)
    assert state.velocity[0] == pytest.approx(3.0, abs=0.2)
    assert state.velocity[1] == pytest.approx(-2.0, abs=0.2)
    filtered_rmse = np.sqrt(np.mean(np.sum((estimates - truth) ** 2, axis=1)))
    measured_rmse = np.sqrt(np.mean(np.sum((measured - truth) ** 2, axis=1)))
    assert filtered_rmse < measured_rmse


def test_corrected_track_is_smoother_than_the_measurements(config):
    _, measured, estimates, _ = track(config, 120, (2.0, 1.0), 2.0, seed=9)

    def roughness(points):
        return np.sum(np.diff(points, n=2, axis=0) ** 2)

    assert roughness(estimates) < roughness(measured)


def test_covariance_stays_symmetric_positive_semidefinite(config):
    rng = np.random.default_rng(0)
    state = km_init((0.0, 0.0))
    for _ in range(10_000):
        state = km_predict(state, config)
        state = km_update(state, tuple(rng.uniform(-50, 50, 2)), config)
    assert_allclose(state.P, state.P.T, atol=1e-9)
    assert np.linalg.eigvalsh(state.P).min() >= -1e-6


@P.autodetect_parameters()
@P.case(name="static", start=(50, 50, 0, 0), expected=(50.0, 50.0))
@P.case(name="clamped", start=(5, 5, -10, 0), expected=(0.0, 5.0))
@P.case(name="moving", start=(10, 10, 4, 3), expected=(14.0, 13.0))
def test_search_center_is_the_clamped_prediction(start, expected, config):
    state = state_at(*start)
    assert predict_search_center(state, config, (100, 100)) == expected
    assert_array_equal(state.x_hat, start)


def test_centered_cosine_map_is_the_cosine_window():
    assert_allclose(motion_map((9, 7), (4.0, 3.0), "cosine"), cosine_window(9, 7), atol=1e-12)


def test_wide_gaussian_map_is_flat():
    assert np.max(np.abs(motion_map((16, 16), (8.0, 8.0), "gaussian", 1e6) - 1)) < 1e-3


@P.autodetect_parameters()
@P.case(name="cosine", kind="cosine")
@P.case(name="gaussian", kind="gaussian")
def test_motion_map_follows_its_center(kind):
    base = motion_map((17, 17), (8.0, 8.0), kind, 2.0)
    moved = motion_map((17, 17), (10.0, 8.0), kind, 2.0)
    assert np.unravel_index(np.argmax(base), base.shape) == (8, 8)
    assert np.unravel_index(np.argmax(moved), moved.shape) == (8, 10)
    assert moved.min() >= 0 and moved.max() <= 1


def test_gaussian_map_needs_positive_spread():
    with pytest.raises(ParameterError):
        motion_map((8, 8), (4.0, 4.0), "gaussian", 0.0)
