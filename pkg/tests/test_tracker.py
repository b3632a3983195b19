from dataclasses import replace

import numpy as np
import pytest
from hitrack.bench import SCENARIO_NAMES, overlaps, scenario_preset, synth_sequence
from hitrack.config import TrackerConfig
from hitrack.errors import InputError, StateError
from hitrack.motion import km_predict
from hitrack.tracker import Tracker, patch_size_for, prepare_frame, run_sequence, step
from numpy.testing import assert_allclose, assert_array_equal
from parametrization import Parametrization as P


@pytest.fixture(scope="module")
def static_sequence():
    return synth_sequence(scenario_preset("static", seed=1))


def track(sequence, config=None, frames=None, workers=1):
    frames = list(sequence.iter_frames())[:frames]
    return np.array(run_sequence(frames, sequence.box(0), config, workers=workers))


def test_uint8_bgr_frames_are_converted_to_gray():
    frame = np.full((4, 5, 3), 255, dtype=np.uint8)
    image = prepare_frame(frame)
    assert image.shape == (4, 5)
    assert image.dtype == np.float64
    assert_allclose(image, 1.0, atol=1e-6)


def test_float_frames_keep_their_values():
    frame = np.linspace(0, 1, 12).reshape(3, 4)
    assert_allclose(prepare_frame(frame), frame, atol=1e-7)


@P.autodetect_parameters()
@P.case(name="empty", frame=np.zeros((0, 5)))
@P.case(name="vector", frame=np.zeros(5))
def test_bad_frames_are_rejected(frame):
    with pytest.raises(InputError):
        prepare_frame(frame)


@P.autodetect_parameters()
@P.case(name="small", extent=64.0, expected=224)
@P.case(name="inside", extent=245.0, expected=240)
@P.case(name="large", extent=1000.0, expected=240)
def test_patch_size_is_clamped_to_a_multiple_of_the_cells(extent, expected):
    assert patch_size_for(extent, TrackerConfig()) == expected


@P.autodetect_parameters()
@P.case(name="tiny", box=(100.0, 100.0, 2.0, 2.0))
@P.case(name="outside", box=(500.0, 500.0, 20.0, 20.0))
@P.case(name="not_finite", box=(float("nan"), 10.0, 20.0, 20.0))
@P.case(name="three_values", box=(10.0, 10.0, 20.0))
def test_init_rejects_bad_boxes(box, static_sequence):
    with Tracker() as tracker:
        with pytest.raises(InputError):
            tracker.init(static_sequence.frame(0), box)


def test_update_needs_init(static_sequence):
    with Tracker() as tracker:
        with pytest.raises(StateError):
            tracker.update(static_sequence.frame(0))


def test_tracker_needs_a_worker():
    with pytest.raises(InputError):
        Tracker(workers=0)


def test_empty_sequence_cannot_be_tracked():
    with pytest.raises(InputError):
        run_sequence([], (0.0, 0.0, 10.0, 10.0))


def test_static_target_is_held(static_sequence):
    trajectory = track(static_sequence, frames=11)
    assert len(trajectory) == 11
    assert_array_equal(trajectory[0], static_sequence.box(0))
    assert overlaps(trajectory, static_sequence.truth[:11]).min() >= 0.8


def test_static_target_is_held_without_motion(static_sequence):
    config = TrackerConfig(use_motion=False)
    trajectory = track(static_sequence, config, frames=8)
    assert overlaps(trajectory, static_sequence.truth[:8]).min() >= 0.8


def test_trajectory_does_not_depend_on_worker_count(static_sequence):
    serial = track(static_sequence, frames=7, workers=1)
    pooled = track(static_sequence, frames=7, workers=3)
    assert_array_equal(serial, pooled)


def test_diagnostics_describe_the_frame(static_sequence):
    with Tracker() as tracker:
        tracker.init(static_sequence.frame(0), static_sequence.box(0))
        assert tracker.diagnostics is None
        for index in range(1, 7):
            tracker.update(static_sequence.frame(index))
            diagnostics = tracker.diagnostics
            assert diagnostics.frame_index == index
            assert len(diagnostics.peaks) == 3
            assert abs(diagnostics.weights.m.sum() - 1) < 1e-9
            assert (diagnostics.cg is not None) == (index == 6)
            assert not diagnostics.lost


def test_constant_velocity_target_is_followed():
    sequence = synth_sequence(scenario_preset("constant_velocity", seed=2))
    trajectory = track(sequence)
    assert overlaps(trajectory, sequence.truth).mean() >= 0.7


def test_energies_refresh_after_each_model_update(static_sequence):
    config = TrackerConfig(energy_every_frame=False)
    with Tracker(config) as tracker:
        tracker.init(static_sequence.frame(0), static_sequence.box(0))
        energies = []
        for index in range(1, 8):
            tracker.update(static_sequence.frame(index))
            energies.append(tracker.diagnostics.energies)
    assert all(e == energies[0] for e in energies[:6])
    assert energies[6] != energies[5]


@P.autodetect_parameters()
@P.case(name="gated", gate=0.4, confident=False)
@P.case(name="ungated", gate=0.0, confident=True)
def test_an_untrusted_frame_keeps_the_prediction(gate, confident, static_sequence):
    config = TrackerConfig(confidence_gate=gate)
    with Tracker(config) as tracker:
        tracker.init(static_sequence.frame(0), static_sequence.box(0))
        tracker.update(static_sequence.frame(1))
        state = replace(tracker.state, psr_reference=1e12)
        new_state, _, diagnostics = step(state, static_sequence.frame(2))
    assert diagnostics.confident == confident
    assert (diagnostics.scale is not None) == confident
    assert (len(new_state.memory) > len(state.memory)) == confident
    predicted = km_predict(state.kalman, config.kalman)
    assert np.array_equal(new_state.kalman.x_hat, predicted.x_hat) != confident
    assert (new_state.psr_reference == 1e12) != confident


def test_boxes_stay_inside_the_frame(static_sequence):
    height, width = static_sequence.frame(0).shape[:2]
    with Tracker() as tracker:
        tracker.init(static_sequence.frame(0), (290.0, 200.0, 40.0, 36.0))
        for index in range(1, 6):
            x, y, w, h = tracker.update(static_sequence.frame(index))
            if tracker.diagnostics.lost:
                continue
            assert 0 <= x and x + w <= width
            assert 0 <= y and y + h <= height


@P.autodetect_parameters()
@P.case(name="static", scenario="static")
@P.case(name="constant_velocity", scenario="constant_velocity")
@P.case(name="scale_drift", scenario="scale_drift")
@P.case(name="occlusion", scenario="occlusion")
@P.case(name="illumination", scenario="illumination")
def test_every_scenario_runs_to_the_end(scenario):
    sequence = synth_sequence(scenario_preset(scenario, seed=0))
    trajectory = track(sequence)
    assert trajectory.shape == (len(sequence), 4)
    assert np.all(np.isfinite(trajectory))
    assert overlaps(trajectory, sequence.truth).mean() > 0.3


def test_scenario_cases_cover_every_preset():
    assert set(SCENARIO_NAMES) == {
        "static",
        "constant_velocity",
        "scale_drift",
        "occlusion",
        "illumination",
    }


def test_growing_target_is_followed_in_scale():
    sequence = synth_sequence(scenario_preset("scale_drift", seed=3))
    trajectory = track(sequence)
    assert overlaps(trajectory, sequence.truth).mean() >= 0.6
    ratio = trajectory[-1, 2:] / sequence.truth[-1, 2:]
    assert np.all((ratio >= 1 / 1.03) & (ratio <= 1.03))


@P.autodetect_parameters()
@P.case(name="with_motion", use_motion=True, recovered=True)
@P.case(name="without_motion", use_motion=False, recovered=False)
def test_occlusion_recovery_needs_the_motion_model(use_motion, recovered):
    sequence = synth_sequence(scenario_preset("occlusion", seed=4))
    trajectory = track(sequence, TrackerConfig(use_motion=use_motion))
    assert overlaps(trajectory[:40], sequence.truth[:40]).mean() >= 0.5
    after = overlaps(trajectory[50:55], sequence.truth[50:55]).max()
    assert (after >= 0.5) == recovered
