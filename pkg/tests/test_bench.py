import cv2
import numpy as np
import pytest
from hitrack.bench import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    Scenario,
    Sequence,
    aggregate,
    center_errors,
    iou,
    load_sequence,
    otb_metrics,
    parse_truth,
    read_trajectory,
    synth_sequence,
    vot_evaluate,
    write_sequence,
    write_trajectory,
)
from hitrack.errors import InputError, SequenceError
from numpy.testing import assert_allclose, assert_array_equal
from parametrization import Parametrization as P


class ScriptedTracker:
    """Reports the ground truth, except on the frames listed in ``fail_at``."""

    def __init__(self, sequence, fail_at=(), frozen=False):
        self.sequence = sequence
        self.fail_at = fail_at
        self.frozen = frozen
        self.closed = False

    def init(self, frame, box, frame_index=0):
        self.index = frame_index
        self.box = box

    def update(self, frame):
        self.index += 1
        if self.frozen:
            return self.box
        if self.index in self.fail_at:
            return (-100.0, -100.0, 5.0, 5.0)
        return self.sequence.box(self.index)

    def close(self):
        self.closed = True


def in_memory(frames: int, velocity=(0.0, 0.0)) -> Sequence:
    t = np.arange(frames)[:, None]
    truth = np.array([[10.0, 10.0, 20.0, 20.0]]) + t * np.array([[*velocity, 0, 0]])
    return Sequence("scripted", tuple(np.zeros((4, 4)) for _ in range(frames)), truth)


@pytest.fixture
def sequence_dir(tmp_path):
    root = tmp_path / "walk"
    (root / "img").mkdir(parents=True)
    for name in ("1.png", "2.png", "10.png"):
        cv2.imwrite(str(root / "img" / name), np.full((8, 8, 3), 128, np.uint8))
    (root / "groundtruth_rect.txt").write_text("10,20,30,40\n11\t20\t30\t40\n\n12 20 30 40\n")
    (root / "attributes.txt").write_text("occlusion, scale-variation\n")
    return root


def test_load_sequence_reads_the_otb_layout(sequence_dir):
    sequence = load_sequence(sequence_dir)
    assert sequence.name == "walk"
    assert len(sequence) == 3
    assert [p.name for p in sequence.frames] == ["1.png", "2.png", "10.png"]
    assert sequence.box(0) == (9.0, 19.0, 30.0, 40.0)
    assert sequence.box(2) == (11.0, 19.0, 30.0, 40.0)
    assert sequence.attributes == ("occlusion", "scale-variation")
    assert sequence.frame(1).shape == (8, 8, 3)


def test_frame_and_box_counts_must_agree(sequence_dir):
    (sequence_dir / "groundtruth_rect.txt").write_text("10,20,30,40\n11,20,30,40\n")
    with pytest.raises(SequenceError):
        load_sequence(sequence_dir)


@P.autodetect_parameters()
@P.case(name="no_images", missing="img")
@P.case(name="no_truth", missing="groundtruth_rect.txt")
def test_missing_parts_are_reported(missing, sequence_dir):
    target = sequence_dir / missing
    if target.is_dir():
        for path in target.iterdir():
            path.unlink()
        target.rmdir()
    else:
        target.unlink()
    with pytest.raises(SequenceError):
        load_sequence(sequence_dir)


@P.autodetect_parameters()
@P.case(name="word", text="1,2,3,4\n1,2,x,4\n", line=2)
@P.case(name="short", text="1,2,3\n", line=1)
@P.case(name="infinite", text="\n1,2,3,4\n1,2,inf,4\n", line=3)
def test_unparsable_truth_names_the_line(text, line):
    with pytest.raises(SequenceError) as error:
        parse_truth(text)
    assert error.value.line == line


def test_unreadable_frames_are_reported(tmp_path):
    sequence = Sequence("broken", (tmp_path / "missing.png",), np.ones((1, 4)))
    with pytest.raises(SequenceError):
        sequence.frame(0)


def test_written_sequences_load_back(tmp_path):
    sequence = synth_sequence(Scenario(frames=3, attributes=("occlusion",)))
    loaded = load_sequence(write_sequence(sequence, tmp_path / "synthetic"))
    assert len(loaded) == 3
    assert loaded.attributes == ("occlusion",)
    assert_allclose(loaded.truth, sequence.truth, atol=1e-4)
    gray = cv2.cvtColor(loaded.frame(0), cv2.COLOR_BGR2GRAY) / 255.0
    assert_allclose(gray, sequence.frame(0), atol=1 / 255)


def test_trajectories_round_trip_to_four_decimals(tmp_path):
    boxes = [(1.23456, 2.0, 3.0, 4.0), (5.0, 6.0, 7.0, 8.98765)]
    write_trajectory(tmp_path / "t.txt", boxes)
    assert (tmp_path / "t.txt").read_text().splitlines()[0] == "1.2346,2.0000,3.0000,4.0000"
    assert_allclose(read_trajectory(tmp_path / "t.txt"), boxes, atol=5e-5)


@P.autodetect_parameters()
@P.case(name="missing", content=None)
@P.case(name="three_columns", content="1,2,3\n4,5,6\n")
@P.case(name="text", content="a,b,c,d\n")
def test_bad_trajectories_are_rejected(content, tmp_path):
    path = tmp_path / "t.txt"
    if content is not None:
        path.write_text(content)
    with pytest.raises(InputError):
        read_trajectory(path)


@P.autodetect_parameters()
@P.case(name="identical", a=(0, 0, 2, 2), b=(0, 0, 2, 2), expected=1.0)
@P.case(name="disjoint", a=(0, 0, 2, 2), b=(5, 5, 2, 2), expected=0.0)
@P.case(name="touching", a=(0, 0, 2, 2), b=(2, 0, 2, 2), expected=0.0)
@P.case(name="half_shift", a=(0, 0, 2, 2), b=(1, 0, 2, 2), expected=1 / 3)
@P.case(name="contained", a=(0, 0, 4, 4), b=(1, 1, 2, 2), expected=0.25)
@P.case(name="empty", a=(0, 0, 0, 0), b=(0, 0, 0, 0), expected=0.0)
def test_iou(a, b, expected):
    assert iou(a, b) == pytest.approx(expected)
    assert iou(b, a) == pytest.approx(expected)


def test_center_errors():
    errors = center_errors([(0, 0, 2, 2), (0, 0, 4, 4)], [(3, 4, 2, 2), (0, 0, 4, 4)])
    assert_allclose(errors, [5.0, 0.0])


def test_perfect_trajectory_scores_one():
    truth = in_memory(5, (2.0, 1.0)).truth
    report = otb_metrics(truth, truth)
    assert report.precision_at_20 == 1.0
    assert report.auc == 1.0
    assert report.op == 1.0
    assert report.accuracy == 1.0


def test_lost_trajectory_scores_zero():
    truth = in_memory(4).truth
    report = otb_metrics(truth + [200.0, 200.0, 0, 0], truth)
    assert report.precision_at_20 == 0.0
    assert report.op == 0.0
    assert report.precision[-1] == 0.0


def test_half_right_trajectory():
    truth = np.array([[0.0, 0.0, 10.0, 10.0]] * 2)
    trajectory = np.array([[0.0, 0.0, 10.0, 10.0], [100.0, 100.0, 10.0, 10.0]])
    report = otb_metrics(trajectory, truth, "pair", ("occlusion",))
    assert report.precision_at_20 == 0.5
    assert report.op == 0.5
    assert report.name == "pair"
    assert report.to_dict()["attributes"] == ["occlusion"]


def test_curves_are_monotone():
    rng = np.random.default_rng(0)
    truth = in_memory(40).truth
    trajectory = truth + rng.normal(0, 8, truth.shape) * [1, 1, 0.2, 0.2]
    report = otb_metrics(trajectory, truth)
    assert len(report.precision) == len(PRECISION_THRESHOLDS) == 51
    assert len(report.success) == len(SUCCESS_THRESHOLDS) == 21
    assert np.all(np.diff(report.precision) >= 0)
    assert np.all(np.diff(report.success) <= 0)
    assert report.auc == np.mean(report.success)
    assert 0 <= report.auc <= 1


def test_metrics_need_matching_lengths():
    with pytest.raises(InputError):
        otb_metrics(np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(InputError):
        otb_metrics(np.zeros((0, 4)), np.zeros((0, 4)))


def test_aggregate_averages_and_groups_by_attribute():
    truth = np.array([[0.0, 0.0, 10.0, 10.0]] * 2)
    good = otb_metrics(truth, truth, "good", ("occlusion",))
    half = otb_metrics(truth + [[0, 0, 0, 0], [100, 100, 0, 0]], truth, "half", ("occlusion", "blur"))
    overall = aggregate([good, half])
    assert overall.name == "overall"
    assert overall.precision_at_20 == pytest.approx(0.75)
    assert overall.auc == pytest.approx(np.mean(overall.success))
    assert overall.per_attribute["occlusion"]["sequences"] == 2
    assert overall.per_attribute["blur"]["precision_at_20"] == pytest.approx(0.5)
    with pytest.raises(InputError):
        aggregate([])


def test_vot_perfect_tracker():
    sequence = in_memory(30, (1.0, 0.0))
    result = vot_evaluate(lambda: ScriptedTracker(sequence), sequence)
    assert result.robustness == 0
    assert result.accuracy == 1.0
    assert result.failures == result.reinits == ()


def test_vot_restarts_after_a_failure():
    sequence = in_memory(100)
    trackers = []

    def factory():
        trackers.append(ScriptedTracker(sequence, fail_at=(30,)))
        return trackers[-1]

    result = vot_evaluate(factory, sequence)
    assert result.robustness == 1
    assert result.failures == (30,)
    assert result.reinits == (36,)
    assert result.accuracy == 1.0
    assert len(trackers) == 2
    assert all(tracker.closed for tracker in trackers)


def test_vot_counts_a_frozen_tracker_as_failing():
    sequence = in_memory(60, (3.0, 0.0))
    result = vot_evaluate(lambda: ScriptedTracker(sequence, frozen=True), sequence)
    assert result.robustness >= 1
    assert result.failures[0] == 7
    assert result.reinits[0] == 13


def test_vot_accuracy_skips_the_burn_in():
    sequence = in_memory(15)
    result = vot_evaluate(lambda: ScriptedTracker(sequence, fail_at=(12,)), sequence)
    assert result.failures == (12,)
    assert result.reinits == ()
    assert result.accuracy == 1.0


def test_vot_is_deterministic():
    sequence = in_memory(80, (3.0, 0.0))
    runs = [
        vot_evaluate(lambda: ScriptedTracker(sequence, frozen=True), sequence)
        for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_sequence_validates_its_truth():
    with pytest.raises(SequenceError):
        Sequence("bad", (np.zeros((2, 2)),), np.array([[0.0, 0.0, np.nan, 1.0]]))
    with pytest.raises(SequenceError):
        Sequence("bad", (np.zeros((2, 2)),) * 2, np.zeros((1, 4)))
    assert_array_equal(in_memory(2).truth[:, 2:], 20.0)
