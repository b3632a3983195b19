"""Dataset I/O and OTB/VOT-style evaluation.

Sequences follow the OTB layout: ``<seq>/img/0001.jpg`` (or ``.png``) and
``<seq>/groundtruth_rect.txt`` holding one 1-based ``x,y,w,h`` per line. An
optional ``<seq>/attributes.txt`` lists comma-separated attribute tags.
Everything in memory is 0-based.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Protocol

import cv2
import numpy as np
from numpy.typing import NDArray

from _hitrack.errors import InputError, SequenceError
from _hitrack.tracker import Box

logger = logging.getLogger(__name__)

IMAGE_DIR = "img"
TRUTH_FILE = "groundtruth_rect.txt"
ATTRIBUTES_FILE = "attributes.txt"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0, 1, 21)
VOT_SKIP = 5
VOT_BURN_IN = 10


@dataclass(frozen=True)
class Sequence:
    """Frames (paths or in-memory images) with one ground-truth box each.

    Attributes:
        name: Sequence identifier.
        frames: Image paths or arrays, in playback order.
        truth: ``(N, 4)`` 0-based ``x, y, w, h`` boxes.
        attributes: Tags such as ``occlusion`` or ``scale-variation``.
    """

    name: str
    frames: tuple[Path | NDArray, ...]
    truth: NDArray[np.float64]
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.truth.ndim != 2 or self.truth.shape[1] != 4:
            raise SequenceError(f"{self.name}: truth must be (N, 4)")
        if len(self.frames) != len(self.truth):
            raise SequenceError(
                f"{self.name}: {len(self.frames)} frames but {len(self.truth)} boxes"
            )
        if not np.all(np.isfinite(self.truth)):
            raise SequenceError(f"{self.name}: non-finite ground truth")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> NDArray:
        """Loads (or returns) one frame.

        Raises:
            SequenceError: If an image file cannot be decoded.
        """
        item = self.frames[index]
        if isinstance(item, np.ndarray):
            return item
        image = cv2.imread(str(item), cv2.IMREAD_COLOR)
        if image is None:
            raise SequenceError(f"{self.name}: cannot read {item}")
        return image

    def iter_frames(self) -> Iterator[NDArray]:
        """Frames in order, loaded lazily."""
        for index in range(len(self)):
            yield self.frame(index)

    def box(self, index: int) -> Box:
        """Ground truth of one frame as a tuple."""
        x, y, w, h = (float(v) for v in self.truth[index])
        return x, y, w, h


def _frame_key(path: Path) -> tuple[float, str]:
    match = re.search(r"\d+", path.stem)
    return (int(match.group()) if match else math.inf, path.name)


def parse_truth(text: str) -> NDArray[np.float64]:
    """Parses 1-based ``x,y,w,h`` lines into 0-based boxes.

    Separators may be commas, tabs or spaces; blank lines are skipped.

    Raises:
        SequenceError: On an unparsable line, with its 1-based number.
    """
    boxes = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = [f for f in re.split(r"[,\t ]+", line.strip()) if f]
        try:
            values = [float(f) for f in fields]
        except ValueError as e:
            raise SequenceError(f"cannot parse {line!r}", number) from e
        if len(values) != 4 or not all(math.isfinite(v) for v in values):
            raise SequenceError(f"expected four numbers, got {line!r}", number)
        x, y, w, h = values
        boxes.append((x - 1.0, y - 1.0, w, h))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def load_sequence(directory: Path | str) -> Sequence:
    """Reads an OTB-style sequence directory.

    Raises:
        SequenceError: On missing files, a malformed truth file or a
            frame/box count mismatch.
    """
    root = Path(directory)
    image_dir, truth_file = root / IMAGE_DIR, root / TRUTH_FILE
    if not image_dir.is_dir():
        raise SequenceError(f"{root}: missing {IMAGE_DIR}/ directory")
    if not truth_file.is_file():
        raise SequenceError(f"{root}: missing {TRUTH_FILE}")
    frames = sorted(
        (p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
        key=_frame_key,
    )
    if not frames:
        raise SequenceError(f"{root}: no images in {IMAGE_DIR}/")
    truth = parse_truth(truth_file.read_text(encoding="utf-8"))
    attributes: tuple[str, ...] = ()
    if (root / ATTRIBUTES_FILE).is_file():
        text = (root / ATTRIBUTES_FILE).read_text(encoding="utf-8")
        attributes = tuple(t.strip() for t in text.split(",") if t.strip())
    logger.debug("loaded %s: %d frames", root.name, len(frames))
    return Sequence(root.name, tuple(frames), truth, attributes)


def _to_uint8(image: NDArray) -> NDArray[np.uint8]:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_sequence(sequence: Sequence, directory: Path | str) -> Path:
    """Materializes a sequence in the OTB layout (PNG frames, 1-based truth).

    Returns:
        The sequence directory.
    """
    root = Path(directory)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for index in range(len(sequence)):
        path = root / IMAGE_DIR / f"{index + 1:04d}.png"
        if not cv2.imwrite(str(path), _to_uint8(sequence.frame(index))):
            raise SequenceError(f"cannot write {path}")
    one_based = sequence.truth + np.array([1.0, 1.0, 0.0, 0.0])
    np.savetxt(root / TRUTH_FILE, one_based, fmt="%.4f", delimiter=",")
    if sequence.attributes:
        (root / ATTRIBUTES_FILE).write_text(",".join(sequence.attributes) + "\n")
    return root


def write_trajectory(path: Path | str, boxes: list[Box] | NDArray) -> None:
    """Writes one 0-based ``x,y,w,h`` line per frame, four decimals."""
    np.savetxt(
        path, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), fmt="%.4f",
        delimiter=",",
    )


def read_trajectory(path: Path | str) -> NDArray[np.float64]:
    """Reads a trajectory written by `write_trajectory`.

    Raises:
        InputError: If the file is missing or malformed.
    """
    try:
        boxes = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read trajectory {path}: {e}") from e
    if boxes.shape[1] != 4:
        raise InputError(f"{path}: expected four columns, got {boxes.shape[1]}")
    return boxes


def overlaps(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    """Row-wise intersection over union of two ``(N, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0]), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1]), 0.0)
    inter = iw * ih
    area_a = (ax2 - a[:, 0]) * (ay2 - a[:, 1])
    area_b = (bx2 - b[:, 0]) * (by2 - b[:, 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; identical boxes give exactly 1."""
    return float(overlaps(np.asarray(a), np.asarray(b))[0])


def center_errors(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    """Row-wise distance between box centers."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca = a[:, :2] + a[:, 2:] / 2.0
    cb = b[:, :2] + b[:, 2:] / 2.0
    return np.hypot(*(ca - cb).T)


@dataclass(frozen=True)
class MetricReport:
    """OTB curves and summary values of one sequence (or an aggregate).

    Attributes:
        name: Sequence name, or ``"overall"``.
        precision: Fraction of frames with center error <= t, t = 0..50 px.
        success: Fraction of frames with IoU >= s, s = 0, 0.05, ..., 1.
        auc: Mean of the success curve.
        op: Success at IoU 0.5.
        accuracy: Mean IoU (OTB) or VOT accuracy.
        robustness: VOT failure count, when evaluated.
        attributes: Attribute tags of the sequence.
        per_attribute: Summary values per attribute tag.
    """

    name: str
    precision: NDArray[np.float64]
    success: NDArray[np.float64]
    auc: float
    op: float
    accuracy: float
    robustness: int | None = None
    attributes: tuple[str, ...] = ()
    per_attribute: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def precision_at_20(self) -> float:
        """Distance precision at 20 pixels."""
        return float(self.precision[20])

    def to_dict(self) -> dict[str, Any]:
        """A JSON-ready rendering."""
        return {
            "name": self.name,
            "precision_at_20": self.precision_at_20,
            "auc": self.auc,
            "op": self.op,
            "accuracy": self.accuracy,
            "robustness": self.robustness,
            "attributes": list(self.attributes),
            "precision": self.precision.tolist(),
            "success": self.success.tolist(),
            "per_attribute": self.per_attribute,
        }


def otb_metrics(
    trajectory: NDArray | list[Box],
    truth: NDArray,
    name: str = "",
    attributes: tuple[str, ...] = (),
) -> MetricReport:
    """Precision and success curves of a trajectory against ground truth.

    Raises:
        InputError: If the lengths differ or are zero.
    """
    boxes = np.asarray(trajectory, dtype=np.float64).reshape(-1, 4)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 4)
    if len(boxes) != len(truth) or len(boxes) == 0:
        raise InputError(f"{len(boxes)} boxes for {len(truth)} ground-truth frames")
    ious = overlaps(boxes, truth)
    errors = center_errors(boxes, truth)
    precision = np.mean(errors[:, None] <= PRECISION_THRESHOLDS[None, :], axis=0)
    success = np.mean(ious[:, None] >= SUCCESS_THRESHOLDS[None, :], axis=0)
    return MetricReport(
        name=name,
        precision=precision,
        success=success,
        auc=float(np.mean(success)),
        op=float(np.mean(ious >= 0.5)),
        accuracy=float(np.mean(ious)),
        attributes=attributes,
    )


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Averages curves over sequences and breaks them down per attribute.

    Raises:
        InputError: If there are no reports.
    """
    if not reports:
        raise InputError("nothing to aggregate")

    def summary(group: list[MetricReport]) -> dict[str, float]:
        return {
            "sequences": float(len(group)),
            "precision_at_20": float(np.mean([r.precision_at_20 for r in group])),
            "auc": float(np.mean([r.auc for r in group])),
            "op": float(np.mean([r.op for r in group])),
        }

    tags = sorted({tag for r in reports for tag in r.attributes})
    per_attribute = {
        tag: summary([r for r in reports if tag in r.attributes]) for tag in tags
    }
    success = np.mean([r.success for r in reports], axis=0)
    robustness = [r.robustness for r in reports if r.robustness is not None]
    return MetricReport(
        name="overall",
        precision=np.mean([r.precision for r in reports], axis=0),
        success=success,
        auc=float(np.mean(success)),
        op=float(np.mean([r.op for r in reports])),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        robustness=sum(robustness) if robustness else None,
        per_attribute=per_attribute,
    )


class EvaluatedTracker(Protocol):
    """What `vot_evaluate` needs from a tracker."""

    def init(self, frame: NDArray, box: Box, frame_index: int = 0) -> None: ...

    def update(self, frame: NDArray) -> Box: ...


@dataclass(frozen=True)
class VotResult:
    """Outcome of the restart protocol on one sequence.

    Attributes:
        accuracy: Mean IoU over frames outside the burn-in windows.
        robustness: Number of failures.
        failures: Frames at which the tracker failed.
        reinits: Frames at which it was reinitialized.
    """

    accuracy: float
    robustness: int
    failures: tuple[int, ...]
    reinits: tuple[int, ...]


def _start(factory: Callable[[], EvaluatedTracker], sequence: Sequence, index: int):
    tracker = factory()
    tracker.init(sequence.frame(index), sequence.box(index), frame_index=index)
    return tracker


def _close(tracker: EvaluatedTracker) -> None:
    close = getattr(tracker, "close", None)
    if callable(close):
        close()


def vot_evaluate(
    tracker_factory: Callable[[], EvaluatedTracker],
    sequence: Sequence,
    skip: int = VOT_SKIP,
    burn_in: int = VOT_BURN_IN,
) -> VotResult:
    """Runs the supervised restart protocol.

    A frame with zero overlap is a failure: the next ``skip`` frames are
    skipped and a fresh tracker starts from the ground truth after them. The
    ``burn_in`` frames after every initialization, including the first, are
    left out of the accuracy.

    Args:
        tracker_factory: Builds a fresh tracker for every (re)initialization.
        sequence: The sequence to evaluate on.
        skip: Frames skipped after a failure.
        burn_in: Frames excluded from accuracy after an initialization.
    """
    failures: list[int] = []
    reinits: list[int] = []
    valid: list[float] = []
    start = 0
    tracker = _start(tracker_factory, sequence, start)
    index = 1
    while index < len(sequence):
        overlap = iou(tracker.update(sequence.frame(index)), sequence.box(index))
        if overlap <= 0:
            failures.append(index)
            _close(tracker)
            start = index + skip + 1
            logger.info("%s: failure at frame %d", sequence.name, index)
            if start >= len(sequence):
                tracker = None
                break
            reinits.append(start)
            tracker = _start(tracker_factory, sequence, start)
            index = start + 1
            continue
        if index > start + burn_in:
            valid.append(overlap)
        index += 1
    if tracker is not None:
        _close(tracker)
    accuracy = float(np.mean(valid)) if valid else 0.0
    return VotResult(accuracy, len(failures), tuple(failures), tuple(reinits))


__all__ = [
    "Sequence",
    "MetricReport",
    "VotResult",
    "EvaluatedTracker",
    "PRECISION_THRESHOLDS",
    "SUCCESS_THRESHOLDS",
    "parse_truth",
    "load_sequence",
    "write_sequence",
    "write_trajectory",
    "read_trajectory",
    "overlaps",
    "iou",
    "center_errors",
    "otb_metrics",
    "aggregate",
    "vot_evaluate",
]
