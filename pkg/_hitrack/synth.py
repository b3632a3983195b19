"""Seeded synthetic sequences with exact ground truth.

A textured square moves over a textured background under a motion script
(constant velocity, geometric scale rate), an optional occlusion script that
paints an opaque block over the target's path, and an illumination script
that ramps the target's gain. Frames are grayscale floats in ``[0, 1]``.
"""

import logging
from dataclasses import dataclass, replace

import cv2
import numpy as np
from numpy.typing import NDArray

from _hitrack.bench import Sequence
from _hitrack.errors import ScenarioError

logger = logging.getLogger(__name__)

TEXTURE_SIZE = 64
OCCLUDER_LEVEL = 0.3
SCENARIO_NAMES = (
    "static",
    "constant_velocity",
    "scale_drift",
    "occlusion",
    "illumination",
)


@dataclass(frozen=True)
class Scenario:
    """Script of one synthetic sequence.

    Attributes:
        name: Sequence name.
        frame_size: ``(width, height)`` in pixels.
        frames: Number of frames.
        target_size: Initial ``(w, h)`` of the target.
        start: Initial top-left corner of the target.
        velocity: Center displacement per frame.
        scale_rate: Size ratio between consecutive frames, about the center.
        occlusion_start: First occluded frame, or None.
        occlusion_duration: Number of occluded frames.
        occlusion_coverage: Fraction of the target's height the block hides,
            from the top.
        gain_ramp: Change of the target's brightness gain per frame.
        noise: Standard deviation of additive Gaussian noise.
        seed: Seed of the textures and the noise.
        attributes: Attribute tags attached to the sequence.
    """

    name: str = "static"
    frame_size: tuple[int, int] = (320, 240)
    frames: int = 30
    target_size: tuple[float, float] = (32.0, 32.0)
    start: tuple[float, float] = (144.0, 104.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    scale_rate: float = 1.0
    occlusion_start: int | None = None
    occlusion_duration: int = 0
    occlusion_coverage: float = 1.0
    gain_ramp: float = 0.0
    noise: float = 0.0
    seed: int = 0
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        width, height = self.frame_size
        if width < 1 or height < 1:
            raise ScenarioError(f"frame size must be positive, got {self.frame_size}")
        if self.frames < 1:
            raise ScenarioError("a scenario needs at least one frame")
        if not (self.target_size[0] > 0 and self.target_size[1] > 0):
            raise ScenarioError(f"target size must be positive, got {self.target_size}")
        if not self.scale_rate > 0:
            raise ScenarioError("scale_rate must be positive")
        if self.occlusion_duration < 0 or not 0 <= self.occlusion_coverage <= 1:
            raise ScenarioError("occlusion needs duration >= 0 and coverage in [0, 1]")
        if self.noise < 0:
            raise ScenarioError("noise must be >= 0")

    def truth(self) -> NDArray[np.float64]:
        """Exact ``(frames, 4)`` boxes under the motion script.

        Raises:
            ScenarioError: If a box leaves the frame.
        """
        t = np.arange(self.frames, dtype=np.float64)
        w0, h0 = self.target_size
        cx = self.start[0] + w0 / 2.0 + self.velocity[0] * t
        cy = self.start[1] + h0 / 2.0 + self.velocity[1] * t
        growth = self.scale_rate**t
        w, h = w0 * growth, h0 * growth
        boxes = np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)
        width, height = self.frame_size
        outside = (
            (boxes[:, 0] < 0)
            | (boxes[:, 1] < 0)
            | (boxes[:, 0] + boxes[:, 2] > width)
            | (boxes[:, 1] + boxes[:, 3] > height)
        )
        if np.any(outside):
            frame = int(np.argmax(outside))
            raise ScenarioError(
                f"{self.name}: target leaves the frame at frame {frame}"
            )
        return boxes

    def occluded(self, index: int) -> bool:
        """Whether the occlusion script covers frame ``index``."""
        if self.occlusion_start is None:
            return False
        end = self.occlusion_start + self.occlusion_duration
        return self.occlusion_start <= index < end


def _texture(
    rng: np.random.Generator, shape: tuple[int, int], sigma: float, contrast: float
) -> NDArray[np.float32]:
    noise = rng.standard_normal(shape).astype(np.float32)
    blurred = cv2.GaussianBlur(noise, (0, 0), sigma, borderType=cv2.BORDER_REFLECT)
    blurred = (blurred - blurred.mean()) / (blurred.std() + 1e-12)
    return np.clip(0.5 + contrast * blurred, 0.0, 1.0).astype(np.float32)


def _inside(
    xs: NDArray, ys: NDArray, box: tuple[float, float, float, float]
) -> NDArray[np.bool_]:
    x, y, w, h = box
    return (xs + 0.5 >= x) & (xs + 0.5 < x + w) & (ys + 0.5 >= y) & (ys + 0.5 < y + h)


def _occluder(scenario: Scenario, truth: NDArray) -> tuple[float, float, float, float]:
    rows = [i for i in range(len(truth)) if scenario.occluded(i)]
    boxes = truth[rows]
    x0, y0 = boxes[:, 0].min(), boxes[:, 1].min()
    x1 = (boxes[:, 0] + boxes[:, 2]).max()
    y1 = (boxes[:, 1] + boxes[:, 3]).max()
    return x0, y0, x1 - x0, (y1 - y0) * scenario.occlusion_coverage


def synth_sequence(scenario: Scenario) -> Sequence:
    """Renders a scenario.

    Target pixels are those whose centers fall inside the truth box; they
    sample the target texture bilinearly so it stretches with the box.
    Rendering the same scenario twice gives identical frames.

    Raises:
        ScenarioError: If the target leaves the frame under the script.
    """
    truth = scenario.truth()
    width, height = scenario.frame_size
    rng = np.random.default_rng(scenario.seed)
    background = _texture(rng, (height, width), 4.0, 0.08).astype(np.float64)
    texture = _texture(rng, (TEXTURE_SIZE, TEXTURE_SIZE), 2.0, 0.2)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)
    occluder = None
    if any(scenario.occluded(i) for i in range(scenario.frames)):
        occluder = _occluder(scenario, truth)

    frames = []
    for index, box in enumerate(truth):
        x, y, w, h = (float(v) for v in box)
        map_x = ((xs + 0.5 - x) / w * TEXTURE_SIZE - 0.5).astype(np.float32)
        map_y = ((ys + 0.5 - y) / h * TEXTURE_SIZE - 0.5).astype(np.float32)
        target = cv2.remap(
            texture, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
        ).astype(np.float64)
        gain = 1.0 + scenario.gain_ramp * index
        frame = np.where(_inside(xs, ys, (x, y, w, h)), gain * target, background)
        if occluder is not None and scenario.occluded(index):
            frame = np.where(_inside(xs, ys, occluder), OCCLUDER_LEVEL, frame)
        if scenario.noise > 0:
            frame = frame + rng.normal(0.0, scenario.noise, frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
    logger.debug("rendered %s: %d frames", scenario.name, len(frames))
    return Sequence(scenario.name, tuple(frames), truth, scenario.attributes)


def scenario_preset(name: str, seed: int = 0) -> Scenario:
    """One of the named scenarios.

    Args:
        name: One of `SCENARIO_NAMES`.
        seed: Texture and noise seed.

    Raises:
        ScenarioError: If the name is unknown.
    """
    match name:
        case "static":
            scenario = Scenario(noise=0.02)
        case "constant_velocity":
            scenario = Scenario(
                frame_size=(400, 240),
                frames=100,
                start=(40.0, 104.0),
                velocity=(3.0, 0.0),
                noise=0.05,
                attributes=("fast-motion",),
            )
        case "scale_drift":
            scenario = Scenario(
                frame_size=(480, 360),
                frames=40,
                start=(224.0, 164.0),
                scale_rate=1.03,
                noise=0.02,
                attributes=("scale-variation",),
            )
        case "occlusion":
            scenario = Scenario(
                frame_size=(420, 200),
                frames=60,
                start=(40.0, 84.0),
                velocity=(5.0, 0.0),
                occlusion_start=40,
                occlusion_duration=10,
                occlusion_coverage=1.0,
                noise=0.02,
                attributes=("occlusion",),
            )
        case "illumination":
            scenario = Scenario(
                frame_size=(360, 240),
                frames=60,
                start=(60.0, 104.0),
                velocity=(2.0, 0.0),
                gain_ramp=-0.008,
                noise=0.02,
                attributes=("illumination",),
            )
        case _:
            raise ScenarioError(
                f"unknown scenario {name!r}, expected one of {SCENARIO_NAMES}"
            )
    return replace(scenario, name=name, seed=seed)


__all__ = [
    "Scenario",
    "SCENARIO_NAMES",
    "OCCLUDER_LEVEL",
    "synth_sequence",
    "scenario_preset",
]
