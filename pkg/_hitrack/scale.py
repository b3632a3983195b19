import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from _hitrack.cf_branch import BranchModel, detect
from _hitrack.errors import ParameterError

logger = logging.getLogger(__name__)

type LayerSampler = Callable[[NDArray, tuple[float, float], float], NDArray]
"""``(frame, center, extent) -> (D, H, W)`` features of the scale branch."""


@dataclass(frozen=True)
class ScaleConfig:
    """Geometric scale pyramid.

    Attributes:
        alpha: Ratio between consecutive candidates.
        n_range: Inclusive, symmetric exponent range.
        scale_layer: Name of the branch that scores the candidates.
        damping: Fraction of the winning exponent actually applied.
    """

    alpha: float = 1.03
    n_range: tuple[int, int] = (-5, 5)
    scale_layer: str = "middle"
    damping: float = 0.6

    def __post_init__(self):
        if not self.alpha > 1:
            raise ParameterError(f"alpha must be > 1, got {self.alpha}")
        low, high = self.n_range
        if low != -high or high < 0:
            raise ParameterError(f"n_range must be symmetric, got {self.n_range}")
        if not 0 < self.damping <= 1:
            raise ParameterError(f"damping must be in (0, 1], got {self.damping}")

    @property
    def exponents(self) -> range:
        """Candidate exponents in ascending order."""
        return range(self.n_range[0], self.n_range[1] + 1)


@dataclass(frozen=True)
class ScaleEstimate:
    """Outcome of `scale_search`."""

    best_n: int
    best_score: float
    scores: tuple[float, ...]
    size: tuple[float, float]


def scale_candidates(
    target_size: tuple[float, float], config: ScaleConfig
) -> list[tuple[float, float]]:
    """Sizes ``alpha^n * (w, h)`` for every exponent, ascending.

    Raises:
        ParameterError: If a side is not positive.
    """
    width, height = target_size
    if not (width > 0 and height > 0):
        raise ParameterError(f"target size must be positive, got {target_size}")
    return [
        (width * config.alpha**n, height * config.alpha**n) for n in config.exponents
    ]


def scale_search(
    frame: NDArray,
    center: tuple[float, float],
    target_size: tuple[float, float],
    branch: BranchModel,
    config: ScaleConfig,
    sampler: LayerSampler,
    search_area_scale: float = 4.0,
    executor: Executor | None = None,
) -> ScaleEstimate:
    """Scores every pyramid level with the scale branch and picks the best.

    Candidate ``n`` samples a square of edge ``sqrt(search_area_scale * w * h)
    * alpha^n`` around ``center``. Ties go to the smaller ``|n|``, then to the
    negative exponent.

    Args:
        frame: The current image.
        center: Localized target center.
        target_size: Current ``(w, h)``.
        branch: Trained model of the scale layer.
        config: Pyramid settings.
        sampler: Produces the branch's processed features for a region.
        search_area_scale: Search area as a multiple of the target area.
        executor: Optional pool for evaluating candidates concurrently.

    Returns:
        The winning exponent, its score and the damped new size.

    Raises:
        BoundaryError: If a candidate region lies entirely outside the frame.
    """
    width, height = target_size
    extent = math.sqrt(search_area_scale * width * height)
    exponents = list(config.exponents)

    def score(n: int) -> float:
        features = sampler(frame, center, extent * config.alpha**n)
        return float(np.max(detect(features, branch)))

    mapper = executor.map if executor is not None else map
    scores = tuple(mapper(score, exponents))
    best_n, best_score = max(
        zip(exponents, scores), key=lambda pair: (pair[1], -abs(pair[0]), -pair[0])
    )
    factor = config.alpha ** (config.damping * best_n)
    logger.debug("scale n=%d score=%.4f factor=%.4f", best_n, best_score, factor)
    return ScaleEstimate(best_n, best_score, scores, (width * factor, height * factor))


__all__ = [
    "LayerSampler",
    "ScaleConfig",
    "ScaleEstimate",
    "scale_candidates",
    "scale_search",
]
