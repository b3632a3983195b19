import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from _hitrack.cf_branch import BranchModel, detect
from _hitrack.errors import DimensionError, NumericError, ParameterError
from _hitrack.signal import SpatialMap, fourier_resample

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class FusionWeights:
    """Per-branch weights ``m`` on the probability simplex."""

    m: NDArray[np.float64]

    def __post_init__(self):
        if self.m.ndim != 1 or len(self.m) == 0:
            raise ParameterError("weights must be a non-empty vector")
        if np.any(self.m < 0) or abs(float(self.m.sum()) - 1.0) > SIMPLEX_TOL:
            raise ParameterError(f"weights {self.m} are not on the simplex")

    def __len__(self) -> int:
        return len(self.m)

    @classmethod
    def uniform(cls, branches: int) -> "FusionWeights":
        """Equal weights for ``branches`` branches."""
        if branches < 1:
            raise ParameterError("need at least one branch")
        return cls(np.full(branches, 1.0 / branches))


@dataclass(frozen=True)
class BranchEnergy:
    """Per-branch energies ``E_l``; lower means a better label fit."""

    e: NDArray[np.float64]

    def __post_init__(self):
        if not np.all(np.isfinite(self.e)):
            raise NumericError(f"non-finite branch energies {self.e}")


def branch_energy(model: BranchModel, sample: NDArray[np.float64]) -> float:
    """``E = C^T C - 2 C^T y`` with ``C = detect(sample, model)``.

    Equals ``||C - y||^2 - ||y||^2``.

    Raises:
        DimensionError: If the sample does not match the model.
    """
    response = detect(sample, model)
    return float(np.sum(response * response) - 2.0 * np.sum(response * model.label))


def normalized_energies(
    energies: Sequence[float], label_energies: Sequence[float]
) -> BranchEnergy:
    """Divides each branch energy by its label energy ``||y_l||^2``."""
    e = np.asarray(energies, dtype=np.float64)
    norms = np.asarray(label_energies, dtype=np.float64)
    if e.shape != norms.shape:
        raise DimensionError(f"{e.shape} energies vs {norms.shape} label energies")
    if np.any(norms <= 0):
        raise ParameterError("label energies must be positive")
    return BranchEnergy(e / norms)


def _project_simplex(v: NDArray[np.float64]) -> NDArray[np.float64]:
    u = np.sort(v)[::-1]
    cumsum = np.cumsum(u)
    ranks = np.arange(1, len(u) + 1)
    active = np.nonzero(u + (1.0 - cumsum) / ranks > 0)[0][-1]
    theta = (1.0 - cumsum[active]) / (active + 1)
    return np.maximum(v + theta, 0.0)


def solve_weights(energies: BranchEnergy, reg: float = 1.0) -> FusionWeights:
    """Minimizes ``m^T E + reg * m^T m`` over the probability simplex.

    The KKT conditions give ``m_l = max(0, (mu - E_l) / (2 reg))``, which is
    the Euclidean projection of ``-E / (2 reg)`` onto the simplex; ``mu`` is
    found by scanning the sorted breakpoints.

    Args:
        energies: Branch energies.
        reg: Coefficient of ``||m||^2``.

    Raises:
        ParameterError: If there are no energies or ``reg`` is not positive.
    """
    e = energies.e
    if e.ndim != 1 or len(e) == 0:
        raise ParameterError("need at least one branch energy")
    if not reg > 0:
        raise ParameterError(f"reg must be positive, got {reg}")
    m = _project_simplex(-e / (2.0 * reg))
    return FusionWeights(m / m.sum())


def smooth_weights(
    previous: FusionWeights, current: FusionWeights, beta: float
) -> FusionWeights:
    """Exponential average ``(1 - beta) * previous + beta * current``."""
    if not 0 < beta <= 1:
        raise ParameterError(f"beta must be in (0, 1], got {beta}")
    if len(previous) != len(current):
        raise DimensionError("weight vectors differ in length")
    m = (1.0 - beta) * previous.m + beta * current.m
    return FusionWeights(m / m.sum())


def fuse_scores(
    maps: Sequence[SpatialMap], weights: FusionWeights, out_size: tuple[int, int]
) -> SpatialMap:
    """Resamples every branch map to ``out_size`` and sums them with ``weights``.

    Raises:
        ParameterError: If there are no maps or ``out_size`` is smaller than
            one of them.
        DimensionError: If the map and weight counts differ.
    """
    if not maps:
        raise ParameterError("nothing to fuse")
    if len(maps) != len(weights):
        raise DimensionError(f"{len(maps)} maps for {len(weights)} weights")
    width, height = out_size
    for score in maps:
        if score.shape[0] > height or score.shape[1] > width:
            raise ParameterError(f"cannot fuse {score.shape} map into {out_size}")
    fused = np.zeros((height, width))
    for score, m in zip(maps, weights.m):
        fused += m * fourier_resample(score, out_size)
    return fused


def _refine(left: float, mid: float, right: float) -> float:
    curvature = left - 2.0 * mid + right
    if not (np.isfinite(curvature) and curvature < 0):
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def localize(score: SpatialMap) -> tuple[tuple[float, float], float]:
    """Sub-cell peak of a score map.

    The first maximum in row-major order is refined per axis by a 3-point
    parabola through its cyclic neighbours, clamped to half a cell.

    Returns:
        The peak ``(x, y)`` in cells and the map value at the integer maximum.

    Raises:
        NumericError: If the map is empty or all NaN.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.size == 0 or np.all(np.isnan(score)):
        raise NumericError("cannot localize an empty or all-NaN map")
    row, col = np.unravel_index(int(np.nanargmax(score)), score.shape)
    height, width = score.shape
    mid = score[row, col]
    dx = _refine(score[row, (col - 1) % width], mid, score[row, (col + 1) % width])
    dy = _refine(score[(row - 1) % height, col], mid, score[(row + 1) % height, col])
    return (col + dx, row + dy), float(mid)


def score_displacement(
    peak: tuple[float, float], grid: tuple[int, int]
) -> tuple[float, float]:
    """Peak offset from the label center ``grid / 2``, as a fraction of the grid."""
    (px, py), (width, height) = peak, grid
    return (px - width / 2.0) / width, (py - height / 2.0) / height


def peak_to_sidelobe(score: SpatialMap, peak: tuple[float, float]) -> float:
    """Peak-to-sidelobe ratio, excluding a cyclic window around ``peak``.

    The excluded half-width is a tenth of the grid, at least two cells.
    """
    score = np.asarray(score, dtype=np.float64)
    height, width = score.shape
    col, row = int(round(peak[0])) % width, int(round(peak[1])) % height
    rx, ry = max(2, width // 10), max(2, height // 10)
    mask = np.ones_like(score, dtype=bool)
    rows = np.arange(row - ry, row + ry + 1) % height
    cols = np.arange(col - rx, col + rx + 1) % width
    mask[np.ix_(rows, cols)] = False
    sidelobe = score[mask]
    if sidelobe.size < 2:
        return 0.0
    return float((score[row, col] - sidelobe.mean()) / (sidelobe.std() + 1e-12))


__all__ = [
    "FusionWeights",
    "BranchEnergy",
    "branch_energy",
    "normalized_energies",
    "solve_weights",
    "smooth_weights",
    "fuse_scores",
    "localize",
    "score_displacement",
    "peak_to_sidelobe",
]
