"""Constant-velocity Kalman filter over the target center, and motion maps.

The state is ``[x, y, dx, dy]`` in image pixels and pixels per frame. The
tracker feeds the fused localization in as the measurement; the filter only
decides where the next search region and motion map are centered.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from _hitrack.errors import ConditioningError, NumericError, ParameterError
from _hitrack.signal import SpatialMap

logger = logging.getLogger(__name__)

DEFAULT_PROCESS_NOISE = 1e-2
DEFAULT_MEASUREMENT_NOISE = 4.0
INITIAL_COVARIANCE = (1.0, 1.0, 100.0, 100.0)
MAX_CONDITION = 1e12


class MotionKind(StrEnum):
    """Shape of the motion map."""

    COSINE = "cosine"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KalmanConfig:
    """Model matrices. The control term is fixed to zero and omitted.

    Attributes:
        F: 4x4 constant-velocity transition.
        H: 2x4 measurement matrix selecting ``(x, y)``.
        Q: 4x4 process noise.
        R: 2x2 measurement noise.
    """

    F: NDArray[np.float64]
    H: NDArray[np.float64]
    Q: NDArray[np.float64]
    R: NDArray[np.float64]

    def __post_init__(self):
        shapes = {"F": (4, 4), "H": (2, 4), "Q": (4, 4), "R": (2, 2)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ParameterError(f"{name} must be {shape}")
        for name in ("Q", "R"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-12:
                raise ParameterError(f"{name} must be symmetric PSD")

    @classmethod
    def constant_velocity(
        cls,
        q: float = DEFAULT_PROCESS_NOISE,
        r: float = DEFAULT_MEASUREMENT_NOISE,
    ) -> "KalmanConfig":
        """``Q = q * diag(.25, .25, 1, 1)``, ``R = r * I``.

        Args:
            q: Process noise scale.
            r: Measurement noise variance in squared pixels.
        """
        if q < 0 or r < 0:
            raise ParameterError(f"noise scales must be >= 0, got q={q}, r={r}")
        transition = np.eye(4)
        transition[0, 2] = transition[1, 3] = 1.0
        measurement = np.eye(2, 4)
        return cls(
            transition,
            measurement,
            q * np.diag([0.25, 0.25, 1.0, 1.0]),
            r * np.eye(2),
        )


@dataclass(frozen=True)
class KalmanState:
    """Estimate ``x_hat = [x, y, dx, dy]`` and its covariance ``P``."""

    x_hat: NDArray[np.float64]
    P: NDArray[np.float64]

    @property
    def position(self) -> tuple[float, float]:
        """Estimated center ``(x, y)``."""
        return float(self.x_hat[0]), float(self.x_hat[1])

    @property
    def velocity(self) -> tuple[float, float]:
        """Estimated velocity ``(dx, dy)`` per frame."""
        return float(self.x_hat[2]), float(self.x_hat[3])


def _symmetric(m: NDArray[np.float64]) -> NDArray[np.float64]:
    return (m + m.T) / 2.0


def km_init(center: tuple[float, float]) -> KalmanState:
    """Seeds the filter at ``center`` with zero velocity."""
    x, y = center
    return KalmanState(np.array([x, y, 0.0, 0.0]), np.diag(INITIAL_COVARIANCE))


def km_predict(state: KalmanState, config: KalmanConfig) -> KalmanState:
    """Time update: ``x <- F x``, ``P <- F P F^T + Q``.

    Raises:
        NumericError: If the state holds non-finite values.
    """
    if not (np.all(np.isfinite(state.x_hat)) and np.all(np.isfinite(state.P))):
        raise NumericError("non-finite Kalman state")
    x_hat = config.F @ state.x_hat
    cov = config.F @ state.P @ config.F.T + config.Q
    return KalmanState(x_hat, _symmetric(cov))


def km_update(
    state: KalmanState, z: tuple[float, float], config: KalmanConfig
) -> KalmanState:
    """Measurement update with the standard innovation covariance.

    Args:
        state: The predicted state for this frame.
        z: Measured center ``(x, y)``.
        config: Model matrices.

    Returns:
        The corrected state.

    Raises:
        NumericError: If the measurement is not finite.
        ConditioningError: If the innovation covariance cannot be inverted.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite measurement {z}")
    residual = z - config.H @ state.x_hat
    innovation_cov = config.H @ state.P @ config.H.T + config.R
    condition = (
        np.linalg.cond(innovation_cov)
        if np.all(np.isfinite(innovation_cov))
        else np.inf
    )
    if not condition <= MAX_CONDITION:
        raise ConditioningError("innovation covariance is singular; widen R")
    gain = np.linalg.solve(innovation_cov, config.H @ state.P).T
    x_hat = state.x_hat + gain @ residual
    cov = (np.eye(4) - gain @ config.H) @ state.P
    return KalmanState(x_hat, _symmetric(cov))


def innovation(state: KalmanState, z: tuple[float, float], config: KalmanConfig):
    """Measurement residual ``z - H x_hat`` of a predicted state."""
    return np.asarray(z, dtype=np.float64) - config.H @ state.x_hat


def predict_search_center(
    state: KalmanState, config: KalmanConfig, frame_bounds: tuple[int, int]
) -> tuple[float, float]:
    """Predicted center for the coming frame, clamped to the frame.

    ``state`` itself is left alone; the tracker commits the prediction once.

    Args:
        state: The current estimate.
        config: Model matrices.
        frame_bounds: Frame ``(width, height)`` in pixels.
    """
    x, y = (config.F @ state.x_hat)[:2]
    width, height = frame_bounds
    return float(np.clip(x, 0.0, width)), float(np.clip(y, 0.0, height))


def motion_map(
    layer_size: tuple[int, int],
    center: tuple[float, float],
    kind: MotionKind | str = MotionKind.GAUSSIAN,
    spread: float = 1.0,
) -> SpatialMap:
    """Prior over the target position on a layer grid.

    The cosine kind is a Hann bump spanning ``n - 1`` cells on each axis,
    shifted to ``center``; centered at ``((w - 1) / 2, (h - 1) / 2)`` it equals
    `signal.cosine_window`. The gaussian kind uses ``spread`` as its standard
    deviation in cells. Distances do not wrap.

    Args:
        layer_size: Grid ``(width, height)``.
        center: Peak ``(x, y)`` in cell coordinates.
        kind: Map shape.
        spread: Gaussian standard deviation in cells; unused for cosine.

    Returns:
        A ``(height, width)`` map with values in ``[0, 1]``.

    Raises:
        ParameterError: If ``spread`` is not positive for the gaussian kind.
    """
    kind = MotionKind(kind)
    width, height = layer_size
    cx, cy = center
    dx = np.arange(width) - cx
    dy = np.arange(height) - cy
    match kind:
        case MotionKind.COSINE:

            def bump(d: NDArray, n: int) -> NDArray:
                if n < 2:
                    return np.ones_like(d)
                half = (n - 1) / 2.0
                return np.where(
                    np.abs(d) <= half, 0.5 * (1.0 + np.cos(np.pi * d / half)), 0.0
                )

            return np.outer(bump(dy, height), bump(dx, width))
        case MotionKind.GAUSSIAN:
            if not spread > 0:
                raise ParameterError(f"spread must be positive, got {spread}")
            return np.exp(
                -(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * spread**2)
            )


__all__ = [
    "MotionKind",
    "KalmanConfig",
    "KalmanState",
    "km_init",
    "km_predict",
    "km_update",
    "innovation",
    "predict_search_center",
    "motion_map",
]
