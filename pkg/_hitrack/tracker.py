"""Per-frame tracking pipeline.

Every frame: predict the target center with the Kalman filter, sample the
search region there, detect with every branch, fuse the branch scores with
simplex weights, localize, estimate scale with the scale branch, correct the
Kalman filter with the localized center, store a training sample and, every
``update_interval`` frames, retrain all branches by conjugate gradient.

A frame whose fused peak-to-sidelobe ratio falls below ``confidence_gate``
times its running average is not trusted. The Kalman filter then keeps its
prediction and the frame updates neither the scale nor the sample memory.
A gate of 0 trusts every frame.

Branch work within a frame fans out to an optional executor. Results are
joined in branch order, so trajectories do not depend on the worker count.
"""

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np
from numpy.typing import NDArray

from _hitrack.cf_branch import (
    BranchModel,
    CgResult,
    SampleMemory,
    detect,
    memory_insert,
    new_branch,
    reg_window,
    spectra_of,
    train_branch,
)
from _hitrack.config import TrackerConfig
from _hitrack.errors import InputError, StateError
from _hitrack.features import (
    FeatureSource,
    FeatureStack,
    HandcraftedSource,
    PcaBasis,
    apply_window,
    pca_fit,
    pca_project,
)
from _hitrack.fusion import (
    BranchEnergy,
    FusionWeights,
    branch_energy,
    fuse_scores,
    localize,
    normalized_energies,
    peak_to_sidelobe,
    score_displacement,
    smooth_weights,
    solve_weights,
)
from _hitrack.motion import (
    KalmanState,
    innovation,
    km_init,
    km_predict,
    km_update,
    motion_map,
    predict_search_center,
)
from _hitrack.scale import ScaleEstimate, scale_search
from _hitrack.signal import SpatialMap, cosine_window, gaussian_label, idft2

logger = logging.getLogger(__name__)

type Box = tuple[float, float, float, float]
"""Axis-aligned ``(x, y, w, h)`` in 0-based image pixels."""

MIN_BOX_SIDE = 4.0
PSR_REFERENCE_RATE = 0.1


@dataclass(frozen=True)
class StepDiagnostics:
    """What happened during one `step`.

    Attributes:
        frame_index: Index of the processed frame.
        search_center: Where the search region was centered.
        peaks: Per-branch localized peaks, in each branch's cells.
        energies: Normalized branch energies fed to the weight solver.
        weights: Fusion weights used on this frame.
        psr: Peak-to-sidelobe ratio of the fused score map.
        confident: Whether the frame passed the confidence gate.
        scale: Scale search outcome; None when it was skipped.
        cg: Per-branch solver results; None when no update ran.
        innovation: Kalman measurement residual ``z - H x_pred``.
        lost: Whether the localized center left the frame.
    """

    frame_index: int
    search_center: tuple[float, float]
    peaks: tuple[tuple[float, float], ...]
    energies: tuple[float, ...]
    weights: FusionWeights
    psr: float
    confident: bool
    scale: ScaleEstimate | None
    cg: tuple[CgResult, ...] | None
    innovation: tuple[float, float]
    lost: bool


@dataclass(frozen=True)
class TrackerState:
    """Everything the pipeline carries from one frame to the next."""

    config: TrackerConfig
    source: FeatureSource
    patch_size: int
    basis: PcaBasis
    gains: tuple[float, ...]
    windows: tuple[SpatialMap, ...]
    target_cells: tuple[tuple[float, float], ...]
    branches: tuple[BranchModel, ...]
    memory: SampleMemory
    latest_sample: FeatureStack
    kalman: KalmanState
    box: Box
    frame_index: int
    weights: FusionWeights
    first_frame: int = 0
    energies: BranchEnergy | None = None
    psr_reference: float | None = None
    lost: bool = False

    @property
    def center(self) -> tuple[float, float]:
        """Center of the current box."""
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0

    @property
    def grids(self) -> tuple[int, ...]:
        """Square grid edge of every layer, in cells."""
        return tuple(self.patch_size // s.cell_size for s in self.basis.specs)


def prepare_frame(frame: NDArray) -> NDArray[np.float64]:
    """Grayscale float frame with values in ``[0, 1]``.

    ``uint8`` input is rescaled; three-channel input is taken as BGR.
    """
    frame = np.asarray(frame)
    scale = 255.0 if frame.dtype == np.uint8 else 1.0
    image = frame.astype(np.float32) / scale
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    if image.ndim != 2 or image.size == 0:
        raise InputError(f"frame must be a non-empty image, got shape {frame.shape}")
    return image.astype(np.float64)


def search_extent(size: tuple[float, float], search_area_scale: float) -> float:
    """Edge of the square search region, ``sqrt(scale * w * h)``."""
    width, height = size
    return math.sqrt(search_area_scale * width * height)


def patch_size_for(extent: float, config: TrackerConfig) -> int:
    """Canonical patch edge: ``extent`` clamped to the configured bounds and
    rounded down to a multiple of every layer's cell size.
    """
    step = math.lcm(*config.layer_cell_sizes)
    clamped = min(max(extent, config.patch_min), config.patch_max)
    size = int(clamped // step) * step
    if size < config.patch_min:
        size = math.ceil(config.patch_min / step) * step
    return size


def _check_box(box: Sequence[float], frame_size: tuple[int, int]) -> Box:
    if len(box) != 4 or not all(math.isfinite(v) for v in box):
        raise InputError(f"box must be four finite numbers, got {box}")
    x, y, w, h = (float(v) for v in box)
    if w < MIN_BOX_SIDE or h < MIN_BOX_SIDE:
        raise InputError(f"box {w}x{h} is smaller than {MIN_BOX_SIDE} px")
    width, height = frame_size
    if not (0 <= x + w / 2 < width and 0 <= y + h / 2 < height):
        raise InputError(f"box {box} is centered outside the {width}x{height} frame")
    return x, y, w, h


def _clamp_box(box: Box, frame_size: tuple[int, int]) -> Box:
    x, y, w, h = box
    width, height = frame_size
    w, h = min(w, float(width)), min(h, float(height))
    return (
        min(max(x, 0.0), width - w),
        min(max(y, 0.0), height - h),
        w,
        h,
    )


def _windows(
    config: TrackerConfig,
    grids: Sequence[int],
    target_cells: Sequence[tuple[float, float]],
    offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[SpatialMap, ...]:
    windows = []
    for grid, cells, gated in zip(grids, target_cells, config.motion_layers):
        window = cosine_window(grid, grid)
        if config.use_motion and gated:
            center = (grid / 2.0 + offset[0] * grid, grid / 2.0 + offset[1] * grid)
            spread = config.motion_spread * math.sqrt(cells[0] * cells[1])
            window = window * motion_map(
                (grid, grid), center, config.motion_kind, spread
            )
        windows.append(window)
    return tuple(windows)


def _process(
    raw: FeatureStack,
    basis: PcaBasis,
    windows: Sequence[SpatialMap],
    gains: Sequence[float],
) -> FeatureStack:
    windowed = apply_window(pca_project(raw, basis), windows)
    return windowed.replace(maps * g for maps, g in zip(windowed.channels, gains))


def _mapper(executor: Executor | None) -> Callable:
    return executor.map if executor is not None else map


def _train(
    branches: Sequence[BranchModel],
    memory: SampleMemory,
    iterations: int,
    config: TrackerConfig,
    executor: Executor | None,
) -> list[tuple[BranchModel, CgResult]]:
    def train(model: BranchModel) -> tuple[BranchModel, CgResult]:
        return train_branch(model, memory, iterations, config.cg_formula, config.cg_tol)

    return list(_mapper(executor)(train, branches))


def layer_sampler(state: TrackerState, layer: str, frame_index: int):
    """Processed features of one layer for an arbitrary square region.

    Returns:
        A callable ``(frame, center, extent) -> (D, H, W)`` applying the
        layer's PCA basis, centered window and gain.
    """
    index = [s.name for s in state.basis.specs].index(layer)
    spec = state.basis.specs[index]
    basis = PcaBasis(
        (spec,), (state.basis.projections[index],), (state.basis.means[index],)
    )

    def sample(frame, center, extent):
        raw = state.source.sample(
            frame, frame_index, center, extent, (spec,), state.patch_size
        )
        processed = _process(
            raw, basis, (state.windows[index],), (state.gains[index],)
        )
        return processed.channels[0]

    return sample


def init(
    frame: NDArray,
    box: Sequence[float],
    config: TrackerConfig | None = None,
    source: FeatureSource | None = None,
    executor: Executor | None = None,
    frame_index: int = 0,
) -> TrackerState:
    """Learns the initial branches from the annotated first frame.

    Args:
        frame: The first image.
        box: Target ``(x, y, w, h)`` in 0-based pixels.
        config: Settings; defaults when omitted.
        source: Raw feature source; hand-crafted features when omitted.
        executor: Optional pool for per-branch work.
        frame_index: Index of ``frame`` in its sequence, for file-backed
            sources.

    Returns:
        The initial state; the Kalman velocity is zero.

    Raises:
        InputError: If the box is degenerate or centered outside the frame.
    """
    config = config or TrackerConfig()
    source = source or HandcraftedSource(config.orientation_bins)
    image = prepare_frame(frame)
    x, y, w, h = _check_box(box, (image.shape[1], image.shape[0]))
    center = (x + w / 2.0, y + h / 2.0)
    extent = search_extent((w, h), config.search_area_scale)
    patch = patch_size_for(extent, config)
    specs = config.layer_specs

    raw = source.sample(image, frame_index, center, extent, specs, patch)
    basis = pca_fit(raw, specs)
    grids = [patch // s.cell_size for s in specs]
    target_cells = tuple(
        (w * patch / extent / s.cell_size, h * patch / extent / s.cell_size)
        for s in specs
    )
    windows = _windows(config, grids, target_cells)
    unscaled = apply_window(pca_project(raw, basis), windows)
    gains = tuple(
        1.0 / norm if (norm := float(np.linalg.norm(maps))) > 0 else 1.0
        for maps in unscaled.channels
    )
    sample = unscaled.replace(m * g for m, g in zip(unscaled.channels, gains))
    memory = memory_insert(
        SampleMemory(config.memory_capacity), spectra_of(sample), config.learning_rate
    )

    branches = []
    for spec, grid, cells, lam in zip(specs, grids, target_cells, config.lambdas):
        sigma = spec.label_sigma_factor * math.sqrt(cells[0] * cells[1])
        label = gaussian_label(grid, grid, (grid / 2.0, grid / 2.0), sigma)
        penalty = reg_window(
            (grid, grid), cells, config.reg_min, config.reg_edge, config.reg_max
        )
        branches.append(new_branch(spec, label, penalty, lam, spec.channels_out))
    trained = _train(branches, memory, config.init_cg_iters, config, executor)
    for model, result in trained:
        if not result.converged:
            logger.info(
                "%s: initial solve used its %d iterations, residual %.3g",
                model.layer.name,
                result.iterations,
                result.residuals[-1],
            )
    logger.info(
        "initialized %d branches on %.0fx%.0f box, search %.1f px, patch %d px",
        len(branches),
        w,
        h,
        extent,
        patch,
    )
    return TrackerState(
        config=config,
        source=source,
        patch_size=patch,
        basis=basis,
        gains=gains,
        windows=windows,
        target_cells=target_cells,
        branches=tuple(model for model, _ in trained),
        memory=memory,
        latest_sample=sample,
        kalman=km_init(center),
        box=(x, y, w, h),
        frame_index=0,
        first_frame=frame_index,
        weights=FusionWeights.uniform(len(branches)),
    )


def _energies(state: TrackerState, executor: Executor | None) -> BranchEnergy:
    config = state.config

    def latest(pair: tuple[BranchModel, NDArray]) -> float:
        return branch_energy(*pair)

    def averaged(pair: tuple[BranchModel, NDArray]) -> float:
        model, _ = pair
        return sum(
            entry.weight
            * branch_energy(model, idft2(entry.sample.layer(model.layer.name)))
            for entry in state.memory.entries
        )

    energy = latest if config.energy_source == "latest" else averaged
    pairs = list(zip(state.branches, state.latest_sample.channels))
    values = list(_mapper(executor)(energy, pairs))
    return normalized_energies(
        values, [float(np.sum(m.label**2)) for m in state.branches]
    )


def _gate(state: TrackerState, psr: float) -> tuple[bool, float | None]:
    reference = state.psr_reference
    gate = state.config.confidence_gate
    confident = reference is None or gate == 0 or psr >= gate * reference
    if confident:
        if reference is None:
            reference = psr
        else:
            reference += PSR_REFERENCE_RATE * (psr - reference)
    return confident, reference


def step(
    state: TrackerState, frame: NDArray, executor: Executor | None = None
) -> tuple[TrackerState, Box, StepDiagnostics]:
    """Tracks the target into the next frame.

    Args:
        state: State after the previous frame.
        frame: The next image.
        executor: Optional pool for per-branch and per-scale work.

    Returns:
        The new state, the reported box and the frame's diagnostics. The box
        is moved inside the frame (and cut to it when larger). Once the
        target is lost the box stays frozen and ``diagnostics.lost`` is set.
    """
    config = state.config
    kalman_config = config.kalman
    image = prepare_frame(frame)
    frame_size = (image.shape[1], image.shape[0])
    index = state.frame_index + 1
    source_index = state.first_frame + index
    x, y, w, h = state.box

    if state.lost:
        diagnostics = StepDiagnostics(
            frame_index=index,
            search_center=state.center,
            peaks=(),
            energies=(),
            weights=state.weights,
            psr=0.0,
            confident=False,
            scale=None,
            cg=None,
            innovation=(0.0, 0.0),
            lost=True,
        )
        return replace(state, frame_index=index), state.box, diagnostics

    predicted = km_predict(state.kalman, kalman_config)
    if config.use_motion:
        search_center = predict_search_center(state.kalman, kalman_config, frame_size)
    else:
        search_center = state.center
    extent = search_extent((w, h), config.search_area_scale)

    windows = state.windows
    offset = (
        (predicted.position[0] - search_center[0]) / extent,
        (predicted.position[1] - search_center[1]) / extent,
    )
    if config.use_motion and offset != (0.0, 0.0):
        windows = _windows(config, state.grids, state.target_cells, offset)
    raw = state.source.sample(
        image, source_index, search_center, extent, state.basis.specs, state.patch_size
    )
    features = _process(raw, state.basis, windows, state.gains)
    mapper = _mapper(executor)
    maps = list(mapper(detect, features.channels, state.branches))

    energies = state.energies
    if energies is None or config.energy_every_frame:
        energies = _energies(state, executor)
    weights = solve_weights(energies, config.fusion_reg)
    if config.weight_smoothing < 1:
        weights = smooth_weights(state.weights, weights, config.weight_smoothing)
    finest = max(state.grids)
    fused = fuse_scores(maps, weights, (finest, finest))
    peak, _ = localize(fused)
    dx, dy = score_displacement(peak, (finest, finest))
    center = (search_center[0] + dx * extent, search_center[1] + dy * extent)
    psr = peak_to_sidelobe(fused, peak)
    confident, psr_reference = _gate(state, psr)
    residual = innovation(predicted, center, kalman_config)
    peaks = tuple(localize(m)[0] for m in maps)
    logger.debug(
        "frame %d: weights %s psr %.2f confident %s",
        index,
        np.round(weights.m, 3),
        psr,
        confident,
    )

    if not (0 <= center[0] < frame_size[0] and 0 <= center[1] < frame_size[1]):
        logger.warning("frame %d: target lost at (%.1f, %.1f)", index, *center)
        diagnostics = StepDiagnostics(
            frame_index=index,
            search_center=search_center,
            peaks=peaks,
            energies=tuple(float(e) for e in energies.e),
            weights=weights,
            psr=psr,
            confident=False,
            scale=None,
            cg=None,
            innovation=(float(residual[0]), float(residual[1])),
            lost=True,
        )
        lost_state = replace(state, frame_index=index, lost=True, weights=weights)
        return lost_state, state.box, diagnostics

    size = (w, h)
    scale = None
    if confident:
        layer = config.scale.scale_layer
        branch = next(m for m in state.branches if m.layer.name == layer)
        scale = scale_search(
            image,
            center,
            size,
            branch,
            config.scale,
            layer_sampler(state, layer, source_index),
            config.search_area_scale,
            executor,
        )
        size = scale.size
    box = _clamp_box(
        (center[0] - size[0] / 2.0, center[1] - size[1] / 2.0, size[0], size[1]),
        frame_size,
    )
    kalman = km_update(predicted, center, kalman_config) if confident else predicted

    memory, latest = state.memory, state.latest_sample
    if confident:
        raw = state.source.sample(
            image,
            source_index,
            center,
            search_extent(size, config.search_area_scale),
            state.basis.specs,
            state.patch_size,
        )
        latest = _process(raw, state.basis, state.windows, state.gains)
        memory = memory_insert(memory, spectra_of(latest), config.learning_rate)

    branches, cg = state.branches, None
    if index % config.update_interval == 0:
        trained = _train(branches, memory, config.update_cg_iters, config, executor)
        branches = tuple(model for model, _ in trained)
        cg = tuple(result for _, result in trained)

    new_state = replace(
        state,
        branches=branches,
        memory=memory,
        latest_sample=latest,
        kalman=kalman,
        box=box,
        frame_index=index,
        weights=weights,
        # retrained filters make the cached energies stale
        energies=energies if cg is None else None,
        psr_reference=psr_reference,
    )
    diagnostics = StepDiagnostics(
        frame_index=index,
        search_center=search_center,
        peaks=peaks,
        energies=tuple(float(e) for e in energies.e),
        weights=weights,
        psr=psr,
        confident=confident,
        scale=scale,
        cg=cg,
        innovation=(float(residual[0]), float(residual[1])),
        lost=False,
    )
    return new_state, box, diagnostics


class Tracker:
    """Object wrapper around `init` and `step` for evaluation harnesses."""

    def __init__(
        self,
        config: TrackerConfig | None = None,
        source: FeatureSource | None = None,
        workers: int = 1,
    ):
        """Initializes the tracker.

        Args:
            config: Settings; defaults when omitted.
            source: Raw feature source; hand-crafted when omitted.
            workers: Threads for per-branch and per-scale work.
        """
        if workers < 1:
            raise InputError(f"workers must be >= 1, got {workers}")
        self.config = config or TrackerConfig()
        self.source = source
        self.state: TrackerState | None = None
        self.diagnostics: StepDiagnostics | None = None
        self._executor = ThreadPoolExecutor(workers) if workers > 1 else None

    def init(self, frame: NDArray, box: Sequence[float], frame_index: int = 0):
        """(Re)initializes on ``frame`` with the annotated ``box``."""
        self.state = init(
            frame, box, self.config, self.source, self._executor, frame_index
        )
        self.diagnostics = None

    def update(self, frame: NDArray) -> Box:
        """Tracks into ``frame`` and returns the reported box.

        Raises:
            StateError: If the tracker has not been initialized.
        """
        if self.state is None:
            raise StateError("update called before init")
        self.state, box, self.diagnostics = step(self.state, frame, self._executor)
        return box

    def close(self):
        """Shuts down the worker pool."""
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "Tracker":
        return self

    def __exit__(self, *exc):
        self.close()


def run_sequence(
    frames: Iterable[NDArray],
    init_box: Sequence[float],
    config: TrackerConfig | None = None,
    source: FeatureSource | None = None,
    workers: int = 1,
) -> list[Box]:
    """Initializes on the first frame and tracks through the rest.

    Returns:
        One box per frame; the first is ``init_box``.

    Raises:
        InputError: If there are no frames.
    """
    iterator = iter(frames)
    first = next(iterator, None)
    if first is None:
        raise InputError("cannot track an empty sequence")
    with Tracker(config, source, workers) as tracker:
        tracker.init(first, init_box)
        x, y, w, h = (float(v) for v in init_box)
        trajectory: list[Box] = [(x, y, w, h)]
        for frame in iterator:
            trajectory.append(tracker.update(frame))
    return trajectory


__all__ = [
    "Box",
    "StepDiagnostics",
    "TrackerState",
    "Tracker",
    "prepare_frame",
    "search_extent",
    "patch_size_for",
    "layer_sampler",
    "init",
    "step",
    "run_sequence",
]
