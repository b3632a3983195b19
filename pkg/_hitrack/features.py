"""Per-layer feature maps: extraction, external ingestion and PCA.

A layer is a feature hierarchy at its own stride (``cell_size`` pixels per
cell). The built-in source computes intensity and gradient orientation
channels with OpenCV; the external source reads precomputed maps (for example
CNN activations) from MHFT files, a small little-endian binary layout::

    magic "MHFT", u32 version, u32 layer count
    per layer: u32 name length, UTF-8 name, u32 channels, u32 width,
               u32 height, float32 values in (channel, row, column) order
"""

import logging
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh

from _hitrack.errors import (
    BoundaryError,
    DimensionError,
    IngestionError,
    ParameterError,
    SizeError,
)
from _hitrack.signal import SpatialMap

logger = logging.getLogger(__name__)

MAGIC = b"MHFT"
VERSION = 1
DEFAULT_ORIENTATION_BINS = 9


@dataclass(frozen=True)
class LayerSpec:
    """One feature hierarchy, trained as an independent branch.

    Attributes:
        name: Layer identifier.
        cell_size: Pixels per feature cell (the layer's stride).
        channels_out: Channel count after PCA.
        label_sigma_factor: Label sigma as a fraction of the target size.
    """

    name: str
    cell_size: int
    channels_out: int
    label_sigma_factor: float

    def __post_init__(self):
        if self.cell_size < 1:
            raise ParameterError(f"{self.name}: cell_size must be >= 1")
        if self.channels_out < 1:
            raise ParameterError(f"{self.name}: channels_out must be >= 1")
        if not self.label_sigma_factor > 0:
            raise ParameterError(f"{self.name}: label_sigma_factor must be > 0")


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer channel maps extracted from one image region.

    ``channels[l]`` has shape ``(D_l, height_l, width_l)`` and belongs to
    ``specs[l]``; layer order always follows the spec order.
    """

    specs: tuple[LayerSpec, ...]
    channels: tuple[NDArray[np.float64], ...]

    def __post_init__(self):
        if len(self.specs) != len(self.channels):
            raise DimensionError(
                f"{len(self.specs)} layer specs but {len(self.channels)} channel sets"
            )
        for spec, maps in zip(self.specs, self.channels):
            if maps.ndim != 3:
                raise DimensionError(f"{spec.name}: channels must be (D, H, W)")

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self) -> Iterator[tuple[LayerSpec, NDArray[np.float64]]]:
        return iter(zip(self.specs, self.channels))

    def layer(self, name: str) -> NDArray[np.float64]:
        """Returns the channel maps of the named layer."""
        for spec, maps in self:
            if spec.name == name:
                return maps
        raise KeyError(name)

    def replace(self, channels: Sequence[NDArray[np.float64]]) -> "FeatureStack":
        """Returns a stack with the same specs and new channel maps."""
        return FeatureStack(self.specs, tuple(channels))


@dataclass(frozen=True)
class PcaBasis:
    """Per-layer orthonormal projections fitted on the first frame.

    ``projections[l]`` is ``(D_in, channels_out)``, ``means[l]`` is ``(D_in,)``.
    """

    specs: tuple[LayerSpec, ...]
    projections: tuple[NDArray[np.float64], ...]
    means: tuple[NDArray[np.float64], ...]


def _as_gray(patch: NDArray) -> NDArray[np.float64]:
    patch = np.asarray(patch)
    if patch.ndim == 3:
        patch = cv2.cvtColor(patch.astype(np.float32), cv2.COLOR_BGR2GRAY)
    if patch.ndim != 2:
        raise DimensionError(f"patch must be 2-D or BGR, got shape {patch.shape}")
    return patch.astype(np.float64)


def _pool(values: NDArray[np.float64], cell: int, rows: int, cols: int):
    cropped = values[: rows * cell, : cols * cell]
    return cropped.reshape(rows, cell, cols, cell).mean(axis=(1, 3))


def extract_handcrafted(
    patch: NDArray,
    specs: Sequence[LayerSpec],
    orientation_bins: int = DEFAULT_ORIENTATION_BINS,
) -> FeatureStack:
    """Cell-aggregated intensity and gradient channels for every layer.

    Channel order per layer: intensity, gradient magnitude, then one
    magnitude-weighted bin per unsigned gradient orientation (bin 0 holds
    horizontal gradients). Gradients are central differences with cyclic
    padding, so shifting the patch by whole cells shifts every channel.

    Args:
        patch: Grayscale (or BGR) image region with values in [0, 1].
        specs: Layers to produce; coarser ``cell_size`` means a coarser grid.
        orientation_bins: Number of orientation histogram bins.

    Returns:
        A stack with ``orientation_bins + 2`` channels per layer.

    Raises:
        SizeError: If the patch is smaller than a layer's cell.
    """
    if orientation_bins < 1:
        raise ParameterError("orientation_bins must be >= 1")
    image = _as_gray(patch)
    if image.size == 0:
        raise SizeError("empty patch")
    padded = cv2.copyMakeBorder(image, 1, 1, 1, 1, cv2.BORDER_WRAP)
    gx = cv2.Sobel(padded, cv2.CV_64F, 1, 0, ksize=1)[1:-1, 1:-1] / 2.0
    gy = cv2.Sobel(padded, cv2.CV_64F, 0, 1, ksize=1)[1:-1, 1:-1] / 2.0
    magnitude, angle = cv2.cartToPolar(gx, gy, angleInDegrees=True)
    theta = np.mod(angle, 180.0)
    bins = np.floor(theta / (180.0 / orientation_bins)).astype(int) % orientation_bins

    height, width = image.shape
    layers = []
    for spec in specs:
        cell = spec.cell_size
        if cell > height or cell > width:
            raise SizeError(
                f"{spec.name}: patch {width}x{height} smaller than one {cell}px cell"
            )
        rows, cols = height // cell, width // cell
        maps = [_pool(image, cell, rows, cols), _pool(magnitude, cell, rows, cols)]
        maps += [
            _pool(np.where(bins == b, magnitude, 0.0), cell, rows, cols)
            for b in range(orientation_bins)
        ]
        layers.append(np.stack(maps))
    return FeatureStack(tuple(specs), tuple(layers))


def write_external_features(path: Path | str, stack: FeatureStack) -> None:
    """Writes a stack in the MHFT layout (little-endian, float32 values)."""
    chunks = [struct.pack("<4sII", MAGIC, VERSION, len(stack))]
    for spec, maps in stack:
        name = spec.name.encode("utf-8")
        channels, height, width = maps.shape
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack("<III", channels, width, height))
        chunks.append(np.ascontiguousarray(maps, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def ingest_external_features(
    path: Path | str, specs: Sequence[LayerSpec]
) -> FeatureStack:
    """Reads precomputed per-layer features (e.g. CNN activations).

    Args:
        path: An MHFT file.
        specs: The layers the file must contain, in order.

    Returns:
        The stack, with exactly the shapes declared in the file.

    Raises:
        IngestionError: On a malformed header, truncated data, a mismatch with
            ``specs`` or non-finite values; names the offending layer.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    offset = 0

    def take(fmt: str, what: str, layer: str | None = None) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise IngestionError(f"truncated {what}", layer)
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    magic, version, count = take("<4sII", "header")
    if magic != MAGIC:
        raise IngestionError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IngestionError(f"unsupported version {version}")
    if count != len(specs):
        raise IngestionError(f"file has {count} layers, expected {len(specs)}")

    layers = []
    for spec in specs:
        (name_len,) = take("<I", "layer name", spec.name)
        if offset + name_len > len(data):
            raise IngestionError("truncated layer name", spec.name)
        try:
            name = data[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise IngestionError("layer name is not UTF-8", spec.name) from e
        offset += name_len
        if name != spec.name:
            raise IngestionError(f"found layer {name!r}", spec.name)
        channels, width, height = take("<III", "layer shape", name)
        if channels < spec.channels_out:
            raise IngestionError(
                f"{channels} channels cannot be reduced to {spec.channels_out}", name
            )
        if width < 1 or height < 1:
            raise IngestionError(f"empty {width}x{height} maps", name)
        n_values = channels * width * height
        if offset + 4 * n_values > len(data):
            raise IngestionError("truncated values", name)
        values = np.frombuffer(data, dtype="<f4", count=n_values, offset=offset)
        offset += 4 * n_values
        if not np.all(np.isfinite(values)):
            raise IngestionError("non-finite values", name)
        layers.append(values.reshape(channels, height, width).astype(np.float64))
    if offset != len(data):
        raise IngestionError(f"{len(data) - offset} trailing bytes")
    return FeatureStack(tuple(specs), tuple(layers))


def _check_specs(stack: FeatureStack, specs: Sequence[LayerSpec]) -> None:
    if tuple(specs) != stack.specs:
        raise DimensionError("layer specs do not match the feature stack")


def pca_fit(stack: FeatureStack, specs: Sequence[LayerSpec]) -> PcaBasis:
    """Fits per-layer PCA on the cell feature vectors of one sample.

    Components are ordered by descending eigenvalue; exact ties go to the
    component whose dominant entry has the lowest channel index. Each
    component's dominant entry is made positive.

    Raises:
        ParameterError: If a layer asks for more components than it has
            input channels.
        DimensionError: If ``specs`` do not describe ``stack``.
    """
    _check_specs(stack, specs)
    projections, means = [], []
    for spec, maps in stack:
        channels = maps.shape[0]
        if spec.channels_out > channels:
            raise ParameterError(
                f"{spec.name}: channels_out {spec.channels_out} > {channels} channels"
            )
        cells = maps.reshape(channels, -1).T
        mean = cells.mean(axis=0)
        centered = cells - mean
        values, vectors = eigh(centered.T @ centered / len(cells))
        dominant = np.argmax(np.abs(vectors), axis=0)
        signs = np.sign(vectors[dominant, np.arange(channels)])
        vectors = vectors * np.where(signs == 0, 1.0, signs)
        scale = max(float(np.max(np.abs(values))), np.finfo(float).tiny)
        rank_key = np.round(values / scale * 1e10)
        order = np.lexsort((dominant, -rank_key))
        projections.append(vectors[:, order[: spec.channels_out]].copy())
        means.append(mean)
    return PcaBasis(tuple(specs), tuple(projections), tuple(means))


def _check_basis(stack: FeatureStack, basis: PcaBasis, projected: bool) -> None:
    if stack.specs != basis.specs:
        raise DimensionError("PCA basis was fitted for different layers")
    for (spec, maps), proj in zip(stack, basis.projections):
        expected = proj.shape[1] if projected else proj.shape[0]
        if maps.shape[0] != expected:
            raise DimensionError(
                f"{spec.name}: {maps.shape[0]} channels, basis expects {expected}"
            )


def pca_project(stack: FeatureStack, basis: PcaBasis) -> FeatureStack:
    """Mean-subtracted projection of every cell onto the layer's components.

    Raises:
        DimensionError: If the basis does not match the stack.
    """
    _check_basis(stack, basis, projected=False)
    return stack.replace(
        np.einsum("dk,dhw->khw", proj, maps - mean[:, None, None])
        for maps, proj, mean in zip(stack.channels, basis.projections, basis.means)
    )


def pca_reconstruct(stack: FeatureStack, basis: PcaBasis) -> FeatureStack:
    """Maps projected channels back to the input channel space."""
    _check_basis(stack, basis, projected=True)
    return stack.replace(
        np.einsum("dk,khw->dhw", proj, maps) + mean[:, None, None]
        for maps, proj, mean in zip(stack.channels, basis.projections, basis.means)
    )


def apply_window(stack: FeatureStack, windows: Sequence[SpatialMap]) -> FeatureStack:
    """Multiplies every channel of each layer by that layer's window.

    Raises:
        DimensionError: If a window's shape differs from its layer's maps.
    """
    if len(windows) != len(stack):
        raise DimensionError(f"{len(windows)} windows for {len(stack)} layers")
    for (spec, maps), window in zip(stack, windows):
        if np.shape(window) != maps.shape[1:]:
            raise DimensionError(
                f"{spec.name}: window {np.shape(window)} vs maps {maps.shape[1:]}"
            )
    return stack.replace(
        maps * window[None, :, :] for maps, window in zip(stack.channels, windows)
    )


def extract_region(
    source: NDArray,
    center: tuple[float, float],
    extent: tuple[float, float],
    out_size: tuple[int, int],
    stride: float = 1.0,
) -> NDArray[np.float64]:
    """Bilinear resampling of a region onto a regular grid.

    Coordinates are continuous image pixels with pixel ``i`` covering
    ``[i, i + 1)``. Outside the source the border is replicated.

    Args:
        source: A 2-D image, or a ``(C, H, W)`` stack of maps whose cell ``k``
            is centered at pixel ``(k + 0.5) * stride``.
        center: Region center ``(x, y)`` in image pixels.
        extent: Region ``(width, height)`` in image pixels.
        out_size: Output grid ``(width, height)``.
        stride: Image pixels per source cell.

    Returns:
        The resampled region, ``(height, width)`` or ``(C, height, width)``.

    Raises:
        BoundaryError: If the region does not overlap the source at all.
    """
    source = np.asarray(source)
    rows, cols = source.shape[-2:]
    cx, cy = center
    ew, eh = extent
    if (
        cx + ew / 2.0 <= 0
        or cy + eh / 2.0 <= 0
        or cx - ew / 2.0 >= cols * stride
        or cy - eh / 2.0 >= rows * stride
    ):
        raise BoundaryError(f"region at {center} of size {extent} is outside")
    ow, oh = out_size
    sx, sy = ew / ow / stride, eh / oh / stride
    tx = (cx + (0.5 - ow / 2.0) * ew / ow) / stride - 0.5
    ty = (cy + (0.5 - oh / 2.0) * eh / oh) / stride - 0.5
    matrix = np.array([[sx, 0.0, tx], [0.0, sy, ty]], dtype=np.float64)

    def warp(plane: NDArray) -> NDArray[np.float64]:
        return cv2.warpAffine(
            plane.astype(np.float32),
            matrix,
            (int(ow), int(oh)),
            flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
            borderMode=cv2.BORDER_REPLICATE,
        ).astype(np.float64)

    if source.ndim == 2:
        return warp(source)
    return np.stack([warp(plane) for plane in source])


class FeatureSource(ABC):
    """Produces raw (pre-PCA) layer features for a square image region."""

    @abstractmethod
    def sample(
        self,
        frame: NDArray,
        frame_index: int,
        center: tuple[float, float],
        extent: float,
        specs: Sequence[LayerSpec],
        patch_size: int,
    ) -> FeatureStack:
        """Samples features for the region.

        Args:
            frame: The current image.
            frame_index: 0-based index of ``frame`` in its sequence.
            center: Region center ``(x, y)`` in image pixels.
            extent: Region edge in image pixels.
            specs: Layers to produce; layer ``l`` gets a square grid of
                ``patch_size // cell_size`` cells.
            patch_size: Canonical patch edge in pixels.

        Returns:
            The raw feature stack.
        """
        ...


class HandcraftedSource(FeatureSource):
    """Resamples the region to the canonical patch and computes gradients."""

    def __init__(self, orientation_bins: int = DEFAULT_ORIENTATION_BINS):
        """Initializes the source.

        Args:
            orientation_bins: Orientation histogram bins per cell.
        """
        self.orientation_bins = orientation_bins

    def sample(self, frame, frame_index, center, extent, specs, patch_size):
        """See `FeatureSource.sample`."""
        patch = extract_region(
            _as_gray(frame), center, (extent, extent), (patch_size, patch_size)
        )
        return extract_handcrafted(patch, specs, self.orientation_bins)


class ExternalSource(FeatureSource):
    """Reads one full-frame MHFT file per frame, ``<dir>/%04d.mhft`` (1-based).

    Layer ``l`` of a file holds maps at a stride of ``cell_size`` image pixels.
    """

    def __init__(self, directory: Path | str, specs: Sequence[LayerSpec]):
        """Initializes the source.

        Args:
            directory: Directory of per-frame feature files.
            specs: Every layer the files contain, in file order.
        """
        self.directory = Path(directory)
        self.specs = tuple(specs)
        self._lock = threading.Lock()
        self._cached: tuple[int, FeatureStack] | None = None

    def frame_features(self, frame_index: int) -> FeatureStack:
        """Loads (and caches) the full-frame stack of one frame."""
        with self._lock:
            if self._cached is None or self._cached[0] != frame_index:
                path = self.directory / f"{frame_index + 1:04d}.mhft"
                logger.debug("loading external features %s", path)
                self._cached = (frame_index, ingest_external_features(path, self.specs))
            return self._cached[1]

    def sample(self, frame, frame_index, center, extent, specs, patch_size):
        """See `FeatureSource.sample`."""
        full = self.frame_features(frame_index)
        layers = []
        for spec in specs:
            cells = patch_size // spec.cell_size
            layers.append(
                extract_region(
                    full.layer(spec.name),
                    center,
                    (extent, extent),
                    (cells, cells),
                    stride=spec.cell_size,
                )
            )
        return FeatureStack(tuple(specs), tuple(layers))


__all__ = [
    "LayerSpec",
    "FeatureStack",
    "PcaBasis",
    "extract_handcrafted",
    "write_external_features",
    "ingest_external_features",
    "pca_fit",
    "pca_project",
    "pca_reconstruct",
    "apply_window",
    "extract_region",
    "FeatureSource",
    "HandcraftedSource",
    "ExternalSource",
]
