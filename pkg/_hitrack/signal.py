"""Fourier transforms, cyclic correlation and window/label constructors.

Maps are numpy arrays indexed ``[row, column]`` (``[y, x]``); every point or
size argument in this package is given as ``(x, y)`` / ``(width, height)``.
Transforms act on the last two axes, so a ``(channels, height, width)`` stack
is transformed channel by channel.

Correlation convention::

    cyclic_correlate(a, b)[s] = sum_t a[(t + s) mod N] * b[t]
                              = idft2(dft2(a) * conj(dft2(b)))

so ``cyclic_correlate(a, impulse) == a`` and cyclically shifting ``a`` by
``(u, v)`` shifts the output by ``(u, v)``. The DFT is unnormalized; the
``1 / (W * H)`` factor lives on the inverse.
"""

import numpy as np
from numpy.typing import NDArray
from scipy.signal import resample
from scipy.signal.windows import hann

from _hitrack.errors import DimensionError, ParameterError, SymmetryError

type SpatialMap = NDArray[np.float64]
type SpectrumMap = NDArray[np.complex128]

REAL_RESIDUE_TOL = 1e-8


def _check_planar(values: NDArray, what: str) -> None:
    if values.ndim < 2:
        raise DimensionError(f"{what} must be at least 2-D, got shape {values.shape}")
    if values.shape[-1] == 0 or values.shape[-2] == 0:
        raise DimensionError(f"{what} is empty, shape {values.shape}")


def dft2(values: SpatialMap) -> SpectrumMap:
    """Unnormalized 2-D DFT over the last two axes.

    Args:
        values: A real (or complex) map, or a stack of maps.

    Returns:
        The complex spectrum, same shape as the input.

    Raises:
        DimensionError: If the map has fewer than two axes or is empty.
    """
    values = np.asarray(values)
    _check_planar(values, "map")
    return np.fft.fft2(values, axes=(-2, -1))


def idft2(spectrum: SpectrumMap, real: bool = True) -> NDArray:
    """Inverse 2-D DFT over the last two axes with ``1 / (W * H)`` scaling.

    Args:
        spectrum: The spectrum (or stack of spectra) to invert.
        real: Demand a real result. The imaginary residue is dropped when it is
            below ``1e-8`` relative to the result's magnitude.

    Returns:
        A real map when ``real`` is set, the complex inverse otherwise.

    Raises:
        DimensionError: If the spectrum has fewer than two axes or is empty.
        SymmetryError: If a real result is demanded from a spectrum that is
            not conjugate-symmetric.
    """
    spectrum = np.asarray(spectrum)
    _check_planar(spectrum, "spectrum")
    out = np.fft.ifft2(spectrum, axes=(-2, -1))
    if not real:
        return out
    scale = max(1.0, float(np.max(np.abs(out.real))))
    residue = float(np.max(np.abs(out.imag)))
    if not residue <= REAL_RESIDUE_TOL * scale:
        raise SymmetryError(
            f"spectrum is not conjugate-symmetric (imaginary residue {residue:.3g})"
        )
    return out.real.copy()


def hermitian_part(spectrum: SpectrumMap) -> SpectrumMap:
    """Projects a spectrum onto the spectra of real maps.

    Returns ``(S[k] + conj(S[-k])) / 2`` over the last two axes, which is
    conjugate-symmetric bit for bit and inverts to the real part of the
    original map.
    """
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    _check_planar(spectrum, "spectrum")
    mirrored = np.roll(np.flip(spectrum, axis=(-2, -1)), 1, axis=(-2, -1))
    return (spectrum + np.conj(mirrored)) / 2.0


def cyclic_correlate(a: SpatialMap, b: SpatialMap) -> SpatialMap:
    """Cyclic cross-correlation ``sum_t a[t + s] * b[t]``.

    Args:
        a: First map.
        b: Second map, same shape as ``a``.

    Returns:
        The correlation surface, indexed by the shift ``s``.

    Raises:
        DimensionError: If the maps differ in shape.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot correlate {a.shape} with {b.shape}")
    return idft2(dft2(a) * np.conj(dft2(b)))


def cyclic_shift(values: NDArray, shift: tuple[int, int]) -> NDArray:
    """Cyclically translate a map (or stack) by ``(dx, dy)`` cells."""
    dx, dy = shift
    return np.roll(values, (dy, dx), axis=(-2, -1))


def _wrapped_offsets(n: int, c: float) -> NDArray[np.float64]:
    return np.mod(np.arange(n) - c + n / 2.0, n) - n / 2.0


def gaussian_label(
    width: int, height: int, center: tuple[float, float], sigma: float
) -> SpatialMap:
    """Gaussian response label using cyclic (wrap-around) distances.

    Args:
        width: Label width in cells.
        height: Label height in cells.
        center: Peak position ``(x, y)`` in cell coordinates, subcell allowed.
        sigma: Standard deviation in cells.

    Returns:
        A ``(height, width)`` map whose maximum, 1, sits at the cell nearest
        to ``center``.

    Raises:
        ParameterError: If ``sigma`` is not positive, the size is not
            positive or the center lies outside the grid.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if width < 1 or height < 1:
        raise ParameterError(f"label size must be positive, got {width}x{height}")
    cx, cy = center
    if not (0 <= cx < width and 0 <= cy < height):
        raise ParameterError(f"center {center} outside {width}x{height} grid")
    dx = _wrapped_offsets(width, cx)
    dy = _wrapped_offsets(height, cy)
    label = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma**2))
    return label / label.max()


def cosine_window(width: int, height: int) -> SpatialMap:
    """Separable Hann window, zero on the borders.

    A side of length 1 contributes a flat factor, so ``cosine_window(5, 1)``
    is the plain 1-D profile ``[0, 0.5, 1, 0.5, 0]``.

    Raises:
        ParameterError: If a side is below 1 or both sides are below 2.
    """
    if width < 1 or height < 1 or max(width, height) < 2:
        raise ParameterError(f"window must be at least 2 cells, got {width}x{height}")
    return np.outer(hann(height, sym=True), hann(width, sym=True))


def fourier_resample(values: SpatialMap, size: tuple[int, int]) -> SpatialMap:
    """Trigonometric interpolation of a periodic map onto a finer grid.

    Sample ``i`` of an ``n``-cell axis sits at the normalized position
    ``i / n`` both before and after resampling.

    Args:
        values: The map to resample.
        size: Target ``(width, height)``.

    Returns:
        The resampled map; an unchanged copy when the size already matches.
    """
    values = np.asarray(values, dtype=np.float64)
    width, height = size
    out = values
    if height != values.shape[0]:
        out = resample(out, height, axis=0)
    if width != values.shape[1]:
        out = resample(out, width, axis=1)
    return np.array(out, dtype=np.float64, copy=True)


__all__ = [
    "SpatialMap",
    "SpectrumMap",
    "dft2",
    "idft2",
    "hermitian_part",
    "cyclic_correlate",
    "cyclic_shift",
    "gaussian_label",
    "cosine_window",
    "fourier_resample",
]
