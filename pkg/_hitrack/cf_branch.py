import logging
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from _hitrack.errors import (
    DimensionError,
    DivergenceError,
    ParameterError,
    SingularityError,
    StateError,
)
from _hitrack.features import FeatureStack, LayerSpec
from _hitrack.signal import SpatialMap, dft2, hermitian_part, idft2

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 0.012
DEFAULT_CG_TOL = 1e-6


class CgFormula(StrEnum):
    """Momentum coefficient used between conjugate-gradient steps."""

    FLETCHER_REEVES = "fletcher_reeves"
    POLAK_RIBIERE = "polak_ribiere"


@dataclass(frozen=True)
class BranchModel:
    """One layer's filter bank, held in the Fourier domain.

    Attributes:
        layer: The layer this branch learns on.
        filters: ``(D, H, W)`` spectra ``F(f_d)``.
        reg_window: ``(H, W)`` strictly positive spatial penalty ``w``.
        label: ``(H, W)`` Gaussian label ``y``.
        lam: Regularization weight.
    """

    layer: LayerSpec
    filters: NDArray[np.complex128]
    reg_window: SpatialMap
    label: SpatialMap
    lam: float

    def __post_init__(self):
        if self.filters.ndim != 3:
            raise DimensionError("filters must be (D, H, W)")
        if self.filters.shape[1:] != self.label.shape:
            raise DimensionError(
                f"filters {self.filters.shape[1:]} vs label {self.label.shape}"
            )
        if self.reg_window.shape != self.label.shape:
            raise DimensionError(
                f"reg window {self.reg_window.shape} vs label {self.label.shape}"
            )
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not np.all(self.reg_window > 0):
            raise ParameterError("reg window must be strictly positive")

    def with_filters(self, filters: NDArray[np.complex128]) -> "BranchModel":
        """Returns a copy of this model carrying new filters."""
        return replace(self, filters=filters)


@dataclass(frozen=True)
class MemoryEntry:
    """A stored training sample (per-layer spectra) and its weight."""

    sample: FeatureStack
    weight: float


@dataclass(frozen=True)
class SampleMemory:
    """Weighted training samples shared by every branch.

    Samples are stored as the spectra of the windowed layer features.
    """

    capacity: int
    entries: tuple[MemoryEntry, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError(f"capacity must be >= 1, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def weights(self) -> NDArray[np.float64]:
        """Entry weights, in insertion order."""
        return np.array([e.weight for e in self.entries], dtype=np.float64)

    def layer_samples(self, name: str) -> tuple[NDArray[np.complex128], NDArray]:
        """Stacks one layer's spectra as ``(K, D, H, W)`` along with the weights."""
        if not self.entries:
            raise StateError("sample memory is empty")
        return np.stack([e.sample.layer(name) for e in self.entries]), self.weights


@dataclass(frozen=True)
class NormalEqSystem:
    """Fourier-domain normal equations of one branch.

    Applies ``f -> (sum_k w_k X_k^H X_k + lam * F diag(w^2) F^-1) f``, where
    ``X_k f = sum_d conj(X_kd) f_d`` per frequency, without forming a matrix.

    Attributes:
        samples: ``(K, D, H, W)`` sample spectra.
        sample_weights: ``(K,)`` memory weights.
        reg_sq: ``(H, W)`` squared penalty window.
        lam: Regularization weight.
        rhs: ``(D, H, W)`` right-hand side ``sum_k w_k X_k^H conj(F(y))``.
    """

    samples: NDArray[np.complex128]
    sample_weights: NDArray[np.float64]
    reg_sq: SpatialMap
    lam: float
    rhs: NDArray[np.complex128]

    def apply(self, f: NDArray[np.complex128]) -> NDArray[np.complex128]:
        """Applies the system operator to a filter bank."""
        responses = np.einsum("kdhw,dhw->khw", np.conj(self.samples), f)
        data = np.einsum(
            "k,kdhw,khw->dhw", self.sample_weights, self.samples, responses
        )
        spatial = np.fft.ifft2(f, axes=(-2, -1)) * self.reg_sq
        return data + self.lam * np.fft.fft2(spatial, axes=(-2, -1))

    def diagonal(self) -> NDArray[np.float64]:
        """Diagonal of the operator in the Fourier basis (the preconditioner)."""
        energy = np.einsum(
            "k,kdhw->dhw", self.sample_weights, np.abs(self.samples) ** 2
        )
        return energy + self.lam * float(np.mean(self.reg_sq))


@dataclass(frozen=True)
class CgResult:
    """Outcome of one conjugate-gradient solve.

    Attributes:
        filters: The solution estimate.
        residuals: Relative residual norm before each step and after the last.
        energies: Quadratic energy at the same points; never increases.
        iterations: Steps taken.
        converged: Whether the tolerance was reached.
    """

    filters: NDArray[np.complex128]
    residuals: tuple[float, ...]
    energies: tuple[float, ...]
    iterations: int
    converged: bool


def _dot(a: NDArray, b: NDArray) -> float:
    return float(np.vdot(a, b).real)


def reg_window(
    grid: tuple[int, int],
    target_cells: tuple[float, float],
    reg_min: float = 1e-3,
    reg_edge: float = 1.0,
    reg_max: float = 1e5,
) -> SpatialMap:
    """Quadratic spatial penalty on the filter, lowest at the origin.

    ``w = reg_min + (reg_edge - reg_min) * ((2 dx / tw)^2 + (2 dy / th)^2)``,
    clipped to ``[reg_min, reg_max]``, with ``(dx, dy)`` the cyclic offset from
    cell ``(0, 0)``; ``w == reg_edge`` on the target's edge. Under the `detect`
    convention a target centered on the label center ``grid / 2`` is matched
    by a filter centered on the origin, so that is where the penalty is low.

    Args:
        grid: ``(width, height)`` in cells.
        target_cells: Target ``(width, height)`` in cells.
        reg_min: Penalty at the origin.
        reg_edge: Penalty on the target boundary.
        reg_max: Upper clip.
    """
    if not 0 < reg_min <= reg_edge <= reg_max:
        raise ParameterError("need 0 < reg_min <= reg_edge <= reg_max")
    width, height = grid
    tw, th = target_cells
    if not (tw > 0 and th > 0):
        raise ParameterError(f"target size must be positive, got {target_cells}")
    dx = np.fft.fftfreq(width, 1.0 / width) * 2.0 / tw
    dy = np.fft.fftfreq(height, 1.0 / height) * 2.0 / th
    profile = dy[:, None] ** 2 + dx[None, :] ** 2
    return np.clip(reg_min + (reg_edge - reg_min) * profile, reg_min, reg_max)


def new_branch(
    layer: LayerSpec,
    label: SpatialMap,
    window: SpatialMap,
    lam: float,
    channels: int,
) -> BranchModel:
    """A branch with all-zero filters."""
    filters = np.zeros((channels,) + label.shape, dtype=np.complex128)
    return BranchModel(layer, filters, window, label, lam)


def closed_form_single(x: SpatialMap, y: SpatialMap, lam: float) -> SpatialMap:
    """Dual coefficients ``alpha = F^-1(F(y) / (F(phi(x, x)) + lam))``.

    ``phi(x, x)`` is the cyclic autocorrelation, whose spectrum is ``|F(x)|^2``.

    Raises:
        DimensionError: If ``x`` and ``y`` differ in shape.
        ParameterError: If ``lam`` is negative.
        SingularityError: If a denominator bin is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"sample {x.shape} vs label {y.shape}")
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    denominator = np.abs(dft2(x)) ** 2 + lam
    if np.any(denominator <= 1e-14 * max(1.0, float(denominator.max()))):
        raise SingularityError("autocorrelation spectrum has a zero bin")
    return idft2(dft2(y) / denominator)


def filters_from_dual(x: SpatialMap, alpha: SpatialMap) -> NDArray[np.complex128]:
    """Primal single-channel filter bank ``F(f) = F(x) * conj(F(alpha))``."""
    return hermitian_part(dft2(x) * np.conj(dft2(alpha)))[None, :, :]


def detect(z: NDArray[np.float64], model: BranchModel) -> SpatialMap:
    """Score map ``F^-1(sum_d conj(F(f_d)) * F(z_d))``.

    Equals ``sum_d cyclic_correlate(z_d, f_d)``, so a target moving by
    ``(u, v)`` cells moves the peak by ``(u, v)``.

    Raises:
        DimensionError: If ``z`` does not match the filter bank.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != model.filters.shape:
        raise DimensionError(f"features {z.shape} vs filters {model.filters.shape}")
    return idft2(np.sum(np.conj(model.filters) * dft2(z), axis=0))


def branch_objective(model: BranchModel, memory: SampleMemory) -> float:
    """``sum_k w_k ||sum_d x_kd * f_d - y||^2 + lam * sum_d ||w . f_d||^2``."""
    spectra, weights = memory.layer_samples(model.layer.name)
    if spectra.shape[1:] != model.filters.shape:
        raise DimensionError(
            f"samples {spectra.shape[1:]} vs filters {model.filters.shape}"
        )
    predictions = idft2(np.einsum("kdhw,dhw->khw", spectra, np.conj(model.filters)))
    data = np.sum((predictions - model.label[None]) ** 2, axis=(1, 2))
    spatial = idft2(model.filters)
    penalty = np.sum((model.reg_window[None] * spatial) ** 2)
    return float(weights @ data + model.lam * penalty)


def build_normal_equations(memory: SampleMemory, model: BranchModel) -> NormalEqSystem:
    """Assembles the branch's normal equations over the weighted memory.

    Raises:
        StateError: If the memory is empty.
        ParameterError: If the model's lambda is not positive.
        DimensionError: If stored samples do not match the filters.
    """
    if not len(memory):
        raise StateError("cannot train on an empty sample memory")
    if not model.lam > 0:
        raise ParameterError("normal equations need lambda > 0")
    spectra, weights = memory.layer_samples(model.layer.name)
    if spectra.shape[1:] != model.filters.shape:
        raise DimensionError(
            f"samples {spectra.shape[1:]} vs filters {model.filters.shape}"
        )
    label_hat = np.conj(dft2(model.label))
    rhs = hermitian_part(np.einsum("k,kdhw->dhw", weights, spectra) * label_hat[None])
    return NormalEqSystem(spectra, weights, model.reg_window**2, model.lam, rhs)


def solve_cg(
    system: NormalEqSystem,
    init: NDArray[np.complex128],
    max_iters: int,
    formula: CgFormula | str = CgFormula.FLETCHER_REEVES,
    tol: float = DEFAULT_CG_TOL,
) -> CgResult:
    """Preconditioned conjugate gradient, warm-started from ``init``.

    Each step uses the exact line search ``<r, p> / <p, Ap>``, so the quadratic
    energy never increases whichever momentum formula is chosen. Polak-Ribiere
    momentum is clipped at zero.

    Args:
        system: The normal equations.
        init: Starting filters, usually the previous solution.
        max_iters: Iteration budget.
        formula: Momentum formula.
        tol: Stop once ``||r|| / ||b||`` drops below this.

    Returns:
        The solution, projected onto the spectra of real filters, and its
        convergence history.

    Raises:
        ParameterError: If ``max_iters`` < 1 or ``init`` has the wrong shape.
        DivergenceError: If the residual becomes non-finite.
    """
    formula = CgFormula(formula)
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")
    if init.shape != system.rhs.shape:
        raise ParameterError(f"init {init.shape} vs system {system.rhs.shape}")
    b = system.rhs
    b_norm = float(np.linalg.norm(b)) or 1.0
    precond = system.diagonal()

    x = np.array(init, dtype=np.complex128, copy=True)
    r = b - system.apply(x)

    def energy() -> float:
        return -0.5 * (_dot(b, x) + _dot(r, x))

    residuals = [float(np.linalg.norm(r)) / b_norm]
    energies = [energy()]
    if residuals[0] < tol:
        return CgResult(hermitian_part(x), tuple(residuals), tuple(energies), 0, True)

    z = r / precond
    p = z.copy()
    rz = _dot(r, z)
    iterations, converged = 0, False
    for iterations in range(1, max_iters + 1):
        ap = system.apply(p)
        curvature = _dot(p, ap)
        if not np.isfinite(curvature):
            raise DivergenceError("non-finite curvature", iterations)
        if curvature <= 0:
            break
        step = _dot(r, p) / curvature
        x += step * p
        r -= step * ap
        if not np.all(np.isfinite(r)):
            raise DivergenceError("non-finite residual", iterations)
        residuals.append(float(np.linalg.norm(r)) / b_norm)
        energies.append(energy())
        if residuals[-1] < tol:
            converged = True
            break
        z_next = r / precond
        rz_next = _dot(r, z_next)
        if formula is CgFormula.FLETCHER_REEVES:
            beta = rz_next / rz
        else:
            beta = max(0.0, _dot(r, z_next - z) / rz)
        p = z_next + beta * p
        z, rz = z_next, rz_next
    logger.debug(
        "cg %s: %d iterations, residual %.3g", formula.value, iterations, residuals[-1]
    )
    filters = hermitian_part(x)
    return CgResult(filters, tuple(residuals), tuple(energies), iterations, converged)


def train_branch(
    model: BranchModel,
    memory: SampleMemory,
    max_iters: int,
    formula: CgFormula | str = CgFormula.FLETCHER_REEVES,
    tol: float = DEFAULT_CG_TOL,
) -> tuple[BranchModel, CgResult]:
    """Rebuilds the normal equations and warm-starts CG from the current filters."""
    system = build_normal_equations(memory, model)
    result = solve_cg(system, model.filters, max_iters, formula, tol)
    return model.with_filters(result.filters), result


def memory_insert(
    memory: SampleMemory, sample: FeatureStack, learning_rate: float
) -> SampleMemory:
    """Adds a sample with weight ``learning_rate``, decaying the others.

    Existing weights are scaled by ``1 - learning_rate``. Over capacity, the two
    lightest entries merge into their weighted average (kept at the older
    position). Weights are renormalized to sum to one.

    Raises:
        ParameterError: If ``learning_rate`` is outside ``(0, 1)``.
        DimensionError: If the sample's layers differ from the stored ones.
    """
    if not 0 < learning_rate < 1:
        raise ParameterError(f"learning rate must be in (0, 1), got {learning_rate}")
    if not memory.entries:
        return replace(memory, entries=(MemoryEntry(sample, 1.0),))
    reference = memory.entries[0].sample
    if reference.specs != sample.specs or any(
        a.shape != b.shape for a, b in zip(reference.channels, sample.channels)
    ):
        raise DimensionError("sample layers do not match the memory")

    entries = [
        replace(e, weight=e.weight * (1.0 - learning_rate)) for e in memory.entries
    ]
    entries.append(MemoryEntry(sample, learning_rate))
    if len(entries) > memory.capacity:
        weights = np.array([e.weight for e in entries])
        first, second = sorted(np.argsort(weights, kind="stable")[:2])
        a, b = entries[first], entries[second]
        total = a.weight + b.weight
        merged = a.sample.replace(
            (a.weight * xa + b.weight * xb) / total
            for xa, xb in zip(a.sample.channels, b.sample.channels)
        )
        entries[first] = MemoryEntry(merged, total)
        del entries[second]
    total = sum(e.weight for e in entries)
    return replace(
        memory, entries=tuple(replace(e, weight=e.weight / total) for e in entries)
    )


def spectra_of(stack: FeatureStack) -> FeatureStack:
    """Per-layer spectra of a spatial feature stack, ready for the memory."""
    return stack.replace(dft2(maps) for maps in stack.channels)


__all__ = [
    "CgFormula",
    "BranchModel",
    "MemoryEntry",
    "SampleMemory",
    "NormalEqSystem",
    "CgResult",
    "reg_window",
    "new_branch",
    "closed_form_single",
    "filters_from_dual",
    "detect",
    "branch_objective",
    "build_normal_equations",
    "solve_cg",
    "train_branch",
    "memory_insert",
    "spectra_of",
]
