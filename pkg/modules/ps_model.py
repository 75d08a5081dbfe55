"""
Partially separable phantoms, Prony filters and null-space calibration.

A PS volume is gamma(r, t) = sum_l c_l(r) * phi_l(t). For exponential temporal
bases phi_l(t) = z_l**t the monic polynomial prod_l (1 - z_l / zeta) annihilates
every pixel trace; for general bases the filter is calibrated from the singular
spectrum of the stacked temporal Hankel lift.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.ndimage
from numpy.lib.stride_tricks import sliding_window_view

from modules.errors import InputValidationError
from modules.hankel_ops import SpatialFilter, TemporalFilter
from modules.models import PhantomConfig

logger = logging.getLogger(__name__)

LEADING_TAP_TOLERANCE = 1e-8


@dataclass(frozen=True)
class PSDecomposition:
    """Spatial maps (L, Nx, Ny) and temporal basis (L, Nt) of a PS volume."""
    spatial_maps: np.ndarray
    temporal_basis: np.ndarray
    roots: Optional[np.ndarray] = None

    def __post_init__(self):
        maps = np.asarray(self.spatial_maps, dtype=np.complex128)
        basis = np.asarray(self.temporal_basis, dtype=np.complex128)
        if maps.ndim != 3 or basis.ndim != 2 or maps.shape[0] != basis.shape[0]:
            raise InputValidationError("PS decomposition needs maps (L, Nx, Ny) and basis (L, Nt)",
                                       maps=maps.shape, basis=basis.shape)
        object.__setattr__(self, "spatial_maps", maps)
        object.__setattr__(self, "temporal_basis", basis)

    @property
    def order(self) -> int:
        return self.temporal_basis.shape[0]


@dataclass
class CalibrationResult:
    """Unit-norm null-space filter plus the singular spectrum it came from."""
    filter: TemporalFilter
    singular_values: np.ndarray
    residual: float
    rows: int = 0


def assemble_phantom(decomp: PSDecomposition) -> np.ndarray:
    """Sum of separable components -> (Nx, Ny, Nt) image volume."""
    return np.einsum("lxy,lt->xyt", decomp.spatial_maps, decomp.temporal_basis)


def exponential_basis(roots: Sequence[complex], nt: int) -> np.ndarray:
    """phi_l(t) = z_l**t for t = 0..nt-1."""
    roots = np.asarray(roots, dtype=np.complex128)
    return roots[:, np.newaxis] ** np.arange(nt)[np.newaxis, :]


def prony_filter(roots: Sequence[complex]) -> TemporalFilter:
    """Monic coefficients of prod_l (1 - z_l / zeta).

    The filter annihilates sum_l a_l z_l**t. Repeated roots are accepted but then
    only annihilate plain exponentials, not polynomial-times-exponential terms.
    """
    roots = np.atleast_1d(np.asarray(roots, dtype=np.complex128))
    if roots.size < 1:
        raise InputValidationError("prony_filter needs at least one root")
    return TemporalFilter(np.poly(roots).astype(np.complex128))


def stacked_hankel(volumes: Sequence[np.ndarray], window: int) -> np.ndarray:
    """Temporal Hankel rows of every pixel of every volume, stacked vertically."""
    blocks = []
    for volume in volumes:
        volume = np.asarray(volume, dtype=np.complex128)
        if window < 1 or window > volume.shape[-1]:
            raise InputValidationError("calibration window must lie in [1, Nt]",
                                       window=window, nt=volume.shape[-1])
        traces = volume.reshape(-1, volume.shape[-1])
        blocks.append(sliding_window_view(traces, window, axis=-1).reshape(-1, window))
    return np.concatenate(blocks, axis=0)


def calibrate_nullspace(training: Sequence[np.ndarray], window: int) -> CalibrationResult:
    """Smallest right singular vector of the stacked Hankel lift, as a filter.

    The Hankel product annihilates with the reversed filter, so the returned
    taps are the reversed conjugated singular vector, scaled to unit norm with a
    real non-negative leading tap.
    """
    if len(training) == 0:
        raise InputValidationError("calibration needs at least one training volume")
    lifted = stacked_hankel(training, window)
    _, singular_values, vh = scipy.linalg.svd(lifted, full_matrices=False, lapack_driver="gesvd")
    null_vector = np.conj(vh[-1])
    taps = null_vector[::-1]
    lead = taps[0]
    if abs(lead) <= LEADING_TAP_TOLERANCE * np.max(np.abs(taps)):
        raise InputValidationError("calibrated filter has a vanishing leading tap; shorten the window",
                                   window=window, lead=float(abs(lead)))
    taps = taps * (np.conj(lead) / abs(lead))
    taps = taps / np.linalg.norm(taps)
    frob = np.linalg.norm(lifted)
    residual = float(np.linalg.norm(lifted @ taps[::-1]) / frob) if frob > 0 else 0.0
    logger.debug(f"calibration spectrum {singular_values} from {lifted.shape[0]} rows")
    return CalibrationResult(
        filter=TemporalFilter(taps),
        singular_values=singular_values,
        residual=residual,
        rows=lifted.shape[0],
    )


def spatial_filter_default() -> SpatialFilter:
    """3x3 discrete Laplacian stencil, unit Euclidean norm, shared by all frames."""
    stencil = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    return SpatialFilter((stencil / np.linalg.norm(stencil))[..., np.newaxis])


def numerical_rank(matrix: np.ndarray, rtol: float = 1e-10) -> int:
    s = scipy.linalg.svdvals(matrix)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s / s[0] > rtol))


def _smooth_field(rng: np.random.Generator, nx: int, ny: int, sigma: float, complex_valued: bool):
    real = scipy.ndimage.gaussian_filter(rng.standard_normal((nx, ny)), sigma, mode="wrap")
    values = real
    if complex_valued:
        imag = scipy.ndimage.gaussian_filter(rng.standard_normal((nx, ny)), sigma, mode="wrap")
        values = real + 1j * imag
    scale = np.abs(values).max()
    return values / scale if scale > 0 else values


def draw_roots(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Distinct temporal roots: a static root, conjugate oscillating pairs, one decay if odd."""
    if config.constant:
        return np.array([1.0 + 0j])
    roots = [1.0 + 0j]
    max_cycles = max(1, config.nt // 4)
    used = set()
    while len(roots) + 1 < config.order:
        cycles = int(rng.integers(1, max_cycles + 1))
        if cycles in used and len(used) < max_cycles:
            continue
        used.add(cycles)
        theta = 2.0 * np.pi * (cycles + rng.uniform(-0.25, 0.25)) / config.nt
        modulus = rng.uniform(config.modulus_min, config.modulus_max)
        z = modulus * np.exp(1j * theta)
        roots.extend([z, np.conj(z)])
    if len(roots) < config.order:
        roots.append(complex(rng.uniform(config.modulus_min, config.modulus_max) * 0.9))
    return np.asarray(roots, dtype=np.complex128)


def beating_ring(config: PhantomConfig) -> PSDecomposition:
    """Annulus whose radius oscillates in time, written as an exact PS model."""
    rng = np.random.default_rng(config.seed)
    nx, ny = config.nx, config.ny
    roots = draw_roots(config, rng)
    x = (np.arange(nx) - nx // 2) / (nx / 2)
    y = (np.arange(ny) - ny // 2) / (ny / 2)
    gx, gy = np.meshgrid(x, y, indexing="ij")
    radius = np.hypot(gx, gy)
    centre, width = 0.5, 0.12
    offset = (radius - centre) / width
    ring = np.exp(-offset ** 2)
    # d ring / d centre: a small radius change is a multiple of this map
    ring_edge = 2.0 * offset / width * ring * 0.05
    sigma = max(nx, ny) / 8.0

    maps = []
    k = 0
    while k < roots.size:
        z = roots[k]
        if k == 0:
            maps.append(ring * (0.75 + 0.25 * _smooth_field(rng, nx, ny, sigma, False)))
            k += 1
        elif abs(z.imag) > 0 and k + 1 < roots.size and np.isclose(roots[k + 1], np.conj(z)):
            amplitude = 0.5 * ring_edge * (1.0 + 0.5 * _smooth_field(rng, nx, ny, sigma, True))
            maps.extend([amplitude, np.conj(amplitude)])
            k += 2
        else:
            maps.append(0.2 * ring * _smooth_field(rng, nx, ny, sigma, False))
            k += 1
    return PSDecomposition(np.stack(maps), exponential_basis(roots, config.nt), roots)


def generate_phantom(config: PhantomConfig):
    """Seeded phantom volume plus its decomposition; noise is added after assembly."""
    decomp = beating_ring(config)
    volume = assemble_phantom(decomp)
    if config.noise > 0:
        rng = np.random.default_rng([config.seed, 1])
        noise = rng.standard_normal(volume.shape) + 1j * rng.standard_normal(volume.shape)
        volume = volume + config.noise / np.sqrt(2.0) * noise
    logger.info(f"🧪 Phantom {volume.shape} of order {decomp.order} (seed {config.seed})")
    return volume, decomp
