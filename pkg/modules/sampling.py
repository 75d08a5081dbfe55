"""
Cartesian undersampling masks, simulated coil sensitivities and the encoding
operator y_i = M * F(c_i * gamma) with its exact adjoint.

Randomness comes from numpy's PCG64 generator (np.random.default_rng) seeded by
the caller; the written mask file, not the generator, is the reproducibility
contract.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from modules.errors import InputValidationError, check_same_shape
from modules.models import CoilConfig, MaskConfig, build_model
from modules.tensor_core import fft2c, ifft2c

logger = logging.getLogger(__name__)

COIL_NORM_TOLERANCE = 1e-10
ACCELERATION_TOLERANCE = 0.2

# offsets that give the mask, coil and noise streams of one run distinct seeds
MASK_SEED_OFFSET = 10_000
NOISE_SEED_OFFSET = 20_000
COIL_SEED_OFFSET = 30_000


@dataclass(frozen=True)
class SamplingMask:
    """Binary (Nx, Ny, Nt) mask, full along the frequency-encode axis x."""
    mask: np.ndarray
    acceleration: float

    @property
    def shape(self):
        return self.mask.shape

    def lines_per_frame(self) -> np.ndarray:
        return self.mask[0].sum(axis=0)

    def effective_acceleration(self) -> float:
        return float(self.mask.shape[1] / self.lines_per_frame().mean())


@dataclass(frozen=True)
class CoilSet:
    """Coil maps stacked as (m, Nx, Ny), sum of squares one at every pixel."""
    maps: np.ndarray

    def __post_init__(self):
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise InputValidationError("coil maps must be (m, Nx, Ny)", shape=self.maps.shape)
        energy = np.sum(np.abs(self.maps) ** 2, axis=0)
        deviation = float(np.max(np.abs(energy - 1.0)))
        if not deviation <= COIL_NORM_TOLERANCE:
            raise InputValidationError("coil sum of squares must be one at every pixel", deviation=deviation)

    @property
    def count(self) -> int:
        return self.maps.shape[0]

    @property
    def image_shape(self):
        return self.maps.shape[1:]


def line_budget(ny: int, acceleration: float) -> int:
    return int(round(ny / acceleration))


def make_mask(nx: int, ny: int, nt: int, acceleration: float, acs_lines: int = 4,
              seed: int = 0, vary_per_frame: bool = True) -> SamplingMask:
    """Random phase-encode line selection per frame, centred ACS lines always on."""
    config = build_model(MaskConfig, nx=nx, ny=ny, nt=nt, acceleration=acceleration,
                         acs_lines=acs_lines, seed=seed, vary_per_frame=vary_per_frame)
    if config.acceleration == 1.0:
        return SamplingMask(np.ones((nx, ny, nt)), 1.0)

    budget = line_budget(ny, acceleration)
    if budget < acs_lines or budget < 1:
        raise InputValidationError("infeasible line budget", lines=budget, acs_lines=acs_lines)

    start = ny // 2 - acs_lines // 2
    acs = np.arange(start, start + acs_lines)
    candidates = np.setdiff1d(np.arange(ny), acs)
    rng = np.random.default_rng(seed)

    lines = np.zeros((ny, nt), dtype=bool)
    lines[acs, :] = True
    for t in range(nt):
        if t > 0 and not vary_per_frame:
            lines[:, t] = lines[:, 0]
            continue
        chosen = rng.choice(candidates, size=budget - acs_lines, replace=False)
        lines[chosen, t] = True

    mask = np.broadcast_to(lines[np.newaxis, :, :], (nx, ny, nt)).astype(np.float64)
    sampled = SamplingMask(mask, float(acceleration))
    achieved = sampled.effective_acceleration()
    if abs(achieved - acceleration) > ACCELERATION_TOLERANCE * acceleration:
        raise InputValidationError("line budget misses the requested acceleration by more than 20%",
                                   requested=acceleration, achieved=achieved, lines=budget)
    logger.debug(f"mask {mask.shape}: {budget} lines per frame, {acs_lines} ACS")
    return sampled


def make_coils(nx: int, ny: int, m: int = 1, seed: int = 0) -> CoilSet:
    """Smooth complex Gaussian-lobe sensitivities around the field of view."""
    config = build_model(CoilConfig, nx=nx, ny=ny, count=m, seed=seed)
    if config.count == 1:
        return CoilSet(np.ones((1, nx, ny), dtype=np.complex128))

    rng = np.random.default_rng(seed)
    x = (np.arange(nx) - nx // 2) / (nx / 2)
    y = (np.arange(ny) - ny // 2) / (ny / 2)
    gx, gy = np.meshgrid(x, y, indexing="ij")
    maps = []
    for i in range(m):
        angle = 2.0 * np.pi * i / m + rng.uniform(-0.2, 0.2)
        cx, cy = 1.2 * np.cos(angle), 1.2 * np.sin(angle)
        lobe = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * 0.8 ** 2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-1.0, 1.0) * gx + rng.uniform(-1.0, 1.0) * gy
        maps.append(scipy.ndimage.gaussian_filter(lobe, 1.0) * np.exp(1j * phase))
    maps = np.stack(maps)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return CoilSet(maps)


def check_instance(gamma_shape, coils: CoilSet, mask: SamplingMask) -> None:
    check_same_shape("image", gamma_shape, "mask", mask.shape)
    check_same_shape("image frame", tuple(gamma_shape[:2]), "coil map", coils.image_shape)


def encode(gamma: np.ndarray, coils: CoilSet, mask: SamplingMask) -> np.ndarray:
    """Per-coil undersampled k-space, shape (m, Nx, Ny, Nt)."""
    check_instance(gamma.shape, coils, mask)
    weighted = coils.maps[..., np.newaxis] * gamma[np.newaxis]
    return mask.mask[np.newaxis] * fft2c(weighted)


def adjoint_encode(y: np.ndarray, coils: CoilSet, mask: SamplingMask) -> np.ndarray:
    """sum_i conj(c_i) * F^-1(M * y_i)."""
    if y.ndim != 4 or y.shape[0] != coils.count:
        raise InputValidationError("k-space must be (coils, Nx, Ny, Nt)", shape=y.shape, coils=coils.count)
    check_instance(y.shape[1:], coils, mask)
    images = ifft2c(mask.mask[np.newaxis] * y)
    return np.sum(np.conj(coils.maps)[..., np.newaxis] * images, axis=0)


def add_noise(y: np.ndarray, mask: SamplingMask, sigma: float, seed: int) -> np.ndarray:
    """Complex white Gaussian noise of standard deviation sigma on sampled entries."""
    if sigma <= 0:
        return y
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
    return y + mask.mask[np.newaxis] * (sigma / np.sqrt(2.0)) * noise


def undersample(gamma: np.ndarray, coils: CoilSet, mask: SamplingMask,
                noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Simulated acquisition of a reference volume."""
    return add_noise(encode(gamma, coils, mask), mask, noise, seed)


def calibration_region(y: np.ndarray, mask: SamplingMask):
    """Per-coil k-space restricted to the phase-encode lines sampled in every frame.

    Those lines see the full temporal evolution, so a PS volume's null-space
    filter annihilates them as well.
    """
    always = np.all(mask.mask[0] > 0, axis=1)
    if not np.any(always):
        raise InputValidationError("no phase-encode line is sampled in every frame")
    return [coil[:, always, :] for coil in np.asarray(y)]
