"""
Complex volume container and per-frame centered orthonormal Fourier transforms.

Volumes are numpy arrays laid out as (Nx, Ny, Nt); coil stacks and gradient
channels prepend one leading axis. All transforms act on the two spatial axes
(-3, -2) so the same helpers serve single volumes and stacks.
"""
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import scipy.fft

from modules.errors import InputValidationError, NumericalError

SPATIAL_AXES = (-3, -2)


class Domain(IntEnum):
    """Domain tag of a stored volume (values are the PSNT tag bytes)."""
    IMAGE = 0
    KSPACE = 1
    MASK = 2
    MAP = 3


@dataclass(frozen=True)
class ComplexVolume:
    """A complex Nx x Ny x Nt array tagged with its domain."""
    data: np.ndarray
    domain: Domain = Domain.IMAGE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InputValidationError("volume must be 3-D with every dim >= 1", shape=data.shape)
        if not np.all(np.isfinite(data)):
            raise NumericalError("volume contains non-finite entries")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.complex128))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class GradientWeights:
    """Angular frequency grids of the centered spectrum, radians per pixel."""
    wx: np.ndarray
    wy: np.ndarray

    @property
    def magnitude_squared(self) -> np.ndarray:
        return self.wx ** 2 + self.wy ** 2


def fft2c(array: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D DFT over the two spatial axes."""
    tmp = scipy.fft.ifftshift(array, axes=SPATIAL_AXES)
    tmp = scipy.fft.fft2(tmp, axes=SPATIAL_AXES, norm="ortho")
    return scipy.fft.fftshift(tmp, axes=SPATIAL_AXES)


def ifft2c(array: np.ndarray) -> np.ndarray:
    """Inverse of fft2c (also its adjoint)."""
    tmp = scipy.fft.ifftshift(array, axes=SPATIAL_AXES)
    tmp = scipy.fft.ifft2(tmp, axes=SPATIAL_AXES, norm="ortho")
    return scipy.fft.fftshift(tmp, axes=SPATIAL_AXES)


def fft2(volume: ComplexVolume) -> ComplexVolume:
    """Per-frame centered orthonormal 2D Fourier transform of an image volume."""
    if volume.domain != Domain.IMAGE:
        raise InputValidationError("fft2 expects an image-domain volume", domain=volume.domain.name)
    return ComplexVolume(fft2c(volume.data), Domain.KSPACE)


def ifft2(volume: ComplexVolume) -> ComplexVolume:
    """Per-frame centered orthonormal inverse 2D Fourier transform of k-space."""
    if volume.domain != Domain.KSPACE:
        raise InputValidationError("ifft2 expects a k-space volume", domain=volume.domain.name)
    return ComplexVolume(ifft2c(volume.data), Domain.IMAGE)


def centered_frequencies(n: int) -> np.ndarray:
    """Integer frequency index of each bin of a centered length-n spectrum."""
    return scipy.fft.fftshift(scipy.fft.fftfreq(n, d=1.0 / n))


def gradient_weights(nx: int, ny: int) -> GradientWeights:
    """Fourier symbols w of the periodic x/y derivatives on the centered grid."""
    if nx < 1 or ny < 1:
        raise InputValidationError("gradient grid needs nx, ny >= 1", nx=nx, ny=ny)
    wx = 2.0 * np.pi * centered_frequencies(nx) / nx
    wy = 2.0 * np.pi * centered_frequencies(ny) / ny
    grid_x, grid_y = np.meshgrid(wx, wy, indexing="ij")
    return GradientWeights(wx=grid_x, wy=grid_y)


def gradient_channels(kspace: np.ndarray, weights: GradientWeights) -> np.ndarray:
    """Stack (i*wx*k, i*wy*k) for a (Nx, Ny, Nt) k-space array -> (2, Nx, Ny, Nt)."""
    wx = weights.wx[..., np.newaxis]
    wy = weights.wy[..., np.newaxis]
    return np.stack([1j * wx * kspace, 1j * wy * kspace])


def gradient_channels_adjoint(channels: np.ndarray, weights: GradientWeights) -> np.ndarray:
    """Adjoint of gradient_channels: conj(i*wx)*Ux + conj(i*wy)*Uy."""
    wx = weights.wx[..., np.newaxis]
    wy = weights.wy[..., np.newaxis]
    return -1j * wx * channels[0] - 1j * wy * channels[1]


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(a, b))
