"""
Hankel lifting, annihilating-filter convolutions and their Gram operators.

Annihilation is valid-mode convolution: for a temporal filter h of order L the
residual at output index n is sum_k h[k] * s[n + L - k], which equals the Hankel
lift of s times the reversed filter. Adjoints zero-pad, so <A v, u> = <v, A^H u>
holds exactly.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal

from modules.errors import InputValidationError


@dataclass(frozen=True)
class TemporalFilter:
    """Null-space filter along time, taps of length L+1."""
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128).ravel()
        if taps.size < 2:
            raise InputValidationError("temporal filter needs at least 2 taps", taps=taps.size)
        if taps[0] == 0:
            raise InputValidationError("temporal filter leading tap must be nonzero")
        object.__setattr__(self, "taps", taps)

    @property
    def order(self) -> int:
        return self.taps.size - 1

    def normalized(self) -> "TemporalFilter":
        return TemporalFilter(self.taps / np.linalg.norm(self.taps))


@dataclass(frozen=True)
class SpatialFilter:
    """Bank of 2-D filters, taps shaped (kx_len, ky_len, frames).

    A bank with a single frame is shared by every frame of the volume.
    """
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.complex128)
        if taps.ndim == 2:
            taps = taps[..., np.newaxis]
        if taps.ndim != 3 or min(taps.shape) < 1:
            raise InputValidationError("spatial filter bank must be (kx, ky, frames)", shape=taps.shape)
        if not np.any(taps):
            raise InputValidationError("spatial filter needs at least one nonzero tap")
        object.__setattr__(self, "taps", taps)

    @property
    def kernel_shape(self):
        return self.taps.shape[:2]

    @property
    def frames(self) -> int:
        return self.taps.shape[2]

    def for_frame(self, frame: int) -> np.ndarray:
        return self.taps[:, :, 0 if self.frames == 1 else frame]


def hankel_temporal(series: np.ndarray, window: int) -> np.ndarray:
    """(Nt - window + 1) x window matrix with entry [r, c] = series[r + c]."""
    series = np.asarray(series).ravel()
    if window < 1 or window > series.size:
        raise InputValidationError("Hankel window must lie in [1, Nt]", window=window, nt=series.size)
    rows = series.size - window + 1
    return scipy.linalg.hankel(series[:rows], series[rows - 1:])


def _check_temporal(shape, h: TemporalFilter):
    if h.taps.size > shape[-1]:
        raise InputValidationError("temporal filter longer than the series",
                                   taps=h.taps.size, nt=shape[-1])


def annihilate_temporal(array: np.ndarray, h: TemporalFilter) -> np.ndarray:
    """Valid-mode convolution along the last axis of any (..., Nt) array."""
    _check_temporal(array.shape, h)
    kernel = h.taps.reshape((1,) * (array.ndim - 1) + (-1,))
    return scipy.signal.convolve(array, kernel, mode="valid", method="direct")


def annihilate_temporal_adjoint(residual: np.ndarray, h: TemporalFilter) -> np.ndarray:
    """Adjoint of annihilate_temporal: full convolution with the conjugated reversed filter."""
    kernel = np.conj(h.taps[::-1]).reshape((1,) * (residual.ndim - 1) + (-1,))
    return scipy.signal.convolve(residual, kernel, mode="full", method="direct")


def apply_annihilation_temporal(volume: np.ndarray, h: TemporalFilter) -> np.ndarray:
    """Per-pixel temporal annihilation residual, shape (Nx, Ny, Nt - L)."""
    return annihilate_temporal(np.asarray(volume, dtype=np.complex128), h)


def gram_apply_temporal(volume: np.ndarray, h: TemporalFilter) -> np.ndarray:
    """H^H H applied per pixel; same shape as the input."""
    return annihilate_temporal_adjoint(annihilate_temporal(volume, h), h)


def _check_spatial(frame_shape, kernel_shape):
    if kernel_shape[0] > frame_shape[0] or kernel_shape[1] > frame_shape[1]:
        raise InputValidationError("spatial filter larger than the frame",
                                   kernel=tuple(kernel_shape), frame=tuple(frame_shape))


def apply_annihilation_spatial(volume: np.ndarray, h: SpatialFilter, frame: int) -> np.ndarray:
    """Valid-mode 2-D convolution of one frame with its filter."""
    volume = np.asarray(volume)
    if not 0 <= frame < volume.shape[-1]:
        raise InputValidationError("frame index out of range", frame=frame, nt=volume.shape[-1])
    kernel = h.for_frame(frame)
    _check_spatial(volume.shape[:2], kernel.shape)
    return scipy.signal.convolve2d(volume[:, :, frame], kernel, mode="valid")


def annihilate_spatial_adjoint(residual: np.ndarray, h: SpatialFilter, frame: int) -> np.ndarray:
    """Adjoint of apply_annihilation_spatial for one frame."""
    kernel = np.conj(h.for_frame(frame)[::-1, ::-1])
    return scipy.signal.convolve2d(residual, kernel, mode="full")


def _check_bank(nt: int, h: SpatialFilter):
    if h.frames not in (1, nt):
        raise InputValidationError("spatial filter bank frame count mismatch", frames=h.frames, nt=nt)


def _convolve_frames(volume: np.ndarray, h: SpatialFilter, mode: str, adjoint: bool) -> np.ndarray:
    """2-D convolution of every (Nx, Ny) frame of a (..., Nx, Ny, Nt) array."""
    taps = np.conj(h.taps[::-1, ::-1]) if adjoint else h.taps
    lead = (1,) * (volume.ndim - 3)
    if h.frames == 1:
        return scipy.signal.convolve(volume, taps.reshape(lead + taps.shape), mode=mode, method="direct")
    frames = [scipy.signal.convolve(volume[..., t], taps[:, :, t].reshape(lead + taps.shape[:2]),
                                    mode=mode, method="direct")
              for t in range(volume.shape[-1])]
    return np.stack(frames, axis=-1)


def annihilate_spatial_volume(volume: np.ndarray, h: SpatialFilter) -> np.ndarray:
    """Valid-mode spatial annihilation of every frame and channel at once."""
    volume = np.asarray(volume, dtype=np.complex128)
    _check_spatial(volume.shape[-3:-1], h.kernel_shape)
    _check_bank(volume.shape[-1], h)
    return _convolve_frames(volume, h, "valid", adjoint=False)


def annihilate_spatial_volume_adjoint(residual: np.ndarray, h: SpatialFilter) -> np.ndarray:
    return _convolve_frames(np.asarray(residual, dtype=np.complex128), h, "full", adjoint=True)


def gram_apply_spatial(volume: np.ndarray, h: SpatialFilter) -> np.ndarray:
    """Frame-wise H^H H for a (..., Nx, Ny, Nt) array (leading axes are channels)."""
    return annihilate_spatial_volume_adjoint(annihilate_spatial_volume(volume, h), h)


def spatial_residual_energy(volume: np.ndarray, h: SpatialFilter) -> float:
    """sum over channels and frames of ||H(v_t) h_t||^2."""
    return float(np.sum(np.abs(annihilate_spatial_volume(volume, h)) ** 2))
