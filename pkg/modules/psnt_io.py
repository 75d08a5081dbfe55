"""
Binary containers: PSNT volumes and PSNP learned-parameter files.

PSNT layout: b"PSNT", u16 version, u8 domain tag, u8 element type, three u64
dims, then the row-major little-endian payload (complex entries as two f64).
"""
import logging
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from modules.errors import FileFormatError, InputValidationError
from modules.hankel_ops import SpatialFilter, TemporalFilter
from modules.sampling import CoilSet, SamplingMask
from modules.tensor_core import Domain

logger = logging.getLogger(__name__)

PSNT_MAGIC = b"PSNT"
PSNP_MAGIC = b"PSNP"
FORMAT_VERSION = 1

ELEMENT_COMPLEX = 0
ELEMENT_REAL = 1

_HEADER = struct.Struct("<4sHBB3Q")
_PARAMS_HEADER = struct.Struct("<4sH6Q")
_DTYPES = {ELEMENT_COMPLEX: np.dtype("<c16"), ELEMENT_REAL: np.dtype("<f8")}

PathLike = Union[str, Path]


def encode_volume(array: np.ndarray, domain: Domain) -> bytes:
    """Serialize a 3-D array into PSNT bytes."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise InputValidationError("PSNT payloads are 3-D", shape=array.shape)
    element = ELEMENT_COMPLEX if np.iscomplexobj(array) else ELEMENT_REAL
    payload = np.ascontiguousarray(array, dtype=_DTYPES[element]).tobytes(order="C")
    header = _HEADER.pack(PSNT_MAGIC, FORMAT_VERSION, int(domain), element, *array.shape)
    return header + payload


def decode_volume(blob: bytes) -> Tuple[np.ndarray, Domain]:
    """Parse PSNT bytes back into (array, domain)."""
    if len(blob) < _HEADER.size:
        raise FileFormatError("PSNT header truncated", size=len(blob))
    magic, version, tag, element, nx, ny, nt = _HEADER.unpack_from(blob)
    if magic != PSNT_MAGIC:
        raise FileFormatError("not a PSNT file", magic=magic)
    if version != FORMAT_VERSION:
        raise FileFormatError("unsupported PSNT version", version=version)
    try:
        domain = Domain(tag)
    except ValueError:
        raise FileFormatError("unknown PSNT domain tag", tag=tag) from None
    if element not in _DTYPES:
        raise FileFormatError("unknown PSNT element type", element=element)
    dtype = _DTYPES[element]
    count = nx * ny * nt
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) != expected:
        raise FileFormatError("PSNT payload size mismatch", expected=expected, actual=len(blob))
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size)
    if not np.all(np.isfinite(data)):
        raise FileFormatError("PSNT payload holds non-finite entries", count=int(np.sum(~np.isfinite(data))))
    return data.reshape((nx, ny, nt)).astype(dtype.newbyteorder("="), copy=True), domain


def write_volume(path: PathLike, array: np.ndarray, domain: Domain) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(array, domain))
    logger.debug(f"wrote {domain.name.lower()} volume {np.shape(array)} to {path}")
    return path


def read_volume(path: PathLike, expect: Domain = None) -> Tuple[np.ndarray, Domain]:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError("input file not found", path=str(path))
    array, domain = decode_volume(path.read_bytes())
    if expect is not None and domain != expect:
        raise FileFormatError(
            f"{path.name} holds a {domain.name.lower()} volume, expected {expect.name.lower()}"
        )
    return array, domain


def stack_coils(kspace: np.ndarray) -> np.ndarray:
    """(m, Nx, Ny, Nt) -> (Nx, Ny, m*Nt), coil-major along the last axis."""
    m, nx, ny, nt = kspace.shape
    return np.ascontiguousarray(np.moveaxis(kspace, 0, 2).reshape(nx, ny, m * nt))


def split_coils(stacked: np.ndarray, count: int) -> np.ndarray:
    """Inverse of stack_coils given the coil count."""
    nx, ny, total = stacked.shape
    if count < 1 or total % count:
        raise InputValidationError("k-space frames are not a multiple of the coil count",
                                   frames=total, coils=count)
    return np.ascontiguousarray(np.moveaxis(stacked.reshape(nx, ny, count, total // count), 2, 0))


def encode_params(depth: int, sets: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]) -> bytes:
    """Serialize learned parameter sets [(log_hyper[5], hps_taps, hs_taps), ...]."""
    if not sets:
        raise InputValidationError("no parameter sets to write")
    log_hyper, hps, hs = sets[0]
    kx, ky, frames = np.shape(hs)
    header = _PARAMS_HEADER.pack(PSNP_MAGIC, FORMAT_VERSION, depth, len(sets), len(hps), kx, ky, frames)
    chunks = []
    for log_hyper, hps, hs in sets:
        chunks.append(np.asarray(log_hyper, dtype="<f8").ravel())
        chunks.append(np.asarray(hps, dtype="<c16").view("<f8").ravel())
        chunks.append(np.ascontiguousarray(hs, dtype="<c16").view("<f8").ravel())
    return header + np.concatenate(chunks).tobytes()


def decode_params(blob: bytes):
    """Parse PSNP bytes -> (depth, [(log_hyper, hps_taps, hs_taps), ...])."""
    if len(blob) < _PARAMS_HEADER.size:
        raise FileFormatError("PSNP header truncated", size=len(blob))
    magic, version, depth, n_sets, n_hps, kx, ky, frames = _PARAMS_HEADER.unpack_from(blob)
    if magic != PSNP_MAGIC:
        raise FileFormatError("not a PSNP file", magic=magic)
    if version != FORMAT_VERSION:
        raise FileFormatError("unsupported PSNP version", version=version)
    if (len(blob) - _PARAMS_HEADER.size) % 8:
        raise FileFormatError("PSNP payload is not a whole number of f64 values", size=len(blob))
    per_set = 5 + 2 * n_hps + 2 * kx * ky * frames
    payload = np.frombuffer(blob, dtype="<f8", offset=_PARAMS_HEADER.size)
    if payload.size != per_set * n_sets:
        raise FileFormatError("PSNP payload size mismatch", expected=per_set * n_sets, actual=payload.size)
    sets = []
    for chunk in payload.reshape(n_sets, per_set).astype(np.float64):
        log_hyper = chunk[:5].copy()
        hps = chunk[5:5 + 2 * n_hps].view(np.complex128).copy()
        hs = chunk[5 + 2 * n_hps:].view(np.complex128).reshape(kx, ky, frames).copy()
        sets.append((log_hyper, hps, hs))
    return depth, sets


def write_params(path: PathLike, depth: int, sets) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(depth, sets))
    return path


def read_params(path: PathLike):
    path = Path(path)
    if not path.is_file():
        raise InputValidationError("input file not found", path=str(path))
    return decode_params(path.read_bytes())


def write_mask(path: PathLike, mask: SamplingMask) -> Path:
    return write_volume(path, np.asarray(mask.mask, dtype=np.float64), Domain.MASK)


def read_mask(path: PathLike, acceleration: float = None) -> SamplingMask:
    """Load a mask; the nominal acceleration defaults to the achieved one."""
    array, _ = read_volume(path, expect=Domain.MASK)
    if not np.all((array == 0) | (array == 1)):
        raise FileFormatError("mask entries must be 0 or 1", path=str(path))
    sampled_lines = array[0].sum(axis=0).mean()
    if acceleration is None:
        acceleration = float(array.shape[1] / sampled_lines) if sampled_lines > 0 else float("inf")
    return SamplingMask(array.real.astype(np.float64), acceleration)


def write_coils(path: PathLike, coils: CoilSet) -> Path:
    """Coil maps stored as (Nx, Ny, m)."""
    return write_volume(path, np.moveaxis(coils.maps, 0, 2).astype(np.complex128), Domain.MAP)


def read_coils(path: PathLike) -> CoilSet:
    array, _ = read_volume(path, expect=Domain.MAP)
    return CoilSet(np.ascontiguousarray(np.moveaxis(array.astype(np.complex128), 2, 0)))


def write_kspace(path: PathLike, kspace: np.ndarray) -> Path:
    return write_volume(path, stack_coils(kspace), Domain.KSPACE)


def read_kspace(path: PathLike, count: int) -> np.ndarray:
    stacked, _ = read_volume(path, expect=Domain.KSPACE)
    return split_coils(stacked.astype(np.complex128), count)


def write_temporal_filter(path: PathLike, h: TemporalFilter) -> Path:
    """Temporal taps stored as an (L+1, 1, 1) complex map."""
    return write_volume(path, h.taps.reshape(-1, 1, 1), Domain.MAP)


def read_temporal_filter(path: PathLike) -> TemporalFilter:
    array, _ = read_volume(path, expect=Domain.MAP)
    if array.shape[1:] != (1, 1):
        raise FileFormatError("temporal filter files have dims (L+1, 1, 1)", shape=array.shape)
    return TemporalFilter(array.ravel().astype(np.complex128))


def write_spatial_filter(path: PathLike, h: SpatialFilter) -> Path:
    return write_volume(path, h.taps.astype(np.complex128), Domain.MAP)


def read_spatial_filter(path: PathLike) -> SpatialFilter:
    array, _ = read_volume(path, expect=Domain.MAP)
    return SpatialFilter(array.astype(np.complex128))
