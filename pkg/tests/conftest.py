"""Shared fixtures: seeded generators, tolerances, small instances and dense oracles."""
import numpy as np
import pytest

from modules.hankel_ops import SpatialFilter, TemporalFilter
from modules.hqs_solver import FilterBank, SolverConfig
from modules.models import Hyperparams, PhantomConfig
from modules.ps_model import generate_phantom, prony_filter, spatial_filter_default
from modules.sampling import CoilSet, SamplingMask, make_coils, make_mask, undersample


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class DenseOracles:
    """Explicit matrices for the operators the library applies matrix-free."""

    @staticmethod
    def centered_dft(n):
        k = np.arange(n) - n // 2
        return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)

    @classmethod
    def frame_dft(cls, nx, ny):
        """Row-major vec(X) -> vec(fft2c(X)) for one frame."""
        return np.kron(cls.centered_dft(nx), cls.centered_dft(ny))

    @staticmethod
    def temporal_conv(taps, nt):
        """(Nt - L) x Nt matrix with row m holding h[k] at column m + L - k."""
        order = len(taps) - 1
        matrix = np.zeros((nt - order, nt), dtype=complex)
        for m in range(nt - order):
            for k, tap in enumerate(taps):
                matrix[m, m + order - k] = tap
        return matrix

    @staticmethod
    def spatial_conv(kernel, nx, ny):
        """Valid 2-D convolution of a row-major frame as a dense matrix."""
        p_len, q_len = kernel.shape
        rows_x, rows_y = nx - p_len + 1, ny - q_len + 1
        matrix = np.zeros((rows_x * rows_y, nx * ny), dtype=complex)
        for a in range(rows_x):
            for b in range(rows_y):
                for p in range(p_len):
                    for q in range(q_len):
                        i, j = a + p_len - 1 - p, b + q_len - 1 - q
                        matrix[a * rows_y + b, i * ny + j] = kernel[p, q]
        return matrix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def testing_tol():
    return 1e-10


@pytest.fixture
def dense():
    return DenseOracles


@pytest.fixture
def small_instance(rng):
    """Random 8x8x4 single-coil problem with a random mask and random filters."""
    nx, ny, nt = 8, 8, 4
    gamma = random_complex(rng, (nx, ny, nt))
    mask = SamplingMask((rng.random((nx, ny, nt)) < 0.5).astype(np.float64), 2.0)
    coils = CoilSet(np.ones((1, nx, ny), dtype=complex))
    y = undersample(gamma, coils, mask)
    temporal = TemporalFilter(random_complex(rng, 3))
    spatial = SpatialFilter(random_complex(rng, (3, 3, 1)))
    return {"gamma": gamma, "mask": mask, "coils": coils, "y": y,
            "filters": FilterBank(temporal, spatial)}


@pytest.fixture
def small_phantom():
    config = PhantomConfig(seed=7, nx=16, ny=16, nt=8, order=3)
    gamma, decomp = generate_phantom(config)
    return gamma, decomp


@pytest.fixture
def phantom_instance(small_phantom):
    """Phantom with its own Prony filter, 2x undersampled with 4 coils."""
    gamma, decomp = small_phantom
    nx, ny, nt = gamma.shape
    mask = make_mask(nx, ny, nt, 2.0, 4, seed=3)
    coils = make_coils(nx, ny, 4, seed=3)
    y = undersample(gamma, coils, mask)
    filters = FilterBank(prony_filter(decomp.roots), spatial_filter_default())
    return {"gamma": gamma, "mask": mask, "coils": coils, "y": y, "filters": filters}


@pytest.fixture
def solver_config():
    def build(filters, mode="exact", iterations=5, **hyper):
        return SolverConfig(mode=mode, iterations=iterations, hyper=Hyperparams(**hyper), filters=filters)
    return build
