import numpy as np
import pytest
from numpy import testing as npt

from modules.errors import InputValidationError
from modules.hankel_ops import apply_annihilation_spatial, apply_annihilation_temporal
from modules.models import PhantomConfig
from modules.ps_model import (
    PSDecomposition,
    assemble_phantom,
    calibrate_nullspace,
    exponential_basis,
    generate_phantom,
    numerical_rank,
    prony_filter,
    spatial_filter_default,
    stacked_hankel,
)

from .conftest import random_complex


def relative_residual(volume, h):
    return np.linalg.norm(apply_annihilation_temporal(volume, h)) / np.linalg.norm(volume)


def test_assemble_constant():
    decomp = PSDecomposition(np.ones((1, 3, 3)), np.ones((1, 5)))
    npt.assert_array_equal(assemble_phantom(decomp), np.ones((3, 3, 5)))


def test_assemble_alternating(rng):
    a, b = rng.standard_normal((2, 4, 4))
    t = np.arange(6)
    decomp = PSDecomposition(np.stack([a, b]), np.stack([np.ones(6), (-1.0) ** t]))
    volume = assemble_phantom(decomp)
    npt.assert_allclose(volume[1, 2], a[1, 2] + b[1, 2] * (-1.0) ** t)


def test_decomposition_dimension_mismatch():
    with pytest.raises(InputValidationError):
        PSDecomposition(np.ones((2, 3, 3)), np.ones((3, 5)))


def test_random_order_three_has_hankel_rank_three(rng):
    roots = np.exp(1j * rng.uniform(-np.pi, np.pi, 3)) * rng.uniform(0.9, 1.0, 3)
    decomp = PSDecomposition(random_complex(rng, (3, 16, 16)), exponential_basis(roots, 12), roots)
    lifted = stacked_hankel([assemble_phantom(decomp)], 6)
    assert numerical_rank(lifted) == 3


def test_prony_examples():
    npt.assert_allclose(prony_filter([1.0]).taps, [1, -1])
    h = prony_filter([1.0, -1.0])
    npt.assert_allclose(h.taps, [1, 0, -1], atol=1e-15)
    t = np.arange(9)
    series = (1.5 - 0.5j * (-1.0) ** t).reshape(1, 1, 9)
    npt.assert_allclose(apply_annihilation_temporal(series, h), 0.0, atol=1e-14)


def test_prony_annihilates_assembled_phantom(rng):
    roots = np.array([np.exp(1j * np.pi / 4), np.exp(-1j * np.pi / 4), 0.9])
    decomp = PSDecomposition(random_complex(rng, (3, 8, 8)), exponential_basis(roots, 16), roots)
    assert relative_residual(assemble_phantom(decomp), prony_filter(roots)) < 1e-10


@pytest.mark.parametrize("order", [1, 2, 3, 4, 6])
def test_generated_phantom_is_exactly_ps(order):
    gamma, decomp = generate_phantom(PhantomConfig(seed=order, nx=16, ny=16, nt=16, order=order))
    assert gamma.shape == (16, 16, 16)
    assert decomp.order == order
    assert len(set(np.round(decomp.roots, 12))) == order
    assert relative_residual(gamma, prony_filter(decomp.roots)) < 1e-10
    npt.assert_allclose(gamma, assemble_phantom(decomp))


def test_phantom_is_seeded():
    config = PhantomConfig(seed=11, nx=8, ny=8, nt=6)
    first, _ = generate_phantom(config)
    second, _ = generate_phantom(config)
    npt.assert_array_equal(first, second)
    other, _ = generate_phantom(config.model_copy(update={"seed": 12}))
    assert not np.array_equal(first, other)


def test_calibrate_constant_volume():
    gamma, _ = generate_phantom(PhantomConfig(seed=1, nx=8, ny=8, nt=6, order=1, constant=True))
    result = calibrate_nullspace([gamma], 2)
    npt.assert_allclose(result.filter.taps, np.array([1, -1]) / np.sqrt(2), atol=1e-10)
    assert result.singular_values[-1] < 1e-12 * result.singular_values[0] + 1e-12


def test_calibrate_exact_order_two():
    gamma, _ = generate_phantom(PhantomConfig(seed=5, nx=16, ny=16, nt=12, order=2))
    result = calibrate_nullspace([gamma], 3)
    s = result.singular_values
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert s[2] / s[0] < 1e-10
    assert result.residual < 1e-8
    npt.assert_allclose(np.linalg.norm(result.filter.taps), 1.0)


def test_calibrate_noisy_phantom_recovers_prony_filter():
    config = PhantomConfig(seed=3, nx=16, ny=16, nt=16, order=3, noise=1e-3)
    gamma, decomp = generate_phantom(config)
    result = calibrate_nullspace([gamma], 4)
    assert 0 < result.residual <= 5e-3
    truth = prony_filter(decomp.roots).normalized().taps
    assert abs(np.vdot(result.filter.taps, truth)) > 0.99


def test_calibrate_errors(small_phantom):
    gamma, _ = small_phantom
    with pytest.raises(InputValidationError):
        calibrate_nullspace([], 2)
    with pytest.raises(InputValidationError):
        calibrate_nullspace([gamma], gamma.shape[-1] + 1)


def test_default_spatial_filter():
    h = spatial_filter_default()
    assert h.kernel_shape == (3, 3)
    npt.assert_allclose(np.linalg.norm(h.taps), 1.0)
    npt.assert_allclose(h.taps.sum(), 0.0, atol=1e-15)
    x, y = np.meshgrid(np.arange(6.0), np.arange(5.0), indexing="ij")
    for frame in (np.full((6, 5), 2.0), 3.0 * x - 2.0 * y + 1.0):
        npt.assert_allclose(apply_annihilation_spatial(frame[..., None], h, 0), 0.0, atol=1e-12)


def test_vanishing_leading_tap_is_rejected():
    # windows (1,1,1) and (1,1,5) leave (1,-1,0) as null vector, whose reversal starts at zero
    with pytest.raises(InputValidationError, match="leading tap"):
        calibrate_nullspace([np.array([1.0, 1.0, 1.0, 1.0, 5.0]).reshape(1, 1, 5)], 3)
