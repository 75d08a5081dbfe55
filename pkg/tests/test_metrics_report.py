import csv
import math

import numpy as np
import pytest
from numpy import testing as npt

from modules.errors import InputValidationError
from modules.metrics_report import (
    REPORT_COLUMNS,
    evaluate,
    gaussian_window,
    mse,
    psnr,
    report,
    ssim,
    ssim_frames,
    write_report_csv,
)

from .conftest import random_complex


def test_mse_examples(rng):
    a = random_complex(rng, (5, 4, 3))
    b = random_complex(rng, (5, 4, 3))
    assert mse(a, a) == 0.0
    npt.assert_allclose(mse(a + 0.1j, a), 0.01, rtol=1e-12)
    oracle = sum(abs(a[i, j, t] - b[i, j, t]) ** 2 for i in range(5) for j in range(4) for t in range(3)) / 60
    npt.assert_allclose(mse(a, b), oracle, rtol=1e-12)
    npt.assert_allclose(mse(a, b), mse(b, a), rtol=1e-15)
    npt.assert_allclose(mse(b + 3 * (a - b), b), 9 * mse(a, b), rtol=1e-12)
    with pytest.raises(InputValidationError):
        mse(a, b[:4])


def test_psnr_examples(rng):
    reference = np.ones((8, 8, 2))
    npt.assert_allclose(psnr(np.full((8, 8, 2), 0.9), reference), 20.0, rtol=1e-12)
    assert psnr(reference, reference) == math.inf

    output = random_complex(rng, (8, 8, 2))
    target = random_complex(rng, (8, 8, 2))
    difference = psnr(output, target, "output") - psnr(output, target, "reference")
    npt.assert_allclose(difference, 20 * np.log10(np.abs(output).max() / np.abs(target).max()), rtol=1e-12)
    assert psnr(target + 0.1, target) > psnr(target + 0.2, target)


def test_psnr_errors(rng):
    zero = np.zeros((4, 4, 1))
    with pytest.raises(InputValidationError):
        psnr(np.ones((4, 4, 1)), zero)
    with pytest.raises(InputValidationError):
        psnr(zero, np.ones((4, 4, 1)), peak_mode="median")


def test_gaussian_window():
    window = gaussian_window()
    assert window.shape == (7, 7)
    npt.assert_allclose(window.sum(), 1.0)
    npt.assert_allclose(window, window.T)
    assert window[3, 3] == window.max()


def test_ssim_identity_and_symmetry(rng, small_phantom):
    gamma, _ = small_phantom
    npt.assert_allclose(ssim(gamma, gamma), 1.0, atol=1e-12)
    a = random_complex(rng, (9, 10, 3))
    b = a + 0.3 * random_complex(rng, (9, 10, 3))
    npt.assert_allclose(ssim(a, b, data_range=2.0), ssim(b, a, data_range=2.0), atol=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_of_heavy_noise(rng, small_phantom):
    gamma, _ = small_phantom
    noisy = gamma + 10.0 * random_complex(rng, gamma.shape)
    assert ssim(noisy, gamma) < 0.2


def test_ssim_frames(rng):
    a = random_complex(rng, (8, 8, 4))
    values = ssim_frames(a, a)
    assert values.shape == (4,)
    npt.assert_allclose(ssim_frames(a[:, :, 0], a[:, :, 0]), [1.0], atol=1e-12)
    with pytest.raises(InputValidationError):
        ssim_frames(a[:6], a[:6])
    # an all-zero reference falls back to a unit dynamic range
    npt.assert_allclose(ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1))), 1.0)


def test_evaluate_identical_pair(small_phantom):
    gamma, _ = small_phantom
    result = evaluate(gamma, gamma, case="same")
    assert result.mse == 0.0 and result.psnr_infinite
    npt.assert_allclose(result.ssim, 1.0, atol=1e-12)
    assert len(result.per_frame) == gamma.shape[2]
    assert all(row.case == "same" and math.isinf(row.psnr) for row in result.per_frame)


def test_report_and_csv(tmp_path, rng, small_phantom):
    gamma, _ = small_phantom
    cases = [("noisy", gamma + 0.05 * random_complex(rng, gamma.shape), gamma),
             ("blurred", 0.9 * gamma, gamma),
             ("exact", gamma, gamma)]
    summary = report(cases)
    assert len(summary.per_frame) == 3 * gamma.shape[2]
    npt.assert_allclose(summary.mse, np.mean([mse(out, ref) for _, out, ref in cases]))
    assert summary.psnr_infinite

    path = write_report_csv(tmp_path / "metrics.csv", summary)
    assert b"\r\n" not in path.read_bytes()
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == REPORT_COLUMNS
    assert len(rows) == 1 + 3 * gamma.shape[2] + 1
    assert rows[-1][:2] == ["summary", "all"]
    first = summary.per_frame[0]
    assert rows[1][:2] == ["noisy", "0"]
    npt.assert_allclose([float(v) for v in rows[1][2:]], [first.mse, first.psnr, first.ssim], rtol=1e-11)
    assert rows[2 * gamma.shape[2] + 1][3] == "inf"


def test_report_needs_cases():
    with pytest.raises(InputValidationError):
        report([])
