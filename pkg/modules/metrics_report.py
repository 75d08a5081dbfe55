"""
Reconstruction quality metrics (MSE, PSNR, SSIM) and the CSV report.

All metrics compare an output volume against a reference of the same shape.
PSNR and SSIM work on magnitude images; SSIM is evaluated frame by frame with a
7x7 Gaussian window over valid positions only.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from modules.errors import InputValidationError, check_same_shape
from modules.models import EvalReport, FrameMetrics, PeakMode

logger = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
REPORT_COLUMNS = ["case", "frame", "mse", "psnr_db", "ssim"]


def _pair(output, reference) -> Tuple[np.ndarray, np.ndarray]:
    output, reference = np.asarray(output), np.asarray(reference)
    check_same_shape("output", output.shape, "reference", reference.shape)
    return output, reference


def mse(output: np.ndarray, reference: np.ndarray) -> float:
    """Mean squared magnitude of the difference over all entries."""
    output, reference = _pair(output, reference)
    return float(np.mean(np.abs(output - reference) ** 2))


def psnr(output: np.ndarray, reference: np.ndarray, peak_mode: PeakMode = "reference") -> float:
    """20*log10(peak / sqrt(mse)); math.inf when the volumes are identical.

    peak_mode "reference" takes the reference magnitude maximum, "output" the
    maximum of the reconstruction itself.
    """
    output, reference = _pair(output, reference)
    error = mse(output, reference)
    if error == 0:
        return math.inf
    if peak_mode == "reference":
        peak = float(np.abs(reference).max())
    elif peak_mode == "output":
        peak = float(np.abs(output).max())
    else:
        raise InputValidationError("unknown peak mode", peak_mode=peak_mode)
    if peak == 0:
        raise InputValidationError("PSNR peak magnitude is zero", peak_mode=peak_mode)
    return 20.0 * math.log10(peak / math.sqrt(error))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    profile = scipy.signal.windows.gaussian(size, sigma)
    window = np.outer(profile, profile)
    return window / window.sum()


def _ssim_frame(a: np.ndarray, b: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    def blur(image):
        return scipy.signal.convolve2d(image, window, mode="valid")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    index_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(index_map))


def ssim_frames(output: np.ndarray, reference: np.ndarray, data_range: Optional[float] = None) -> np.ndarray:
    """Per-frame SSIM of magnitude images; data_range defaults to the reference maximum."""
    output, reference = _pair(output, reference)
    if output.ndim == 2:
        output, reference = output[..., np.newaxis], reference[..., np.newaxis]
    if output.shape[0] < SSIM_WINDOW or output.shape[1] < SSIM_WINDOW:
        raise InputValidationError("frames smaller than the SSIM window",
                                   frame=output.shape[:2], window=SSIM_WINDOW)
    a, b = np.abs(output), np.abs(reference)
    if data_range is None:
        data_range = float(b.max())
    if data_range <= 0:
        logger.debug("zero dynamic range, using 1.0 for the SSIM constants")
        data_range = 1.0
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    window = gaussian_window()
    return np.array([_ssim_frame(a[:, :, t], b[:, :, t], window, c1, c2) for t in range(a.shape[2])])


def ssim(output: np.ndarray, reference: np.ndarray, data_range: Optional[float] = None) -> float:
    return float(np.mean(ssim_frames(output, reference, data_range)))


def evaluate(output: np.ndarray, reference: np.ndarray, case: str = "case0",
             peak_mode: PeakMode = "reference") -> EvalReport:
    """All three metrics for one volume, plus per-frame rows."""
    output, reference = _pair(output, reference)
    if output.ndim != 3:
        raise InputValidationError("evaluation expects (Nx, Ny, Nt) volumes", shape=output.shape)
    if peak_mode == "reference":
        peak = float(np.abs(reference).max())
    else:
        peak = float(np.abs(output).max())
    frame_ssim = ssim_frames(output, reference, data_range=float(np.abs(reference).max()))
    rows = []
    for t in range(output.shape[2]):
        frame_mse = mse(output[:, :, t], reference[:, :, t])
        frame_psnr = math.inf if frame_mse == 0 else _psnr_from(peak, frame_mse)
        rows.append(FrameMetrics(case=case, frame=t, mse=frame_mse, psnr=frame_psnr, ssim=frame_ssim[t]))
    value = psnr(output, reference, peak_mode)
    return EvalReport(
        mse=mse(output, reference),
        psnr=value,
        psnr_infinite=math.isinf(value),
        ssim=float(np.mean(frame_ssim)),
        per_frame=rows,
    )


def _psnr_from(peak: float, error: float) -> float:
    if peak == 0:
        raise InputValidationError("PSNR peak magnitude is zero")
    return 20.0 * math.log10(peak / math.sqrt(error))


def report(cases: Sequence[Tuple[str, np.ndarray, np.ndarray]], peak_mode: PeakMode = "reference") -> EvalReport:
    """Evaluate (name, output, reference) cases; summary values average over cases."""
    if len(cases) == 0:
        raise InputValidationError("report needs at least one case")
    reports = [evaluate(output, reference, name, peak_mode) for name, output, reference in cases]
    psnr_value = float(np.mean([r.psnr for r in reports]))
    summary = EvalReport(
        mse=float(np.mean([r.mse for r in reports])),
        psnr=psnr_value,
        psnr_infinite=math.isinf(psnr_value),
        ssim=float(np.mean([r.ssim for r in reports])),
        per_frame=[row for r in reports for row in r.per_frame],
    )
    logger.info(f"📊 {len(cases)} case(s): MSE {summary.mse:.4e}, PSNR {summary.psnr:.2f} dB, SSIM {summary.ssim:.4f}")
    return summary


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def write_report_csv(path, summary: EvalReport) -> Path:
    """Per-frame rows followed by a ``summary`` row; LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in summary.per_frame:
            writer.writerow([row.case, row.frame, _fmt(row.mse), _fmt(row.psnr), _fmt(row.ssim)])
        writer.writerow(["summary", "all", _fmt(summary.mse), _fmt(summary.psnr), _fmt(summary.ssim)])
    return path
