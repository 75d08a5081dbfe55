"""
Half-quadratic splitting solver for the PS + sparse penalty function.

One sweep updates, in order, the k-space gradient auxiliaries U, the low-rank
auxiliary Z, the per-coil images x_i and finally gamma. Two modes:

* ``paper``: U and Z take the single step (I - 2*lam/rho * H^H H), and the
  gamma update carries the extra M*y / M terms of the unrolled network cell.
* ``exact``: every block is the exact minimizer of its sub-problem, so the
  penalty function is non-increasing across sweeps.
"""
import csv
import logging
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache, partial
from pathlib import Path
from typing import List

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
from pydantic import ConfigDict, Field

from modules.errors import ConvergenceError, InputValidationError, NumericalError
from modules.hankel_ops import (
    SpatialFilter,
    TemporalFilter,
    gram_apply_spatial,
    gram_apply_temporal,
    annihilate_temporal,
    spatial_residual_energy,
)
from modules.models import Hyperparams, SolverOptions
from modules.sampling import CoilSet, SamplingMask, adjoint_encode, check_instance
from modules.tensor_core import (
    GradientWeights,
    fft2c,
    gradient_channels,
    gradient_channels_adjoint,
    gradient_weights,
    ifft2c,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10


@dataclass(frozen=True)
class FilterBank:
    """Temporal null-space filter h_ps and the per-frame spatial bank h_s."""
    temporal: TemporalFilter
    spatial: SpatialFilter


class SolverConfig(SolverOptions):
    """Model for a full solver run: iteration settings, weights and filters."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    hyper: Hyperparams = Field(default_factory=Hyperparams)
    filters: FilterBank

    def effective_hyper(self) -> Hyperparams:
        """Weights after the variant switches its regularizers on or off."""
        if self.variant == "sparse_net":
            return self.hyper.model_copy(update={"lambda2": 0.0})
        if self.variant == "lowrank_net":
            return self.hyper.model_copy(update={"lambda1": 0.0})
        return self.hyper


@dataclass
class HQSState:
    """Iterates (gamma, U, Z, x_i) carried between sweeps."""
    gamma: np.ndarray
    u_hat: np.ndarray
    z: np.ndarray
    x_coils: np.ndarray
    iteration: int = 0


@dataclass
class ObjectiveTerms:
    """The six terms of the penalty function and their sum."""
    sweep: int
    data_term: float
    sparse_term: float
    ps_term: float
    pen0: float
    pen1: float
    pen2: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = (self.data_term + self.sparse_term + self.ps_term
                      + self.pen0 + self.pen1 + self.pen2)


@dataclass
class ReconstructionResult:
    gamma: np.ndarray
    log: List[ObjectiveTerms]
    state: HQSState


@lru_cache(maxsize=16)
def _weights(nx: int, ny: int) -> GradientWeights:
    return gradient_weights(nx, ny)


def weights_for(shape) -> GradientWeights:
    return _weights(int(shape[0]), int(shape[1]))


def gradient_of(gamma: np.ndarray) -> np.ndarray:
    """k-space gradient channels (i*wx*F(gamma), i*wy*F(gamma))."""
    return gradient_channels(fft2c(gamma), weights_for(gamma.shape))


def init_state(y: np.ndarray, mask: SamplingMask, coils: CoilSet) -> HQSState:
    """Zero-filled start: gamma = adjoint_encode(y), auxiliaries consistent with it."""
    gamma = adjoint_encode(y, coils, mask)
    return HQSState(
        gamma=gamma,
        u_hat=gradient_of(gamma),
        z=gamma.copy(),
        x_coils=coils.maps[..., np.newaxis] * gamma[np.newaxis],
        iteration=0,
    )


def _solve_shifted_gram(gram, rhs: np.ndarray, rho: float, lam: float, cfg: SolverConfig, name: str):
    """Solve (rho*I + 2*lam*G) v = rhs with CG on the flattened array."""
    shape = rhs.shape
    size = rhs.size

    def matvec(v):
        v = np.asarray(v).reshape(shape)
        return (rho * v + 2.0 * lam * gram(v)).ravel()

    operator = scipy.sparse.linalg.LinearOperator((size, size), matvec=matvec, dtype=np.complex128)
    b = rhs.ravel()
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    solution, info = scipy.sparse.linalg.cg(
        operator, b, x0=b / rho, rtol=cfg.cg_tol, atol=0.0, maxiter=cfg.cg_maxiter, callback=count
    )
    b_norm = np.linalg.norm(b)
    residual = float(np.linalg.norm(operator.matvec(solution) - b) / b_norm) if b_norm > 0 else 0.0
    logger.debug(f"{name} CG: {iterations} iterations, relative residual {residual:.2e}")
    if residual > RESIDUAL_TOLERANCE:
        raise ConvergenceError(f"{name} linear solve did not converge", residual=residual, info=info)
    return solution.reshape(shape)


def update_u(state: HQSState, cfg: SolverConfig) -> np.ndarray:
    """Sparse-module update of the k-space gradient auxiliaries."""
    hyper = cfg.effective_hyper()
    g = gradient_of(state.gamma)
    if hyper.lambda1 == 0:
        return g
    gram = partial(gram_apply_spatial, h=cfg.filters.spatial)
    if cfg.mode == "paper":
        return g - (2.0 * hyper.lambda1 / hyper.rho1) * gram(g)
    return _solve_shifted_gram(gram, hyper.rho1 * g, hyper.rho1, hyper.lambda1, cfg, "U-update")


def singular_value_threshold(volume: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal map of threshold * nuclear norm on the (Nx*Ny, Nt) Casorati matrix."""
    nx, ny, nt = volume.shape
    u, s, vh = scipy.linalg.svd(volume.reshape(nx * ny, nt), full_matrices=False)
    shrunk = np.maximum(s - threshold, 0.0)
    return ((u * shrunk) @ vh).reshape(nx, ny, nt)


def update_z(state: HQSState, cfg: SolverConfig) -> np.ndarray:
    """PS-annihilation (or SVT) update of the low-rank auxiliary."""
    hyper = cfg.effective_hyper()
    gamma = state.gamma
    if hyper.lambda2 == 0:
        return gamma.copy()
    if cfg.variant == "svt":
        return singular_value_threshold(gamma, hyper.lambda2 / hyper.rho2)
    gram = partial(gram_apply_temporal, h=cfg.filters.temporal)
    if cfg.mode == "paper":
        return gamma - (2.0 * hyper.lambda2 / hyper.rho2) * gram(gamma)
    return _solve_shifted_gram(gram, hyper.rho2 * gamma, hyper.rho2, hyper.lambda2, cfg, "Z-update")


def update_x(state: HQSState, y: np.ndarray, mask: SamplingMask, coils: CoilSet,
             cfg: SolverConfig) -> np.ndarray:
    """Per-coil data-consistency step, solved entrywise in k-space."""
    rho0 = cfg.effective_hyper().rho0
    m = mask.mask[np.newaxis]
    if rho0 == 0 and np.any(mask.mask == 0):
        raise NumericalError("rho0 = 0 leaves unsampled k-space entries undetermined (division by zero)")
    predicted = fft2c(coils.maps[..., np.newaxis] * state.gamma[np.newaxis])
    return ifft2c((m * y + rho0 * predicted) / (m + rho0))


def gamma_denominator(mask: SamplingMask, hyper: Hyperparams, mode: str) -> np.ndarray:
    w2 = weights_for(mask.shape).magnitude_squared[..., np.newaxis]
    denominator = hyper.rho0 + hyper.rho1 * w2 + hyper.rho2 + np.zeros(mask.shape)
    if mode == "paper":
        denominator = denominator + mask.mask
    return denominator


def update_gamma(state: HQSState, y: np.ndarray, mask: SamplingMask, coils: CoilSet,
                 cfg: SolverConfig) -> np.ndarray:
    """Closed-form k-space division for gamma given the new auxiliaries."""
    hyper = cfg.effective_hyper()
    weights = weights_for(state.gamma.shape)
    combined = np.sum(np.conj(coils.maps)[..., np.newaxis] * state.x_coils, axis=0)
    numerator = (hyper.rho1 * gradient_channels_adjoint(state.u_hat, weights)
                 + hyper.rho0 * fft2c(combined)
                 + hyper.rho2 * fft2c(state.z))
    denominator = gamma_denominator(mask, hyper, cfg.mode)
    if cfg.mode == "paper":
        numerator = numerator + mask.mask * fft2c(adjoint_encode(y, coils, mask))
    if np.any(denominator <= 0):
        raise NumericalError("gamma update denominator vanishes")
    return ifft2c(numerator / denominator)


def sweep(state: HQSState, y: np.ndarray, mask: SamplingMask, coils: CoilSet,
          cfg: SolverConfig) -> HQSState:
    """One pass over U, Z, x, gamma in that order."""
    u_hat = update_u(state, cfg)
    z = update_z(state, cfg)
    x_coils = update_x(state, y, mask, coils, cfg)
    updated = replace(state, u_hat=u_hat, z=z, x_coils=x_coils)
    gamma = update_gamma(updated, y, mask, coils, cfg)
    return replace(updated, gamma=gamma, iteration=state.iteration + 1)


def objective_terms(state: HQSState, y: np.ndarray, mask: SamplingMask, coils: CoilSet,
                    cfg: SolverConfig) -> ObjectiveTerms:
    """Evaluate every term of the penalty function at the given state."""
    hyper = cfg.effective_hyper()
    m = mask.mask[np.newaxis]
    data = 0.5 * float(np.sum(np.abs(m * fft2c(state.x_coils) - y) ** 2))

    sparse = 0.0
    if hyper.lambda1 > 0:
        sparse = hyper.lambda1 * spatial_residual_energy(state.u_hat, cfg.filters.spatial)

    ps = 0.0
    if hyper.lambda2 > 0:
        if cfg.variant == "svt":
            nx, ny, nt = state.z.shape
            ps = hyper.lambda2 * float(np.sum(scipy.linalg.svdvals(state.z.reshape(nx * ny, nt))))
        else:
            ps = hyper.lambda2 * float(np.sum(np.abs(annihilate_temporal(state.z, cfg.filters.temporal)) ** 2))

    coil_images = coils.maps[..., np.newaxis] * state.gamma[np.newaxis]
    pen0 = 0.5 * hyper.rho0 * float(np.sum(np.abs(state.x_coils - coil_images) ** 2))
    pen1 = 0.5 * hyper.rho1 * float(np.sum(np.abs(state.u_hat - gradient_of(state.gamma)) ** 2))
    pen2 = 0.5 * hyper.rho2 * float(np.sum(np.abs(state.z - state.gamma) ** 2))
    return ObjectiveTerms(state.iteration, data, sparse, ps, pen0, pen1, pen2)


def objective(state: HQSState, y: np.ndarray, mask: SamplingMask, coils: CoilSet,
              cfg: SolverConfig) -> float:
    return objective_terms(state, y, mask, coils, cfg).total


def check_filters(shape, cfg: SolverConfig) -> None:
    nx, ny, nt = shape
    hyper = cfg.effective_hyper()
    if hyper.lambda2 > 0 and cfg.variant != "svt" and cfg.filters.temporal.taps.size > nt:
        raise InputValidationError("temporal filter longer than the frame count",
                                   taps=cfg.filters.temporal.taps.size, nt=nt)
    if hyper.lambda1 > 0:
        kx, ky = cfg.filters.spatial.kernel_shape
        if kx > nx or ky > ny:
            raise InputValidationError("spatial filter larger than the frame", kernel=(kx, ky), frame=(nx, ny))
        if cfg.filters.spatial.frames not in (1, nt):
            raise InputValidationError("spatial filter bank frame count mismatch",
                                       frames=cfg.filters.spatial.frames, nt=nt)


def reconstruct(y: np.ndarray, mask: SamplingMask, coils: CoilSet, cfg: SolverConfig) -> ReconstructionResult:
    """Run init_state then cfg.iterations sweeps, logging the objective after each."""
    check_instance(y.shape[1:], coils, mask)
    check_filters(mask.shape, cfg)
    state = init_state(y, mask, coils)
    log = [objective_terms(state, y, mask, coils, cfg)]
    logger.info(f"🚀 HQS reconstruction: {cfg.iterations} sweeps, mode={cfg.mode}, variant={cfg.variant}")
    for k in range(1, cfg.iterations + 1):
        state = sweep(state, y, mask, coils, cfg)
        if not np.all(np.isfinite(state.gamma)):
            raise NumericalError("non-finite reconstruction", sweep=k)
        terms = objective_terms(state, y, mask, coils, cfg)
        log.append(terms)
        logger.info(f"   🔁 Sweep {k}/{cfg.iterations}: objective {terms.total:.6e}")
    return ReconstructionResult(gamma=state.gamma, log=log, state=state)


OBJECTIVE_COLUMNS = ["sweep", "data_term", "sparse_term", "ps_term", "pen0", "pen1", "pen2", "total"]


def write_objective_csv(path, log: List[ObjectiveTerms]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(OBJECTIVE_COLUMNS)
        for terms in log:
            row = [terms.sweep] + [f"{getattr(terms, f.name):.12g}" for f in fields(terms) if f.name != "sweep"]
            writer.writerow(row)
    return path
