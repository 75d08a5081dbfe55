"""
Unrolled learning of hyperparameters and filter taps.

The paper-mode sweep of the HQS solver is re-expressed with torch so reverse-mode
differentiation runs through the whole unrolled computation. Hyperparameters are
stored as logs and exponentiated on use; complex taps are stored as real/imag
pairs so every learnable coordinate is real.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from modules import psnt_io
from modules.errors import DivergenceError, InputValidationError, NumericalError, check_same_shape
from modules.hankel_ops import SpatialFilter, TemporalFilter, annihilate_temporal
from modules.hqs_solver import FilterBank, SolverConfig
from modules.models import Hyperparams, PhantomConfig, TrainConfig
from modules.ps_model import generate_phantom
from modules.sampling import MASK_SEED_OFFSET, NOISE_SEED_OFFSET, CoilSet, SamplingMask, make_mask, undersample
from modules.tensor_core import gradient_weights

logger = logging.getLogger(__name__)

HYPER_NAMES = ("lambda1", "lambda2", "rho0", "rho1", "rho2")
SPATIAL_DIMS = (-3, -2)


@dataclass
class ParameterSet:
    """Learnable values of one sweep (or of all sweeps when tied)."""
    log_hyper: np.ndarray
    hps_taps: np.ndarray
    hs_taps: np.ndarray

    def hyper(self) -> Hyperparams:
        with np.errstate(over="ignore"):
            values = np.exp(self.log_hyper)
        return Hyperparams(**dict(zip(HYPER_NAMES, map(float, values))))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.log_hyper.copy(), self.hps_taps.copy(), self.hs_taps.copy())


@dataclass
class LearnableParams:
    """Parameter sets shared across sweeps (tied) or one per sweep (untied)."""
    sets: List[ParameterSet]
    unroll_depth: int

    @property
    def tied(self) -> bool:
        return len(self.sets) == 1

    def set_for(self, sweep: int) -> ParameterSet:
        return self.sets[0] if self.tied else self.sets[sweep]

    @classmethod
    def initial(cls, temporal: TemporalFilter, spatial: SpatialFilter, depth: int,
                hyper: Optional[Hyperparams] = None, tied: bool = True) -> "LearnableParams":
        """Start from given filters and weights (all ones unless given)."""
        hyper = hyper or Hyperparams()
        with np.errstate(divide="ignore"):
            log_hyper = np.log(np.array(hyper.as_tuple(), dtype=np.float64))
        base = ParameterSet(log_hyper, np.array(temporal.taps), np.array(spatial.taps))
        count = 1 if tied or depth == 0 else depth
        return cls([base.copy() for _ in range(count)], depth)

    @classmethod
    def from_solver_config(cls, cfg: SolverConfig, tied: bool = True) -> "LearnableParams":
        return cls.initial(cfg.filters.temporal, cfg.filters.spatial, cfg.iterations,
                           cfg.effective_hyper(), tied)

    def to_solver_config(self) -> SolverConfig:
        """Paper-mode solver configuration equivalent to tied parameters."""
        if not self.tied:
            raise InputValidationError("untied parameters have no single solver configuration")
        values = self.sets[0]
        return SolverConfig(
            mode="paper",
            iterations=self.unroll_depth,
            hyper=values.hyper(),
            filters=FilterBank(TemporalFilter(values.hps_taps), SpatialFilter(values.hs_taps)),
        )

    def to_vector(self) -> np.ndarray:
        """All real coordinates: per set, log-hyper, temporal re/im, spatial re/im."""
        chunks = []
        for values in self.sets:
            chunks.append(values.log_hyper)
            chunks.append(np.ascontiguousarray(values.hps_taps).view(np.float64))
            chunks.append(np.ascontiguousarray(values.hs_taps).view(np.float64).ravel())
        return np.concatenate(chunks)

    def from_vector(self, vector: np.ndarray) -> "LearnableParams":
        vector = np.asarray(vector, dtype=np.float64)
        sets, offset = [], 0
        for values in self.sets:
            n_hps, hs_shape = values.hps_taps.size, values.hs_taps.shape
            n_hs = int(np.prod(hs_shape))
            log_hyper = vector[offset:offset + 5].copy()
            offset += 5
            hps = vector[offset:offset + 2 * n_hps].copy().view(np.complex128)
            offset += 2 * n_hps
            hs = vector[offset:offset + 2 * n_hs].copy().view(np.complex128).reshape(hs_shape)
            offset += 2 * n_hs
            sets.append(ParameterSet(log_hyper, hps, hs))
        if offset != vector.size:
            raise InputValidationError("parameter vector length mismatch", expected=offset, actual=vector.size)
        return LearnableParams(sets, self.unroll_depth)

    def save(self, path) -> Path:
        return psnt_io.write_params(path, self.unroll_depth,
                                    [(s.log_hyper, s.hps_taps, s.hs_taps) for s in self.sets])

    @classmethod
    def load(cls, path) -> "LearnableParams":
        depth, sets = psnt_io.read_params(path)
        return cls([ParameterSet(*values) for values in sets], depth)


@dataclass
class TrainingPair:
    """Undersampled input and its fully sampled label."""
    y_under: np.ndarray
    mask: SamplingMask
    coils: CoilSet
    gamma_ref: np.ndarray


@dataclass
class TrainingResult:
    params: LearnableParams
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def _fft2c(x: torch.Tensor) -> torch.Tensor:
    x = torch.fft.ifftshift(x, dim=SPATIAL_DIMS)
    x = torch.fft.fft2(x, dim=SPATIAL_DIMS, norm="ortho")
    return torch.fft.fftshift(x, dim=SPATIAL_DIMS)


def _ifft2c(x: torch.Tensor) -> torch.Tensor:
    x = torch.fft.ifftshift(x, dim=SPATIAL_DIMS)
    x = torch.fft.ifft2(x, dim=SPATIAL_DIMS, norm="ortho")
    return torch.fft.fftshift(x, dim=SPATIAL_DIMS)


def _pad(x: torch.Tensor, dim: int, before: int, after: int) -> torch.Tensor:
    """Zero-pad one axis of a complex tensor."""
    shape = list(x.shape)
    pieces = []
    for width in (before, after):
        shape[dim] = width
        pieces.append(x.new_zeros(shape))
    return torch.cat([pieces[0], x, pieces[1]], dim=dim)


def _gram_temporal(v: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """H^H H along the last axis: valid-mode forward, zero-padded adjoint."""
    order, nt = h.shape[0] - 1, v.shape[-1]
    residual = sum(h[k] * v[..., order - k:nt - k] for k in range(order + 1))
    return sum(_pad(torch.conj(h[k]) * residual, -1, order - k, k) for k in range(order + 1))


def _gram_spatial(v: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Frame-wise H^H H over the spatial axes of (..., Nx, Ny, Nt); h is (P, Q, Nt or 1)."""
    p_len, q_len = h.shape[0], h.shape[1]
    nx, ny = v.shape[-3], v.shape[-2]
    taps = [(p, q) for p in range(p_len) for q in range(q_len)]
    residual = sum(h[p, q] * v[..., p_len - 1 - p:nx - p, q_len - 1 - q:ny - q, :] for p, q in taps)
    return sum(
        _pad(_pad(torch.conj(h[p, q]) * residual, -2, q_len - 1 - q, q), -3, p_len - 1 - p, p)
        for p, q in taps
    )


class _TorchParams:
    """Leaf tensors mirroring a LearnableParams instance."""

    def __init__(self, params: LearnableParams):
        self.depth = params.unroll_depth
        self.log_hyper, self.hps, self.hs = [], [], []
        for values in params.sets:
            hps = np.ascontiguousarray(values.hps_taps, dtype=np.complex128)
            hs = np.ascontiguousarray(values.hs_taps, dtype=np.complex128)
            self.log_hyper.append(torch.tensor(values.log_hyper, dtype=torch.float64, requires_grad=True))
            self.hps.append(torch.tensor(hps.view(np.float64).reshape(hps.shape + (2,)), requires_grad=True))
            self.hs.append(torch.tensor(hs.view(np.float64).reshape(hs.shape + (2,)), requires_grad=True))

    @property
    def leaves(self) -> List[torch.Tensor]:
        return self.log_hyper + self.hps + self.hs

    def sweep_values(self, sweep: int):
        index = 0 if len(self.log_hyper) == 1 else sweep
        hyper = torch.exp(self.log_hyper[index])
        return hyper, torch.view_as_complex(self.hps[index]), torch.view_as_complex(self.hs[index])

    def gradient_vector(self) -> np.ndarray:
        chunks = []
        for triple in zip(self.log_hyper, self.hps, self.hs):
            for leaf in triple:
                grad = leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)
                chunks.append(grad.detach().numpy().ravel())
        return np.concatenate(chunks)

    def gradient_norm(self) -> float:
        return float(np.linalg.norm(self.gradient_vector()))

    def to_params(self) -> LearnableParams:
        sets = [
            ParameterSet(
                log_hyper.detach().numpy().copy(),
                torch.view_as_complex(hps.detach()).numpy().copy(),
                torch.view_as_complex(hs.detach()).numpy().copy(),
            )
            for log_hyper, hps, hs in zip(self.log_hyper, self.hps, self.hs)
        ]
        return LearnableParams(sets, self.depth)


class _PairTensors:
    def __init__(self, pair: TrainingPair):
        nx, ny, _ = pair.gamma_ref.shape
        self.y = torch.from_numpy(np.asarray(pair.y_under, dtype=np.complex128))
        self.mask = torch.from_numpy(np.asarray(pair.mask.mask, dtype=np.float64))
        self.coils = torch.from_numpy(np.asarray(pair.coils.maps, dtype=np.complex128))[..., None]
        self.gamma_ref = torch.from_numpy(np.asarray(pair.gamma_ref, dtype=np.complex128))
        weights = gradient_weights(nx, ny)
        self.wx = torch.from_numpy(weights.wx)[..., None]
        self.wy = torch.from_numpy(weights.wy)[..., None]
        self.w2 = self.wx ** 2 + self.wy ** 2
        self.zero_filled = torch.sum(torch.conj(self.coils) * _ifft2c(self.mask * self.y), dim=0)
        self.data_kspace = self.mask * _fft2c(self.zero_filled)


def _paper_sweep(gamma: torch.Tensor, pair: _PairTensors, hyper, hps, hs) -> torch.Tensor:
    lambda1, lambda2, rho0, rho1, rho2 = hyper
    kspace = _fft2c(gamma)
    channels = torch.stack([1j * pair.wx * kspace, 1j * pair.wy * kspace])
    u_hat = channels - (2.0 * lambda1 / rho1) * _gram_spatial(channels, hs)
    z = gamma - (2.0 * lambda2 / rho2) * _gram_temporal(gamma, hps)
    predicted = _fft2c(pair.coils * gamma)
    x_coils = _ifft2c((pair.mask * pair.y + rho0 * predicted) / (pair.mask + rho0))
    combined = torch.sum(torch.conj(pair.coils) * x_coils, dim=0)
    numerator = (rho1 * (-1j * pair.wx * u_hat[0] - 1j * pair.wy * u_hat[1])
                 + rho0 * _fft2c(combined) + rho2 * _fft2c(z) + pair.data_kspace)
    denominator = pair.mask + rho0 + rho1 * pair.w2 + rho2
    return _ifft2c(numerator / denominator)


def _unrolled(tparams: _TorchParams, pair: _PairTensors) -> torch.Tensor:
    gamma = pair.zero_filled
    for k in range(tparams.depth):
        hyper, hps, hs = tparams.sweep_values(k)
        gamma = _paper_sweep(gamma, pair, hyper, hps, hs)
        if not torch.isfinite(torch.view_as_real(gamma)).all():
            raise NumericalError("non-finite intermediate in unrolled sweep", sweep=k + 1)
    return gamma


def _batch_loss(tparams: _TorchParams, pairs: Sequence[_PairTensors]) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for pair in pairs:
        diff = _unrolled(tparams, pair) - pair.gamma_ref
        total = total + torch.mean(diff.real ** 2 + diff.imag ** 2)
    return total / len(pairs)


def _check_pair(params: LearnableParams, pair: TrainingPair) -> None:
    nx, ny, nt = pair.gamma_ref.shape
    check_same_shape("label", pair.gamma_ref.shape, "mask", pair.mask.shape)
    if not params.tied and len(params.sets) != params.unroll_depth:
        raise InputValidationError("untied parameters need one set per sweep",
                                   sets=len(params.sets), depth=params.unroll_depth)
    for values in params.sets:
        if values.hps_taps.size > nt:
            raise InputValidationError("temporal filter longer than the frame count",
                                       taps=values.hps_taps.size, nt=nt)
        kx, ky, frames = values.hs_taps.shape
        if kx > nx or ky > ny:
            raise InputValidationError("spatial filter larger than the frame", kernel=(kx, ky), frame=(nx, ny))
        if frames not in (1, nt):
            raise InputValidationError("spatial filter bank frame count mismatch", frames=frames, nt=nt)


def _prepare(params: LearnableParams, batch: Sequence[TrainingPair]) -> List[_PairTensors]:
    if len(batch) == 0:
        raise InputValidationError("training needs a nonempty batch")
    for pair in batch:
        check_same_shape("pair", pair.gamma_ref.shape, "first pair", batch[0].gamma_ref.shape)
        _check_pair(params, pair)
    return [_PairTensors(pair) for pair in batch]


def loss(gamma_out: np.ndarray, gamma_ref: np.ndarray) -> float:
    """Mean squared magnitude of the difference."""
    check_same_shape("output", np.shape(gamma_out), "reference", np.shape(gamma_ref))
    return float(np.mean(np.abs(np.asarray(gamma_out) - np.asarray(gamma_ref)) ** 2))


def forward_unrolled(params: LearnableParams, pair: TrainingPair) -> np.ndarray:
    """Paper-mode reconstruction of one pair with the given parameters."""
    tensors = _prepare(params, [pair])
    with torch.no_grad():
        gamma = _unrolled(_TorchParams(params), tensors[0])
    return gamma.numpy().copy()


def batch_loss(params: LearnableParams, batch: Sequence[TrainingPair]) -> float:
    tensors = _prepare(params, batch)
    with torch.no_grad():
        return float(_batch_loss(_TorchParams(params), tensors))


def gradient(params: LearnableParams, batch: Sequence[TrainingPair]) -> Tuple[float, np.ndarray]:
    """Mean batch loss and its gradient over the coordinates of to_vector()."""
    tensors = _prepare(params, batch)
    tparams = _TorchParams(params)
    value = _batch_loss(tparams, tensors)
    value.backward()
    return float(value.detach()), tparams.gradient_vector()


def _optimizer(tparams: _TorchParams, config: TrainConfig) -> torch.optim.Optimizer:
    groups = [
        {"params": tparams.log_hyper, "lr": config.lr_hyper},
        {"params": tparams.hps + tparams.hs, "lr": config.lr_taps},
    ]
    if config.optimizer == "adam":
        return torch.optim.Adam(groups)
    return torch.optim.SGD(groups)


def train(params0: LearnableParams, pairs: Sequence[TrainingPair], config: TrainConfig) -> TrainingResult:
    """Gradient training; history rows are (step, loss, grad_norm) before each update.

    The last row holds the loss at the returned parameters.
    """
    tensors = _prepare(params0, pairs)
    tparams = _TorchParams(params0)
    optimizer = _optimizer(tparams, config)
    history: List[Tuple[int, float, float]] = []
    logger.info(f"🎯 Training on {len(pairs)} pairs, depth {params0.unroll_depth}, "
                f"{config.steps} steps ({config.optimizer})")

    for step in range(config.steps + 1):
        optimizer.zero_grad()
        value = _batch_loss(tparams, tensors)
        value.backward()
        current = float(value.detach())
        grad_norm = tparams.gradient_norm()
        history.append((step, current, grad_norm))
        logger.debug(f"step {step}: loss {current:.6e}, |grad| {grad_norm:.3e}")
        if not math.isfinite(current) or current > config.divergence_factor * history[0][1]:
            logger.error(f"❌ Training diverged at step {step} (loss {current:.3e})")
            raise DivergenceError("training loss diverged", history=[row[1] for row in history])
        if step == config.steps:
            break
        if config.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(tparams.leaves, config.max_grad_norm)
        optimizer.step()

    logger.info(f"✅ Training finished: loss {history[0][1]:.6e} -> {history[-1][1]:.6e}")
    return TrainingResult(tparams.to_params(), history)


def annihilation_residual(taps: np.ndarray, volumes: Sequence[np.ndarray]) -> float:
    """||gamma * h|| / (||h|| ||gamma||) accumulated over the given volumes."""
    h = TemporalFilter(np.asarray(taps, dtype=np.complex128))
    residual = sum(float(np.sum(np.abs(annihilate_temporal(np.asarray(v), h)) ** 2)) for v in volumes)
    energy = sum(float(np.sum(np.abs(v) ** 2)) for v in volumes)
    if energy == 0:
        return 0.0
    return math.sqrt(residual / energy) / float(np.linalg.norm(h.taps))


def make_training_pairs(count: int, phantom: PhantomConfig, acceleration: float, acs_lines: int,
                        coils: CoilSet, noise: float = 0.0) -> List[TrainingPair]:
    """Seeded synthetic pairs; phantom and mask seeds advance with the index."""
    pairs = []
    for index in range(count):
        config = phantom.model_copy(update={"seed": phantom.seed + index})
        gamma_ref, _ = generate_phantom(config)
        mask = make_mask(config.nx, config.ny, config.nt, acceleration, acs_lines,
                         seed=config.seed + MASK_SEED_OFFSET)
        y = undersample(gamma_ref, coils, mask, noise=noise, seed=config.seed + NOISE_SEED_OFFSET)
        pairs.append(TrainingPair(y, mask, coils, gamma_ref))
    return pairs


HISTORY_COLUMNS = ["step", "loss", "grad_norm"]


def write_history_csv(path, history: Sequence[Tuple[int, float, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for step, value, grad_norm in history:
            writer.writerow([step, f"{value:.12g}", f"{grad_norm:.12g}"])
    return path
