"""
Data models for the reconstruction toolkit.

Validated configuration records shared by the library modules and the CLI.
Array-carrying containers live next to the code that owns them.
"""
import math
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from modules.errors import InputValidationError

SolverMode = Literal["paper", "exact"]
SolverVariant = Literal["ps_net", "sparse_net", "lowrank_net", "svt"]
OptimizerName = Literal["sgd", "adam"]
PeakMode = Literal["reference", "output"]


class Hyperparams(BaseModel):
    """Model for the scalar weights of the penalty function.

    A zero lambda switches its regularizer off. rho0 may be zero only when the
    mask samples every location.
    """
    model_config = ConfigDict(frozen=True)

    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    rho0: float = Field(1.0, ge=0.0)
    rho1: float = Field(1.0, gt=0.0)
    rho2: float = Field(1.0, gt=0.0)

    @field_validator("*")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("hyperparameters must be finite")
        return value

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.rho0, self.rho1, self.rho2)


class SolverOptions(BaseModel):
    """Model for the iteration settings of the HQS solver."""
    mode: SolverMode = "paper"
    variant: SolverVariant = "ps_net"
    iterations: int = Field(10, ge=0)
    cg_tol: float = Field(1e-12, gt=0.0)
    cg_maxiter: int = Field(500, ge=1)


class PhantomConfig(BaseModel):
    """Model for the beating-ring phantom generator."""
    seed: int
    nx: int = Field(32, ge=4)
    ny: int = Field(32, ge=4)
    nt: int = Field(16, ge=2)
    order: int = Field(3, ge=1, le=6)
    modulus_min: float = Field(0.95, gt=0.0)
    modulus_max: float = Field(1.0, gt=0.0)
    noise: float = Field(0.0, ge=0.0)
    constant: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.modulus_min > self.modulus_max:
            raise ValueError("modulus_min must not exceed modulus_max")
        if self.constant and self.order != 1:
            raise ValueError("a constant phantom has order 1")
        return self


class MaskConfig(BaseModel):
    """Model for random Cartesian phase-encode undersampling."""
    nx: int = Field(ge=1)
    ny: int = Field(ge=1)
    nt: int = Field(ge=1)
    acceleration: float = Field(4.0, ge=1.0)
    acs_lines: int = Field(4, ge=0)
    seed: int
    vary_per_frame: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.acs_lines >= self.ny and self.acceleration > 1.0:
            raise ValueError("acs_lines must be smaller than ny")
        return self


class CoilConfig(BaseModel):
    """Model for simulated coil sensitivities."""
    nx: int = Field(ge=1)
    ny: int = Field(ge=1)
    count: int = Field(1, ge=1)
    seed: int = 0


class TrainConfig(BaseModel):
    """Model for unrolled training."""
    steps: int = Field(100, ge=0)
    depth: int = Field(5, ge=0)
    lr_hyper: float = Field(1e-2, gt=0.0)
    lr_taps: float = Field(1e-3, gt=0.0)
    optimizer: OptimizerName = "sgd"
    max_grad_norm: float = Field(1.0, ge=0.0)
    tied: bool = True
    divergence_factor: float = Field(1e6, gt=1.0)


class FrameMetrics(BaseModel):
    """Model for the metrics of one frame of one case."""
    case: str
    frame: int
    mse: float
    psnr: float
    ssim: float


class EvalReport(BaseModel):
    """Model for the quantitative evaluation of one or more reconstructions."""
    mse: float = Field(ge=0.0)
    psnr: float
    psnr_infinite: bool = False
    ssim: float = Field(ge=-1.0, le=1.0 + 1e-12)
    per_frame: List[FrameMetrics] = Field(default_factory=list)


class RunConfig(BaseModel):
    """Model for one resolved command invocation, echoed into its manifest."""
    command: str
    seed: Optional[int] = None
    paths: Dict[str, str] = Field(default_factory=dict)
    settings: Dict[str, Any] = Field(default_factory=dict)

    def manifest(self) -> Dict[str, Any]:
        return {**self.settings, **self.paths, "seed": self.seed, "command": self.command}


def build_model(model_cls, **values):
    """Instantiate a model, reporting validation failures as InputValidationError."""
    try:
        return model_cls(**values)
    except ValidationError as exc:
        raise InputValidationError(f"invalid {model_cls.__name__}: {exc.errors()[0]['msg']}",
                                   field=".".join(str(p) for p in exc.errors()[0]["loc"])) from None
