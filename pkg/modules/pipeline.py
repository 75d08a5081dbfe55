"""
Sequential end-to-end workflow: phantom -> mask -> coils -> undersample ->
calibrate -> reconstruct -> evaluate.

Each step runs in order, returns a StepResult and hands its data to the steps
after it. The first failing step stops the workflow.
"""
import logging
import time
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from pydantic import BaseModel, Field

from modules import psnt_io
from modules.errors import PSNetError
from modules.hqs_solver import FilterBank, SolverConfig, reconstruct, write_objective_csv
from modules.metrics_report import report, write_report_csv
from modules.models import Hyperparams, PeakMode, PhantomConfig, SolverOptions
from modules.ps_model import calibrate_nullspace, generate_phantom, spatial_filter_default
from modules.sampling import (
    COIL_SEED_OFFSET,
    MASK_SEED_OFFSET,
    NOISE_SEED_OFFSET,
    adjoint_encode,
    calibration_region,
    make_coils,
    make_mask,
    undersample,
)
from modules.tensor_core import Domain

logger = logging.getLogger(__name__)


class WorkflowStatus(Enum):
    """Workflow execution status"""
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class StepResult:
    """Result from a workflow step"""
    step_name: str
    status: WorkflowStatus
    data: Dict[str, Any]
    processing_time: float
    timestamp: str
    error_message: Optional[str] = None


class PipelineConfig(BaseModel):
    """Model for one synthetic end-to-end run."""
    phantom: PhantomConfig
    acceleration: float = Field(4.0, ge=1.0)
    acs_lines: int = Field(4, ge=0)
    vary_per_frame: bool = True
    coils: int = Field(1, ge=1)
    noise: float = Field(0.0, ge=0.0)
    calibration_window: Optional[int] = Field(None, ge=2)
    solver: SolverOptions = Field(default_factory=lambda: SolverOptions(mode="exact"))
    hyper: Hyperparams = Field(default_factory=Hyperparams)
    peak_mode: PeakMode = "reference"
    output_dir: Optional[Path] = None


@dataclass
class PipelineStep:
    number: int
    name: str
    action: Callable[[Dict[str, Any], PipelineConfig], Dict[str, Any]]


def _phantom(results, config):
    gamma_ref, decomp = generate_phantom(config.phantom)
    logger.info(f"   🌀 Temporal roots: {', '.join(f'{z:.4f}' for z in decomp.roots)}")
    return {"gamma_ref": gamma_ref, "decomposition": decomp}


def _mask(results, config):
    p = config.phantom
    mask = make_mask(p.nx, p.ny, p.nt, config.acceleration, config.acs_lines,
                     seed=p.seed + MASK_SEED_OFFSET, vary_per_frame=config.vary_per_frame)
    logger.info(f"   🎭 Effective acceleration {mask.effective_acceleration():.2f}")
    return {"mask": mask}


def _coils(results, config):
    return {"coils": make_coils(config.phantom.nx, config.phantom.ny, config.coils,
                                 seed=config.phantom.seed + COIL_SEED_OFFSET)}


def _undersample(results, config):
    y = undersample(results["gamma_ref"], results["coils"], results["mask"],
                    noise=config.noise, seed=config.phantom.seed + NOISE_SEED_OFFSET)
    zero_filled = adjoint_encode(y, results["coils"], results["mask"])
    return {"y": y, "zero_filled": zero_filled}


def _calibrate(results, config):
    window = config.calibration_window or config.phantom.order + 1
    calibration = calibrate_nullspace(calibration_region(results["y"], results["mask"]), window)
    logger.info(f"   🧮 Calibrated {calibration.filter.order}-order filter from {calibration.rows} Hankel rows, "
                f"residual {calibration.residual:.3e}")
    return {"calibration": calibration}


def _reconstruct(results, config):
    cfg = SolverConfig(
        **config.solver.model_dump(),
        hyper=config.hyper,
        filters=FilterBank(results["calibration"].filter, spatial_filter_default()),
    )
    result = reconstruct(results["y"], results["mask"], results["coils"], cfg)
    return {"reconstruction": result}


def _evaluate(results, config):
    gamma_ref = results["gamma_ref"]
    summary = report(
        [("zero_filled", results["zero_filled"], gamma_ref),
         ("reconstruction", results["reconstruction"].gamma, gamma_ref)],
        peak_mode=config.peak_mode,
    )
    per_case = {
        name: report([(name, volume, gamma_ref)], peak_mode=config.peak_mode)
        for name, volume in (("zero_filled", results["zero_filled"]),
                             ("reconstruction", results["reconstruction"].gamma))
    }
    gain = per_case["reconstruction"].psnr - per_case["zero_filled"].psnr
    logger.info(f"   📈 PSNR gain over zero-filled: {gain:.2f} dB")
    return {"report": summary, "case_reports": per_case, "psnr_gain": gain}


class ReconstructionPipeline:
    """
    Workflow Coordinator
    Runs every step of a synthetic reconstruction experiment in order
    """

    def __init__(self):
        self.workflow_name = "Synthetic PS Reconstruction"
        self.steps = {
            1: PipelineStep(1, "phantom", _phantom),
            2: PipelineStep(2, "mask", _mask),
            3: PipelineStep(3, "coils", _coils),
            4: PipelineStep(4, "undersample", _undersample),
            5: PipelineStep(5, "calibrate", _calibrate),
            6: PipelineStep(6, "reconstruct", _reconstruct),
            7: PipelineStep(7, "evaluate", _evaluate),
        }

    def execute_step(self, step: PipelineStep, results: Dict[str, Any], config: PipelineConfig) -> StepResult:
        start = time.perf_counter()
        logger.info(f"🔍 Step {step.number}: {step.name} - Starting...")
        try:
            data = step.action(results, config)
        except PSNetError as e:
            elapsed = time.perf_counter() - start
            logger.error(f"❌ Step {step.number}: {step.name} failed: {e}")
            return StepResult(step.name, WorkflowStatus.FAILED, {"error": e}, elapsed,
                              datetime.now().isoformat(), error_message=str(e))
        elapsed = time.perf_counter() - start
        logger.info(f"✅ Step {step.number}: {step.name} completed in {elapsed:.2f}s")
        return StepResult(step.name, WorkflowStatus.COMPLETED, data, elapsed, datetime.now().isoformat())

    def execute_full_workflow(self, config: PipelineConfig) -> Dict[str, Any]:
        """
        Execute the complete sequential workflow

        Args:
            config: Pipeline settings

        Returns:
            Status, per-step results, collected data and timing summary
        """
        start = time.perf_counter()
        logger.info(f"🚀 Starting {self.workflow_name}")
        logger.info(f"📊 Pipeline: {len(self.steps)} sequential steps")

        step_results: Dict[str, StepResult] = {}
        collected: Dict[str, Any] = {}
        failed: Optional[StepResult] = None
        for number in sorted(self.steps):
            step = self.steps[number]
            if failed is not None:
                step_results[step.name] = StepResult(step.name, WorkflowStatus.SKIPPED, {}, 0.0,
                                                     datetime.now().isoformat())
                continue
            result = self.execute_step(step, collected, config)
            step_results[step.name] = result
            if result.status == WorkflowStatus.COMPLETED:
                collected.update(result.data)
            else:
                failed = result

        total_time = time.perf_counter() - start
        if failed is None and config.output_dir is not None:
            self.save_outputs(collected, config.output_dir)

        outcome = {
            "status": "failed" if failed else "success",
            "error_message": failed.error_message if failed else None,
            "error": failed.data.get("error") if failed else None,
            "step_results": step_results,
            "results": collected,
            "execution_summary": {
                "total_steps": len(self.steps),
                "completed_steps": sum(r.status == WorkflowStatus.COMPLETED for r in step_results.values()),
                "total_time": total_time,
            },
            "timestamp": datetime.now().isoformat(),
        }
        if failed:
            logger.error(f"💥 Workflow failed at step '{failed.step_name}'")
        else:
            logger.info(f"🎉 Workflow completed successfully in {total_time:.2f}s")
        return outcome

    @staticmethod
    def save_outputs(results: Dict[str, Any], output_dir) -> Dict[str, Path]:
        """Write every intermediate artifact into one directory."""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        reconstruction = results["reconstruction"]
        files = {
            "reference": psnt_io.write_volume(output_dir / "reference.psnt", results["gamma_ref"], Domain.IMAGE),
            "mask": psnt_io.write_mask(output_dir / "mask.psnt", results["mask"]),
            "coils": psnt_io.write_coils(output_dir / "coils.psnt", results["coils"]),
            "kspace": psnt_io.write_kspace(output_dir / "kspace.psnt", results["y"]),
            "zero_filled": psnt_io.write_volume(output_dir / "zero_filled.psnt", results["zero_filled"], Domain.IMAGE),
            "filter": psnt_io.write_temporal_filter(output_dir / "hps.psnt", results["calibration"].filter),
            "reconstruction": psnt_io.write_volume(output_dir / "recon.psnt", reconstruction.gamma, Domain.IMAGE),
            "objective": write_objective_csv(output_dir / "objective.csv", reconstruction.log),
            "metrics": write_report_csv(output_dir / "metrics.csv", results["report"]),
        }
        logger.info(f"💾 Saved {len(files)} files to {output_dir}")
        return files
