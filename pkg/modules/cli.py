"""
Command-line front end.

Each subcommand resolves its settings (flags > --config file > PSNET_*
environment > defaults), runs one library operation, writes its outputs and a
``<output>.manifest`` echoing the resolved settings. Exit codes: 0 success,
2 usage error, 3 invalid input, 4 numerical failure.
"""
import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.fft
import torch
from PIL import Image

from modules import psnt_io
from modules.errors import InputValidationError, PSNetError
from modules.hqs_solver import FilterBank, SolverConfig, reconstruct, write_objective_csv
from modules.learn import LearnableParams, make_training_pairs, train, write_history_csv
from modules.metrics_report import report, write_report_csv
from modules.models import (Hyperparams, MaskConfig, PhantomConfig, RunConfig, SolverOptions, TrainConfig,
                            build_model)
from modules.pipeline import PipelineConfig, ReconstructionPipeline
from modules.ps_model import calibrate_nullspace, generate_phantom, spatial_filter_default
from modules.sampling import calibration_region, make_coils, make_mask, undersample
from modules.tensor_core import Domain
from utils import config as run_config

logger = logging.getLogger(__name__)

HYPER_FLAGS = ("lambda1", "lambda2", "rho0", "rho1", "rho2")

PHANTOM_DEFAULTS = {"nx": 32, "ny": 32, "nt": 16, "order": 3, "seed": None,
                    "modulus_min": 0.95, "modulus_max": 1.0, "noise": 0.0, "constant": False}
SOLVER_DEFAULTS = {"mode": "paper", "variant": "ps_net", "iters": 10,
                   **{name: 1.0 for name in HYPER_FLAGS}, "cg_tol": 1e-12, "cg_maxiter": 500}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "phantom": {**PHANTOM_DEFAULTS, "out": "phantom.psnt"},
    "mask": {"nx": 32, "ny": 32, "nt": 16, "accel": 4.0, "acs": 4, "seed": None,
             "fixed_pattern": False, "out": "mask.psnt"},
    "coils": {"nx": 32, "ny": 32, "count": 1, "seed": None, "out": "coils.psnt"},
    "undersample": {"image": None, "coils": None, "mask": None, "noise": 0.0, "seed": None,
                    "out": "kspace.psnt"},
    "calibrate": {"train": None, "kspace": None, "coils": None, "mask": None, "window": None,
                  "out": "hps.psnt"},
    "recon": {"kspace": None, "mask": None, "coils": None, "hps": None, "hs": None, "params": None,
              **SOLVER_DEFAULTS, "out": "recon.psnt", "log": None},
    "train": {"pairs": 10, "nx": 32, "ny": 32, "nt": 8, "order": 3, "accel": 4.0, "acs": 4,
              "coil_count": 1, "noise": 0.0, "seed": None, "depth": 5, "steps": 100,
              "lr_hyper": 1e-2, "lr_taps": 1e-3, "optimizer": "sgd", "max_grad_norm": 1.0,
              "untied": False, "hps": None, "hs": None, "out": "params.psnp", "history": None},
    "eval": {"recon": None, "ref": None, "peak_mode": "reference", "out": "metrics.csv"},
    "export-pgm": {"input": None, "out": "frames"},
    "pipeline": {**PHANTOM_DEFAULTS, "accel": 4.0, "acs": 4, "coil_count": 1, "window": None,
                 **SOLVER_DEFAULTS, "mode": "exact", "peak_mode": "reference", "out": "pipeline_out"},
}
SETTING_TYPES = {"seed": int, "window": int}
PATH_SETTINGS = {"out", "image", "coils", "mask", "kspace", "hps", "hs", "params", "train", "recon",
                 "ref", "input", "log", "history"}
STOCHASTIC = {"phantom", "mask", "coils", "train", "pipeline"}


class UsageError(Exception):
    """Missing or contradictory flags detected after settings are resolved."""


def _as_list(value) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return list(value)


def _require(settings: Dict[str, Any], *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names if settings.get(name) in (None, [], "")]
    if missing:
        raise UsageError(f"missing required flag(s): {', '.join(missing)}")


def _solver_options(settings: Dict[str, Any]) -> Dict[str, Any]:
    return {"mode": settings["mode"], "variant": settings["variant"], "iterations": settings["iters"],
            "cg_tol": settings["cg_tol"], "cg_maxiter": settings["cg_maxiter"]}


def _hyper(settings: Dict[str, Any]) -> Hyperparams:
    return build_model(Hyperparams, **{name: settings[name] for name in HYPER_FLAGS})


def _phantom_config(settings: Dict[str, Any]) -> PhantomConfig:
    return build_model(PhantomConfig, seed=settings["seed"], nx=settings["nx"], ny=settings["ny"],
                       nt=settings["nt"], order=settings["order"], modulus_min=settings["modulus_min"],
                       modulus_max=settings["modulus_max"], noise=settings["noise"],
                       constant=settings["constant"])


def cmd_phantom(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    volume, decomp = generate_phantom(_phantom_config(settings))
    psnt_io.write_volume(settings["out"], volume, Domain.IMAGE)
    return {"roots": ",".join(repr(complex(z)) for z in decomp.roots)}


def cmd_mask(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    mask = make_mask(settings["nx"], settings["ny"], settings["nt"], settings["accel"], settings["acs"],
                     seed=settings["seed"], vary_per_frame=not settings["fixed_pattern"])
    psnt_io.write_mask(settings["out"], mask)
    return {"lines_per_frame": int(mask.lines_per_frame()[0]),
            "effective_acceleration": mask.effective_acceleration()}


def cmd_coils(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    coils = make_coils(settings["nx"], settings["ny"], settings["count"], seed=settings["seed"])
    psnt_io.write_coils(settings["out"], coils)
    return {}


def cmd_undersample(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    _require(settings, "image", "coils", "mask")
    if settings["noise"] > 0:
        _require(settings, "seed")
    gamma, _ = psnt_io.read_volume(settings["image"], expect=Domain.IMAGE)
    coils = psnt_io.read_coils(settings["coils"])
    mask = psnt_io.read_mask(settings["mask"])
    y = undersample(gamma, coils, mask, noise=settings["noise"], seed=settings["seed"] or 0)
    psnt_io.write_kspace(settings["out"], y)
    return {"coil_count": coils.count}


def cmd_calibrate(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    _require(settings, "window")
    training = [psnt_io.read_volume(path, expect=Domain.IMAGE)[0] for path in _as_list(settings["train"])]
    if settings["kspace"]:
        _require(settings, "coils", "mask")
        coils = psnt_io.read_coils(settings["coils"])
        y = psnt_io.read_kspace(settings["kspace"], coils.count)
        training.extend(calibration_region(y, psnt_io.read_mask(settings["mask"])))
    if not training:
        raise UsageError("calibrate needs --train volumes or --kspace data")
    result = calibrate_nullspace(training, settings["window"])
    psnt_io.write_temporal_filter(settings["out"], result.filter)
    return {"residual": result.residual, "hankel_rows": result.rows,
            "singular_values": ",".join(repr(float(s)) for s in result.singular_values)}


def _load_instance(settings: Dict[str, Any]):
    _require(settings, "kspace", "mask", "coils")
    coils = psnt_io.read_coils(settings["coils"])
    mask = psnt_io.read_mask(settings["mask"])
    y = psnt_io.read_kspace(settings["kspace"], coils.count)
    return y, mask, coils


def cmd_recon(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    y, mask, coils = _load_instance(settings)
    options = _solver_options(settings)
    if settings["params"]:
        learned = LearnableParams.load(settings["params"])
        cfg = learned.to_solver_config()
        if "iters" not in explicit:
            options["iterations"] = settings["iters"] = cfg.iterations
        cfg = build_model(SolverConfig, **options, hyper=cfg.hyper, filters=cfg.filters)
    else:
        _require(settings, "hps")
        spatial = psnt_io.read_spatial_filter(settings["hs"]) if settings["hs"] else spatial_filter_default()
        filters = FilterBank(psnt_io.read_temporal_filter(settings["hps"]), spatial)
        cfg = build_model(SolverConfig, **options, hyper=_hyper(settings), filters=filters)
    result = reconstruct(y, mask, coils, cfg)
    out = Path(settings["out"])
    psnt_io.write_volume(out, result.gamma, Domain.IMAGE)
    log_path = Path(settings["log"]) if settings["log"] else out.with_suffix(".objective.csv")
    write_objective_csv(log_path, result.log)
    return {"objective_log": str(log_path), "final_objective": result.log[-1].total}


def cmd_train(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    phantom = build_model(PhantomConfig, seed=settings["seed"], nx=settings["nx"], ny=settings["ny"],
                          nt=settings["nt"], order=settings["order"])
    build_model(MaskConfig, nx=settings["nx"], ny=settings["ny"], nt=settings["nt"],
                acceleration=settings["accel"], acs_lines=settings["acs"], seed=settings["seed"])
    coils = make_coils(settings["nx"], settings["ny"], settings["coil_count"], seed=settings["seed"])
    pairs = make_training_pairs(settings["pairs"], phantom, settings["accel"], settings["acs"],
                                coils, noise=settings["noise"])
    train_config = build_model(TrainConfig, steps=settings["steps"], depth=settings["depth"],
                               lr_hyper=settings["lr_hyper"], lr_taps=settings["lr_taps"],
                               optimizer=settings["optimizer"], max_grad_norm=settings["max_grad_norm"],
                               tied=not settings["untied"])
    if settings["hps"]:
        temporal = psnt_io.read_temporal_filter(settings["hps"])
    else:
        temporal = calibrate_nullspace([pair.gamma_ref for pair in pairs], settings["order"] + 1).filter
    spatial = psnt_io.read_spatial_filter(settings["hs"]) if settings["hs"] else spatial_filter_default()
    params0 = LearnableParams.initial(temporal, spatial, train_config.depth, tied=train_config.tied)
    result = train(params0, pairs, train_config)
    out = Path(settings["out"])
    result.params.save(out)
    history_path = Path(settings["history"]) if settings["history"] else out.with_suffix(".history.csv")
    write_history_csv(history_path, result.history)
    return {"initial_loss": result.history[0][1], "final_loss": result.history[-1][1],
            "history_log": str(history_path)}


def cmd_eval(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    _require(settings, "recon", "ref")
    reference, _ = psnt_io.read_volume(settings["ref"], expect=Domain.IMAGE)
    cases = [(Path(path).stem, psnt_io.read_volume(path, expect=Domain.IMAGE)[0], reference)
             for path in _as_list(settings["recon"])]
    summary = report(cases, peak_mode=settings["peak_mode"])
    write_report_csv(settings["out"], summary)
    return {"mse": summary.mse, "psnr_db": summary.psnr, "ssim": summary.ssim}


def export_pgm(volume: np.ndarray, out_dir) -> List[Path]:
    """One 8-bit P5 PGM per frame, magnitudes scaled by the volume maximum."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    magnitude = np.abs(volume)
    peak = magnitude.max()
    scaled = magnitude / peak if peak > 0 else np.zeros_like(magnitude)
    frames = np.round(255.0 * scaled).astype(np.uint8)
    paths = []
    for t in range(frames.shape[2]):
        path = out_dir / f"frame_{t:03d}.pgm"
        Image.fromarray(np.ascontiguousarray(frames[:, :, t])).save(path, format="PPM")
        paths.append(path)
    return paths


def cmd_export_pgm(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    _require(settings, "input")
    volume, _ = psnt_io.read_volume(settings["input"])
    paths = export_pgm(volume, settings["out"])
    return {"frames": len(paths)}


def cmd_pipeline(settings: Dict[str, Any], explicit: set) -> Dict[str, Any]:
    config = build_model(
        PipelineConfig,
        phantom=_phantom_config(settings),
        acceleration=settings["accel"],
        acs_lines=settings["acs"],
        coils=settings["coil_count"],
        noise=0.0,
        calibration_window=settings["window"],
        solver=build_model(SolverOptions, **_solver_options(settings)),
        hyper=_hyper(settings),
        peak_mode=settings["peak_mode"],
        output_dir=Path(settings["out"]),
    )
    outcome = ReconstructionPipeline().execute_full_workflow(config)
    if outcome["status"] != "success":
        error = outcome["error"]
        if isinstance(error, PSNetError):
            raise error
        raise InputValidationError(outcome["error_message"] or "pipeline failed")
    return {"psnr_gain_db": outcome["results"]["psnr_gain"]}


HANDLERS: Dict[str, Callable[[Dict[str, Any], set], Dict[str, Any]]] = {
    "phantom": cmd_phantom,
    "mask": cmd_mask,
    "coils": cmd_coils,
    "undersample": cmd_undersample,
    "calibrate": cmd_calibrate,
    "recon": cmd_recon,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-pgm": cmd_export_pgm,
    "pipeline": cmd_pipeline,
}


def _add_phantom_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nx", type=int)
    parser.add_argument("--ny", type=int)
    parser.add_argument("--nt", type=int)
    parser.add_argument("--order", type=int, help="Number of PS components")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--modulus-min", type=float)
    parser.add_argument("--modulus-max", type=float)
    parser.add_argument("--noise", type=float, help="Image-domain noise level")
    parser.add_argument("--constant", action="store_true", default=None, help="Constant-in-time volume")


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=["paper", "exact"])
    parser.add_argument("--variant", choices=["ps_net", "sparse_net", "lowrank_net", "svt"])
    parser.add_argument("--iters", type=int, help="Number of HQS sweeps")
    for name in HYPER_FLAGS:
        parser.add_argument(f"--{name}", type=float)
    parser.add_argument("--cg-tol", type=float)
    parser.add_argument("--cg-maxiter", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file (a manifest works too)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--threads", type=int, help="Cap on FFT workers and torch threads")
    common.add_argument("--out", help="Output file or directory")

    parser = argparse.ArgumentParser(prog="psnet", description="PS-model dynamic MRI reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Generate a PS phantom volume")
    _add_phantom_flags(p)

    p = sub.add_parser("mask", parents=[common], help="Generate a Cartesian undersampling mask")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--nt", type=int)
    p.add_argument("--accel", type=float, help="Acceleration factor")
    p.add_argument("--acs", type=int, help="Number of always-sampled central lines")
    p.add_argument("--seed", type=int)
    p.add_argument("--fixed-pattern", action="store_true", default=None, help="Same lines in every frame")

    p = sub.add_parser("coils", parents=[common], help="Simulate coil sensitivity maps")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("undersample", parents=[common], help="Encode an image into undersampled k-space")
    p.add_argument("--image")
    p.add_argument("--coils")
    p.add_argument("--mask")
    p.add_argument("--noise", type=float, help="Complex k-space noise standard deviation")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("calibrate", parents=[common], help="Calibrate a temporal null-space filter")
    p.add_argument("--train", nargs="+", help="Training image volumes")
    p.add_argument("--kspace", help="Calibrate from lines sampled in every frame instead")
    p.add_argument("--coils")
    p.add_argument("--mask")
    p.add_argument("--window", type=int, help="Filter length L+1")

    p = sub.add_parser("recon", parents=[common], help="HQS reconstruction")
    p.add_argument("--kspace")
    p.add_argument("--mask")
    p.add_argument("--coils")
    p.add_argument("--hps", help="Temporal filter file")
    p.add_argument("--hs", help="Spatial filter bank file (default: Laplacian)")
    p.add_argument("--params", help="Learned parameter file; replaces weights and filters")
    p.add_argument("--log", help="Objective CSV path")
    _add_solver_flags(p)

    p = sub.add_parser("train", parents=[common], help="Train unrolled parameters on synthetic pairs")
    p.add_argument("--pairs", type=int)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--nt", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--accel", type=float)
    p.add_argument("--acs", type=int)
    p.add_argument("--coil-count", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int, help="Unrolled sweeps")
    p.add_argument("--steps", type=int, help="Gradient steps")
    p.add_argument("--lr-hyper", type=float)
    p.add_argument("--lr-taps", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--max-grad-norm", type=float)
    p.add_argument("--untied", action="store_true", default=None, help="One parameter set per sweep")
    p.add_argument("--hps", help="Initial temporal filter (default: calibrated from the labels)")
    p.add_argument("--hs", help="Initial spatial filter bank")
    p.add_argument("--history", help="Loss history CSV path")

    p = sub.add_parser("eval", parents=[common], help="MSE / PSNR / SSIM report")
    p.add_argument("--recon", nargs="+")
    p.add_argument("--ref")
    p.add_argument("--peak-mode", choices=["reference", "output"])

    p = sub.add_parser("export-pgm", parents=[common], help="Export magnitude frames as 8-bit PGM")
    p.add_argument("--in", dest="input")

    p = sub.add_parser("pipeline", parents=[common], help="Run the full synthetic workflow")
    _add_phantom_flags(p)
    p.add_argument("--accel", type=float)
    p.add_argument("--acs", type=int)
    p.add_argument("--coil-count", type=int)
    p.add_argument("--window", type=int, help="Calibration filter length")
    p.add_argument("--peak-mode", choices=["reference", "output"])
    _add_solver_flags(p)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or run_config.get_log_level()).upper()
    numeric = getattr(logging, level, None)
    if not isinstance(numeric, int):
        raise InputValidationError("unknown log level", level=level)
    logging.basicConfig(level=numeric, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    logging.getLogger().setLevel(numeric)


@contextlib.contextmanager
def thread_limits(threads: Optional[int]):
    if threads is None:
        yield
        return
    if threads < 1:
        raise InputValidationError("--threads must be positive", threads=threads)
    torch.set_num_threads(threads)
    with scipy.fft.set_workers(threads):
        yield


def _manifest_path(out) -> Path:
    return Path(f"{Path(out)}.manifest")


def _run_record(command: str, settings: Dict[str, Any], extras: Dict[str, Any]) -> RunConfig:
    paths = {key: ",".join(map(str, value)) if isinstance(value, list) else str(value)
             for key, value in settings.items() if key in PATH_SETTINGS and value is not None}
    rest = {key: value for key, value in {**settings, **extras}.items()
            if key not in PATH_SETTINGS and key != "seed"}
    return build_model(RunConfig, command=command, seed=settings.get("seed"), paths=paths, settings=rest)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    flags = vars(args)
    command = flags.pop("command")
    config_path = flags.pop("config")
    log_level = flags.pop("log_level")
    threads = flags.pop("threads")
    explicit = {key for key, value in flags.items() if value is not None}

    try:
        configure_logging(log_level)
        settings = run_config.resolve(flags, DEFAULTS[command], config_path, SETTING_TYPES)
        if command in STOCHASTIC:
            _require(settings, "seed")
        if threads is None:
            threads = run_config.get_default_threads()
        out = settings.get("out")
        if out and not Path(out).is_absolute() and "out" not in explicit:
            settings["out"] = str(run_config.get_output_dir() / out)
        logger.info(f"🚀 psnet {command}")
        with thread_limits(threads):
            extras = HANDLERS[command](settings, explicit)
        run = _run_record(command, settings, extras)
        run_config.write_manifest(_manifest_path(settings["out"]), run.manifest())
    except UsageError as exc:
        print(f"psnet {command}: error: {exc}", file=sys.stderr)
        return 2
    except PSNetError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"💥 Unexpected failure: {exc}")
        return 4
    print(f"✅ {command} finished: {settings['out']}")
    return 0
