"""
Command-Line Interface Module - Batch Reconstruction Pipeline

This module provides the batch commands behind ``python -m src.main``:
- simulate: phantom, clean sinogram and one noisy sinogram per dose level
- reconstruct: fbp, elda, lda or plain_gd reconstructions with per-iteration traces
- evaluate: PSNR/SSIM quality reports with mean ± standard deviation
- verify: property suites with pass/fail reports
- config: print the defaults or a resolved configuration
- log: summarise, filter and export a run's activity log

Every command writes a run manifest and an activity log into its output directory.
Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 property-suite failure.
"""

import argparse
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, List, Dict, Any, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.activity_logger import (
    ActivityLogger, log_activity, log_run_event, log_error, filter_activities, get_activity_stats,
    export_log_to_csv,
)
from src.config import (
    ConfigError, load_config, set_value, flatten_config, dump_defaults,
    geometry_from_config, regularizer_config_from_config, solver_config_from_config,
    dose_models_from_config,
)
from src.core import Image, Sinogram, ShapeMismatchError, TensorFormatError, read_tensor, write_tensor
from src.ct_model import forward_project, fbp
from src.regularizers import ct_objective
from src.sim_metrics import (
    DoseModel, QualityReport, phantom_for_geometry, simulate_noisy_sinogram, psnr, ssim,
    to_hounsfield, window_to_unit,
)
from src.solver import LineSearchError, NumericalFailure, SolverTrace, run
from src.verify import SUITES, run_suite


TOOLKIT_VERSION = "1.0.0"
METHODS = ("fbp", "elda", "lda", "plain_gd")
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_SUITE = 4


# ==============================================================================
# Console output
# ==============================================================================

def print_header(title: str):
    print("\n" + "=" * 70)
    print(f" {title}")
    print("=" * 70 + "\n")


def print_status(kind: str, message: str):
    """Print a ``[OK]``/``[WARNING]``/``[ERROR]`` prefixed line."""
    print(f"[{kind}] {message}")


def display_dataframe(df: pd.DataFrame, title: str, max_rows: int = 20):
    print_header(title)
    if df.empty:
        print("No rows.\n")
        return
    if len(df) > max_rows:
        print(df.tail(max_rows).to_string(index=False))
        print(f"\n... {len(df) - max_rows} earlier rows not shown")
    else:
        print(df.to_string(index=False))
    print()


# ==============================================================================
# Manifest and file helpers
# ==============================================================================

@dataclass
class RunManifest:
    """What produced an output directory; contains no timestamps."""
    command: str
    config_path: Optional[str]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    parameters: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = TOOLKIT_VERSION

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log_activity(path.parent / "activity.log", "file_written", path.name, user=self.command,
                     metadata={"outputs": len(self.outputs)})
        return path


def format_dose(I0: float) -> str:
    """File-name form of a dose level: 25000 -> '25000', 2.5e3 -> '2500'."""
    return str(int(I0)) if float(I0).is_integer() else f"{I0:g}"


def pair_seeds(base_seed: int, n_pairs: int) -> List[int]:
    """Independent per-pair seeds spawned from one base seed."""
    children = np.random.SeedSequence(base_seed).spawn(n_pairs)
    return [int(child.generate_state(1, np.uint64)[0]) for child in children]


def save_png(image: Image, path: Path, window_hu: Optional[Tuple[float, float]] = None,
             mu_water: float = 0.02) -> Path:
    """8-bit grayscale picture, window-levelled in HU or scaled to the image range."""
    if window_hu is not None:
        unit = window_to_unit(to_hounsfield(image.values, mu_water), *window_hu)
    else:
        low, high = float(image.values.min()), float(image.values.max())
        unit = window_to_unit(image.values, low, high if high > low else low + 1.0)
    plt.imsave(path, np.round(unit * 255).astype(np.uint8), cmap="gray", vmin=0, vmax=255)
    return path


def _read_sinogram(path: str) -> Sinogram:
    tensor = read_tensor(path)
    if not isinstance(tensor, Sinogram):
        raise ShapeMismatchError(f"{path} holds a {type(tensor).__name__}, not a sinogram")
    return tensor


def _read_image(path: str) -> Image:
    tensor = read_tensor(path)
    if not isinstance(tensor, Image):
        raise ShapeMismatchError(f"{path} holds a {type(tensor).__name__}, not an image")
    return tensor


def expand_inputs(paths: List[str], kind: str) -> List[str]:
    """
    Replace directories by the tensors of ``kind`` they contain, sorted by name.

    Files are passed through unchanged and checked when read.
    """
    expanded = []
    for path in paths:
        p = Path(path)
        if not p.is_dir():
            expanded.append(path)
            continue
        for sidecar in sorted(p.glob("*.json")):
            try:
                meta = json.loads(sidecar.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                continue
            if isinstance(meta, dict) and meta.get("kind") == kind:
                expanded.append(str(sidecar.with_suffix(".bin")))
    return expanded


def _stem(path: str) -> str:
    name = Path(path).name
    for suffix in (".json", ".bin"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


# ==============================================================================
# simulate
# ==============================================================================

def _simulate_pair(clean: Sinogram, dose: DoseModel) -> Sinogram:
    return simulate_noisy_sinogram(clean, dose)


def cmd_simulate(cfg: Dict[str, Any], out_dir: Path, config_path: Optional[str] = None,
                 jobs: int = 1) -> int:
    """
    Write phantom, clean sinogram, one noisy sinogram per dose level and a manifest.

    Noisy sinograms are named ``noisy_I0_<dose>``; each dose level draws from its
    own seed spawned from ``dose.seed``, so output does not depend on ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = geometry_from_config(cfg)
    doses = dose_models_from_config(cfg)
    seeds = pair_seeds(cfg["dose"]["seed"], len(doses))
    doses = [dose.with_seed(seed) for dose, seed in zip(doses, seeds)]

    with ActivityLogger(out_dir / "activity.log", user="simulate", auto_log_session=True) as logger:
        phantom = phantom_for_geometry(geometry.image_size, geometry.fov,
                                       cfg["phantom"]["attenuation_scale"], cfg["phantom"]["oversample"])
        clean = forward_project(phantom, geometry)
        outputs = [write_tensor(phantom, out_dir / "phantom"), write_tensor(clean, out_dir / "clean")]
        print_status("OK", f"Phantom {geometry.image_size}x{geometry.image_size} and clean sinogram "
                           f"{geometry.n_views}x{geometry.n_detectors}")

        if jobs > 1 and len(doses) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                noisy = list(pool.map(_simulate_pair, [clean] * len(doses), doses))
        else:
            noisy = [_simulate_pair(clean, dose) for dose in doses]

        for dose, sinogram in zip(doses, noisy):
            path = write_tensor(sinogram, out_dir / f"noisy_I0_{format_dose(dose.I0)}")
            outputs.append(path)
            log_run_event(logger, "simulate", f"noisy sinogram at I0={dose.I0:g}",
                          I0=dose.I0, sigma_e2=dose.sigma_e2, seed=dose.seed, path=path)
            print_status("OK", f"Noisy sinogram at I0={dose.I0:g} -> {path.name}")

        if cfg["output"]["png"]:
            outputs.append(save_png(phantom, out_dir / "phantom.png",
                                    tuple(cfg["output"]["png_window"]), cfg["output"]["mu_water"]))

        RunManifest("simulate", config_path, [], [str(p.name) for p in outputs],
                    flatten_config(cfg), cfg["dose"]["seed"]).write(out_dir)
    return EXIT_OK


# ==============================================================================
# reconstruct
# ==============================================================================

def reconstruct_sinogram(sinogram: Sinogram, cfg: Dict[str, Any], method: str,
                         logger: Optional[ActivityLogger] = None) -> Tuple[Image, Optional[SolverTrace]]:
    """
    Reconstruct one sinogram; FBP also serves as x₀ for the iterative methods.

    Raises
    ------
    LineSearchError, NumericalFailure
        From the iterative methods, with the partial trace attached.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method: {method} (choose from {', '.join(METHODS)})")
    geometry = geometry_from_config(cfg)
    x0 = fbp(sinogram, geometry, cfg["fbp"]["filter"])
    if method == "fbp":
        return x0, None
    regularizer = regularizer_config_from_config(cfg)
    solver_cfg = solver_config_from_config(cfg, strategy=method)
    objective = ct_objective(geometry, sinogram, regularizer, x0, solver_cfg.power_iterations)
    return run(x0, objective, solver_cfg, logger)


def _reconstruct_one(path: str, cfg: Dict[str, Any], method: str, out_dir: Path) -> Dict[str, Any]:
    """Worker: reconstruct, write outputs and report what happened."""
    stem = f"{_stem(path)}_{method}"
    trace_path = out_dir / f"{stem}_trace.csv"
    timing = cfg["output"]["timing"]
    logger = ActivityLogger(out_dir / "activity.log", user="reconstruct")
    result: Dict[str, Any] = {"input": path, "outputs": [], "exit": EXIT_OK, "message": ""}
    try:
        image, trace = reconstruct_sinogram(_read_sinogram(path), cfg, method, logger)
    except (LineSearchError, NumericalFailure) as e:
        if e.trace is not None:
            e.trace.write_csv(trace_path, timing)
            result["outputs"].append(trace_path.name)
            result["tail"] = e.trace.tail().to_dict("records")
        log_error(logger, "numeric", str(e), input=path, method=method)
        result.update(exit=EXIT_NUMERIC, message=str(e))
        return result

    result["outputs"].append(write_tensor(image, out_dir / stem).name)
    if trace is not None:
        trace.write_csv(trace_path, timing)
        result["outputs"].append(trace_path.name)
        result["message"] = (f"{len(trace)} iterations ({trace.reason}), final phi {trace.final_phi:.6g}, "
                             f"u-branch ratio {trace.branch_ratio():.3f}")
    if cfg["output"]["png"]:
        png = save_png(image, out_dir / f"{stem}.png", tuple(cfg["output"]["png_window"]),
                       cfg["output"]["mu_water"])
        result["outputs"].append(png.name)
    log_run_event(logger, "reconstruct", f"{method} reconstruction of {Path(path).name}",
                  method=method, outputs=result["outputs"])
    return result


def cmd_reconstruct(cfg: Dict[str, Any], method: str, inputs: List[str], out_dir: Path,
                    config_path: Optional[str] = None, jobs: int = 1) -> int:
    """
    Reconstruct every input sinogram with ``method``.

    Writes ``<input>_<method>`` image files and, for iterative methods, the
    trace CSV. Returns 3 if any reconstruction hit a numeric failure.
    """
    inputs = expand_inputs(inputs, "sinogram")
    if not inputs:
        raise ConfigError("reconstruct needs at least one --input sinogram")
    if method not in METHODS:
        raise ConfigError(f"Unknown method: {method} (choose from {', '.join(METHODS)})", ["method"])
    for path in inputs:
        _read_sinogram(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with ActivityLogger(out_dir / "activity.log", user="reconstruct", auto_log_session=True):
        if jobs > 1 and len(inputs) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_reconstruct_one, inputs, [cfg] * len(inputs),
                                        [method] * len(inputs), [out_dir] * len(inputs)))
        else:
            results = [_reconstruct_one(path, cfg, method, out_dir) for path in inputs]

        exit_code = EXIT_OK
        outputs: List[str] = []
        for result in results:
            outputs.extend(result["outputs"])
            if result["exit"] != EXIT_OK:
                exit_code = result["exit"]
                print_status("ERROR", f"{Path(result['input']).name}: {result['message']}")
                if result.get("tail"):
                    display_dataframe(pd.DataFrame(result["tail"]), "Last iterations before failure")
            else:
                print_status("OK", f"{Path(result['input']).name} -> {', '.join(result['outputs'])}"
                                   + (f" ({result['message']})" if result["message"] else ""))

        RunManifest("reconstruct", config_path, list(inputs), outputs,
                    flatten_config(cfg) | {"method": method}, cfg["dose"]["seed"]).write(out_dir)
    return exit_code


# ==============================================================================
# evaluate
# ==============================================================================

def cmd_evaluate(cfg: Dict[str, Any], inputs: List[str], reference: str, out_dir: Path,
                 config_path: Optional[str] = None) -> int:
    """
    Write ``quality.csv``: PSNR/SSIM per image plus mean and std rows.

    Inputs that cannot be read as an image of the reference's shape are
    reported and skipped; the command then returns 2.
    """
    inputs = expand_inputs(inputs, "image")
    if not inputs:
        raise ConfigError("evaluate needs at least one --input image")
    if reference is None:
        raise ConfigError("evaluate needs --reference")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref = _read_image(reference)
    peak = cfg["metrics"]["peak"]
    report = QualityReport()
    exit_code = EXIT_OK

    with ActivityLogger(out_dir / "activity.log", user="evaluate", auto_log_session=True) as logger:
        for path in inputs:
            try:
                image = _read_image(path)
                report.add(_stem(path), psnr(image, ref, peak), ssim(image, ref, peak))
            except (ShapeMismatchError, TensorFormatError, FileNotFoundError) as e:
                exit_code = EXIT_CONFIG
                log_error(logger, "input", str(e), input=path)
                print_status("ERROR", f"{Path(path).name}: {e}")
        if report.rows:
            path = report.write_csv(out_dir / "quality.csv")
            stats = report.aggregate()
            log_run_event(logger, "evaluate", f"{len(report.rows)} images evaluated", **stats)
            display_dataframe(report.to_dataframe(), "Image Quality")
            print_status("OK", f"Quality report -> {path.name}")

        RunManifest("evaluate", config_path, list(inputs) + [reference],
                    ["quality.csv"] if report.rows else [], flatten_config(cfg)).write(out_dir)
    return exit_code


# ==============================================================================
# verify
# ==============================================================================

def cmd_verify(suite: str, out_dir: Path, seed: int = 0) -> int:
    """Run one suite (or ``all``) and write ``verify_<suite>.csv``; returns 4 on any failure."""
    names = list(SUITES) if suite == "all" else [suite]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failed = False
    outputs = []
    with ActivityLogger(out_dir / "activity.log", user="verify", auto_log_session=True) as logger:
        for name in names:
            report = run_suite(name, seed=seed)
            path = out_dir / f"verify_{name}.csv"
            report.to_csv(path, index=False, float_format="%.17g")
            outputs.append(path.name)
            n_failed = int((~report["passed"]).sum())
            failed = failed or n_failed > 0
            log_run_event(logger, "verify", f"suite {name}: {len(report) - n_failed}/{len(report)} passed",
                          suite=name, failed=n_failed)
            display_dataframe(report, f"Suite: {name}")
            print_status("OK" if n_failed == 0 else "ERROR",
                         f"{name}: {len(report) - n_failed}/{len(report)} properties passed")
        RunManifest("verify", None, [], outputs, {"suite": suite}, seed).write(out_dir)
    return EXIT_SUITE if failed else EXIT_OK


# ==============================================================================
# log
# ==============================================================================

def cmd_log(log_file: str, action: Optional[str] = None, level: Optional[str] = None,
            user: Optional[str] = None, csv_path: Optional[str] = None,
            include_metadata: bool = False) -> int:
    """
    Summarise a run's activity log and list the matching events.

    With ``csv_path`` the whole log is also exported as CSV.
    """
    if not Path(log_file).exists():
        raise FileNotFoundError(f"File not found: {log_file}")
    stats = get_activity_stats(log_file)
    print_header("Activity Statistics")
    print(f"Total Activities: {stats['total_activities']}")
    if stats["date_range"]:
        print(f"  First: {stats['date_range']['first'][:19]}")
        print(f"  Last:  {stats['date_range']['last'][:19]}")
    for title, key in (("Actions", "action_counts"), ("Severity Levels", "level_counts"),
                       ("Commands", "user_counts")):
        print(f"\n{title}:")
        for name, count in sorted(stats[key].items(), key=lambda item: (-item[1], item[0])):
            print(f"  {name}: {count}")

    events = filter_activities(log_file, action=action, user=user, level=level.upper() if level else None)
    columns = ["timestamp", "user", "action", "level", "description"]
    display_dataframe(pd.DataFrame(events, columns=columns), f"Activities ({len(events)} found)")

    if csv_path:
        target = export_log_to_csv(log_file, csv_path, include_metadata)
        print_status("OK", f"Exported {stats['total_activities']} events -> {target}")
    return EXIT_OK


# ==============================================================================
# Argument parsing
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.main",
        description="Low-dose fan-beam CT reconstruction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_out: bool = True):
        p.add_argument("--config", help="JSON configuration file")
        if with_out:
            p.add_argument("--out", default="out", help="Output directory (default: out)")
        p.add_argument("--seed", type=int, help="Override dose.seed")
        p.add_argument("--png", action="store_true", help="Also write PNG pictures")
        p.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")

    p = sub.add_parser("simulate", help="Simulate phantom and noisy sinograms")
    common(p)

    p = sub.add_parser("reconstruct", help="Reconstruct sinograms")
    common(p)
    p.add_argument("--method", default="elda", choices=METHODS)
    p.add_argument("--filters", help="Filter preset (tv, dct8, seeded-random) or .fb file")
    p.add_argument("--input", nargs="+", default=[], help="Sinogram files or directories")
    p.add_argument("--iterations", type=int, help="Override solver.max_iter")

    p = sub.add_parser("evaluate", help="PSNR/SSIM against a reference image")
    common(p)
    p.add_argument("--input", nargs="+", default=[], help="Image files or directories")
    p.add_argument("--reference", help="Reference image file")
    p.add_argument("--peak", type=float, help="Override metrics.peak")

    p = sub.add_parser("verify", help="Run property suites")
    p.add_argument("--suite", default="all", choices=list(SUITES) + ["all"])
    p.add_argument("--out", default="out", help="Output directory (default: out)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("config", help="Print configuration")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--dump-defaults", action="store_true", help="Print every key with its default")

    p = sub.add_parser("log", help="Summarise a run's activity log")
    p.add_argument("--input", required=True, help="activity.log file")
    p.add_argument("--action", help="Only events with this action")
    p.add_argument("--level", choices=["INFO", "WARNING", "ERROR", "info", "warning", "error"])
    p.add_argument("--user", help="Only events of this command")
    p.add_argument("--csv", help="Export the log to this CSV file")
    p.add_argument("--metadata", action="store_true", help="Include metadata in the CSV export")
    return parser


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Load ``--config`` and apply the command-line overrides."""
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = set_value(cfg, "dose.seed", args.seed)
    if getattr(args, "png", False):
        cfg = set_value(cfg, "output.png", True)
    if getattr(args, "filters", None):
        cfg = set_value(cfg, "filters.bank", args.filters)
    if getattr(args, "iterations", None) is not None:
        cfg = set_value(cfg, "solver.max_iter", args.iterations)
    if getattr(args, "peak", None) is not None:
        cfg = set_value(cfg, "metrics.peak", args.peak)
    return cfg


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "verify":
        return cmd_verify(args.suite, Path(args.out), args.seed)
    if args.command == "log":
        return cmd_log(args.input, args.action, args.level, args.user, args.csv, args.metadata)
    if args.command == "config":
        if args.dump_defaults:
            print(dump_defaults())
        else:
            print(json.dumps(resolve_config(args), indent=2))
        return EXIT_OK

    cfg = resolve_config(args)
    if args.command == "simulate":
        return cmd_simulate(cfg, Path(args.out), args.config, args.jobs)
    if args.command == "reconstruct":
        return cmd_reconstruct(cfg, args.method, args.input, Path(args.out), args.config, args.jobs)
    return cmd_evaluate(cfg, args.input, args.reference, Path(args.out), args.config)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the command and map failures to exit codes.

    Returns
    -------
    int
        0 success, 2 configuration/input error, 3 numeric failure, 4 suite failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG

    try:
        return dispatch(args)
    except ConfigError as e:
        print_status("ERROR", str(e))
        return EXIT_CONFIG
    except (LineSearchError, NumericalFailure) as e:
        print_status("ERROR", str(e))
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as e:
        print_status("ERROR", str(e))
        return EXIT_CONFIG
