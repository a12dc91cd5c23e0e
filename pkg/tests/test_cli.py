"""
Tests for the batch commands: simulate, reconstruct, evaluate, verify and config.

Runs use the smoke configuration (16x16 image, 48 views, 5 iterations).
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.cli import (
    EXIT_OK,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_SUITE,
    RunManifest,
    format_dose,
    pair_seeds,
    expand_inputs,
    reconstruct_sinogram,
    main,
)
from src.config import DEFAULTS, load_config, geometry_from_config
from src.ct_model import forward_project
from src.core import Image, read_tensor, write_tensor, image_from_array
from src.sim_metrics import DoseModel, phantom_for_geometry, simulate_noisy_sinogram, psnr
from src.solver import LineSearchError, SolverTrace
from src.verify import REPORT_COLUMNS


SMOKE_CONFIG = str(Path(__file__).resolve().parents[1] / "data" / "smoke_config.json")
DESK_CONFIG = str(Path(__file__).resolve().parents[1] / "data" / "desk_config.json")


@pytest.fixture
def simulated(tmp_path: Path) -> Path:
    """Output directory of one smoke simulate run."""
    out = tmp_path / "sim"
    assert main(["simulate", "--config", SMOKE_CONFIG, "--out", str(out)]) == EXIT_OK
    return out


# ==============================================================================
# Tests for Helpers
# ==============================================================================

def test_format_dose() -> None:
    """
    Test dose levels are formatted for file names.
    """
    assert format_dose(25000.0) == "25000"
    assert format_dose(2.5e3) == "2500"
    assert format_dose(12.5) == "12.5"


def test_pair_seeds_are_deterministic_and_distinct() -> None:
    """
    Test spawned per-pair seeds repeat for a base seed and differ between pairs.
    """
    seeds = pair_seeds(0, 4)

    assert seeds == pair_seeds(0, 4)
    assert len(set(seeds)) == 4
    assert pair_seeds(1, 4) != seeds


def test_run_manifest_is_sorted_json(tmp_path: Path) -> None:
    """
    Test the manifest is written with sorted keys and no timestamp.
    """
    path = RunManifest("verify", None, [], ["verify_noise.csv"], {"suite": "noise"}, 0).write(tmp_path)

    manifest = json.loads(path.read_text())
    assert list(manifest) == sorted(manifest)
    assert manifest["command"] == "verify"
    assert "timestamp" not in manifest


def test_expand_inputs_selects_kind(simulated: Path) -> None:
    """
    Test directories expand to the tensors of the requested kind.
    """
    sinograms = expand_inputs([str(simulated)], "sinogram")
    images = expand_inputs([str(simulated)], "image")

    assert [Path(p).name for p in sinograms] == ["clean.bin", "noisy_I0_25000.bin", "noisy_I0_5000.bin"]
    assert [Path(p).name for p in images] == ["phantom.bin"]


# ==============================================================================
# Tests for simulate
# ==============================================================================

def test_simulate_writes_tensors_manifest_and_log(simulated: Path) -> None:
    """
    Test simulate writes every tensor, the manifest and a bracketed activity log.
    """
    for name in ("phantom", "clean", "noisy_I0_25000", "noisy_I0_5000"):
        assert (simulated / f"{name}.bin").exists()
        assert (simulated / f"{name}.json").exists()

    manifest = json.loads((simulated / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 0
    assert "noisy_I0_5000.bin" in manifest["outputs"]
    assert manifest["parameters"]["geometry.image_size"] == 16

    actions = [json.loads(line)["action"] for line in (simulated / "activity.log").read_text().splitlines()]
    assert actions.count("sinogram_simulated") == 2
    assert actions[0] == "session_start" and actions[-1] == "session_end"


def test_manifest_write_is_logged(simulated: Path) -> None:
    """
    Test writing the manifest leaves a file_written event inside the session.
    """
    events = [json.loads(line) for line in (simulated / "activity.log").read_text().splitlines()]

    written = [e for e in events if e["action"] == "file_written"]
    assert [e["description"] for e in written] == ["manifest.json"]
    assert events.index(written[0]) < len(events) - 1


def test_simulate_sinogram_shapes(simulated: Path) -> None:
    """
    Test simulated sinograms and phantom have the configured shapes.
    """
    noisy = read_tensor(simulated / "noisy_I0_5000")

    assert noisy.shape == (48, 32)
    assert read_tensor(simulated / "phantom").shape == (16, 16)


def test_simulate_is_reproducible_across_job_counts(tmp_path: Path) -> None:
    """
    Test simulate output does not depend on the number of workers.
    """
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"

    assert main(["simulate", "--config", SMOKE_CONFIG, "--out", str(serial)]) == EXIT_OK
    assert main(["simulate", "--config", SMOKE_CONFIG, "--out", str(parallel), "--jobs", "2"]) == EXIT_OK

    for name in ("noisy_I0_25000.bin", "noisy_I0_5000.bin", "manifest.json"):
        assert (serial / name).read_bytes() == (parallel / name).read_bytes()


def test_simulate_seed_override_changes_noise(tmp_path: Path, simulated: Path) -> None:
    """
    Test --seed changes the noise but not the clean sinogram.
    """
    out = tmp_path / "seeded"

    assert main(["simulate", "--config", SMOKE_CONFIG, "--out", str(out), "--seed", "7"]) == EXIT_OK

    assert (out / "noisy_I0_5000.bin").read_bytes() != (simulated / "noisy_I0_5000.bin").read_bytes()
    assert (out / "clean.bin").read_bytes() == (simulated / "clean.bin").read_bytes()
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7


def test_simulate_png(tmp_path: Path) -> None:
    """
    Test --png writes a phantom picture.
    """
    out = tmp_path / "png"

    assert main(["simulate", "--config", SMOKE_CONFIG, "--out", str(out), "--png"]) == EXIT_OK

    assert (out / "phantom.png").stat().st_size > 0


# ==============================================================================
# Tests for reconstruct
# ==============================================================================

def test_reconstruct_fbp(tmp_path: Path, simulated: Path) -> None:
    """
    Test FBP reconstruction writes an image and no trace.
    """
    out = tmp_path / "fbp"

    code = main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "fbp",
                 "--input", str(simulated / "noisy_I0_25000.bin"), "--out", str(out)])

    assert code == EXIT_OK
    image = read_tensor(out / "noisy_I0_25000_fbp")
    assert isinstance(image, Image)
    assert image.shape == (16, 16)
    assert not (out / "noisy_I0_25000_fbp_trace.csv").exists()


def test_reconstruct_elda_writes_trace(tmp_path: Path, simulated: Path) -> None:
    """
    Test an iterative reconstruction writes images, untimed traces and the manifest.
    """
    out = tmp_path / "elda"

    code = main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "elda", "--iterations", "2",
                 "--input", str(simulated / "noisy_I0_25000.bin"), str(simulated / "noisy_I0_5000.bin"),
                 "--out", str(out)])

    assert code == EXIT_OK
    for stem in ("noisy_I0_25000_elda", "noisy_I0_5000_elda"):
        assert np.all(np.isfinite(read_tensor(out / stem).values))
        trace = pd.read_csv(out / f"{stem}_trace.csv")
        assert 1 <= len(trace) <= 2
        assert (trace["ms"] == 0.0).all()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["parameters"]["method"] == "elda"
    assert manifest["parameters"]["solver.max_iter"] == 2


def test_reconstruct_without_inputs_is_config_error(tmp_path: Path) -> None:
    """
    Test reconstruct without inputs exits with 2.
    """
    assert main(["reconstruct", "--config", SMOKE_CONFIG, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_reconstruct_rejects_image_input(tmp_path: Path, simulated: Path) -> None:
    """
    Test an image passed as a sinogram exits with 2.
    """
    code = main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "fbp",
                 "--input", str(simulated / "phantom.bin"), "--out", str(tmp_path / "bad")])

    assert code == EXIT_CONFIG


def test_reconstruct_missing_input_is_config_error(tmp_path: Path) -> None:
    """
    Test a missing input file exits with 2.
    """
    code = main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "fbp",
                 "--input", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "out")])

    assert code == EXIT_CONFIG


def test_reconstruct_line_search_failure_exits_3(tmp_path: Path, simulated: Path, mocker) -> None:
    """
    A line-search failure keeps the partial trace and reports exit code 3.
    """
    mocker.patch("src.cli.run", side_effect=LineSearchError("no acceptable v step", SolverTrace()))
    out = tmp_path / "failed"

    code = main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "elda",
                 "--input", str(simulated / "noisy_I0_5000.bin"), "--out", str(out)])

    assert code == EXIT_NUMERIC
    assert (out / "noisy_I0_5000_elda_trace.csv").exists()
    assert not (out / "noisy_I0_5000_elda.bin").exists()
    levels = [json.loads(line)["level"] for line in (out / "activity.log").read_text().splitlines()]
    assert "ERROR" in levels


def test_reconstruct_is_identical_across_job_counts(tmp_path: Path, simulated: Path) -> None:
    """
    Test two worker processes write the same images and traces as a serial run.
    """
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    args = ["reconstruct", "--config", SMOKE_CONFIG, "--method", "elda", "--iterations", "3",
            "--input", str(simulated / "noisy_I0_25000.bin"), str(simulated / "noisy_I0_5000.bin")]

    assert main(args + ["--out", str(serial)]) == EXIT_OK
    assert main(args + ["--out", str(parallel), "--jobs", "2"]) == EXIT_OK

    for stem in ("noisy_I0_25000_elda", "noisy_I0_5000_elda"):
        assert (serial / f"{stem}.bin").read_bytes() == (parallel / f"{stem}.bin").read_bytes()
        assert (serial / f"{stem}_trace.csv").read_bytes() == (parallel / f"{stem}_trace.csv").read_bytes()
    assert (serial / "manifest.json").read_bytes() == (parallel / "manifest.json").read_bytes()


@pytest.mark.slow
def test_desk_reconstruction_quality_ordering() -> None:
    """
    Test on the desk preset ELDA beats FBP by 2 dB and plain gradient descent does not lose to FBP.
    """
    cfg = load_config(DESK_CONFIG)
    geometry = geometry_from_config(cfg)
    phantom = phantom_for_geometry(geometry.image_size, geometry.fov)
    noisy = simulate_noisy_sinogram(forward_project(phantom, geometry), DoseModel(2.5e4))

    scores = {method: psnr(reconstruct_sinogram(noisy, cfg, method)[0], phantom)
              for method in ("fbp", "plain_gd", "elda")}

    assert scores["elda"] >= scores["fbp"] + 2.0
    assert scores["plain_gd"] >= scores["fbp"]


# ==============================================================================
# Tests for evaluate
# ==============================================================================

def test_evaluate_writes_quality_report(tmp_path: Path, simulated: Path) -> None:
    """
    Test evaluate writes one row per image plus mean and std.
    """
    recon = tmp_path / "recon"
    main(["reconstruct", "--config", SMOKE_CONFIG, "--method", "fbp",
          "--input", str(simulated), "--out", str(recon)])
    out = tmp_path / "eval"

    code = main(["evaluate", "--config", SMOKE_CONFIG, "--input", str(recon),
                 "--reference", str(simulated / "phantom.bin"), "--out", str(out)])

    assert code == EXIT_OK
    report = pd.read_csv(out / "quality.csv")
    assert list(report.columns) == ["image_id", "psnr_db", "ssim"]
    assert list(report["image_id"]) == ["clean_fbp", "noisy_I0_25000_fbp", "noisy_I0_5000_fbp", "mean", "std"]
    assert report["psnr_db"].iloc[:3].notna().all()


def test_evaluate_skips_mismatched_shapes(tmp_path: Path, simulated: Path) -> None:
    """
    Test an image of the wrong size is skipped and the command exits with 2.
    """
    small = write_tensor(image_from_array(np.zeros((8, 8))), tmp_path / "small")
    out = tmp_path / "eval"

    code = main(["evaluate", "--input", str(simulated / "phantom.bin"), str(small),
                 "--reference", str(simulated / "phantom.bin"), "--out", str(out)])

    assert code == EXIT_CONFIG
    report = pd.read_csv(out / "quality.csv")
    assert list(report["image_id"]) == ["phantom", "mean", "std"]


def test_evaluate_skips_sinogram_input(tmp_path: Path, simulated: Path) -> None:
    """
    Test a sinogram passed as an image is reported, skipped and logged as an input error.
    """
    out = tmp_path / "eval"

    code = main(["evaluate", "--input", str(simulated / "phantom.bin"), str(simulated / "clean.bin"),
                 "--reference", str(simulated / "phantom.bin"), "--out", str(out)])

    assert code == EXIT_CONFIG
    assert list(pd.read_csv(out / "quality.csv")["image_id"]) == ["phantom", "mean", "std"]
    actions = [json.loads(line)["action"] for line in (out / "activity.log").read_text().splitlines()]
    assert "error_input" in actions


def test_evaluate_requires_reference(tmp_path: Path, simulated: Path) -> None:
    """
    Test evaluate without --reference exits with 2.
    """
    code = main(["evaluate", "--input", str(simulated / "phantom.bin"), "--out", str(tmp_path)])

    assert code == EXIT_CONFIG


# ==============================================================================
# Tests for verify
# ==============================================================================

def _report(passed: bool) -> pd.DataFrame:
    return pd.DataFrame([{"suite": "adjoint", "property": "projector_adjoint", "passed": passed,
                          "measured": 0.0 if passed else 1.0, "threshold": 1e-10, "detail": ""}],
                        columns=REPORT_COLUMNS)


def test_verify_writes_report(tmp_path: Path, mocker) -> None:
    """
    Test verify writes one CSV per suite.
    """
    mocker.patch("src.cli.run_suite", return_value=_report(True))

    code = main(["verify", "--suite", "adjoint", "--out", str(tmp_path)])

    assert code == EXIT_OK
    assert list(pd.read_csv(tmp_path / "verify_adjoint.csv").columns) == REPORT_COLUMNS


def test_verify_failure_exits_4(tmp_path: Path, mocker) -> None:
    """
    Test a failing property gives exit code 4.
    """
    run_suite = mocker.patch("src.cli.run_suite", return_value=_report(False))

    code = main(["verify", "--suite", "all", "--out", str(tmp_path), "--seed", "3"])

    assert code == EXIT_SUITE
    assert run_suite.call_count == 5
    run_suite.assert_called_with("noise", seed=3)


def test_verify_rejects_unknown_suite(tmp_path: Path) -> None:
    """
    Test an unknown suite name is an argument error.
    """
    assert main(["verify", "--suite", "speed", "--out", str(tmp_path)]) == EXIT_CONFIG


# ==============================================================================
# Tests for log
# ==============================================================================

def test_log_summarises_filters_and_exports(tmp_path: Path, simulated: Path, capsys) -> None:
    """
    Test the log command prints statistics, lists matching events and writes the CSV export.
    """
    log_file = simulated / "activity.log"
    target = tmp_path / "events.csv"

    code = main(["log", "--input", str(log_file), "--action", "sinogram_simulated",
                 "--csv", str(target), "--metadata"])

    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "Activity Statistics" in out
    assert "Activities (2 found)" in out
    exported = pd.read_csv(target)
    assert len(exported) == len(log_file.read_text().splitlines())
    assert "metadata" in exported.columns


def test_log_level_filter_is_case_insensitive(simulated: Path, capsys) -> None:
    """
    Test --level accepts lower-case names.
    """
    code = main(["log", "--input", str(simulated / "activity.log"), "--level", "error"])

    assert code == EXIT_OK
    assert "Activities (0 found)" in capsys.readouterr().out


def test_log_missing_file_exits_2(tmp_path: Path) -> None:
    """
    Test a missing activity log exits with 2.
    """
    assert main(["log", "--input", str(tmp_path / "missing.log")]) == EXIT_CONFIG


# ==============================================================================
# Tests for config and argument errors
# ==============================================================================

def test_config_dump_defaults(capsys) -> None:
    """
    Test --dump-defaults prints every default key.
    """
    assert main(["config", "--dump-defaults"]) == EXIT_OK

    assert json.loads(capsys.readouterr().out) == DEFAULTS


def test_config_prints_resolved_file(capsys) -> None:
    """
    Test the config command prints the merged configuration.
    """
    assert main(["config", "--config", SMOKE_CONFIG]) == EXIT_OK

    resolved = json.loads(capsys.readouterr().out)
    assert resolved["solver"]["max_iter"] == 5
    assert resolved["solver"]["rho"] == 0.5


def test_unknown_config_key_exits_2(tmp_path: Path, capsys) -> None:
    """
    Test an unknown configuration key exits with 2 and names the key.
    """
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"solver": {"rhoo": 0.5}}))

    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert "solver.rhoo" in capsys.readouterr().out


def test_missing_config_file_exits_2(tmp_path: Path) -> None:
    """
    Test a missing configuration file exits with 2.
    """
    assert main(["config", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_argument_errors_exit_2() -> None:
    """
    Test argument errors exit with 2.
    """
    assert main(["transmogrify"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_help_exits_0() -> None:
    """
    Test --help exits with 0.
    """
    assert main(["--help"]) == EXIT_OK
