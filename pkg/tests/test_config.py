"""
Tests for configuration loading, dotted-key access and the object builders.
"""

import json
from pathlib import Path

import pytest

from src.config import (
    DEFAULTS,
    ConfigError,
    load_config,
    merge_config,
    flatten_config,
    get_value,
    set_value,
    dump_defaults,
    geometry_from_config,
    filter_bank_from_config,
    regularizer_config_from_config,
    solver_config_from_config,
    dose_models_from_config,
)


DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def _write_config(tmp_path: Path, content: dict) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(content))
    return path


# ==============================================================================
# Tests for Loading
# ==============================================================================

def test_load_config_without_path_returns_defaults() -> None:
    """
    Test loading without a file returns a copy of the defaults.
    """
    cfg = load_config(None)

    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS


def test_load_config_does_not_share_state_with_defaults() -> None:
    """
    Test changing a loaded configuration leaves the defaults untouched.
    """
    cfg = load_config()
    cfg["solver"]["rho"] = 0.9

    assert DEFAULTS["solver"]["rho"] == 0.5


def test_load_desk_config() -> None:
    """
    Test loading the shipped desk configuration.
    """
    cfg = load_config(DATA_DIR / "desk_config.json")

    assert get_value(cfg, "solver.rho") == 0.5
    assert get_value(cfg, "dose.I0") == [25000.0, 12500.0, 6250.0]
    assert get_value(cfg, "solver.gamma") == DEFAULTS["solver"]["gamma"]


def test_partial_config_merges_over_defaults(tmp_path: Path) -> None:
    """
    Test a partial file is merged over the defaults.
    """
    path = _write_config(tmp_path, {"solver": {"max_iter": 7}})

    cfg = load_config(path)

    assert cfg["solver"]["max_iter"] == 7
    assert cfg["solver"]["rho"] == 0.5
    assert cfg["geometry"] == DEFAULTS["geometry"]


def test_unknown_keys_are_all_reported(tmp_path: Path) -> None:
    """
    Test every unknown key is reported at once.
    """
    path = _write_config(tmp_path, {"solver": {"rhoo": 0.5}, "plotting": {}, "dose": {"I0": [1e4], "noise": 1}})

    with pytest.raises(ConfigError, match="Unknown configuration keys") as excinfo:
        load_config(path)

    assert excinfo.value.keys == ["dose.noise", "plotting", "solver.rhoo"]


def test_section_replaced_by_scalar_is_rejected() -> None:
    """
    Test a section replaced by a scalar is reported as unknown.
    """
    with pytest.raises(ConfigError) as excinfo:
        merge_config({"solver": 3})

    assert excinfo.value.keys == ["solver"]


def test_load_config_missing_file(tmp_path: Path) -> None:
    """
    Test loading a missing file.
    """
    with pytest.raises(FileNotFoundError, match="File not found"):
        load_config(tmp_path / "missing.json")


def test_load_config_invalid_json(tmp_path: Path) -> None:
    """
    Test loading a file that is not valid JSON.
    """
    path = tmp_path / "broken.json"
    path.write_text("{not json")

    with pytest.raises(ConfigError, match="Invalid JSON"):
        load_config(path)


def test_load_config_requires_object(tmp_path: Path) -> None:
    """
    Test the file must hold a JSON object.
    """
    path = tmp_path / "list.json"
    path.write_text("[1, 2]")

    with pytest.raises(ConfigError, match="JSON object"):
        load_config(path)


# ==============================================================================
# Tests for Dotted Keys
# ==============================================================================

def test_get_and_set_value() -> None:
    """
    Test dotted-key access and copy-on-write updates.
    """
    cfg = load_config()

    updated = set_value(cfg, "dose.seed", 42)

    assert get_value(updated, "dose.seed") == 42
    assert get_value(cfg, "dose.seed") == 0


def test_set_value_rejects_unknown_key() -> None:
    """
    Test setting an unknown dotted key.
    """
    with pytest.raises(ConfigError, match="solver.speed"):
        set_value(load_config(), "solver.speed", 1.0)


def test_get_value_rejects_path_through_leaf() -> None:
    """
    Test a dotted key cannot descend through a leaf value.
    """
    with pytest.raises(ConfigError):
        get_value(load_config(), "solver.rho.value")


def test_flatten_config_has_every_leaf() -> None:
    """
    Test flattening lists every leaf under its dotted key.
    """
    flat = flatten_config(load_config())

    assert flat["solver.rho"] == 0.5
    assert flat["output.png_window"] == [-160.0, 240.0]
    assert not any(isinstance(value, dict) for value in flat.values())


def test_dump_defaults_is_loadable(tmp_path: Path) -> None:
    """
    Test the dumped defaults load back unchanged.
    """
    path = tmp_path / "defaults.json"
    path.write_text(dump_defaults())

    assert load_config(path) == DEFAULTS


# ==============================================================================
# Tests for Builders
# ==============================================================================

def test_geometry_from_config() -> None:
    """
    Test building the desk geometry.
    """
    geo = geometry_from_config(load_config(DATA_DIR / "desk_config.json"))

    assert (geo.image_size, geo.n_detectors, geo.n_views) == (64, 128, 180)


def test_geometry_reads_millimetre_keys(tmp_path: Path) -> None:
    """Test the scanner distances and widths are taken from the *_mm keys."""
    path = tmp_path / "scanner.json"
    path.write_text(json.dumps({"geometry": {
        "sad_mm": 500.0, "dcd_mm": 300.0, "n_detectors": 64,
        "detector_width_mm": 1.5, "n_views": 90, "fov_mm": 120.0, "image_size": 32,
    }}))

    geo = geometry_from_config(load_config(path))

    assert (geo.source_to_center, geo.detector_to_center) == (500.0, 300.0)
    assert (geo.detector_width, geo.fov) == (1.5, 120.0)
    assert (geo.n_detectors, geo.n_views, geo.image_size) == (64, 90, 32)


def test_old_geometry_key_names_are_rejected(tmp_path: Path) -> None:
    """Test keys that are not part of the geometry section fail with their dotted names."""
    path = tmp_path / "old.json"
    path.write_text(json.dumps({"geometry": {"fov": 170.0, "source_to_center": 250.0}}))

    with pytest.raises(ConfigError) as info:
        load_config(path)

    assert info.value.keys == ["geometry.fov", "geometry.source_to_center"]


def test_invalid_geometry_becomes_config_error() -> None:
    """
    Test invalid geometry values surface as ConfigError.
    """
    cfg = set_value(load_config(), "geometry.n_views", 0)

    with pytest.raises(ConfigError, match="Invalid geometry configuration"):
        geometry_from_config(cfg)


def test_filter_bank_from_config_uses_preset() -> None:
    """
    Test the default filter bank is the tv preset.
    """
    fb = filter_bank_from_config(load_config())

    assert fb.channels == 2
    assert fb.inexact_transposes is None


def test_filter_bank_from_config_attaches_transposes_in_inexact_mode() -> None:
    """
    Test inexact gradients get a transpose per layer.
    """
    cfg = set_value(load_config(), "solver.gradient_mode", "inexact")

    fb = filter_bank_from_config(cfg)

    assert fb.inexact_transposes is not None
    assert len(fb.inexact_transposes) == fb.layers


def test_regularizer_config_from_config() -> None:
    """
    Test regularizer fields are read from their sections.
    """
    cfg = set_value(load_config(), "regularizer.lambda", 0.25)

    reg = regularizer_config_from_config(cfg)

    assert reg.lam == 0.25
    assert reg.kappa == 4
    assert reg.graph_mode == "frozen"


def test_invalid_regularizer_becomes_config_error() -> None:
    """
    Test invalid regularizer values surface as ConfigError.
    """
    cfg = set_value(load_config(), "regularizer.kappa", 0)

    with pytest.raises(ConfigError, match="kappa"):
        regularizer_config_from_config(cfg)


def test_solver_config_from_config_sets_strategy() -> None:
    """
    Test the solver section and strategy are passed through.
    """
    solver = solver_config_from_config(load_config(), strategy="lda")

    assert solver.strategy == "lda"
    assert solver.rho == 0.5
    assert solver.alpha is None


def test_invalid_solver_becomes_config_error() -> None:
    """
    Test invalid solver values surface as ConfigError.
    """
    cfg = set_value(load_config(), "solver.rho", 1.5)

    with pytest.raises(ConfigError, match="rho"):
        solver_config_from_config(cfg)


def test_dose_models_from_config_returns_one_per_level() -> None:
    """
    Test one dose model per configured I0.
    """
    doses = dose_models_from_config(load_config(DATA_DIR / "desk_config.json"))

    assert [d.I0 for d in doses] == [25000.0, 12500.0, 6250.0]
    assert all(d.seed == 0 for d in doses)


def test_dose_models_accept_a_single_number() -> None:
    """
    Test dose.I0 may be a single number.
    """
    doses = dose_models_from_config(set_value(load_config(), "dose.I0", 5000))

    assert len(doses) == 1
    assert doses[0].I0 == 5000.0


def test_dose_models_require_a_level() -> None:
    """
    Test an empty dose list is rejected.
    """
    with pytest.raises(ConfigError, match="at least one"):
        dose_models_from_config(set_value(load_config(), "dose.I0", []))
