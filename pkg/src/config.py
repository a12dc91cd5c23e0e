"""
Config Module - Run Configuration

This module provides the single JSON configuration file used by every command:
- DEFAULTS with every recognised key, grouped in sections
- Loading with deep merge over the defaults and fail-fast unknown-key checks
- Dotted-key access ("solver.rho") and overrides
- Builders turning sections into geometry, filter-bank, regularizer, solver and dose objects
"""

import copy
import json
from pathlib import Path
from typing import Union, Optional, List, Dict, Any

from src.ct_model import FanBeamGeometry
from src.features import FilterBank, resolve_filter_bank, perturbed_transposes
from src.regularizers import RegularizerConfig
from src.sim_metrics import DoseModel
from src.solver import SolverConfig


DEFAULTS: Dict[str, Dict[str, Any]] = {
    "geometry": {
        "sad_mm": 250.0,
        "dcd_mm": 250.0,
        "n_detectors": 128,
        "detector_width_mm": 2.88,
        "n_views": 180,
        "fov_mm": 170.0,
        "image_size": 64,
    },
    "phantom": {
        "oversample": 4,
        "attenuation_scale": 0.1,
    },
    "filters": {
        "bank": "tv",
        "channels": 48,
        "layers": 4,
        "seed": 0,
        "scale": 1.0,
        "activation_delta": 0.001,
        "inexact_perturbation": 0.0,
        "perturbation_seed": 0,
    },
    "regularizer": {
        "lambda": 0.1,
        "kappa": 4,
    },
    "graph": {
        "mode": "frozen",
        "storage": "auto",
        "window_radius": 8,
        "sample_budget": 200000,
        "seed": 0,
    },
    "solver": {
        "rho": 0.5,
        "gamma": 0.5,
        "eps0": 0.001,
        "sigma_red": 1.0,
        "c": None,
        "iota": 0.001,
        "tau_desc": 0.001,
        "max_iter": 100,
        "eps_tol": 1e-8,
        "max_backtracks": 60,
        "alpha": None,
        "beta": None,
        "gradient_mode": "exact",
        "freeze_epsilon": False,
        "grad_tol": None,
        "power_iterations": 30,
    },
    "dose": {
        "I0": [25000.0],
        "sigma_e2": 10.0,
        "seed": 0,
        "clamp_floor": 1.0,
    },
    "fbp": {
        "filter": "ramlak",
    },
    "metrics": {
        "peak": None,
    },
    "output": {
        "png": False,
        "png_window": [-160.0, 240.0],
        "mu_water": 0.02,
        "timing": True,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists every offending dotted key."""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = list(keys or [])


# ==============================================================================
# Loading
# ==============================================================================

def _unknown_keys(overrides: Dict[str, Any], defaults: Dict[str, Any], prefix: str = "") -> List[str]:
    unknown = []
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            unknown.append(dotted)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                unknown.append(dotted)
            else:
                unknown.extend(_unknown_keys(value, defaults[key], dotted + "."))
    return unknown


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def merge_config(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge a partial configuration over DEFAULTS.

    Raises
    ------
    ConfigError
        Listing all unknown keys at once.
    """
    unknown = _unknown_keys(overrides, DEFAULTS)
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}", sorted(unknown))
    return _merge(DEFAULTS, overrides)


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Load a JSON configuration file over the defaults.

    Parameters
    ----------
    path : str or Path, optional
        Configuration file; ``None`` returns a copy of DEFAULTS.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    ConfigError
        If the file is not a JSON object or names unknown keys.

    Examples
    --------
    >>> cfg = load_config("data/desk_config.json")
    >>> get_value(cfg, "solver.rho")
    0.5
    """
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        overrides = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return merge_config(overrides)


def flatten_config(cfg: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Map dotted keys to leaf values."""
    flat = {}
    for key, value in cfg.items():
        if isinstance(value, dict):
            flat.update(flatten_config(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


def get_value(cfg: Dict[str, Any], dotted: str) -> Any:
    node: Any = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"Unknown configuration key: {dotted}", [dotted])
        node = node[part]
    return node


def set_value(cfg: Dict[str, Any], dotted: str, value: Any) -> Dict[str, Any]:
    """Return a copy of ``cfg`` with one dotted key replaced."""
    get_value(cfg, dotted)
    updated = copy.deepcopy(cfg)
    *parents, leaf = dotted.split(".")
    node = updated
    for part in parents:
        node = node[part]
    node[leaf] = value
    return updated


def dump_defaults() -> str:
    return json.dumps(DEFAULTS, indent=2)


# ==============================================================================
# Builders
# ==============================================================================

def _build(kind: str, factory: Any, **kwargs: Any) -> Any:
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {kind} configuration: {e}")


GEOMETRY_FIELDS = {
    "sad_mm": "source_to_center",
    "dcd_mm": "detector_to_center",
    "n_detectors": "n_detectors",
    "detector_width_mm": "detector_width",
    "n_views": "n_views",
    "fov_mm": "fov",
    "image_size": "image_size",
}


def geometry_from_config(cfg: Dict[str, Any]) -> FanBeamGeometry:
    """Map the ``geometry`` section (millimetre keys) onto FanBeamGeometry fields."""
    section = cfg["geometry"]
    return _build("geometry", FanBeamGeometry,
                  **{GEOMETRY_FIELDS[key]: value for key, value in section.items()})


def filter_bank_from_config(cfg: Dict[str, Any]) -> FilterBank:
    """
    Resolve ``filters.bank`` (preset name or .fb path).

    When the solver runs with inexact transposes and the bank has none, they are
    set to wᵀ plus a perturbation of relative size ``filters.inexact_perturbation``.
    """
    section = cfg["filters"]
    fb = resolve_filter_bank(
        section["bank"], channels=section["channels"], layers=section["layers"],
        seed=section["seed"], scale=section["scale"], activation_delta=section["activation_delta"],
    )
    needs_transposes = cfg["solver"]["gradient_mode"] == "inexact" and fb.inexact_transposes is None
    if needs_transposes or section["inexact_perturbation"] > 0:
        fb = perturbed_transposes(fb, section["inexact_perturbation"], section["perturbation_seed"])
    return fb


def regularizer_config_from_config(cfg: Dict[str, Any],
                                   filter_bank: Optional[FilterBank] = None) -> RegularizerConfig:
    graph = cfg["graph"]
    return _build(
        "regularizer", RegularizerConfig,
        filter_bank=filter_bank if filter_bank is not None else filter_bank_from_config(cfg),
        lam=cfg["regularizer"]["lambda"],
        kappa=cfg["regularizer"]["kappa"],
        graph_mode=graph["mode"],
        graph_storage=graph["storage"],
        window_radius=graph["window_radius"],
        sample_budget=graph["sample_budget"],
        bandwidth_seed=graph["seed"],
    )


def solver_config_from_config(cfg: Dict[str, Any], strategy: str = "elda") -> SolverConfig:
    return _build("solver", SolverConfig, strategy=strategy, **cfg["solver"])


def dose_models_from_config(cfg: Dict[str, Any]) -> List[DoseModel]:
    """One DoseModel per configured I₀ (a number or a list), all with ``dose.seed``."""
    section = cfg["dose"]
    levels = section["I0"] if isinstance(section["I0"], list) else [section["I0"]]
    if not levels:
        raise ConfigError("dose.I0 must name at least one dose level", ["dose.I0"])
    return [
        _build("dose", DoseModel, I0=float(level), sigma_e2=section["sigma_e2"],
               seed=section["seed"], clamp_floor=section["clamp_floor"])
        for level in levels
    ]
