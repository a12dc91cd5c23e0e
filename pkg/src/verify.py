"""
Verify Module - Property Suites

This module provides the numerical checks run by the ``verify`` command:
- adjoint: ⟨Ax, y⟩ = ⟨x, Aᵀy⟩ for the projector, folding and linear feature maps
- gradients: analytic ∇φ_ε against central finite differences
- descent: replay of the descent and Lyapunov properties over fresh solver traces,
  plus u-step use, ε reductions and fixed-ε stationarity
- smoothing: smoothing sandwich, per-location monotonicity, Laplacian identities
- noise: Monte-Carlo moments of the transmission noise model

Every suite returns a DataFrame with one row per property:
suite, property, passed, measured, threshold, detail.
"""

from typing import Callable, Optional, List, Dict, Any, Tuple

import numpy as np
import pandas as pd

from src.core import Image, FeatureMap, fold, unfold_adjoint, feature_map_from_array
from src.ct_model import FanBeamGeometry, LinearFidelity, get_projector, forward_project, fbp
from src.features import FilterBank, preset_filter_bank, perturbed_transposes, apply_g, jacobian_T_apply
from src.regularizers import (
    RegularizerConfig, SmoothedObjective, sparsity_value, sparsity_exact, sparsity_terms,
    median_bandwidth, build_graph, nonlocal_value, nonlocal_quadratic_form, nonlocal_grad,
    initial_graph, ct_objective,
)
from src.sim_metrics import DoseModel, phantom_for_geometry, simulate_noisy_sinogram, sample_intensities
from src.solver import SolverConfig, DenseSurrogate, run, check_trace_invariants, reduction_subsequence


SUITES = ("adjoint", "gradients", "descent", "smoothing", "noise")
REPORT_COLUMNS = ["suite", "property", "passed", "measured", "threshold", "detail"]


def _row(suite: str, prop: str, measured: float, threshold: float, detail: str = "",
         passed: Optional[bool] = None) -> Dict[str, Any]:
    measured = float(measured)
    return {
        "suite": suite,
        "property": prop,
        "passed": bool(measured <= threshold if passed is None else passed),
        "measured": measured,
        "threshold": float(threshold),
        "detail": detail,
    }


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ==============================================================================
# Instances
# ==============================================================================

def small_geometry(image_size: int = 16, fov: Optional[float] = None,
                   n_detectors: Optional[int] = None, n_views: Optional[int] = None) -> FanBeamGeometry:
    """Geometry sized for property checks (1 mm pixels unless ``fov`` is given)."""
    return FanBeamGeometry.for_image(
        image_size,
        float(image_size) if fov is None else fov,
        2 * image_size if n_detectors is None else n_detectors,
        4 * image_size if n_views is None else n_views,
    )


def ct_instance(geometry: FanBeamGeometry, I0: float = 2.5e4, seed: int = 0,
                attenuation_scale: float = 0.1) -> Tuple[Image, Any, Image]:
    """Phantom, noisy sinogram and FBP initializer on ``geometry``."""
    phantom = phantom_for_geometry(geometry.image_size, geometry.fov, attenuation_scale)
    clean = forward_project(phantom, geometry)
    noisy = simulate_noisy_sinogram(clean, DoseModel(I0, seed=seed))
    return phantom, noisy, fbp(noisy, geometry)


def strongly_observed_instance(image_size: int = 16, eps: float = 1.0, seed: int = 0,
                               I0: float = 1e6) -> Tuple[SmoothedObjective, Image]:
    """
    Well-conditioned CT problem for fixed-ε stationarity checks.

    0.1 mm pixels, 4n views and a tv bank scaled to s = sqrt(L·ε/10) with λ = 0.
    Descriptors stay inside the quadratic zone ‖g_i‖ ≤ ε, so φ_ε is
    ½‖Ax − b‖² + (L/20)‖Dx‖², a quadratic whose gradient can be driven below 1e-6.
    """
    geometry = small_geometry(image_size, fov=0.1 * image_size)
    _, noisy, x0 = ct_instance(geometry, I0=I0, seed=seed, attenuation_scale=0.01)
    lipschitz = LinearFidelity(geometry, noisy).lipschitz()
    fb = preset_filter_bank("tv", scale=float(np.sqrt(lipschitz * eps / 10.0)))
    return ct_objective(geometry, noisy, RegularizerConfig(fb, lam=0.0), x0), x0


# ==============================================================================
# adjoint
# ==============================================================================

def adjoint_suite(geometry: Optional[FanBeamGeometry] = None, n_pairs: int = 100,
                  seed: int = 0) -> pd.DataFrame:
    geometry = geometry or FanBeamGeometry.for_image(32, 170.0, 64, 90)
    projector = get_projector(geometry)
    rng = _rng(seed)
    n = geometry.image_size
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal((n, n))
        y = rng.standard_normal((geometry.n_views, geometry.n_detectors))
        ax = projector.forward(x)
        lhs = float(np.vdot(ax, y))
        rhs = float(np.vdot(x, projector.adjoint(y)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)))
    rows = [_row("adjoint", "projector_adjoint", worst, 1e-10, f"{n_pairs} pairs at {n}x{n}")]

    d, kappa, m = 3, 4, 64
    a = rng.standard_normal((d, m))
    b = rng.standard_normal((kappa * d, m // kappa))
    lhs = float(np.vdot(fold(feature_map_from_array(a), kappa).values, b))
    rhs = float(np.vdot(a, unfold_adjoint(b, d, kappa).values))
    rows.append(_row("adjoint", "fold_adjoint", abs(lhs - rhs) / max(abs(lhs), 1.0), 1e-12))

    fb = preset_filter_bank("tv")
    x = Image(n, n, 1.0, rng.standard_normal((n, n)))
    v = FeatureMap(fb.channels, n * n, rng.standard_normal((fb.channels, n * n)), (n, n))
    gx, state = apply_g(x, fb)
    lhs = float(np.vdot(gx.values, v.values))
    rhs = float(np.vdot(x.values, jacobian_T_apply(x, fb, v, "exact", state).values))
    rows.append(_row("adjoint", "linear_feature_adjoint", abs(lhs - rhs) / max(abs(lhs), 1.0), 1e-12,
                     "tv preset"))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


# ==============================================================================
# gradients
# ==============================================================================

def directional_errors(value: Callable[[np.ndarray], float], gradient: np.ndarray, x: np.ndarray,
                       n_directions: int, rng: np.random.Generator, step: float = 1e-6) -> np.ndarray:
    """
    Central-difference check along random unit directions h.

    The error |FD − ⟨∇φ, h⟩| is measured relative to ‖∇φ‖ (‖h‖ = 1).
    """
    scale = max(float(np.linalg.norm(gradient)), 1e-300)
    t = step * max(1.0, float(np.linalg.norm(x)))
    errors = []
    for _ in range(n_directions):
        h = rng.standard_normal(x.shape)
        h /= np.linalg.norm(h)
        fd = (value(x + t * h) - value(x - t * h)) / (2.0 * t)
        errors.append(abs(fd - float(np.vdot(gradient, h))) / scale)
    return np.asarray(errors)


def objective_gradient_error(objective: SmoothedObjective, points: List[np.ndarray], eps: float,
                             n_directions: int = 3, seed: int = 0) -> float:
    """Largest directional error of ``objective.phi`` over ``points``."""
    rng = _rng(seed)
    worst = 0.0
    for x in points:
        _, grad = objective.phi(x, eps)
        errors = directional_errors(lambda y: objective.phi_value(y, eps), grad, x, n_directions, rng)
        worst = max(worst, float(errors.max()))
    return worst


def gradients_suite(n_points: int = 20, image_size: int = 16, eps: float = 1e-3,
                    seed: int = 0) -> pd.DataFrame:
    geometry = small_geometry(image_size)
    phantom, noisy, _ = ct_instance(geometry, seed=seed)
    rng = _rng(seed + 1)
    points = [phantom.values + 0.01 * rng.standard_normal(phantom.shape) for _ in range(n_points)]
    x0 = phantom.with_values(points[0])

    rows = []
    cases = [
        ("tv_frozen", preset_filter_bank("tv"), "frozen", 1e-5),
        ("seeded_random_frozen", preset_filter_bank("seeded-random", channels=8, layers=3, seed=seed),
         "frozen", 1e-5),
        ("tv_exact_graph", preset_filter_bank("tv"), "exact", 1e-4),
    ]
    for name, fb, graph_mode, threshold in cases:
        cfg = RegularizerConfig(fb, lam=0.1, kappa=4, graph_mode=graph_mode, graph_storage="dense")
        objective = ct_objective(geometry, noisy, cfg, x0)
        worst = objective_gradient_error(objective, points, eps, seed=seed)
        rows.append(_row("gradients", name, worst, threshold,
                         f"{n_points} points at {image_size}x{image_size}, eps={eps:g}"))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


# ==============================================================================
# descent
# ==============================================================================

def _trace_rows(name: str, trace: Any, m: int) -> List[Dict[str, Any]]:
    rows = []
    for record in check_trace_invariants(trace, m).to_dict("records"):
        rows.append(_row("descent", f"{name}:{record['property']}", record["worst"], 0.0,
                         record["detail"], passed=record["passed"]))
    return rows


def descent_suite(iterations: int = 40, image_size: int = 32, seed: int = 0,
                  filter_bank: Optional[FilterBank] = None,
                  stationarity_iterations: int = 5000) -> pd.DataFrame:
    geometry = FanBeamGeometry.for_image(image_size, 170.0, 2 * image_size, 90)
    _, noisy, x0 = ct_instance(geometry, seed=seed)
    fb = filter_bank or preset_filter_bank("tv")
    m = image_size * image_size
    rows: List[Dict[str, Any]] = []

    objective = ct_objective(geometry, noisy, RegularizerConfig(fb), x0)
    _, trace = run(x0, objective, SolverConfig(max_iter=iterations))
    rows += _trace_rows("elda", trace, m)
    rows.append(_row("descent", "elda:u_branch_used", trace.branch_ratio(), 0.0,
                     f"u-step ratio {trace.branch_ratio():.2f}", passed=trace.branch_ratio() > 0))

    _, frozen = run(x0, objective, SolverConfig(max_iter=iterations, freeze_epsilon=True))
    rows += _trace_rows("fixed_eps", frozen, m)

    # σ_red sized so the first reductions fire while ‖∇φ_ε‖ is still near its start
    _, g0 = objective.phi(x0.values, 1e-3)
    sigma_red = 10.0 * float(np.linalg.norm(g0)) / (0.5 * 1e-3)
    _, reducing = run(x0, objective, SolverConfig(max_iter=iterations, sigma_red=sigma_red))
    rows += _trace_rows("eps_schedule", reducing, m)
    reductions = len(reduction_subsequence(reducing))
    rows.append(_row("descent", "eps_schedule:reductions", reductions, 1, f"{reductions} reductions",
                     passed=reductions >= 1))

    corrupted = RegularizerConfig(perturbed_transposes(fb, 10.0, seed))
    noisy_objective = ct_objective(geometry, noisy, corrupted, x0)
    _, guarded = run(x0, noisy_objective, SolverConfig(max_iter=iterations, gradient_mode="inexact"))
    rows += _trace_rows("inexact_safeguard", guarded, m)
    v_steps = sum(r.branch == "v" for r in guarded.records)
    rows.append(_row("descent", "inexact_safeguard:v_branch_used", v_steps, 0, f"{v_steps} v-steps",
                     passed=v_steps >= 1))
    rows.append(_row("descent", "inexact_safeguard:fewer_u_steps", guarded.branch_ratio(),
                     trace.branch_ratio(),
                     f"u-step ratio {guarded.branch_ratio():.2f} vs {trace.branch_ratio():.2f} exact",
                     passed=guarded.branch_ratio() < trace.branch_ratio()))

    observed, start = strongly_observed_instance(seed=seed)
    _, settled = run(start, observed, SolverConfig(eps0=1.0, freeze_epsilon=True, grad_tol=1e-6,
                                                   max_iter=stationarity_iterations))
    smallest = min(r.grad_norm_next for r in settled.records)
    rows.append(_row("descent", "fixed_eps:stationarity", smallest, 1e-6,
                     f"{len(settled)} iterations ({settled.reason})"))

    surrogate = DenseSurrogate(np.array([[2.0, 0.5], [0.0, 1.0]]), np.array([1.0, -1.0]))
    _, ls_trace = run(np.zeros(2), surrogate, SolverConfig(max_iter=500))
    rows.append(_row("descent", "least_squares_gradient", ls_trace.final_grad_norm, 1e-8,
                     f"{len(ls_trace)} iterations ({ls_trace.reason})"))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


# ==============================================================================
# smoothing
# ==============================================================================

def _random_graph_instance(rng: np.random.Generator, max_nodes: int = 64):
    n = int(rng.integers(2, max_nodes + 1))
    d = int(rng.integers(1, 5))
    fg = fold(feature_map_from_array(rng.standard_normal((d, n))), 1)
    return fg, build_graph(fg, median_bandwidth(fg))


def smoothing_suite(n_points: int = 50, n_graphs: int = 30, n_vectors: int = 1000,
                    image_size: int = 16, seed: int = 0) -> pd.DataFrame:
    rng = _rng(seed)
    fb = preset_filter_bank("tv")
    m = image_size * image_size
    sandwich, monotone = 0.0, 0.0
    for _ in range(n_points):
        x = Image(image_size, image_size, 1.0, 0.05 * rng.standard_normal((image_size, image_size)))
        f, _ = apply_g(x, fb)
        exact = sparsity_exact(f)
        for eps in (1e-1, 1e-2, 1e-3):
            smooth = sparsity_value(f, eps)
            slack = 1e-12 * max(1.0, exact)
            sandwich = max(sandwich, smooth - exact - slack, exact - smooth - m * eps / 2.0 - slack)
            finer = 0.5 * eps
            gap = sparsity_terms(f, finer) + finer / 2.0 - (sparsity_terms(f, eps) + eps / 2.0)
            monotone = max(monotone, float(gap.max()) - 1e-15)
    rows = [
        _row("smoothing", "sandwich", sandwich, 0.0, f"{n_points} images, 3 eps values"),
        _row("smoothing", "per_location_monotone", monotone, 0.0, "eps -> eps/2"),
    ]

    identity = 0.0
    for _ in range(n_graphs):
        fg, graph = _random_graph_instance(rng)
        pair_sum = nonlocal_value(fg, graph)
        quadratic = nonlocal_quadratic_form(fg, graph.laplacian)
        identity = max(identity, abs(pair_sum - quadratic) / max(abs(pair_sum), 1e-300))
    rows.append(_row("smoothing", "quadratic_form_identity", identity, 1e-10, f"{n_graphs} dense graphs"))

    psd = 0.0
    per_graph = max(1, n_vectors // 10)
    for _ in range(10):
        _, graph = _random_graph_instance(rng)
        for _ in range(per_graph):
            v = rng.standard_normal(graph.n_nodes)
            psd = max(psd, -float(v @ (graph.laplacian @ v)) / float(v @ v))
    rows.append(_row("smoothing", "laplacian_psd", psd, 1e-10, f"{10 * per_graph} vectors"))

    rows.append(_row("smoothing", "nonlocal_grad_lipschitz",
                     nonlocal_lipschitz_estimate(image_size, seed=seed), np.inf,
                     "empirical constant of frozen-graph gradient on a ball", passed=True))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def nonlocal_lipschitz_estimate(image_size: int = 16, n_pairs: int = 20, radius: float = 0.05,
                                seed: int = 0) -> float:
    """Largest ‖∇r̄(x) − ∇r̄(y)‖/‖x − y‖ over random pairs in a ball around a phantom."""
    rng = _rng(seed)
    geometry = small_geometry(image_size)
    phantom = phantom_for_geometry(image_size, geometry.fov)
    cfg = RegularizerConfig(preset_filter_bank("tv"), lam=1.0, kappa=4, graph_storage="dense")
    graph = initial_graph(phantom, cfg)
    ratio = 0.0
    for _ in range(n_pairs):
        x = phantom.with_values(phantom.values + radius * rng.uniform(-1, 1, phantom.shape))
        y = phantom.with_values(phantom.values + radius * rng.uniform(-1, 1, phantom.shape))
        gx = nonlocal_grad(x, cfg.filter_bank, cfg, graph).values
        gy = nonlocal_grad(y, cfg.filter_bank, cfg, graph).values
        ratio = max(ratio, float(np.linalg.norm(gx - gy) / np.linalg.norm(x.values - y.values)))
    return ratio


# ==============================================================================
# noise
# ==============================================================================

def noise_suite(n_draws: int = 1_000_000, I0: float = 1e6, sigma_e2: float = 10.0, clean_value: float = 0.0,
                seed: int = 0) -> pd.DataFrame:
    dose = DoseModel(I0, sigma_e2, seed)
    counts = sample_intensities(np.full(n_draws, clean_value), dose)
    expected_mean = I0 * np.exp(-clean_value)
    expected_var = expected_mean + sigma_e2
    mean = float(counts.mean())
    centred = counts - mean
    var = float(np.mean(centred ** 2))
    se_mean = np.sqrt(var / n_draws)
    se_var = np.sqrt(max(float(np.mean(centred ** 4)) - var * var, 0.0) / n_draws)
    rows = [
        _row("noise", "mean_within_3se", abs(mean - expected_mean) / se_mean, 3.0,
             f"mean {mean:.3f} vs {expected_mean:.3f}"),
        _row("noise", "variance_within_3se", abs(var - expected_var) / se_var, 3.0,
             f"variance {var:.3f} vs {expected_var:.3f}"),
    ]

    clean = np.full(100_000, 1.0)
    errors = []
    for level in (1e4, 1e8):
        b = np.log(level / np.maximum(sample_intensities(clean, DoseModel(level, sigma_e2, seed)), 1.0))
        errors.append(abs(float(b.mean()) - 1.0))
    rows.append(_row("noise", "high_dose_bias", errors[1], 1e-4,
                     f"|E[b] - b_hat| {errors[0]:.2e} at 1e4, {errors[1]:.2e} at 1e8",
                     passed=errors[1] < 1e-4 and errors[1] < errors[0]))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def run_suite(name: str, seed: int = 0, **options: Any) -> pd.DataFrame:
    """
    Run one named suite.

    Raises
    ------
    ValueError
        For an unknown suite name.
    """
    suites = {
        "adjoint": adjoint_suite,
        "gradients": gradients_suite,
        "descent": descent_suite,
        "smoothing": smoothing_suite,
        "noise": noise_suite,
    }
    if name not in suites:
        raise ValueError(f"Unknown suite: {name} (choose from {', '.join(SUITES)})")
    return suites[name](seed=seed, **options)
