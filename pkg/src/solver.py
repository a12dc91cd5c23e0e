"""
Solver Module - Efficient Learned Descent with Safeguarded Steps

This module provides the iterative reconstruction loop:
- The cheap inexact candidate u = z − τ∇r_ε(z) with z = x − α∇f(x)
- Descent condition on u and the safeguard gradient step v with backtracking
- The smoothing reduction rule ε ← γε and termination on σ·ε < ε_tol
- Per-iteration traces exported as CSV, and replay of the descent invariants
- Comparison strategies: 'lda' (keep the better of u and v) and 'plain_gd'
"""

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Union, Optional, List, Dict, Any, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core import Image


STRATEGIES = ("elda", "lda", "plain_gd")
GRADIENT_MODES = ("exact", "inexact")
TRACE_COLUMNS = [
    "k", "eps", "phi", "grad_norm", "branch", "backtracks", "alpha", "step_norm", "ms",
    "phi_next", "eps_next", "grad_norm_next",
]
Schedule = Optional[Union[float, Sequence[float]]]
STEP_SCALED_C = 10.0


# ==============================================================================
# Errors
# ==============================================================================

class LineSearchError(RuntimeError):
    """Backtracking exceeded its cap; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace: Optional["SolverTrace"] = None):
        super().__init__(message)
        self.trace = trace


class NumericalFailure(RuntimeError):
    """An iterate or objective value became non-finite."""

    def __init__(self, message: str, trace: Optional["SolverTrace"] = None):
        super().__init__(message)
        self.trace = trace


# ==============================================================================
# Configuration
# ==============================================================================

@dataclass(frozen=True)
class SolverConfig:
    """
    Constants of the descent loop.

    ``alpha``/``beta`` are a constant, a per-iteration sequence, or None:
    α defaults to 1/λ_max(AᵀA) and β defaults to α, so τ = αβ/(α+β) = α/2.
    ``c`` defaults to 10/α₀ and stays fixed for the whole run. ``grad_tol``
    optionally stops the loop once ‖∇φ_ε(x_{k+1})‖ ≤ grad_tol.
    """
    rho: float = 0.5
    gamma: float = 0.5
    eps0: float = 1e-3
    sigma_red: float = 1.0
    c: Optional[float] = None
    iota: float = 1e-3
    tau_desc: float = 1e-3
    max_iter: int = 100
    eps_tol: float = 1e-8
    max_backtracks: int = 60
    alpha: Schedule = None
    beta: Schedule = None
    gradient_mode: str = "exact"
    strategy: str = "elda"
    freeze_epsilon: bool = False
    grad_tol: Optional[float] = None
    power_iterations: int = 30

    def __post_init__(self):
        for name in ("rho", "gamma"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        for name in ("eps0", "sigma_red", "c", "iota", "tau_desc", "eps_tol", "grad_tol"):
            value = getattr(self, name)
            if value is None and name in ("c", "grad_tol"):
                continue
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be > 0, got {value}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.max_backtracks < 0:
            raise ValueError(f"max_backtracks must be >= 0, got {self.max_backtracks}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"Unknown gradient mode: {self.gradient_mode}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown strategy: {self.strategy}")
        for name in ("alpha", "beta"):
            schedule = getattr(self, name)
            if schedule is None:
                continue
            values = np.atleast_1d(np.asarray(schedule, dtype=np.float64))
            if not np.all(np.isfinite(values) & (values > 0)):
                raise ValueError(f"{name} schedule must be positive")
            if values.size > 1 and values.size < self.max_iter:
                raise ValueError(f"{name} schedule has {values.size} entries for {self.max_iter} iterations")

    @staticmethod
    def _at(schedule: Schedule, k: int) -> float:
        values = np.atleast_1d(np.asarray(schedule, dtype=np.float64))
        return float(values[0] if values.size == 1 else values[k])

    def alpha_at(self, k: int, default: float) -> float:
        return default if self.alpha is None else self._at(self.alpha, k)

    def beta_at(self, k: int, alpha: float) -> float:
        return alpha if self.beta is None else self._at(self.beta, k)

    def c_for(self, alpha0: float) -> float:
        """Constant of the u-step condition for a run whose first step is ``alpha0``."""
        return STEP_SCALED_C / alpha0 if self.c is None else float(self.c)


# ==============================================================================
# Trace
# ==============================================================================

@dataclass
class IterationRecord:
    k: int
    eps: float
    phi: float
    grad_norm: float
    branch: str
    backtracks: int
    alpha: float
    step_norm: float
    ms: float
    phi_next: float
    eps_next: float
    grad_norm_next: float


@dataclass
class SolverTrace:
    """
    Records of every completed iteration plus the state at exit.

    ``final_phi`` is φ at the returned iterate for ``final_eps``.
    """
    strategy: str = "elda"
    iota: float = 1e-3
    tau_desc: float = 1e-3
    sigma_red: float = 1.0
    gamma: float = 0.5
    eps_tol: float = 1e-8
    max_backtracks: int = 60
    freeze_epsilon: bool = False
    records: List[IterationRecord] = field(default_factory=list)
    final_phi: Optional[float] = None
    final_eps: Optional[float] = None
    final_grad_norm: Optional[float] = None
    reason: str = "running"

    def __len__(self) -> int:
        return len(self.records)

    def branch_ratio(self) -> float:
        """Fraction of iterations that took the u-candidate (0 for an empty trace)."""
        if not self.records:
            return 0.0
        return sum(r.branch == "u" for r in self.records) / len(self.records)

    def to_dataframe(self, timing: bool = True) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.records], columns=TRACE_COLUMNS)
        if not timing:
            df["ms"] = 0.0
        return df

    def write_csv(self, path: Union[str, Path], timing: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_dataframe(timing).to_csv(path, index=False, float_format="%.17g")
        return path

    def tail(self, n: int = 5) -> pd.DataFrame:
        return self.to_dataframe().tail(n)


def _trace_for(cfg: SolverConfig) -> SolverTrace:
    return SolverTrace(
        strategy=cfg.strategy, iota=cfg.iota, tau_desc=cfg.tau_desc, sigma_red=cfg.sigma_red,
        gamma=cfg.gamma, eps_tol=cfg.eps_tol, max_backtracks=cfg.max_backtracks,
        freeze_epsilon=cfg.freeze_epsilon,
    )


# ==============================================================================
# Steps
# ==============================================================================

def u_candidate(x: np.ndarray, problem: Any, eps: float, alpha: float, tau: float,
                mode: str = "exact") -> Tuple[np.ndarray, np.ndarray]:
    """
    Inexact candidate: z = x − α∇f(x), u = z − τ∇r_ε(z).

    Examples
    --------
    >>> p = DenseSurrogate(np.array([[2.0]]), np.array([4.0]))
    >>> u_candidate(np.zeros(1), p, 1e-3, 0.1, 0.05)[1]
    array([0.8])
    """
    z = x - alpha * problem.fidelity_grad(x)
    u = z - tau * problem.regularizer_grad(z, eps, mode)
    return z, u


def check_condition_u(x: np.ndarray, u: np.ndarray, phi_x: float, phi_u: float,
                      grad_norm_x: float, c: float, iota: float) -> bool:
    """True iff ‖∇φ_ε(x)‖ ≤ c‖u − x‖ and φ_ε(u) − φ_ε(x) ≤ −(ι/2)‖u − x‖²."""
    step = float(np.linalg.norm(u - x))
    return bool(grad_norm_x <= c * step and phi_u - phi_x <= -0.5 * iota * step * step)


def v_candidate_with_linesearch(x: np.ndarray, problem: Any, eps: float, alpha_init: float,
                                rho: float, tau_desc: float, max_backtracks: int,
                                phi_x: Optional[float] = None,
                                grad_x: Optional[np.ndarray] = None
                                ) -> Tuple[np.ndarray, float, int, float]:
    """
    Safeguard step v = x − α∇φ_ε(x) with α ← ρα until φ_ε(v) − φ_ε(x) ≤ −τ‖v − x‖².

    Returns
    -------
    (v, alpha_used, n_backtracks, phi_v)

    Raises
    ------
    LineSearchError
        If more than ``max_backtracks`` shrinks are needed.
    """
    if not alpha_init > 0:
        raise ValueError(f"initial step must be > 0, got {alpha_init}")
    if phi_x is None or grad_x is None:
        phi_x, grad_x = problem.phi(x, eps)
    alpha = alpha_init
    for n_backtracks in range(max_backtracks + 1):
        v = x - alpha * grad_x
        phi_v = problem.phi_value(v, eps)
        step = v - x
        if phi_v - phi_x <= -tau_desc * float(np.vdot(step, step)):
            return v, alpha, n_backtracks, float(phi_v)
        alpha *= rho
    raise LineSearchError(
        f"line search did not reach sufficient decrease within {max_backtracks} backtracks "
        f"(eps={eps:.3e}, alpha_init={alpha_init:.3e})"
    )


def epsilon_update(eps: float, grad_norm_next: float, sigma_red: float, gamma: float) -> float:
    """γε if ‖∇φ_ε(x_{k+1})‖ < σ_red·γ·ε, else ε."""
    return gamma * eps if grad_norm_next < sigma_red * gamma * eps else eps


# ==============================================================================
# Main loop
# ==============================================================================

def _log(logger: Any, action: str, description: str, level: str = "INFO",
         metadata: Optional[Dict[str, Any]] = None) -> None:
    if logger is not None:
        logger.log(action, description, level=level, metadata=metadata)


def run(x0: Union[Image, np.ndarray], problem: Any, cfg: Optional[SolverConfig] = None,
        logger: Any = None) -> Tuple[Union[Image, np.ndarray], SolverTrace]:
    """
    Run the descent loop from x₀.

    Each iteration first tries the inexact candidate u and accepts it when the
    descent condition holds, otherwise falls back to the line-searched v
    ('elda'). ε is reduced by γ whenever ‖∇φ_ε(x_{k+1})‖ < σ_red·γ·ε, and the
    loop stops when σ_red·ε < ε_tol or after ``max_iter`` iterations.

    Parameters
    ----------
    x0 : Image or np.ndarray
        Initial iterate (an FBP reconstruction in the CT pipeline).
    problem : SmoothedObjective or DenseSurrogate
        Provides ``phi``, ``phi_value``, ``fidelity_grad``, ``regularizer_grad``,
        ``n_locations`` and ``fidelity_lipschitz``.
    cfg : SolverConfig, optional
        Defaults to ``SolverConfig()``.
    logger : ActivityLogger, optional
        Receives solver_start, epsilon_reduced, line_search_failure and
        solver_finished events.

    Returns
    -------
    (x_final, SolverTrace)
        x_final has the type of x0.

    Raises
    ------
    LineSearchError, NumericalFailure
        With the partial trace attached.
    """
    cfg = cfg or SolverConfig()
    as_image = isinstance(x0, Image)
    x = np.array(x0.values if as_image else x0, dtype=np.float64, copy=True)
    trace = _trace_for(cfg)

    def finish(x_final: np.ndarray) -> Tuple[Union[Image, np.ndarray], SolverTrace]:
        return (x0.with_values(x_final) if as_image else x_final), trace

    if not np.all(np.isfinite(x)):
        trace.reason = "numerical_failure"
        raise NumericalFailure("initial iterate is not finite", trace)

    eps = cfg.eps0
    if cfg.max_iter == 0:
        phi_x, g_x = problem.phi(x, eps)
        trace.final_phi, trace.final_eps = float(phi_x), eps
        trace.final_grad_norm = float(np.linalg.norm(g_x))
        trace.reason = "max_iter"
        return finish(x)

    alpha_default = 1.0 / problem.fidelity_lipschitz() if cfg.alpha is None else 0.0
    c = cfg.c_for(cfg.alpha_at(0, alpha_default))
    mode = cfg.gradient_mode
    _log(logger, "solver_start", f"{cfg.strategy} for up to {cfg.max_iter} iterations",
         metadata={"strategy": cfg.strategy, "max_iter": cfg.max_iter, "eps0": eps,
                   "alpha": cfg.alpha_at(0, alpha_default), "c": c, "gradient_mode": mode})

    phi_x, g_x = problem.phi(x, eps)
    trace.reason = "max_iter"
    for k in range(cfg.max_iter):
        started = time.perf_counter()
        grad_norm = float(np.linalg.norm(g_x))
        alpha = cfg.alpha_at(k, alpha_default)
        backtracks = 0
        alpha_used = alpha

        try:
            if cfg.strategy == "plain_gd":
                x_new, branch = x - alpha * g_x, "gd"
            else:
                beta = cfg.beta_at(k, alpha)
                tau = alpha * beta / (alpha + beta)
                _, u = u_candidate(x, problem, eps, alpha, tau, mode)
                phi_u = problem.phi_value(u, eps)
                if cfg.strategy == "elda" and check_condition_u(
                        x, u, phi_x, phi_u, grad_norm, c, cfg.iota):
                    x_new, branch = u, "u"
                else:
                    v, alpha_used, backtracks, phi_v = v_candidate_with_linesearch(
                        x, problem, eps, alpha, cfg.rho, cfg.tau_desc, cfg.max_backtracks, phi_x, g_x)
                    if cfg.strategy == "lda" and np.isfinite(phi_u) and phi_u <= phi_v:
                        x_new, branch, alpha_used, backtracks = u, "u", alpha, 0
                    else:
                        x_new, branch = v, "v"
        except LineSearchError as e:
            trace.reason = "line_search_failure"
            _log(logger, "line_search_failure", str(e), level="ERROR",
                 metadata={"k": k, "eps": eps, "phi": float(phi_x), "grad_norm": grad_norm})
            raise LineSearchError(str(e), trace) from e

        phi_new, g_new = problem.phi(x_new, eps)
        if not (np.isfinite(phi_new) and np.all(np.isfinite(x_new))):
            trace.reason = "numerical_failure"
            _log(logger, "numerical_failure", f"non-finite iterate at k={k}", level="ERROR",
                 metadata={"k": k, "eps": eps})
            raise NumericalFailure(f"non-finite iterate at iteration {k}", trace)
        grad_norm_next = float(np.linalg.norm(g_new))

        if cfg.freeze_epsilon or cfg.strategy == "plain_gd":
            eps_new = eps
        else:
            eps_new = epsilon_update(eps, grad_norm_next, cfg.sigma_red, cfg.gamma)

        trace.records.append(IterationRecord(
            k=k, eps=eps, phi=float(phi_x), grad_norm=grad_norm, branch=branch,
            backtracks=backtracks, alpha=alpha_used,
            step_norm=float(np.linalg.norm(x_new - x)),
            ms=(time.perf_counter() - started) * 1000.0,
            phi_next=float(phi_new), eps_next=eps_new, grad_norm_next=grad_norm_next,
        ))

        if eps_new != eps:
            _log(logger, "epsilon_reduced", f"eps {eps:.3e} -> {eps_new:.3e} at k={k}",
                 metadata={"k": k, "eps": eps, "eps_next": eps_new, "grad_norm_next": grad_norm_next})
            phi_x, g_x = problem.phi(x_new, eps_new)
        else:
            phi_x, g_x = phi_new, g_new
        x, eps = x_new, eps_new

        if not cfg.freeze_epsilon and cfg.strategy != "plain_gd" and cfg.sigma_red * eps < cfg.eps_tol:
            trace.reason = "tolerance"
            break
        if cfg.grad_tol is not None and grad_norm_next <= cfg.grad_tol:
            trace.reason = "gradient"
            break

    trace.final_phi, trace.final_eps = float(phi_x), eps
    trace.final_grad_norm = float(np.linalg.norm(g_x))
    _log(logger, "solver_finished", f"{len(trace)} iterations ({trace.reason})",
         metadata={"iterations": len(trace), "reason": trace.reason, "final_phi": trace.final_phi,
                   "final_eps": eps, "branch_ratio": trace.branch_ratio()})
    return finish(x)


# ==============================================================================
# Trace replay
# ==============================================================================

def _row(prop: str, passed: bool, worst: float, detail: str) -> Dict[str, Any]:
    return {"property": prop, "passed": bool(passed), "worst": float(worst), "detail": detail}


def check_trace_invariants(trace: SolverTrace, m: int, rel_tol: float = 1e-12) -> pd.DataFrame:
    """
    Replay the descent properties over a trace.

    Rows: monotone_descent (φ_ε(x_{k+1}) ≤ φ_ε(x_k) at fixed ε), sufficient_decrease
    (the accepted step's own clause), lyapunov_decay (φ + mε/2 never increases,
    allowing ``rel_tol`` relative rounding), epsilon_trajectory and backtrack_cap.
    ``worst`` is the largest violation margin (≤ 0 when the property holds).
    """
    df = trace.to_dataframe()
    rows: List[Dict[str, Any]] = []
    if df.empty:
        for prop in ("monotone_descent", "sufficient_decrease", "lyapunov_decay",
                     "epsilon_trajectory", "backtrack_cap"):
            rows.append(_row(prop, True, 0.0, "empty trace"))
        return pd.DataFrame(rows)

    fixed = df[df["eps_next"] == df["eps"]]
    margin = (fixed["phi_next"] - fixed["phi"]).max() if not fixed.empty else 0.0
    rows.append(_row("monotone_descent", margin <= 0, margin, f"{len(fixed)} fixed-eps steps"))

    if trace.strategy == "plain_gd":
        rows.append(_row("sufficient_decrease", True, 0.0, "not asserted for plain_gd"))
    else:
        drop = df["phi_next"] - df["phi"]
        s2 = df["step_norm"] ** 2
        u_clause = drop + 0.5 * trace.iota * s2
        v_clause = drop + trace.tau_desc * s2
        if trace.strategy == "lda":
            u_clause = drop
        clause = np.where(df["branch"] == "u", u_clause, v_clause)
        worst = float(np.max(clause))
        rows.append(_row("sufficient_decrease", worst <= 0, worst,
                         f"{int((df['branch'] == 'u').sum())} u-steps, {int((df['branch'] == 'v').sum())} v-steps"))

    phi_after = np.append(df["phi"].to_numpy()[1:], trace.final_phi)
    eps_after = df["eps_next"].to_numpy()
    before = df["phi"].to_numpy() + m * df["eps"].to_numpy() / 2.0
    middle = df["phi_next"].to_numpy() + m * df["eps"].to_numpy() / 2.0
    after = phi_after + m * eps_after / 2.0
    slack = rel_tol * np.maximum(1.0, np.abs(before))
    worst = float(np.max(np.maximum(after - middle, middle - before) - slack))
    rows.append(_row("lyapunov_decay", worst <= 0, worst,
                     f"{int((df['eps_next'] < df['eps']).sum())} reductions"))

    eps = df["eps"].to_numpy()
    eps_next = df["eps_next"].to_numpy()
    chained = np.all(eps[1:] == eps_next[:-1]) and (trace.final_eps == eps_next[-1])
    shrink_only = np.all((eps_next == eps) | (eps_next == trace.gamma * eps))
    reduced = eps_next < eps
    if trace.strategy == "plain_gd" or trace.freeze_epsilon:
        rule = not bool(np.any(reduced))
    else:
        should = df["grad_norm_next"].to_numpy() < trace.sigma_red * trace.gamma * eps
        rule = bool(np.all(reduced == should))
    terminated_ok = trace.reason != "tolerance" or trace.sigma_red * trace.final_eps < trace.eps_tol
    ok = bool(chained and shrink_only and rule and terminated_ok)
    rows.append(_row("epsilon_trajectory", ok, 0.0 if ok else 1.0,
                     f"eps {eps[0]:.3e} -> {trace.final_eps:.3e}"))

    max_bt = int(df["backtracks"].max())
    rows.append(_row("backtrack_cap", max_bt <= trace.max_backtracks,
                     max_bt - trace.max_backtracks, f"max {max_bt} backtracks"))
    return pd.DataFrame(rows)


def reduction_subsequence(trace: SolverTrace) -> pd.DataFrame:
    """Iterations where ε was reduced, with ‖∇φ_ε(x_{k+1})‖ at the old ε."""
    df = trace.to_dataframe()
    return df.loc[df["eps_next"] < df["eps"], ["k", "eps", "eps_next", "grad_norm_next"]].reset_index(drop=True)


# ==============================================================================
# Dense surrogate
# ==============================================================================

class DenseSurrogate:
    """
    φ_ε(x) = ½‖Ax − b‖² (+ smoothed ℓ1 of x) on small dense problems.

    Implements the interface ``run`` consumes so the loop can be checked
    against closed-form answers without a CT geometry.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, smoothed_l1: bool = False):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).ravel()
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.size} entries")
        self.smoothed_l1 = smoothed_l1

    def value(self, x: np.ndarray) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.A.T @ (self.A @ x - self.b)

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.A.T @ self.A)[-1])

    def regularizer_value(self, x: np.ndarray, eps: float) -> float:
        if not self.smoothed_l1:
            return 0.0
        a = np.abs(x)
        return float(np.sum(np.where(a <= eps, a * a / (2.0 * eps), a - eps / 2.0)))

    def regularizer_grad(self, x: np.ndarray, eps: float, mode: str = "exact") -> np.ndarray:
        if not self.smoothed_l1:
            return np.zeros_like(x)
        return x / np.maximum(np.abs(x), eps)

    def phi(self, x: np.ndarray, eps: float, mode: str = "exact") -> Tuple[float, np.ndarray]:
        return (self.value(x) + self.regularizer_value(x, eps),
                self.gradient(x) + self.regularizer_grad(x, eps))

    def phi_value(self, x: np.ndarray, eps: float) -> float:
        return self.value(x) + self.regularizer_value(x, eps)

    def fidelity_grad(self, x: np.ndarray) -> np.ndarray:
        return self.gradient(x)

    def fidelity_lipschitz(self) -> float:
        return self.lipschitz()

    def n_locations(self, x: np.ndarray) -> int:
        return int(np.asarray(x).size) if self.smoothed_l1 else 0
