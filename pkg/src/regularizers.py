"""
Regularizers Module - Smoothed Sparsity and Nonlocal Graph Terms

This module provides the regularizer r_ε = r̂_ε + λ r̄ and the smoothed objective:
- Nesterov-smoothed ℓ2,1 sparsity of the feature descriptors and its gradient
- Median-distance bandwidth and Gaussian similarity graphs (dense or windowed)
- Nonlocal graph regularizer r̄ = Σ_{i<j} W_ij ‖ĝ_i − ĝ_j‖² = tr(ĝ L ĝᵀ) and its gradient
- SmoothedObjective: φ_ε = f + r̂_ε + λ r̄ with one shared forward pass of g
"""

from dataclasses import dataclass, field
from typing import Union, Optional, Tuple, Any

import numpy as np
from scipy import sparse
from scipy.spatial.distance import pdist, squareform

from src.core import Image, Sinogram, FeatureMap, FoldedFeatureMap, ShapeMismatchError, fold, unfold_adjoint
from src.ct_model import FanBeamGeometry, LinearFidelity
from src.features import FilterBank, forward_features, backward_features, apply_g, jacobian_T_apply


GRAPH_MODES = ("exact", "frozen")
GRAPH_STORAGES = ("auto", "dense", "windowed")
DENSE_NODE_LIMIT = 4096
DEFAULT_SAMPLE_BUDGET = 200_000

Matrix = Union[np.ndarray, sparse.csr_matrix]


class DegenerateBandwidthError(ValueError):
    """Raised when every folded descriptor is identical, so no bandwidth exists."""


def _check_epsilon(eps: float) -> None:
    if not (np.isfinite(eps) and eps > 0):
        raise ValueError(f"smoothing parameter must be > 0, got {eps}")


# ==============================================================================
# Configuration and state
# ==============================================================================

@dataclass(frozen=True)
class RegularizerConfig:
    """
    Parameters of r_ε = r̂_ε + λ r̄.

    ``graph_storage='auto'`` means dense up to ``DENSE_NODE_LIMIT`` nodes, windowed above.
    """
    filter_bank: FilterBank = field(repr=False)
    lam: float = 0.1
    kappa: int = 4
    graph_mode: str = "frozen"
    graph_storage: str = "auto"
    window_radius: int = 8
    sample_budget: int = DEFAULT_SAMPLE_BUDGET
    bandwidth_seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"Unknown graph mode: {self.graph_mode}")
        if self.graph_storage not in GRAPH_STORAGES:
            raise ValueError(f"Unknown graph storage: {self.graph_storage}")
        if self.window_radius < 1:
            raise ValueError(f"window_radius must be >= 1, got {self.window_radius}")
        if self.sample_budget < 1:
            raise ValueError(f"sample_budget must be >= 1, got {self.sample_budget}")

    def storage_for(self, n_nodes: int) -> str:
        if self.graph_storage == "auto":
            return "dense" if n_nodes <= DENSE_NODE_LIMIT else "windowed"
        return self.graph_storage


@dataclass(frozen=True)
class SmoothingState:
    """Current smoothing level ε with the reduction constants of the solver."""
    epsilon: float
    epsilon0: float = 1e-3
    gamma: float = 0.5
    sigma_red: float = 1.0
    locations: int = 0

    def __post_init__(self):
        _check_epsilon(self.epsilon)
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    def reduced(self) -> "SmoothingState":
        return SmoothingState(self.gamma * self.epsilon, self.epsilon0, self.gamma,
                              self.sigma_red, self.locations)

    def lyapunov(self, phi: float) -> float:
        """φ_ε + mε/2, nonincreasing along a solver run."""
        return phi + self.locations * self.epsilon / 2.0


# ==============================================================================
# Smoothed sparsity r̂_ε
# ==============================================================================

def sparsity_terms(f: FeatureMap, eps: float) -> np.ndarray:
    """Per-location r_{ε,i}: ‖g_i‖²/(2ε) if ‖g_i‖ ≤ ε, else ‖g_i‖ − ε/2."""
    _check_epsilon(eps)
    norms = f.column_norms()
    return np.where(norms <= eps, norms * norms / (2.0 * eps), norms - eps / 2.0)


def sparsity_value(f: FeatureMap, eps: float) -> float:
    """
    Smoothed ℓ2,1 norm r̂_ε of the descriptors.

    Examples
    --------
    >>> from src.core import feature_map_from_array
    >>> sparsity_value(feature_map_from_array(np.array([[3.0], [4.0]])), 1.0)
    4.5
    """
    return float(np.sum(sparsity_terms(f, eps)))


def sparsity_exact(f: FeatureMap) -> float:
    """Nonsmooth r̂ = Σ_i ‖g_i‖."""
    return float(np.sum(f.column_norms()))


def _sparsity_cotangent(values: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt(np.sum(values * values, axis=0))
    return values / np.maximum(norms, eps)


def sparsity_grad(x: Image, fb: FilterBank, eps: float, mode: str = "exact") -> Image:
    """
    Gradient of r̂_ε(g(x)).

    Each descriptor column is scaled by 1/ε (inside the knot) or 1/‖g_i‖ (outside)
    and pulled back through ``jacobian_T_apply``.
    """
    _check_epsilon(eps)
    f, state = apply_g(x, fb)
    cotangent = FeatureMap(f.channels, f.locations, _sparsity_cotangent(f.values, eps), f.grid)
    return jacobian_T_apply(x, fb, cotangent, mode, state)


# ==============================================================================
# Similarity graph
# ==============================================================================

@dataclass(frozen=True)
class SimilarityGraph:
    """
    Gaussian similarity graph over folded descriptors.

    ``weights`` keeps W_ii = 1 on the diagonal; it never contributes to pair
    sums and cancels in L = D − W. ``exact_weights``/``exact_laplacian`` hold
    W̃ = W ⊙ (1 − ‖ĝ_i − ĝ_j‖²/δ²) and L̃ = D̃ − W̃ when built for exact mode.
    """
    weights: Matrix = field(repr=False)
    laplacian: Matrix = field(repr=False)
    bandwidth: float
    mode: str = "frozen"
    storage: str = "dense"
    window_radius: Optional[int] = None
    exact_weights: Optional[Matrix] = field(default=None, repr=False)
    exact_laplacian: Optional[Matrix] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()


def median_bandwidth(fg: FoldedFeatureMap, sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                     seed: int = 0) -> float:
    """
    Median Euclidean distance between folded descriptors.

    Exact over all pairs when there are at most ``sample_budget`` of them,
    otherwise over a seeded uniform sample of that many pairs. When at least
    half of the distances are zero, the median of the positive ones is used.

    Raises
    ------
    ValueError
        With fewer than two nodes.
    DegenerateBandwidthError
        If all descriptors are identical.
    """
    n = fg.n_nodes
    if n < 2:
        raise ValueError(f"bandwidth needs at least 2 nodes, got {n}")
    points = fg.values.T
    if n * (n - 1) // 2 <= sample_budget:
        distances = pdist(points)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=sample_budget)
        j = rng.integers(0, n - 1, size=sample_budget)
        j = j + (j >= i)
        distances = np.linalg.norm(points[i] - points[j], axis=1)

    positive = distances[distances > 0]
    if positive.size == 0:
        raise DegenerateBandwidthError("all folded descriptors are identical; bandwidth is undefined")
    if 2 * positive.size <= distances.size:
        return float(np.median(positive))
    return float(np.median(distances))


def _window_pairs(node_grid: Tuple[int, int], radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unordered node pairs (i < j in scan order) within a square window."""
    h, w = node_grid
    index = np.arange(h * w).reshape(h, w)
    sources, targets = [], []
    for di in range(0, min(radius, h - 1) + 1):
        for dj in range(-min(radius, w - 1), min(radius, w - 1) + 1):
            if di == 0 and dj <= 0:
                continue
            c0, c1 = max(0, -dj), min(w, w - dj)
            sources.append(index[0:h - di, c0:c1].ravel())
            targets.append(index[di:h, c0 + dj:c1 + dj].ravel())
    if not sources:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    return np.concatenate(sources), np.concatenate(targets)


def _laplacian(weights: Matrix) -> Matrix:
    degree = np.asarray(weights.sum(axis=1)).ravel()
    if sparse.issparse(weights):
        return (sparse.diags(degree) - weights).tocsr()
    return np.diag(degree) - weights


def build_graph(fg: FoldedFeatureMap, bandwidth: float, storage: str = "dense",
                with_exact_weights: bool = False, window_radius: int = 8,
                mode: Optional[str] = None) -> SimilarityGraph:
    """
    Build W_ij = exp(−‖ĝ_i − ĝ_j‖²/δ²), its Laplacian and optionally W̃, L̃.

    Parameters
    ----------
    fg : FoldedFeatureMap
        Graph nodes.
    bandwidth : float
        δ_bw > 0.
    storage : {'dense', 'windowed'}
        'windowed' keeps similarities only between nodes within ``window_radius``
        rows and columns of each other on the node grid (requires κ | width).
    with_exact_weights : bool
        Also build W̃ and L̃ for the exact-mode gradient.
    mode : {'exact', 'frozen'}, optional
        Recorded on the graph; defaults to 'exact' when exact weights are built.
    """
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    if mode is None:
        mode = "exact" if with_exact_weights else "frozen"
    n = fg.n_nodes
    points = fg.values.T
    scale = bandwidth * bandwidth

    if storage == "dense":
        sq = squareform(pdist(points, "sqeuclidean"))
        weights = np.exp(-sq / scale)
        exact = weights * (1.0 - sq / scale) if with_exact_weights else None
        radius = None
    elif storage == "windowed":
        node_grid = fg.node_grid
        if node_grid is None:
            raise ShapeMismatchError("windowed graphs need a node grid (fold rate must divide image width)")
        src, dst = _window_pairs(node_grid, window_radius)
        diff = points[src] - points[dst]
        sq = np.sum(diff * diff, axis=1)
        w_pairs = np.exp(-sq / scale)
        diag = np.arange(n)
        rows = np.concatenate([src, dst, diag])
        cols = np.concatenate([dst, src, diag])
        ones = np.ones(n)
        weights = sparse.coo_matrix((np.concatenate([w_pairs, w_pairs, ones]), (rows, cols)),
                                    shape=(n, n)).tocsr()
        exact = None
        if with_exact_weights:
            e_pairs = w_pairs * (1.0 - sq / scale)
            exact = sparse.coo_matrix((np.concatenate([e_pairs, e_pairs, ones]), (rows, cols)),
                                      shape=(n, n)).tocsr()
        radius = window_radius
    else:
        raise ValueError(f"Unknown graph storage: {storage}")

    return SimilarityGraph(
        weights=weights,
        laplacian=_laplacian(weights),
        bandwidth=float(bandwidth),
        mode=mode,
        storage=storage,
        window_radius=radius,
        exact_weights=exact,
        exact_laplacian=None if exact is None else _laplacian(exact),
    )


# ==============================================================================
# Nonlocal regularizer r̄
# ==============================================================================

def _check_nodes(fg: FoldedFeatureMap, graph: SimilarityGraph) -> None:
    if fg.n_nodes != graph.n_nodes:
        raise ShapeMismatchError(f"{fg.n_nodes} nodes do not match a graph of {graph.n_nodes}")


def nonlocal_value(fg: FoldedFeatureMap, graph: SimilarityGraph) -> float:
    """Pair sum Σ_{i<j} W_ij ‖ĝ_i − ĝ_j‖² over unordered pairs."""
    _check_nodes(fg, graph)
    points = fg.values.T
    upper = sparse.triu(sparse.coo_matrix(graph.weights), k=1)
    diff = points[upper.row] - points[upper.col]
    return float(np.sum(upper.data * np.sum(diff * diff, axis=1)))


def nonlocal_quadratic_form(fg: FoldedFeatureMap, laplacian: Matrix) -> float:
    """tr(ĝ L ĝᵀ); equals ``nonlocal_value`` for L = D − W."""
    g = fg.values
    return float(np.sum(g * (laplacian @ g.T).T))


def _nonlocal_folded_grad(g: np.ndarray, laplacian: Matrix) -> np.ndarray:
    return 2.0 * np.asarray(laplacian @ g.T).T


def graph_at(fg: FoldedFeatureMap, cfg: RegularizerConfig, bandwidth: float) -> SimilarityGraph:
    """Build the graph for the configured mode and storage at fixed bandwidth."""
    return build_graph(fg, bandwidth, cfg.storage_for(fg.n_nodes),
                       with_exact_weights=cfg.graph_mode == "exact",
                       window_radius=cfg.window_radius, mode=cfg.graph_mode)


def initial_graph(x0: Image, cfg: RegularizerConfig) -> SimilarityGraph:
    """Estimate δ_bw at x₀ and build the graph there."""
    f, _ = apply_g(x0, cfg.filter_bank)
    fg = fold(f, cfg.kappa)
    bandwidth = median_bandwidth(fg, cfg.sample_budget, cfg.bandwidth_seed)
    return graph_at(fg, cfg, bandwidth)


def nonlocal_grad(x: Image, fb: FilterBank, cfg: RegularizerConfig, graph: SimilarityGraph,
                  mode: str = "exact") -> Image:
    """
    Gradient of r̄ at x.

    Frozen graph mode: 2 Σ_q ∇ĝ^qᵀ L ĝ^q with L held at its x₀ value.
    Exact graph mode: the graph is rebuilt at x with the stored bandwidth and
    L̃ replaces L, which accounts for the dependence of W on x.
    ``mode`` selects exact or inexact transposes in the pull-back through g.

    Raises
    ------
    ValueError
        If the graph was built without exact weights but exact mode is configured.
    """
    if cfg.graph_mode == "exact" and graph.exact_laplacian is None:
        raise ValueError("exact graph mode requires a graph built with exact weights")
    features, state = forward_features(x.values, fb)
    d = features.shape[0]
    f = FeatureMap(d, x.height * x.width, features.reshape(d, -1), x.shape)
    fg = fold(f, cfg.kappa)
    if cfg.graph_mode == "exact":
        laplacian = graph_at(fg, cfg, graph.bandwidth).exact_laplacian
    else:
        _check_nodes(fg, graph)
        laplacian = graph.laplacian
    folded = _nonlocal_folded_grad(fg.values, laplacian)
    cotangent = unfold_adjoint(folded, d, cfg.kappa, x.shape).values
    return x.with_values(backward_features(cotangent.reshape(d, x.height, x.width), fb, state, mode))


# ==============================================================================
# Smoothed objective φ_ε
# ==============================================================================

class SmoothedObjective:
    """
    φ_ε(x) = f(x) + r̂_ε(g(x)) + λ r̄(g(x)) on raw image arrays.

    Parameters
    ----------
    fidelity : object
        Provides ``value(x)``, ``gradient(x)`` and ``lipschitz()`` on arrays
        (``LinearFidelity`` or a dense surrogate).
    config : RegularizerConfig
        Filter bank, λ, κ and graph settings.
    graph : SimilarityGraph, optional
        Graph from ``initial_graph``; required when λ > 0. In frozen mode it is
        used as is; in exact mode only its bandwidth is kept and W is rebuilt
        at every evaluation.
    power_iterations : int, default 30
        Iterations used to estimate the Lipschitz constant of ∇f.
    """

    def __init__(self, fidelity: Any, config: RegularizerConfig,
                 graph: Optional[SimilarityGraph] = None, power_iterations: int = 30):
        if config.lam > 0 and graph is None:
            raise ValueError("a similarity graph is required when lambda > 0")
        self.fidelity = fidelity
        self.config = config
        self.graph = graph
        self.power_iterations = power_iterations
        self._fidelity_lipschitz: Optional[float] = None

    @classmethod
    def from_initial(cls, fidelity: Any, config: RegularizerConfig, x0: Image,
                     power_iterations: int = 30) -> "SmoothedObjective":
        graph = initial_graph(x0, config) if config.lam > 0 else None
        return cls(fidelity, config, graph, power_iterations)

    def _exact_laplacian(self, fg: FoldedFeatureMap) -> Tuple[Matrix, Matrix]:
        graph = graph_at(fg, self.config, self.graph.bandwidth)
        return graph.laplacian, graph.exact_laplacian

    def _regularizer(self, x: np.ndarray, eps: float, mode: str,
                     with_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
        _check_epsilon(eps)
        fb = self.config.filter_bank
        features, state = forward_features(x, fb)
        d, h, w = features.shape
        values = features.reshape(d, -1)
        norms = np.sqrt(np.sum(values * values, axis=0))
        value = float(np.sum(np.where(norms <= eps, norms * norms / (2.0 * eps), norms - eps / 2.0)))
        cotangent = values / np.maximum(norms, eps) if with_grad else None

        if self.config.lam > 0:
            kappa = self.config.kappa
            fg = fold(FeatureMap(d, h * w, values, (h, w)), kappa)
            if self.config.graph_mode == "exact":
                laplacian, grad_laplacian = self._exact_laplacian(fg)
            else:
                _check_nodes(fg, self.graph)
                laplacian = grad_laplacian = self.graph.laplacian
            value += self.config.lam * nonlocal_quadratic_form(fg, laplacian)
            if with_grad:
                folded = _nonlocal_folded_grad(fg.values, grad_laplacian)
                cotangent = cotangent + self.config.lam * unfold_adjoint(folded, d, kappa).values

        if not with_grad:
            return value, None
        return value, backward_features(cotangent.reshape(d, h, w), fb, state, mode)

    def phi(self, x: np.ndarray, eps: float, mode: str = "exact") -> Tuple[float, np.ndarray]:
        """Value and gradient of φ_ε at x."""
        r_value, r_grad = self._regularizer(x, eps, mode, with_grad=True)
        return self.fidelity.value(x) + r_value, self.fidelity.gradient(x) + r_grad

    def phi_value(self, x: np.ndarray, eps: float) -> float:
        r_value, _ = self._regularizer(x, eps, "exact", with_grad=False)
        return self.fidelity.value(x) + r_value

    def fidelity_grad(self, x: np.ndarray) -> np.ndarray:
        return self.fidelity.gradient(x)

    def regularizer_grad(self, x: np.ndarray, eps: float, mode: str = "exact") -> np.ndarray:
        """∇r_ε(x); 'inexact' uses the filter bank's inexact transposes."""
        return self._regularizer(x, eps, mode, with_grad=True)[1]

    def regularizer_value(self, x: np.ndarray, eps: float) -> float:
        return self._regularizer(x, eps, "exact", with_grad=False)[0]

    def n_locations(self, x: np.ndarray) -> int:
        return int(np.asarray(x).size)

    def fidelity_lipschitz(self) -> float:
        if self._fidelity_lipschitz is None:
            self._fidelity_lipschitz = float(self.fidelity.lipschitz(self.power_iterations))
        return self._fidelity_lipschitz


def phi_eps(x: Image, fid: Any, cfg: RegularizerConfig, state: SmoothingState,
            graph: Optional[SimilarityGraph] = None) -> Tuple[float, Image]:
    """
    Value and gradient of the smoothed objective at x.

    Returns
    -------
    (float, Image)
        φ_ε(x) = f + r̂_ε + λ r̄ and ∇φ_ε(x) = ∇f + ∇r̂_ε + λ ∇r̄.
    """
    value, grad = SmoothedObjective(fid, cfg, graph).phi(x.values, state.epsilon)
    return value, x.with_values(grad)


def ct_objective(geometry: FanBeamGeometry, data: Sinogram, config: RegularizerConfig, x0: Image,
                 power_iterations: int = 30) -> SmoothedObjective:
    """φ_ε for ½‖Ax − b‖² on a fan-beam geometry, with the graph estimated at x₀."""
    return SmoothedObjective.from_initial(LinearFidelity(geometry, data), config, x0, power_iterations)
