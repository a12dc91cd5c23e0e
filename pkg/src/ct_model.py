"""
CT Model Module - Fan-Beam Scanner Model

This module provides the linear measurement model of a flat-detector fan-beam scanner:
- FanBeamGeometry with the clinical and desk presets
- Joseph (ray-driven, interpolating) forward projector and its exact transpose
- Least-squares data fidelity f(x) = ½‖Ax − b‖² and its gradient
- Fan-beam filtered backprojection used to initialize the iterative solvers
- Power iteration for λ_max(AᵀA)

The projector is assembled as sparse matrices (one block per view), so the
back projection is the algebraic transpose of the forward projection.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, List

import numpy as np
from scipy import fft, sparse

from src.core import Image, Sinogram, ShapeMismatchError


# Views are stacked into one matrix while the estimated nonzero count stays below this.
MAX_CACHED_NONZEROS = 40_000_000

FBP_FILTERS = ("ramlak", "hann")


class GeometryError(ValueError):
    """Raised for invalid geometries or images inconsistent with a geometry."""


# ==============================================================================
# Geometry
# ==============================================================================

@dataclass(frozen=True)
class FanBeamGeometry:
    """
    Flat-detector fan-beam geometry with a full 2π source trajectory.

    Parameters
    ----------
    source_to_center : float
        Source to rotation-centre distance (mm).
    detector_to_center : float
        Detector to rotation-centre distance (mm).
    n_detectors : int
        Detector cells.
    detector_width : float
        Cell width on the detector (mm).
    n_views : int
        Views evenly spaced over [0, 2π).
    fov : float
        Edge length of the square image region (mm).
    image_size : int
        Pixels along each image edge.
    """
    source_to_center: float = 250.0
    detector_to_center: float = 250.0
    n_detectors: int = 512
    detector_width: float = 0.72
    n_views: int = 1024
    fov: float = 170.0
    image_size: int = 256

    def __post_init__(self):
        for name in ("source_to_center", "detector_to_center", "detector_width", "fov"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise GeometryError(f"{name} must be > 0, got {value}")
        if self.n_views < 1:
            raise GeometryError(f"n_views must be >= 1, got {self.n_views}")
        if self.n_detectors < 1:
            raise GeometryError(f"n_detectors must be >= 1, got {self.n_detectors}")
        if self.image_size < 1:
            raise GeometryError(f"image_size must be >= 1, got {self.image_size}")
        if min(self.source_to_center, self.detector_to_center) <= self.fov / np.sqrt(2.0):
            raise GeometryError("source and detector must lie outside the field of view")

    @classmethod
    def default(cls) -> "FanBeamGeometry":
        """Clinical preset: 256×256 over 170 mm, 512 cells of 0.72 mm, 1024 views."""
        return cls()

    @classmethod
    def desk(cls) -> "FanBeamGeometry":
        """Fast preset: 64×64 images, 128 detectors, 180 views."""
        return cls(n_detectors=128, detector_width=2.88, n_views=180, image_size=64)

    @classmethod
    def for_image(cls, image_size: int, fov: float, n_detectors: int, n_views: int,
                  source_to_center: float = 250.0,
                  detector_to_center: float = 250.0) -> "FanBeamGeometry":
        """Geometry whose detector exactly covers the circle circumscribing the image."""
        magnification = (source_to_center + detector_to_center) / source_to_center
        coverage = fov * np.sqrt(2.0) * magnification * 1.05
        return cls(source_to_center, detector_to_center, n_detectors,
                   coverage / n_detectors, n_views, fov, image_size)

    @property
    def view_angles(self) -> np.ndarray:
        """Source angles in radians, evenly spaced and strictly increasing in [0, 2π)."""
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    @property
    def pixel_size(self) -> float:
        return self.fov / self.image_size

    @property
    def magnification(self) -> float:
        return (self.source_to_center + self.detector_to_center) / self.source_to_center

    @property
    def detector_positions(self) -> np.ndarray:
        """Cell centres along the detector (mm), centred on the central ray."""
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_width

    def check_image(self, x: Image) -> None:
        """Raise GeometryError unless ``x`` lives on this geometry's image grid."""
        if x.height != x.width:
            raise GeometryError(f"image must be square, got {x.height}x{x.width}")
        if x.width != self.image_size:
            raise GeometryError(
                f"image is {x.width} pixels wide but geometry expects {self.image_size}"
            )
        if abs(x.pixel_size * x.width - self.fov) > 1e-9 * self.fov:
            raise GeometryError(
                f"pixel_size {x.pixel_size} x {x.width} does not span fov {self.fov} mm"
            )

    def check_sinogram(self, s: Sinogram) -> None:
        if s.shape != (self.n_views, self.n_detectors):
            raise ShapeMismatchError(
                f"sinogram shape {s.shape} does not match geometry "
                f"({self.n_views}, {self.n_detectors})"
            )

    def blank_image(self, values: Optional[np.ndarray] = None) -> Image:
        if values is None:
            values = np.zeros((self.image_size, self.image_size))
        return Image(self.image_size, self.image_size, self.pixel_size, values)


# ==============================================================================
# Joseph projector
# ==============================================================================

def _joseph_view_matrix(geo: FanBeamGeometry, view: int) -> sparse.csr_matrix:
    n = geo.image_size
    ps = geo.pixel_size
    beta = geo.view_angles[view]
    e = np.array([np.cos(beta), np.sin(beta)])
    a = np.array([-np.sin(beta), np.cos(beta)])

    source = geo.source_to_center * e
    cells = -geo.detector_to_center * e[None, :] + geo.detector_positions[:, None] * a[None, :]
    direction = cells - source[None, :]
    ray_length = np.hypot(direction[:, 0], direction[:, 1])
    centres = (np.arange(n) - (n - 1) / 2.0) * ps

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    data: List[np.ndarray] = []

    # major axis 0 steps through image columns (x), axis 1 through rows (y)
    x_major = np.abs(direction[:, 0]) >= np.abs(direction[:, 1])
    for major_axis, selected in ((0, x_major), (1, ~x_major)):
        rays = np.flatnonzero(selected)
        if rays.size == 0:
            continue
        minor_axis = 1 - major_axis
        d_major = direction[rays, major_axis][:, None]
        d_minor = direction[rays, minor_axis][:, None]
        t = (centres[None, :] - source[major_axis]) / d_major
        minor = (source[minor_axis] + t * d_minor) / ps + (n - 1) / 2.0
        lower = np.floor(minor).astype(np.int64)
        frac = minor - lower
        scale = (ps * ray_length[rays] / np.abs(d_major[:, 0]))[:, None]
        step = np.broadcast_to(np.arange(n)[None, :], minor.shape)
        ray_index = np.broadcast_to(rays[:, None], minor.shape)

        for offset, weight in ((0, 1.0 - frac), (1, frac)):
            index = lower + offset
            keep = (index >= 0) & (index < n) & (weight > 0)
            if major_axis == 0:
                pixel = index[keep] * n + step[keep]
            else:
                pixel = step[keep] * n + index[keep]
            rows.append(ray_index[keep])
            cols.append(pixel)
            data.append((weight * scale)[keep])

    matrix = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geo.n_detectors, n * n),
    )
    return matrix.tocsr()


class JosephProjector:
    """
    Ray-driven projector A and its transpose for one geometry.

    Each detector cell defines the ray from the source to the cell centre.
    The ray is sampled once per image column (or row, whichever axis it runs
    along more steeply) and the image is linearly interpolated between the two
    nearest pixel centres; samples are weighted by the path length per step.
    Back projection multiplies by the transpose of the same weights.

    Parameters
    ----------
    geometry : FanBeamGeometry
        Scanner model.
    """

    def __init__(self, geometry: FanBeamGeometry):
        self.geometry = geometry
        n = geometry.image_size
        estimated_nonzeros = 2 * n * geometry.n_views * geometry.n_detectors
        self._matrix: Optional[sparse.csr_matrix] = None
        if estimated_nonzeros <= MAX_CACHED_NONZEROS:
            self._matrix = sparse.vstack(
                [_joseph_view_matrix(geometry, v) for v in range(geometry.n_views)],
                format="csr",
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Project an (n, n) array to an (n_views, n_detectors) array."""
        geo = self.geometry
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        if self._matrix is not None:
            return (self._matrix @ flat).reshape(geo.n_views, geo.n_detectors)
        out = np.empty((geo.n_views, geo.n_detectors))
        for v in range(geo.n_views):
            out[v] = _joseph_view_matrix(geo, v) @ flat
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Back project an (n_views, n_detectors) array to an (n, n) array."""
        geo = self.geometry
        n = geo.image_size
        rows = np.ascontiguousarray(y, dtype=np.float64).reshape(geo.n_views, geo.n_detectors)
        if self._matrix is not None:
            return (self._matrix.T @ rows.reshape(-1)).reshape(n, n)
        out = np.zeros(n * n)
        for v in range(geo.n_views):
            out += _joseph_view_matrix(geo, v).T @ rows[v]
        return out.reshape(n, n)

    def normal(self, x: np.ndarray) -> np.ndarray:
        """AᵀA x."""
        return self.adjoint(self.forward(x))


@lru_cache(maxsize=8)
def get_projector(geometry: FanBeamGeometry) -> JosephProjector:
    """Return the cached projector for ``geometry``."""
    return JosephProjector(geometry)


def forward_project(x: Image, geo: FanBeamGeometry) -> Sinogram:
    """
    Discretized line integrals of ``x`` along every source→cell ray.

    Raises
    ------
    GeometryError
        If the image grid is not the geometry's image grid.
    """
    geo.check_image(x)
    values = get_projector(geo).forward(x.values)
    return Sinogram(geo.n_views, geo.n_detectors, values)


def back_project(s: Sinogram, geo: FanBeamGeometry) -> Image:
    """Exact transpose of ``forward_project``: ⟨Ax, y⟩ = ⟨x, Aᵀy⟩."""
    geo.check_sinogram(s)
    return geo.blank_image(get_projector(geo).adjoint(s.values))


def dense_system_matrix(geo: FanBeamGeometry) -> np.ndarray:
    """Explicit A, one column per unit basis image (small geometries only)."""
    projector = get_projector(geo)
    n = geo.image_size
    columns = np.empty((geo.n_views * geo.n_detectors, n * n))
    basis = np.zeros(n * n)
    for j in range(n * n):
        basis[j] = 1.0
        columns[:, j] = projector.forward(basis.reshape(n, n)).reshape(-1)
        basis[j] = 0.0
    return columns


def estimate_operator_norm_sq(geo: FanBeamGeometry, n_iter: int = 30, seed: int = 0) -> float:
    """
    Estimate λ_max(AᵀA) by power iteration.

    Parameters
    ----------
    geo : FanBeamGeometry
        Scanner model.
    n_iter : int, default 30
        Power iterations.
    seed : int, default 0
        Seed of the random start vector.

    Returns
    -------
    float
        Rayleigh quotient of the final iterate (a lower bound of λ_max).
    """
    projector = get_projector(geo)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((geo.image_size, geo.image_size))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(n_iter):
        w = projector.normal(v)
        estimate = float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return estimate


# ==============================================================================
# Data fidelity
# ==============================================================================

@dataclass(frozen=True)
class LinearFidelity:
    """f(x) = ½‖Ax − b‖² for a fan-beam geometry and measured sinogram b."""
    geometry: FanBeamGeometry
    data: Sinogram

    def __post_init__(self):
        self.geometry.check_sinogram(self.data)

    @property
    def projector(self) -> JosephProjector:
        return get_projector(self.geometry)

    def residual(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = self.geometry.image_size
        if x.shape != (n, n):
            raise ShapeMismatchError(f"expected image shape {(n, n)}, got {x.shape}")
        return self.projector.forward(x) - self.data.values

    def value(self, x: np.ndarray) -> float:
        r = self.residual(x)
        return 0.5 * float(np.vdot(r, r))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.projector.adjoint(self.residual(x))

    def lipschitz(self, n_iter: int = 30) -> float:
        """λ_max(AᵀA), the Lipschitz constant of ∇f."""
        return estimate_operator_norm_sq(self.geometry, n_iter)


def fidelity_value(x: Image, fid: LinearFidelity) -> float:
    """Return ½‖Ax − b‖²."""
    fid.geometry.check_image(x)
    return fid.value(x.values)


def grad_fidelity(x: Image, fid: LinearFidelity) -> Image:
    """Return ∇f(x) = Aᵀ(Ax − b)."""
    fid.geometry.check_image(x)
    return x.with_values(fid.gradient(x.values))


# ==============================================================================
# Filtered backprojection
# ==============================================================================

def ramp_filter_response(n_samples: int, spacing: float, filter_kind: str = "ramlak") -> np.ndarray:
    """
    Frequency response of the band-limited ramp filter for zero-padded FFT filtering.

    The spatial Ram-Lak kernel h(0) = 1/(4τ²), h(odd k) = −1/(kπτ)², h(even k) = 0
    is transformed, so the response has no DC bias. ``hann`` multiplies by a
    Hann window over the frequency axis.
    """
    if filter_kind not in FBP_FILTERS:
        raise ValueError(f"Unknown FBP filter: {filter_kind}")
    padded = int(2 ** np.ceil(np.log2(max(2 * n_samples, 2))))
    k = np.arange(padded)
    k = np.where(k < padded // 2, k, k - padded)
    kernel = np.zeros(padded)
    kernel[0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) != 0
    kernel[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    response = np.real(fft.fft(kernel))
    if filter_kind == "hann":
        freq = fft.fftfreq(padded)
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    return response


def fbp(s: Sinogram, geo: FanBeamGeometry, filter_kind: str = "ramlak") -> Image:
    """
    Fan-beam filtered backprojection for a flat detector and a full scan.

    Rows are cosine pre-weighted, ramp filtered on the detector rescaled to the
    rotation centre, and backprojected with the 1/U² distance weight.

    Parameters
    ----------
    s : Sinogram
        Line integrals.
    geo : FanBeamGeometry
        Scanner model; the output lives on its image grid.
    filter_kind : {'ramlak', 'hann'}
        Ramp filter, optionally Hann-windowed.

    Raises
    ------
    GeometryError
        If fewer than two views are available.
    """
    geo.check_sinogram(s)
    if geo.n_views < 2:
        raise GeometryError("FBP needs at least 2 views")

    d = geo.source_to_center
    iso_positions = geo.detector_positions / geo.magnification
    spacing = geo.detector_width / geo.magnification
    weighted = s.values * (d / np.sqrt(d ** 2 + iso_positions ** 2))[None, :]

    response = ramp_filter_response(geo.n_detectors, spacing, filter_kind)
    padded = response.size
    spectrum = fft.fft(weighted, n=padded, axis=1) * response[None, :]
    filtered = np.real(fft.ifft(spectrum, axis=1))[:, :geo.n_detectors] * spacing / 2.0

    n = geo.image_size
    centres = (np.arange(n) - (n - 1) / 2.0) * geo.pixel_size
    y, x = np.meshgrid(centres, centres, indexing="ij")
    recon = np.zeros((n, n))
    d_beta = 2.0 * np.pi / geo.n_views
    for view, beta in enumerate(geo.view_angles):
        along = x * np.cos(beta) + y * np.sin(beta)
        across = -x * np.sin(beta) + y * np.cos(beta)
        distance = d - along
        s_prime = d * across / distance
        values = np.interp(s_prime, iso_positions, filtered[view], left=0.0, right=0.0)
        recon += values * (d / distance) ** 2
    return geo.blank_image(recon * d_beta)
