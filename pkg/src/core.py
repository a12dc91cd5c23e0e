"""
Core Module - Domain Value Types and Tensor Files

This module provides the containers shared by every other module:
- Image, Sinogram, FeatureMap and FoldedFeatureMap value types
- Portable tensor files (little-endian float64 payload + JSON sidecar)
- Folding of feature descriptors into nonlocal graph nodes and its adjoint
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union, Optional, Dict, Any, Tuple

import numpy as np


PAYLOAD_DTYPE = "f64le"
_NUMPY_DTYPE = np.dtype("<f8")
TENSOR_KINDS = ("image", "sinogram", "feature")


# ==============================================================================
# Errors
# ==============================================================================

class TensorFormatError(ValueError):
    """Raised when a tensor file or container violates its declared format."""


class ShapeMismatchError(ValueError):
    """Raised when operands of an operation have incompatible shapes."""


def _as_finite_matrix(values: Any, shape: Tuple[int, int], what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    if array.size != shape[0] * shape[1]:
        raise ShapeMismatchError(
            f"{what}: {array.size} values do not fill declared shape {list(shape)}"
        )
    array = array.reshape(shape)
    if not np.all(np.isfinite(array)):
        raise TensorFormatError(f"{what}: non-finite values are not allowed")
    array.setflags(write=False)
    return array


# ==============================================================================
# Value types
# ==============================================================================

@dataclass(frozen=True)
class Image:
    """
    Real-valued 2-D attenuation grid (attenuation per mm).

    Parameters
    ----------
    height, width : int
        Pixel counts.
    pixel_size : float
        Edge length of a pixel in mm.
    values : array_like
        Row-major pixel values; reshaped to (height, width) and frozen.
    """
    height: int
    width: int
    pixel_size: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeMismatchError(f"Image needs positive size, got {self.height}x{self.width}")
        if not (self.pixel_size > 0 and np.isfinite(self.pixel_size)):
            raise TensorFormatError(f"pixel_size must be > 0, got {self.pixel_size}")
        object.__setattr__(
            self, "values", _as_finite_matrix(self.values, (self.height, self.width), "Image")
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def with_values(self, values: np.ndarray) -> "Image":
        """Return an image with the same grid and new pixel values."""
        return Image(self.height, self.width, self.pixel_size, values)


@dataclass(frozen=True)
class Sinogram:
    """View-major table of line integrals, shape (n_views, n_detectors)."""
    n_views: int
    n_detectors: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n_views < 1 or self.n_detectors < 1:
            raise ShapeMismatchError(
                f"Sinogram needs positive size, got {self.n_views}x{self.n_detectors}"
            )
        object.__setattr__(
            self, "values",
            _as_finite_matrix(self.values, (self.n_views, self.n_detectors), "Sinogram"),
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_views, self.n_detectors)

    def with_values(self, values: np.ndarray) -> "Sinogram":
        return Sinogram(self.n_views, self.n_detectors, values)


@dataclass(frozen=True)
class FeatureMap:
    """
    Feature descriptors g_i(x), one column per pixel location.

    ``values`` has shape (channels, locations); column i is the d-vector of
    filter responses at row-major location i. ``grid`` optionally records
    the (height, width) of the image the locations came from.
    """
    channels: int
    locations: int
    values: np.ndarray = field(repr=False)
    grid: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(
            self, "values",
            _as_finite_matrix(self.values, (self.channels, self.locations), "FeatureMap"),
        )
        if self.grid is not None and self.grid[0] * self.grid[1] != self.locations:
            raise ShapeMismatchError(
                f"grid {self.grid} does not match {self.locations} locations"
            )

    def column_norms(self) -> np.ndarray:
        """Euclidean norm of every descriptor ‖g_i‖."""
        return np.sqrt(np.sum(self.values * self.values, axis=0))

    def as_channel_images(self) -> np.ndarray:
        """Reshape to (channels, height, width); requires ``grid``."""
        if self.grid is None:
            raise ShapeMismatchError("FeatureMap has no grid to reshape onto")
        return self.values.reshape(self.channels, *self.grid)


@dataclass(frozen=True)
class FoldedFeatureMap:
    """
    Folded descriptors: κ adjacent descriptors stacked into one κd column.

    ``values`` has shape (fold_rate * channels, locations / fold_rate).
    """
    channels: int
    fold_rate: int
    values: np.ndarray = field(repr=False)
    grid: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        rows = self.fold_rate * self.channels
        array = np.array(self.values, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != rows:
            raise ShapeMismatchError(
                f"FoldedFeatureMap expects {rows} rows, got shape {array.shape}"
            )
        object.__setattr__(self, "values", _as_finite_matrix(array, array.shape, "FoldedFeatureMap"))

    @property
    def folded_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def node_grid(self) -> Optional[Tuple[int, int]]:
        """(rows, columns) layout of the graph nodes when κ divides the image width."""
        if self.grid is None or self.grid[1] % self.fold_rate != 0:
            return None
        return (self.grid[0], self.grid[1] // self.fold_rate)


def image_from_array(values: np.ndarray, pixel_size: float = 1.0) -> Image:
    """Wrap a 2-D array as an Image."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D array, got {values.ndim} dimensions")
    return Image(values.shape[0], values.shape[1], pixel_size, values)


def feature_map_from_array(values: np.ndarray, grid: Optional[Tuple[int, int]] = None) -> FeatureMap:
    """Wrap a (d, m) or (d, h, w) array as a FeatureMap."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        grid = (values.shape[1], values.shape[2])
        values = values.reshape(values.shape[0], -1)
    if values.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D or 3-D array, got {values.ndim} dimensions")
    return FeatureMap(values.shape[0], values.shape[1], values, grid)


# ==============================================================================
# Folding
# ==============================================================================

def fold(f: FeatureMap, kappa: int) -> FoldedFeatureMap:
    """
    Stack κ adjacent descriptors (row-major location order) into one column.

    Column i of the result is ``[g_{κi}; g_{κi+1}; ...; g_{κi+κ-1}]``.

    Parameters
    ----------
    f : FeatureMap
        Descriptors, shape (d, m).
    kappa : int
        Folding rate; must divide m.

    Returns
    -------
    FoldedFeatureMap
        Shape (κd, m/κ).

    Raises
    ------
    ShapeMismatchError
        If κ < 1 or κ does not divide m.
    """
    if kappa < 1 or f.locations % kappa != 0:
        raise ShapeMismatchError(
            f"fold rate {kappa} does not divide {f.locations} locations"
        )
    d = f.channels
    n_nodes = f.locations // kappa
    stacked = (
        f.values.reshape(d, n_nodes, kappa)
        .transpose(2, 0, 1)
        .reshape(kappa * d, n_nodes)
    )
    return FoldedFeatureMap(d, kappa, stacked, f.grid)


def unfold_adjoint(folded_gradient: np.ndarray, channels: int, kappa: int,
                   grid: Optional[Tuple[int, int]] = None) -> FeatureMap:
    """
    Apply the adjoint of ``fold`` to an array in folded layout.

    Because folding only permutes entries, the adjoint is also its inverse:
    ``⟨fold(a), b⟩ = ⟨a, unfold_adjoint(b)⟩`` holds exactly.

    Parameters
    ----------
    folded_gradient : np.ndarray
        Array of shape (κ·channels, n_nodes).
    channels : int
        Descriptor length d.
    kappa : int
        Folding rate used by ``fold``.
    grid : tuple, optional
        Image grid to attach to the result.

    Returns
    -------
    FeatureMap
        Shape (d, κ·n_nodes).
    """
    array = np.asarray(folded_gradient, dtype=np.float64)
    if array.ndim != 2 or array.shape[0] != kappa * channels:
        raise ShapeMismatchError(
            f"expected {kappa * channels} folded rows, got shape {array.shape}"
        )
    n_nodes = array.shape[1]
    per_location = (
        array.reshape(kappa, channels, n_nodes)
        .transpose(1, 2, 0)
        .reshape(channels, kappa * n_nodes)
    )
    return FeatureMap(channels, kappa * n_nodes, per_location, grid)


def unfold(folded: FoldedFeatureMap) -> FeatureMap:
    """Inverse of ``fold``."""
    return unfold_adjoint(folded.values, folded.channels, folded.fold_rate, folded.grid)


# ==============================================================================
# Tensor files
# ==============================================================================

def _tensor_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def _describe(t: Union[Image, Sinogram, FeatureMap]) -> Dict[str, Any]:
    if isinstance(t, Image):
        return {"kind": "image", "shape": [t.height, t.width],
                "pixel_size": float(t.pixel_size), "units": "1/mm"}
    if isinstance(t, Sinogram):
        return {"kind": "sinogram", "shape": [t.n_views, t.n_detectors], "units": "line integral"}
    if isinstance(t, FeatureMap):
        meta = {"kind": "feature", "shape": [t.channels, t.locations], "units": "feature response"}
        if t.grid is not None:
            meta["grid"] = list(t.grid)
        return meta
    raise TypeError(f"cannot write object of type {type(t).__name__}")


def write_tensor(t: Union[Image, Sinogram, FeatureMap], path: Union[str, Path]) -> Path:
    """
    Write a container as ``<name>.bin`` (little-endian float64) plus ``<name>.json``.

    Parameters
    ----------
    t : Image, Sinogram or FeatureMap
        Container to write.
    path : str or Path
        Target name; a ``.bin`` or ``.json`` suffix is ignored.

    Returns
    -------
    Path
        Path of the payload file.

    Examples
    --------
    >>> write_tensor(image_from_array(np.zeros((2, 2))), "out/zeros")
    PosixPath('out/zeros.bin')
    """
    payload_path, sidecar_path = _tensor_paths(path)
    meta = _describe(t)
    meta["dtype"] = PAYLOAD_DTYPE
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(np.ascontiguousarray(t.values, dtype=_NUMPY_DTYPE).tobytes())
    sidecar_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload_path


def read_tensor(path: Union[str, Path]) -> Union[Image, Sinogram, FeatureMap]:
    """
    Read a container written by ``write_tensor``.

    Raises
    ------
    FileNotFoundError
        If the payload or the sidecar is missing.
    TensorFormatError
        If the sidecar is corrupt, declares an unknown kind or dtype, or the
        payload holds non-finite values.
    ShapeMismatchError
        If the payload length disagrees with the declared shape.
    """
    payload_path, sidecar_path = _tensor_paths(path)
    for p in (payload_path, sidecar_path):
        if not p.exists():
            raise FileNotFoundError(f"File not found: {p}")

    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"Invalid sidecar {sidecar_path}: {e}")
    if not isinstance(meta, dict):
        raise TensorFormatError(f"Invalid sidecar {sidecar_path}: expected an object")

    kind = meta.get("kind")
    if kind not in TENSOR_KINDS:
        raise TensorFormatError(f"Unknown tensor kind {kind!r} in {sidecar_path}")
    if meta.get("dtype") != PAYLOAD_DTYPE:
        raise TensorFormatError(f"Unsupported dtype {meta.get('dtype')!r} in {sidecar_path}")
    shape = meta.get("shape")
    if (not isinstance(shape, list) or len(shape) != 2
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise TensorFormatError(f"Invalid shape {shape!r} in {sidecar_path}")

    raw = payload_path.read_bytes()
    if len(raw) % _NUMPY_DTYPE.itemsize != 0:
        raise ShapeMismatchError(f"{payload_path}: payload is not a whole number of float64 values")
    values = np.frombuffer(raw, dtype=_NUMPY_DTYPE).astype(np.float64)
    if values.size != shape[0] * shape[1]:
        raise ShapeMismatchError(
            f"{payload_path}: {values.size} values do not match declared shape {shape}"
        )

    if kind == "image":
        pixel_size = meta.get("pixel_size")
        if not isinstance(pixel_size, (int, float)):
            raise TensorFormatError(f"Image sidecar {sidecar_path} lacks pixel_size")
        return Image(shape[0], shape[1], float(pixel_size), values)
    if kind == "sinogram":
        return Sinogram(shape[0], shape[1], values)
    grid = meta.get("grid")
    return FeatureMap(shape[0], shape[1], values, tuple(grid) if grid else None)
