"""
Features Module - Convolutional Feature Transform g(x)

This module provides the fixed filter-bank feature transform used by the regularizers:
- Smoothed rectified linear activation σ and its derivative
- Forward pass g(x) = w_l ∗ σ(... σ(w_1 ∗ x)) with zero-padded 3×3 convolutions
- Action of the Jacobian transpose ∇g(x)ᵀ, exact or with inexact transposes w̃
- Preset filter banks (tv, dct8, seeded-random) and the .fb file format
- Diagnostics: transpose mismatch ‖w̃ − wᵀ‖ and a Lipschitz bound for g
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union, Optional, Dict, List, Tuple, Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core import Image, FeatureMap, ShapeMismatchError


DEFAULT_ACTIVATION_DELTA = 0.001
PRESETS = ("tv", "dct8", "seeded-random")
FILTER_BANK_FORMAT = "filter-bank"


class FilterBankError(ValueError):
    """Raised for malformed filter banks or missing inexact transposes."""


# ==============================================================================
# Activation
# ==============================================================================

def sigma(t: Union[float, np.ndarray], delta: float) -> Union[float, np.ndarray]:
    """
    Smoothed ReLU: 0 for t ≤ −δ, t²/(4δ) + t/2 + δ/4 on (−δ, δ), t for t ≥ δ.

    Examples
    --------
    >>> sigma(0.0, 0.001)
    0.00025
    """
    t_arr = np.asarray(t, dtype=np.float64)
    out = np.where(
        t_arr <= -delta, 0.0,
        np.where(t_arr >= delta, t_arr, t_arr * t_arr / (4.0 * delta) + t_arr / 2.0 + delta / 4.0),
    )
    return float(out) if np.ndim(t) == 0 else out


def sigma_prime(t: Union[float, np.ndarray], delta: float) -> Union[float, np.ndarray]:
    """Derivative of ``sigma``: 0, t/(2δ) + ½, 1 on the three branches; values in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    out = np.where(
        t_arr <= -delta, 0.0,
        np.where(t_arr >= delta, 1.0, t_arr / (2.0 * delta) + 0.5),
    )
    return float(out) if np.ndim(t) == 0 else out


# ==============================================================================
# Filter bank
# ==============================================================================

@dataclass(frozen=True)
class FilterBank:
    """
    Convolution weights of an l-layer feature transform.

    Parameters
    ----------
    kernels : tuple of np.ndarray
        Layer q has shape (out_channels, in_channels, 3, 3); layer 1 has one input channel.
    activation_delta : float
        Smoothing δ of the activation between layers.
    inexact_transposes : tuple of np.ndarray, optional
        Replacement for the transposed convolutions, layer q with shape
        (in_channels, out_channels, 3, 3).
    """
    kernels: Tuple[np.ndarray, ...] = field(repr=False)
    activation_delta: float = DEFAULT_ACTIVATION_DELTA
    inexact_transposes: Optional[Tuple[np.ndarray, ...]] = field(default=None, repr=False)

    def __post_init__(self):
        kernels = tuple(np.array(k, dtype=np.float64) for k in self.kernels)
        if not kernels:
            raise FilterBankError("a filter bank needs at least one layer")
        for q, k in enumerate(kernels, 1):
            if k.ndim != 4 or k.shape[2:] != (3, 3):
                raise FilterBankError(f"layer {q}: expected (out, in, 3, 3) kernels, got {k.shape}")
            if not np.all(np.isfinite(k)):
                raise FilterBankError(f"layer {q}: non-finite coefficients")
        if kernels[0].shape[1] != 1:
            raise FilterBankError(f"layer 1 must have one input channel, got {kernels[0].shape[1]}")
        for q in range(1, len(kernels)):
            if kernels[q].shape[1] != kernels[q - 1].shape[0]:
                raise FilterBankError(
                    f"layer {q + 1} expects {kernels[q].shape[1]} input channels "
                    f"but layer {q} produces {kernels[q - 1].shape[0]}"
                )
        if not (np.isfinite(self.activation_delta) and self.activation_delta > 0):
            raise FilterBankError(f"activation_delta must be > 0, got {self.activation_delta}")
        for k in kernels:
            k.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)

        if self.inexact_transposes is not None:
            transposes = tuple(np.ascontiguousarray(t, dtype=np.float64)
                               for t in self.inexact_transposes)
            if len(transposes) != len(kernels):
                raise FilterBankError(
                    f"{len(transposes)} inexact transposes for {len(kernels)} layers"
                )
            for q, (t, k) in enumerate(zip(transposes, kernels), 1):
                expected = (k.shape[1], k.shape[0], 3, 3)
                if t.shape != expected or not np.all(np.isfinite(t)):
                    raise FilterBankError(
                        f"layer {q}: inexact transpose must be finite with shape {expected}"
                    )
                t.setflags(write=False)
            object.__setattr__(self, "inexact_transposes", transposes)

    @property
    def layers(self) -> int:
        return len(self.kernels)

    @property
    def channels(self) -> int:
        """Descriptor length d (output channels of the last layer)."""
        return self.kernels[-1].shape[0]

    def with_inexact_transposes(self, transposes: Optional[List[np.ndarray]]) -> "FilterBank":
        return FilterBank(self.kernels, self.activation_delta,
                          None if transposes is None else tuple(transposes))


@dataclass(frozen=True)
class ActivationState:
    """Pre-activations of the hidden layers cached by a forward pass."""
    pre_activations: Tuple[np.ndarray, ...]


def transpose_kernel(kernel: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint convolution: swap channels and flip spatially."""
    return np.ascontiguousarray(np.asarray(kernel)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def exact_transposes(fb: FilterBank) -> Tuple[np.ndarray, ...]:
    return tuple(transpose_kernel(k) for k in fb.kernels)


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' multichannel correlation of (cin, h, w) with (cout, cin, 3, 3)."""
    cin, h, w = x.shape
    cout = kernel.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    patches = windows.transpose(0, 3, 4, 1, 2).reshape(cin * 9, h * w)
    return (kernel.reshape(cout, cin * 9) @ patches).reshape(cout, h, w)


def forward_features(x: np.ndarray, fb: FilterBank) -> Tuple[np.ndarray, ActivationState]:
    """Array form of ``apply_g``: returns (d, h, w) features and the cached state."""
    a = np.asarray(x, dtype=np.float64)[None, :, :]
    pre: List[np.ndarray] = []
    for q, kernel in enumerate(fb.kernels):
        z = _correlate(a, kernel)
        if q < fb.layers - 1:
            pre.append(z)
            a = sigma(z, fb.activation_delta)
        else:
            a = z
    return a, ActivationState(tuple(pre))


def backward_features(v: np.ndarray, fb: FilterBank, state: ActivationState,
                      mode: str = "exact") -> np.ndarray:
    """Array form of ``jacobian_T_apply``: maps (d, h, w) to (h, w)."""
    if mode == "exact":
        transposes = exact_transposes(fb)
    elif mode == "inexact":
        if fb.inexact_transposes is None:
            raise FilterBankError("inexact mode requires inexact transposes in the filter bank")
        transposes = fb.inexact_transposes
    else:
        raise ValueError(f"Unknown gradient mode: {mode}")

    u = np.asarray(v, dtype=np.float64)
    for q in range(fb.layers - 1, -1, -1):
        u = _correlate(u, transposes[q])
        if q > 0:
            u = u * sigma_prime(state.pre_activations[q - 1], fb.activation_delta)
    return u[0]


def apply_g(x: Image, fb: FilterBank) -> Tuple[FeatureMap, ActivationState]:
    """
    Feature transform g(x) = w_l ∗ σ(⋯ σ(w_1 ∗ x)).

    Convolutions have no bias, zero padding and stride 1, so there is one
    descriptor per pixel (m = height·width). The last layer is linear.

    Returns
    -------
    (FeatureMap, ActivationState)
        Descriptors of shape (d, m) and the hidden pre-activations.
    """
    features, state = forward_features(x.values, fb)
    d = features.shape[0]
    return FeatureMap(d, x.height * x.width, features.reshape(d, -1), x.shape), state


def jacobian_T_apply(x: Image, fb: FilterBank, v: FeatureMap, mode: str = "exact",
                     state: Optional[ActivationState] = None) -> Image:
    """
    Return ∇g(x)ᵀ v.

    Parameters
    ----------
    x : Image
        Point of linearization.
    fb : FilterBank
        Weights.
    v : FeatureMap
        Cotangent of shape (d, m).
    mode : {'exact', 'inexact'}
        'inexact' replaces every transposed convolution w_qᵀ by fb.inexact_transposes[q].
    state : ActivationState, optional
        Cached forward pass at x; recomputed when omitted.

    Raises
    ------
    FilterBankError
        In inexact mode when the bank has no inexact transposes.
    ShapeMismatchError
        If v does not have shape (d, m).
    """
    if v.values.shape != (fb.channels, x.height * x.width):
        raise ShapeMismatchError(
            f"cotangent shape {v.values.shape} does not match ({fb.channels}, {x.height * x.width})"
        )
    if state is None:
        _, state = forward_features(x.values, fb)
    u = backward_features(v.values.reshape(fb.channels, x.height, x.width), fb, state, mode)
    return x.with_values(u)


# ==============================================================================
# Presets
# ==============================================================================

def _tv_kernels(scale: float) -> List[np.ndarray]:
    k = np.zeros((2, 1, 3, 3))
    k[0, 0, 1, 1], k[0, 0, 1, 2] = -1.0, 1.0
    k[1, 0, 1, 1], k[1, 0, 2, 1] = -1.0, 1.0
    return [scale * k]


def _dct8_kernels(channels: int, seed: int, scale: float) -> List[np.ndarray]:
    a = np.arange(3)
    basis_1d = np.array([np.cos(np.pi * (2 * a + 1) * u / 6.0) for u in range(3)])
    basis_1d[0] *= np.sqrt(1.0 / 3.0)
    basis_1d[1:] *= np.sqrt(2.0 / 3.0)
    atoms = np.array([np.outer(basis_1d[u], basis_1d[v])
                      for u in range(3) for v in range(3) if (u, v) != (0, 0)])
    rng = np.random.default_rng(seed)
    n_atoms = atoms.shape[0]
    if channels >= n_atoms:
        mixing, _ = np.linalg.qr(rng.standard_normal((channels, n_atoms)))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((n_atoms, channels)))
        mixing = q.T
    kernels = np.einsum("ca,aij->cij", mixing, atoms)
    return [scale * kernels[:, None, :, :]]


def _xavier_kernels(layers: int, channels: int, seed: int, scale: float) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    kernels = []
    cin = 1
    for _ in range(layers):
        bound = np.sqrt(6.0 / ((cin + channels) * 9))
        kernels.append(scale * rng.uniform(-bound, bound, size=(channels, cin, 3, 3)))
        cin = channels
    return kernels


def preset_filter_bank(name: str, channels: int = 48, layers: int = 4, seed: int = 0,
                       scale: float = 1.0,
                       activation_delta: float = DEFAULT_ACTIVATION_DELTA) -> FilterBank:
    """
    Build a fixed filter bank.

    Parameters
    ----------
    name : {'tv', 'dct8', 'seeded-random'}
        'tv': one layer with horizontal and vertical forward differences (d = 2),
        so the sparsity term is the isotropic total variation.
        'dct8': one layer of ``channels`` combinations of the eight non-constant
        3×3 DCT atoms through a random matrix with orthonormal columns.
        'seeded-random': ``layers`` Xavier-uniform layers of ``channels`` channels.
    channels, layers, seed : int
        Sizes and seed for the random presets.
    scale : float, default 1.0
        Multiplies every coefficient (the sparsity term scales with it).
    activation_delta : float, default 0.001
        Activation smoothing δ.
    """
    if name == "tv":
        kernels = _tv_kernels(scale)
    elif name == "dct8":
        kernels = _dct8_kernels(channels, seed, scale)
    elif name == "seeded-random":
        kernels = _xavier_kernels(layers, channels, seed, scale)
    else:
        raise FilterBankError(f"Unknown filter preset: {name} (choose from {', '.join(PRESETS)})")
    return FilterBank(tuple(kernels), activation_delta)


def perturbed_transposes(fb: FilterBank, relative_norm: float, seed: int = 0) -> FilterBank:
    """
    Attach inexact transposes w̃_q = w_qᵀ + P_q with ‖P_q‖_F = relative_norm·‖w_qᵀ‖_F.

    Used to check that the descent conditions stay safe under a badly wrong transpose.
    """
    rng = np.random.default_rng(seed)
    transposes = []
    for t in exact_transposes(fb):
        noise = rng.standard_normal(t.shape)
        noise *= relative_norm * np.linalg.norm(t) / np.linalg.norm(noise)
        transposes.append(t + noise)
    return fb.with_inexact_transposes(transposes)


# ==============================================================================
# Diagnostics
# ==============================================================================

def transpose_mismatch(fb: FilterBank) -> Dict[str, Any]:
    """
    Compare the inexact transposes against the exact ones.

    Returns
    -------
    dict
        ``per_layer``: ‖w̃_q − w_qᵀ‖_F for each layer;
        ``relative``: the same divided by ‖w_qᵀ‖_F;
        ``constraint``: Σ_q ‖w̃_q − w_qᵀ‖_F², the penalty a training loss would add.
    """
    if fb.inexact_transposes is None:
        raise FilterBankError("filter bank has no inexact transposes")
    exact = exact_transposes(fb)
    per_layer = [float(np.linalg.norm(t - e)) for t, e in zip(fb.inexact_transposes, exact)]
    relative = [p / float(np.linalg.norm(e)) if np.linalg.norm(e) > 0 else float("inf")
                for p, e in zip(per_layer, exact)]
    return {
        "per_layer": per_layer,
        "relative": relative,
        "constraint": float(sum(p * p for p in per_layer)),
    }


def lipschitz_bound(fb: FilterBank) -> float:
    """
    Upper bound on the Lipschitz constant of g.

    Each layer is bounded by the spectral norm of the matrix of per-channel-pair
    ℓ1 kernel norms (Young's inequality); σ is 1-Lipschitz.
    """
    bound = 1.0
    for k in fb.kernels:
        l1 = np.abs(k).sum(axis=(2, 3))
        bound *= float(np.linalg.norm(l1, 2))
    return bound


# ==============================================================================
# Filter-bank files
# ==============================================================================

def write_filter_bank(fb: FilterBank, path: Union[str, Path]) -> Path:
    """Write a filter bank as a JSON ``.fb`` file."""
    path = Path(path)
    doc: Dict[str, Any] = {
        "format": FILTER_BANK_FORMAT,
        "version": 1,
        "activation_delta": fb.activation_delta,
        "layers": [{"weights": k.tolist()} for k in fb.kernels],
    }
    if fb.inexact_transposes is not None:
        doc["inexact_transposes"] = [t.tolist() for t in fb.inexact_transposes]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def read_filter_bank(path: Union[str, Path]) -> FilterBank:
    """
    Read a ``.fb`` file.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    FilterBankError
        If the document is not a valid filter bank.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FilterBankError(f"Invalid filter bank file {path}: {e}")
    if not isinstance(doc, dict) or doc.get("format") != FILTER_BANK_FORMAT:
        raise FilterBankError(f"{path} is not a filter bank file")
    try:
        kernels = tuple(np.array(layer["weights"], dtype=np.float64) for layer in doc["layers"])
        transposes = doc.get("inexact_transposes")
        if transposes is not None:
            transposes = tuple(np.array(t, dtype=np.float64) for t in transposes)
        delta = float(doc.get("activation_delta", DEFAULT_ACTIVATION_DELTA))
    except (KeyError, TypeError, ValueError) as e:
        raise FilterBankError(f"Invalid filter bank file {path}: {e}")
    return FilterBank(kernels, delta, transposes)


def resolve_filter_bank(name_or_path: str, **preset_options: Any) -> FilterBank:
    """Interpret ``--filters``: a preset name or a path to a ``.fb`` file."""
    if name_or_path in PRESETS:
        return preset_filter_bank(name_or_path, **preset_options)
    return read_filter_bank(name_or_path)
