"""
Tests for the convolutional feature transform and filter-bank files.
"""

from pathlib import Path

import numpy as np
import pytest

from src.core import ShapeMismatchError, feature_map_from_array, image_from_array
from src.features import (
    FilterBank,
    FilterBankError,
    sigma,
    sigma_prime,
    apply_g,
    jacobian_T_apply,
    preset_filter_bank,
    perturbed_transposes,
    exact_transposes,
    transpose_mismatch,
    lipschitz_bound,
    write_filter_bank,
    read_filter_bank,
    resolve_filter_bank,
)


# ==============================================================================
# Tests for the Activation
# ==============================================================================

def test_sigma_branches() -> None:
    """
    Test the activation on its zero, quadratic and linear branches.
    """
    delta = 0.1

    assert sigma(-1.0, delta) == 0.0
    assert sigma(2.0, delta) == 2.0
    assert sigma(0.0, delta) == pytest.approx(delta / 4)


def test_sigma_is_continuously_differentiable_at_branch_points() -> None:
    """
    Test the activation and its derivative are continuous at the branch points.
    """
    delta = 0.1
    for t in (-delta, delta):
        assert sigma(t - 1e-12, delta) == pytest.approx(sigma(t + 1e-12, delta), abs=1e-9)
        assert sigma_prime(t - 1e-12, delta) == pytest.approx(sigma_prime(t + 1e-12, delta), abs=1e-9)


def test_sigma_prime_matches_finite_differences_and_stays_in_unit_interval() -> None:
    """
    Test σ' against finite differences and its range.
    """
    delta = 0.1
    t = np.linspace(-0.3, 0.3, 61) + 0.0013
    h = 1e-7

    numeric = (sigma(t + h, delta) - sigma(t - h, delta)) / (2 * h)

    assert np.allclose(numeric, sigma_prime(t, delta), atol=1e-6)
    assert np.all((sigma_prime(t, delta) >= 0) & (sigma_prime(t, delta) <= 1))


# ==============================================================================
# Tests for FilterBank
# ==============================================================================

def test_filter_bank_rejects_wrong_kernel_size() -> None:
    """
    Test kernels must be 3x3.
    """
    with pytest.raises(FilterBankError, match=r"\(out, in, 3, 3\)"):
        FilterBank((np.zeros((2, 1, 5, 5)),))


def test_filter_bank_first_layer_has_single_input() -> None:
    """
    Test the first layer reads a single input channel.
    """
    with pytest.raises(FilterBankError, match="one input channel"):
        FilterBank((np.zeros((2, 3, 3, 3)),))


def test_filter_bank_checks_channel_chain() -> None:
    """
    Test each layer's input channels match the previous layer's outputs.
    """
    with pytest.raises(FilterBankError, match="input channels"):
        FilterBank((np.zeros((4, 1, 3, 3)), np.zeros((2, 3, 3, 3))))


def test_filter_bank_checks_inexact_transpose_shapes() -> None:
    """
    Test inexact transposes must have the shape of the exact ones.
    """
    with pytest.raises(FilterBankError, match="inexact transpose"):
        FilterBank((np.zeros((2, 1, 3, 3)),), inexact_transposes=(np.zeros((2, 1, 3, 3)),))


def test_filter_bank_rejects_nonpositive_delta() -> None:
    """
    Test the activation smoothing must be positive.
    """
    with pytest.raises(FilterBankError, match="activation_delta"):
        FilterBank((np.zeros((2, 1, 3, 3)),), activation_delta=0.0)


# ==============================================================================
# Tests for Presets
# ==============================================================================

def test_tv_preset_gives_forward_differences() -> None:
    """
    On a horizontal ramp, channel 0 is 1 away from the right edge and channel 1 is 0
    away from the bottom edge.
    """
    ramp = np.tile(np.arange(6, dtype=float), (5, 1))
    fb = preset_filter_bank("tv")

    g, _ = apply_g(image_from_array(ramp), fb)

    channels = g.as_channel_images()
    assert fb.channels == 2 and fb.layers == 1
    assert np.allclose(channels[0][:, :-1], 1.0)
    assert np.allclose(channels[1][:-1, :], 0.0)


def test_dct8_preset_atoms_have_zero_mean() -> None:
    """
    Test dct8 kernels have zero mean.
    """
    fb = preset_filter_bank("dct8", channels=48, seed=3)

    assert fb.kernels[0].shape == (48, 1, 3, 3)
    assert np.allclose(fb.kernels[0].sum(axis=(2, 3)), 0.0, atol=1e-12)


def test_seeded_random_preset_is_reproducible() -> None:
    """
    Test the seeded-random preset repeats for a seed and differs between seeds.
    """
    a = preset_filter_bank("seeded-random", channels=8, layers=3, seed=5)
    b = preset_filter_bank("seeded-random", channels=8, layers=3, seed=5)
    c = preset_filter_bank("seeded-random", channels=8, layers=3, seed=6)

    assert a.layers == 3 and a.channels == 8
    assert all(np.array_equal(x, y) for x, y in zip(a.kernels, b.kernels))
    assert not np.array_equal(a.kernels[0], c.kernels[0])


def test_unknown_preset_is_rejected() -> None:
    """
    Test an unknown preset name.
    """
    with pytest.raises(FilterBankError, match="Unknown filter preset"):
        preset_filter_bank("wavelet")


# ==============================================================================
# Tests for the Jacobian Transpose
# ==============================================================================

def test_linear_bank_transpose_is_adjoint(rng: np.random.Generator) -> None:
    """
    For a single-layer bank g is linear: ⟨g(x), v⟩ = ⟨x, ∇gᵀ v⟩.
    """
    fb = preset_filter_bank("dct8", channels=8, seed=1)
    x = image_from_array(rng.standard_normal((7, 9)))
    v = feature_map_from_array(rng.standard_normal((8, 7, 9)))

    g, _ = apply_g(x, fb)
    back = jacobian_T_apply(x, fb, v)

    assert float(np.sum(g.values * v.values)) == pytest.approx(float(np.sum(x.values * back.values)), rel=1e-10)


def test_multilayer_transpose_matches_directional_derivative(rng: np.random.Generator) -> None:
    """
    ⟨∇g(x)ᵀ v, h⟩ equals d/dt ⟨g(x + t h), v⟩ at t = 0.
    """
    fb = preset_filter_bank("seeded-random", channels=4, layers=3, seed=2, activation_delta=0.5)
    x = image_from_array(rng.standard_normal((8, 8)))
    h = rng.standard_normal((8, 8))
    h /= np.linalg.norm(h)
    v = feature_map_from_array(rng.standard_normal((4, 8, 8)))
    t = 1e-6

    plus, _ = apply_g(x.with_values(x.values + t * h), fb)
    minus, _ = apply_g(x.with_values(x.values - t * h), fb)
    numeric = float(np.sum((plus.values - minus.values) * v.values)) / (2 * t)

    analytic = float(np.sum(jacobian_T_apply(x, fb, v).values * h))
    assert numeric == pytest.approx(analytic, rel=1e-5, abs=1e-8)


def test_inexact_mode_with_exact_copy_matches_exact_mode(rng: np.random.Generator) -> None:
    """
    Test inexact mode equals exact mode when the transposes are exact copies.
    """
    fb = preset_filter_bank("seeded-random", channels=4, layers=2, seed=0)
    fb = fb.with_inexact_transposes(list(exact_transposes(fb)))
    x = image_from_array(rng.standard_normal((6, 6)))
    v = feature_map_from_array(rng.standard_normal((4, 6, 6)))

    exact = jacobian_T_apply(x, fb, v, mode="exact")
    inexact = jacobian_T_apply(x, fb, v, mode="inexact")

    assert np.allclose(exact.values, inexact.values, atol=1e-12)


def test_inexact_mode_requires_transposes(rng: np.random.Generator) -> None:
    """
    Test inexact mode without transposes is refused.
    """
    fb = preset_filter_bank("tv")
    x = image_from_array(np.zeros((4, 4)))
    v = feature_map_from_array(np.zeros((2, 4, 4)))

    with pytest.raises(FilterBankError, match="inexact"):
        jacobian_T_apply(x, fb, v, mode="inexact")


def test_jacobian_rejects_wrong_cotangent_shape() -> None:
    """
    Test the cotangent must match the feature map shape.
    """
    fb = preset_filter_bank("tv")
    x = image_from_array(np.zeros((4, 4)))

    with pytest.raises(ShapeMismatchError, match="cotangent"):
        jacobian_T_apply(x, fb, feature_map_from_array(np.zeros((3, 16))))


# ==============================================================================
# Tests for Diagnostics
# ==============================================================================

def test_perturbed_transposes_have_requested_relative_size() -> None:
    """
    Test perturbations have the requested size relative to wᵀ.
    """
    fb = perturbed_transposes(preset_filter_bank("seeded-random", channels=4, layers=2), 0.25, seed=1)

    mismatch = transpose_mismatch(fb)

    assert np.allclose(mismatch["relative"], 0.25)
    assert mismatch["constraint"] == pytest.approx(sum(p ** 2 for p in mismatch["per_layer"]))


def test_transpose_mismatch_requires_transposes() -> None:
    """
    Test the mismatch report needs inexact transposes.
    """
    with pytest.raises(FilterBankError, match="no inexact transposes"):
        transpose_mismatch(preset_filter_bank("tv"))


def test_lipschitz_bound_holds_on_random_pairs(rng: np.random.Generator) -> None:
    """
    Test the Lipschitz bound of g over random image pairs.
    """
    fb = preset_filter_bank("seeded-random", channels=4, layers=3, seed=4)
    bound = lipschitz_bound(fb)

    for _ in range(10):
        a = image_from_array(rng.standard_normal((8, 8)))
        b = image_from_array(rng.standard_normal((8, 8)))
        ga, _ = apply_g(a, fb)
        gb, _ = apply_g(b, fb)
        assert np.linalg.norm(ga.values - gb.values) <= bound * np.linalg.norm(a.values - b.values)


def test_tv_lipschitz_bound_value() -> None:
    """
    Each TV kernel has ℓ1 norm 2, so the bound is ‖[2, 2]ᵀ‖ = 2√2.
    """
    assert lipschitz_bound(preset_filter_bank("tv")) == pytest.approx(2 * np.sqrt(2))


# ==============================================================================
# Tests for Filter-Bank Files
# ==============================================================================

def test_filter_bank_file_preserves_weights_and_transposes(tmp_path: Path) -> None:
    """
    Test a filter-bank file keeps weights, transposes and δ.
    """
    fb = perturbed_transposes(preset_filter_bank("seeded-random", channels=3, layers=2, seed=9), 0.5)

    path = write_filter_bank(fb, tmp_path / "bank.fb")
    restored = read_filter_bank(path)

    assert restored.activation_delta == fb.activation_delta
    assert all(np.array_equal(a, b) for a, b in zip(restored.kernels, fb.kernels))
    assert all(np.array_equal(a, b) for a, b in zip(restored.inexact_transposes, fb.inexact_transposes))


def test_read_filter_bank_rejects_other_documents(tmp_path: Path) -> None:
    """
    Test JSON that is not a filter bank is refused.
    """
    path = tmp_path / "bank.fb"
    path.write_text('{"format": "something-else"}')

    with pytest.raises(FilterBankError, match="not a filter bank"):
        read_filter_bank(path)


def test_read_filter_bank_missing_file(tmp_path: Path) -> None:
    """
    Test reading a missing filter-bank file.
    """
    with pytest.raises(FileNotFoundError, match="File not found"):
        read_filter_bank(tmp_path / "missing.fb")


def test_resolve_filter_bank_accepts_preset_or_path(tmp_path: Path) -> None:
    """
    Test a bank can be named by preset or by file.
    """
    path = write_filter_bank(preset_filter_bank("tv", scale=2.0), tmp_path / "tv2.fb")

    assert resolve_filter_bank("tv").channels == 2
    assert np.abs(resolve_filter_bank(str(path)).kernels[0]).max() == 2.0


def test_shipped_tv_bank_matches_preset() -> None:
    """
    Test the shipped tv.fb equals the tv preset.
    """
    shipped = read_filter_bank(Path(__file__).resolve().parents[1] / "data" / "tv.fb")

    assert np.array_equal(shipped.kernels[0], preset_filter_bank("tv").kernels[0])
