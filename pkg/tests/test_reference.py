from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import strip, warped
from fibre_adiabatic.adiabatic import assemble_adiabatic, berry_data
from fibre_adiabatic.fibre import FibreBasis, check_gap, solve_band
from fibre_adiabatic.reference import (
    DimensionError,
    EmptySpectrumError,
    assemble_full,
    eigenfunction_residual,
    eigenpairs_below,
    lift,
    lowest_eigenpairs,
    pair_spectra,
    propagate,
    spectral_distance,
)
from fibre_adiabatic.superadiabatic import fibre_projector_full

LEG = FibreBasis("legendre", 16)
FOU = FibreBasis("fourier", 9)


def separable(eps, count, fibre):
    m = np.arange(-60, 61)
    return np.sort((eps**2 * m[:, None] ** 2 + fibre[None, :]).ravel())[:count]


def test_separable_strip_spectrum():
    eps = 0.1
    H = assemble_full(strip("0", n_x=32, eps=eps), LEG)
    vals = lowest_eigenpairs(H, 20).values
    exact = separable(eps, 20, (np.arange(1, 6) * math.pi) ** 2)
    np.testing.assert_allclose(vals, exact, rtol=1e-10)


def test_flat_torus_spectrum():
    eps = 0.3
    H = assemble_full(warped("2*pi", n_x=32, eps=eps), FOU)
    vals = lowest_eigenpairs(H, 15).values
    j = np.arange(-4, 5)
    exact = separable(eps, 15, np.sort(j.astype(float) ** 2))
    np.testing.assert_allclose(vals, exact, atol=1e-10)


def test_self_convergence_under_doubling():
    eps = 0.1
    vals = []
    for n_x, n_z in ((64, 12), (128, 24)):
        H = assemble_full(strip("0.25 + 0.1*cos(x)", n_x=n_x, eps=eps), FibreBasis("legendre", n_z))
        vals.append(lowest_eigenpairs(H, 10, dense_limit=0).values)
    assert np.max(np.abs(vals[0] - vals[1])) < 1e-9


def test_operator_symmetric_and_matches_dense(rng):
    H = assemble_full(strip(n_x=16), FibreBasis("legendre", 8))
    D = H.dense()
    np.testing.assert_array_equal(D, D.T)
    W = rng.standard_normal((H.dim, 3))
    np.testing.assert_allclose(H.apply(W), D @ W, atol=1e-11 * np.abs(D).max())
    np.testing.assert_allclose(H @ W[:, 0], D @ W[:, 0], atol=1e-11 * np.abs(D).max())


def test_dirichlet_basis_vanishes_at_ends():
    vals = LEG.evaluate(np.eye(LEG.n_z), np.array([0.0, 1.0]))
    assert np.max(np.abs(vals)) < 1e-13


def test_dimension_cap():
    with pytest.raises(DimensionError):
        assemble_full(strip(n_x=32), LEG, dim_cap=100)


def test_iterative_matches_dense():
    H = assemble_full(strip(n_x=64, eps=0.2), FibreBasis("legendre", 16))
    assert H.dim <= 2048
    dense = lowest_eigenpairs(H, 12)
    iterative = lowest_eigenpairs(H, 12, dense_limit=0)
    assert dense.method == "dense" and iterative.method.startswith("shift-invert")
    np.testing.assert_allclose(iterative.values, dense.values, rtol=1e-10)
    overlap = np.abs(np.sum(iterative.vectors[:, :4] * dense.vectors[:, :4], axis=0))
    np.testing.assert_allclose(overlap, 1.0, atol=1e-8)


def test_eigensolver_deterministic():
    H = assemble_full(strip(n_x=64, eps=0.2), FibreBasis("legendre", 16))
    a = lowest_eigenpairs(H, 6, dense_limit=0)
    b = lowest_eigenpairs(H, 6, dense_limit=0)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_eigen_residual_and_orthonormality():
    H = assemble_full(strip(n_x=32), LEG)
    pairs = lowest_eigenpairs(H, 8, dense_limit=0)
    V = pairs.vectors
    np.testing.assert_allclose(V.T @ V, np.eye(8), atol=1e-10)
    assert np.max(np.linalg.norm(H.apply(V) - V * pairs.values, axis=0)) <= 1e-9 * pairs.values.max()


def test_eigenpairs_below_covers_cutoff():
    H = assemble_full(strip(n_x=32), LEG)
    pairs = eigenpairs_below(H, 12.0, start=4)
    assert pairs.values[-1] > 12.0
    assert np.all(np.diff(pairs.values) >= 0)
    assert np.sum(pairs.values <= 12.0) == np.sum(np.linalg.eigvalsh(H.dense()) <= 12.0)


def test_lowest_eigenpairs_rejects_zero():
    with pytest.raises(ValueError):
        lowest_eigenpairs(assemble_full(strip(n_x=16), FibreBasis("legendre", 8)), 0)


def test_spectral_distance_examples():
    assert spectral_distance([1, 2], [1.1, 2], 3) == pytest.approx(0.1)
    assert spectral_distance([1, 2, 5], [1, 2, 7], 3) == 0.0
    with pytest.raises(EmptySpectrumError):
        spectral_distance([4, 5], [1, 2], 3)


def test_spectral_distance_margin_ignores_straddling():
    assert spectral_distance([1, 2.99], [1, 3.01], 3) == pytest.approx(1.99)
    assert spectral_distance([1, 2.99], [1, 3.01], 3, margin=0.1) == pytest.approx(0.02)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.lists(st.floats(0, 10), min_size=1, max_size=8))
def test_spectral_distance_symmetric(a, b):
    a, b = a + [0.0], b + [0.0]
    assert spectral_distance(a, b, 10) == spectral_distance(b, a, 10)
    assert spectral_distance(a, a, 10) == 0.0


def test_pair_spectra_collisions():
    clean = pair_spectra([1.0, 2.0, 3.0], [1.01, 2.02, 3.03])
    assert clean.collisions == 0
    np.testing.assert_array_equal(clean.right, [0, 1, 2])
    np.testing.assert_allclose(clean.gaps([1.0, 2.0, 3.0], [1.01, 2.02, 3.03]), [0.01, 0.02, 0.03])
    crowded = pair_spectra([1.0, 1.05, 3.0], [1.02, 2.0, 3.0])
    assert crowded.collisions == 1
    np.testing.assert_array_equal(crowded.right, [0, 1, 2])


def test_residual_exact_for_flat_strip():
    model = strip("0", n_x=32, eps=0.2)
    band = solve_band(model, 0, LEG)
    H = assemble_full(model, LEG)
    pairs = lowest_eigenpairs(H, 30)
    _, vecs = assemble_adiabatic(model, band, berry_data(band, model)).eigh()
    for i in range(5):
        r_l2, r_w1 = eigenfunction_residual(vecs[:, i], band, H, pairs)
        assert r_l2 <= 1e-9 and r_w1 <= 1e-9


def test_residual_exact_for_warped_model():
    model = warped(n_x=32, eps=0.2)
    band = solve_band(model, 0, FOU)
    H = assemble_full(model, FOU)
    pairs = lowest_eigenpairs(H, 40)
    _, vecs = assemble_adiabatic(model, band, berry_data(band, model)).eigh()
    for i in range(6):
        r_l2, r_w1 = eigenfunction_residual(vecs[:, i], band, H, pairs)
        assert r_l2 <= 1e-8 and r_w1 <= 1e-8


def test_residual_small_on_strip():
    model = strip(n_x=64, eps=0.1)
    band = solve_band(model, 0, LEG)
    H = assemble_full(model, LEG)
    pairs = lowest_eigenpairs(H, 12, dense_limit=0)
    _, vecs = assemble_adiabatic(model, band, berry_data(band, model)).eigh()
    r_l2, r_w1 = eigenfunction_residual(vecs[:, 0], band, H, pairs)
    assert 0 < r_l2 < 0.05 and r_l2 <= r_w1


def test_lift_is_isometric(strip_band, rng):
    psi = rng.standard_normal(strip_band.n_nodes)
    assert np.linalg.norm(lift(strip_band, psi)) == pytest.approx(np.linalg.norm(psi), rel=1e-12)


@pytest.fixture(scope="module")
def small_dense():
    H = assemble_full(strip(n_x=16), FibreBasis("legendre", 8)).dense()
    return H, np.linalg.eigh(H)


def test_propagation_conserves_norm(small_dense, rng):
    H, _ = small_dense
    psi = rng.standard_normal(H.shape[0]) + 1j * rng.standard_normal(H.shape[0])
    for backend in ("eigen", "lu"):
        out = propagate(H, psi, 1.0, 1e-2, shift=10.0, backend=backend)
        assert abs(np.linalg.norm(out.final) - np.linalg.norm(psi)) <= 1e-10 * np.linalg.norm(psi)
        assert out.unitarity <= 1e-12


def test_eigenstate_picks_up_phase(small_dense):
    H, (lam, V) = small_dense
    out = propagate(H, V[:, 0], 1.0, 1e-3, shift=float(lam[0]))
    np.testing.assert_allclose(out.final, np.exp(-1j * lam[0]) * V[:, 0], atol=1e-8)


def test_backends_agree_and_sample(small_dense, rng):
    H, eig = small_dense
    psi = rng.standard_normal(H.shape[0])
    a = propagate(H, psi, 0.5, 5e-3, shift=10.0, samples=5)
    b = propagate(H, psi, 0.5, 5e-3, shift=10.0, backend="lu", samples=5)
    c = propagate(H, psi, 0.5, 5e-3, shift=10.0, eig=eig)
    np.testing.assert_allclose(a.final, b.final, atol=1e-10)
    np.testing.assert_allclose(a.final, c.final, atol=1e-12)
    np.testing.assert_allclose(a.times, [0.1, 0.2, 0.3, 0.4, 0.5])
    assert len(a.states) == 5


def test_block_propagation_matches_columns(small_dense, rng):
    H, _ = small_dense
    X = rng.standard_normal((H.shape[0], 3))
    block = propagate(H, X, 0.3, 1e-2).final
    for j in range(3):
        np.testing.assert_allclose(block[:, j], propagate(H, X[:, j], 0.3, 1e-2).final, atol=1e-13)


def test_propagation_rejects_bad_input(small_dense, rng):
    H, (lam, V) = small_dense
    psi = rng.standard_normal(H.shape[0])
    with pytest.raises(ValueError):
        propagate(H, psi, 1.0, 1e-2, eig=(lam[:4], V[:, :4]))
    with pytest.raises(ValueError):
        propagate(H, psi, 1.0, 1e-2, backend="rk4")


def test_perp_block_bottom():
    deficits = []
    for eps in (0.2, 0.1, 0.05):
        model = strip(n_x=32, eps=eps)
        basis = FibreBasis("legendre", 10)
        band = solve_band(model, 0, basis)
        H = assemble_full(model, basis).dense()
        w, V = np.linalg.eigh(np.eye(H.shape[0]) - fibre_projector_full(band))
        Q = V[:, w > 0.5]
        bottom = np.linalg.eigvalsh(Q.T @ H @ Q)[0]
        deficits.append(check_gap(band).Lambda1 - bottom)
    C = max(0.0, deficits[0] / 0.2, deficits[1] / 0.1)
    assert deficits[2] <= C * 0.05 + 1e-12
