from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import strip, warped
from fibre_adiabatic.adiabatic import assemble_adiabatic, berry_data
from fibre_adiabatic.fibre import FibreBasis, check_gap, reduced_resolvents, solve_band
from fibre_adiabatic.harness.rates import fit_rate
from fibre_adiabatic.linalg import op_norm, sym_norm
from fibre_adiabatic.reference import assemble_full, lowest_eigenpairs
from fibre_adiabatic.superadiabatic import (
    PreconditionError,
    SubspaceMatrix,
    base_embedding,
    build_pN,
    build_pN_subspace,
    build_projection_set,
    commutator_h_p0,
    commutator_window_norm,
    correction_m,
    effective_matrix,
    fibre_projector_full,
    projector_blocks,
    round_projection,
    sz_nagy,
)

LEG = FibreBasis("legendre", 10)
FOU = FibreBasis("fourier", 9)
SWEEP = (0.2, 0.141, 0.1, 0.071, 0.05)


def setup(model, basis):
    band = solve_band(model, 0, basis)
    return band, assemble_full(model, basis)


@pytest.fixture(scope="module")
def strip_setup():
    return setup(strip(n_x=16), LEG)


@pytest.fixture(scope="module")
def sweep():
    """Projection sets on the strip at 128 x 16 for the standard epsilon sweep."""
    out = []
    for eps in SWEEP:
        m = strip(n_x=128, eps=eps)
        basis = FibreBasis("legendre", 16)
        band, H = setup(m, basis)
        out.append((eps, m, band, H, build_projection_set(H, band, 1)))
    return out


def test_p0_rank_and_range(strip_setup, rng):
    band, _ = strip_setup
    P0 = fibre_projector_full(band)
    assert np.trace(P0) == pytest.approx(band.n_nodes, abs=1e-12)
    psi = base_embedding(band) @ rng.standard_normal(band.n_nodes)
    np.testing.assert_allclose(P0 @ psi, psi, atol=1e-14)


def test_warped_p0_is_constant_sector():
    band = solve_band(warped(n_x=16), 0, FOU)
    P0 = fibre_projector_full(band)
    idx = np.arange(16) * FOU.n_z
    expected = np.zeros_like(P0)
    expected[idx, idx] = 1.0
    np.testing.assert_allclose(P0, expected, atol=1e-15)


def test_flat_strip_commutator_vanishes():
    band, H = setup(strip("0", n_x=16), LEG)
    assert np.max(np.abs(commutator_h_p0(H, projector_blocks(band)))) < 1e-11


def test_warped_commutator_vanishes():
    band, H = setup(warped(n_x=16), FOU)
    assert np.max(np.abs(commutator_h_p0(H, projector_blocks(band)))) < 1e-12


def test_first_recursion_step_is_off_diagonal(strip_setup):
    band, H = strip_setup
    P0 = fibre_projector_full(band)
    X = build_pN(1, H, P0, reduced_resolvents(band)) - P0
    Q0 = np.eye(P0.shape[0]) - P0
    assert op_norm(P0 @ X @ P0) < 1e-13
    assert op_norm(Q0 @ X @ Q0) < 1e-13


@pytest.mark.parametrize("N", [0, 1, 2, 3])
def test_warped_recursion_is_trivial(N):
    band, H = setup(warped(n_x=16), FOU)
    P0 = fibre_projector_full(band)
    np.testing.assert_allclose(build_pN(N, H, P0, reduced_resolvents(band)), P0, atol=1e-12)


@pytest.mark.parametrize("N", [0, 1, 2])
def test_dense_and_subspace_realisations_agree(strip_setup, N):
    band, H = strip_setup
    P0 = projector_blocks(band)
    R = reduced_resolvents(band)
    dense = build_pN(N, H, P0, R)
    np.testing.assert_allclose(build_pN_subspace(N, H, band, R).dense(), dense, atol=1e-12)
    P = round_projection(dense)
    U = sz_nagy(P, P0)
    ps = build_projection_set(H, band, N)
    np.testing.assert_allclose(ps.P_eps.dense(), P, atol=1e-12)
    np.testing.assert_allclose(ps.U.dense(), U, atol=1e-12)
    np.testing.assert_allclose(ps.effective_matrix(H), effective_matrix(H, P, U, band), atol=1e-10)


def test_negative_depth_rejected(strip_setup):
    band, H = strip_setup
    with pytest.raises(ValueError):
        build_pN(-1, H, projector_blocks(band), reduced_resolvents(band))


def test_rounding_fixes_projections(strip_setup):
    band, _ = strip_setup
    P0 = fibre_projector_full(band)
    np.testing.assert_allclose(round_projection(P0), P0, atol=1e-12)


def test_rounding_perturbed_projection(strip_setup, rng):
    band, _ = strip_setup
    P0 = fibre_projector_full(band)
    E = rng.standard_normal(P0.shape)
    E = E + E.T
    E /= sym_norm(E)
    P = round_projection(P0 + 1e-3 * E)
    assert sym_norm(P @ P - P) <= 1e-12
    assert int(np.sum(np.linalg.eigvalsh(P) > 0.5)) == band.n_nodes


def test_rounding_precondition():
    t = (1 + np.sqrt(2.2)) / 2  # t^2 - t = 0.3
    bad = np.diag([1.0, t, 0.0])
    assert sym_norm(bad @ bad - bad) == pytest.approx(0.3)
    with pytest.raises(PreconditionError):
        round_projection(bad)


def test_sz_nagy_identity(strip_setup):
    band, _ = strip_setup
    P0 = fibre_projector_full(band)
    np.testing.assert_allclose(sz_nagy(P0, P0), np.eye(P0.shape[0]), atol=1e-14)


def test_sz_nagy_precondition():
    with pytest.raises(PreconditionError):
        sz_nagy(np.diag([0.0, 1.0]), np.diag([1.0, 0.0]))


def test_correction_vanishes_without_coupling():
    for model, basis in ((strip("0", n_x=16), LEG), (warped(n_x=16), FOU)):
        band, H = setup(model, basis)
        assert np.max(np.abs(correction_m(band, H).M_base)) < 1e-11


def test_warped_collapse():
    band, H = setup(warped(n_x=16), FOU)
    ps = build_projection_set(H, band, 2)
    inv = ps.invariants()
    assert inv["P_eps_minus_P0"] <= 1e-11
    assert inv["U_minus_I"] <= 1e-11
    m = warped(n_x=16)
    Ha = assemble_adiabatic(m, band, berry_data(band, m)).matrix
    Heff = ps.effective_matrix(H)
    half = 8
    np.testing.assert_allclose(np.linalg.eigvalsh(Heff)[:half], np.linalg.eigvalsh(Ha)[:half], atol=1e-9)


def test_flat_effective_operator():
    m = strip("0", n_x=16, eps=0.1)
    band, H = setup(m, LEG)
    Heff = build_projection_set(H, band, 1).effective_matrix(H)
    np.testing.assert_allclose(Heff, 0.01 * m.base.laplacian + np.pi**2 * np.eye(16), atol=1e-11)


def test_subspace_matrix_algebra(rng):
    Q = np.linalg.qr(rng.standard_normal((12, 4)))[0]
    S = rng.standard_normal((4, 4))
    A = SubspaceMatrix(Q, S, identity=1.0)
    X = rng.standard_normal((12, 3))
    np.testing.assert_allclose(A.apply(X), A.dense() @ X, atol=1e-14)
    np.testing.assert_allclose(A.T.dense(), A.dense().T, atol=1e-14)
    assert A.rank == 4


@given(seed=st.integers(0, 2**32 - 1))
def test_p0_commutator_identity(seed):
    band = solve_band(strip(n_x=16), 0, FibreBasis("legendre", 8))
    P0 = fibre_projector_full(band)
    A = np.random.default_rng(seed).standard_normal(P0.shape)
    C = A @ P0 - P0 @ A
    assert op_norm(P0 @ C @ P0) <= 1e-12


@given(amp=st.floats(0.0, 0.2), eps=st.floats(0.05, 0.3))
def test_projection_invariants(amp, eps):
    m = strip(f"0.25 + {amp!r}*cos(x)", n_x=16, eps=eps)
    band, H = setup(m, LEG)
    ps = build_projection_set(H, band, 1)
    inv = ps.invariants()
    assert inv["P_eps_idempotency"] <= 1e-12
    assert inv["unitarity"] <= 1e-10
    assert inv["intertwining"] <= 1e-10
    assert inv["rank_P_eps"] == pytest.approx(16, abs=1e-8)
    assert correction_m(band, H, R_F=ps.R_F).max_eigenvalue <= 1e-12


def test_commutator_rate_for_p0(sweep):
    pts = []
    for eps, m, band, H, ps in sweep[::2]:
        cert = check_gap(band)
        pairs = lowest_eigenpairs(H, 200)
        sel = pairs.values <= cert.Lambda1 - 0.5
        pts.append((eps, commutator_window_norm(H, ps.P0, pairs.vectors[:, sel], pairs.values[sel])))
    assert fit_rate(pts).slope >= 0.9


def test_recursion_defect_rate(sweep):
    fit = fit_rate([(eps, ps.invariants()["PN_defect"]) for eps, *_, ps in sweep])
    assert fit.slope >= 1.8


def test_unitary_distance_rate(sweep):
    fit = fit_rate([(eps, ps.invariants()["U_minus_I"]) for eps, *_, ps in sweep])
    assert fit.slope >= 0.9


def test_correction_rate_and_sign(sweep):
    pts = []
    for eps, m, band, H, ps in sweep:
        M = correction_m(band, H, R_F=ps.R_F)
        assert M.max_eigenvalue <= 1e-12
        pts.append((eps, float(np.max(np.abs(np.linalg.eigvalsh(M.M_base))))))
    assert fit_rate(pts).slope >= 1.8


def test_effective_operator_matches_corrected_adiabatic(sweep):
    pts = []
    for eps, m, band, H, ps in sweep:
        Heff = ps.effective_matrix(H)
        M = correction_m(band, H, R_F=ps.R_F)
        HaM = assemble_adiabatic(m, band, berry_data(band, m), correction=M).matrix
        lam, V = np.linalg.eigh(Heff)
        W = V[:, lam <= check_gap(band).Lambda0 + 2]
        pts.append((eps, op_norm(W.T @ (Heff - HaM) @ W)))
    assert fit_rate(pts).slope >= 2.7
