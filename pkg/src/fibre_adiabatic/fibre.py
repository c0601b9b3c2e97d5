"""Fibre operators, eigenbands, spectral gap and reduced resolvent.

Fibre functions are expanded in an orthonormal basis of ``L^2(F, dz)``; the
full discrete space uses the half-density representation ``w = sqrt(rho) c``,
so every fibre operator below is a plain symmetric matrix and fibre
eigenvectors are Euclidean unit vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import eigh

from .geometry import STRIP, ModelGeometry
from .profiles import Profile

SINE = "sine"
LEGENDRE = "legendre"
FOURIER = "fourier"
BASIS_KINDS = (SINE, LEGENDRE, FOURIER)

GAP_TOL = 1e-8


class FibreError(RuntimeError):
    pass


class BasisMismatchError(FibreError, ValueError):
    pass


class GapError(FibreError):
    """Spectral gap of the band closes (below ``GAP_TOL``) at base point ``x``."""

    def __init__(self, x: float, gap: float):
        self.x = x
        self.gap = gap
        super().__init__(f"spectral gap {gap:.3e} below {GAP_TOL:g} at x = {x:.6g}")


class DegenerateNormalizationError(FibreError):
    pass


def _gauss(nq: int) -> tuple[np.ndarray, np.ndarray]:
    t, w = npleg.leggauss(nq)
    return 0.5 * (t + 1.0), 0.5 * w


@dataclass(frozen=True)
class FibreBasis:
    """Orthonormal fibre basis with ``n_z`` modes.

    ``sine`` uses ``sqrt(2) sin(k pi z)``; ``legendre`` uses the Dirichlet
    eigenfunctions of ``-d^2/dz^2`` within polynomials of degree ``n_z + 1``
    (spectrally accurate for fibre functions whose odd reflection at ``z = 1``
    is not smooth); ``fourier`` is the real Fourier basis on the circle.
    """

    kind: str
    n_z: int

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"unknown fibre basis {self.kind!r}")
        if self.n_z < 8:
            raise ValueError(f"n_z must be >= 8, got {self.n_z}")

    @property
    def dirichlet(self) -> bool:
        return self.kind != FOURIER

    @property
    def period(self) -> float:
        return 2 * math.pi if self.kind == FOURIER else 1.0

    @cached_property
    def _quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        nq = 4 * self.n_z + 64
        if self.kind == FOURIER:
            z = np.arange(nq) * (2 * math.pi / nq)
            return z, np.full(nq, 2 * math.pi / nq)
        return _gauss(nq)

    @cached_property
    def _legendre_coefficients(self) -> np.ndarray:
        # Shen basis L_j - L_{j+2} on t = 2z - 1, rotated to the Dirichlet eigenbasis
        n = self.n_z
        z, w = _gauss(n + 16)
        phi, dphi = self._shen(z)
        M = (phi * w) @ phi.T
        K = (dphi * w) @ dphi.T
        _, C = eigh(K, M)
        _, dphi0 = self._shen(np.array([0.0]))
        sign = np.sign(C.T @ dphi0[:, 0])
        return C * sign

    def _shen(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = 2.0 * z - 1.0
        phi = np.empty((self.n_z, z.size))
        dphi = np.empty((self.n_z, z.size))
        for j in range(self.n_z):
            c = np.zeros(j + 3)
            c[j], c[j + 2] = 1.0, -1.0
            phi[j] = npleg.legval(t, c)
            dphi[j] = 2.0 * npleg.legval(t, npleg.legder(c))
        return phi, dphi

    def functions(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Basis values and derivatives, each of shape ``(n_z, len(z))``."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if self.kind == SINE:
            k = np.arange(1, self.n_z + 1)[:, None] * math.pi
            return math.sqrt(2.0) * np.sin(k * z), math.sqrt(2.0) * k * np.cos(k * z)
        if self.kind == LEGENDRE:
            C = self._legendre_coefficients
            phi, dphi = self._shen(z)
            return C.T @ phi, C.T @ dphi
        m = (np.arange(self.n_z) + 1) // 2
        b = np.empty((self.n_z, z.size))
        db = np.empty((self.n_z, z.size))
        b[0], db[0] = 1.0 / math.sqrt(2 * math.pi), 0.0
        for j in range(1, self.n_z):
            if j % 2:
                b[j] = np.cos(m[j] * z) / math.sqrt(math.pi)
                db[j] = -m[j] * np.sin(m[j] * z) / math.sqrt(math.pi)
            else:
                b[j] = np.sin(m[j] * z) / math.sqrt(math.pi)
                db[j] = m[j] * np.cos(m[j] * z) / math.sqrt(math.pi)
        return b, db

    def _integrate(self, f: np.ndarray, g: np.ndarray, weight: np.ndarray | None = None) -> np.ndarray:
        _, w = self._quadrature
        if weight is not None:
            w = w * weight
        return (f * w) @ g.T

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray]:
        z, _ = self._quadrature
        return self.functions(z)

    @cached_property
    def stiffness(self) -> np.ndarray:
        """``int b_j' b_k'``; diagonal for every supported basis."""
        if self.kind == SINE:
            return np.diag((np.arange(1, self.n_z + 1) * math.pi) ** 2)
        if self.kind == FOURIER:
            return np.diag(((np.arange(self.n_z) + 1) // 2).astype(float) ** 2)
        _, db = self._tables
        K = self._integrate(db, db)
        return np.diag(np.diag(K))

    @cached_property
    def shift_matrix(self) -> np.ndarray:
        """``G[j, k] = int b_j z b_k' dz`` (zero for the circle fibre)."""
        if self.kind == FOURIER:
            return np.zeros((self.n_z, self.n_z))
        z, _ = self._quadrature
        b, db = self._tables
        return self._integrate(b, db, z)

    @cached_property
    def shift_square(self) -> np.ndarray:
        """``Z2[j, k] = int z^2 b_j' b_k' dz`` (zero for the circle fibre)."""
        if self.kind == FOURIER:
            return np.zeros((self.n_z, self.n_z))
        z, _ = self._quadrature
        _, db = self._tables
        Z = self._integrate(db, db, z**2)
        return 0.5 * (Z + Z.T)

    @cached_property
    def integrals(self) -> np.ndarray:
        b, _ = self._tables
        _, w = self._quadrature
        return b @ w

    def moment(self, v: Profile) -> np.ndarray:
        """Galerkin matrix of multiplication by ``v(z)``."""
        z, _ = self._quadrature
        b, _ = self._tables
        M = self._integrate(b, b, v(z))
        return 0.5 * (M + M.T)

    @cached_property
    def collocation(self) -> np.ndarray:
        if self.kind == SINE:
            return np.arange(1, self.n_z + 1) / (self.n_z + 1)
        if self.kind == LEGENDRE:
            return _gauss(self.n_z)[0]
        return np.arange(self.n_z) * (2 * math.pi / self.n_z)

    def evaluate(self, coeffs: np.ndarray, z) -> np.ndarray:
        b, _ = self.functions(z)
        return np.asarray(coeffs) @ b


def default_basis(model: ModelGeometry, n_z: int) -> FibreBasis:
    return FibreBasis(LEGENDRE if model.kind == STRIP else FOURIER, n_z)


def check_basis(model: ModelGeometry, basis: FibreBasis) -> None:
    if (model.kind == STRIP) != basis.dirichlet:
        raise BasisMismatchError(f"{basis.kind} basis cannot represent the {model.kind} fibre")


def _potential_moment(model: ModelGeometry, basis: FibreBasis) -> np.ndarray:
    if model.potential is None:
        return np.zeros((basis.n_z, basis.n_z))
    return basis.moment(model.potential.fibre)


def fibre_matrices(model: ModelGeometry, basis: FibreBasis, x=None) -> np.ndarray:
    """Stack of fibre matrices ``H_F(x_i)``, shape ``(n, n_z, n_z)``."""
    check_basis(model, basis)
    x = model.base.nodes if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    kappa, _ = model.kinetic_scale_jet(x)
    vb, _ = model.potential_jet(x)
    K = basis.stiffness
    Vf = _potential_moment(model, basis)
    return kappa[:, None, None] * K + vb[:, None, None] * Vf


def fibre_matrix(model: ModelGeometry, x: float, basis: FibreBasis) -> np.ndarray:
    """``H_F(x) = kappa(x) K + v_b(x) V_f``: symmetric by construction."""
    return fibre_matrices(model, basis, [x])[0]


def fibre_matrix_derivative(model: ModelGeometry, basis: FibreBasis, x=None) -> np.ndarray:
    x = model.base.nodes if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    _, dkappa = model.kinetic_scale_jet(x)
    _, dvb = model.potential_jet(x)
    return dkappa[:, None, None] * basis.stiffness + dvb[:, None, None] * _potential_moment(model, basis)


@dataclass(frozen=True)
class FibreBand:
    """Band ``index`` of the fibre operator sampled on the base nodes.

    ``eigvals[i]`` is the full sorted fibre spectrum at node ``i`` and
    ``eigvecs[i]`` the matching eigenvectors (columns); the band column has its
    sign fixed (positive mean for the ground band, then continuity in ``x``).
    """

    index: int
    nodes: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    basis: FibreBasis
    normalized: bool = True

    @property
    def lam(self) -> np.ndarray:
        return self.eigvals[:, self.index]

    @property
    def phi(self) -> np.ndarray:
        return self.eigvecs[:, :, self.index]

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    def gaps(self) -> np.ndarray:
        lam = self.lam[:, None]
        other = np.delete(self.eigvals, self.index, axis=1)
        return np.min(np.abs(other - lam), axis=1)


@dataclass(frozen=True)
class GapCertificate:
    delta: float
    Lambda0: float
    Lambda1: float
    gaps: np.ndarray = field(repr=False)


def solve_band(model: ModelGeometry, k: int, basis: FibreBasis) -> FibreBand:
    """Diagonalise every fibre and extract band ``k`` with a continuous sign."""
    if not 0 <= k < basis.n_z:
        raise ValueError(f"band index {k} out of range for n_z = {basis.n_z}")
    H = fibre_matrices(model, basis)
    vals, vecs = np.linalg.eigh(H)
    if not np.all(np.isfinite(vals)):
        raise FibreError("fibre eigensolver returned non-finite eigenvalues")
    band = vecs[:, :, k]
    if k == 0:
        mean = band[0] @ basis.integrals
        if abs(mean) < 1e-12 * np.linalg.norm(band[0]):
            raise DegenerateNormalizationError("ground state mean vanishes: sign is ambiguous")
        sign = np.sign(mean)
    else:
        sign = np.sign(band[0, np.argmax(np.abs(band[0]))])
    band[0] *= sign
    for i in range(1, band.shape[0]):
        if band[i] @ band[i - 1] < 0:
            band[i] *= -1.0
    vecs[:, :, k] = band
    for arr in (vals, vecs):
        arr.setflags(write=False)
    return FibreBand(k, model.base.nodes, vals, vecs, basis)


def check_gap(band: FibreBand, tol: float = GAP_TOL) -> GapCertificate:
    gaps = band.gaps()
    i = int(np.argmin(gaps))
    if not gaps[i] > tol:
        raise GapError(float(band.nodes[i]), float(gaps[i]))
    return GapCertificate(
        delta=float(gaps[i]),
        Lambda0=float(np.min(band.eigvals[:, 0])),
        Lambda1=float(np.min(band.eigvals[:, 1])),
        gaps=gaps,
    )


def reduced_resolvents(band: FibreBand, tol: float = GAP_TOL) -> np.ndarray:
    """Stack of ``(H_F - lambda)^{-1} (1 - P_0)`` at every node."""
    diff = band.eigvals - band.lam[:, None]
    mask = np.ones(diff.shape[1], dtype=bool)
    mask[band.index] = False
    if np.any(np.abs(diff[:, mask]) <= tol):
        i = int(np.argmin(np.min(np.abs(diff[:, mask]), axis=1)))
        raise GapError(float(band.nodes[i]), float(np.min(np.abs(diff[i, mask]))))
    inv = np.zeros_like(diff)
    inv[:, mask] = 1.0 / diff[:, mask]
    V = band.eigvecs
    R = np.einsum("nik,nk,njk->nij", V, inv, V)
    return 0.5 * (R + R.transpose(0, 2, 1))


def reduced_resolvent(band: FibreBand, node: int) -> np.ndarray:
    return reduced_resolvents(band)[node]


def band_derivative(model: ModelGeometry, band: FibreBand) -> tuple[np.ndarray, np.ndarray]:
    """``(lambda', phi')`` from first-order perturbation theory in ``x``."""
    dH = fibre_matrix_derivative(model, band.basis)
    phi = band.phi
    dlam = np.einsum("ni,nij,nj->n", phi, dH, phi)
    R = reduced_resolvents(band)
    dphi = -np.einsum("nij,njk,nk->ni", R, dH, phi)
    return dlam, dphi
