"""Super-adiabatic projections, Sz.-Nagy unitary and effective matrices.

Two realisations are provided.  The plain functions (:func:`build_pN`,
:func:`round_projection`, :func:`sz_nagy`) work with dense matrices on the
full discrete space and suit a few thousand unknowns.  The ``*_subspace``
variants run the same algebra on the subspace actually touched by the
recursion (``P^N - P_0`` has rank at most ``N n_x``, up to the span of
``P_0``), need ``H`` only as a matrix-free operator and are what
:func:`build_projection_set` uses.  Fibre-wise operators (``P_0``, ``R_F``)
are stacks of per-node blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fibre import FibreBand, check_gap, reduced_resolvents
from .linalg import block_dense, block_left, block_right, op_norm, sym_norm, symmetrize
from .reference import FullOperator

log = logging.getLogger(__name__)

IDEMPOTENCY_TOL = 1e-12


class PreconditionError(ValueError):
    pass


class IterationError(RuntimeError):
    pass


def _dense_h(H) -> np.ndarray:
    return H.dense() if isinstance(H, FullOperator) else np.asarray(H, dtype=float)


def _left(B, X: np.ndarray) -> np.ndarray:
    return block_left(B, X) if B.ndim == 3 else B @ X


def _right(X: np.ndarray, B) -> np.ndarray:
    return block_right(X, B) if B.ndim == 3 else X @ B


def base_embedding(band: FibreBand) -> np.ndarray:
    """Columns ``e_i (x) phi_0(x_i)``: the base basis lifted to the full space."""
    n, m = band.n_nodes, band.basis.n_z
    Phi = np.zeros((n * m, n))
    for i in range(n):
        Phi[i * m : (i + 1) * m, i] = band.phi[i]
    return Phi


def projector_blocks(band: FibreBand) -> np.ndarray:
    return np.einsum("ni,nj->nij", band.phi, band.phi)


def fibre_projector_full(band: FibreBand) -> np.ndarray:
    """``P_0`` as a dense block-diagonal matrix (rank one per node)."""
    return block_dense(projector_blocks(band))


def commutator_h_p0(H, P0) -> np.ndarray:
    """``H P_0 - P_0 H``; ``P_0`` may be given as a block stack."""
    H = _dense_h(H)
    HP = _right(H, P0)
    return HP - HP.T


def build_pN(N: int, H, P0, R_F) -> np.ndarray:
    """Almost-invariant projection ``P^N`` by the commutator recursion.

    ``P0`` and ``R_F`` are block stacks or dense matrices.  Each step adds the
    diagonal correction ``-P_0 E P_0 + Q_0 E Q_0`` (``E = P^2 - P``) and the
    off-diagonal ``-Q_0 R_F [H, P] P_0 + P_0 [H, P] R_F Q_0``.
    """
    if N < 0:
        raise ValueError(f"recursion depth must be >= 0, got {N}")
    H = _dense_h(H)
    P = block_dense(P0) if np.ndim(P0) == 3 else np.array(P0, dtype=float)
    for _ in range(N):
        HP = H @ P
        C = HP - HP.T
        E = P @ P - P
        PD = E - _left(P0, E) - _right(E, P0)
        RCP = _right(_left(R_F, C), P0)
        RCP -= _left(P0, RCP)
        P = symmetrize(P + PD - RCP - RCP.T)
    return P


def round_projection(P: np.ndarray, tol: float = IDEMPOTENCY_TOL, maxiter: int = 60) -> np.ndarray:
    """Nearest spectral projection of a symmetric almost-projection.

    Iterates ``P <- 3 P^2 - 2 P^3``, which maps eigenvalues within 1/4 of 1
    to 1 and within 1/4 of 0 to 0.
    """
    P = symmetrize(np.asarray(P, dtype=float))
    P2 = P @ P
    defect = sym_norm(P2 - P)
    if not defect < 0.25:
        raise PreconditionError(f"spectral separation violated: |P^2 - P| = {defect:.3g} >= 1/4")
    last = np.inf
    for _ in range(maxiter):
        d = np.linalg.norm(P2 - P)
        if d <= tol or d >= 0.5 * last:
            break
        last = d
        P = symmetrize(3.0 * P2 - 2.0 * (P2 @ P))
        P2 = P @ P
    final = sym_norm(P2 - P)
    if final > tol:
        raise IterationError(f"projection rounding stalled at |P^2 - P| = {final:.2e}")
    return P


def inverse_sqrt(X: np.ndarray, maxiter: int = 60) -> np.ndarray:
    """``X^{-1/2}`` for symmetric ``X`` with ``|I - X| < 1`` (coupled Newton-Schulz)."""
    n = X.shape[0]
    I = np.eye(n)
    Y, Z = X.copy(), I.copy()
    last = np.inf
    for _ in range(maxiter):
        R = I - Z @ Y
        d = np.linalg.norm(R)
        if d <= 1e-15 * np.sqrt(n) or d >= 0.5 * last:
            break
        last = d
        T = I + 0.5 * R
        Y, Z = Y @ T, T @ Z
    else:
        raise IterationError("Newton-Schulz iteration did not converge")
    return symmetrize(Z)


def sz_nagy(P_eps: np.ndarray, P0) -> np.ndarray:
    """``U = (P_eps P_0 + Q_eps Q_0)(1 - (P_0 - P_eps)^2)^{-1/2}``."""
    P0d = block_dense(P0) if np.ndim(P0) == 3 else np.asarray(P0, dtype=float)
    D = P0d - P_eps
    gap = sym_norm(D)
    if not gap < 1.0:
        raise PreconditionError(f"|P_0 - P_eps| = {gap:.3g} is not below 1")
    n = D.shape[0]
    X = symmetrize(np.eye(n) - D @ D)
    Z = inverse_sqrt(X)
    PP = _right(P_eps, P0) if np.ndim(P0) == 3 else P_eps @ P0d
    W = np.eye(n) - P_eps - P0d + 2.0 * PP
    return W @ Z


@dataclass(frozen=True)
class CorrectionM:
    M_base: np.ndarray

    @property
    def max_eigenvalue(self) -> float:
        return float(np.max(np.linalg.eigvalsh(self.M_base)))


def correction_m(band: FibreBand, H, P0=None, R_F=None) -> CorrectionM:
    """First super-adiabatic correction ``P_0 [H,P_0] R_F [H,P_0] P_0`` on the base basis.

    ``H`` may be a :class:`FullOperator` (matrix-free) or a dense matrix.
    """
    check_gap(band)
    Phi = base_embedding(band)
    HPhi = _apply(H, Phi)
    B = HPhi - Phi @ (Phi.T @ HPhi)
    R = reduced_resolvents(band) if R_F is None else R_F
    M = -B.T @ _left(R, B)
    return CorrectionM(symmetrize(M))


def effective_matrix(H, P_eps, U, band: FibreBand) -> np.ndarray:
    """``U^T P_eps H P_eps U`` restricted to ``range(P_0)`` in the base basis."""
    V = _apply(P_eps, _apply(U, base_embedding(band)))
    return symmetrize(V.T @ _apply(H, V))


@dataclass(frozen=True, eq=False)
class SubspaceMatrix:
    """``identity * I + Q S Q^T`` with orthonormal columns ``Q``.

    Every operator of the projection pipeline differs from ``0`` or ``I`` only
    on a subspace of dimension at most ``(N + 2) n_x``, so this is an exact
    representation rather than an approximation.
    """

    Q: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    identity: float = 0.0

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = self.Q @ (self.S @ (self.Q.T @ X))
        return out + self.identity * X if self.identity else out

    def __matmul__(self, X: np.ndarray) -> np.ndarray:
        return self.apply(X)

    @property
    def T(self) -> SubspaceMatrix:
        return SubspaceMatrix(self.Q, self.S.T, self.identity)

    def dense(self) -> np.ndarray:
        out = self.Q @ self.S @ self.Q.T
        if self.identity:
            out[np.diag_indices_from(out)] += self.identity
        return out

    def coords(self, Q: np.ndarray) -> np.ndarray:
        """Matrix of ``Q S Q^T`` in the coordinates of a larger orthonormal ``Q``."""
        T = Q.T @ self.Q
        return T @ self.S @ T.T


def _apply(H, X: np.ndarray) -> np.ndarray:
    return H.apply(X) if hasattr(H, "apply") else np.asarray(H) @ X


def _extend(Q: np.ndarray, K: np.ndarray, rtol: float = 1e-13) -> np.ndarray:
    for _ in range(2):
        K = K - Q @ (Q.T @ K)
    if not K.size:
        return Q
    U, s, _ = np.linalg.svd(K, full_matrices=False)
    keep = s > rtol * max(1.0, float(s[0]) if s.size else 0.0)
    return np.hstack([Q, U[:, keep]]) if np.any(keep) else Q


def build_pN_subspace(N: int, H, band: FibreBand, R_F: np.ndarray | None = None) -> SubspaceMatrix:
    """The recursion of :func:`build_pN` carried out on the subspace it touches.

    ``H`` is only applied to ``n_x`` columns per step, so a matrix-free
    :class:`FullOperator` suffices.
    """
    if N < 0:
        raise ValueError(f"recursion depth must be >= 0, got {N}")
    R = reduced_resolvents(band) if R_F is None else R_F
    Phi = base_embedding(band)
    HPhi = _apply(H, Phi)
    Q, S = Phi, np.eye(Phi.shape[1])
    for _ in range(N):
        F = Q.T @ Phi
        Y = _apply(H, Q @ (S @ F)) - Q @ (S @ (Q.T @ HPhi))
        K = block_left(R, Y)
        Qn = _extend(Q, K)
        T = Qn.T @ Q
        F, k = Qn.T @ Phi, Qn.T @ K
        E = T @ (S @ S - S) @ T.T
        P0 = F @ F.T
        S = symmetrize(T @ S @ T.T + E - P0 @ E - E @ P0 - k @ F.T - F @ k.T)
        Q = Qn
    return SubspaceMatrix(Q, S)


def round_subspace(P: SubspaceMatrix) -> SubspaceMatrix:
    return SubspaceMatrix(P.Q, round_projection(P.S), P.identity)


def sz_nagy_subspace(P_eps: SubspaceMatrix, band: FibreBand) -> SubspaceMatrix:
    """Sz.-Nagy unitary as ``I + Q u Q^T`` on the subspace of ``P_eps``."""
    Q, Se = P_eps.Q, P_eps.S
    F = Q.T @ base_embedding(band)
    P0 = F @ F.T
    D = P0 - Se
    gap = sym_norm(D)
    if not gap < 1.0:
        raise PreconditionError(f"|P_0 - P_eps| = {gap:.3g} is not below 1")
    r = Q.shape[1]
    I = np.eye(r)
    Z = inverse_sqrt(symmetrize(I - D @ D)) - I
    W = -Se - P0 + 2.0 * Se @ P0
    return SubspaceMatrix(Q, W + Z + W @ Z, identity=1.0)


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """``P_0``, ``P^N``, ``P_eps`` and ``U_eps`` on a common subspace, plus ``R_F`` blocks."""

    band: FibreBand
    N: int
    P0: SubspaceMatrix = field(repr=False)
    PN: SubspaceMatrix = field(repr=False)
    P_eps: SubspaceMatrix = field(repr=False)
    U: SubspaceMatrix = field(repr=False)
    R_F: np.ndarray = field(repr=False)

    @property
    def P0_blocks(self) -> np.ndarray:
        return projector_blocks(self.band)

    def invariants(self) -> dict[str, float]:
        """Residual norms of the defining identities (all exact in the subspace)."""
        Q = self.P_eps.Q
        r = Q.shape[1]
        I = np.eye(r)
        P0 = self.P0.coords(Q)
        Pn, Pe = self.PN.S, self.P_eps.S
        U = I + self.U.S
        return {
            "P0_idempotency": sym_norm(P0 @ P0 - P0),
            "PN_defect": sym_norm(Pn @ Pn - Pn),
            "P_eps_idempotency": sym_norm(Pe @ Pe - Pe),
            "unitarity": sym_norm(U.T @ U - I),
            "intertwining": op_norm((I - Pe) @ U @ P0),
            "P_eps_minus_P0": sym_norm(Pe - P0),
            "U_minus_I": op_norm(U - I),
            "rank_P_eps": float(np.trace(Pe)),
        }

    def effective_basis(self) -> np.ndarray:
        """``P_eps U_eps Phi``: orthonormal columns spanning ``range(P_eps)``."""
        return self.P_eps.apply(self.U.apply(base_embedding(self.band)))

    def effective_matrix(self, H) -> np.ndarray:
        V = self.effective_basis()
        return symmetrize(V.T @ _apply(H, V))


def build_projection_set(H, band: FibreBand, N: int = 1) -> ProjectionSet:
    """Run recursion, rounding and Sz.-Nagy for ``H`` (dense or matrix-free)."""
    check_gap(band)
    R = reduced_resolvents(band)
    PN = build_pN_subspace(N, H, band, R)
    P_eps = round_subspace(PN)
    U = sz_nagy_subspace(P_eps, band)
    Phi = base_embedding(band)
    return ProjectionSet(band, N, SubspaceMatrix(Phi, np.eye(Phi.shape[1])), PN, P_eps, U, R)


def commutator_window_norm(H, P, vectors: np.ndarray, values: np.ndarray) -> float:
    """``|[H, P] rho(H)|`` for the spectral window spanned by eigenpairs ``(values, vectors)``."""
    PW = _apply(P, vectors)
    return op_norm(_apply(H, PW) - _apply(P, vectors * values))
