"""Full two-dimensional reference operator, eigensolvers and propagation.

States live in the half-density representation ``w_i = sqrt(rho(x_i)) c_i``
where ``c_i`` are the fibre-basis coefficients at base node ``i``; with it the
discrete ``L^2`` inner product is Euclidean (the uniform base weight is
dropped) and ``H`` is a symmetric matrix of size ``n_x * n_z``, node-major.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg, eigsh

from .fibre import FibreBand, FibreBasis, check_basis, fibre_matrices
from .geometry import ModelGeometry
from .linalg import symmetrize

log = logging.getLogger(__name__)

DEFAULT_DIM_CAP = 1 << 16
DENSE_LIMIT = 4096
EIG_TOL = 1e-9
CLUSTER_TOL = 1e-8


class DimensionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class EmptySpectrumError(ValueError):
    pass


class MatchError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FullOperator:
    """``H = -eps^2 Delta_h + eps H1 + H_F`` from its quadratic form.

    ``A`` and ``c`` are the horizontal weight ``rho (1 + eps s)`` and the
    vertical-correction coefficient on the doubled base grid, ``fibre`` the
    per-node blocks ``H_F(x_i) + eps^2 v(x_i)``.
    """

    model: ModelGeometry
    basis: FibreBasis
    eps: float
    rho: np.ndarray = field(repr=False)
    A: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    fibre: np.ndarray = field(repr=False)
    terms: tuple[str, ...] = ()

    @property
    def n_x(self) -> int:
        return self.model.base.n_x

    @property
    def n_z(self) -> int:
        return self.basis.n_z

    @property
    def dim(self) -> int:
        return self.n_x * self.n_z

    @property
    def shape(self) -> tuple[int, int]:
        return self.dim, self.dim

    @property
    def weights(self) -> np.ndarray:
        """Fibre measure density on the base nodes (``a`` or ``l / 2 pi``)."""
        return self.rho

    @cached_property
    def _scale(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.rho)

    def apply(self, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W)
        single = W.ndim == 1
        k = 1 if single else W.shape[1]
        n, m = self.n_x, self.n_z
        base = self.model.base
        W3 = W.reshape(n, m, k)
        C = (W3 * self._scale[:, None, None]).reshape(n, m * k)
        P = (base.grad @ C).reshape(2 * n, m, k)
        A = 0.5 * self.A[:, None, None]
        if np.any(self.c):
            G, Z2 = self.basis.shift_matrix, self.basis.shift_square
            Q = (base.interp @ C).reshape(2 * n, m, k)
            cc = self.c[:, None, None]
            Pn = A * (P - cc * np.matmul(G, Q))
            Qn = A * (cc**2 * np.matmul(Z2, Q) - cc * np.matmul(G.T, P))
            out = base.grad.T @ Pn.reshape(2 * n, -1) + base.interp.T @ Qn.reshape(2 * n, -1)
        else:
            out = base.grad.T @ (A * P).reshape(2 * n, -1)
        out = self.eps**2 * out.reshape(n, m, k) * self._scale[:, None, None]
        out += np.matmul(self.fibre, W3)
        return out.reshape(-1) if single else out.reshape(-1, k)

    def __matmul__(self, W: np.ndarray) -> np.ndarray:
        return self.apply(W)

    def dense(self) -> np.ndarray:
        base = self.model.base
        D, E = base.grad, base.interp
        I = np.eye(self.n_z)
        A = 0.5 * self.A
        H = np.kron(D.T @ (A[:, None] * D), I)
        if np.any(self.c):
            G, Z2 = self.basis.shift_matrix, self.basis.shift_square
            X = D.T @ ((A * self.c)[:, None] * E)
            H -= np.kron(X, G) + np.kron(X.T, G.T)
            H += np.kron(E.T @ ((A * self.c**2)[:, None] * E), Z2)
        s = np.repeat(self._scale, self.n_z)
        H *= self.eps**2 * s[:, None] * s[None, :]
        for i in range(self.n_x):
            sl = slice(i * self.n_z, (i + 1) * self.n_z)
            H[sl, sl] += self.fibre[i]
        return symmetrize(H)

    def linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.apply, matmat=self.apply, dtype=float)

    def horizontal_base_matrix(self) -> np.ndarray:
        """Horizontal part acting on fibre-constant coefficients (for preconditioning)."""
        base = self.model.base
        L = 0.5 * base.grad.T @ (self.A[:, None] * base.grad)
        return self.eps**2 * symmetrize(L) * self._scale[:, None] * self._scale[None, :]


def assemble_full(
    model: ModelGeometry,
    basis: FibreBasis,
    *,
    eps: float | None = None,
    potential: bool = True,
    h1: bool = True,
    dim_cap: int = DEFAULT_DIM_CAP,
) -> FullOperator:
    """Assemble ``H`` for ``model`` on the tensor grid ``base x basis``.

    ``eps`` overrides the model's value (any positive number is accepted, so
    the ``eps = 1`` graph norm can be built); ``potential`` and ``h1`` switch
    the corresponding terms off.
    """
    dim = model.base.n_x * basis.n_z
    if dim > dim_cap:
        raise DimensionError(f"full dimension {dim} exceeds the cap {dim_cap}")
    eps = model.eps if eps is None else float(eps)
    if not eps > 0:
        raise ValueError("eps must be positive")
    x, xf = model.base.nodes, model.base.fine_nodes
    rho = model.density_jet(x)[0]
    rho_f = model.density_jet(xf)[0]
    c_f = model.shift_jet(xf)[0]
    terms = ["horizontal", "fibre-kinetic"]
    if potential and model.potential is not None:
        fib = fibre_matrices(model, basis)
        terms.append("potential")
    else:
        check_basis(model, basis)
        kappa, _ = model.kinetic_scale_jet(x)
        fib = kappa[:, None, None] * basis.stiffness
    A = rho_f.copy()
    if h1 and model.h1 is not None:
        A *= 1.0 + eps * model.h1.s(xf)
        v = model.h1.v(x)
        fib = fib + (eps**2 * v)[:, None, None] * np.eye(basis.n_z)
        terms.append("h1")
    fib = 0.5 * (fib + fib.transpose(0, 2, 1))
    for arr in (rho, A, c_f, fib):
        arr.setflags(write=False)
    return FullOperator(model, basis, eps, rho, A, c_f, fib, tuple(terms))


def graph_norm_operator(op: FullOperator) -> FullOperator:
    """``-Delta_F - Delta_h`` at ``eps = 1`` without potential or ``H1``."""
    return assemble_full(op.model, op.basis, eps=1.0, potential=False, h1=False, dim_cap=op.dim)


# eigensolvers -----------------------------------------------------------------


@dataclass(frozen=True)
class Eigenpairs:
    values: np.ndarray
    vectors: np.ndarray
    residual: float
    method: str

    def __len__(self) -> int:
        return self.values.size


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def _residual(op, vals: np.ndarray, vecs: np.ndarray) -> float:
    R = op @ vecs - vecs * vals
    return float(np.max(np.linalg.norm(R, axis=0) / np.linalg.norm(vecs, axis=0))) if vals.size else 0.0


class _AdiabaticPreconditioner:
    """Inverse of ``H - sigma`` with inter-band coupling dropped.

    In the per-node fibre eigenbasis every band ``j`` sees the base operator
    ``eps^2 L_rho + lambda_j(x) - sigma``; these are inverted exactly.
    """

    def __init__(self, op: FullOperator, sigma: float):
        vals, self.V = np.linalg.eigh(op.fibre)
        L = op.horizontal_base_matrix()
        n = op.n_x
        self.inv = np.empty((op.n_z, n, n))
        for j in range(op.n_z):
            B = L + np.diag(vals[:, j] - sigma)
            self.inv[j] = sla.cho_solve(sla.cho_factor(B), np.eye(n))
        self.shape = (op.dim, op.dim)

    def solve(self, r: np.ndarray) -> np.ndarray:
        n, m = self.V.shape[0], self.V.shape[1]
        y = np.einsum("izj,iz->ji", self.V, r.reshape(n, m))
        z = np.einsum("jab,jb->ja", self.inv, y)
        return np.einsum("izj,ji->iz", self.V, z).reshape(-1)


def spectrum_floor(op: FullOperator) -> float:
    """A value strictly below the spectrum of ``op``."""
    lam0 = np.linalg.eigvalsh(op.fibre)[:, 0]
    return float(np.min(lam0) - max(1.0, 0.1 * abs(np.min(lam0))))


def lowest_eigenpairs(
    op: FullOperator,
    m: int,
    shift: float | None = None,
    *,
    tol: float = EIG_TOL,
    dense_limit: int = DENSE_LIMIT,
    maxiter: int = 2000,
) -> Eigenpairs:
    """The ``m`` lowest eigenpairs, deterministic and residual-checked.

    Small problems use a dense symmetric eigensolver; larger ones run
    shift-invert Lanczos about ``shift`` (default: below the spectrum) with
    preconditioned conjugate-gradient inner solves.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    m = min(m, op.dim)
    if op.dim <= dense_limit:
        vals, vecs = sla.eigh(op.dense(), subset_by_index=[0, m - 1], driver="evr")
        method = "dense"
    else:
        sigma = spectrum_floor(op) if shift is None else float(shift)
        pre = _AdiabaticPreconditioner(op, sigma)
        Hs = LinearOperator(op.shape, matvec=lambda v: op.apply(v) - sigma * v, dtype=float)
        M = LinearOperator(op.shape, matvec=pre.solve, dtype=float)
        iters = []

        def inv(b):
            x, info = cg(Hs, b, x0=pre.solve(b), rtol=1e-13, atol=0.0, maxiter=maxiter, M=M)
            if info:
                raise ConvergenceError(f"inner conjugate-gradient solve did not converge ({info})")
            iters.append(1)
            return x

        OPinv = LinearOperator(op.shape, matvec=inv, dtype=float)
        v0 = np.random.default_rng(2024).standard_normal(op.dim)
        ncv = min(op.dim, max(2 * m + 1, m + 24))
        try:
            vals, vecs = eigsh(op.linear_operator(), k=m, sigma=sigma, OPinv=OPinv, v0=v0,
                               ncv=ncv, tol=1e-13, which="LM", maxiter=maxiter)
        except Exception as exc:  # ARPACK reports failures through several exception types
            raise ConvergenceError(f"shift-invert Lanczos failed: {exc}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        vals, Y = np.linalg.eigh(symmetrize(vecs.T @ op.apply(vecs)))
        vecs = vecs @ Y
        method = f"shift-invert(sigma={sigma:.6g}, solves={len(iters)})"
    vecs = _fix_signs(vecs)
    res = _residual(op, vals, vecs)
    if res > tol * max(1.0, float(np.max(np.abs(vals)))):
        raise ConvergenceError(f"eigenpair residual {res:.2e} exceeds tolerance {tol:g}")
    for arr in (vals, vecs):
        arr.setflags(write=False)
    return Eigenpairs(vals, vecs, res, method)


def eigenpairs_below(op: FullOperator, cutoff: float, *, start: int = 16, **kw) -> Eigenpairs:
    """All eigenpairs with eigenvalue ``<= cutoff`` plus at least one above."""
    m = start
    while True:
        pairs = lowest_eigenpairs(op, m, **kw)
        if pairs.values[-1] > cutoff or m >= op.dim:
            return pairs
        m = min(op.dim, 2 * m)


# spectral comparison ----------------------------------------------------------


def spectral_distance(a, b, cutoff: float, margin: float = 0.0) -> float:
    """Hausdorff distance between ``a`` and ``b`` truncated at ``cutoff``.

    With ``margin > 0`` each truncated set is compared with the other set
    truncated at ``cutoff + margin``, so eigenvalues straddling the cutoff do
    not register as spurious mismatches.
    """
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    A, B = a[a <= cutoff], b[b <= cutoff]
    if A.size == 0 or B.size == 0:
        raise EmptySpectrumError(f"no eigenvalues below {cutoff:g}")
    a_ext, b_ext = a[a <= cutoff + margin], b[b <= cutoff + margin]
    d1 = np.max(np.min(np.abs(A[:, None] - b_ext[None, :]), axis=1))
    d2 = np.max(np.min(np.abs(B[:, None] - a_ext[None, :]), axis=1))
    return float(max(d1, d2))


@dataclass(frozen=True)
class Pairing:
    left: np.ndarray
    right: np.ndarray
    collisions: int

    def gaps(self, a, b) -> np.ndarray:
        return np.abs(np.asarray(a)[self.left] - np.asarray(b)[self.right])


def pair_spectra(a, b, count: int | None = None) -> Pairing:
    """Greedy nearest-neighbour pairing in ascending order with a collision audit."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    count = min(a.size, b.size) if count is None else count
    used = np.zeros(b.size, dtype=bool)
    left, right, collisions = [], [], 0
    for i in np.argsort(a)[:count]:
        d = np.abs(b - a[i])
        nearest = int(np.argmin(d))
        if used[nearest]:
            collisions += 1
        d[used] = np.inf
        j = int(np.argmin(d))
        used[j] = True
        left.append(int(i))
        right.append(j)
    if collisions:
        log.warning("eigenvalue pairing resolved %d collisions", collisions)
    return Pairing(np.array(left), np.array(right), collisions)


def lift(band: FibreBand, psi: np.ndarray) -> np.ndarray:
    """``psi(x_i) phi_0(x_i)`` on the full space."""
    psi = np.asarray(psi)
    return (band.phi[:, :, None] * psi.reshape(band.n_nodes, 1, -1)).reshape(-1, *psi.shape[1:])


def eigenfunction_residual(
    psi_a: np.ndarray,
    band: FibreBand,
    op: FullOperator,
    pairs: Eigenpairs,
    *,
    min_gap: float = 0.0,
) -> tuple[float, float]:
    """``(r_L2, r_W1)`` of ``(1 - P_lambda) psi`` for the lifted effective eigenvector ``psi``.

    ``P_lambda`` projects onto the eigenspace of the full eigenvalue nearest
    the Rayleigh quotient of ``psi`` (eigenvalues within ``CLUSTER_TOL``
    relative are treated as one degenerate eigenvalue).
    """
    psi = lift(band, psi_a / np.linalg.norm(psi_a))
    mu = float(psi @ op.apply(psi))
    d = np.abs(pairs.values - mu)
    j = int(np.argmin(d))
    if j == len(pairs) - 1 and pairs.values[j] < mu:
        raise MatchError("matched eigenvalue lies at the edge of the computed window")
    lam = pairs.values[j]
    cluster = np.abs(pairs.values - lam) <= CLUSTER_TOL * max(1.0, abs(lam))
    others = pairs.values[~cluster]
    gap = float(np.min(np.abs(others - lam))) if others.size else math.inf
    if gap <= min_gap:
        raise MatchError(f"matched eigenvalue {lam:.10g} is near-degenerate (gap {gap:.2e})")
    V = pairs.vectors[:, cluster]
    r = psi - V @ (V.T @ psi)
    graph = graph_norm_operator(op)
    r_w1 = math.sqrt(max(float(r @ graph.apply(r) + r @ r), 0.0))
    return float(np.linalg.norm(r)), r_w1


# time propagation -------------------------------------------------------------


@dataclass(frozen=True)
class Propagation:
    times: np.ndarray
    states: np.ndarray
    final: np.ndarray
    unitarity: float


def propagate(
    op,
    psi0: np.ndarray,
    T: float,
    dt: float,
    *,
    shift: float = 0.0,
    backend: str = "eigen",
    samples: int = 0,
    eig: tuple[np.ndarray, np.ndarray] | None = None,
) -> Propagation:
    """Cayley (Crank-Nicolson) propagation of ``psi0`` under ``op`` up to ``T``.

    ``op`` is a dense symmetric matrix or a :class:`FullOperator`; ``psi0``
    may be a single state or a block of states (columns).  The step
    is applied to ``op - shift`` and the exact phase ``exp(-i shift t)`` is
    restored afterwards.  ``backend='eigen'`` diagonalises once and takes exact
    powers of the per-eigenvalue Cayley factor; ``'lu'`` factorises the
    implicit step once and steps explicitly.  ``samples`` intermediate states
    are returned at equally spaced step counts.  ``eig`` may supply a
    precomputed eigendecomposition ``(values, vectors)`` of ``op``.
    """
    if eig is None or backend != "eigen":
        H = op.dense() if isinstance(op, FullOperator) else np.asarray(op, dtype=float)
    n_steps = max(1, int(round(T / dt)))
    dt = T / n_steps
    psi0 = np.asarray(psi0, dtype=complex)
    marks = sorted({int(round(k * n_steps / samples)) for k in range(1, samples + 1)}) if samples else []
    times, states = [], []
    if backend == "eigen":
        lam, V = np.linalg.eigh(symmetrize(H)) if eig is None else eig
        z = 0.5j * dt * (lam - shift)
        factor = (1.0 - z) / (1.0 + z)
        factor = factor.reshape((-1,) + (1,) * (psi0.ndim - 1))
        unit = float(np.max(np.abs(np.abs(factor) - 1.0)))
        coef = V.T @ psi0
        if eig is not None and np.linalg.norm(V @ coef - psi0) > 1e-10 * max(np.linalg.norm(psi0), 1e-300):
            raise ValueError("supplied eigenvectors do not span the initial state")
        for k in marks:
            times.append(k * dt)
            states.append(np.exp(-1j * shift * k * dt) * (V @ (factor**k * coef)))
        final = np.exp(-1j * shift * T) * (V @ (factor**n_steps * coef))
    elif backend == "lu":
        n = H.shape[0]
        Hs = H - shift * np.eye(n)
        lu = sla.lu_factor(np.eye(n) + 0.5j * dt * Hs)
        B = np.eye(n) - 0.5j * dt * Hs
        psi = psi0.copy()
        norm0 = np.linalg.norm(psi0)
        unit = 0.0
        for k in range(1, n_steps + 1):
            nxt = sla.lu_solve(lu, B @ psi)
            unit = max(unit, abs(np.linalg.norm(nxt) - np.linalg.norm(psi)) / max(norm0, 1e-300))
            psi = nxt
            if k in marks:
                times.append(k * dt)
                states.append(np.exp(-1j * shift * k * dt) * psi)
        final = np.exp(-1j * shift * T) * psi
    else:
        raise ValueError(f"unknown propagation backend {backend!r}")
    if unit > 1e-12:
        raise ConvergenceError(f"Cayley step lost unitarity ({unit:.2e})")
    return Propagation(np.array(times), np.array(states), final, unit)
