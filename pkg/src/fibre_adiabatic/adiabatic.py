"""Berry one-form, adiabatic potential and the adiabatic operator ``H_a``.

With the positive ground state ``phi_0`` as trivialising section, a base
function ``psi`` corresponds to ``psi phi_0`` and

    P_0 H P_0  =  -eps^2 d^2/dx^2 + lambda_0 + eps P_0 H_1 P_0 + eps^2 V_a,
    V_a        =  -(omega^B)' + int |X* phi_0|^2,
    omega^B    =  <phi_0, X* phi_0>.

All fibre integrals are evaluated in the fibre basis from the band
eigenvectors and their analytic ``x``-derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fibre import FibreBand, band_derivative
from .geometry import WARPED, ModelGeometry, UnsupportedKindError
from .linalg import symmetrize

QUADRATURE = "general-quadrature"
CLOSED = "closed-fibre-formula"

ADIABATIC = "adiabatic"
ADIABATIC_M = "adiabatic+M"


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BerryData:
    x: np.ndarray
    omega: np.ndarray
    V_a: np.ndarray
    provenance: str


@dataclass(frozen=True)
class _BandGeometry:
    """Per-node fibre averages of the band and its horizontal derivative."""

    omega: np.ndarray
    d_omega: np.ndarray
    energy: np.ndarray


def _band_geometry(band: FibreBand, model: ModelGeometry) -> _BandGeometry:
    x = band.nodes
    _, r1, r2 = model.density_jet(x)
    rho = model.density_jet(x)[0]
    dlog, ddlog = r1 / rho, r2 / rho - (r1 / rho) ** 2
    c, dc = model.shift_jet(x)
    G, Z2 = band.basis.shift_matrix, band.basis.shift_square
    w = band.phi
    _, dw = band_derivative(model, band)
    wGw = np.einsum("ni,ij,nj->n", w, G, w)
    dwGw = np.einsum("ni,ij,nj->n", dw, G + G.T, w)
    omega = -0.5 * dlog - c * wGw
    d_omega = -0.5 * ddlog - dc * wGw - c * dwGw
    # X* phi_0 in the half-density frame: u = w' - (log rho)'/2 w - c z d_z w
    u = dw - 0.5 * dlog[:, None] * w
    energy = (
        np.einsum("ni,ni->n", u, u)
        - 2.0 * c * np.einsum("ni,ij,nj->n", u, G, w)
        + c**2 * np.einsum("ni,ij,nj->n", w, Z2, w)
    )
    return _BandGeometry(omega, d_omega, energy)


def _check_grid(band: FibreBand, model: ModelGeometry) -> None:
    if band.n_nodes != model.base.n_x:
        raise GridMismatchError(f"band has {band.n_nodes} nodes, base grid has {model.base.n_x}")


def berry_one_form(band: FibreBand, model: ModelGeometry) -> np.ndarray:
    """Coefficient ``omega^B(x)`` of the Berry one-form on ``d/dx``."""
    _check_grid(band, model)
    return _band_geometry(band, model).omega


def closed_fibre_potential(model: ModelGeometry, x=None) -> tuple[np.ndarray, np.ndarray]:
    """``(omega^B, V_a)`` of a fibre without boundary from the volume profile alone."""
    if model.kind != WARPED:
        raise UnsupportedKindError("the closed-fibre formula needs a fibre without boundary")
    x = model.base.nodes if x is None else np.asarray(x, dtype=float)
    l, l1, l2 = model.width_jet(x)
    d1 = l1 / l
    d2 = l2 / l - d1**2
    return -0.5 * d1, 0.5 * d2 + 0.25 * d1**2


def adiabatic_potential(band: FibreBand, model: ModelGeometry, method: str = QUADRATURE) -> np.ndarray:
    """Born-Huang potential ``V_a`` on the base nodes."""
    _check_grid(band, model)
    if method == CLOSED:
        return closed_fibre_potential(model, band.nodes)[1]
    if method != QUADRATURE:
        raise ValueError(f"unknown method {method!r}")
    geo = _band_geometry(band, model)
    return geo.energy - geo.d_omega


def berry_data(band: FibreBand, model: ModelGeometry, method: str | None = None) -> BerryData:
    """``omega^B`` and ``V_a``; warped models default to the closed-fibre formula."""
    _check_grid(band, model)
    if method is None:
        method = CLOSED if model.kind == WARPED else QUADRATURE
    if method == CLOSED:
        omega, V_a = closed_fibre_potential(model, band.nodes)
    else:
        geo = _band_geometry(band, model)
        omega, V_a = geo.omega, geo.energy - geo.d_omega
    return BerryData(band.nodes, omega, V_a, method)


def project_h1(model: ModelGeometry, band: FibreBand, berry: BerryData | None = None) -> np.ndarray:
    """Base matrix of ``P_0 H_1 P_0`` in the ``phi_0`` trivialisation.

    ``-eps^2 d_x s d_x + eps^2 (s V_a - s' omega^B) + eps v``, with the
    second-order part in the same doubled-grid form as the base Laplacian.
    """
    _check_grid(band, model)
    n = model.base.n_x
    if model.h1 is None:
        return np.zeros((n, n))
    if berry is None:
        berry = berry_data(band, model, QUADRATURE)
    base = model.base
    s_f = model.h1.s(base.fine_nodes)
    s, s1, _ = model.h1.s.jet(base.nodes)
    v = model.h1.v(base.nodes)
    eps = model.eps
    K = symmetrize(base.weighted_laplacian(s_f))
    K += np.diag(s * berry.V_a - s1 * berry.omega)
    return eps**2 * K + eps * np.diag(v)


@dataclass(frozen=True)
class EffectiveOperator:
    matrix: np.ndarray
    order: str
    eps: float
    offset: float = 0.0

    @property
    def shifted(self) -> bool:
        return self.offset != 0.0

    def eigenvalues(self, absolute: bool = True) -> np.ndarray:
        vals = np.linalg.eigvalsh(self.matrix)
        return vals + self.offset if absolute else vals

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        vals, vecs = np.linalg.eigh(self.matrix)
        return vals + self.offset, vecs


def assemble_adiabatic(
    model: ModelGeometry,
    band: FibreBand,
    berry: BerryData,
    h1_proj: np.ndarray | None = None,
    correction=None,
    *,
    shift: float | None = None,
) -> EffectiveOperator:
    """``H_a = eps^2 L + lambda_0 + eps P_0 H_1 P_0 + eps^2 V_a`` (``+ M``).

    ``shift`` subtracts a constant (typically ``Lambda_0``) and records it as
    the operator's offset so absolute eigenvalues stay recoverable.
    """
    n = model.base.n_x
    _check_grid(band, model)
    if berry.V_a.shape != (n,):
        raise GridMismatchError("Berry data and base grid differ")
    eps = model.eps
    H = eps**2 * model.base.laplacian + np.diag(band.lam + eps**2 * berry.V_a)
    if h1_proj is not None:
        if h1_proj.shape != (n, n):
            raise GridMismatchError("projected H1 and base grid differ")
        H = H + eps * h1_proj
    order = ADIABATIC
    if correction is not None:
        M = getattr(correction, "M_base", correction)
        if M.shape != (n, n):
            raise GridMismatchError("correction and base grid differ")
        H = H + M
        order = ADIABATIC_M
    offset = 0.0
    if shift:
        H = H - shift * np.eye(n)
        offset = float(shift)
    return EffectiveOperator(symmetrize(H), order, eps, offset)
