"""Model fibre bundles over a flat base circle.

Two families are supported:

* ``strip``: the Dirichlet strip ``{0 <= y <= a(x)}`` with ``a = 1 + h``,
  trivialised by ``z = y / a(x)``;
* ``warped``: a circle fibre of length ``l(x)`` over the base circle, with
  fibre coordinate ``theta`` in ``[0, 2 pi)``.

Both are described through the same handful of per-point quantities: the
fibre volume density ``rho`` (``a`` or ``l / 2 pi``), the fibre kinetic scale
``kappa`` (``a**-2`` or ``(2 pi / l)**2``) and the vertical correction
coefficient ``c`` of the horizontal lift, ``X* = d/dx - c(x) z d/dz``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .profiles import Profile, as_profile

log = logging.getLogger(__name__)

STRIP = "strip"
WARPED = "warped"
KINDS = (STRIP, WARPED)


class ModelError(ValueError):
    """Invalid model parameters."""


class UnsupportedKindError(ModelError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BaseCircle:
    """Uniform grid of ``n_x`` points on a circle of circumference ``length``.

    Horizontal quadratic forms are evaluated on a doubled grid: ``grad`` maps
    nodal values to exact derivatives of the trigonometric interpolant at the
    ``2 n_x`` fine nodes, ``interp`` maps them to the interpolant's values.
    The Nyquist mode is split symmetrically, so ``laplacian`` is positive
    definite off the constants.
    """

    length: float = 2 * math.pi
    n_x: int = 64

    def __post_init__(self):
        if not self.length > 0:
            raise ModelError(f"base circumference must be positive, got {self.length}")
        if self.n_x < 16 or self.n_x % 2:
            raise ModelError(f"n_x must be even and >= 16, got {self.n_x}")

    @cached_property
    def nodes(self) -> np.ndarray:
        return _frozen(np.arange(self.n_x) * (self.length / self.n_x))

    @cached_property
    def fine_nodes(self) -> np.ndarray:
        return _frozen(np.arange(2 * self.n_x) * (self.length / (2 * self.n_x)))

    @property
    def spacing(self) -> float:
        return self.length / self.n_x

    def wavenumbers(self) -> np.ndarray:
        return np.fft.fftfreq(self.n_x, 1.0 / self.n_x) * (2 * math.pi / self.length)

    def _padded_spectrum(self) -> np.ndarray:
        n = self.n_x
        half = n // 2
        F = np.fft.fft(np.eye(n), axis=0)
        Fp = np.zeros((2 * n, n), dtype=complex)
        Fp[:half] = F[:half]
        Fp[-(half - 1):] = F[-(half - 1):]
        Fp[half] = 0.5 * F[half]
        Fp[-half] = 0.5 * F[half]
        return Fp

    @cached_property
    def interp(self) -> np.ndarray:
        E = np.real(np.fft.ifft(self._padded_spectrum(), axis=0)) * 2
        return _frozen(E)

    @cached_property
    def grad(self) -> np.ndarray:
        k = np.fft.fftfreq(2 * self.n_x, 1.0 / (2 * self.n_x)) * (2 * math.pi / self.length)
        D = np.real(np.fft.ifft(1j * k[:, None] * self._padded_spectrum(), axis=0)) * 2
        return _frozen(D)

    @cached_property
    def laplacian(self) -> np.ndarray:
        """Symmetric matrix of ``-d^2/dx^2``: ``0.5 * grad.T @ grad``."""
        D = self.grad
        L = 0.5 * (D.T @ D)
        return _frozen(0.5 * (L + L.T))

    @cached_property
    def derivative(self) -> np.ndarray:
        """Fourier differentiation on the nodes (Nyquist mode dropped)."""
        n = self.n_x
        k = self.wavenumbers()
        k[n // 2] = 0.0
        D = np.real(np.fft.ifft(1j * k[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0))
        return _frozen(D)

    def weighted_laplacian(self, weight_fine: np.ndarray) -> np.ndarray:
        """``0.5 * grad.T diag(w) grad`` for a weight sampled on the fine nodes."""
        D = self.grad
        return 0.5 * (D.T @ (weight_fine[:, None] * D))


@dataclass(frozen=True)
class SeparablePotential:
    """``V(x, z) = base(x) * fibre(z)`` with ``z`` the trivialised fibre coordinate."""

    base: Profile
    fibre: Profile

    @classmethod
    def make(cls, base, fibre) -> SeparablePotential:
        return cls(as_profile(base, "x"), as_profile(fibre, "z"))


@dataclass(frozen=True)
class H1Spec:
    """Perturbation ``H1 = -eps^2 d_x* s(x) d_x* + eps v(x)``.

    In the full operator it enters as ``eps * H1``, i.e. the horizontal form
    gains a factor ``1 + eps s`` and the potential gains ``eps^2 v``.
    """

    s: Profile
    v: Profile

    @classmethod
    def make(cls, s=0.0, v=0.0) -> H1Spec:
        s, v = as_profile(s, "x"), as_profile(v, "x")
        if s.var != "x" or v.var != "x":
            raise ModelError("H1 coefficients must depend on the base coordinate only")
        return cls(s, v)


@dataclass(frozen=True)
class ModelGeometry:
    kind: str
    base: BaseCircle
    profile: Profile
    eps: float
    potential: SeparablePotential | None = None
    h1: H1Spec | None = None
    _check_grid: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if not (0.0 < self.eps < 1.0):
            raise ModelError(f"eps must lie in (0, 1), got {self.eps}")
        object.__setattr__(
            self, "_check_grid", np.linspace(0.0, self.base.length, 8 * self.base.n_x + 1)
        )

    # per-point geometric data -------------------------------------------------

    def width_jet(self, x):
        """``a = 1 + h`` for the strip, the fibre length ``l`` for the warped model."""
        v, d1, d2 = self.profile.jet(x)
        if self.kind == STRIP:
            return 1.0 + v, d1, d2
        return v, d1, d2

    def density_jet(self, x):
        """Fibre volume density ``rho`` with two derivatives."""
        v, d1, d2 = self.width_jet(x)
        if self.kind == STRIP:
            return v, d1, d2
        s = 1.0 / (2 * math.pi)
        return s * v, s * d1, s * d2

    def kinetic_scale_jet(self, x):
        """``kappa`` in ``H_F = kappa K + V`` and its first derivative."""
        w, w1, _ = self.width_jet(x)
        if self.kind == STRIP:
            return w**-2, -2.0 * w1 * w**-3
        r = 2 * math.pi / w
        return r**2, -2.0 * r**2 * w1 / w

    def shift_jet(self, x):
        """Coefficient ``c`` of the vertical correction and its derivative."""
        x = np.asarray(x, dtype=float)
        if self.kind != STRIP:
            z = np.zeros_like(x)
            return z, z.copy()
        a, a1, a2 = self.width_jet(x)
        return a1 / a, a2 / a - (a1 / a) ** 2

    def potential_jet(self, x):
        """Base factor of the separable potential (value, derivative)."""
        x = np.asarray(x, dtype=float)
        if self.potential is None:
            z = np.zeros_like(x)
            return z, z.copy()
        v, d1, _ = self.potential.base.jet(x)
        return v, d1

    @property
    def min_width(self) -> float:
        return float(np.min(self.width_jet(self._check_grid)[0]))

    def fingerprint(self) -> str:
        parts = [
            self.kind,
            repr(self.base.length),
            str(self.base.n_x),
            self.profile.canonical,
            repr(self.eps),
            "" if self.potential is None else self.potential.base.canonical + "|" + self.potential.fibre.canonical,
            "" if self.h1 is None else self.h1.s.canonical + "|" + self.h1.v.canonical,
        ]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]

    def with_eps(self, eps: float) -> ModelGeometry:
        return ModelGeometry(self.kind, self.base, self.profile, eps, self.potential, self.h1)

    def with_base(self, base: BaseCircle) -> ModelGeometry:
        return ModelGeometry(self.kind, base, self.profile, self.eps, self.potential, self.h1)


def _check_periodic(profile: Profile, length: float, what: str) -> None:
    jet = profile.jet(np.array([0.0, length]))
    scale = max(1.0, float(np.max(np.abs(jet[0]))))
    for order, (p, q) in enumerate(jet):
        if abs(p - q) > 1e-10 * scale:
            log.warning("%s %r is not smooth-periodic on the base (order %d mismatch %.2e)",
                        what, profile.canonical, order, abs(p - q))
            return


def build_strip_model(profile, base: BaseCircle, eps: float, potential=None, h1=None) -> ModelGeometry:
    """Dirichlet strip of width ``a = 1 + h`` where ``h`` is ``profile``."""
    h = as_profile(profile, "x")
    model = ModelGeometry(STRIP, base, h, float(eps), potential, h1)
    a_min = model.min_width
    if not a_min > 0:
        raise ModelError(f"profile not positive: strip width 1 + h reaches {a_min:.6g}")
    _check_periodic(h, base.length, "strip profile")
    return model


def build_warped_model(length_profile, base: BaseCircle, eps: float, potential=None, h1=None) -> ModelGeometry:
    """Circle fibre of length ``l(x)`` given by ``length_profile``."""
    ell = as_profile(length_profile, "x")
    if potential is not None and not potential.fibre.is_constant(np.linspace(0, 2 * math.pi, 64)):
        raise ModelError("warped model requires a potential independent of the fibre coordinate")
    model = ModelGeometry(WARPED, base, ell, float(eps), potential, h1)
    l_min = model.min_width
    if not l_min > 0:
        raise ModelError(f"profile not positive: fibre length reaches {l_min:.6g}")
    _check_periodic(ell, base.length, "fibre-length profile")
    return model


def shift_field_coefficient(model: ModelGeometry, x) -> np.ndarray:
    """``c(x) = a'/a`` so that ``d_x* - Phi^* d_x = -c(x) y d_y`` on the strip."""
    if model.kind != STRIP:
        raise UnsupportedKindError("the vertical correction field is defined for strip models only")
    return model.shift_jet(x)[0]


def log_volume_derivative(model: ModelGeometry, x) -> np.ndarray:
    """``(log Vol F_x)'``: ``a'/a`` on the strip, ``l'/l`` on the warped model."""
    w, w1, _ = model.width_jet(x)
    return w1 / w
