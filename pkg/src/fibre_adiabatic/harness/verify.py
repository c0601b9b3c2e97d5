"""Named invariant suite behind the ``verify`` subcommand."""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np

from ..adiabatic import assemble_adiabatic, berry_data, berry_one_form, closed_fibre_potential
from ..fibre import (
    FibreBasis,
    check_gap,
    default_basis,
    fibre_matrices,
    reduced_resolvents,
    solve_band,
)
from ..geometry import (
    STRIP,
    WARPED,
    BaseCircle,
    ModelGeometry,
    build_strip_model,
    build_warped_model,
    log_volume_derivative,
    shift_field_coefficient,
)
from ..linalg import op_norm
from ..profiles import Profile
from ..reference import assemble_full, lowest_eigenpairs, propagate
from ..superadiabatic import (
    build_projection_set,
    commutator_window_norm,
    correction_m,
    fibre_projector_full,
)
from .config import ExperimentConfig, ModelConfig
from .rates import FLOOR_FACTOR, fit_rate
from .report import Check, SpectralReport, at_least, at_most

log = logging.getLogger(__name__)

STRIP_PROFILE = "0.25 + 0.1*cos(x)"
WARPED_PROFILE = "2*pi*(1 + 0.2*cos(x))"
FD_STEP = 1e-5
CONTINUITY_POTENTIAL = ("2*cos(x)", "z")


class _Context:
    """Models shared by the invariant checks (configured model plus canonical companions)."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        num = config.numerics
        self.n_x, self.n_z = num.verify_n_x, num.verify_n_z
        self.eps = config.sweep.epsilon[0]
        m = config.model
        self.model = self.build(m, self.eps, self.n_x)
        strip_cfg = m if m.kind == STRIP else ModelConfig(STRIP, STRIP_PROFILE)
        warped_cfg = m if m.kind == WARPED else ModelConfig(WARPED, WARPED_PROFILE)
        self.strip_config = strip_cfg
        self.strip = self.build(strip_cfg, self.eps, self.n_x)
        self.warped = self.build(warped_cfg, self.eps, self.n_x)
        self.flat = self.build(ModelConfig(STRIP, "0"), self.eps, self.n_x)
        self.bare_strip = self.build(replace(strip_cfg, potential=None, h1=None), self.eps, self.n_x)

    def build(self, m: ModelConfig, eps: float, n_x: int) -> ModelGeometry:
        base = BaseCircle(m.length, n_x)
        builder = build_strip_model if m.kind == STRIP else build_warped_model
        return builder(m.profile, base, eps, m.potential_spec(), m.h1_spec())

    def basis(self, model: ModelGeometry, n_z: int | None = None) -> FibreBasis:
        kind = self.config.numerics.basis
        n_z = n_z or self.n_z
        if kind is None or (kind == "fourier") != (model.kind == WARPED):
            return default_basis(model, n_z)
        return FibreBasis(kind, n_z)

    def band(self, model: ModelGeometry, k: int = 0):
        return solve_band(model, k, self.basis(model))


# geometry ----------------------------------------------------------------------


def _profile_derivatives(ctx: _Context) -> list[Check]:
    m = ctx.config.model
    sources = [(m.profile, "x")]
    if m.potential:
        sources += [(m.potential[0], "x"), (m.potential[1], "z")]
    if m.h1:
        sources += [(m.h1[0], "x"), (m.h1[1], "x")]
    x = np.linspace(0.0, m.length, 64, endpoint=False) + 0.1
    worst = 0.0
    for src, var in sources:
        p = Profile(src, var)
        f, d1, d2 = p(x), p.derivative(x, 1), p.derivative(x, 2)
        fd1 = (p(x + FD_STEP) - p(x - FD_STEP)) / (2 * FD_STEP)
        fd2 = (p.derivative(x + FD_STEP) - p.derivative(x - FD_STEP)) / (2 * FD_STEP)
        scale = max(np.max(np.abs(f)), np.max(np.abs(d1)), np.max(np.abs(d2)), 1e-300)
        worst = max(worst, np.max(np.abs(fd1 - d1)) / scale, np.max(np.abs(fd2 - d2)) / scale)
    return [at_most("profile derivatives match central differences", worst, 1e-6)]


def _shift_equals_log_volume(ctx: _Context) -> list[Check]:
    x = ctx.strip.base.nodes
    diff = np.max(np.abs(shift_field_coefficient(ctx.strip, x) - log_volume_derivative(ctx.strip, x)))
    return [at_most("strip shift coefficient equals log-volume derivative", diff, 1e-15)]


def _determinism(ctx: _Context) -> list[Check]:
    again = ctx.build(ctx.config.model, ctx.eps, ctx.n_x)
    x = ctx.model.base.nodes
    same = again.fingerprint() == ctx.model.fingerprint()
    for a, b in zip(again.width_jet(x), ctx.model.width_jet(x)):
        same = same and np.array_equal(a, b)
    return [at_most("model construction is bit-identical", 0.0 if same else 1.0, 0.0)]


# fibre -------------------------------------------------------------------------


def _fibre_symmetry(ctx: _Context) -> list[Check]:
    worst = 0.0
    for model in (ctx.model, ctx.warped):
        F = fibre_matrices(model, ctx.basis(model))
        worst = max(worst, float(np.max(np.abs(F - F.transpose(0, 2, 1)))))
    return [at_most("fibre matrices are exactly symmetric", worst, 0.0)]


def _scaling_law(ctx: _Context) -> list[Check]:
    model = ctx.bare_strip
    x = model.base.nodes
    a = model.width_jet(x)[0]
    worst = 0.0
    for k in (0, 1, 2):
        lam = ctx.band(model, k).lam
        worst = max(worst, float(np.max(np.abs(lam - (k + 1) ** 2 * math.pi**2 / a**2))))
    return [at_most("bare strip bands follow (k+1)^2 pi^2 / a^2", worst, 1e-10)]


def _positivity(ctx: _Context) -> list[Check]:
    band = ctx.band(ctx.model)
    z = np.linspace(0.0, band.basis.period, 201)
    vals = band.basis.evaluate(band.phi, z)
    peak = float(np.max(np.abs(vals)))
    return [at_least("ground state is nonnegative", float(np.min(vals)) / peak, -1e-12)]


def _resolvent_identity(ctx: _Context) -> list[Check]:
    model = ctx.model
    basis = ctx.basis(model)
    band = solve_band(model, 0, basis)
    F = fibre_matrices(model, basis)
    R = reduced_resolvents(band)
    n = basis.n_z
    worst = 0.0
    for i in range(band.n_nodes):
        phi = band.phi[i]
        lhs = (F[i] - band.lam[i] * np.eye(n)) @ R[i]
        worst = max(worst, op_norm(lhs - (np.eye(n) - np.outer(phi, phi))))
    return [at_most("(H_F - lambda_0) R_F = 1 - P_0 on every fibre", worst, 1e-10)]


def _band_continuity(ctx: _Context) -> list[Check]:
    m = ctx.strip_config
    if m.potential is None:
        m = replace(m, potential=CONTINUITY_POTENTIAL)
    ratios = []
    for k in (0, 1):
        consts = []
        for n_x in (ctx.n_x, 2 * ctx.n_x):
            model = ctx.build(m, ctx.eps, n_x)
            band = solve_band(model, k, ctx.basis(model))
            steps = np.linalg.norm(np.diff(np.vstack([band.phi, band.phi[:1]]), axis=0), axis=1)
            consts.append(float(np.max(steps)) / model.base.spacing)
        ratios.append(consts[1] / consts[0])
    return [at_most("band eigenvectors are Lipschitz uniformly in n_x (constant ratio under doubling)",
                    max(ratios), 1.5)]


def _spectral_gap(ctx: _Context) -> list[Check]:
    cert = check_gap(ctx.band(ctx.model), ctx.config.numerics.gap_tol)
    return [at_least("spectral gap delta = inf (lambda_1 - lambda_0)", cert.delta, ctx.config.numerics.gap_tol)]


# adiabatic ---------------------------------------------------------------------


def _omega_real(ctx: _Context) -> list[Check]:
    worst = 0.0
    for model in (ctx.model, ctx.warped):
        omega = berry_one_form(ctx.band(model), model)
        worst = max(worst, 0.0 if (np.isrealobj(omega) and np.all(np.isfinite(omega))) else 1.0)
    return [at_most("Berry one-form is real", worst, 0.0)]


def _va_nonnegative(ctx: _Context) -> list[Check]:
    bd = berry_data(ctx.band(ctx.strip), ctx.strip)
    return [at_least("strip adiabatic potential is nonnegative", float(np.min(bd.V_a)), -1e-12)]


def _flat_band(ctx: _Context) -> list[Check]:
    model = ctx.flat
    band = ctx.band(model)
    Ha = assemble_adiabatic(model, band, berry_data(band, model)).matrix
    n = model.base.n_x
    target = model.eps**2 * model.base.laplacian + math.pi**2 * np.eye(n)
    return [at_most("flat strip: H_a = eps^2 L + pi^2", float(np.max(np.abs(Ha - target))), 1e-12)]


def _warped_exactness(ctx: _Context) -> list[Check]:
    worst, quad = 0.0, 0.0
    for eps in ctx.config.sweep.epsilon[:3]:
        model = ctx.warped.with_eps(eps)
        basis = ctx.basis(model)
        band = solve_band(model, 0, basis)
        Ha = assemble_adiabatic(model, band, berry_data(band, model))
        H = assemble_full(model, basis).dense()
        idx = np.arange(model.base.n_x) * basis.n_z
        sector = np.linalg.eigvalsh(H[np.ix_(idx, idx)])
        resolved = model.base.n_x // 2
        worst = max(worst, float(np.max(np.abs(sector - Ha.eigenvalues())[:resolved])))
        closed = closed_fibre_potential(model)[1]
        quad = max(quad, float(np.max(np.abs(berry_data(band, model, "general-quadrature").V_a - closed))))
    return [
        at_most("warped: spectrum(H_a) equals the fibre-constant sector of H (resolved half)", worst, 1e-9),
        at_most("warped: quadrature V_a equals the closed fibre formula", quad, 1e-8),
    ]


def _matrix_symmetry(ctx: _Context) -> list[Check]:
    model = ctx.model
    basis = ctx.basis(model)
    band = solve_band(model, 0, basis)
    Ha = assemble_adiabatic(model, band, berry_data(band, model)).matrix
    H = assemble_full(model, basis).dense()
    M = correction_m(band, H).M_base
    worst = max(float(np.max(np.abs(A - A.T))) / max(float(np.max(np.abs(A))), 1.0) for A in (Ha, H, M))
    return [at_most("assembled matrices are symmetric", worst, 1e-12)]


# superadiabatic ----------------------------------------------------------------


def _p0_identity(ctx: _Context) -> list[Check]:
    band = ctx.band(ctx.model)
    P0 = fibre_projector_full(band)
    rng = np.random.default_rng(7)
    A = rng.standard_normal(P0.shape)
    C = A @ P0 - P0 @ A
    return [at_most("P0 [A, P0] P0 = 0", op_norm(P0 @ C @ P0), 1e-12)]


def _projection_invariants(ctx: _Context) -> list[Check]:
    model = ctx.model
    basis = ctx.basis(model)
    band = solve_band(model, 0, basis)
    H = assemble_full(model, basis)
    ps = build_projection_set(H, band, ctx.config.sweep.N)
    inv = ps.invariants()
    M = correction_m(band, H, R_F=ps.R_F)
    return [
        at_most("correction M is negative semidefinite", M.max_eigenvalue, 1e-12),
        at_most("rank P_eps = n_x", abs(inv["rank_P_eps"] - model.base.n_x), 1e-8),
        at_most("P_eps is idempotent", inv["P_eps_idempotency"], 1e-12),
        at_most("U_eps is orthogonal", inv["unitarity"], 1e-10),
        at_most("U_eps maps range P0 into range P_eps", inv["intertwining"], 1e-10),
    ]


def _warped_collapse(ctx: _Context) -> list[Check]:
    model = ctx.warped
    basis = ctx.basis(model)
    band = solve_band(model, 0, basis)
    H = assemble_full(model, basis)
    ps = build_projection_set(H, band, ctx.config.sweep.N)
    inv = ps.invariants()
    M = correction_m(band, H, R_F=ps.R_F)
    P0 = fibre_projector_full(band)
    comm = op_norm(H.dense() @ P0 - P0 @ H.dense())
    return [
        at_most("warped: [H, P0] = 0", comm, 1e-12),
        at_most("warped: P_eps = P0", inv["P_eps_minus_P0"], 1e-11),
        at_most("warped: U_eps = I", inv["U_minus_I"], 1e-11),
        at_most("warped: M = 0", float(np.max(np.abs(M.M_base))), 1e-11),
    ]


def _commutator_hierarchy(ctx: _Context) -> list[Check]:
    num = ctx.config.numerics
    n_x, n_z = num.dynamics_n_x, num.dynamics_n_z
    eps_list = [e for e in ctx.config.sweep.epsilon if e >= 0.1 - 1e-12][:3]
    if len(eps_list) < 3:
        eps_list = [0.2, 0.141, 0.1]
    pts0, pts1 = [], []
    scale = 0.0
    for eps in eps_list:
        model = ctx.build(ctx.config.model, eps, n_x)
        basis = ctx.basis(model, n_z)
        band = solve_band(model, 0, basis)
        cert = check_gap(band, num.gap_tol)
        H = assemble_full(model, basis)
        scale = max(scale, float(np.max(np.linalg.eigvalsh(H.fibre)[:, -1])))
        cutoff = ctx.config.sweep.window.resolve(cert.Lambda0, cert.Lambda1)
        pairs = lowest_eigenpairs(H, min(H.dim, 4 * n_x), tol=num.eig_tol, dense_limit=num.dense_limit)
        sel = pairs.values <= cutoff
        W, L = pairs.vectors[:, sel], pairs.values[sel]
        pts0.append((eps, commutator_window_norm(H, build_projection_set(H, band, 0).PN, W, L)))
        pts1.append((eps, commutator_window_norm(H, build_projection_set(H, band, 1).PN, W, L)))
    return [_slope_check("[H,P0] rho(H)", pts0, scale, 0.9), _slope_check("[H,P1] rho(H)", pts1, scale, 1.8)]


def _slope_check(label: str, pts, scale: float, bound: float) -> Check:
    """Rate check that passes outright when every value sits at the rounding floor."""
    floor = FLOOR_FACTOR * np.finfo(float).eps * scale
    if all(v <= floor for _, v in pts):
        return at_most(f"commutator {label} vanishes to rounding", max(v for _, v in pts), floor)
    return at_least(f"commutator {label} slope (coarse sweep)", fit_rate(pts, scale).slope, bound)


# reference ---------------------------------------------------------------------


def _operator_symmetry(ctx: _Context) -> list[Check]:
    H = assemble_full(ctx.model, ctx.basis(ctx.model)).dense()
    return [at_most("full operator is exactly symmetric", float(np.max(np.abs(H - H.T))), 0.0)]


def _separable_exactness(ctx: _Context) -> list[Check]:
    eps = 0.1
    model = ctx.flat.with_eps(eps)
    H = assemble_full(model, ctx.basis(model))
    vals = lowest_eigenpairs(H, 20, dense_limit=ctx.config.numerics.dense_limit).values
    m = np.arange(-40, 41)
    k = np.arange(1, 6)
    exact = np.sort((eps**2 * m[:, None] ** 2 + (k[None, :] * math.pi) ** 2).ravel())[:20]
    return [at_most("separable strip spectrum is exact", float(np.max(np.abs(vals - exact) / exact)), 1e-10)]


def _self_convergence(ctx: _Context) -> list[Check]:
    num = ctx.config.numerics
    k = num.guard_modes
    vals = []
    for scale in (1, 2):
        model = ctx.build(ctx.config.model, ctx.eps, scale * ctx.n_x)
        H = assemble_full(model, ctx.basis(model, scale * ctx.n_z))
        vals.append(lowest_eigenpairs(H, k, tol=num.eig_tol, dense_limit=0).values)
    change = float(np.max(np.abs(vals[0] - vals[1])))
    return [at_most("lowest eigenvalues stable under resolution doubling", change, num.guard_tol)]


def _propagator_unitarity(ctx: _Context) -> list[Check]:
    H = assemble_full(ctx.model, ctx.basis(ctx.model)).dense()
    rng = np.random.default_rng(3)
    psi = rng.standard_normal(H.shape[0])
    psi /= np.linalg.norm(psi)
    worst = 0.0
    for backend in ("eigen", "lu"):
        prop = propagate(H, psi, 0.05, 0.01, shift=float(np.min(np.diag(H))), backend=backend)
        worst = max(worst, prop.unitarity)
    return [at_most("Cayley propagator is unitary per step", worst, 1e-12)]


def _perp_block_bottom(ctx: _Context) -> list[Check]:
    deficits = []
    for eps in ctx.config.sweep.epsilon[:3]:
        model = ctx.model.with_eps(eps)
        basis = ctx.basis(model)
        band = solve_band(model, 0, basis)
        cert = check_gap(band)
        H = assemble_full(model, basis).dense()
        P0 = fibre_projector_full(band)
        w, V = np.linalg.eigh(np.eye(H.shape[0]) - P0)
        Q = V[:, w > 0.5]
        bottom = float(np.linalg.eigvalsh(Q.T @ H @ Q)[0])
        deficits.append((eps, cert.Lambda1 - bottom))
    C = max(0.0, *(d / e for e, d in deficits[:2]))
    e3, d3 = deficits[-1]
    return [at_most("P0-perp block bottom >= Lambda1 - C eps", d3 - C * e3, 1e-12)]


INVARIANTS = (
    ("geometry", "profile_derivatives", _profile_derivatives),
    ("geometry", "shift_equals_log_volume", _shift_equals_log_volume),
    ("geometry", "deterministic_models", _determinism),
    ("fibre", "fibre_symmetry", _fibre_symmetry),
    ("fibre", "scaling_law", _scaling_law),
    ("fibre", "ground_state_positivity", _positivity),
    ("fibre", "reduced_resolvent_identity", _resolvent_identity),
    ("fibre", "band_continuity", _band_continuity),
    ("fibre", "spectral_gap", _spectral_gap),
    ("adiabatic", "berry_form_real", _omega_real),
    ("adiabatic", "adiabatic_potential_nonnegative", _va_nonnegative),
    ("adiabatic", "flat_band_collapse", _flat_band),
    ("adiabatic", "warped_exactness", _warped_exactness),
    ("adiabatic", "matrix_symmetry", _matrix_symmetry),
    ("superadiabatic", "p0_commutator_identity", _p0_identity),
    ("superadiabatic", "projection_invariants", _projection_invariants),
    ("superadiabatic", "warped_collapse", _warped_collapse),
    ("superadiabatic", "commutator_hierarchy", _commutator_hierarchy),
    ("reference", "operator_symmetry", _operator_symmetry),
    ("reference", "separable_exactness", _separable_exactness),
    ("reference", "self_convergence", _self_convergence),
    ("reference", "propagator_unitarity", _propagator_unitarity),
    ("reference", "perp_block_bottom", _perp_block_bottom),
)


def run_verify(config: ExperimentConfig, only: tuple[str, ...] | None = None) -> SpectralReport:
    """Evaluate every named invariant; an exception counts as a failed check."""
    ctx = _Context(config)
    rows, checks = [], []
    for module, name, fn in INVARIANTS:
        if only is not None and name not in only:
            continue
        try:
            results = fn(ctx)
        except Exception as exc:
            log.error("invariant %s raised %s: %s", name, type(exc).__name__, exc)
            results = [Check(f"{name} raised {type(exc).__name__}: {exc}", math.nan, 0.0, False)]
        for c in results:
            checks.append(Check(f"{module}.{name}: {c.name}", c.value, c.threshold, c.passed))
            rows.append({"module": module, "invariant": name, "check": c.name, "value": c.value,
                         "threshold": str(c.threshold), "passed": c.passed})
        log.info("invariant %s done", name)
    rep = SpectralReport("verify", ["module", "invariant", "check", "value", "threshold", "passed"], rows,
                         checks=checks)
    rep.metadata.update({"model_hash": ctx.model.fingerprint(), "n_x": ctx.n_x, "n_z": ctx.n_z, "eps": ctx.eps})
    return rep
