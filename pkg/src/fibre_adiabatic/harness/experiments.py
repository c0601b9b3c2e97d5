"""Experiment orchestration: one function per CLI subcommand."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import __version__
from ..adiabatic import EffectiveOperator, assemble_adiabatic, berry_data, project_h1
from ..fibre import FibreBand, FibreBasis, GapCertificate, check_gap, default_basis, solve_band
from ..geometry import STRIP, BaseCircle, ModelGeometry, build_strip_model, build_warped_model
from ..reference import (
    FullOperator,
    assemble_full,
    eigenfunction_residual,
    eigenpairs_below,
    lowest_eigenpairs,
    pair_spectra,
    propagate,
    spectral_distance,
)
from ..superadiabatic import (
    CorrectionM,
    build_projection_set,
    commutator_window_norm,
    correction_m,
)
from .config import KINDS, ConfigError, ConfigIssue, EnergyCut, ExperimentConfig
from .rates import RateFit, fit_rate
from .report import GuardResult, SpectralReport, at_least, at_most, within, write_report

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A numerical failure inside an experiment; ``cause`` is the module error."""

    def __init__(self, kind: str, eps: float | None, cause: Exception):
        self.kind = kind
        self.eps = eps
        self.cause = cause
        where = f" at eps={eps:g}" if eps is not None else ""
        super().__init__(f"{kind}{where}: {type(cause).__name__}: {cause}")


class GuardError(RuntimeError):
    def __init__(self, guard: GuardResult):
        self.guard = guard
        super().__init__(
            f"self-convergence guard failed: eigenvalues moved by {guard.change:.3e} "
            f"(tolerance {guard.tolerance:g}) under doubling {guard.resolution} -> {guard.doubled}"
        )


# model setup -------------------------------------------------------------------


def build_model(config: ExperimentConfig, eps: float, n_x: int) -> ModelGeometry:
    m = config.model
    base = BaseCircle(m.length, n_x)
    builder = build_strip_model if m.kind == STRIP else build_warped_model
    return builder(m.profile, base, eps, m.potential_spec(), m.h1_spec())


def fibre_basis(config: ExperimentConfig, model: ModelGeometry, n_z: int) -> FibreBasis:
    kind = config.numerics.basis
    return default_basis(model, n_z) if kind is None else FibreBasis(kind, n_z)


@dataclass(frozen=True, eq=False)
class Setup:
    model: ModelGeometry
    basis: FibreBasis
    band: FibreBand
    cert: GapCertificate
    op: FullOperator

    def adiabatic(self, correction: CorrectionM | None = None, shift: bool = False) -> EffectiveOperator:
        bd = berry_data(self.band, self.model)
        h1 = project_h1(self.model, self.band, bd) if self.model.h1 is not None else None
        return assemble_adiabatic(self.model, self.band, bd, h1, correction,
                                  shift=self.cert.Lambda0 if shift else None)

    def cut(self, cut: EnergyCut) -> float:
        return cut.resolve(self.cert.Lambda0, self.cert.Lambda1)


def make_setup(config: ExperimentConfig, eps: float, n_x: int, n_z: int) -> Setup:
    model = build_model(config, eps, n_x)
    basis = fibre_basis(config, model, n_z)
    band = solve_band(model, 0, basis)
    cert = check_gap(band, config.numerics.gap_tol)
    op = assemble_full(model, basis, dim_cap=config.numerics.dim_cap)
    return Setup(model, basis, band, cert, op)


def _eig_kw(config: ExperimentConfig) -> dict:
    return {"tol": config.numerics.eig_tol, "dense_limit": config.numerics.dense_limit}


def window_pairs(setup: Setup, cutoff: float, config: ExperimentConfig, effective: EffectiveOperator | None = None):
    """Full eigenpairs up to ``cutoff`` (sized by the adiabatic spectrum)."""
    eff = effective or setup.adiabatic()
    estimate = int(np.sum(eff.eigenvalues() <= cutoff + config.sweep.margin)) + 8
    return eigenpairs_below(setup.op, cutoff, start=max(estimate, config.numerics.guard_modes), **_eig_kw(config))


@lru_cache(maxsize=32)
def _guard_cached(config: ExperimentConfig, eps: float, n_x: int, n_z: int) -> GuardResult:
    num = config.numerics
    k = num.guard_modes
    coarse = make_setup(config, eps, n_x, n_z)
    fine = make_setup(config, eps, 2 * n_x, 2 * n_z)
    a = lowest_eigenpairs(coarse.op, k, **_eig_kw(config)).values
    b = lowest_eigenpairs(fine.op, k, tol=num.eig_tol, dense_limit=0).values
    change = float(np.max(np.abs(a - b)))
    return GuardResult(eps, (n_x, n_z), (2 * n_x, 2 * n_z), change, num.guard_tol)


def self_convergence_guard(config: ExperimentConfig, eps: float, n_x: int, n_z: int) -> GuardResult:
    """Lowest eigenvalues at ``(n_x, n_z)`` versus ``(2 n_x, 2 n_z)``; raises on failure."""
    guard = _guard_cached(config, float(eps), n_x, n_z)
    if not guard.passed:
        raise GuardError(guard)
    return guard


def _metadata(config: ExperimentConfig, kind: str, n_x: int, n_z: int, model: ModelGeometry) -> dict:
    return {
        "experiment": kind,
        "model_hash": model.with_eps(config.sweep.epsilon[0]).fingerprint(),
        "model_kind": config.model.kind,
        "profile": config.model.profile,
        "epsilon": " ".join(f"{e:g}" for e in config.sweep.epsilon),
        "n_x": n_x,
        "n_z": n_z,
        "eig_tol": config.numerics.eig_tol,
        "guard_tol": config.numerics.guard_tol,
        "version": __version__,
    }


def _fit(points, scale: float = 1.0) -> RateFit:
    return fit_rate(points, scale)


def _check_window(setup: Setup, cutoff: float, kind: str) -> None:
    if cutoff >= setup.cert.Lambda1:
        raise ConfigError([ConfigIssue(None, "window",
                                       f"{kind}: energy cut-off {cutoff:.6g} is not below Lambda1 = "
                                       f"{setup.cert.Lambda1:.6g}")])


# experiments ------------------------------------------------------------------


def run_bands(config: ExperimentConfig) -> SpectralReport:
    num = config.numerics
    eps = config.sweep.epsilon[0]
    s = make_setup(config, eps, num.n_x, num.n_z)
    gaps = s.band.gaps()
    rows = [
        {"x": float(x), "lambda0": float(l0), "lambda1": float(l1), "delta": float(d)}
        for x, l0, l1, d in zip(s.band.nodes, s.band.eigvals[:, 0], s.band.eigvals[:, 1], gaps)
    ]
    rep = SpectralReport("bands", ["x", "lambda0", "lambda1", "delta"], rows,
                         metadata=_metadata(config, "bands", num.n_x, num.n_z, s.model))
    rep.metadata.update({"delta": s.cert.delta, "Lambda0": s.cert.Lambda0, "Lambda1": s.cert.Lambda1})
    return rep


def run_effective(config: ExperimentConfig) -> SpectralReport:
    num = config.numerics
    rep = None
    eig_rows = []
    for eps in config.sweep.epsilon:
        s = make_setup(config, eps, num.n_x, num.n_z)
        bd = berry_data(s.band, s.model)
        if rep is None:
            rows = [
                {"x": float(x), "lambda0": float(l), "omega": float(o), "V_a": float(v)}
                for x, l, o, v in zip(s.band.nodes, s.band.lam, bd.omega, bd.V_a)
            ]
            rep = SpectralReport("effective", ["x", "lambda0", "omega", "V_a"], rows,
                                 metadata=_metadata(config, "effective", num.n_x, num.n_z, s.model))
            rep.metadata["provenance"] = bd.provenance
        cutoff = s.cut(config.sweep.energy_window)
        vals = s.adiabatic().eigenvalues()
        eig_rows += [{"eps": eps, "index": i, "eigenvalue": float(v)} for i, v in enumerate(vals) if v <= cutoff]
    rep.tables["eigenvalues"] = (["eps", "index", "eigenvalue"], eig_rows)
    return rep


def run_full(config: ExperimentConfig) -> SpectralReport:
    num = config.numerics
    rows = []
    rep = None
    for eps in config.sweep.epsilon:
        s = make_setup(config, eps, num.n_x, num.n_z)
        cutoff = s.cut(config.sweep.energy_window)
        pairs = window_pairs(s, cutoff, config)
        rows += [{"eps": eps, "index": i, "eigenvalue": float(v), "residual": pairs.residual}
                 for i, v in enumerate(pairs.values) if v <= cutoff]
        if rep is None:
            rep = SpectralReport("full", ["eps", "index", "eigenvalue", "residual"],
                                 metadata=_metadata(config, "full", num.n_x, num.n_z, s.model))
    rep.rows = rows
    return rep


def run_projections(config: ExperimentConfig) -> SpectralReport:
    num, sw, acc = config.numerics, config.sweep, config.acceptance
    n_x, n_z = num.projection_n_x, num.projection_n_z
    cols = ["eps", "window_states", "PN_defect", "P1_defect", "comm_P0", "comm_PN", "P_eps_minus_P0",
            "P_eps_idempotency", "unitarity", "intertwining", "U_minus_I", "rank_P_eps", "M_max_eig", "M_norm"]
    rows = []
    rep = None
    for eps in sw.epsilon:
        try:
            s = make_setup(config, eps, n_x, n_z)
            cutoff = s.cut(sw.window)
            _check_window(s, cutoff, "projections")
            pairs = window_pairs(s, cutoff, config)
            sel = pairs.values <= cutoff
            W, L = pairs.vectors[:, sel], pairs.values[sel]
            ps = build_projection_set(s.op, s.band, sw.N)
            p1 = ps if sw.N == 1 else build_projection_set(s.op, s.band, 1)
            inv = ps.invariants()
            M = correction_m(s.band, s.op, R_F=ps.R_F)
            Meig = np.linalg.eigvalsh(M.M_base)
        except ConfigError:
            raise
        except Exception as exc:
            raise ExperimentError("projections", eps, exc) from exc
        rows.append({
            "eps": eps,
            "window_states": int(W.shape[1]),
            "PN_defect": inv["PN_defect"],
            "P1_defect": p1.invariants()["PN_defect"],
            "comm_P0": commutator_window_norm(s.op, ps.P0, W, L),
            "comm_PN": commutator_window_norm(s.op, ps.PN, W, L),
            "P_eps_minus_P0": inv["P_eps_minus_P0"],
            "P_eps_idempotency": inv["P_eps_idempotency"],
            "unitarity": inv["unitarity"],
            "intertwining": inv["intertwining"],
            "U_minus_I": inv["U_minus_I"],
            "rank_P_eps": inv["rank_P_eps"],
            "M_max_eig": float(Meig[-1]),
            "M_norm": float(np.max(np.abs(Meig))),
        })
        if rep is None:
            rep = SpectralReport("projections", cols, metadata=_metadata(config, "projections", n_x, n_z, s.model))
            rep.metadata.update({"N": sw.N, "window": str(sw.window)})
        log.info("projections eps=%g done", eps)
    rep.rows = rows
    rep.guard = self_convergence_guard(config, sw.epsilon[0], n_x, n_z)
    pts = lambda key: [(r["eps"], r[key]) for r in rows]
    rep.fits = {
        "comm_P0": _fit(pts("comm_P0")),
        "comm_PN": _fit(pts("comm_PN")),
        "P_eps_minus_P0": _fit(pts("P_eps_minus_P0")),
        "P1_defect": _fit(pts("P1_defect")),
        "M_norm": _fit(pts("M_norm")),
    }
    f = rep.fits
    rep.checks = [
        at_least("commutator [H,P0] rho(H) slope", f["comm_P0"].slope, acc.commutator_p0_slope),
        at_most("commutator [H,P0] rho(H) fit residual", f["comm_P0"].residual, acc.fit_residual),
        at_least("|P_eps - P0| slope", f["P_eps_minus_P0"].slope, acc.projection_slope),
        at_most("max |P_eps^2 - P_eps|", max(r["P_eps_idempotency"] for r in rows), acc.idempotency_tol),
        at_most("max |U^T U - I|", max(r["unitarity"] for r in rows), acc.unitarity_tol),
        at_most("max |(I - P_eps) U P0|", max(r["intertwining"] for r in rows), acc.intertwining_tol),
        at_most("max eigenvalue of M", max(r["M_max_eig"] for r in rows), 1e-12),
    ]
    if sw.N >= 1:
        target = acc.commutator_pn_slope if sw.N == 1 else acc.commutator_pn_slope + (sw.N - 1)
        rep.checks.insert(2, at_least(f"commutator [H,P^{sw.N}] rho(H) slope", f["comm_PN"].slope, target))
        rep.checks.insert(3, at_most(f"commutator [H,P^{sw.N}] rho(H) fit residual", f["comm_PN"].residual,
                                     acc.fit_residual))
    return rep


def _residuals(s: Setup, eff: EffectiveOperator, pairs, modes: int):
    vals, vecs = eff.eigh()
    out = []
    for j in range(modes):
        out.append(eigenfunction_residual(vecs[:, j], s.band, s.op, pairs))
    return out


def run_convergence(config: ExperimentConfig) -> SpectralReport:
    num, sw, acc = config.numerics, config.sweep, config.acceptance
    n_x, n_z = num.n_x, num.n_z
    modes = sw.modes
    cols = ["eps", "states"] + [f"gap{j}" for j in range(modes)] + [
        "hausdorff_Ha", "hausdorff_HaM", "r_L2", "r_W1", "r_L2_max", "r_W1_max", "M_max_eig", "collisions"]
    rows = []
    rep = None
    eig_rows = []
    for eps in sw.epsilon:
        try:
            s = make_setup(config, eps, n_x, n_z)
            cutoff = s.cut(sw.energy_window)
            _check_window(s, cutoff, "convergence")
            Ha = s.adiabatic(shift=sw.shift)
            pairs = window_pairs(s, cutoff + sw.margin, config, Ha)
            M = correction_m(s.band, s.op)
            HaM = s.adiabatic(M, shift=sw.shift)
            full = np.asarray(pairs.values)
            ea, em = Ha.eigenvalues(), HaM.eigenvalues()
            pairing = pair_spectra(full, ea, modes)
            gaps = pairing.gaps(full, ea)
            d_a = spectral_distance(full, ea, cutoff, sw.margin)
            d_m = spectral_distance(full, em, cutoff, sw.margin)
            res = _residuals(s, Ha, pairs, modes)
        except ConfigError:
            raise
        except Exception as exc:
            raise ExperimentError("convergence", eps, exc) from exc
        row = {"eps": eps, "states": int(np.sum(full <= cutoff))}
        row.update({f"gap{j}": float(g) for j, g in enumerate(gaps)})
        row.update({
            "hausdorff_Ha": d_a, "hausdorff_HaM": d_m,
            "r_L2": res[0][0], "r_W1": res[0][1],
            "r_L2_max": max(r[0] for r in res), "r_W1_max": max(r[1] for r in res),
            "M_max_eig": float(np.max(np.linalg.eigvalsh(M.M_base))),
            "collisions": pairing.collisions,
        })
        rows.append(row)
        eig_rows += [{"eps": eps, "index": i, "full": float(full[i]), "H_a": float(ea[i]), "H_a_M": float(em[i])}
                     for i in range(int(np.sum(full <= cutoff)))]
        if rep is None:
            rep = SpectralReport("convergence", cols, metadata=_metadata(config, "convergence", n_x, n_z, s.model))
            rep.metadata.update({"energy_window": str(sw.energy_window), "alpha": sw.alpha, "beta": sw.beta,
                                 "margin": sw.margin, "shift": sw.shift})
        log.info("convergence eps=%g done", eps)
    rep.rows = rows
    rep.tables["eigenvalues"] = (["eps", "index", "full", "H_a", "H_a_M"], eig_rows)
    rep.guard = self_convergence_guard(config, sw.epsilon[0], n_x, n_z)
    pts = lambda key: [(r["eps"], r[key]) for r in rows]
    scale = max(abs(rows[0].get("gap0", 1.0)), 1.0) * 10.0
    rep.fits = {f"gap{j}": _fit(pts(f"gap{j}"), scale) for j in range(modes)}
    rep.fits.update({
        "hausdorff_Ha": _fit(pts("hausdorff_Ha"), scale),
        "hausdorff_HaM": _fit(pts("hausdorff_HaM"), scale),
        "r_L2": _fit(pts("r_L2")),
        "r_W1": _fit(pts("r_W1")),
    })
    f = rep.fits
    rep.checks = [
        within(f"eigenvalue gap {j} slope", f[f"gap{j}"].slope, acc.gap_slope_min, acc.gap_slope_max)
        for j in range(modes)
    ]
    rep.checks += [
        at_least("Hausdorff distance H vs H_a slope", f["hausdorff_Ha"].slope, acc.hausdorff_slope),
        at_least("Hausdorff distance H vs H_a + M slope", f["hausdorff_HaM"].slope, acc.hausdorff_m_slope),
        at_least("slope improvement from M", f["hausdorff_HaM"].slope - f["hausdorff_Ha"].slope, acc.m_improvement),
        at_least("eigenfunction residual r_W1 slope", f["r_W1"].slope, acc.residual_w1_slope),
        at_least("eigenfunction residual r_L2 slope", f["r_L2"].slope, acc.residual_l2_slope),
        at_most("max eigenvalue of M", max(r["M_max_eig"] for r in rows), 1e-12),
    ]
    return rep


def _dynamics_point(config: ExperimentConfig, eps: float, seed: int) -> dict:
    num, sw, acc = config.numerics, config.sweep, config.acceptance
    s = make_setup(config, eps, num.dynamics_n_x, num.dynamics_n_z)
    cutoff = s.cut(sw.energy_window)
    _check_window(s, cutoff, "dynamics")
    H = s.op.dense()
    lam, V = np.linalg.eigh(H)
    W = V[:, lam <= cutoff]
    ps = build_projection_set(H, s.band, sw.N)
    rng = np.random.default_rng(seed)
    psi = ps.P_eps.apply(W @ (W.T @ rng.standard_normal(H.shape[0])))
    psi /= np.linalg.norm(psi)
    B = ps.effective_basis()
    Heff = ps.effective_matrix(H)
    y0 = B.T @ psi
    shift = s.cert.Lambda0

    X = ps.P_eps.apply(W)
    Y0 = B.T @ X

    def error(dt):
        exact = propagate(H, psi, sw.T, dt, shift=shift, eig=(lam, V)).final
        approx = B @ propagate(Heff, y0, sw.T, dt, shift=shift).final
        block = propagate(H, X, sw.T, dt, shift=shift, eig=(lam, V)).final
        block -= B @ propagate(Heff, Y0, sw.T, dt, shift=shift).final
        return float(np.linalg.norm(exact - approx)), float(np.linalg.norm(block, 2))

    dt = sw.dt
    err = error(dt)
    for _ in range(12):
        half = error(dt / 2)
        change = max(abs(h - e) / max(h, 1e-300) for h, e in zip(half, err))
        dt, err = dt / 2, half
        if change < acc.dt_guard:
            break
    return {"eps": eps, "error": err[0], "error_window": err[1], "dt": dt, "dt_change": change,
            "window_states": int(W.shape[1]), "leakage": float(np.linalg.norm(psi - B @ y0))}


def run_dynamics(config: ExperimentConfig, seed: int = 0) -> SpectralReport:
    num, sw, acc = config.numerics, config.sweep, config.acceptance
    rows = []
    for eps in sw.epsilon:
        try:
            rows.append(_dynamics_point(config, eps, seed))
        except ConfigError:
            raise
        except Exception as exc:
            raise ExperimentError("dynamics", eps, exc) from exc
        log.info("dynamics eps=%g done", eps)
    model = build_model(config, sw.epsilon[0], num.dynamics_n_x)
    rep = SpectralReport("dynamics", ["eps", "error", "error_window", "dt", "dt_change", "window_states", "leakage"], rows,
                         metadata=_metadata(config, "dynamics", num.dynamics_n_x, num.dynamics_n_z, model))
    rep.metadata.update({"T": sw.T, "N": sw.N, "seed": seed, "energy_window": str(sw.energy_window)})
    rep.guard = self_convergence_guard(config, sw.epsilon[0], num.dynamics_n_x, num.dynamics_n_z)
    rep.fits = {
        "error": _fit([(r["eps"], r["error"]) for r in rows]),
        "error_window": _fit([(r["eps"], r["error_window"]) for r in rows]),
    }
    rep.checks = [
        at_least("propagation error slope, uniform over the window", rep.fits["error_window"].slope,
                 acc.dynamics_slope),
        at_most("max dt-halving change", max(r["dt_change"] for r in rows), acc.dt_guard),
    ]
    return rep


def run_experiment(config: ExperimentConfig, kind: str, out_dir=None, seed: int = 0) -> SpectralReport:
    """Run one experiment and write its CSV files to ``out_dir`` (if given)."""
    if kind not in KINDS:
        raise ConfigError([ConfigIssue(None, kind, f"unknown experiment kind; expected one of {KINDS}")])
    config.require_rate_fit(kind)
    if kind == "verify":
        from .verify import run_verify

        rep = run_verify(config)
    elif kind == "dynamics":
        rep = run_dynamics(config, seed)
    else:
        runner = {"bands": run_bands, "effective": run_effective, "full": run_full,
                  "projections": run_projections, "convergence": run_convergence}[kind]
        try:
            rep = runner(config)
        except (ConfigError, ExperimentError, GuardError):
            raise
        except Exception as exc:
            raise ExperimentError(kind, None, exc) from exc
    if out_dir is not None:
        write_report(rep, Path(out_dir))
    return rep
