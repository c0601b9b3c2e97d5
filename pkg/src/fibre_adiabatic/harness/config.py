"""Experiment configuration: a TOML document with five sections.

```
[model]      kind, profile, length, potential = {base, fibre}, h1 = {s, v}
[numerics]   n_x, n_z, basis, projection_*/dynamics_*/verify_* resolutions, tolerances
[sweep]      epsilon, N, alpha, beta, C, window, energy_window, margin, modes, T, dt
[acceptance] slope and residual thresholds
[output]     directory, formats
```

Energy cut-offs are either numbers or ``"Lambda0 + 2"``-style expressions
in the band thresholds ``Lambda0`` and ``Lambda1``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from ..geometry import STRIP, WARPED, H1Spec, SeparablePotential
from ..profiles import Profile, ProfileSyntaxError

RATE_KINDS = ("projections", "convergence", "dynamics")
KINDS = ("bands", "effective", "full", "projections", "convergence", "dynamics", "verify")


@dataclass(frozen=True)
class ConfigIssue:
    line: int | None
    token: str
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line else "config"
        return f"{where}: {self.message} (token {self.token!r})"


class ConfigError(ValueError):
    def __init__(self, issues: list[ConfigIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


_WINDOW_RE = re.compile(r"^\s*(Lambda0|Lambda1)\s*(?:([+-])\s*([0-9.eE+-]+))?\s*$")


@dataclass(frozen=True)
class EnergyCut:
    """``reference + offset`` with reference ``None`` (absolute), ``Lambda0`` or ``Lambda1``."""

    reference: str | None
    offset: float

    @classmethod
    def parse(cls, value) -> EnergyCut:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return cls(None, float(value))
        m = _WINDOW_RE.match(str(value))
        if not m:
            raise ValueError(f"cannot parse energy cut-off {value!r}")
        off = float(m.group(3)) if m.group(3) else 0.0
        return cls(m.group(1), -off if m.group(2) == "-" else off)

    def resolve(self, Lambda0: float, Lambda1: float) -> float:
        base = {"Lambda0": Lambda0, "Lambda1": Lambda1, None: 0.0}[self.reference]
        return base + self.offset

    def __str__(self) -> str:
        if self.reference is None:
            return repr(self.offset)
        sign = "-" if self.offset < 0 else "+"
        return f"{self.reference} {sign} {abs(self.offset):g}"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = STRIP
    profile: str = "0.25 + 0.1*cos(x)"
    length: float = 2 * math.pi
    potential: tuple[str, str] | None = None
    h1: tuple[str, str] | None = None

    def potential_spec(self) -> SeparablePotential | None:
        return None if self.potential is None else SeparablePotential.make(*self.potential)

    def h1_spec(self) -> H1Spec | None:
        return None if self.h1 is None else H1Spec.make(*self.h1)


@dataclass(frozen=True)
class NumericsConfig:
    n_x: int = 256
    n_z: int = 32
    basis: str | None = None
    projection_n_x: int = 256
    projection_n_z: int = 32
    dynamics_n_x: int = 128
    dynamics_n_z: int = 24
    verify_n_x: int = 64
    verify_n_z: int = 16
    dim_cap: int = 1 << 16
    dense_limit: int = 4096
    eig_tol: float = 1e-9
    guard_tol: float = 1e-9
    guard_modes: int = 10
    gap_tol: float = 1e-8


@dataclass(frozen=True)
class SweepConfig:
    epsilon: tuple[float, ...] = (0.2, 0.141, 0.1, 0.071, 0.05)
    N: int = 1
    alpha: float = 1.0
    beta: float = 1.5
    C: float = 1.0
    window: EnergyCut = EnergyCut("Lambda1", -0.5)
    energy_window: EnergyCut = EnergyCut("Lambda0", 2.0)
    margin: float = 0.5
    modes: int = 3
    T: float = 1.0
    dt: float = 1e-3
    shift: bool = True


@dataclass(frozen=True)
class AcceptanceConfig:
    commutator_p0_slope: float = 0.9
    commutator_pn_slope: float = 1.8
    fit_residual: float = 0.15
    gap_slope_min: float = 2.7
    gap_slope_max: float = 3.5
    hausdorff_slope: float = 1.8
    hausdorff_m_slope: float = 2.6
    m_improvement: float = 0.5
    projection_slope: float = 0.9
    idempotency_tol: float = 1e-12
    unitarity_tol: float = 1e-10
    intertwining_tol: float = 1e-10
    dynamics_slope: float = 1.8
    dt_guard: float = 0.01
    residual_w1_slope: float = 0.3
    residual_l2_slope: float = 1.2


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple[str, ...] = ("csv",)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    acceptance: AcceptanceConfig = field(default_factory=AcceptanceConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def with_epsilon(self, eps) -> ExperimentConfig:
        eps = tuple(float(e) for e in eps)
        _check_epsilon(eps, lambda msg, tok: _raise(msg, tok))
        return replace(self, sweep=replace(self.sweep, epsilon=eps))

    def require_rate_fit(self, kind: str) -> None:
        if kind in RATE_KINDS and len(self.sweep.epsilon) < 4:
            raise ConfigError([ConfigIssue(None, "epsilon",
                                           f"'{kind}' fits rates and needs at least 4 epsilon values, "
                                           f"got {len(self.sweep.epsilon)}")])


def _raise(msg: str, tok: str):
    raise ConfigError([ConfigIssue(None, tok, msg)])


def _check_epsilon(eps: tuple[float, ...], report) -> None:
    if not eps:
        report("epsilon list is empty", "epsilon")
    for e in eps:
        if not 0.0 < e < 1.0:
            report(f"epsilon {e} outside (0, 1)", str(e))
    if any(b >= a for a, b in zip(eps, eps[1:])):
        report("epsilon list must be strictly decreasing", "epsilon")


class _Locator:
    def __init__(self, text: str):
        self.lines = text.splitlines()

    def find(self, section: str | None, key: str) -> int | None:
        current = None
        for no, line in enumerate(self.lines, 1):
            s = line.strip()
            if s.startswith("[") and not s.startswith("[["):
                current = s.strip("[] ").strip()
                continue
            if (section is None or current == section) and re.match(rf"^{re.escape(key)}\s*=", s):
                return no
            if section is not None and current == section and re.search(rf"\b{re.escape(key)}\s*=", s):
                return no
        return None


_SECTIONS = {
    "model": ModelConfig,
    "numerics": NumericsConfig,
    "sweep": SweepConfig,
    "acceptance": AcceptanceConfig,
    "output": OutputConfig,
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; every problem is reported with its line and token."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        src = text.splitlines()[line - 1] if line and line <= len(text.splitlines()) else ""
        token = src[col - 1 :].split()[0] if col and src[col - 1 :].split() else src.strip()
        raise ConfigError([ConfigIssue(line, token, f"TOML syntax error: {exc}")]) from None
    loc = _Locator(text)
    issues: list[ConfigIssue] = []

    def report(section, key, msg, token=None):
        issues.append(ConfigIssue(loc.find(section, key), token if token is not None else key, msg))

    parts = {}
    for name, value in data.items():
        if name not in _SECTIONS:
            issues.append(ConfigIssue(loc.find(None, name) or _section_line(loc, name), name, "unknown section"))
            continue
        if not isinstance(value, dict):
            report(None, name, "expected a table")
            continue
        known = {f.name for f in fields(_SECTIONS[name])}
        for key in value:
            if key not in known:
                report(name, key, f"unknown key in [{name}]")
        parts[name] = {k: v for k, v in value.items() if k in known}

    model = _model(parts.get("model", {}), lambda k, m, t=None: report("model", k, m, t))
    numerics = _numerics(parts.get("numerics", {}), lambda k, m, t=None: report("numerics", k, m, t))
    sweep = _sweep(parts.get("sweep", {}), lambda k, m, t=None: report("sweep", k, m, t))
    acceptance = _simple(AcceptanceConfig, parts.get("acceptance", {}), lambda k, m, t=None: report("acceptance", k, m, t))
    output = _output(parts.get("output", {}), lambda k, m, t=None: report("output", k, m, t))
    if numerics is not None and model is not None and numerics.basis is not None:
        want_dirichlet = model.kind == STRIP
        if (numerics.basis != "fourier") != want_dirichlet:
            report("numerics", "basis", f"basis {numerics.basis!r} does not fit a {model.kind} model", numerics.basis)
    if issues:
        raise ConfigError(issues)
    return ExperimentConfig(model, numerics, sweep, acceptance, output)


def _section_line(loc: _Locator, name: str) -> int | None:
    for no, line in enumerate(loc.lines, 1):
        if line.strip().strip("[]").strip() == name:
            return no
    return None


def _typed(value, typ, key, report):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is float and isinstance(value, float):
        return value
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if typ is bool and isinstance(value, bool):
        return value
    report(key, f"expected {typ.__name__}, got {type(value).__name__}", str(value))
    return None


def _simple(cls, raw: dict, report):
    defaults = cls()
    values = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        typ = type(getattr(defaults, f.name))
        v = _typed(raw[f.name], typ, f.name, report)
        if v is not None:
            values[f.name] = v
    return replace(defaults, **values)


def _profile(value, var, key, report) -> str | None:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return repr(float(value))
    if not isinstance(value, str):
        report(key, "profile must be a string or number", str(value))
        return None
    try:
        Profile(value, var)
    except ProfileSyntaxError as exc:
        report(key, f"malformed profile: {exc}", exc.token)
        return None
    return value


def _model(raw: dict, report) -> ModelConfig:
    cfg = ModelConfig()
    kind = raw.get("kind", cfg.kind)
    if kind not in (STRIP, WARPED):
        report("kind", f"kind must be '{STRIP}' or '{WARPED}'", str(kind))
        kind = cfg.kind
    profile = _profile(raw.get("profile", cfg.profile), "x", "profile", report) or cfg.profile
    length = raw.get("length", cfg.length)
    if not isinstance(length, (int, float)) or not length > 0:
        report("length", "base circumference must be a positive number", str(length))
        length = cfg.length
    potential = _pair(raw.get("potential"), ("base", "fibre"), ("x", "z"), "potential", report)
    h1 = _pair(raw.get("h1"), ("s", "v"), ("x", "x"), "h1", report)
    return ModelConfig(kind, profile, float(length), potential, h1)


def _pair(raw, names, vars_, key, report):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        report(key, f"{key} must be a table with keys {names}", str(raw))
        return None
    for k in raw:
        if k not in names:
            report(k, f"unknown key in {key}", k)
    out = []
    for name, var in zip(names, vars_):
        out.append(_profile(raw.get(name, 0.0), var, name, report) or "0.0")
    return tuple(out)


def _numerics(raw: dict, report) -> NumericsConfig:
    cfg = _simple(NumericsConfig, {k: v for k, v in raw.items() if k != "basis"}, report)
    basis = raw.get("basis")
    if basis is not None and basis not in ("sine", "legendre", "fourier"):
        report("basis", "basis must be 'sine', 'legendre' or 'fourier'", str(basis))
        basis = None
    for key in ("n_x", "projection_n_x", "dynamics_n_x", "verify_n_x"):
        v = getattr(cfg, key)
        if v < 16 or v % 2:
            report(key, f"{key} must be even and >= 16", str(v))
    for key in ("n_z", "projection_n_z", "dynamics_n_z", "verify_n_z"):
        if getattr(cfg, key) < 8:
            report(key, f"{key} must be >= 8", str(getattr(cfg, key)))
    for key in ("eig_tol", "guard_tol", "gap_tol"):
        if not getattr(cfg, key) > 0:
            report(key, f"{key} must be positive", str(getattr(cfg, key)))
    return replace(cfg, basis=basis)


def _sweep(raw: dict, report) -> SweepConfig:
    plain = {k: v for k, v in raw.items() if k not in ("epsilon", "window", "energy_window")}
    cfg = _simple(SweepConfig, plain, report)
    eps = cfg.epsilon
    if "epsilon" in raw:
        v = raw["epsilon"]
        if not isinstance(v, list) or not all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in v):
            report("epsilon", "epsilon must be a list of numbers", str(v))
        else:
            eps = tuple(float(e) for e in v)
            _check_epsilon(eps, lambda msg, tok: report("epsilon", msg, tok))
    cuts = {}
    for key in ("window", "energy_window"):
        if key in raw:
            try:
                cuts[key] = EnergyCut.parse(raw[key])
            except ValueError as exc:
                report(key, str(exc), str(raw[key]))
    if cfg.N < 0:
        report("N", "recursion depth must be >= 0", str(cfg.N))
    if cfg.modes < 1:
        report("modes", "modes must be >= 1", str(cfg.modes))
    if not (cfg.T > 0 and cfg.dt > 0):
        report("dt", "T and dt must be positive", str(cfg.dt))
    return replace(cfg, epsilon=eps, **cuts)


def _output(raw: dict, report) -> OutputConfig:
    cfg = OutputConfig()
    directory = raw.get("directory", cfg.directory)
    if not isinstance(directory, str):
        report("directory", "directory must be a string", str(directory))
        directory = cfg.directory
    formats = raw.get("formats", list(cfg.formats))
    if not isinstance(formats, list) or any(f != "csv" for f in formats):
        report("formats", "only the 'csv' format is supported", str(formats))
        formats = list(cfg.formats)
    return OutputConfig(directory, tuple(formats))


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError([ConfigIssue(None, "", f"config is not UTF-8: {exc}")]) from None
    return parse_config(text)
