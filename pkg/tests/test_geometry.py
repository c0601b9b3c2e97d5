from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TWO_PI, strip, warped
from fibre_adiabatic.geometry import (
    BaseCircle,
    H1Spec,
    ModelError,
    SeparablePotential,
    UnsupportedKindError,
    build_strip_model,
    log_volume_derivative,
    shift_field_coefficient,
)


def test_flat_strip_has_unit_width():
    m = strip("0", eps=0.1)
    a, a1, a2 = m.width_jet(m.base.nodes)
    assert np.all(a == 1.0) and np.all(a1 == 0) and np.all(a2 == 0)


def test_cosine_strip_minimum_width():
    assert strip().min_width == pytest.approx(1.15, abs=1e-12)


def test_negative_profile_rejected():
    with pytest.raises(ModelError, match="profile not positive"):
        strip("-1.2")


def test_flat_torus_warped_model():
    m = warped("2*pi")
    np.testing.assert_allclose(m.density_jet(m.base.nodes)[0], 1.0)
    np.testing.assert_allclose(m.kinetic_scale_jet(m.base.nodes)[0], 1.0)


def test_warped_zero_crossing_rejected():
    with pytest.raises(ModelError):
        warped("2*pi*cos(x)")


def test_warped_rejects_fibre_dependent_potential():
    with pytest.raises(ModelError):
        warped(potential=SeparablePotential.make("1", "cos(z)"))


def test_eps_range_enforced():
    with pytest.raises(ModelError):
        strip(eps=1.5)


def test_shift_field_vanishes_on_flat_strip():
    m = strip("0")
    assert np.all(shift_field_coefficient(m, m.base.nodes) == 0)


def test_shift_field_at_quarter_period_matches_difference_quotient():
    m = strip()
    x = math.pi / 2
    c = shift_field_coefficient(m, np.array([x]))[0]
    assert c == pytest.approx(-0.08, abs=1e-14)
    h = 1e-6
    fd = (math.log(1.25 + 0.1 * math.cos(x + h)) - math.log(1.25 + 0.1 * math.cos(x - h))) / (2 * h)
    assert abs(c - fd) < 1e-8


def test_shift_field_equals_vertical_commutator():
    # pull-back of d_x commuted with d_y^2 on a Dirichlet test function equals -2 c d_y^2
    m = strip()
    x0 = 0.7
    a = float(m.width_jet(np.array([x0]))[0][0])
    c = shift_field_coefficient(m, np.array([x0]))[0]
    y = np.linspace(0.1, a - 0.1, 9)

    def u(x, y):
        aa = 1.25 + 0.1 * np.cos(x)
        return np.sin(np.pi * y / aa) * (1 + 0.3 * np.sin(x))

    h = 1e-4

    def dyy(f, x, y):
        return (f(x, y + h) - 2 * f(x, y) + f(x, y - h)) / h**2

    def pull(f):
        # d_x at fixed trivialised coordinate z = y / a, expressed in (x, y)
        def g(x, y):
            z = y / (1.25 + 0.1 * np.cos(x))
            return (f(x + h, z * (1.25 + 0.1 * np.cos(x + h))) - f(x - h, z * (1.25 + 0.1 * np.cos(x - h)))) / (2 * h)

        return g

    lhs = pull(lambda x, y: dyy(u, x, y))(x0, y) - dyy(pull(u), x0, y)
    rhs = -2 * c * dyy(u, x0, y)
    np.testing.assert_allclose(lhs, rhs, atol=2e-3 * np.max(np.abs(rhs)))


def test_log_volume_derivative_cases():
    assert np.all(log_volume_derivative(strip("0"), np.linspace(0, 6, 5)) == 0)
    w = warped("2*pi*exp(0.1*sin(x))")
    assert log_volume_derivative(w, np.array([0.0]))[0] == pytest.approx(0.1, abs=1e-15)
    g = strip("0.3*exp(-(x - pi)**2)")
    assert log_volume_derivative(g, np.array([math.pi]))[0] == 0.0


def test_shift_field_undefined_for_warped():
    with pytest.raises(UnsupportedKindError):
        shift_field_coefficient(warped(), np.array([0.0]))


def test_non_periodic_profile_warns(caplog):
    with caplog.at_level(logging.WARNING):
        strip("0.3*exp(-(x - pi)**2)")
    assert "not smooth-periodic" in caplog.text


def test_h1_spec_requires_base_coordinate():
    with pytest.raises(ValueError):
        H1Spec.make("z", 0.0)


def test_base_circle_operators():
    base = BaseCircle(TWO_PI, 32)
    x = base.nodes
    f = np.sin(3 * x)
    np.testing.assert_allclose(base.derivative @ f, 3 * np.cos(3 * x), atol=1e-12)
    np.testing.assert_allclose(base.laplacian @ f, 9 * f, atol=1e-11)
    L = base.laplacian
    assert np.array_equal(L, L.T)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(L))[:5], [0, 1, 1, 4, 4], atol=1e-11)


def test_fingerprint_changes_with_inputs():
    a, b = strip(), strip(eps=0.1)
    assert a.fingerprint() == strip().fingerprint()
    assert a.fingerprint() != b.fingerprint()
    assert a.with_eps(0.1).fingerprint() == b.fingerprint()


@given(amp=st.floats(0.0, 0.5), eps=st.floats(0.01, 0.5))
def test_models_are_deterministic(amp, eps):
    p = f"{amp!r}*cos(x)"
    m1 = build_strip_model(p, BaseCircle(TWO_PI, 16), eps)
    m2 = build_strip_model(p, BaseCircle(TWO_PI, 16), eps)
    x = m1.base.nodes
    assert m1.fingerprint() == m2.fingerprint()
    for u, v in zip(m1.width_jet(x), m2.width_jet(x)):
        assert np.array_equal(u, v)


@given(amp=st.floats(0.0, 0.8))
def test_strip_shift_equals_log_volume(amp):
    m = build_strip_model(f"{amp!r}*sin(x)", BaseCircle(TWO_PI, 16), 0.1)
    x = m.base.nodes
    assert np.array_equal(shift_field_coefficient(m, x), log_volume_derivative(m, x))
