import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerhom import core
from powerhom.core import MicroGeometry, PhaseParams
from powerhom.errors import DegeneratePoint, InvalidParameters

finite = st.floats(-20, 20, allow_nan=False)
vec = st.tuples(finite, finite).map(np.array)
exponents = st.sampled_from([(1.2, 1.8), (1.5, 2.0), (1.5, 2.5), (2.0, 3.0), (1.1, 4.0)])


@pytest.mark.parametrize("p1,p2", [(1.5, 2.0), (1.2, 1.9), (1.5, 2.5), (2.0, 2.0), (1.1, 3.0)])
def test_admissible_exponents(p1, p2):
    pp = PhaseParams(1.0, 2.0, p1, p2)
    assert pp.q2 == pytest.approx(p1 / (p1 - 1))
    assert pp.q1 == pytest.approx(p2 / (p2 - 1))
    assert pp.regime == ("sublinear" if p2 <= 2 else "mixed")


@pytest.mark.parametrize("p1,p2", [(2.5, 3.0), (1.0, 2.0), (1.8, 1.5), (0.5, 2.0)])
def test_rejected_exponents(p1, p2):
    with pytest.raises(InvalidParameters) as exc:
        PhaseParams(1.0, 2.0, p1, p2)
    assert exc.value.field.startswith("params.")


def test_homogeneous_medium_accepts_any_exponent():
    assert PhaseParams(1.0, 1.0, 3.0, 3.0).is_homogeneous
    with pytest.raises(InvalidParameters):
        PhaseParams(1.0, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("bad", [dict(sigma1=0.0), dict(sigma2=-1.0), dict(p1=float("nan"))])
def test_rejected_coefficients(bad):
    kw = dict(sigma1=1.0, sigma2=2.0, p1=1.5, p2=2.0) | bad
    with pytest.raises(InvalidParameters):
        PhaseParams(**kw)


def test_geometry_validation():
    assert MicroGeometry("disk", 0.25).radius == pytest.approx(math.sqrt(0.25 / math.pi))
    with pytest.raises(InvalidParameters, match="geometry.theta1"):
        MicroGeometry("laminate", 1.0)
    with pytest.raises(InvalidParameters, match="geometry.theta1"):
        MicroGeometry("disk", 0.9)
    with pytest.raises(InvalidParameters, match="geometry.kind"):
        MicroGeometry("hexagon", 0.3)
    with pytest.raises(AttributeError):
        MicroGeometry("laminate", 0.3).radius


def test_indicator_layout(laminate, disk):
    assert core.indicator(laminate, np.array([0.5, 0.1])) == 1
    assert core.indicator(laminate, np.array([0.1, 0.5])) == 2
    assert core.indicator(disk, np.array([0.5, 0.5])) == 1
    assert core.indicator(disk, np.array([0.0, 0.0])) == 2
    # periodic wrap
    assert core.indicator(laminate, np.array([1.5, -3.2])) == 1


def test_indicator_volume_fraction(disk):
    g = (np.arange(400) + 0.5) / 400
    Y = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    assert np.mean(core.indicator(disk, Y) == 1) == pytest.approx(0.25, abs=2e-3)


def test_wrap_periodic():
    y = core.wrap_periodic(np.array([-1e-20, 1.0, 2.25, -0.25]))
    assert np.all((y >= 0) & (y < 1))
    np.testing.assert_allclose(y[2:], [0.25, 0.75])
    np.testing.assert_allclose(core.wrap_periodic(0.3, eps=0.25), 0.2, atol=1e-15)
    with pytest.raises(InvalidParameters):
        core.wrap_periodic(1.0, eps=0.0)


def test_flux_values(sublinear):
    xi = np.array([3.0, 4.0])
    np.testing.assert_allclose(core.flux(sublinear, 1, xi), 5.0 ** -0.5 * xi)
    np.testing.assert_allclose(core.flux(sublinear, 2, xi), 3.0 * xi)
    assert core.energy_density(sublinear, 1, xi) == pytest.approx(5 ** 1.5 / 1.5)
    assert core.energy_density(sublinear, 2, xi) == pytest.approx(3.0 * 25 / 2)
    np.testing.assert_array_equal(core.flux(sublinear, 1, np.zeros(2)), np.zeros(2))


def test_flux_is_gradient_of_energy(sublinear, mixed, rng):
    # 100 random points, central differences
    for pp in (sublinear, mixed):
        for phase in (1, 2):
            xi = rng.uniform(-3, 3, size=(100, 2))
            h = 1e-6
            fd = np.stack([(core.energy_density(pp, phase, xi + h * e) - core.energy_density(pp, phase, xi - h * e))
                           / (2 * h) for e in np.eye(2)], -1)
            np.testing.assert_allclose(fd, core.flux(pp, phase, xi), rtol=1e-6, atol=1e-8)


def test_regularized_jacobian_matches_fd(mixed, rng):
    xi = rng.normal(size=(20, 2))
    phases = rng.integers(1, 3, size=20)
    delta, h = 1e-2, 1e-6
    J = core.flux_jacobian_regularized(mixed, phases, xi, delta)
    for k, e in enumerate(np.eye(2)):
        fd = (core.regularized_flux(mixed, phases, xi + h * e, delta)
              - core.regularized_flux(mixed, phases, xi - h * e, delta)) / (2 * h)
        np.testing.assert_allclose(J[..., :, k], fd, rtol=1e-6, atol=1e-8)
    assert np.allclose(J, np.swapaxes(J, -1, -2))


def test_jacobian_degenerate_point(sublinear):
    with pytest.raises(DegeneratePoint):
        core.flux_jacobian_regularized(sublinear, 1, np.zeros(2), 0.0)
    # p = 2 is fine at the origin
    np.testing.assert_allclose(core.flux_jacobian_regularized(sublinear, 2, np.zeros(2), 0.0), 3 * np.eye(2))


def test_holder_constants():
    np.testing.assert_allclose(core.holder_alpha([1.5, 2.0, 3.0]), [0.5, 1.0, 1.0])
    np.testing.assert_allclose(core.holder_beta([1.5, 2.0, 3.0]), [2.0, 2.0, 3.0])


@settings(max_examples=200, deadline=None)
@given(ex=exponents, a=vec, b=vec, phase=st.sampled_from([1, 2]))
def test_monotonicity_property(ex, a, b, phase):
    pp = PhaseParams(1.0, 2.5, *ex)
    inner = np.dot(core.flux(pp, phase, a) - core.flux(pp, phase, b), a - b)
    scale = 1 + np.linalg.norm(core.flux(pp, phase, a)) * np.linalg.norm(a) \
        + np.linalg.norm(core.flux(pp, phase, b)) * np.linalg.norm(b)
    assert inner >= -1e-12 * scale


@settings(max_examples=100, deadline=None)
@given(ex=exponents, a=vec, phase=st.sampled_from([1, 2]))
def test_flux_odd_and_homogeneous(ex, a, phase):
    pp = PhaseParams(2.0, 1.0, *ex)
    f = core.flux(pp, phase, a)
    np.testing.assert_allclose(core.flux(pp, phase, -a), -f)
    p = pp.p1 if phase == 1 else pp.p2
    np.testing.assert_allclose(core.flux(pp, phase, 2 * a), 2 ** (p - 1) * f, rtol=1e-12, atol=1e-300)


def test_structure_audit_passes(sublinear, mixed):
    for pp in (sublinear, mixed):
        rep = core.audit_structure_conditions(pp, n_samples=1000, seed=3)
        assert rep.passed and rep.sign_violations == 0
        assert 0 < rep.monA_ratio_min <= rep.monA_ratio_max
        assert np.isfinite(rep.conA_ratio_max)


def test_audit_is_seeded_and_serializable(sublinear):
    a = core.audit_structure_conditions(sublinear, n_samples=50, seed=11)
    b = core.audit_structure_conditions(sublinear, n_samples=50, seed=11)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert d["seed"] == 11 and d["n_samples"] == 50
    with pytest.raises(InvalidParameters):
        core.audit_structure_conditions(sublinear, n_samples=0)


def test_sample_ball_radius(rng):
    pts = core.sample_ball(rng, 500, 2.5)
    assert pts.shape == (500, 2)
    assert np.all(np.linalg.norm(pts, axis=1) <= 2.5)


def test_conjugate_exponents_exact():
    for p1, p2 in [(1.5, 2.0), (1.3, 2.7), (1.9, 1.95)]:
        pp = PhaseParams(1.0, 2.0, p1, p2)
        assert abs(1 / p1 + 1 / pp.q2 - 1) <= 1e-12 and abs(1 / p2 + 1 / pp.q1 - 1) <= 1e-12


@pytest.mark.parametrize("kind,theta,y,phase", [
    ("laminate", 0.5, (0.5, 0.3), 1), ("laminate", 0.5, (0.05, 0.9), 2),
    ("disk", 0.25, (0.5, 0.5), 1), ("disk", 0.25, (0.9, 0.9), 2),
])
def test_indicator_examples(kind, theta, y, phase):
    assert core.indicator(MicroGeometry(kind, theta), np.array(y)) == phase


@pytest.mark.parametrize("x,eps,want", [((0.75, 0.25), 0.5, (0.5, 0.5)), ((0.0, 0.0), 0.3, (0.0, 0.0)),
                                        ((1.0, 1.0), 0.25, (0.0, 0.0))])
def test_wrap_examples(x, eps, want):
    np.testing.assert_allclose(core.wrap_periodic(np.array(x), eps), want, atol=1e-15)


def test_flux_and_energy_hand_values():
    lin = PhaseParams(1.0, 2.0, 2.0, 2.0)
    np.testing.assert_allclose(core.flux(lin, 1, np.array([3.0, 4.0])), [3.0, 4.0])
    assert core.energy_density(lin, 1, np.array([3.0, 4.0])) == pytest.approx(12.5)
    pp = PhaseParams(2.0, 2.0, 1.5, 1.5)
    np.testing.assert_allclose(core.flux(pp, 1, np.array([1.0, 0.0])), [2.0, 0.0])
    assert core.energy_density(pp, 1, np.array([1.0, 0.0])) == pytest.approx(4 / 3)
    assert core.energy_density(pp, 2, np.zeros(2)) == 0.0


def test_jacobian_hand_values(rng):
    pp = PhaseParams(1.0, 2.0, 1.5, 2.0)
    # tangential eigenvalue (p-1)|xi|^(p-2), normal |xi|^(p-2)
    np.testing.assert_allclose(core.flux_jacobian_regularized(pp, 1, np.array([1.0, 0.0]), 0.0),
                               np.diag([0.5, 1.0]), atol=1e-15)
    xi = rng.normal(size=(100, 2))
    for delta in (0.0, 0.3):
        np.testing.assert_allclose(core.flux_jacobian_regularized(pp, 2, xi, delta),
                                   np.broadcast_to(2 * np.eye(2), (100, 2, 2)))
    J = core.flux_jacobian_regularized(pp, 1, xi, 1e-3)
    np.testing.assert_array_equal(J, np.swapaxes(J, -1, -2))


def test_linear_monotonicity_is_quadratic_form(rng):
    pp = PhaseParams(2.0, 2.0, 2.0, 2.0)
    a, b = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    inner = np.sum((core.flux(pp, 1, a) - core.flux(pp, 1, b)) * (a - b), axis=1)
    np.testing.assert_allclose(inner, 2.0 * np.sum((a - b) ** 2, axis=1), rtol=1e-13)
    assert np.all(np.sum((core.flux(pp, 1, a) - core.flux(pp, 1, a)) * (a - a), axis=1) == 0)
