import math

import numpy as np
import pytest

from powerhom.fem import NewtonSettings, Q1Grid, minimize_energy, solve_spd
from powerhom.errors import MaxIterExceeded


def sine(x):
    return np.sin(math.pi * x[..., 0]) * np.sin(math.pi * x[..., 1])


@pytest.mark.parametrize("periodic", [True, False])
def test_counts_and_weights(periodic):
    g = Q1Grid(8, periodic)
    assert g.n_qp == 4 * 64
    assert g.qp_weights.sum() == pytest.approx(1.0)
    assert g.n_dofs == (64 if periodic else 49)


def test_gradient_of_linear_field_is_exact():
    g = Q1Grid(6, False, length=1.0)
    X = g.node_points
    u = 2.0 * X[:, 0] - 3.0 * X[:, 1]
    np.testing.assert_allclose(g.gradient_full(u), np.tile([2.0, -3.0], (g.n_qp, 1)), atol=1e-12)


def test_dirichlet_energy_of_sine():
    # int |grad sin(pi x) sin(pi y)|^2 = pi^2 / 2
    vals = []
    for n in (16, 32, 64):
        g = Q1Grid(n, False)
        gu = g.gradient_full(sine(g.node_points))
        vals.append(g.integrate(np.sum(gu ** 2, axis=1)))
    errs = np.abs(np.array(vals) - math.pi ** 2 / 2)
    assert errs[-1] < 1e-2 and errs[1] < errs[0] and errs[2] < errs[1]


def test_periodic_stiffness_kernel_is_constants():
    g = Q1Grid(8, True)
    K = g.stiffness(np.broadcast_to(np.eye(2), (g.n_qp, 2, 2)))
    np.testing.assert_allclose(K @ np.ones(g.n_dofs), 0.0, atol=1e-12)
    assert abs(K - K.T).max() < 1e-14


def test_poisson_manufactured_solution():
    # -Lap u = 2 pi^2 sin sin  ->  u = sin sin; error drops at second order
    errs = []
    for n in (8, 16, 32):
        g = Q1Grid(n, False)
        K = g.stiffness(np.broadcast_to(np.eye(2), (g.n_qp, 2, 2)))
        F = g.load_vector(2 * math.pi ** 2 * sine(g.qp_points))
        u = g.expand(solve_spd(K, F, 1e-12, 5000))
        errs.append(np.max(np.abs(u - sine(g.node_points))))
    assert errs[2] < errs[1] < errs[0]
    assert errs[1] / errs[2] > 3.0


def test_cell_local_qp_is_bitwise_consistent():
    g = Q1Grid(32, False)
    loc = g.cell_local_qp(4)
    np.testing.assert_allclose(loc, (g.qp_points * 4) % 1.0, atol=1e-14)
    cell, qp = g.cell_local_index(4)
    np.testing.assert_array_equal(loc, Q1Grid(8, True).qp_points[qp])
    assert cell.max() == 15 and qp.max() == 4 * 64 - 1


def test_element_mean_and_integrate():
    g = Q1Grid(4, False)
    v = np.arange(g.n_qp, dtype=float)
    np.testing.assert_allclose(g.element_mean(v), v.reshape(-1, 4).mean(axis=1))
    assert g.integrate(np.ones(g.n_qp)) == pytest.approx(1.0)


def test_minimize_energy_quadratic():
    # energy 0.5 u.Au - b.u with a small SPD A
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    from scipy.sparse import csr_matrix
    out = minimize_energy(lambda u, d: 0.5 * u @ A @ u - b @ u, lambda u, d: A @ u - b,
                          lambda u, d: csr_matrix(A), np.zeros(2), NewtonSettings(1e-12, 20, (1e-2,)),
                          lambda u: float(np.linalg.norm(A @ u - b)))
    np.testing.assert_allclose(out.u, np.linalg.solve(A, b), atol=1e-10)


def test_minimize_energy_reports_max_iter():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    from scipy.sparse import csr_matrix
    with pytest.raises(MaxIterExceeded) as exc:
        minimize_energy(lambda u, d: 0.5 * u @ A @ u - b @ u, lambda u, d: A @ u - b,
                        lambda u, d: csr_matrix(A), np.zeros(2), NewtonSettings(1e-12, 0, (1e-2,)),
                        lambda u: float(np.linalg.norm(A @ u - b)))
    assert exc.value.residual > 0


def test_energy_descends_within_each_stage():
    from powerhom import core
    pp = core.PhaseParams(1.0, 3.0, 1.5, 2.0)
    g = Q1Grid(12, False)
    phases = np.where(g.qp_points[:, 0] < 0.5, 1, 2)
    F = g.load_vector(np.ones(g.n_qp))
    w = g.qp_weights
    out = minimize_energy(
        lambda u, d: float(w @ core.regularized_energy(pp, phases, g.gradient(u), d) - F @ u),
        lambda u, d: g.apply_weak(core.regularized_flux(pp, phases, g.gradient(u), d)) - F,
        lambda u, d: g.stiffness(core.flux_jacobian_regularized(pp, phases, g.gradient(u), d)),
        np.zeros(g.n_dofs), NewtonSettings(1e-10, 200, (1e-1, 1e-3, 1e-6, 1e-8)),
        lambda u: float(np.linalg.norm(g.apply_weak(core.flux(pp, phases, g.gradient(u))) - F)))
    assert out.residual <= 1e-10
    for hist in out.stage_energies.values():
        assert all(b <= a + 1e-14 * max(1.0, abs(a)) for a, b in zip(hist, hist[1:]))
