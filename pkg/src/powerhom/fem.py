"""Bilinear finite elements on uniform square grids and a damped Newton minimizer.

Two node layouts share the same element/quadrature family:

* periodic: ``n x n`` nodes on the unit torus (cell problems);
* dirichlet: ``(n+1) x (n+1)`` nodes on a square with the boundary nodes
  eliminated (field problems).

Quadrature points are stored element-major, four 2x2 Gauss points per element,
elements numbered ``i + n*j`` with ``i`` running along the first axis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .errors import MaxIterExceeded, NonFiniteEnergy

log = logging.getLogger(__name__)

_G = 0.5 / np.sqrt(3.0)
# local Gauss point offsets in [0,1]^2, ordered (s,t)
GAUSS_ST = np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G],
                     [0.5 - _G, 0.5 + _G], [0.5 + _G, 0.5 + _G]])


class Q1Grid:
    """Uniform ``n x n`` bilinear mesh of the square ``[0, length]^2``."""

    def __init__(self, n: int, periodic: bool, length: float = 1.0):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = int(n)
        self.periodic = bool(periodic)
        self.length = float(length)
        self.h = self.length / self.n

    def __repr__(self):
        kind = "periodic" if self.periodic else "dirichlet"
        return f"Q1Grid(n={self.n}, {kind}, length={self.length})"

    @property
    def n_elements(self) -> int:
        return self.n * self.n

    @property
    def n_qp(self) -> int:
        return 4 * self.n_elements

    @property
    def n_nodes_side(self) -> int:
        return self.n if self.periodic else self.n + 1

    @property
    def n_dofs(self) -> int:
        if self.periodic:
            return self.n * self.n
        return (self.n - 1) ** 2

    @cached_property
    def element_ij(self):
        j, i = np.divmod(np.arange(self.n_elements), self.n)
        return i, j

    @cached_property
    def qp_local(self):
        """Element-local offsets (s, t) in [0,1]^2 for every quadrature point."""
        return np.tile(GAUSS_ST, (self.n_elements, 1))

    @cached_property
    def qp_points(self):
        i, j = self.element_ij
        st = self.qp_local
        x = (np.repeat(i, 4) + st[:, 0]) * self.length / self.n
        y = (np.repeat(j, 4) + st[:, 1]) * self.length / self.n
        return np.column_stack([x, y])

    @cached_property
    def qp_weights(self):
        return np.full(self.n_qp, 0.25 * self.h * self.h)

    @cached_property
    def element_centers(self):
        i, j = self.element_ij
        return np.column_stack([(i + 0.5) * self.h, (j + 0.5) * self.h])

    @cached_property
    def node_points(self):
        m = self.n_nodes_side
        j, i = np.divmod(np.arange(m * m), m)
        return np.column_stack([i * self.h, j * self.h])

    @cached_property
    def free_nodes(self):
        """Indices (into the full node list) of the unknowns."""
        m = self.n_nodes_side
        if self.periodic:
            return np.arange(m * m)
        j, i = np.divmod(np.arange(m * m), m)
        return np.flatnonzero((i > 0) & (i < m - 1) & (j > 0) & (j < m - 1))

    def _element_nodes(self):
        i, j = self.element_ij
        m = self.n_nodes_side
        if self.periodic:
            ip, jp = (i + 1) % self.n, (j + 1) % self.n
        else:
            ip, jp = i + 1, j + 1
        return np.column_stack([i + m * j, ip + m * j, i + m * jp, ip + m * jp])

    @cached_property
    def _operators(self):
        conn = self._element_nodes()
        st = GAUSS_ST
        s, t = st[:, 0], st[:, 1]
        # local shape functions and derivatives, shape (4 qp, 4 nodes)
        N = np.column_stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
        dNx = np.column_stack([-(1 - t), 1 - t, -t, t]) / self.h
        dNy = np.column_stack([-(1 - s), -s, 1 - s, s]) / self.h
        ne = self.n_elements
        rows = (4 * np.arange(ne)[:, None, None] + np.arange(4)[None, :, None]).repeat(4, axis=2)
        cols = np.broadcast_to(conn[:, None, :], (ne, 4, 4))
        n_full = self.n_nodes_side ** 2
        shape = (self.n_qp, n_full)

        def build(local):
            vals = np.broadcast_to(local[None], (ne, 4, 4))
            return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)

        full = [build(N), build(dNx), build(dNy)]
        free = self.free_nodes
        return tuple(m[:, free].tocsr() for m in full) + tuple(full)

    @property
    def N(self):
        """Shape-function values at quadrature points (n_qp x n_dofs)."""
        return self._operators[0]

    @property
    def Gx(self):
        return self._operators[1]

    @property
    def Gy(self):
        return self._operators[2]

    @property
    def Gx_full(self):
        return self._operators[4]

    @property
    def Gy_full(self):
        return self._operators[5]

    def gradient(self, u):
        """Gradient of the FE function with free-dof values ``u`` at quadrature points."""
        return np.column_stack([self.Gx @ u, self.Gy @ u])

    def gradient_full(self, u_nodes):
        return np.column_stack([self.Gx_full @ u_nodes, self.Gy_full @ u_nodes])

    def expand(self, u):
        """Full nodal vector from free-dof values (zero on eliminated nodes)."""
        full = np.zeros(self.n_nodes_side ** 2)
        full[self.free_nodes] = u
        return full

    def apply_weak(self, vec):
        """``sum_q w_q (vec_q, grad phi_i)`` for every free test function."""
        w = self.qp_weights
        return self.Gx.T @ (w * vec[:, 0]) + self.Gy.T @ (w * vec[:, 1])

    def stiffness(self, mats):
        """Assemble ``sum_q w_q grad(phi_i)^T M_q grad(phi_j)`` for per-qp 2x2 matrices."""
        w = self.qp_weights
        Gx, Gy = self.Gx, self.Gy
        K = (Gx.T @ sp.diags(w * mats[:, 0, 0]) @ Gx
             + Gx.T @ sp.diags(w * mats[:, 0, 1]) @ Gy
             + Gy.T @ sp.diags(w * mats[:, 1, 0]) @ Gx
             + Gy.T @ sp.diags(w * mats[:, 1, 1]) @ Gy)
        return K.tocsr()

    def load_vector(self, f_qp):
        """``int f phi_i`` from load values at quadrature points."""
        return self.N.T @ (self.qp_weights * f_qp)

    def integrate(self, values):
        return float(np.dot(self.qp_weights, values))

    def element_mean(self, qp_values):
        """Average of per-qp values over each element."""
        v = np.asarray(qp_values)
        return v.reshape((self.n_elements, 4) + v.shape[1:]).mean(axis=1)

    def cell_local_qp(self, cells_per_side: int):
        """Quadrature points in rescaled cell coordinates when the mesh nests
        ``cells_per_side`` periodic cells per side.

        Computed with integer arithmetic so that the points coincide bit for
        bit with those of a periodic grid of ``n // cells_per_side`` elements.
        """
        m = self.n // cells_per_side
        if m * cells_per_side != self.n:
            raise ValueError("mesh is not nested in the cell tiling")
        i, j = self.element_ij
        li, lj = np.repeat(i % m, 4), np.repeat(j % m, 4)
        st = self.qp_local
        return np.column_stack([(li + st[:, 0]) / m, (lj + st[:, 1]) / m])

    def cell_local_index(self, cells_per_side: int):
        """For each qp, (cell index, index of the matching qp in an m x m periodic grid)."""
        m = self.n // cells_per_side
        if m * cells_per_side != self.n:
            raise ValueError("mesh is not nested in the cell tiling")
        i, j = self.element_ij
        cell = (i // m) + cells_per_side * (j // m)
        local_elem = (i % m) + m * (j % m)
        q = np.tile(np.arange(4), self.n_elements)
        return np.repeat(cell, 4), 4 * np.repeat(local_elem, 4) + q


@dataclass
class NewtonSettings:
    tol: float = 1e-7
    max_iter: int = 200
    delta_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
    cg_rtol: float = 1e-3
    cg_maxiter: int = 20000
    armijo: float = 1e-4


@dataclass
class NewtonResult:
    u: np.ndarray
    residual: float
    iterations: int
    energies: list = field(default_factory=list)
    stage_energies: dict = field(default_factory=dict)


def _jacobi(K):
    d = K.diagonal().copy()
    d[d <= 0] = 1.0
    inv = 1.0 / d
    return LinearOperator(K.shape, matvec=lambda r: inv * r, dtype=float)


def solve_spd(K, rhs, rtol, maxiter, project=None):
    """Jacobi-preconditioned conjugate gradients for the (semi)definite Newton system."""
    if project is not None:
        rhs = project(rhs)
    x, info = cg(K, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, M=_jacobi(K))
    if info < 0:
        raise NonFiniteEnergy("conjugate gradients broke down")
    if project is not None:
        x = project(x)
    return x


def minimize_energy(energy, gradient, hessian, u0, settings: NewtonSettings, final_residual,
                    project=None):
    """Damped Newton with continuation in the regularization parameter.

    ``energy(u, delta)``, ``gradient(u, delta)`` and ``hessian(u, delta)``
    describe the regularized discrete energy; ``final_residual(u)`` is the
    unregularized residual norm used for termination.
    """
    u = np.array(u0, dtype=float)
    if project is not None:
        u = project(u)
    tol = settings.tol
    it = 0
    energies = []
    stage_energies = {}
    schedule = list(settings.delta_schedule)

    def newton_stage(u, delta, stage_tol, it):
        E = energy(u, delta)
        if not np.isfinite(E):
            raise NonFiniteEnergy(f"energy is not finite at stage delta={delta}")
        hist = [E]
        while True:
            g = gradient(u, delta)
            if project is not None:
                g = project(g)
            gn = float(np.linalg.norm(g))
            if gn <= stage_tol:
                return u, hist, it
            if it >= settings.max_iter:
                raise MaxIterExceeded(f"Newton did not converge at delta={delta}", final_residual(u))
            H = hessian(u, delta)
            rtol = max(min(settings.cg_rtol, gn), 1e-12)
            d = solve_spd(H, -g, rtol, settings.cg_maxiter, project)
            slope = float(np.dot(g, d))
            if slope >= 0:
                d, slope = -g, -gn * gn
            t = 1.0
            # rounding slack: near convergence the decrease falls below ulp(E)
            slack = 1e-14 * max(1.0, abs(E))
            while True:
                trial = u + t * d
                Et = energy(trial, delta)
                if np.isfinite(Et) and Et <= E + settings.armijo * t * slope + slack:
                    break
                t *= 0.5
                if t < 1e-14:
                    break
            it += 1
            if t < 1e-14:
                # no measurable decrease left: energy is flat to rounding
                log.debug("line search stalled at delta=%g, |g|=%.3e", delta, gn)
                return u, hist, it
            u, E = trial, Et
            hist.append(E)

    for k, delta in enumerate(schedule):
        last = k == len(schedule) - 1
        stage_tol = tol if last else max(tol, 1e-3 * delta)
        u, hist, it = newton_stage(u, delta, stage_tol, it)
        energies.extend(hist)
        stage_energies[delta] = hist

    res = final_residual(u)
    if res > tol:
        # polish on the last stage with the exact residual as the target
        delta = schedule[-1]
        for _ in range(5):
            u, hist, it = newton_stage(u, delta, 0.1 * tol, it)
            stage_energies.setdefault(delta, []).extend(hist)
            res = final_residual(u)
            if res <= tol:
                break
    if res > tol:
        raise MaxIterExceeded("unregularized residual above tolerance", res)
    return NewtonResult(u, res, it, energies, stage_energies)
