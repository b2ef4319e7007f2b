"""Fine-scale and homogenized Dirichlet problems on the unit square."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .cell import SolverSettings, get_grid
from .core import MicroGeometry, PhaseParams
from .errors import (InvalidParameters, MaxIterExceeded, MeshNotNested, MeshTooCoarse,
                     NonFiniteEnergy, OutOfTable)
from .fem import Q1Grid, minimize_energy, solve_spd

MIN_ELEMENTS_PER_CELL = 8

DEFAULT_FIELD_SETTINGS = SolverSettings(tol=1e-10, max_iter=300)


def _sine_load(x):
    return 2 * math.pi ** 2 * np.sin(math.pi * x[:, 0]) * np.sin(math.pi * x[:, 1])


LOADS = {
    "constant": lambda x, value: np.full(len(x), float(value)),
    "sine": lambda x, value: float(value) * _sine_load(x),
}


@dataclass(frozen=True)
class MacroProblem:
    """Homogeneous Dirichlet problem on (0,1)^2 with load ``load`` scaled by ``value``.

    ``"sine"`` is ``2 pi^2 sin(pi x) sin(pi y)``, the Laplacian load of
    ``sin(pi x) sin(pi y)``.
    """
    mesh_n: int = 128
    load: str = "constant"
    value: float = 1.0

    def __post_init__(self):
        if self.mesh_n < 8:
            raise InvalidParameters("problem.mesh_n", "must be at least 8")
        if self.load not in LOADS:
            raise InvalidParameters("problem.load", f"unknown load {self.load!r}")
        if not math.isfinite(self.value):
            raise InvalidParameters("problem.value", "must be finite")

    @property
    def grid(self) -> Q1Grid:
        return get_grid(self.mesh_n, False)

    def f_at(self, x):
        return LOADS[self.load](x, self.value)

    def to_dict(self):
        return {"mesh_n": self.mesh_n, "load": self.load, "value": self.value}


@dataclass
class FieldSolution:
    u: np.ndarray          # full nodal vector, (n+1)^2, zero on the boundary
    grad_u: np.ndarray     # gradient at quadrature points, (4 n^2, 2)
    kind: str              # "macro" or "epsilon"
    mesh_n: int
    residual: float
    energy: float
    eps: float | None = None
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Q1Grid:
        return get_grid(self.mesh_n, False)

    @property
    def grad_elements(self):
        """Element-averaged gradient vectors."""
        return self.grid.element_mean(self.grad_u)

    @property
    def nodal(self):
        n = self.mesh_n + 1
        return self.u.reshape(n, n)


def cells_per_side(eps: float) -> int:
    k = int(round(1.0 / eps))
    if k < 1 or abs(k * eps - 1.0) > 1e-9:
        raise InvalidParameters("eps", f"must be the reciprocal of an integer, got {eps}")
    return k


def epsilon_phases(grid: Q1Grid, geom: MicroGeometry, eps: float):
    """Phase index at the quadrature points of a mesh nested in the eps-tiling."""
    k = cells_per_side(eps)
    if grid.n % k:
        raise MeshNotNested(f"mesh of {grid.n} elements does not nest {k} cells per side")
    return np.asarray(core.indicator(geom, grid.cell_local_qp(k)))


def solve_epsilon(problem: MacroProblem, params: PhaseParams, geom: MicroGeometry, eps: float,
                  settings: SolverSettings | None = None) -> FieldSolution:
    """Minimize ``sum W(x/eps, grad u) - int f u`` over zero-boundary bilinear fields."""
    settings = settings or DEFAULT_FIELD_SETTINGS
    k = cells_per_side(eps)
    if k < 2:
        raise InvalidParameters("eps", "need at least two cells per side")
    grid = problem.grid
    if grid.n % k:
        raise MeshNotNested(f"mesh of {grid.n} elements does not nest {k} cells per side")
    if grid.n // k < MIN_ELEMENTS_PER_CELL:
        raise MeshTooCoarse(f"{grid.n // k} elements per cell, need at least {MIN_ELEMENTS_PER_CELL}")
    phases = epsilon_phases(grid, geom, eps)
    F = grid.load_vector(problem.f_at(grid.qp_points))
    w = grid.qp_weights

    def energy(u, delta):
        return float(w @ core.regularized_energy(params, phases, grid.gradient(u), delta) - F @ u)

    def gradient(u, delta):
        return grid.apply_weak(core.regularized_flux(params, phases, grid.gradient(u), delta)) - F

    def hessian(u, delta):
        return grid.stiffness(core.flux_jacobian_regularized(params, phases, grid.gradient(u), delta))

    def residual(u):
        return float(np.linalg.norm(grid.apply_weak(core.flux(params, phases, grid.gradient(u))) - F))

    u0 = np.zeros(grid.n_dofs)
    if not np.any(F):
        u, res, it = u0, 0.0, 0
    else:
        out = minimize_energy(energy, gradient, hessian, u0, settings.newton(), residual)
        u, res, it = out.u, out.residual, out.iterations
    g = grid.gradient(u)
    E = float(w @ core.energy_density(params, phases, g) - F @ u)
    return FieldSolution(grid.expand(u), g, "epsilon", grid.n, res, E, eps=eps, iterations=it,
                         meta={"params": params.to_dict(), "geom": geom.to_dict(), "problem": problem.to_dict()})


def _spd_clip(J, floor):
    """Symmetric part of per-point 2x2 matrices with eigenvalues clipped below."""
    S = 0.5 * (J + np.swapaxes(J, -1, -2))
    vals, vecs = np.linalg.eigh(S)
    vals = np.maximum(vals, floor)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def solve_macro(problem: MacroProblem, hom_map, settings: SolverSettings | None = None) -> FieldSolution:
    """Solve ``-div b(grad u) = f`` with ``b`` supplied by a table or an exact evaluator.

    Newton iterations use the derivative of the interpolated flux; steps are
    damped by backtracking on the residual norm.
    """
    settings = settings or DEFAULT_FIELD_SETTINGS
    grid = problem.grid
    F = grid.load_vector(problem.f_at(grid.qp_points))
    w = grid.qp_weights

    def residual_vec(u):
        return grid.apply_weak(hom_map.flux(grid.gradient(u))) - F

    u = np.zeros(grid.n_dofs)
    r = residual_vec(u)
    rn = float(np.linalg.norm(r))
    it = 0
    while rn > settings.tol:
        if it >= settings.max_iter:
            raise MaxIterExceeded("macro Newton did not converge", rn)
        g = grid.gradient(u)
        J = hom_map.jacobian(g)
        scale = float(np.max(np.abs(J))) if J.size else 1.0
        K = grid.stiffness(_spd_clip(J, 1e-10 * max(scale, 1e-300)))
        d = solve_spd(K, -r, max(min(1e-3, rn), 1e-12), 20000)
        t, accepted = 1.0, False
        while t >= 1e-12:
            try:
                rt = residual_vec(u + t * d)
            except OutOfTable:
                t *= 0.5
                continue
            rtn = float(np.linalg.norm(rt))
            if rtn <= (1 - 1e-4 * t) * rn or rtn <= settings.tol:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            raise MaxIterExceeded("macro line search stalled", rn)
        u, r, rn = u + t * d, rt, rtn
    g = grid.gradient(u)
    E = float(w @ hom_map.energy(g) - F @ u)
    if not math.isfinite(E):
        raise NonFiniteEnergy("macro energy is not finite")
    return FieldSolution(grid.expand(u), g, "macro", grid.n, rn, E, iterations=it,
                         meta={"map": hom_map.header(), "problem": problem.to_dict()})


def apriori_norms(sol: FieldSolution, params: PhaseParams, geom: MicroGeometry, eps: float):
    """``(int chi_1^eps |grad u|^p1, int chi_2^eps |grad u|^p2)``."""
    grid = sol.grid
    phases = epsilon_phases(grid, geom, eps)
    mag = np.linalg.norm(sol.grad_u, axis=1)
    w = grid.qp_weights
    return (float(w @ np.where(phases == 1, mag ** params.p1, 0.0)),
            float(w @ np.where(phases == 2, mag ** params.p2, 0.0)))


def higher_integrability_check(sol: FieldSolution, params: PhaseParams) -> float:
    """``int |grad u|^p2`` over the domain."""
    return sol.grid.integrate(np.linalg.norm(sol.grad_u, axis=1) ** params.p2)


def save_field(sol: FieldSolution, path) -> None:
    """Header JSON line (``#``-prefixed), then one CSV row of nodal values per grid row."""
    header = {"format": "powerhom-field", "version": 1, "kind": sol.kind, "mesh_n": sol.mesh_n,
              "eps": sol.eps, "residual": sol.residual, "energy": sol.energy, "meta": sol.meta}
    rows = ["# " + json.dumps(header, sort_keys=True)]
    rows += [",".join(f"{v:.17g}" for v in row) for row in sol.nodal]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")


def load_field(path) -> FieldSolution:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline()[2:])
        nodal = np.loadtxt(fh, delimiter=",", ndmin=2)
    grid = get_grid(header["mesh_n"], False)
    u = nodal.ravel()
    return FieldSolution(u, grid.gradient_full(u), header["kind"], header["mesh_n"], header["residual"],
                         header["energy"], eps=header["eps"], meta=header["meta"])


def export_gradient_csv(sol: FieldSolution, path) -> None:
    """Point cloud ``x,y,gx,gy`` at quadrature points."""
    pts = sol.grid.qp_points
    lines = ["x,y,gx,gy"]
    lines += [",".join(f"{v:.17g}" for v in (*p, *g)) for p, g in zip(pts, sol.grad_u)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")
