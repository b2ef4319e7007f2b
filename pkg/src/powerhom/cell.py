"""Periodic cell problems for a prescribed macroscopic gradient.

Two backends produce the same :class:`CellSolution` surface:

* ``laminate1d``: the exact reduction for layered cells.  The corrector only
  varies across the layers, so ``P`` is constant in each phase and the whole
  problem collapses to scalar flux continuity across the interface.
* ``grid2d``: minimization of the discrete cell energy over zero-mean periodic
  bilinear fields, by damped Newton with regularization continuation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import elementwise

from . import core
from .core import LAMINATE, MicroGeometry, PhaseParams
from .errors import InvalidParameters, MaxIterExceeded
from .fem import NewtonSettings, Q1Grid, minimize_energy

LAMINATE1D = "laminate1d"
GRID2D = "grid2d"

DEFAULT_DELTAS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-7
    max_iter: int = 200
    delta_schedule: tuple = DEFAULT_DELTAS
    grid_n: int = 64
    laminate_tol: float = 1e-9

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidParameters("settings.tol", "must be positive")
        if not self.laminate_tol > 0:
            raise InvalidParameters("settings.laminate_tol", "must be positive")
        if self.max_iter < 1:
            raise InvalidParameters("settings.max_iter", "must be at least 1")
        ds = tuple(float(d) for d in self.delta_schedule)
        object.__setattr__(self, "delta_schedule", ds)
        if not ds or any(b >= a for a, b in zip(ds, ds[1:])):
            raise InvalidParameters("settings.delta_schedule", "must be strictly decreasing")
        if ds[-1] > 1e-8 or ds[-1] < 0:
            raise InvalidParameters("settings.delta_schedule", "last entry must lie in [0, 1e-8]")
        if self.grid_n < 2:
            raise InvalidParameters("settings.grid_n", "must be at least 2")

    def newton(self) -> NewtonSettings:
        return NewtonSettings(tol=self.tol, max_iter=self.max_iter, delta_schedule=self.delta_schedule)

    def to_dict(self):
        return {"tol": self.tol, "max_iter": self.max_iter, "delta_schedule": list(self.delta_schedule),
                "grid_n": self.grid_n, "laminate_tol": self.laminate_tol}


@lru_cache(maxsize=32)
def get_grid(n: int, periodic: bool) -> Q1Grid:
    return Q1Grid(n, periodic)


@dataclass
class CellSolution:
    xi: np.ndarray
    backend: str
    params: PhaseParams
    geom: MicroGeometry
    qp: np.ndarray
    weights: np.ndarray
    phases: np.ndarray
    P_field: np.ndarray
    flux_field: np.ndarray
    upsilon: np.ndarray
    residual: float
    tol: float
    grid_n: int | None = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def b(self):
        """Cell average of the flux, the homogenized flux at ``xi``."""
        return self.weights @ self.flux_field

    @property
    def mean_P(self):
        return self.weights @ self.P_field

    @property
    def energy(self):
        return float(self.weights @ core.energy_density(self.params, self.phases, self.P_field))

    def phase_moment(self, q: float):
        """``(int_Y chi_1 |P|^q, int_Y chi_2 |P|^q)``."""
        mag = np.linalg.norm(self.P_field, axis=1) ** q
        return tuple(float(self.weights @ np.where(self.phases == i, mag, 0.0)) for i in (1, 2))


# -- laminate backend -----------------------------------------------------

def _layer_flux(sigma, p, t, s):
    """Normal flux ``sigma (t^2 + s^2)^((p-2)/2) t`` (zero at t = s = 0)."""
    r2 = t * t + s * s
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, sigma * safe ** (0.5 * (p - 2.0)) * t, 0.0)


def laminate_phase_gradients(params: PhaseParams, theta1: float, xi):
    """Normal gradient components ``(t1, t2)`` in each layer and the flux defect.

    Vectorized over leading axes of ``xi``.  ``t2`` is eliminated through the
    zero-mean constraint ``theta1 t1 + theta2 t2 = xi_1``, leaving one strictly
    increasing scalar equation in ``t1`` bracketed by ``[0, |xi_1| / theta1]``.
    """
    xi = np.asarray(xi, dtype=float)
    theta2 = 1.0 - theta1
    a = np.abs(xi[..., 0])
    s = np.abs(xi[..., 1])
    s1, s2, p1, p2 = params.sigma1, params.sigma2, params.p1, params.p2

    def h(t1, a, s):
        return _layer_flux(s1, p1, t1, s) - _layer_flux(s2, p2, (a - theta1 * t1) / theta2, s)

    flat_a, flat_s = a.ravel(), s.ravel()
    t1 = np.zeros_like(flat_a)
    live = flat_a > 0
    if np.any(live):
        res = elementwise.find_root(
            h, (np.zeros(live.sum()), flat_a[live] / theta1), args=(flat_a[live], flat_s[live]),
            tolerances=dict(xatol=0.0, xrtol=4 * np.finfo(float).eps, fatol=0.0, frtol=0.0), maxiter=200)
        # bracket exhaustion at machine precision is reported as non-success;
        # the caller judges convergence by the flux defect
        if not np.all(np.isfinite(res.x)):
            raise MaxIterExceeded("laminate root-find produced non-finite values")
        t1[live] = res.x
    t1 = t1.reshape(a.shape) * np.sign(xi[..., 0])
    t2 = (xi[..., 0] - theta1 * t1) / theta2
    defect = np.abs(_layer_flux(s1, p1, t1, s) - _layer_flux(s2, p2, t2, s))
    return t1, t2, defect


def laminate_phase_values(params: PhaseParams, theta1: float, xi):
    """Constant corrector values ``P1, P2`` (shape ``xi.shape``) in each layer."""
    xi = np.asarray(xi, dtype=float)
    t1, t2, defect = laminate_phase_gradients(params, theta1, xi)
    P1 = np.stack([t1, xi[..., 1]], axis=-1)
    P2 = np.stack([t2, xi[..., 1]], axis=-1)
    return P1, P2, defect


def _laminate_bounds(theta1):
    return 0.5 - 0.5 * theta1, 0.5 + 0.5 * theta1


def laminate_upsilon(y1, t1, t2, xi1, theta1):
    """Exact zero-mean periodic corrector potential of a layered cell."""
    a, b = _laminate_bounds(theta1)
    d1, d2 = t1 - xi1, t2 - xi1
    y1 = np.asarray(y1, dtype=float)
    v = np.where(y1 < a, d2 * y1,
                 np.where(y1 < b, d2 * a + d1 * (y1 - a), d2 * a + d1 * (b - a) + d2 * (y1 - b)))
    # mean of the primitive: int_0^1 (1 - y) v'(y) dy
    def w(lo, hi):
        return (hi - lo) - 0.5 * (hi * hi - lo * lo)
    mean = d2 * w(0.0, a) + d1 * w(a, b) + d2 * w(b, 1.0)
    return v - mean


def solve_cell_laminate(params: PhaseParams, theta1: float, xi, tol: float = 1e-9,
                        n_samples: int = 64) -> CellSolution:
    """Exact cell solution for the layered microstructure with normal ``e1``."""
    geom = MicroGeometry(LAMINATE, theta1)
    xi = np.asarray(xi, dtype=float).reshape(2)
    if not np.all(np.isfinite(xi)):
        raise InvalidParameters("xi", "must be finite")
    t1, t2, defect = laminate_phase_gradients(params, theta1, xi)
    t1, t2, defect = float(t1), float(t2), float(defect)
    if defect > tol:
        raise MaxIterExceeded("laminate flux continuity not reached", defect)
    a, b = _laminate_bounds(theta1)
    qp = np.array([[0.5, 0.5], [0.5 * a, 0.5]])
    weights = np.array([theta1, 1.0 - theta1])
    phases = np.array([1, 2])
    P = np.array([[t1, xi[1]], [t2, xi[1]]])
    y1 = np.arange(n_samples) / n_samples
    return CellSolution(
        xi=xi, backend=LAMINATE1D, params=params, geom=geom, qp=qp, weights=weights,
        phases=phases, P_field=P, flux_field=core.flux(params, phases, P),
        upsilon=laminate_upsilon(y1, t1, t2, xi[0], theta1), residual=defect, tol=tol,
        extra={"t1": t1, "t2": t2})


# -- grid backend ---------------------------------------------------------

class _CellEnergy:
    """Discrete regularized cell energy and its derivatives in the periodic dofs."""

    def __init__(self, params, phases, grid, xi):
        self.params, self.phases, self.grid, self.xi = params, phases, grid, xi
        self.w = grid.qp_weights

    def field(self, u):
        return self.xi + self.grid.gradient(u)

    def energy(self, u, delta):
        return float(self.w @ core.regularized_energy(self.params, self.phases, self.field(u), delta))

    def gradient(self, u, delta):
        return self.grid.apply_weak(core.regularized_flux(self.params, self.phases, self.field(u), delta))

    def hessian(self, u, delta):
        J = core.flux_jacobian_regularized(self.params, self.phases, self.field(u), delta)
        return self.grid.stiffness(J)

    def residual(self, u):
        return float(np.linalg.norm(self.grid.apply_weak(core.flux(self.params, self.phases, self.field(u)))))


def _zero_mean(v):
    return v - v.mean()


def solve_cell_grid(params: PhaseParams, geom: MicroGeometry, xi, settings: SolverSettings | None = None,
                    upsilon0=None) -> CellSolution:
    """Minimize the discrete cell energy on an ``n x n`` periodic bilinear grid."""
    settings = settings or SolverSettings()
    xi = np.asarray(xi, dtype=float).reshape(2)
    if not np.all(np.isfinite(xi)):
        raise InvalidParameters("xi", "must be finite")
    n = settings.grid_n
    grid = get_grid(n, True)
    phases = core.indicator(geom, grid.qp_points)
    prob = _CellEnergy(params, phases, grid, xi)
    u0 = np.zeros(grid.n_dofs) if upsilon0 is None else np.asarray(upsilon0, dtype=float).ravel()
    if not np.any(xi):
        # P(y, 0) = 0: the zero field is the unique minimizer
        result_u, res, it = np.zeros(grid.n_dofs), 0.0, 0
    else:
        out = minimize_energy(prob.energy, prob.gradient, prob.hessian, u0, settings.newton(),
                              prob.residual, project=_zero_mean)
        result_u, res, it = out.u, out.residual, out.iterations
    P = prob.field(result_u)
    return CellSolution(
        xi=xi, backend=GRID2D, params=params, geom=geom, qp=grid.qp_points, weights=grid.qp_weights,
        phases=phases, P_field=P, flux_field=core.flux(params, phases, P), upsilon=result_u,
        residual=res, tol=settings.tol, grid_n=n, iterations=it)


def solve_cell(params: PhaseParams, geom: MicroGeometry, xi, settings: SolverSettings | None = None,
               backend: str | None = None) -> CellSolution:
    """Dispatch to the exact layered solver when possible, else the grid solver."""
    settings = settings or SolverSettings()
    if backend is None:
        backend = LAMINATE1D if geom.kind == LAMINATE else GRID2D
    if backend == LAMINATE1D:
        if geom.kind != LAMINATE:
            raise InvalidParameters("backend", "the 1D backend needs a laminate geometry")
        return solve_cell_laminate(params, geom.theta1, xi, settings.laminate_tol)
    if backend != GRID2D:
        raise InvalidParameters("backend", f"unknown backend {backend!r}")
    return solve_cell_grid(params, geom, xi, settings)


# -- evaluation -----------------------------------------------------------

def corrector_value(sol: CellSolution, y):
    """``P(y, xi)`` at cell points ``y`` (wrapped periodically)."""
    y = core.wrap_periodic(np.asarray(y, dtype=float))
    if sol.backend == LAMINATE1D:
        ph = np.asarray(core.indicator(sol.geom, y))
        return np.where((ph == 1)[..., None], sol.P_field[0], sol.P_field[1])
    n = sol.grid_n
    U = sol.upsilon.reshape(n, n)  # U[j, i]
    i = np.minimum((y[..., 0] * n).astype(int), n - 1)
    j = np.minimum((y[..., 1] * n).astype(int), n - 1)
    s = y[..., 0] * n - i
    t = y[..., 1] * n - j
    ip, jp = (i + 1) % n, (j + 1) % n
    u1, u2, u3, u4 = U[j, i], U[j, ip], U[jp, i], U[jp, ip]
    gx = ((1 - t) * (u2 - u1) + t * (u4 - u3)) * n
    gy = ((1 - s) * (u3 - u1) + s * (u4 - u2)) * n
    return sol.xi + np.stack([gx, gy], axis=-1)


def cell_residual(sol: CellSolution) -> float:
    """Norm of the weak cell residual recomputed from the stored corrector.

    For the grid backend this is the Euclidean norm of
    ``int_Y (A(y, xi + grad upsilon), grad phi_i) dy`` over the periodic
    nodal basis; for the layered backend it is the flux jump across the
    interface.
    """
    if sol.backend == LAMINATE1D:
        t1, t2 = sol.extra["t1"], sol.extra["t2"]
        s = abs(sol.xi[1])
        p = sol.params
        return float(abs(_layer_flux(p.sigma1, p.p1, t1, s) - _layer_flux(p.sigma2, p.p2, t2, s)))
    grid = get_grid(sol.grid_n, True)
    prob = _CellEnergy(sol.params, sol.phases, grid, sol.xi)
    return prob.residual(sol.upsilon)


def with_upsilon(sol: CellSolution, upsilon) -> CellSolution:
    """Copy of a grid solution with a replaced corrector potential (fields recomputed)."""
    if sol.backend != GRID2D:
        raise InvalidParameters("backend", "only grid solutions carry a nodal potential")
    grid = get_grid(sol.grid_n, True)
    P = sol.xi + grid.gradient(upsilon)
    new = replace(sol, upsilon=np.asarray(upsilon, dtype=float), P_field=P,
                  flux_field=core.flux(sol.params, sol.phases, P))
    new.residual = cell_residual(new)
    return new


# -- persistence ----------------------------------------------------------

_CELL_MAGIC = "powerhom-cell"
_ARRAYS = ("xi", "qp", "weights", "phases", "P_field", "flux_field", "upsilon")


def save_cell_solution(sol: CellSolution, path) -> None:
    """JSON header line followed by the raw little-endian float64 arrays, row-major."""
    arrays = {name: np.ascontiguousarray(getattr(sol, name), dtype="<f8") for name in _ARRAYS}
    layout, offset = [], 0
    for name, arr in arrays.items():
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": _CELL_MAGIC, "version": 1, "backend": sol.backend, "grid_n": sol.grid_n,
        "xi": sol.xi.tolist(), "residual": sol.residual, "tol": sol.tol, "iterations": sol.iterations,
        "params": sol.params.to_dict(), "geom": sol.geom.to_dict(), "extra": sol.extra,
        "arrays": layout, "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for arr in arrays.values():
            fh.write(arr.tobytes(order="C"))


def load_cell_solution(path) -> CellSolution:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != _CELL_MAGIC:
        raise ValueError(f"{path}: not a cell solution file")
    arrays = {}
    for item in header["arrays"]:
        count = math.prod(item["shape"])
        arrays[item["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                             offset=item["offset"]).reshape(item["shape"]).copy()
    arrays["phases"] = arrays["phases"].astype(int)
    return CellSolution(
        params=PhaseParams(**header["params"]), geom=MicroGeometry(**header["geom"]),
        backend=header["backend"], residual=header["residual"], tol=header["tol"],
        grid_n=header["grid_n"], iterations=header["iterations"], extra=header["extra"], **arrays)
