"""Local averages, corrector fields built from the homogenized solution, and
the two quantitative checks built on them: strong corrector errors and the
phase-wise lower bounds on gradient fluctuations.
"""
from __future__ import annotations

import csv
import io
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .cell import GRID2D, LAMINATE1D, SolverSettings, get_grid, laminate_phase_values, solve_cell
from .core import DISK, LAMINATE, MicroGeometry, PhaseParams
from .errors import InvalidParameters, MeshNotNested
from .fields import (DEFAULT_FIELD_SETTINGS, FieldSolution, MacroProblem, apriori_norms, cells_per_side,
                     epsilon_phases, solve_epsilon, solve_macro)
from .fem import Q1Grid
from .homogenized import LaminateMap, canonical_xi, tabulate


# -- regions --------------------------------------------------------------

def region_mask(D, grid: Q1Grid):
    """Boolean mask over elements for a region given as ``None``/``"omega"``,
    ``"left_half"``, a box ``(x0, x1, y0, y1)``, or a predicate on points."""
    c = grid.element_centers
    if D is None or (isinstance(D, str) and D == "omega"):
        return np.ones(grid.n_elements, dtype=bool)
    if isinstance(D, str):
        if D == "left_half":
            return c[:, 0] < 0.5
        raise InvalidParameters("D", f"unknown region {D!r}")
    if callable(D):
        return np.asarray(D(c), dtype=bool)
    x0, x1, y0, y1 = D
    return (c[:, 0] > x0) & (c[:, 0] < x1) & (c[:, 1] > y0) & (c[:, 1] < y1)


def region_name(D):
    if D is None:
        return "omega"
    if isinstance(D, str):
        return D
    if callable(D):
        return getattr(D, "__name__", "custom")
    return "box(" + ",".join(f"{v:g}" for v in D) + ")"


# -- local average --------------------------------------------------------

def local_average(values, grid: Q1Grid, eps: float, domain=None):
    """Piecewise-constant averages of a per-qp or per-element field over eps-cells.

    Cells not entirely contained in ``domain`` (an element mask or region,
    default the whole square) are excluded: their entries come back as NaN
    and ``covered`` is False there.  Returns ``(averaged, covered)`` with the
    input's shape.
    """
    k = cells_per_side(eps)
    if grid.n % k:
        raise MeshNotNested(f"mesh of {grid.n} elements does not nest {k} cells per side")
    m = grid.n // k
    v = np.asarray(values, dtype=float)
    per_qp = v.shape[0] == grid.n_qp
    if not per_qp and v.shape[0] != grid.n_elements:
        raise InvalidParameters("values", "expected one entry per quadrature point or per element")
    if per_qp:
        w = grid.qp_weights
        elem = np.repeat(np.arange(grid.n_elements), 4)
    else:
        w = np.full(grid.n_elements, grid.h * grid.h)
        elem = np.arange(grid.n_elements)
    i, j = grid.element_ij
    cell_of_elem = (i // m) + k * (j // m)
    cell = cell_of_elem[elem]
    inside = np.ones(grid.n_elements, dtype=bool) if domain is None else (
        domain if isinstance(domain, np.ndarray) and domain.dtype == bool else region_mask(domain, grid))
    cell_ok = np.ones(k * k, dtype=bool)
    np.logical_and.at(cell_ok, cell_of_elem, inside)
    flat = v.reshape(v.shape[0], -1)
    sums = np.zeros((k * k, flat.shape[1]))
    np.add.at(sums, cell, w[:, None] * flat)
    vol = np.bincount(cell, weights=w, minlength=k * k)
    avg = sums / vol[:, None]
    # cells holding a single repeated value return it bit for bit
    lo = np.full_like(sums, np.inf)
    hi = np.full_like(sums, -np.inf)
    np.minimum.at(lo, cell, flat)
    np.maximum.at(hi, cell, flat)
    same = lo == hi
    avg[same] = lo[same]
    avg[~cell_ok] = np.nan
    out = avg[cell].reshape(v.shape)
    return out, cell_ok[cell]


def cell_averages(values, grid: Q1Grid, eps: float):
    """Per-cell averages, shape ``(k*k, ...)``, cells numbered ``ci + k*cj``."""
    k = cells_per_side(eps)
    avg, _ = local_average(values, grid, eps)
    m = grid.n // k
    # representative element of each cell: its lower-left element
    ci, cj = np.divmod(np.arange(k * k), k)[::-1]
    elem = (ci * m) + grid.n * (cj * m)
    idx = 4 * elem if avg.shape[0] == grid.n_qp else elem
    return avg[idx]


# -- cell-solve cache -----------------------------------------------------

class CellCache:
    """Map from quantized gradients to cell solutions.

    Concurrent readers are fine; insertion is exclusive and the first stored
    solution for a key wins, even if a duplicate solve raced it.
    """

    def __init__(self, quantum: float = 0.0):
        self.quantum = float(quantum)
        self._store = {}
        self._lock = threading.Lock()
        self.solves = 0

    def key(self, xi, tag=()):
        xi = np.asarray(xi, dtype=float)
        if self.quantum > 0:
            q = np.round(xi / self.quantum).astype(np.int64)
            return tag + tuple(int(v) for v in q)
        return tag + tuple(float(v) for v in xi)

    def point(self, key):
        """Gradient represented by a key (the lattice point when quantized)."""
        vals = np.array(key[-2:], dtype=float)
        return vals * self.quantum if self.quantum > 0 else vals

    def get(self, key, solve):
        hit = self._store.get(key)
        if hit is not None:
            return hit
        value = solve()
        with self._lock:
            self.solves += 1
            return self._store.setdefault(key, value)

    def __len__(self):
        return len(self._store)


def _cell_settings_for(settings: SolverSettings, grid_n: int) -> SolverSettings:
    d = settings.to_dict()
    d["grid_n"] = grid_n
    d["delta_schedule"] = tuple(d["delta_schedule"])
    return SolverSettings(**d)


# -- corrector assembly ---------------------------------------------------

@dataclass
class CorrectorField:
    P: np.ndarray          # corrector at quadrature points of the target grid
    cell_xi: np.ndarray    # M_eps(grad u) per eps-cell
    mesh_n: int
    eps: float
    n_solves: int          # distinct cell problems behind P


def assemble_corrector(u: FieldSolution, params: PhaseParams, geom: MicroGeometry, eps: float,
                       settings: SolverSettings | None = None, target_mesh_n: int | None = None,
                       cache: CellCache | None = None, backend: str | None = None) -> CorrectorField:
    """Evaluate ``x -> P(x/eps, M_eps(grad u)(x))`` at the quadrature points of a target mesh.

    Both the macro mesh and the target mesh must nest the eps-tiling.  Grid
    cell solves use as many elements per side as the target mesh has per
    eps-cell, so cell and target quadrature points coincide.
    """
    settings = settings or SolverSettings()
    k = cells_per_side(eps)
    target_n = target_mesh_n or u.mesh_n
    target = get_grid(target_n, False)
    if target_n % k or u.mesh_n % k:
        raise MeshNotNested("macro and target meshes must nest the eps-tiling")
    if backend is None:
        backend = LAMINATE1D if geom.kind == LAMINATE else GRID2D
    cell_xi = cell_averages(u.grad_u, u.grid, eps)
    cell_of_qp, local_qp = target.cell_local_index(k)
    m = target_n // k
    cache = cache if cache is not None else CellCache()
    if backend == LAMINATE1D:
        phases = epsilon_phases(target, geom, eps)
        P1, P2, _ = laminate_phase_values(params, geom.theta1, cell_xi)
        P = np.where((phases == 1)[:, None], P1[cell_of_qp], P2[cell_of_qp])
        return CorrectorField(P, cell_xi, target_n, eps, 0)
    cell_settings = _cell_settings_for(settings, m)
    tag = (backend, m)
    keys = [cache.key(x, tag) for x in cell_xi]
    sols = [cache.get(key, lambda x=x: solve_cell(params, geom, x, cell_settings, backend))
            for key, x in zip(keys, cell_xi)]
    fields = np.stack([s.P_field for s in sols])  # (k*k, 4 m^2, 2)
    P = fields[cell_of_qp, local_qp]
    # distinct keys rather than the cache counter, which concurrent callers share
    return CorrectorField(P, cell_xi, target_n, eps, len(set(keys)))


def corrector_error(u: FieldSolution, u_eps: FieldSolution, params: PhaseParams, geom: MicroGeometry,
                    eps: float, settings: SolverSettings | None = None, corrector: CorrectorField | None = None,
                    cache: CellCache | None = None):
    """``(e_1, e_2)`` with ``e_i = int chi_i^eps |P_eps(x, M_eps grad u) - grad u_eps|^p_i``."""
    if corrector is None:
        corrector = assemble_corrector(u, params, geom, eps, settings, u_eps.mesh_n, cache)
    if corrector.mesh_n != u_eps.mesh_n:
        raise MeshNotNested("corrector and fine solution live on different meshes")
    grid = u_eps.grid
    phases = epsilon_phases(grid, geom, eps)
    diff = np.linalg.norm(corrector.P - u_eps.grad_u, axis=1)
    w = grid.qp_weights
    return (float(w @ np.where(phases == 1, diff ** params.p1, 0.0)),
            float(w @ np.where(phases == 2, diff ** params.p2, 0.0)))


# -- study configuration --------------------------------------------------

@dataclass(frozen=True)
class StudySettings:
    """Discretization choices shared by the corrector and bound studies.

    The fine mesh has ``fine_mesh_n`` elements per side when given, otherwise
    ``fine_per_cell`` elements per eps-cell.  Non-layered media need a table
    of the homogenized map on ``[-table_R, table_R]^2`` with step ``table_h``.
    """
    cell: SolverSettings = field(default_factory=lambda: SolverSettings(grid_n=16))
    fields: SolverSettings = DEFAULT_FIELD_SETTINGS
    fine_mesh_n: int | None = None
    fine_per_cell: int = 16
    table_R: float = 0.25
    table_h: float = 1.0 / 128
    xi_quantum: float = 0.05
    workers: int = 1

    def fine_n(self, eps: float) -> int:
        k = cells_per_side(eps)
        n = self.fine_mesh_n if self.fine_mesh_n else k * self.fine_per_cell
        if n % k:
            raise MeshNotNested(f"fine mesh {n} does not nest {k} cells per side")
        return n

    def to_dict(self):
        d = asdict(self)
        d["cell"] = self.cell.to_dict()
        d["fields"] = self.fields.to_dict()
        return d


def homogenized_evaluator(params: PhaseParams, geom: MicroGeometry, study: StudySettings):
    """Exact layered map, or a tabulated map for grid-backed cells."""
    if geom.kind == LAMINATE:
        return LaminateMap(params, geom.theta1)
    return tabulate(params, geom, study.table_R, study.table_h, study.cell, workers=study.workers)


def _macro(problem, params, geom, study, macro=None):
    if macro is not None:
        return macro
    return solve_macro(problem, homogenized_evaluator(params, geom, study), study.fields)


# -- corrector study ------------------------------------------------------

@dataclass
class CorrectorReport:
    eps_list: list
    rows: list
    meta: dict

    COLUMNS = ("eps", "fine_mesh_n", "e1", "e2", "apriori1", "apriori2", "n_cell_solves")

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, config_hash: str = "") -> str:
        return _rows_csv(self.rows, self.COLUMNS, config_hash)


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _rows_csv(rows, columns, config_hash):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(("config_hash",) + tuple(columns))
    for r in rows:
        writer.writerow([config_hash] + [_fmt(r[c]) for c in columns])
    return buf.getvalue()


def corrector_study(problem: MacroProblem, params: PhaseParams, geom: MicroGeometry, eps_list,
                    study: StudySettings | None = None, macro: FieldSolution | None = None,
                    fine_solutions: dict | None = None) -> CorrectorReport:
    """Corrector errors and a-priori norms for each eps, from a single macro solution.

    ``fine_solutions`` maps ``(eps, mesh_n)`` to fine solutions; it is read
    before solving and filled afterwards, so later bound reports can reuse it.
    """
    study = study or StudySettings()
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise InvalidParameters("eps_list", "must not be empty")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidParameters("eps_list", "must be strictly decreasing")
    for e in eps_list:
        cells_per_side(e)
    u = _macro(problem, params, geom, study, macro)
    cache = CellCache()
    fine_solutions = {} if fine_solutions is None else fine_solutions

    def one(eps):
        fine = MacroProblem(study.fine_n(eps), problem.load, problem.value)
        u_eps = fine_solutions.get((eps, fine.mesh_n))
        if u_eps is None:
            u_eps = fine_solutions.setdefault((eps, fine.mesh_n),
                                              solve_epsilon(fine, params, geom, eps, study.fields))
        corr = assemble_corrector(u, params, geom, eps, study.cell, fine.mesh_n, cache)
        e1, e2 = corrector_error(u, u_eps, params, geom, eps, corrector=corr)
        a1, a2 = apriori_norms(u_eps, params, geom, eps)
        return {"eps": eps, "fine_mesh_n": fine.mesh_n, "e1": e1, "e2": e2, "apriori1": a1, "apriori2": a2,
                "n_cell_solves": corr.n_solves}

    with ThreadPoolExecutor(max_workers=max(1, study.workers)) as pool:
        rows = list(pool.map(one, eps_list))
    meta = {"params": params.to_dict(), "geom": geom.to_dict(), "problem": problem.to_dict(),
            "study": study.to_dict(), "macro_residual": u.residual, "macro_mesh_n": u.mesh_n}
    return CorrectorReport(eps_list, rows, meta)


# -- fluctuation bounds ---------------------------------------------------

def _laminate_moments(params, theta1, xi, q):
    P1, P2, _ = laminate_phase_values(params, theta1, xi)
    return theta1 * np.linalg.norm(P1, axis=-1) ** q, (1 - theta1) * np.linalg.norm(P2, axis=-1) ** q


def phase_moments(params: PhaseParams, geom: MicroGeometry, xi, q: float, settings: SolverSettings | None = None,
                  quantum: float = 0.0, cache: CellCache | None = None, backend: str | None = None):
    """``m_i(xi) = int_Y chi_i(y) |P(y, xi)|^q dy`` for each row of ``xi``.

    With ``quantum > 0`` grid-backed gradients are first rounded to the
    lattice of that step; cell solves are shared among gradients with the
    same rounded, symmetry-reduced representative.  The layered closed form
    is never quantized.
    """
    settings = settings or SolverSettings()
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if backend is None:
        backend = LAMINATE1D if geom.kind == LAMINATE else GRID2D
    if backend == LAMINATE1D:
        # closed form, no solves to share: evaluate at the exact gradients
        return _laminate_moments(params, geom.theta1, xi, q)
    if quantum > 0:
        xi = np.round(xi / quantum) * quantum
    cache = cache if cache is not None else CellCache(quantum)
    rep = canonical_xi(geom, xi)
    uniq, inv = np.unique(rep, axis=0, return_inverse=True)
    inv = inv.ravel()
    tag = ("moment", backend, settings.grid_n)
    vals = np.empty((len(uniq), 2))
    for r, x in enumerate(uniq):
        sol = cache.get(cache.key(x, tag), lambda x=x: solve_cell(params, geom, x, settings, backend))
        vals[r] = sol.phase_moment(q)
    return vals[inv, 0], vals[inv, 1]


def amplification_lhs(u: FieldSolution, params: PhaseParams, geom: MicroGeometry, D, q: float,
                      settings: SolverSettings | None = None, quantum: float = 0.05,
                      cache: CellCache | None = None, backend: str | None = None):
    """``(L_1, L_2)`` with ``L_i = int_D int_Y chi_i(y) |P(y, grad u(x))|^q dy dx``."""
    if not q > 1:
        raise InvalidParameters("q", "must exceed 1")
    grid = u.grid
    mask = np.repeat(region_mask(D, grid), 4)
    w = grid.qp_weights[mask]
    m1, m2 = phase_moments(params, geom, u.grad_u[mask], q, settings, quantum, cache, backend)
    return float(w @ m1), float(w @ m2)


def amplification_rhs(u_eps: FieldSolution, params: PhaseParams, geom: MicroGeometry, D, q: float, eps: float):
    """``(R_1, R_2)`` with ``R_i = int_D chi_i^eps |grad u_eps|^q``."""
    if not q > 1:
        raise InvalidParameters("q", "must exceed 1")
    grid = u_eps.grid
    mask = np.repeat(region_mask(D, grid), 4)
    phases = epsilon_phases(grid, geom, eps)[mask]
    mag = np.linalg.norm(u_eps.grad_u[mask], axis=1) ** q
    w = grid.qp_weights[mask]
    return float(w @ np.where(phases == 1, mag, 0.0)), float(w @ np.where(phases == 2, mag, 0.0))


@dataclass
class BoundReport:
    q: float
    region: str
    lhs: tuple
    rows: list
    slack: float
    meta: dict

    COLUMNS = ("eps", "fine_mesh_n", "q", "region", "lhs1", "lhs2", "rhs1", "rhs2", "gap1", "gap2",
               "status1", "status2")

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    @property
    def flagged(self):
        return [r["eps"] for r in self.rows if "fail" in (r["status1"], r["status2"])]

    @property
    def warnings(self):
        return [r["eps"] for r in self.rows if "warning" in (r["status1"], r["status2"])]

    @property
    def trend(self):
        """Change of ``RHS - LHS`` from the coarsest to the finest eps, per phase."""
        if len(self.rows) < 2:
            return (0.0, 0.0)
        a, b = self.rows[0], self.rows[-1]
        return (b["gap1"] - a["gap1"], b["gap2"] - a["gap2"])

    def to_csv(self, config_hash: str = "") -> str:
        return _rows_csv(self.rows, self.COLUMNS, config_hash)


def _status(lhs, rhs, slack):
    if rhs >= lhs:
        return "ok"
    if rhs >= (1 - slack) * lhs:
        return "warning"
    return "fail"


def bound_report(problem: MacroProblem, params: PhaseParams, geom: MicroGeometry, D, q: float, eps_list,
                 study: StudySettings | None = None, slack: float = 0.05, macro: FieldSolution | None = None,
                 fine_solutions: dict | None = None) -> BoundReport:
    """Left side once, right side per eps, with a status per eps and phase.

    ``ok`` means the lower bound already holds, ``warning`` that it is missed
    by less than ``slack`` (relative), ``fail`` anything worse.
    """
    study = study or StudySettings()
    u = _macro(problem, params, geom, study, macro)
    L = amplification_lhs(u, params, geom, D, q, study.cell, study.xi_quantum)
    fine_solutions = {} if fine_solutions is None else fine_solutions

    def one(eps):
        n = study.fine_n(eps)
        u_eps = fine_solutions.get((eps, n))
        if u_eps is None:
            u_eps = fine_solutions.setdefault(
                (eps, n), solve_epsilon(MacroProblem(n, problem.load, problem.value), params, geom, eps,
                                        study.fields))
        R = amplification_rhs(u_eps, params, geom, D, q, eps)
        return {"eps": eps, "fine_mesh_n": n, "q": q, "region": region_name(D), "lhs1": L[0], "lhs2": L[1],
                "rhs1": R[0], "rhs2": R[1], "gap1": R[0] - L[0], "gap2": R[1] - L[1],
                "status1": _status(L[0], R[0], slack), "status2": _status(L[1], R[1], slack)}

    with ThreadPoolExecutor(max_workers=max(1, study.workers)) as pool:
        rows = list(pool.map(one, [float(e) for e in eps_list]))
    meta = {"params": params.to_dict(), "geom": geom.to_dict(), "problem": problem.to_dict(),
            "study": study.to_dict(), "macro_mesh_n": u.mesh_n}
    return BoundReport(float(q), region_name(D), L, rows, slack, meta)
