"""Homogenized flux ``b(xi) = int_Y A(y, P(y, xi)) dy``, its energy, tables and audits."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core
from .cell import (GRID2D, LAMINATE1D, SolverSettings, laminate_phase_values, solve_cell)
from .core import DISK, LAMINATE, AuditReport, MicroGeometry, PhaseParams
from .errors import InvalidParameters, OutOfTable


def b_eval(params: PhaseParams, geom: MicroGeometry, xi, settings: SolverSettings | None = None,
           backend: str | None = None):
    """Homogenized flux at a single gradient."""
    return solve_cell(params, geom, xi, settings, backend).b


def whom_energy(params: PhaseParams, geom: MicroGeometry, xi, settings: SolverSettings | None = None,
                backend: str | None = None) -> float:
    """Minimum cell energy ``int_Y W(y, P(y, xi)) dy``; its gradient in ``xi`` is ``b``."""
    return solve_cell(params, geom, xi, settings, backend).energy


# -- symmetry -------------------------------------------------------------

def _symmetry_ops(geom: MicroGeometry, mode: str):
    """Orthogonal maps R with b(R xi) = R b(xi) for the discrete cell."""
    ops = [np.diag([s1, s2]) for s1 in (1.0, -1.0) for s2 in (1.0, -1.0)]
    if mode == "odd":
        return [np.eye(2), -np.eye(2)]
    if geom.kind == DISK:
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        ops = ops + [swap @ S for S in ops]
    return ops


def canonical_xi(geom: MicroGeometry, xi):
    """Representative of ``xi`` under the cell's reflection symmetries.

    Quantities invariant under those reflections (energies, phase moments)
    only need to be computed at the representative.
    """
    xi = np.abs(np.asarray(xi, dtype=float))
    if geom.kind == DISK:
        xi = np.sort(xi, axis=-1)[..., ::-1]
    return xi


# -- tables ---------------------------------------------------------------

@dataclass
class HomogenizedMap:
    params: PhaseParams
    geom: MicroGeometry
    R: float
    h_xi: float
    nodes: np.ndarray
    b_values: np.ndarray  # (m, m, 2), indexed [k1, k2]
    w_values: np.ndarray  # (m, m)
    backend: str
    settings: SolverSettings
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.nodes.size

    def _locate(self, xi):
        xi = np.asarray(xi, dtype=float)
        if np.any(np.abs(xi) > self.R * (1 + 1e-12)):
            worst = float(np.max(np.abs(xi)))
            raise OutOfTable(f"|xi|_inf = {worst:.4g} exceeds table range R = {self.R}")
        u = (np.clip(xi, -self.R, self.R) + self.R) / self.h_xi
        k = np.clip(np.floor(u).astype(int), 0, self.m - 2)
        return k, u - k

    def flux(self, xi):
        """Bilinear interpolation of the tabulated flux."""
        k, s = self._locate(xi)
        return _bilinear(self.b_values, k, s)

    def energy(self, xi):
        k, s = self._locate(xi)
        return _bilinear(self.w_values[..., None], k, s)[..., 0]

    def jacobian(self, xi):
        """Derivative of the piecewise-bilinear interpolant, cell by cell."""
        k, s = self._locate(xi)
        B = self.b_values
        k1, k2, s1, s2 = k[..., 0], k[..., 1], s[..., 0:1], s[..., 1:2]
        b00, b10 = B[k1, k2], B[k1 + 1, k2]
        b01, b11 = B[k1, k2 + 1], B[k1 + 1, k2 + 1]
        d1 = ((1 - s2) * (b10 - b00) + s2 * (b11 - b01)) / self.h_xi
        d2 = ((1 - s1) * (b01 - b00) + s1 * (b11 - b10)) / self.h_xi
        return np.stack([d1, d2], axis=-1)

    def header(self):
        return {"format": "powerhom-bmap", "version": 1, "params": self.params.to_dict(),
                "geom": self.geom.to_dict(), "R": self.R, "h_xi": self.h_xi, "backend": self.backend,
                "settings": self.settings.to_dict()}


def _bilinear(values, k, s):
    k1, k2 = k[..., 0], k[..., 1]
    s1, s2 = s[..., 0:1], s[..., 1:2]
    return ((1 - s1) * (1 - s2) * values[k1, k2] + s1 * (1 - s2) * values[k1 + 1, k2]
            + (1 - s1) * s2 * values[k1, k2 + 1] + s1 * s2 * values[k1 + 1, k2 + 1])


def b_interp(hmap: HomogenizedMap, xi):
    return hmap.flux(xi)


def _table_nodes(R, h_xi):
    if not (R > 0 and h_xi > 0):
        raise InvalidParameters("table", "R and h_xi must be positive")
    m2 = 2 * R / h_xi
    half = int(round(R / h_xi))
    if abs(m2 - 2 * half) > 1e-9 * max(1.0, m2):
        raise InvalidParameters("table.h_xi", "R must be an integer multiple of h_xi")
    # symmetric construction so that the table has an exact zero node and mirror pairs
    return np.arange(-half, half + 1) * h_xi


def tabulate(params: PhaseParams, geom: MicroGeometry, R: float = 4.0, h_xi: float = 0.25,
             settings: SolverSettings | None = None, backend: str | None = None,
             workers: int = 1, symmetry: str = "full", spot_checks: int = 3, seed: int = core.DEFAULT_SEED
             ) -> HomogenizedMap:
    """Tabulate ``b`` and the homogenized energy on ``[-R, R]^2`` with step ``h_xi``.

    Nodes related by a cell symmetry are filled from one solve (``symmetry``
    is ``"odd"`` for ``b(-xi) = -b(xi)`` only, ``"full"`` for the reflection
    group of the cell).  A few mirrored nodes are re-solved directly and
    compared as a spot check.
    """
    settings = settings or SolverSettings()
    if backend is None:
        backend = LAMINATE1D if geom.kind == LAMINATE else GRID2D
    nodes = _table_nodes(R, h_xi)
    m = nodes.size
    half = (m - 1) // 2
    K1, K2 = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    ops = _symmetry_ops(geom, symmetry)
    # integer node offsets transform exactly under signed permutations
    offs = np.stack([K1 - half, K2 - half], axis=-1).reshape(-1, 2)
    images = [offs @ Rm.T.astype(int) for Rm in ops]
    rep = np.full(len(offs), -1)
    rep_op = np.zeros(len(offs), dtype=int)
    lin = lambda o: (o[:, 0] + half) * m + (o[:, 1] + half)
    for idx in range(len(offs)):
        if rep[idx] >= 0:
            continue
        for o_i, img in enumerate(images):
            j = lin(img[idx:idx + 1])[0]
            if rep[j] < 0:
                rep[j] = idx
                rep_op[j] = o_i
    reps = np.unique(rep)
    xis = nodes[offs[reps] + half]

    if backend == LAMINATE1D:
        P1, P2, _ = laminate_phase_values(params, geom.theta1, xis)
        th = geom.theta1
        b_rep = th * core.flux(params, 1, P1) + (1 - th) * core.flux(params, 2, P2)
        w_rep = th * core.energy_density(params, 1, P1) + (1 - th) * core.energy_density(params, 2, P2)
    else:
        def work(x):
            sol = solve_cell(params, geom, x, settings, backend)
            return sol.b, sol.energy
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(work, xis))
        b_rep = np.array([r[0] for r in results])
        w_rep = np.array([r[1] for r in results])

    pos = np.searchsorted(reps, rep)
    b_flat = np.empty((len(offs), 2))
    w_flat = np.empty(len(offs))
    for o_i, Rm in enumerate(ops):
        sel = rep_op == o_i
        b_flat[sel] = b_rep[pos[sel]] @ Rm.T
        w_flat[sel] = w_rep[pos[sel]]
    b_values = b_flat.reshape(m, m, 2)
    w_values = w_flat.reshape(m, m)
    b_values[half, half] = 0.0
    w_values[half, half] = 0.0

    hmap = HomogenizedMap(params, geom, float(R), float(h_xi), nodes, b_values, w_values, backend, settings,
                          provenance={"n_solves": int(len(reps)), "symmetry": symmetry})
    mirrored = np.flatnonzero(rep != np.arange(len(offs)))
    if spot_checks and mirrored.size:
        rng = np.random.default_rng(seed)
        picks = rng.choice(mirrored, size=min(spot_checks, mirrored.size), replace=False)
        worst = 0.0
        for idx in picks:
            x = nodes[offs[idx] + half]
            direct = b_eval(params, geom, x, settings, backend)
            scale = max(1.0, float(np.linalg.norm(direct)))
            worst = max(worst, float(np.linalg.norm(direct - b_flat[idx])) / scale)
        hmap.provenance["symmetry_spot_check"] = worst
        if worst > max(1e-6, 100 * settings.tol):
            raise AssertionError(f"symmetry spot check failed: deviation {worst:.3e}")
    return hmap


class LaminateMap:
    """Exact homogenized map of a layered cell, evaluated pointwise by the 1D reduction.

    Offers the same ``flux``/``energy``/``jacobian`` surface as a table.
    """

    def __init__(self, params: PhaseParams, theta1: float):
        self.params = params
        self.geom = MicroGeometry(LAMINATE, theta1)
        self.backend = LAMINATE1D

    def flux(self, xi):
        P1, P2, _ = laminate_phase_values(self.params, self.geom.theta1, xi)
        th = self.geom.theta1
        return th * core.flux(self.params, 1, P1) + (1 - th) * core.flux(self.params, 2, P2)

    def energy(self, xi):
        P1, P2, _ = laminate_phase_values(self.params, self.geom.theta1, xi)
        th = self.geom.theta1
        return th * core.energy_density(self.params, 1, P1) + (1 - th) * core.energy_density(self.params, 2, P2)

    def jacobian(self, xi):
        """Central differences of :meth:`flux` with a step relative to ``|xi|``."""
        xi = np.asarray(xi, dtype=float)
        step = 1e-6 * np.maximum(np.linalg.norm(xi, axis=-1), 1e-6)[..., None]
        cols = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1.0
            cols.append((self.flux(xi + step * e) - self.flux(xi - step * e)) / (2 * step))
        return np.stack(cols, axis=-1)

    def header(self):
        return {"format": "powerhom-laminate-exact", "params": self.params.to_dict(), "geom": self.geom.to_dict()}


def save_table(hmap: HomogenizedMap, path) -> None:
    """One JSON header line (prefixed ``#``) followed by CSV rows ``xi1,xi2,b1,b2,W``."""
    lines = ["# " + json.dumps(hmap.header(), sort_keys=True), "xi1,xi2,b1,b2,W"]
    for k1, x1 in enumerate(hmap.nodes):
        for k2, x2 in enumerate(hmap.nodes):
            b = hmap.b_values[k1, k2]
            lines.append(",".join(f"{v:.17g}" for v in (x1, x2, b[0], b[1], hmap.w_values[k1, k2])))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")


def load_table(path) -> HomogenizedMap:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing table header")
        header = json.loads(first[2:])
        if header.get("format") != "powerhom-bmap" or header.get("version") != 1:
            raise ValueError(f"{path}: unsupported table format")
        data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    nodes = _table_nodes(header["R"], header["h_xi"])
    m = nodes.size
    s = dict(header["settings"])
    s["delta_schedule"] = tuple(s["delta_schedule"])
    return HomogenizedMap(PhaseParams(**header["params"]), MicroGeometry(**header["geom"]), header["R"],
                          header["h_xi"], nodes, data[:, 2:4].reshape(m, m, 2).copy(),
                          data[:, 4].reshape(m, m).copy(), header["backend"], SolverSettings(**s))


# -- audits ---------------------------------------------------------------

def _mix(params, theta1, x1, x2):
    """``1 + theta1|x1|^p1 + theta2|x1|^p2 + theta1|x2|^p1 + theta2|x2|^p2``."""
    th2 = 1 - theta1
    n1, n2 = np.linalg.norm(x1, axis=-1), np.linalg.norm(x2, axis=-1)
    return (1 + theta1 * n1 ** params.p1 + th2 * n1 ** params.p2
            + theta1 * n2 ** params.p1 + th2 * n2 ** params.p2)


def continuity_bound_b(params: PhaseParams, theta1: float, x1, x2):
    """Right side of the Hölder continuity estimate for ``b`` with unit constant."""
    p1, p2 = params.p1, params.p2
    d = np.linalg.norm(np.asarray(x1) - np.asarray(x2), axis=-1)
    Q = _mix(params, theta1, x1, x2)
    first = d ** ((p1 - 1) / (3 - p1)) * Q ** ((2 - p1) * (p1 - 1) / (p1 * (3 - p1)))
    if p2 <= 2:
        second = d ** ((p2 - 1) / (3 - p2)) * Q ** ((2 - p2) * (p2 - 1) / (p2 * (3 - p2)))
    else:
        second = d ** (1 / (p2 - 1)) * Q ** ((p2 - 2) / (p2 - 1))
    return first + second


def lemma1_bound(params: PhaseParams, theta1: float, xi):
    n = np.linalg.norm(xi, axis=-1)
    return 1 + n ** params.p1 * theta1 + n ** params.p2 * (1 - theta1)


def lemma2_bound(params: PhaseParams, theta1: float, x1, x2):
    """Right side (unit constant, unit cell) of the corrector difference estimate."""
    p1, p2 = params.p1, params.p2
    th1, th2 = theta1, 1 - theta1
    d = np.linalg.norm(np.asarray(x1) - np.asarray(x2), axis=-1)
    Q = _mix(params, theta1, x1, x2)
    t1 = th1 ** (1 / (3 - p1)) * d ** (p1 / (3 - p1)) * Q ** ((2 - p1) / (3 - p1))
    if p2 <= 2:
        e2 = 2 * p2 - p1 * p2 + p1
        e3 = 2 * p1 - p1 * p2 + p2
        t2 = th2 ** (p1 / e2) * d ** (p1 * p2 / e2) * Q ** (p2 * (2 - p1) / e2)
        t3 = th1 ** (p2 / e3) * d ** (p1 * p2 / e3) * Q ** (p1 * (2 - p2) / e3)
        t4 = th2 ** (1 / (3 - p2)) * d ** (p2 / (3 - p2)) * Q ** ((2 - p2) / (3 - p2))
    else:
        e2 = 2 * p2 - p1
        t2 = th2 ** (p1 / e2) * d ** (p1 * p2 / e2) * Q ** (2 * (p2 - p1) / e2)
        t3 = th1 * d ** p1
        t4 = th2 ** (1 / (p2 - 1)) * d ** (p2 / (p2 - 1)) * Q ** ((p2 - 2) / (p2 - 1))
    return t1 + t2 + t3 + t4


def _as_flux_fn(evaluator, settings=None):
    if hasattr(evaluator, "flux"):
        return evaluator.flux, evaluator.params, evaluator.geom
    raise InvalidParameters("evaluator", "needs a flux(xi) method")


def audit_b_structure(evaluator, n_samples: int = 500, seed: int = core.DEFAULT_SEED, radius: float = 5.0,
                      tol_mono: float = 1e-8) -> AuditReport:
    """Monotonicity sign and continuity ratios of a homogenized map on random pairs.

    ``evaluator`` is a :class:`HomogenizedMap`, a :class:`LaminateMap` or any
    object with ``flux``, ``params`` and ``geom``.  Pairs are drawn in the
    ball of the given radius (clipped to a table's range).
    """
    if n_samples < 1:
        raise InvalidParameters("n_samples", "must be at least 1")
    flux_fn, params, geom = _as_flux_fn(evaluator)
    if isinstance(evaluator, HomogenizedMap):
        radius = min(radius, evaluator.R)
    rng = np.random.default_rng(seed)
    x1 = core.sample_ball(rng, n_samples, radius)
    x2 = core.sample_ball(rng, n_samples, radius)
    b1, b2 = flux_fn(x1), flux_fn(x2)
    inner = np.sum((b2 - b1) * (x2 - x1), axis=-1)
    scale = 1.0 + np.linalg.norm(b1, axis=-1) * np.linalg.norm(x1, axis=-1) \
        + np.linalg.norm(b2, axis=-1) * np.linalg.norm(x2, axis=-1)
    bad = np.flatnonzero(inner < -tol_mono * scale)
    report = AuditReport("structure_b", n_samples, seed, sign_violations=int(bad.size))
    for k in bad[:5]:
        report.failures.append({"xi1": x1[k].tolist(), "xi2": x2[k].tolist(), "inner": float(inner[k])})
    d = np.linalg.norm(x1 - x2, axis=-1)
    ok = d > 0
    ratio = np.linalg.norm(b1 - b2, axis=-1)[ok] / continuity_bound_b(params, geom.theta1, x1[ok], x2[ok])
    report.stats = {"form": "sublinear" if params.p2 <= 2 else "mixed",
                    "conb_ratio_max": float(ratio.max()) if ratio.size else 0.0,
                    "inner_min": float(inner.min()), "radius": radius}
    report.conA_ratio_max = report.stats["conb_ratio_max"]
    if ratio.size and not np.isfinite(ratio.max()):
        report.failures.append({"reason": "continuity ratio is not finite"})
    return report


def _phase_power_sum(sol_fields, weights, phases, params):
    mag = np.linalg.norm(sol_fields, axis=-1)
    expo = np.where(phases == 1, params.p1, params.p2)
    return float(weights @ mag ** expo)


def audit_corrector_integrals(params: PhaseParams, geom: MicroGeometry, n_samples: int = 50,
                              seed: int = core.DEFAULT_SEED, settings: SolverSettings | None = None,
                              radius: float = 5.0, cap: float = 1e3, backend: str | None = None) -> AuditReport:
    """Both sides of the corrector integral estimates with unit constant.

    Left sides: ``sum_i int_Y chi_i |P(y, xi)|^p_i`` and
    ``sum_i int_Y chi_i |P(y, xi1) - P(y, xi2)|^p_i``.  The observed
    left/right ratios must stay below ``cap``.
    """
    if n_samples < 1:
        raise InvalidParameters("n_samples", "must be at least 1")
    settings = settings or SolverSettings()
    rng = np.random.default_rng(seed)
    x1 = core.sample_ball(rng, n_samples, radius)
    x2 = core.sample_ball(rng, n_samples, radius)
    report = AuditReport("corrector_integrals", n_samples, seed)
    r1, r2 = [], []
    for a, b in zip(x1, x2):
        sa = solve_cell(params, geom, a, settings, backend)
        sb = solve_cell(params, geom, b, settings, backend)
        lhs1 = _phase_power_sum(sa.P_field, sa.weights, sa.phases, params)
        lhs2 = _phase_power_sum(sa.P_field - sb.P_field, sa.weights, sa.phases, params)
        r1.append(lhs1 / float(lemma1_bound(params, geom.theta1, a)))
        rhs2 = float(lemma2_bound(params, geom.theta1, a, b))
        r2.append(lhs2 / rhs2 if rhs2 > 0 else 0.0)
    r1, r2 = np.array(r1), np.array(r2)
    report.stats = {"lemma1_ratio_max": float(r1.max()), "lemma2_ratio_max": float(r2.max()),
                    "lemma2_form": "sublinear" if params.p2 <= 2 else "mixed", "cap": cap}
    for name, r in (("lemma1", r1), ("lemma2", r2)):
        over = np.flatnonzero(~(r <= cap))
        for k in over[:5]:
            report.failures.append({"estimate": name, "xi1": x1[k].tolist(), "xi2": x2[k].tolist(),
                                    "ratio": float(r[k])})
    return report
