"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> ... PASS|FAIL`` line.  The heavy
benchmark solves are shared between criteria through module fixtures.
"""
import math

import numpy as np
import pytest

from powerhom import core
from powerhom.cell import SolverSettings, solve_cell, solve_cell_laminate
from powerhom.cli import main
from powerhom.core import MicroGeometry, PhaseParams
from powerhom.correctors import (StudySettings, bound_report, corrector_study, homogenized_evaluator,
                                 local_average)
from powerhom.fem import Q1Grid
from powerhom.fields import MacroProblem, higher_integrability_check, solve_macro
from powerhom.homogenized import LaminateMap, audit_b_structure, b_eval, tabulate, whom_energy

SUBLINEAR = PhaseParams(1.0, 3.0, 1.5, 2.0)
MIXED = PhaseParams(1.0, 3.0, 1.5, 2.5)
LAM = MicroGeometry("laminate", 0.5)
DISK = MicroGeometry("disk", 0.25)
EPS = [1 / 4, 1 / 8, 1 / 16]
VERDICTS = []  # reported in the terminal summary by conftest


def verdict(n, title, ok, detail=""):
    line = f"ACCEPTANCE {n:>2} {title}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    assert ok, line


def rng(k):
    return np.random.default_rng(core.DEFAULT_SEED + k)


# -- shared benchmark runs ------------------------------------------------

class Bench:
    def __init__(self, geom, study):
        self.params, self.geom, self.study = SUBLINEAR, geom, study
        self.problem = MacroProblem(128)
        self.map = homogenized_evaluator(self.params, geom, study)
        self.macro = solve_macro(self.problem, self.map, study.fields)
        self.fine = {}
        self.report = corrector_study(self.problem, self.params, geom, EPS, study, macro=self.macro,
                                      fine_solutions=self.fine)


@pytest.fixture(scope="module")
def lam_bench():
    # 128 elements per side: 8 per cell at eps = 1/16
    return Bench(LAM, StudySettings(fine_mesh_n=128))


@pytest.fixture(scope="module")
def disk_bench():
    return Bench(DISK, StudySettings(fine_per_cell=16, table_R=0.25, table_h=1 / 128, xi_quantum=0.005))


# -- criteria -------------------------------------------------------------

def test_01_zero_corrector_oracle():
    worst_u, worst_b = 0.0, 0.0
    for p in (1.5, 2.0, 3.0):
        pp = PhaseParams(1.0, 1.0, p, p)
        for xi in core.sample_ball(rng(1), 10, 3.0):
            expected = np.linalg.norm(xi) ** (p - 2) * xi
            for geom in (DISK, LAM):
                s = solve_cell(pp, geom, xi, SolverSettings(grid_n=32))
                worst_u = max(worst_u, float(np.max(np.abs(s.upsilon))))
                worst_b = max(worst_b, float(np.linalg.norm(s.b - expected) / np.linalg.norm(expected)))
    verdict(1, "zero corrector in a uniform medium", worst_u <= 1e-7 and worst_b <= 1e-6,
            f"max|upsilon|={worst_u:.2e} (<=1e-7), max rel b err={worst_b:.2e} (<=1e-6)")


def test_02_linear_laminate_closed_form():
    pp = PhaseParams(1.0, 2.0, 2.0, 2.0)
    want = {(1.0, 0.0): np.array([4 / 3, 0.0]), (0.0, 1.0): np.array([0.0, 1.5])}
    err1d, errgrid = 0.0, 0.0
    for xi, b in want.items():
        err1d = max(err1d, float(np.max(np.abs(solve_cell(pp, LAM, xi).b - b))))
        g = solve_cell(pp, LAM, xi, SolverSettings(grid_n=64), backend="grid2d")
        errgrid = max(errgrid, float(np.linalg.norm(g.b - b) / np.linalg.norm(b)))
    verdict(2, "linear laminate closed form", err1d <= 1e-10 and errgrid <= 1e-3,
            f"1D abs err={err1d:.2e} (<=1e-10), grid n=64 rel err={errgrid:.2e} (<=1e-3)")


def test_03_backend_equivalence():
    worst_P, worst_b = 0.0, 0.0
    for xi in core.sample_ball(rng(3), 5, 3.0):
        ex = solve_cell_laminate(SUBLINEAR, 0.5, xi)
        g = solve_cell(SUBLINEAR, LAM, xi, SolverSettings(grid_n=128), backend="grid2d")
        P_ex = np.where((g.phases == 1)[:, None], [ex.extra["t1"], xi[1]], [ex.extra["t2"], xi[1]])
        scale = np.max(np.linalg.norm(P_ex, axis=1))
        worst_P = max(worst_P, float(np.max(np.linalg.norm(g.P_field - P_ex, axis=1)) / scale))
        worst_b = max(worst_b, float(np.linalg.norm(g.b - ex.b) / np.linalg.norm(ex.b)))
    verdict(3, "grid backend vs 1D oracle", worst_P <= 1e-3 and worst_b <= 1e-3,
            f"phase-wise P rel err={worst_P:.2e}, b rel err={worst_b:.2e} (both <=1e-3)")


def test_04_mean_value_property():
    lam_err, grid_err = 0.0, 0.0
    for pp in (SUBLINEAR, MIXED):
        for xi in core.sample_ball(rng(4), 20, 5.0):
            lam_err = max(lam_err, float(np.max(np.abs(solve_cell(pp, LAM, xi).mean_P - xi))))
        for geom in (LAM, DISK):
            for xi in core.sample_ball(rng(40), 4, 3.0):
                s = solve_cell(pp, geom, xi, SolverSettings(grid_n=64), backend="grid2d")
                grid_err = max(grid_err, float(np.max(np.abs(s.mean_P - xi))))
    verdict(4, "mean value of P equals xi", lam_err <= 1e-10 and grid_err <= 1e-5,
            f"laminate={lam_err:.2e} (<=1e-10), grid n=64={grid_err:.2e} (<=1e-5)")


def test_05_monotonicity_audits():
    lines, ok = [], True
    for pp in (SUBLINEAR, MIXED):
        a = core.audit_structure_conditions(pp, n_samples=1000, seed=core.DEFAULT_SEED)
        table = tabulate(pp, DISK, R=2.0, h_xi=0.25, settings=SolverSettings(grid_n=16))
        for name, ev in (("laminate", LaminateMap(pp, 0.5)), ("disk-table", table)):
            b = audit_b_structure(ev, n_samples=500, seed=core.DEFAULT_SEED, tol_mono=1e-8)
            ok &= b.sign_violations == 0
            lines.append(f"b[{pp.p2},{name}]={b.sign_violations}")
        ok &= a.sign_violations == 0
        lines.append(f"A[{pp.p2}]={a.sign_violations}")
    verdict(5, "monotonicity audits", ok, "violations " + " ".join(lines))


def test_06_gradient_consistency():
    h = 1e-4
    st = SolverSettings(grid_n=32, tol=1e-10)
    grid_err = 0.0
    for xi in core.sample_ball(rng(6), 20, 2.0):
        fd = np.array([(whom_energy(SUBLINEAR, DISK, xi + h * e, st) - whom_energy(SUBLINEAR, DISK, xi - h * e, st))
                       / (2 * h) for e in np.eye(2)])
        b = b_eval(SUBLINEAR, DISK, xi, st)
        grid_err = max(grid_err, float(np.linalg.norm(fd - b) / np.linalg.norm(b)))
    lam_err = 0.0
    hl = 1e-5
    for xi in core.sample_ball(rng(60), 20, 3.0):
        fd = np.array([(whom_energy(MIXED, LAM, xi + hl * e) - whom_energy(MIXED, LAM, xi - hl * e)) / (2 * hl)
                       for e in np.eye(2)])
        b = b_eval(MIXED, LAM, xi)
        lam_err = max(lam_err, float(np.linalg.norm(fd - b) / np.linalg.norm(b)))
    pt_err = 0.0
    xs = core.sample_ball(rng(61), 100, 3.0)
    for pp in (SUBLINEAR, MIXED):
        for phase in (1, 2):
            fd = np.stack([(core.energy_density(pp, phase, xs + hl * e) - core.energy_density(pp, phase, xs - hl * e))
                           / (2 * hl) for e in np.eye(2)], -1)
            f = core.flux(pp, phase, xs)
            pt_err = max(pt_err, float(np.max(np.linalg.norm(fd - f, axis=1) / np.linalg.norm(f, axis=1))))
    verdict(6, "energy gradients match fluxes", grid_err <= 1e-3 and lam_err <= 1e-6 and pt_err <= 1e-6,
            f"grid={grid_err:.2e} (<=1e-3), laminate={lam_err:.2e} (<=1e-6), pointwise={pt_err:.2e} (<=1e-6)")


def _decay(report, n_eps):
    ok, parts = True, []
    for col in ("e1", "e2"):
        e = report.column(col)[:n_eps]
        strict = bool(np.all(np.diff(e) < 0))
        ok &= strict
        parts.append(f"{col}=" + ",".join(f"{v:.2e}" for v in e))
        if n_eps == 3:
            ok &= e[2] <= 0.6 * e[0]
    return ok, " ".join(parts)


def test_07_corrector_decay(lam_bench, disk_bench):
    ok_l, dl = _decay(lam_bench.report, 3)
    ok_d, dd = _decay(disk_bench.report, 2)
    verdict(7, "corrector error decays", ok_l and ok_d, f"laminate[{dl}] disk[{dd}]")


def test_08_fluctuation_lower_bound(lam_bench, disk_bench):
    ok, parts = True, []
    for name, b in (("laminate", lam_bench), ("disk", disk_bench)):
        for q in sorted({2.0, b.params.p2}):
            for D in ("omega", "left_half"):
                rep = bound_report(b.problem, b.params, b.geom, D, q, [1 / 16], b.study, macro=b.macro,
                                   fine_solutions=b.fine)
                r = rep.rows[0]
                ratios = (r["rhs1"] / r["lhs1"], r["rhs2"] / r["lhs2"])
                ok &= min(ratios) >= 0.95
                parts.append(f"{name}/q={q:g}/{D}: {ratios[0]:.4f},{ratios[1]:.4f}")
    # both benchmarks have p2 = 2, so q = p2 is exercised on the mixed laminate
    prob = MacroProblem(128)
    study = StudySettings(fine_mesh_n=128)
    u = solve_macro(prob, LaminateMap(MIXED, 0.5))
    fine = {}
    for q in (2.0, MIXED.p2):
        for D in ("omega", "left_half"):
            r = bound_report(prob, MIXED, LAM, D, q, [1 / 16], study, macro=u, fine_solutions=fine).rows[0]
            ratios = (r["rhs1"] / r["lhs1"], r["rhs2"] / r["lhs2"])
            ok &= min(ratios) >= 0.95
            parts.append(f"mixed-laminate/q={q:g}/{D}: {ratios[0]:.4f},{ratios[1]:.4f}")
    # uniform control: the bound is an equality in the limit
    pp = PhaseParams(1.0, 1.0, 1.5, 1.5)
    u = solve_macro(prob, LaminateMap(pp, 0.5))
    fine = {}
    for D in ("omega", "left_half"):
        r = bound_report(prob, pp, LAM, D, 2.0, [1 / 16], study, macro=u, fine_solutions=fine).rows[0]
        gaps = (abs(r["gap1"]) / r["lhs1"], abs(r["gap2"]) / r["lhs2"])
        ok &= max(gaps) <= 0.05
        parts.append(f"control/{D}: |gap|/lhs={max(gaps):.4f}")
    verdict(8, "fluctuation lower bound at eps=1/16 (ratio rhs/lhs >= 0.95)", ok, "; ".join(parts))


def test_09_apriori_uniformity(lam_bench, disk_bench):
    ok, parts = True, []
    for name, b in (("laminate", lam_bench), ("disk", disk_bench)):
        for col in ("apriori1", "apriori2"):
            v = b.report.column(col)
            ok &= v.max() / v.min() < 2 and bool(np.all(v <= 2 * v[0]))
            parts.append(f"{name}/{col} max/min={v.max() / v.min():.3f}")
    verdict(9, "a-priori norms uniform in eps", ok, " ".join(parts))


def test_10_higher_integrability(lam_bench, disk_bench):
    ok, parts = True, []
    for name, b in (("laminate", lam_bench), ("disk", disk_bench)):
        coarse = solve_macro(MacroProblem(64), b.map, b.study.fields)
        i64 = higher_integrability_check(coarse, b.params)
        i128 = higher_integrability_check(b.macro, b.params)
        change = abs(i128 - i64) / i128
        ok &= change < 0.05
        parts.append(f"{name}: {change:.2%}")
    verdict(10, "int |grad u|^p2 stable from mesh 64 to 128 (<5%)", ok, " ".join(parts))


def test_11_local_average_properties():
    g = Q1Grid(64, False)
    const = np.full((g.n_qp, 2), math.pi)
    exact = all(np.all(local_average(const, g, e)[0] == math.pi) for e in (1 / 2, 1 / 4, 1 / 8))
    r = rng(11)
    jensen = True
    for _ in range(50):
        v = r.normal(size=(g.n_qp, 2)) * r.uniform(0.1, 10)
        eps = r.choice([1 / 2, 1 / 4, 1 / 8])
        avg, _ = local_average(v, g, eps)
        for s in (1.5, 2.0, 3.0):
            jensen &= g.integrate(np.linalg.norm(avg, axis=1) ** s) <= g.integrate(np.linalg.norm(v, axis=1) ** s)
    x = g.qp_points
    smooth = np.column_stack([np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
                              np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])])
    errs = [math.sqrt(g.integrate(np.sum((local_average(smooth, g, e)[0] - smooth) ** 2, axis=1)))
            for e in (1 / 2, 1 / 4, 1 / 8)]
    decreasing = errs[0] > errs[1] > errs[2]
    verdict(11, "local average operator", exact and jensen and decreasing,
            f"constants exact={exact}, Jensen on 50 fields={jensen}, L2 errors=" + ",".join(f"{e:.3e}" for e in errs))


def test_12_cli_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("\n".join([
        "seed = 20100915",
        "params.sigma1 = 1.0", "params.sigma2 = 3.0", "params.p1 = 1.5", "params.p2 = 2.0",
        'geometry.kind = "disk"', "geometry.theta1 = 0.25",
        "study.mesh_n = 32", "study.fine_per_cell = 8", "study.table_R = 0.25", "study.table_h = 0.03125",
        "solver.grid_n = 8",
        "experiment.eps_list = [0.5, 0.25]", ""]))
    payloads = []
    for k, workers in enumerate(("1", "1", "3")):
        out = tmp_path / f"run{k}"
        assert main(["corrector-study", "--config", str(cfg), "--out", str(out), "--workers", workers]) == 0
        payloads.append(next(out.glob("corrector_*.csv")).read_bytes())
    same = payloads[0] == payloads[1] == payloads[2]
    verdict(12, "byte-identical corrector-study CSV", same, f"{len(payloads)} runs, {len(payloads[0])} bytes")
