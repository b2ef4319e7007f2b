# Phase-wise lower bounds on the fine-scale gradient.
#
# Left side: int_D int_Y chi_i |P(y, grad u)|^q, built from the homogenized
# solution.  Right side: int_D chi_i^eps |grad u_eps|^q from the fine
# solution.  The bound holds in the limit, so rhs/lhs should creep up to
# one (or above) as eps shrinks.

from powerhom import MacroProblem, MicroGeometry, PhaseParams, StudySettings, bound_report, solve_macro
from powerhom.correctors import homogenized_evaluator

pp = PhaseParams(1.0, 3.0, 1.5, 2.0)
problem = MacroProblem(128)

for geom, study in ((MicroGeometry("laminate", 0.5), StudySettings(fine_mesh_n=128)),
                    (MicroGeometry("disk", 0.25), StudySettings(fine_per_cell=16, xi_quantum=0.005))):
    u = solve_macro(problem, homogenized_evaluator(pp, geom, study), study.fields)
    fine = {}
    for D in ("omega", "left_half"):
        rep = bound_report(problem, pp, geom, D, 2.0, [1 / 4, 1 / 8, 1 / 16], study, macro=u, fine_solutions=fine)
        print(f"{geom.kind}, D = {D}: lhs = {rep.lhs[0]:.4e}, {rep.lhs[1]:.4e}")
        for r in rep.rows:
            print(f"   eps {r['eps']:.4f}  rhs/lhs {r['rhs1'] / r['lhs1']:.4f} {r['rhs2'] / r['lhs2']:.4f}"
                  f"  [{r['status1']}, {r['status2']}]")
