# Corrector errors for the layered benchmark (f = 1 on the unit square).
#
# u solves the homogenized problem; u_eps the fine problem with eps-periodic
# layers.  The corrector P(x/eps, M_eps grad u) should approach grad u_eps
# in each phase as eps shrinks.  Rerunning with the same inputs gives the
# same CSV bytes.

import time

from powerhom import MacroProblem, MicroGeometry, PhaseParams, StudySettings, corrector_study

pp = PhaseParams(1.0, 3.0, 1.5, 2.0)
lam = MicroGeometry("laminate", 0.5)
study = StudySettings(fine_mesh_n=128)

t = time.perf_counter()
rep = corrector_study(MacroProblem(128), pp, lam, [1 / 4, 1 / 8, 1 / 16], study)
print(f"study took {time.perf_counter() - t:.1f}s\n")
print(f"{'eps':>8} {'e1':>10} {'e2':>10} {'apriori1':>10} {'apriori2':>10}")
for r in rep.rows:
    print(f"{r['eps']:8.4f} {r['e1']:10.3e} {r['e2']:10.3e} {r['apriori1']:10.4f} {r['apriori2']:10.4f}")

with open("corrector_laminate.csv", "w", newline="") as fh:
    fh.write(rep.to_csv("demo"))
