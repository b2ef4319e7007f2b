"""Periodic homogenization laboratory for two-phase power-law composites."""
from .core import (AuditReport, MicroGeometry, PhaseParams, audit_structure_conditions, energy_density, flux,
                   flux_jacobian_regularized, indicator, wrap_periodic)
from .cell import (CellSolution, SolverSettings, cell_residual, corrector_value, solve_cell, solve_cell_grid,
                   solve_cell_laminate)
from .homogenized import (HomogenizedMap, LaminateMap, audit_b_structure, audit_corrector_integrals, b_eval,
                          b_interp, tabulate, whom_energy)
from .fields import (FieldSolution, MacroProblem, apriori_norms, higher_integrability_check, solve_epsilon,
                     solve_macro)
from .correctors import (BoundReport, CorrectorReport, StudySettings, amplification_lhs, amplification_rhs,
                         assemble_corrector, bound_report, corrector_error, corrector_study, local_average)

__version__ = "0.1.0"
