"""Configuration-driven experiment runner.

Configs are TOML (dotted keys such as ``geometry.theta1 = 0.5`` or
``[geometry]`` tables) or JSON.  Every subcommand writes its payload files
named after a hash of the validated configuration, plus a JSON sidecar that
carries the metadata and the run timestamp.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import core
from .cell import SolverSettings, cell_residual, save_cell_solution, solve_cell
from .core import MicroGeometry, PhaseParams
from .correctors import StudySettings, bound_report, corrector_study, homogenized_evaluator
from .errors import HomogenizationError, InvalidParameters
from .fields import (MIN_ELEMENTS_PER_CELL, MacroProblem, apriori_norms, export_gradient_csv, save_field, solve_epsilon,
                     solve_macro)
from .homogenized import (LaminateMap, audit_b_structure, audit_corrector_integrals, save_table,
                          tabulate)

log = logging.getLogger("powerhom")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

SCHEMA = {
    "params": {"sigma1": float, "sigma2": float, "p1": float, "p2": float},
    "geometry": {"kind": str, "theta1": float},
    "load": {"kind": str, "value": float},
    "solver": {"tol": float, "max_iter": int, "delta_schedule": list, "grid_n": int, "laminate_tol": float},
    "fields": {"tol": float, "max_iter": int, "delta_schedule": list},
    "study": {"mesh_n": int, "fine_mesh_n": int, "fine_per_cell": int, "table_R": float, "table_h": float,
              "xi_quantum": float},
    "experiment": {"xi": list, "R": float, "h_xi": float, "eps_list": list, "q": list, "D": object,
                   "n_samples": int, "n_pairs_b": int, "n_samples_lemma": int, "slack": float,
                   "backend": str, "radius": float},
}
TOP_LEVEL = {"seed": int, "output_dir": str}
REQUIRED = ("params.sigma1", "params.sigma2", "params.p1", "params.p2", "geometry.kind", "geometry.theta1")


class ConfigError(InvalidParameters):
    pass


def read_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json") or text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None


def _coerce(name, value, kind):
    if kind is object:
        return value
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise ConfigError(name, f"expected {kind.__name__}, got {type(value).__name__}")


def validate_config(raw: dict) -> dict:
    """Type-check and normalize a raw config; unknown keys are rejected."""
    cfg = {}
    for key, value in raw.items():
        if key in TOP_LEVEL:
            cfg[key] = _coerce(key, value, TOP_LEVEL[key])
            continue
        if key not in SCHEMA:
            raise ConfigError(key, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(key, "expected a table of keys")
        section = {}
        for sub, v in value.items():
            name = f"{key}.{sub}"
            if sub not in SCHEMA[key]:
                raise ConfigError(name, "unknown key")
            section[sub] = _coerce(name, v, SCHEMA[key][sub])
        cfg[key] = section
    for name in REQUIRED:
        sec, sub = name.split(".")
        if sub not in cfg.get(sec, {}):
            raise ConfigError(name, "missing required value")
    return cfg


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RunConfig:
    params: PhaseParams
    geom: MicroGeometry
    problem: MacroProblem
    solver: SolverSettings
    study: StudySettings
    experiment: dict
    seed: int
    raw: dict
    hash: str = ""
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, workers: int = 1, seed: int | None = None) -> "RunConfig":
        cfg = validate_config(raw)
        if seed is not None:
            cfg["seed"] = seed
        params = PhaseParams(**cfg["params"])
        geom = MicroGeometry(**cfg["geometry"])
        solver_kw = dict(cfg.get("solver", {}))
        if "delta_schedule" in solver_kw:
            solver_kw["delta_schedule"] = tuple(solver_kw["delta_schedule"])
        solver = SolverSettings(**solver_kw)
        fields_kw = dict(cfg.get("fields", {}))
        fields_kw.setdefault("tol", 1e-10)
        fields_kw.setdefault("max_iter", 300)
        if "delta_schedule" in fields_kw:
            fields_kw["delta_schedule"] = tuple(fields_kw["delta_schedule"])
        study_kw = dict(cfg.get("study", {}))
        mesh_n = study_kw.pop("mesh_n", 128)
        load = cfg.get("load", {})
        problem = MacroProblem(mesh_n, load.get("kind", "constant"), load.get("value", 1.0))
        cell_kw = solver.to_dict()
        cell_kw["delta_schedule"] = tuple(cell_kw["delta_schedule"])
        if "grid_n" not in solver_kw:
            cell_kw["grid_n"] = 16
        study = StudySettings(cell=SolverSettings(**cell_kw), fields=SolverSettings(**fields_kw),
                              workers=max(1, workers), **study_kw)
        exp = dict(cfg.get("experiment", {}))
        _validate_experiment(exp)
        _validate_meshes(problem, study, exp)
        return cls(params, geom, problem, solver, study, exp, cfg.get("seed", core.DEFAULT_SEED), cfg,
                   config_hash(cfg))


def _validate_experiment(exp):
    if "xi" in exp:
        xi = exp["xi"]
        if len(xi) != 2 or not all(isinstance(v, (int, float)) for v in xi):
            raise ConfigError("experiment.xi", "expected two numbers")
    if "eps_list" in exp:
        eps = exp["eps_list"]
        if not eps or not all(isinstance(v, (int, float)) and v > 0 for v in eps):
            raise ConfigError("experiment.eps_list", "expected positive numbers")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("experiment.eps_list", "must be strictly decreasing")
        for v in eps:
            k = round(1 / v)
            if abs(k * v - 1) > 1e-9:
                raise ConfigError("experiment.eps_list", f"{v} is not the reciprocal of an integer")
    if "q" in exp:
        q = exp["q"]
        if not q or not all(isinstance(v, (int, float)) and v > 1 for v in q):
            raise ConfigError("experiment.q", "expected exponents greater than 1")
    if "D" in exp:
        D = exp["D"]
        ok = D in ("omega", "left_half") or (isinstance(D, list) and len(D) == 4)
        if not ok:
            raise ConfigError("experiment.D", "expected 'omega', 'left_half' or [x0, x1, y0, y1]")


def _validate_meshes(problem, study, exp):
    """Nesting and resolution of the fine and macro meshes for every eps."""
    for eps in exp.get("eps_list", []):
        k = round(1 / eps)
        try:
            n = study.fine_n(eps)
        except HomogenizationError:
            raise ConfigError("study.fine_mesh_n", f"does not nest {k} cells per side") from None
        if n // k < MIN_ELEMENTS_PER_CELL:
            raise ConfigError("study.fine_mesh_n",
                              f"{n // k} elements per cell at eps = 1/{k}, need {MIN_ELEMENTS_PER_CELL}")
        if problem.mesh_n % k:
            raise ConfigError("study.mesh_n", f"{problem.mesh_n} does not nest {k} cells per side")


# -- output helpers -------------------------------------------------------

def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _sidecar(out: Path, stem: str, run: RunConfig, command: str, payload: dict):
    meta = {"command": command, "config_hash": run.hash, "config": run.raw, "seed": run.seed,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **payload}
    _write(out / f"{stem}.json", json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _region(exp):
    D = exp.get("D", "omega")
    return tuple(D) if isinstance(D, list) else D


# -- subcommands ----------------------------------------------------------

def cmd_cell(run: RunConfig, out: Path):
    if "xi" not in run.experiment:
        raise ConfigError("experiment.xi", "missing required value")
    xi = np.array(run.experiment["xi"], dtype=float)
    sol = solve_cell(run.params, run.geom, xi, run.solver, run.experiment.get("backend"))
    stem = f"cell_{run.hash}"
    save_cell_solution(sol, out / f"{stem}.bin")
    mean_err = float(np.max(np.abs(sol.mean_P - xi)))
    b = sol.b
    lines = [f"config_hash: {run.hash}", f"backend: {sol.backend}", f"xi: {xi[0]:.17g} {xi[1]:.17g}",
             f"residual: {sol.residual:.6e}", f"recomputed residual: {cell_residual(sol):.6e}",
             f"mean(P) - xi (max abs): {mean_err:.3e}", f"b: {b[0]:.17g} {b[1]:.17g}",
             f"cell energy: {sol.energy:.17g}"]
    _write(out / f"{stem}_summary.txt", "\n".join(lines) + "\n")
    _sidecar(out, stem, run, "cell", {"b": b, "residual": sol.residual, "mean_error": mean_err})
    return [out / f"{stem}.bin", out / f"{stem}_summary.txt"]


def cmd_bmap(run: RunConfig, out: Path):
    exp = run.experiment
    hmap = tabulate(run.params, run.geom, exp.get("R", 4.0), exp.get("h_xi", 0.25), run.solver,
                    exp.get("backend"), workers=run.study.workers, seed=run.seed)
    stem = f"bmap_{run.hash}"
    save_table(hmap, out / f"{stem}.csv")
    _sidecar(out, stem, run, "bmap", {"provenance": hmap.provenance})
    return [out / f"{stem}.csv"]


def cmd_macro(run: RunConfig, out: Path):
    u = solve_macro(run.problem, homogenized_evaluator(run.params, run.geom, run.study), run.study.fields)
    stem = f"macro_{run.hash}"
    save_field(u, out / f"{stem}.csv")
    export_gradient_csv(u, out / f"{stem}_grad.csv")
    _sidecar(out, stem, run, "macro", {"residual": u.residual, "energy": u.energy, "iterations": u.iterations})
    return [out / f"{stem}.csv", out / f"{stem}_grad.csv"]


def cmd_epsilon(run: RunConfig, out: Path):
    files = []
    rows = []
    for eps in run.experiment.get("eps_list", [0.25]):
        n = run.study.fine_n(eps)
        u = solve_epsilon(MacroProblem(n, run.problem.load, run.problem.value), run.params, run.geom, eps,
                          run.study.fields)
        k = round(1 / eps)
        path = out / f"epsilon_{run.hash}_k{k}.csv"
        save_field(u, path)
        files.append(path)
        a1, a2 = apriori_norms(u, run.params, run.geom, eps)
        rows.append({"eps": eps, "mesh_n": n, "residual": u.residual, "energy": u.energy,
                     "apriori1": a1, "apriori2": a2})
    _sidecar(out, f"epsilon_{run.hash}", run, "epsilon", {"runs": rows})
    return files


def cmd_corrector_study(run: RunConfig, out: Path):
    eps_list = run.experiment.get("eps_list", [0.25, 0.125, 0.0625])
    rep = corrector_study(run.problem, run.params, run.geom, eps_list, run.study)
    stem = f"corrector_{run.hash}"
    _write(out / f"{stem}.csv", rep.to_csv(run.hash))
    _sidecar(out, stem, run, "corrector-study", {"meta": rep.meta})
    return [out / f"{stem}.csv"]


def cmd_bounds(run: RunConfig, out: Path):
    exp = run.experiment
    eps_list = exp.get("eps_list", [0.25, 0.125, 0.0625])
    D = _region(exp)
    u = solve_macro(run.problem, homogenized_evaluator(run.params, run.geom, run.study), run.study.fields)
    fine = {}
    text, reports = [], []
    for i, q in enumerate(exp.get("q", [2.0])):
        rep = bound_report(run.problem, run.params, run.geom, D, float(q), eps_list, run.study,
                           exp.get("slack", 0.05), macro=u, fine_solutions=fine)
        csv_text = rep.to_csv(run.hash)
        text.append(csv_text if i == 0 else csv_text.split("\r\n", 1)[1])
        reports.append({"q": rep.q, "lhs": rep.lhs, "flagged": rep.flagged, "warnings": rep.warnings,
                        "trend": rep.trend})
    stem = f"bounds_{run.hash}"
    _write(out / f"{stem}.csv", "".join(text))
    _sidecar(out, stem, run, "bounds", {"reports": reports})
    return [out / f"{stem}.csv"]


def cmd_audit(run: RunConfig, out: Path):
    exp = run.experiment
    audits = [core.audit_structure_conditions(run.params, exp.get("n_samples", 1000), run.seed)]
    if run.geom.kind == core.LAMINATE:
        evaluator = LaminateMap(run.params, run.geom.theta1)
    else:
        evaluator = tabulate(run.params, run.geom, exp.get("R", 4.0), exp.get("h_xi", 0.25), run.solver,
                             workers=run.study.workers, seed=run.seed)
    audits.append(audit_b_structure(evaluator, exp.get("n_pairs_b", 500), run.seed, exp.get("radius", 5.0)))
    audits.append(audit_corrector_integrals(run.params, run.geom, exp.get("n_samples_lemma", 50), run.seed,
                                            run.solver, exp.get("radius", 5.0)))
    stem = f"audit_{run.hash}"
    payload = {"config_hash": run.hash, "audits": [a.to_dict() for a in audits]}
    _write(out / f"{stem}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _sidecar(out, f"{stem}_meta", run, "audit", {"passed": all(a.passed for a in audits)})
    if not all(a.passed for a in audits):
        raise HomogenizationError("audit recorded violations; see " + str(out / f"{stem}.json"))
    return [out / f"{stem}.json"]


COMMANDS = {
    "cell": cmd_cell, "bmap": cmd_bmap, "macro": cmd_macro, "epsilon": cmd_epsilon,
    "corrector-study": cmd_corrector_study, "bounds": cmd_bounds, "audit": cmd_audit,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="powerhom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML or JSON configuration file")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir or .)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = read_config(args.config)
        run = RunConfig.from_dict(raw, workers=args.workers, seed=args.seed)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidParameters, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or run.raw.get("output_dir", "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](run, out)
    except InvalidParameters as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HomogenizationError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
