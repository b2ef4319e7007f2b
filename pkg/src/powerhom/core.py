"""Two-phase power-law constitutive law, unit-cell geometry and structure audits.

The flux law is ``A(y, xi) = sigma(y) |xi|^(p(y)-2) xi`` with piecewise-constant
``sigma`` and ``p`` taking the values of phase 1 inside the inclusion (or the
central layer) and of phase 2 elsewhere.  All array functions broadcast over
leading axes; vectors live on the last axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegeneratePoint, InvalidParameters

DEFAULT_SEED = 20100915

LAMINATE = "laminate"
DISK = "disk"


@dataclass(frozen=True)
class PhaseParams:
    sigma1: float
    sigma2: float
    p1: float
    p2: float

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "p1", "p2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidParameters(f"params.{name}", "must be finite")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise InvalidParameters("params.sigma", "sigma1, sigma2 must be positive")
        p1, p2 = self.p1, self.p2
        if self.is_homogeneous:
            # contrast-free control medium: any exponent > 1
            if p1 <= 1:
                raise InvalidParameters("params.p1", "exponent must exceed 1")
            return
        sublinear = 1 < p1 <= p2 <= 2
        mixed = 1 < p1 <= 2 <= p2
        if not (sublinear or mixed):
            raise InvalidParameters(
                "params.p1",
                f"need 1 < p1 <= p2 <= 2 or 1 < p1 <= 2 <= p2, got p1={p1}, p2={p2}",
            )

    @property
    def is_homogeneous(self) -> bool:
        return self.sigma1 == self.sigma2 and self.p1 == self.p2

    @property
    def q2(self) -> float:
        """Hölder conjugate of p1."""
        return self.p1 / (self.p1 - 1.0)

    @property
    def q1(self) -> float:
        """Hölder conjugate of p2."""
        return self.p2 / (self.p2 - 1.0)

    @property
    def regime(self) -> str:
        return "sublinear" if self.p2 <= 2 else "mixed"

    def sigma(self, phase):
        return np.where(np.asarray(phase) == 1, self.sigma1, self.sigma2)

    def p(self, phase):
        return np.where(np.asarray(phase) == 1, self.p1, self.p2)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MicroGeometry:
    kind: str
    theta1: float

    def __post_init__(self):
        if self.kind not in (LAMINATE, DISK):
            raise InvalidParameters("geometry.kind", f"unknown kind {self.kind!r}")
        if not (0.0 < self.theta1 < 1.0):
            raise InvalidParameters("geometry.theta1", "must lie in (0, 1)")
        if self.kind == DISK and not self.radius < 0.5:
            raise InvalidParameters("geometry.theta1", "disk does not fit inside the cell")

    @property
    def theta2(self) -> float:
        return 1.0 - self.theta1

    @property
    def radius(self) -> float:
        if self.kind != DISK:
            raise AttributeError("only disk geometries have a radius")
        return math.sqrt(self.theta1 / math.pi)

    @property
    def dim(self) -> int:
        return 1 if self.kind == LAMINATE else 2

    def to_dict(self):
        return {"kind": self.kind, "theta1": self.theta1}


def wrap_periodic(x, eps: float = 1.0):
    """Fractional part of ``x / eps``, componentwise in [0, 1)."""
    if not eps > 0:
        raise InvalidParameters("eps", "must be positive")
    y = np.asarray(x, dtype=float) / eps
    y = y - np.floor(y)
    # floor can leave exactly 1.0 after rounding of tiny negatives
    return np.where(y >= 1.0, 0.0, y)


def indicator(geom: MicroGeometry, y):
    """Phase index (1 or 2) at cell points ``y`` (wrapped periodically)."""
    y = wrap_periodic(y)
    if geom.kind == LAMINATE:
        inside = np.abs(y[..., 0] - 0.5) < 0.5 * geom.theta1
    else:
        inside = np.hypot(y[..., 0] - 0.5, y[..., 1] - 0.5) < geom.radius
    out = np.where(inside, 1, 2)
    return out if out.ndim else int(out)


def _norm(xi):
    # hypot rescales, so tiny gradients do not underflow into subnormals
    if xi.shape[-1] == 2:
        return np.hypot(xi[..., 0], xi[..., 1])
    return np.linalg.norm(xi, axis=-1)


def flux(params: PhaseParams, phase, xi):
    """``sigma |xi|^(p-2) xi`` for the given phase; exactly zero at ``xi = 0``."""
    xi = np.asarray(xi, dtype=float)
    s, p = params.sigma(phase), params.p(phase)
    r = _norm(xi)
    safe = np.where(r > 0, r, 1.0)
    coef = np.where(r > 0, s * safe ** (p - 2.0), 0.0)
    return coef[..., None] * xi


def energy_density(params: PhaseParams, phase, xi):
    """``sigma |xi|^p / p``, the potential whose gradient is :func:`flux`."""
    xi = np.asarray(xi, dtype=float)
    s, p = params.sigma(phase), params.p(phase)
    return s * _norm(xi) ** p / p


def regularized_flux(params: PhaseParams, phase, xi, delta: float):
    xi = np.asarray(xi, dtype=float)
    s, p = params.sigma(phase), params.p(phase)
    r2 = delta * delta + np.sum(xi * xi, axis=-1)
    safe = np.where(r2 > 0, r2, 1.0)
    coef = np.where(r2 > 0, s * safe ** (0.5 * (p - 2.0)), 0.0)
    return coef[..., None] * xi


def regularized_energy(params: PhaseParams, phase, xi, delta: float):
    xi = np.asarray(xi, dtype=float)
    s, p = params.sigma(phase), params.p(phase)
    r2 = delta * delta + np.sum(xi * xi, axis=-1)
    return s * r2 ** (0.5 * p) / p


def flux_jacobian_regularized(params: PhaseParams, phase, xi, delta: float = 0.0):
    """Derivative of ``sigma (delta^2 + |xi|^2)^((p-2)/2) xi`` with respect to xi.

    Returns an array of shape ``xi.shape + (d,)``.
    """
    if delta < 0:
        raise InvalidParameters("delta", "must be nonnegative")
    xi = np.asarray(xi, dtype=float)
    s, p = params.sigma(phase), params.p(phase)
    r2 = delta * delta + np.sum(xi * xi, axis=-1)
    degenerate = (r2 == 0) & (p < 2)
    if np.any(degenerate):
        raise DegeneratePoint("flux Jacobian is unbounded at xi = 0 for p < 2 without regularization")
    safe = np.where(r2 > 0, r2, 1.0)
    base = np.where(r2 > 0, s * safe ** (0.5 * (p - 2.0)), np.where(p == 2, s, 0.0))
    outer = xi[..., :, None] * xi[..., None, :] / safe[..., None, None]
    eye = np.eye(xi.shape[-1])
    return base[..., None, None] * (eye + ((p - 2.0) * np.where(r2 > 0, 1.0, 0.0))[..., None, None] * outer)


def holder_alpha(p):
    p = np.asarray(p, dtype=float)
    return np.where(p <= 2, p - 1.0, 1.0)


def holder_beta(p):
    p = np.asarray(p, dtype=float)
    return np.where(p <= 2, 2.0, p)


@dataclass
class AuditReport:
    kind: str
    n_samples: int
    seed: int
    sign_violations: int = 0
    conA_ratio_max: float = 0.0
    monA_ratio_max: float = 0.0
    monA_ratio_min: float = math.inf
    stats: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def sample_ball(rng: np.random.Generator, n: int, radius: float, dim: int = 2):
    """Uniform samples in the centered ball of the given radius."""
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return direction * r[:, None]


def audit_structure_conditions(params: PhaseParams, n_samples: int = 1000, seed: int = DEFAULT_SEED,
                               radius: float = 10.0, tol: float = 1e-12) -> AuditReport:
    """Randomized check of continuity and monotonicity of the flux law in both phases.

    The monotonicity sign is asserted; the continuity and coercivity ratios
    (with unit constant) are recorded as observed extremes.
    """
    if n_samples < 1:
        raise InvalidParameters("n_samples", "must be at least 1")
    rng = np.random.default_rng(seed)
    report = AuditReport("structure_A", n_samples, seed)
    for phase in (1, 2):
        x1 = sample_ball(rng, n_samples, radius)
        x2 = sample_ball(rng, n_samples, radius)
        p = float(params.p(phase))
        a, b = holder_alpha(p), holder_beta(p)
        dA = flux(params, phase, x1) - flux(params, phase, x2)
        dx = x1 - x2
        inner = np.sum(dA * dx, axis=-1)
        n1, n2, nd = _norm(x1), _norm(x2), _norm(dx)
        bad = np.flatnonzero(inner < -tol)
        report.sign_violations += bad.size
        for k in bad[:5]:
            report.failures.append({"phase": phase, "xi1": x1[k].tolist(), "xi2": x2[k].tolist(),
                                    "inner": float(inner[k])})
        ok = nd > 0
        con_rhs = nd[ok] ** a * (1.0 + n1[ok] + n2[ok]) ** (p - 1.0 - a)
        mon_rhs = nd[ok] ** b * (n1[ok] + n2[ok]) ** (p - b)
        con = _norm(dA[ok]) / con_rhs
        mon = inner[ok] / mon_rhs
        if con.size:
            report.conA_ratio_max = max(report.conA_ratio_max, float(con.max()))
            report.monA_ratio_max = max(report.monA_ratio_max, float(mon.max()))
            report.monA_ratio_min = min(report.monA_ratio_min, float(mon.min()))
            report.stats[f"phase{phase}"] = {
                "alpha": float(a), "beta": float(b),
                "conA_ratio_max": float(con.max()),
                "monA_ratio_min": float(mon.min()), "monA_ratio_max": float(mon.max()),
            }
    return report
