"""
Storage-function certificates on grids.

A storage function ``lam`` rotates the stage cost into
``L(x, u) = l(x, u) + lam(x) - lam(f(x, u))``.  Dissipativity asks for
``L >= 0`` on the constraint set, strict dissipativity for
``L >= rho(||x||)``, and the two-storage variant for two plain storages whose
difference is bounded below by ``gamma(||x||)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dp import Transitions, ValueSolution, transitions
from .grid import ExtendedField, interpolate
from .model import ModelInstance

__all__ = [
    "StorageFunction",
    "ComparisonFunction",
    "DissipativityReport",
    "TwoStorageReport",
    "rotated_cost",
    "rotated_cost_table",
    "certificate_tolerance",
    "check_dissipativity",
    "check_two_storage",
    "verify_value_bounds",
    "detect_strictness_obstruction",
    "LyapunovResult",
    "policy_evaluation_quadratic",
    "build_rotations",
    "check_beta_property",
    "near_origin_mask",
]

CERT_TOL = 1e-5  # 10 x the default DP tolerance


@dataclass
class StorageFunction:
    field: ExtendedField
    label: str = ""

    def __post_init__(self):
        if not np.isfinite(self.field.at_origin()):
            raise ValueError(f"storage {self.label!r} is not finite at the origin")

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @classmethod
    def zero(cls, sgrid) -> "StorageFunction":
        return cls(ExtendedField(sgrid, np.zeros(sgrid.size), "0"), "0")

    @classmethod
    def from_values(cls, sgrid, values, label="") -> "StorageFunction":
        return cls(ExtendedField(sgrid, values, label), label)

    def __sub__(self, other):
        if isinstance(other, StorageFunction):
            other = other.values
        return StorageFunction.from_values(self.field.grid, self.values - other, f"{self.label}-")


@dataclass
class ComparisonFunction:
    """``c*s**2`` (quadratic), ``c*s`` (scaled_norm) or a tabulated map."""

    form: str = "quadratic"
    c: float = 1.0
    table: Optional[tuple] = None  # (s_nodes, values) for "custom"

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("comparison coefficient must be nonnegative")
        if self.form not in ("quadratic", "scaled_norm", "custom"):
            raise ValueError(f"unknown comparison form {self.form!r}")
        if self.form == "custom":
            s, v = (np.asarray(a, float) for a in self.table)
            if s[0] != 0 or v[0] != 0:
                raise ValueError("custom comparison table must start at (0, 0)")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.form == "quadratic":
            return self.c * s**2
        if self.form == "scaled_norm":
            return self.c * s
        sn, vn = (np.asarray(a, float) for a in self.table)
        return np.interp(s, sn, vn)


@dataclass
class DissipativityReport:
    kind: str
    label: str
    min_margin: float
    violation_count: int
    argmin: Optional[tuple]
    fitted_coefficient: float
    passed: bool
    pairs_checked: int
    tolerance: float
    violations: list = field(default_factory=list, repr=False)

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("violations")
        d["pass"] = d.pop("passed")
        return _jsonable(d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def violations_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.violations:
            d = len(self.violations[0][0])
            m = len(self.violations[0][1])
            w.writerow([f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(m)] + ["margin", "tolerance"])
        else:
            w.writerow(["x", "u", "margin", "tolerance"])
        for x, u, margin, t in self.violations:
            w.writerow([repr(float(a)) for a in x] + [repr(float(a)) for a in u] + [repr(float(margin)), repr(float(t))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass
class TwoStorageReport:
    first: DissipativityReport
    second: DissipativityReport
    gap_min_margin: float
    gap_violation_count: int
    gap_fitted_coefficient: float
    passed: bool

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "first": self.first.to_dict(),
                "second": self.second.to_dict(),
                "gap_min_margin": self.gap_min_margin,
                "gap_violation_count": self.gap_violation_count,
                "gap_fitted_coefficient": self.gap_fitted_coefficient,
                "pass": self.passed,
            }
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return None if math.isnan(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _storage_field(lam) -> ExtendedField:
    return lam.field if isinstance(lam, StorageFunction) else lam


def near_origin_mask(sgrid) -> np.ndarray:
    """Nodes within one cell of the origin in every coordinate."""
    X = sgrid.points()
    return np.all(np.abs(X) <= sgrid.spacing * (1 + 1e-9), axis=-1)


def rotated_cost(model: ModelInstance, lam, x, u) -> float:
    """``l(x,u) + lam(x) - lam(f(x,u))``; +inf when ``f`` leaves the grid or
    lands in a cell where ``lam`` is infinite."""
    F = _storage_field(lam)
    x = np.atleast_1d(np.asarray(x, float))
    u = np.atleast_1d(np.asarray(u, float))
    lx = interpolate(F, x)
    y = model.f(x, u)
    ly = interpolate(F, y)
    if not (np.isfinite(lx) and np.isfinite(ly)):
        return math.inf
    return float(model.stage_cost(x, u) + lx - ly)


def certificate_tolerance(tr: Transitions, values: np.ndarray, base: float = CERT_TOL) -> np.ndarray:
    """Per-pair tolerance: ``base`` plus the oscillation of ``values`` over the
    cell hit by ``f(x, u)`` (a local first-order interpolation-error bound)."""
    return base + tr.cell_oscillation(values)


def rotated_cost_table(model: ModelInstance, grids, lam) -> tuple[np.ndarray, np.ndarray]:
    """Rotated cost over all (node, control) pairs.

    Returns ``(L, valid)``; ``valid`` marks admissible pairs whose successor
    stays in the box and where ``lam`` is finite at both ends.
    """
    sgrid, cgrid = grids
    tr = transitions(model, sgrid, cgrid, "forward")
    F = _storage_field(lam)
    lam_v = F.values
    lam_next = tr.interp(lam_v, F.polarity)
    with np.errstate(invalid="ignore"):
        L = tr.cost + lam_v[:, None] - lam_next
    valid = tr.admissible & tr.inside & np.isfinite(lam_v)[:, None] & np.isfinite(lam_next)
    return np.where(valid, L, np.nan), valid


def _report(kind, label, margin, valid, tol_pair, L, sgrid, cgrid, max_violations=10000):
    X = sgrid.points()
    U = cgrid.points()
    n = int(valid.sum())
    if n == 0:
        return DissipativityReport(kind, label, math.inf, 0, None, 0.0, True, 0, float(np.min(tol_pair)))
    m = np.where(valid, margin, np.inf)
    i, j = np.unravel_index(int(np.argmin(m)), m.shape)
    viol = valid & (margin < -tol_pair)
    vi, vj = np.nonzero(viol)
    violations = [
        (X[a], U[b], float(margin[a, b]), float(tol_pair[a, b]))
        for a, b in zip(vi[:max_violations], vj[:max_violations])
    ]
    # fitted quadratic coefficient from the plain rotated cost
    r2 = np.sum(X**2, axis=-1)
    keep = ~near_origin_mask(sgrid) & (r2 > 0)
    minL = np.where(valid, L, np.inf).min(axis=1)
    ok = keep & np.isfinite(minL)
    fitted = float(max(0.0, np.min(minL[ok] / r2[ok]))) if ok.any() else 0.0
    return DissipativityReport(
        kind=kind,
        label=label,
        min_margin=float(m[i, j]),
        violation_count=int(viol.sum()),
        argmin=(X[i].tolist(), U[j].tolist()),
        fitted_coefficient=fitted,
        passed=not viol.any(),
        pairs_checked=n,
        tolerance=float(np.min(np.where(valid, tol_pair, np.inf))),
        violations=violations,
    )


def check_dissipativity(model: ModelInstance, grids, lam, kind: str = "plain",
                        rho: Optional[ComparisonFunction] = None, tol: float = CERT_TOL,
                        interpolation_slack: bool = True) -> DissipativityReport:
    """Scan the rotated cost over all admissible grid pairs.

    Parameters
    ----------
    kind : {"plain", "strict"}
        Plain requires ``L >= -tol``; strict requires ``L >= rho(||x||) - tol``.
    tol : float
        Base tolerance; with ``interpolation_slack`` the per-pair cell
        oscillation of ``lam`` is added.
    """
    sgrid, cgrid = grids
    if kind == "strict" and rho is None:
        raise ValueError("strict dissipativity needs a comparison function rho")
    L, valid = rotated_cost_table(model, grids, lam)
    tr = transitions(model, sgrid, cgrid, "forward")
    lam_v = _storage_field(lam).values
    tol_pair = certificate_tolerance(tr, lam_v, tol) if interpolation_slack else np.full(L.shape, tol)
    margin = L
    if kind == "strict":
        norm = np.linalg.norm(sgrid.points(), axis=-1)
        margin = L - rho(norm)[:, None]
    label = getattr(lam, "label", "") or _storage_field(lam).label
    return _report(kind, label, margin, valid, tol_pair, L, sgrid, cgrid)


def check_two_storage(model: ModelInstance, grids, lam1, lam2, gamma: ComparisonFunction,
                      tol: float = CERT_TOL, interpolation_slack: bool = True) -> TwoStorageReport:
    """Both storages plain dissipative and ``lam1 - lam2 >= gamma(||x||) - tol``."""
    sgrid, _ = grids
    r1 = check_dissipativity(model, grids, lam1, "plain", tol=tol, interpolation_slack=interpolation_slack)
    r2 = check_dissipativity(model, grids, lam2, "plain", tol=tol, interpolation_slack=interpolation_slack)
    a = _storage_field(lam1).values
    b = _storage_field(lam2).values
    both = np.isfinite(a) & np.isfinite(b)
    X = sgrid.points()
    norm = np.linalg.norm(X, axis=-1)
    gap = np.where(both, a - b, np.nan)
    margin = gap - gamma(norm)
    gmin = float(np.min(margin[both])) if both.any() else math.inf
    gviol = int(np.sum(both & (margin < -tol)))
    keep = both & ~near_origin_mask(sgrid) & (norm > 0)
    c = float(max(0.0, np.min(gap[keep] / norm[keep] ** 2))) if keep.any() else 0.0
    return TwoStorageReport(r1, r2, gmin, gviol, c, r1.passed and r2.passed and gviol == 0)


def verify_value_bounds(V_plus: ExtendedField, V_minus: ExtendedField, lam, kind: str = "plain",
                        comparison: Optional[ComparisonFunction] = None,
                        tol: float = CERT_TOL) -> DissipativityReport:
    """Check ``-V- >= lam >= -V+`` and the matching lower bound on ``V+ - V-``.

    The gap bound is ``>= 0`` (plain), ``>= 2*rho`` (strict) or ``>= gamma``
    (two_storage).
    """
    lam_v = _storage_field(lam).values
    sgrid = V_plus.grid
    both = V_plus.finite_mask & V_minus.finite_mask & np.isfinite(lam_v)
    vp, vm = V_plus.values, V_minus.values
    norm = np.linalg.norm(sgrid.points(), axis=-1)
    if kind == "plain":
        need = np.zeros(sgrid.size)
    elif kind == "strict":
        need = 2.0 * comparison(norm)
    elif kind == "two_storage":
        need = comparison(norm)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    with np.errstate(invalid="ignore"):
        upper = -vm - lam_v
        lower = lam_v + vp
        gap = vp - vm - need
    margin = np.minimum(np.minimum(upper, lower), gap)
    margin = np.where(both, margin, np.inf)
    viol = both & (margin < -tol)
    X = sgrid.points()
    i = int(np.argmin(margin)) if both.any() else 0
    r2 = np.sum(X**2, axis=-1)
    keep = both & ~near_origin_mask(sgrid) & (r2 > 0)
    fitted = float(max(0.0, np.min((vp - vm)[keep] / r2[keep]))) if keep.any() else 0.0
    vi = np.nonzero(viol)[0]
    return DissipativityReport(
        kind=f"bounds-{kind}",
        label=getattr(lam, "label", ""),
        min_margin=float(margin[i]) if both.any() else math.inf,
        violation_count=int(viol.sum()),
        argmin=(X[i].tolist(), []),
        fitted_coefficient=fitted,
        passed=not viol.any(),
        pairs_checked=int(both.sum()),
        tolerance=tol,
        violations=[(X[a], np.zeros(0), float(margin[a]), tol) for a in vi[:10000]],
    )


def detect_strictness_obstruction(V_plus: ExtendedField, V_minus: ExtendedField, tol: float = CERT_TOL) -> list:
    """Nonzero nodes where ``V+ = V-`` within ``tol`` (both finite)."""
    both = V_plus.finite_mask & V_minus.finite_mask
    X = V_plus.grid.points()
    nz = np.any(X != 0, axis=-1)
    with np.errstate(invalid="ignore"):
        hit = both & nz & (np.abs(V_plus.values - V_minus.values) <= tol)
    return [X[i].tolist() for i in np.nonzero(hit)[0]]


@dataclass
class LyapunovResult:
    field: ExtendedField
    diverged: bool
    iterations: int
    residual: float
    growth: float  # ratio of the last two sup-norm increments

    @property
    def values(self):
        return self.field.values


def _policy_indices(policy, sgrid):
    if isinstance(policy, ValueSolution):
        return policy.policy
    pol = np.asarray(policy)
    if pol.shape != (sgrid.size,):
        raise ValueError("policy must give one control index per node")
    return pol


def policy_evaluation_quadratic(model: ModelInstance, grids, policy, tol: float = 1e-9,
                                max_iter: int = 100000, blowup: float = 1e12) -> LyapunovResult:
    """Solve ``V(x) = ||x||^2 + V(f(x, pi(x)))`` by fixed-point iteration from 0.

    ``policy`` is a per-node control index (``-1`` where undefined) or a
    ValueSolution.  The result decreases by exactly ``||x||^2`` along the
    closed loop; a non-stabilizing policy is flagged via ``diverged``.
    """
    sgrid, cgrid = grids
    pol = _policy_indices(policy, sgrid)
    tr = transitions(model, sgrid, cgrid, "forward")
    dom = pol >= 0
    rows = np.nonzero(dom)[0]
    cols = pol[rows]
    corners = tr.corners[rows, cols]
    weights = tr.weights[rows, cols]
    inside = tr.inside[rows, cols]
    q = np.sum(sgrid.points() ** 2, axis=-1)
    V = np.where(dom, 0.0, np.inf)
    incs = []
    diverged = True
    k = 0
    for k in range(1, max_iter + 1):
        v = V[corners]
        part = weights > 0
        bad = (part & ~np.isfinite(v)).any(axis=-1) | ~inside
        nxt = np.einsum("ij,ij->i", weights, np.where(np.isfinite(v), v, 0.0))
        Vn = V.copy()
        Vn[rows] = np.where(bad, np.inf, q[rows] + nxt)
        fin = np.isfinite(V) & np.isfinite(Vn)
        inc = float(np.max(np.abs(Vn[fin] - V[fin]))) if fin.any() else 0.0
        changed_mask = not np.array_equal(np.isfinite(V), np.isfinite(Vn))
        V = Vn
        incs.append(inc)
        if not changed_mask and inc <= tol:
            diverged = False
            break
        if np.nanmax(np.where(np.isfinite(V), np.abs(V), 0)) > blowup:
            break
    growth = incs[-1] / incs[-2] if len(incs) > 1 and incs[-2] > 0 else 0.0
    # a stabilizing policy keeps every node where it is defined finite
    if not diverged and np.any(dom & ~np.isfinite(V)):
        diverged = True
    return LyapunovResult(ExtendedField(sgrid, V, "lyapunov", "min"), diverged, k, incs[-1] if incs else 0.0, growth)


def build_rotations(model: ModelInstance, V_oplus: ValueSolution, V_ominus: ValueSolution,
                    lyap) -> dict:
    """Storages ``L1 = -Vominus``, ``L2 = -Voplus`` and ``L3 = L1 + lyap``."""
    sgrid = V_oplus.value.grid
    lyap_v = lyap.values if hasattr(lyap, "values") else np.asarray(lyap)
    l1 = -V_ominus.value.values
    l2 = -V_oplus.value.values
    with np.errstate(invalid="ignore"):
        l3 = l1 + lyap_v
    l3 = np.where(np.isnan(l3), np.inf, l3)
    return {
        "L1": StorageFunction(ExtendedField(sgrid, l1, "L1"), "L1"),
        "L2": StorageFunction(ExtendedField(sgrid, l2, "L2"), "L2"),
        "L3": StorageFunction(ExtendedField(sgrid, l3, "L3"), "L3"),
    }


def check_beta_property(beta: Callable, sample_pairs: Optional[Sequence] = None, max_gap: float = 1e3,
                        n: int = 200, tol: float = 1e-12) -> bool:
    """True iff ``beta(a) - beta(b) <= a - b + tol`` for all sampled ``a > b >= 0``.

    Without ``sample_pairs`` all pairs from ``n`` log-spaced points on
    ``[0, max_gap]`` (plus 0) are used.
    """
    if sample_pairs is None:
        s = np.concatenate([[0.0], np.logspace(-6, np.log10(max_gap), n)])
        A, B = np.meshgrid(s, s, indexing="ij")
        keep = A > B
        a, b = A[keep], B[keep]
    else:
        pairs = np.asarray(sample_pairs, float).reshape(-1, 2)
        a, b = pairs[:, 0], pairs[:, 1]
        keep = a > b
        a, b = a[keep], b[keep]
    ba = np.asarray(beta(a), float)
    bb = np.asarray(beta(b), float)
    return bool(np.all(ba - bb <= a - b + tol))
