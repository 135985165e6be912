"""
Experiment pipelines shared by the command line and the test-suite.

Each figure pipeline returns a :class:`PipelineOutput`: CSV/JSON texts keyed by
relative file name plus named boolean claims.  All outputs are deterministic
functions of the inputs (fixed sweep order, first-index tie-breaks, no
timestamps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dp
from .dissipativity import (
    CERT_TOL,
    ComparisonFunction,
    StorageFunction,
    build_rotations,
    certificate_tolerance,
    check_dissipativity,
    check_two_storage,
    detect_strictness_obstruction,
    policy_evaluation_quadratic,
    rotated_cost_table,
)
from .grid import ExtendedField, default_grids, field_summary, field_to_csv
from .model import ModelInstance, get_model
from .mpc import (
    DEFAULT_R,
    TerminalCostSpec,
    build_terminal_cost,
    convergence_profile,
    finite_levels,
    min_stabilizing_horizon,
    table_csv,
    table_json,
)

__all__ = ["Workspace", "PipelineOutput", "figure1", "figure2", "figure3", "profile_settles", "PHI"]

PHI = (1 + math.sqrt(5)) / 2


class Workspace:
    """Lazily solved value functions for one model on one grid pair."""

    def __init__(self, model: ModelInstance, grids=None, cfg: Optional[dp.SolveConfig] = None,
                 penalty="auto"):
        self.model = model
        self.grids = grids or default_grids(model)
        self.cfg = cfg or dp.config_for(model)
        self.penalty = penalty
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def v_plus(self) -> dp.ValueSolution:
        return self._get("v_plus", lambda: dp.solve_forward(self.model, self.grids, self.cfg))

    @property
    def v_minus(self) -> dp.ValueSolution:
        return self._get("v_minus", lambda: dp.solve_backward(self.model, self.grids, self.cfg))

    @property
    def calibration(self) -> Optional[dp.CalibrationResult]:
        if self.penalty != "auto":
            return None
        return self._get(
            "cal", lambda: dp.calibrate_penalty(self.model, self.grids, self.cfg, self.v_plus, self.v_minus)
        )

    @property
    def p(self) -> float:
        return float(self.penalty) if self.penalty != "auto" else self.calibration.p

    @property
    def v_oplus(self) -> dp.ValueSolution:
        if self.calibration is not None:
            return self.calibration.oplus
        return self._get("oplus", lambda: dp.solve_forward_relaxed(self.model, self.grids, self.cfg, self.p))

    @property
    def v_ominus(self) -> dp.ValueSolution:
        if self.calibration is not None:
            return self.calibration.ominus
        return self._get("ominus", lambda: dp.solve_backward_relaxed(self.model, self.grids, self.cfg, self.p))

    def solutions(self) -> dict:
        return {"v_plus": self.v_plus, "v_minus": self.v_minus, "v_oplus": self.v_oplus, "v_ominus": self.v_ominus}


@dataclass
class PipelineOutput:
    files: dict = field(default_factory=dict)  # relative name -> text
    claims: dict = field(default_factory=dict)  # name -> bool
    summary: dict = field(default_factory=dict)
    solver_ok: bool = True


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v) or math.isinf(v):
        return "-inf" if v < 0 else "+inf"
    return repr(v)


def _rows_csv(header, cols) -> str:
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


# --- figure 1: storage functions for the LQ example -------------------------------

def figure1(tol: float = CERT_TOL) -> PipelineOutput:
    """Rotated LQ costs for the unconstrained, ``|u|<=1`` and ``|u|<=2`` value functions."""
    narrow, wide = get_model("lq"), get_model("lq-wide")
    wn, ww = Workspace(narrow), Workspace(wide)
    sgrid = wn.grids[0]
    if sgrid != ww.grids[0]:
        raise RuntimeError("the two LQ models must share a state grid")
    gw = ww.grids
    x = sgrid.points()[:, 0]
    v11, v22 = wn.v_plus, ww.v_plus
    lam = {
        "unconstrained": StorageFunction.from_values(sgrid, -PHI * x**2, "-V_plus_unconstrained"),
        "u1": StorageFunction.from_values(sgrid, -v11.value.values, "-V_plus_u1"),
        "u2": StorageFunction.from_values(sgrid, -v22.value.values, "-V_plus_u2"),
    }
    tr = dp.transitions(wide, gw[0], gw[1], "forward")
    U = gw[1].points()[:, 0]
    out = PipelineOutput(solver_ok=v11.converged and v22.converged)
    tables = {}
    for k, l in lam.items():
        L, valid = rotated_cost_table(wide, gw, l)
        tables[k] = (np.where(valid, L, np.inf), valid, certificate_tolerance(tr, l.values, tol))
    XX, UU = np.meshgrid(x, U, indexing="ij")
    out.files["figure1/rotated_cost.csv"] = _rows_csv(
        ["x", "u", "L_unconstrained", "L_u1", "L_u2"],
        [XX.ravel(), UU.ravel()] + [tables[k][0].ravel() for k in ("unconstrained", "u1", "u2")],
    )
    out.files["figure1/feedback.csv"] = _rows_csv(
        ["x", "u_plus_u1", "u_plus_u2", "u_unconstrained"],
        [x, v11.policy_controls()[:, 0], v22.policy_controls()[:, 0], -x / PHI],
    )
    L1, valid1, t1 = tables["u1"]
    L2, valid2, t2 = tables["u2"]
    inner = np.abs(UU) <= 1 + 1e-12
    outer = (np.abs(UU) > 1 + 1e-12) & (np.abs(UU) <= 2 + 1e-12)
    out.claims["figure1.L_u1_nonnegative_for_u_in_[-1,1]"] = bool(np.all(L1[valid1 & inner] >= -t1[valid1 & inner]))
    neg = valid1 & outer & (L1 < -t1)
    out.claims["figure1.L_u1_negative_for_some_u_outside_[-1,1]"] = bool(neg.any())
    out.claims["figure1.L_u2_nonnegative_on_wide_box"] = bool(np.all(L2[valid2] >= -t2[valid2]))
    out.claims["figure1.V_u2_le_V_u1"] = bool(np.all(v22.value.values <= v11.value.values + tol))
    i = np.argmin(np.where(neg, L1, np.inf))
    out.summary = {
        "min_L_u1_inner": float(L1[valid1 & inner].min()),
        "min_L_u1_outer": float(L1[valid1 & outer].min()),
        "argmin_L_u1_outer": [float(XX.ravel()[i]), float(UU.ravel()[i])],
        "min_L_u2": float(L2[valid2].min()),
        "iterations": {"u1": v11.iterations, "u2": v22.iterations},
    }
    out.files["figure1/summary.json"] = table_json({"summary": out.summary, "claims": out.claims}) + "\n"
    return out


# --- figure 2: nonlinear value functions, policies and rotations --------------------

def figure2(ws: Optional[Workspace] = None, tol: float = CERT_TOL) -> PipelineOutput:
    """Value functions, policy coincidence and on-policy rotated costs for the nonlinear model."""
    ws = ws or Workspace(get_model("nonlinear"))
    model, grids = ws.model, ws.grids
    sgrid, cgrid = grids
    vp, vm, vo, vom = ws.v_plus, ws.v_minus, ws.v_oplus, ws.v_ominus
    out = PipelineOutput(solver_ok=all(s.converged for s in (vp, vm, vo, vom)))
    X = sgrid.points()
    mask = vp.domain_mask
    idx = np.nonzero(mask)[0]

    # u+ and the backward law evaluated at the successor
    Up = vp.policy_controls()
    Y = model.f(X[idx], Up[idx])
    Um, feas_m = dp.policy_at(model, grids, vm.value, Y, "backward")
    du = float(np.min(cgrid.spacing))
    coincide = feas_m & np.all(np.abs(Up[idx] - Um) < du - 1e-12, axis=-1)

    lyap = policy_evaluation_quadratic(model, grids, vp)
    rot = build_rotations(model, vo, vom, lyap.field)
    tr = dp.transitions(model, sgrid, cgrid, "forward")
    rows, cols = idx, vp.policy[idx]
    on = {}
    for key in ("L1", "L3"):
        L, valid = rotated_cost_table(model, grids, rot[key])
        tp = certificate_tolerance(tr, rot[key].values, tol)
        on[key] = (L[rows, cols], valid[rows, cols], tp[rows, cols], L, valid, tp)
    r2 = np.sum(X[idx] ** 2, axis=-1)

    gap = vp.value.values - vm.value.values
    nz = np.any(X != 0, axis=-1)
    both = mask & vm.domain_mask & nz
    out.claims["figure2.V_plus_minus_V_minus_positive_off_origin"] = bool(np.all(gap[both] > 0))
    h2 = sgrid.spacing[-1]
    band = np.abs(X[idx, -1]) <= h2 * (1 + 1e-9)
    out.claims["figure2.coincidence_locus_within_one_cell_of_x2_zero"] = bool(np.all(band[coincide]))
    L1p, v1, t1 = on["L1"][:3]
    out.claims["figure2.L1_on_policy_nonnegative"] = bool(v1.all() and np.all(L1p >= -t1))
    L3p, v3, t3 = on["L3"][:3]
    out.claims["figure2.L3_on_policy_ge_norm_squared"] = bool(v3.all() and np.all(L3p >= r2 - t3))
    L3, valid3, tp3 = on["L3"][3:]
    out.claims["figure2.L3_negative_off_policy"] = bool(np.any(valid3 & (L3 < -tp3)))
    obstruction = detect_strictness_obstruction(vp.value, vm.value, tol)
    out.claims["figure2.no_strictness_obstruction"] = not obstruction

    out.files["figure2/V_plus.csv"] = field_to_csv(vp.value)
    out.files["figure2/V_minus.csv"] = field_to_csv(vm.value)
    out.files["figure2/policy_maps.csv"] = _rows_csv(
        ["x1", "x2", "u_plus", "u_minus_at_successor", "coincide", "L1_on_policy", "L3_on_policy"],
        [X[idx, 0], X[idx, 1], Up[idx, 0], np.where(feas_m, Um[:, 0], np.nan), coincide.astype(float),
         np.where(v1, L1p, np.inf), np.where(v3, L3p, np.inf)],
    )
    neg = valid3 & (L3 < -tp3)
    i, j = np.unravel_index(int(np.argmin(np.where(neg, L3, np.inf))), L3.shape)
    out.summary = {
        "penalty": ws.p,
        "domain_nodes": int(mask.sum()),
        "min_gap_off_origin": float(gap[both].min()),
        "coincidence_nodes": int(coincide.sum()),
        "coincidence_max_abs_x2": float(np.abs(X[idx[coincide], -1]).max()) if coincide.any() else 0.0,
        "min_L1_on_policy": float(L1p.min()),
        "min_L3_on_policy_minus_norm2": float((L3p - r2).min()),
        "most_negative_L3_off_policy": {"x": X[i].tolist(), "u": cgrid.points()[j].tolist(),
                                        "value": float(L3[i, j])},
        "lyapunov_diverged": lyap.diverged,
        "summaries": {k: field_summary(f) for k, f in (("V_plus", vp.value), ("V_minus", vm.value))},
        "iterations": {k: s.iterations for k, s in ws.solutions().items()},
    }
    out.files["figure2/summary.json"] = table_json({"summary": out.summary, "claims": out.claims}) + "\n"
    return out


# --- figure 3: terminal costs and stabilizing horizons ------------------------------

def profile_settles(profile, tol: float = CERT_TOL, fraction: float = 0.05, floor: Optional[float] = None) -> bool:
    """Nonincreasing (within ``tol``) over the second half and final entry below
    ``fraction`` of the first.  Profiles starting at or below ``floor``
    (default ``tol``) already sit at the noise level and only need to stay there."""
    p = np.asarray(profile, float)
    floor = tol if floor is None else floor
    if not np.all(np.isfinite(p[len(p) // 2:])):
        return False
    tail = p[len(p) // 2:]
    mono = bool(np.all(np.diff(tail) <= tol))
    if p[0] <= floor:
        return mono and bool(np.all(p <= floor))
    return mono and bool(p[-1] <= fraction * p[0])


def figure3(ws: Optional[Workspace] = None, r_values=DEFAULT_R, N_max: int = 20, tol: float = CERT_TOL,
            max_steps: int = 500) -> PipelineOutput:
    """Convergence profiles and minimum stabilizing horizons for the two terminal-cost families."""
    ws = ws or Workspace(get_model("nonlinear"))
    model, grids = ws.model, ws.grids
    vp, vom = ws.v_plus.value, ws.v_ominus.value
    out = PipelineOutput(solver_ok=ws.v_plus.converged and ws.v_ominus.converged)
    prof_rows, ns_rows = [], []
    results = {}
    for kind in ("vf1", "vf2"):
        for r in r_values:
            spec = TerminalCostSpec(kind, float(r))
            term = build_terminal_cost(spec, vp, vom)
            levels = finite_levels(model, grids, term, N_max)
            prof = convergence_profile(model, grids, spec, N_max, vp, levels=levels)
            hz = min_stabilizing_horizon(model, grids, spec, N_max, vp, levels=levels, max_steps=max_steps)
            results[(kind, float(r))] = (prof, hz)
            prof_rows += [{"terminal": kind, "r": float(r), "N": N, "gap": g} for N, g in enumerate(prof, 1)]
            ns_rows.append({"terminal": kind, "r": float(r), "Ns": hz.value,
                            "converged_fraction_N1": hz.fractions[0][1]})
    out.files["figure3/profiles.csv"] = table_csv(prof_rows, ["terminal", "r", "N", "gap"])
    out.files["figure3/ns.csv"] = table_csv(ns_rows, ["terminal", "r", "Ns", "converged_fraction_N1"])

    def ns(kind, r):
        v = results[(kind, float(r))][1].value
        return N_max + 1 if v == "none" else v

    out.claims["figure3.Ns_vf2_is_1"] = all(ns("vf2", r) == 1 for r in r_values)
    out.claims["figure3.Ns_vf1_ge_Ns_vf2"] = all(ns("vf1", r) >= ns("vf2", r) for r in r_values)
    if 1.0 in [float(r) for r in r_values]:
        out.claims["figure3.vf2_r1_profile_at_noise_level"] = bool(
            np.all(np.asarray(results[("vf2", 1.0)][0]) <= tol)
        )
    out.claims["figure3.profiles_settle"] = all(profile_settles(p, tol) for p, _ in results.values())
    out.summary = {
        "penalty": ws.p,
        "N_max": N_max,
        "convergence_radius": [float(v) for v in next(iter(results.values()))[1].radius],
        "Ns": {f"{k}(r={r:g})": results[(k, r)][1].value for (k, r) in results},
        "profiles": {f"{k}(r={r:g})": results[(k, r)][0] for (k, r) in results},
    }
    out.files["figure3/summary.json"] = table_json({"summary": out.summary, "claims": out.claims}) + "\n"
    return out
