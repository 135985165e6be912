"""
Receding-horizon control on top of the grid value functions.

Finite-horizon value levels ``V_0 = V_f, V_1, ..., V_{N-1}`` are computed once
by value iteration; the MPC law at ``x`` is the minimizer of
``l(x, u) + V_{N-1}(f(x, u))`` over the control nodes, and closed loops are
simulated on the true dynamics.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dissipativity import CERT_TOL, _jsonable
from .dp import ValueSolution, value_iterate_finite
from .grid import ExtendedField, StateGrid, interpolate_located, locate
from .model import ModelInstance

__all__ = [
    "TerminalCostError",
    "InfeasibleControlError",
    "TerminalCostSpec",
    "build_terminal_cost",
    "local_cost_to_go",
    "lq_terminal_box",
    "AmritReport",
    "check_amrit_condition",
    "finite_levels",
    "mpc_feedback",
    "ClosedLoopResult",
    "BatchResult",
    "simulate_closed_loop",
    "simulate_batch",
    "HorizonResult",
    "min_stabilizing_horizon",
    "practical_radius",
    "convergence_profile",
    "default_beta",
    "table_csv",
    "table_json",
]

TERMINAL_KINDS = ("origin_indicator", "v_plus", "v_ominus", "vf1", "vf2", "beta_composite", "amrit")
DEFAULT_R = (0.1, 0.5, 1.0, 2.0)
_BIG = 1e300


class TerminalCostError(ValueError):
    """A terminal cost could not be built from the supplied ingredients."""


class InfeasibleControlError(RuntimeError):
    """No admissible control keeps the predicted value finite."""


def default_beta(a):
    """``a / (1 + a)``: slope at most one and bounded."""
    a = np.asarray(a, dtype=float)
    return a / (1.0 + a)


@dataclass
class TerminalCostSpec:
    kind: str
    r: float = 0.0
    beta: Optional[Callable] = None
    field: Optional[ExtendedField] = None
    terminal_box: Optional[tuple] = None  # (lower, upper) sequences
    local_gain: Optional[Sequence] = None  # kappa_f(x) = -K x

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise TerminalCostError(f"unknown terminal kind {self.kind!r}; expected one of {TERMINAL_KINDS}")
        if not self.r >= 0:
            raise TerminalCostError("r must be nonnegative")

    @property
    def label(self) -> str:
        if self.kind in ("vf1", "vf2"):
            return f"{self.kind}(r={self.r:g})"
        return self.kind


def _box_mask(sgrid: StateGrid, box) -> np.ndarray:
    lo, hi = (np.asarray(b, float) for b in box)
    X = sgrid.points()
    return np.all((X >= lo - 1e-12) & (X <= hi + 1e-12), axis=-1)


def lq_terminal_box(sgrid: StateGrid) -> tuple:
    """Largest symmetric node interval where the unconstrained LQ input ``-x/phi`` is admissible."""
    phi = (1 + math.sqrt(5)) / 2
    h = sgrid.spacing[0]
    b = math.floor(phi / h + 1e-9) * h
    return ((-b,), (b,))


def local_cost_to_go(model: ModelInstance, sgrid: StateGrid, gain, box, tol: float = 1e-12,
                     max_iter: int = 100000) -> ExtendedField:
    """Cost of the linear law ``u = -K x`` from each node of ``box``; +inf elsewhere.

    Trajectories that leave the box or use inadmissible inputs get +inf.
    """
    K = np.atleast_2d(np.asarray(gain, float))
    inbox = _box_mask(sgrid, box)
    X = sgrid.points()
    U = -X @ K.T
    Y = model.f(X, U)
    ok = inbox & model.constraints.contains(X, U) & _box_mask_points(Y, box)
    cost = model.stage_cost(X, U)
    loc = locate(sgrid, Y)
    V = np.where(inbox, 0.0, np.inf)
    for _ in range(max_iter):
        nxt = interpolate_located(V, loc, "min")
        Vn = np.where(ok, cost + nxt, np.inf)
        fin = np.isfinite(V) & np.isfinite(Vn)
        done = np.array_equal(np.isfinite(V), np.isfinite(Vn)) and (
            not fin.any() or np.max(np.abs(Vn[fin] - V[fin])) <= tol
        )
        V = Vn
        if done:
            break
    return ExtendedField(sgrid, V, "amrit", "min")


def _box_mask_points(Y, box) -> np.ndarray:
    lo, hi = (np.asarray(b, float) for b in box)
    return np.all((Y >= lo - 1e-12) & (Y <= hi + 1e-12), axis=-1)


def _need(x, what, kind):
    if x is None:
        raise TerminalCostError(f"terminal kind {kind!r} needs {what}")
    return x


def build_terminal_cost(spec: TerminalCostSpec, V_plus: Optional[ExtendedField] = None,
                        V_ominus: Optional[ExtendedField] = None, grids=None,
                        model: Optional[ModelInstance] = None) -> ExtendedField:
    """Terminal field for ``spec``.

    ``vf1``: ``Vominus + r*||x||^2``; ``vf2``: ``(1-r)*Vominus + r*V+`` (i.e.
    ``Vominus + r*(V+ - Vominus)``); ``beta_composite``:
    ``beta(V+ - Vominus) + Vominus`` with ``beta(inf)`` taken as its limit.
    """
    kind = spec.kind
    sgrid = None
    for f in (V_plus, V_ominus, spec.field):
        if f is not None:
            sgrid = f.grid
            break
    if sgrid is None and grids is not None:
        sgrid = grids[0]
    if kind == "origin_indicator":
        _need(sgrid, "a state grid", kind)
        v = np.full(sgrid.size, np.inf)
        v[sgrid.origin_index] = 0.0
        return ExtendedField(sgrid, v, spec.label, "min")
    if kind == "v_plus":
        vp = _need(V_plus, "V_plus", kind)
        return ExtendedField(vp.grid, vp.values.copy(), spec.label, "min")
    if kind == "v_ominus":
        vo = _need(V_ominus, "V_ominus", kind)
        return ExtendedField(vo.grid, vo.values.copy(), spec.label, "min")
    if kind == "vf1":
        vo = _need(V_ominus, "V_ominus", kind)
        r2 = np.sum(vo.grid.points() ** 2, axis=-1)
        return ExtendedField(vo.grid, vo.values + spec.r * r2, spec.label, "min")
    if kind == "vf2":
        vo = _need(V_ominus, "V_ominus", kind)
        vp = _need(V_plus, "V_plus", kind)
        if spec.r == 0:
            v = vo.values.copy()
        else:
            fin = np.isfinite(vp.values)
            with np.errstate(invalid="ignore"):
                mix = (1.0 - spec.r) * vo.values + spec.r * vp.values
            v = np.where(fin, mix, np.inf)
        return ExtendedField(vo.grid, v, spec.label, "min")
    if kind == "beta_composite":
        vo = _need(V_ominus, "V_ominus", kind)
        vp = _need(V_plus, "V_plus", kind)
        beta = spec.beta or default_beta
        with np.errstate(invalid="ignore"):
            gap = np.where(np.isfinite(vp.values), vp.values - vo.values, _BIG)
        b = np.asarray(beta(gap), float)
        v = np.where(b >= 0.1 * _BIG, np.inf, b + vo.values)
        return ExtendedField(vo.grid, v, spec.label, "min")
    # amrit
    box = _need(spec.terminal_box, "a terminal_box", kind)
    if spec.field is not None:
        inbox = _box_mask(spec.field.grid, box)
        return ExtendedField(spec.field.grid, np.where(inbox, spec.field.values, np.inf), spec.label, "min")
    _need(spec.local_gain, "a field or a local_gain", kind)
    _need(model, "the model to evaluate the local law", kind)
    _need(sgrid, "a state grid", kind)
    return local_cost_to_go(model, sgrid, spec.local_gain, box)


# --- terminal condition -------------------------------------------------------

@dataclass
class AmritReport:
    nodes_checked: int
    decrease_violations: int
    admissibility_violations: int
    invariance_violations: int
    max_decrease_excess: float  # max of V_f(f) - V_f(x) + l over checked nodes
    passed: bool
    violations: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "nodes_checked": self.nodes_checked,
                "decrease_violations": self.decrease_violations,
                "admissibility_violations": self.admissibility_violations,
                "invariance_violations": self.invariance_violations,
                "max_decrease_excess": self.max_decrease_excess,
                "pass": self.passed,
            }
        )


def _kappa_values(kappa, sgrid, X, idx):
    if isinstance(kappa, ValueSolution):
        pol = kappa.policy[idx]
        U = kappa.controls.points()[np.clip(pol, 0, None)]
        return np.where((pol >= 0)[:, None], U, np.nan)
    if callable(kappa):
        return np.asarray(kappa(X), float).reshape(len(X), -1)
    K = np.atleast_2d(np.asarray(kappa, float))
    return -X @ K.T


def check_amrit_condition(model: ModelInstance, grids, V_f: ExtendedField, kappa, terminal_box,
                          tol: float = CERT_TOL) -> AmritReport:
    """Check the terminal decrease, admissibility and invariance on box nodes.

    ``kappa`` is a ValueSolution (its policy), a callable ``X -> U`` or a
    gain matrix ``K`` for ``u = -K x``.  The decrease tolerance adds the
    oscillation of ``V_f`` over the landing cell to ``tol``.
    """
    sgrid = grids[0]
    lo, hi = (np.asarray(b, float) for b in terminal_box)
    if np.any(lo < np.array(sgrid.lower) - 1e-12) or np.any(hi > np.array(sgrid.upper) + 1e-12):
        raise ValueError("terminal box must lie inside the state box")
    if np.any(lo > 0) or np.any(hi < 0):
        raise ValueError("terminal box must contain the origin")
    idx = np.nonzero(_box_mask(sgrid, terminal_box))[0]
    X = sgrid.points()[idx]
    U = _kappa_values(kappa, sgrid, X, idx)
    defined = ~np.isnan(U).any(axis=-1)
    Uc = np.where(defined[:, None], U, 0.0)
    adm = defined & model.constraints.contains(X, Uc)
    Y = model.f(X, Uc)
    inv = _box_mask_points(Y, terminal_box)
    loc = locate(sgrid, Y)
    vy = interpolate_located(V_f.values, loc, "min")
    vx = V_f.values[idx]
    ell = model.stage_cost(X, Uc)
    with np.errstate(invalid="ignore"):
        excess = vy - vx + ell
    v = V_f.values[loc.corners]
    part = loc.weights > 0
    with np.errstate(invalid="ignore"):
        osc = np.where(part, v, -np.inf).max(-1) - np.where(part, v, np.inf).min(-1)
    osc = np.where(np.isfinite(osc), osc, 0.0)
    dec_bad = ~(excess <= tol + osc)
    bad = dec_bad | ~adm | ~inv
    viol = [
        (X[i].tolist(), Uc[i].tolist(), float(excess[i]), bool(adm[i]), bool(inv[i]))
        for i in np.nonzero(bad)[0]
    ]
    finite_ex = excess[np.isfinite(excess)]
    return AmritReport(
        nodes_checked=len(idx),
        decrease_violations=int(dec_bad.sum()),
        admissibility_violations=int((~adm).sum()),
        invariance_violations=int((~inv).sum()),
        max_decrease_excess=float(finite_ex.max()) if finite_ex.size else math.inf,
        passed=not bad.any(),
        violations=viol,
    )


# --- MPC law and closed loop -----------------------------------------------------

def finite_levels(model: ModelInstance, grids, terminal: ExtendedField, n: int) -> list:
    """``[V_0, V_1, ..., V_n]`` as fields, with ``V_0 = terminal``."""
    sols = value_iterate_finite(model, grids, terminal, n) if n > 0 else []
    return [terminal] + [s.value for s in sols]


def _feedback(model, cgrid, W: ExtendedField, X: np.ndarray):
    """Vectorized MPC law; returns (U, feasible)."""
    K = X.shape[0]
    C = cgrid.points()
    Xb = np.repeat(X, len(C), axis=0)
    Ub = np.tile(C, (K, 1))
    Y = model.f(Xb, Ub)
    adm = model.constraints.contains(Xb, Ub)
    loc = locate(W.grid, Y)
    q = interpolate_located(W.values, loc, "min") + model.stage_cost(Xb, Ub)
    q = np.where(adm & ~np.isnan(q), q, np.inf).reshape(K, len(C))
    j = np.argmin(q, axis=1)
    feas = np.isfinite(q[np.arange(K), j])
    return C[j], feas


def mpc_feedback(model: ModelInstance, grids, V_levels: Sequence[ExtendedField], N: int, x) -> np.ndarray:
    """First control of the horizon-``N`` problem at ``x``.

    Raises
    ------
    InfeasibleControlError
        If every control node gives an infinite predicted cost.
    """
    if N < 1 or len(V_levels) < N:
        raise ValueError(f"need V_levels up to V_{N - 1}")
    x = np.atleast_1d(np.asarray(x, float))
    U, feas = _feedback(model, grids[1], V_levels[N - 1], x[None, :])
    if not feas[0]:
        raise InfeasibleControlError(f"no feasible control at x={x.tolist()} for N={N}")
    return U[0]


def _ball(sgrid, radius):
    if radius is None:
        return 2.0 * np.asarray(sgrid.spacing, float)
    return np.broadcast_to(np.asarray(radius, float), (sgrid.ndim,))


@dataclass
class ClosedLoopResult:
    trajectory: list
    inputs: list
    converged: bool
    accumulated_cost: float
    infeasible_at: Optional[int] = None

    @property
    def steps(self) -> int:
        return len(self.inputs)


@dataclass
class BatchResult:
    starts: np.ndarray
    converged: np.ndarray
    steps: np.ndarray
    cost: np.ndarray
    infeasible_at: np.ndarray  # -1 where never infeasible
    trajectories: Optional[list] = None

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.starts.shape[1]
        w.writerow([f"x{i + 1}" for i in range(d)] + ["converged", "steps", "cost", "infeasible_at"])
        for k in range(len(self.starts)):
            w.writerow(
                [repr(float(a)) for a in self.starts[k]]
                + [int(self.converged[k]), int(self.steps[k]), _fmt(self.cost[k]),
                   "" if self.infeasible_at[k] < 0 else int(self.infeasible_at[k])]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return repr(v)


def simulate_batch(model: ModelInstance, grids, W: ExtendedField, X0, max_steps: int = 500,
                   radius=None, dwell: int = 10, record: bool = False) -> BatchResult:
    """Closed loops from every row of ``X0`` under the law induced by ``W = V_{N-1}``.

    A start converges once its state has stayed in the ball
    ``|x_i| <= radius_i`` for ``dwell`` consecutive steps (default radius:
    two cells per coordinate).
    """
    sgrid, cgrid = grids
    X = np.array(X0, dtype=float, ndmin=2)
    K = X.shape[0]
    rad = _ball(sgrid, radius)
    conv = np.zeros(K, dtype=bool)
    steps = np.zeros(K, dtype=int)
    cost = np.zeros(K)
    infeas = np.full(K, -1)
    count = np.zeros(K, dtype=int)
    active = np.arange(K)
    trajs = [[X[k].copy()] for k in range(K)] if record else None
    inputs = [[] for _ in range(K)] if record else None
    for k in range(max_steps + 1):
        if active.size == 0:
            break
        xa = X[active]
        inball = np.all(np.abs(xa) <= rad + 1e-12, axis=-1)
        count[active] = np.where(inball, count[active] + 1, 0)
        done = count[active] >= dwell
        conv[active[done]] = True
        steps[active[done]] = k
        active = active[~done]
        if active.size == 0 or k == max_steps:
            steps[active] = k
            break
        U, feas = _feedback(model, cgrid, W, X[active])
        bad = ~feas
        infeas[active[bad]] = k
        steps[active[bad]] = k
        good = active[feas]
        U = U[feas]
        cost[good] += model.stage_cost(X[good], U)
        X[good] = model.f(X[good], U)
        if record:
            for i, g in enumerate(good):
                inputs[g].append(U[i].copy())
                trajs[g].append(X[g].copy())
        active = good
    out = BatchResult(np.array(X0, dtype=float, ndmin=2), conv, steps, cost, infeas)
    if record:
        out.trajectories = list(zip(trajs, inputs))
    return out


def simulate_closed_loop(model: ModelInstance, grids, terminal: Union[ExtendedField, Sequence], N: int, x0,
                         max_steps: int = 500, radius=None, dwell: int = 10) -> ClosedLoopResult:
    """Receding-horizon closed loop from ``x0`` on the true dynamics.

    ``terminal`` is the terminal field or a precomputed list of levels.
    """
    if isinstance(terminal, ExtendedField):
        levels = finite_levels(model, grids, terminal, N - 1)
    else:
        levels = terminal
    if len(levels) < N:
        raise ValueError(f"need V_levels up to V_{N - 1}")
    res = simulate_batch(model, grids, levels[N - 1], np.atleast_1d(np.asarray(x0, float))[None, :],
                         max_steps, radius, dwell, record=True)
    traj, inp = res.trajectories[0]
    inf_at = int(res.infeasible_at[0])
    return ClosedLoopResult(
        trajectory=[t.tolist() for t in traj],
        inputs=[u.tolist() for u in inp],
        converged=bool(res.converged[0]),
        accumulated_cost=float(res.cost[0]),
        infeasible_at=None if inf_at < 0 else inf_at,
    )


# --- studies ---------------------------------------------------------------------

@dataclass
class HorizonResult:
    value: Union[int, str]
    fractions: list  # (N, fraction of starts converged)
    radius: Optional[np.ndarray] = None

    def __int__(self):
        if self.value == "none":
            raise ValueError("no stabilizing horizon found")
        return int(self.value)


def _terminal(spec_or_field, V_plus, V_ominus, grids, model):
    if isinstance(spec_or_field, ExtendedField):
        return spec_or_field
    return build_terminal_cost(spec_or_field, V_plus, V_ominus, grids, model)


def practical_radius(model: ModelInstance, grids, V_plus: ExtendedField, starts=None,
                     settle: int = 100, window: int = 100, margin_cells: int = 1) -> np.ndarray:
    """Per-axis ball radius matched to the resolution of the grid controller.

    The MPC law only reaches states representable by the grids, so near an
    open-loop unstable origin even the infinite-horizon (``V_f = V+``) loop
    settles into a small limit cycle rather than onto the origin.  The radius
    is the per-axis extent of that limit set (after ``settle`` steps, over
    ``window`` steps, from every start), rounded up to whole cells plus
    ``margin_cells``, and never below two cells.
    """
    sgrid = grids[0]
    h = np.asarray(sgrid.spacing, float)
    if starts is None:
        starts = sgrid.points()[V_plus.finite_mask]
    X = np.array(starts, dtype=float, ndmin=2)
    ok = np.ones(len(X), dtype=bool)
    amp = np.zeros_like(X)
    for k in range(settle + window):
        U, feas = _feedback(model, grids[1], V_plus, X[ok])
        idx = np.nonzero(ok)[0]
        ok[idx[~feas]] = False
        good = idx[feas]
        X[good] = model.f(X[good], U[feas])
        if k >= settle:
            amp[good] = np.maximum(amp[good], np.abs(X[good]))
    cells = np.ceil(amp[ok].max(axis=0) / h - 1e-9) if ok.any() else np.zeros_like(h)
    return np.maximum(cells + margin_cells, 2.0) * h


def min_stabilizing_horizon(model: ModelInstance, grids, terminal_spec, N_max: int,
                            V_plus: ExtendedField, V_ominus: Optional[ExtendedField] = None,
                            starts=None, max_steps: int = 500, radius="auto", dwell: int = 10,
                            levels: Optional[list] = None) -> HorizonResult:
    """Smallest ``N <= N_max`` whose closed loop converges from every start.

    Starts default to all nodes where ``V_plus`` is finite.  ``radius="auto"``
    uses :func:`practical_radius`; ``None`` means two cells per axis.
    """
    if N_max < 1:
        raise ValueError("N_max must be >= 1")
    sgrid = grids[0]
    if starts is None:
        starts = sgrid.points()[V_plus.finite_mask]
    if isinstance(radius, str):
        if radius != "auto":
            raise ValueError(f"unknown radius {radius!r}")
        radius = practical_radius(model, grids, V_plus)
    if levels is None:
        term = _terminal(terminal_spec, V_plus, V_ominus, grids, model)
        levels = finite_levels(model, grids, term, N_max - 1)
    fr = []
    for N in range(1, N_max + 1):
        res = simulate_batch(model, grids, levels[N - 1], starts, max_steps, radius, dwell)
        fr.append((N, float(res.converged.mean())))
        if res.all_converged:
            return HorizonResult(N, fr, radius)
    return HorizonResult("none", fr, radius)


def convergence_profile(model: ModelInstance, grids, terminal_spec, N_max: int, V_plus: ExtendedField,
                        V_ominus: Optional[ExtendedField] = None, levels: Optional[list] = None) -> list:
    """``max |V_N - V+|`` over the V+-finite mask for ``N = 1..N_max``."""
    if levels is None:
        term = _terminal(terminal_spec, V_plus, V_ominus, grids, model)
        levels = finite_levels(model, grids, term, N_max)
    mask = V_plus.finite_mask
    out = []
    for N in range(1, N_max + 1):
        v = levels[N].values[mask]
        if not np.all(np.isfinite(v)):
            out.append(math.inf)
        else:
            out.append(float(np.max(np.abs(v - V_plus.values[mask]))))
    return out


def table_csv(rows: list, columns: Sequence[str], path=None) -> str:
    """Write ``rows`` (dicts) as CSV with ``+inf``/``-inf`` literals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def table_json(obj, path=None) -> str:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text
