"""
Value iteration on state/control grids.

Forward values are minima of accumulated stage cost until the origin is
reached; backward values are maxima of the negated cost accumulated along
trajectories that start at the origin.  The relaxed variants replace the
interpolated value by its l1 inf- (sup-) convolution, which prices a
dynamics slack ``z`` by ``p*||z||_1``.
"""

from __future__ import annotations

import csv
import functools
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .grid import (
    CellLocation,
    ControlGrid,
    ExtendedField,
    StateGrid,
    inf_convolve_l1,
    interpolate,
    interpolate_located,
    locate,
    sup_convolve_l1,
)
from .model import ModelInstance

__all__ = [
    "SolveConfig",
    "ValueSolution",
    "ConvergenceError",
    "CalibrationError",
    "InfeasibleSplitError",
    "Transitions",
    "transitions",
    "origin_indicator",
    "solve_forward",
    "solve_backward",
    "solve_forward_relaxed",
    "solve_backward_relaxed",
    "calibrate_penalty",
    "CalibrationResult",
    "value_iterate_finite",
    "cost_to_travel",
    "TravelResult",
    "optimal_split",
    "iteration_log_csv",
    "policy_at",
]

log = logging.getLogger(__name__)

Grids = tuple  # (StateGrid, ControlGrid)


class ConvergenceError(RuntimeError):
    """Value iteration hit ``max_iter`` before the residual dropped below tol."""


class CalibrationError(RuntimeError):
    """No penalty up to 2**20 made the relaxation exact."""


class InfeasibleSplitError(RuntimeError):
    """Every horizon split is infeasible."""


@dataclass
class SolveConfig:
    """Solver settings.

    Parameters
    ----------
    tol : float
        Sup-norm Bellman residual threshold on finite nodes.
    max_iter : int
        Iteration budget.
    penalty_p : float or "auto"
        Penalty weight for the relaxed problems; "auto" means calibrate.
    seed : {"indicator", "relaxed"}
        Initial field of the unrelaxed solvers. "indicator" starts from zero at
        the origin node and an infinite value elsewhere. "relaxed" starts from
        the relaxed solution at ``seed_penalty`` and lets the unrelaxed
        iteration remove the slack; this is needed when the dynamics rarely map
        nodes onto nodes, so that exact hits of the origin cannot grow a
        full-dimensional domain under pessimistic interpolation.
    seed_penalty : float
    """

    tol: float = 1e-6
    max_iter: int = 10000
    penalty_p: Union[float, str] = "auto"
    seed: str = "indicator"
    seed_penalty: float = 64.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.seed not in ("indicator", "relaxed"):
            raise ValueError(f"unknown seed {self.seed!r}")
        if self.penalty_p != "auto" and not float(self.penalty_p) > 0:
            raise ValueError("penalty_p must be positive or 'auto'")


# recommended seeds for the registered models
MODEL_SEEDS = {"nonlinear": "relaxed"}


def config_for(model: ModelInstance, **kw) -> SolveConfig:
    """SolveConfig with the seed recommended for ``model``."""
    kw.setdefault("seed", MODEL_SEEDS.get(model.name, "indicator"))
    return SolveConfig(**kw)


@dataclass
class ValueSolution:
    value: ExtendedField
    policy: np.ndarray
    iterations: int
    residual: float
    domain_mask: np.ndarray
    controls: ControlGrid
    converged: bool = True
    kind: str = ""
    penalty: Optional[float] = None
    log: list = field(default_factory=list)

    def policy_controls(self) -> np.ndarray:
        """Control vectors per node (NaN where the node is infeasible)."""
        u = self.controls.points()[np.clip(self.policy, 0, None)]
        return np.where((self.policy >= 0)[:, None], u, np.nan)


# --- transition tables ------------------------------------------------------

class Transitions:
    """Precomputed successor (or predecessor) geometry for every node/control pair.

    For ``direction="forward"`` the partner point is ``f(x, u)`` and the
    stage cost is ``l(x, u)``; for ``"backward"`` it is ``f^{-1}(x, u)`` and the
    cost is ``l(f^{-1}(x, u), u)``.
    """

    def __init__(self, model: ModelInstance, sgrid: StateGrid, cgrid: ControlGrid, direction: str):
        self.model, self.sgrid, self.cgrid, self.direction = model, sgrid, cgrid, direction
        Xb = np.repeat(sgrid.points(), cgrid.size, axis=0)
        Ub = np.tile(cgrid.points(), (sgrid.size, 1))
        shape = (sgrid.size, cgrid.size)
        if direction == "forward":
            P = model.f(Xb, Ub)
            adm = model.constraints.contains(Xb, Ub)
            cost = model.stage_cost(Xb, Ub)
        elif direction == "backward":
            P = model.finv(Xb, Ub)
            ok = ~np.isnan(P).any(axis=-1)
            Pc = np.where(ok[:, None], P, 0.0)
            adm = ok & model.constraints.contains(Pc, Ub)
            cost = np.where(ok, model.stage_cost(Pc, Ub), np.nan)
        else:
            raise ValueError(direction)
        self.points = P.reshape(shape + (sgrid.ndim,))
        loc = locate(sgrid, P, clamp=True)
        inside = locate(sgrid, np.where(np.isnan(P), 0.0, P)).inside & ~np.isnan(P).any(axis=-1)
        self.admissible = adm.reshape(shape)
        self.inside = inside.reshape(shape)
        self.cost = np.where(adm, cost, np.nan).reshape(shape)
        self.corners = loc.corners.reshape(shape + (-1,)).astype(np.int32)
        self.weights = loc.weights.reshape(shape + (-1,))
        self.excess = np.where(np.isnan(P).any(axis=-1), np.inf, loc.excess).reshape(shape)
        self._loc = CellLocation(self.corners, self.weights, np.ones(shape, dtype=bool), self.excess)

    def interp(self, values: np.ndarray, polarity: str) -> np.ndarray:
        """Interpolated ``values`` at every partner point (clamped onto the box)."""
        return interpolate_located(values, self._loc, polarity)

    def cell_oscillation(self, values: np.ndarray) -> np.ndarray:
        """max - min of the participating vertex values of each partner cell."""
        v = values[self.corners]
        part = self.weights > 0
        hi = np.where(part, v, -np.inf).max(axis=-1)
        lo = np.where(part, v, np.inf).min(axis=-1)
        with np.errstate(invalid="ignore"):
            osc = hi - lo
        return np.where(np.isfinite(osc), osc, np.inf)


@functools.lru_cache(maxsize=6)
def transitions(model: ModelInstance, sgrid: StateGrid, cgrid: ControlGrid, direction: str) -> Transitions:
    return Transitions(model, sgrid, cgrid, direction)


def _grids(grids) -> tuple[StateGrid, ControlGrid]:
    sgrid, cgrid = grids
    return sgrid, cgrid


def origin_indicator(sgrid: StateGrid, polarity: str = "min", node: Optional[int] = None) -> ExtendedField:
    fill = np.inf if polarity == "min" else -np.inf
    v = np.full(sgrid.size, fill)
    v[sgrid.origin_index if node is None else node] = 0.0
    return ExtendedField(sgrid, v, "indicator", polarity)


# --- Bellman operators -------------------------------------------------------

def _forward_q(tr: Transitions, V: np.ndarray, p: Optional[float], storage=None) -> np.ndarray:
    if p is None:
        W = V
    else:
        W = inf_convolve_l1(ExtendedField(tr.sgrid, V), p).values
    Q = tr.interp(W, "min")
    if p is None:
        Q = np.where(tr.inside, Q, np.inf)
    else:
        Q = Q + p * tr.excess
    cost = tr.cost
    if storage is not None:
        lam = storage.values
        lam_next = tr.interp(lam, storage.polarity)
        with np.errstate(invalid="ignore"):
            cost = cost + lam[:, None] - lam_next
        cost = np.where(np.isnan(cost), np.inf, cost)
    with np.errstate(invalid="ignore"):
        Q = Q + cost
    return np.where(tr.admissible & ~np.isnan(Q), Q, np.inf)


def _backward_q(tr: Transitions, V: np.ndarray, p: Optional[float]) -> np.ndarray:
    if p is None:
        W = V
    else:
        W = sup_convolve_l1(ExtendedField(tr.sgrid, V, polarity="max"), p).values
    Q = tr.interp(W, "max")
    Q = np.where(tr.inside, Q, -np.inf)
    with np.errstate(invalid="ignore"):
        Q = Q - tr.cost
    return np.where(tr.admissible & ~np.isnan(Q), Q, -np.inf)


def _reduce(Q: np.ndarray, polarity: str):
    if polarity == "min":
        pol = np.argmin(Q, axis=1)
    else:
        pol = np.argmax(Q, axis=1)
    V = Q[np.arange(Q.shape[0]), pol]
    pol = np.where(np.isfinite(V), pol, -1)
    return V, pol


def _residual(V: np.ndarray, Vn: np.ndarray) -> tuple[float, bool]:
    same = np.array_equal(np.isfinite(V), np.isfinite(Vn)) and np.array_equal(
        np.sign(np.where(np.isfinite(V), 0, V)), np.sign(np.where(np.isfinite(Vn), 0, Vn))
    )
    both = np.isfinite(V) & np.isfinite(Vn)
    res = float(np.max(np.abs(Vn[both] - V[both]))) if both.any() else 0.0
    return res, same


def _iterate(step, V0: np.ndarray, cfg: SolveConfig):
    V = V0
    hist = []
    pol = np.full(V0.shape, -1)
    converged = False
    for k in range(1, cfg.max_iter + 1):
        Vn, pol = step(V)
        res, same = _residual(V, Vn)
        hist.append(res if same else math.inf)
        V = Vn
        if same and res <= cfg.tol:
            converged = True
            break
    return V, pol, k, hist, converged


def _finish(kind, sgrid, cgrid, V, pol, k, hist, converged, polarity, p=None) -> ValueSolution:
    if not converged:
        log.warning("%s: no convergence after %d iterations (residual %g)", kind, k, hist[-1])
    field_ = ExtendedField(sgrid, V, kind, polarity)
    return ValueSolution(
        value=field_,
        policy=pol,
        iterations=k,
        residual=hist[-1] if hist else 0.0,
        domain_mask=np.isfinite(V),
        controls=cgrid,
        converged=converged,
        kind=kind,
        penalty=p,
        log=hist,
    )


def solve_forward_relaxed(model: ModelInstance, grids, cfg: SolveConfig, p: float) -> ValueSolution:
    """Relaxed forward value function (V-oplus) for penalty ``p``."""
    sgrid, cgrid = _grids(grids)
    tr = transitions(model, sgrid, cgrid, "forward")
    V0 = origin_indicator(sgrid).values
    res = _iterate(lambda V: _reduce(_forward_q(tr, V, p), "min"), V0, cfg)
    return _finish("V_oplus", sgrid, cgrid, *res, "min", p)


def solve_backward_relaxed(model: ModelInstance, grids, cfg: SolveConfig, p: float) -> ValueSolution:
    """Relaxed backward value function (V-ominus) for penalty ``p``."""
    sgrid, cgrid = _grids(grids)
    tr = transitions(model, sgrid, cgrid, "backward")
    V0 = origin_indicator(sgrid, "max").values
    res = _iterate(lambda V: _reduce(_backward_q(tr, V, p), "max"), V0, cfg)
    return _finish("V_ominus", sgrid, cgrid, *res, "max", p)


def solve_forward(model: ModelInstance, grids, cfg: Optional[SolveConfig] = None) -> ValueSolution:
    """Forward value function V+ and its minimizing control index u+."""
    cfg = cfg or config_for(model)
    sgrid, cgrid = _grids(grids)
    tr = transitions(model, sgrid, cgrid, "forward")
    if cfg.seed == "relaxed":
        V0 = solve_forward_relaxed(model, grids, cfg, cfg.seed_penalty).value.values
    else:
        V0 = origin_indicator(sgrid).values
    res = _iterate(lambda V: _reduce(_forward_q(tr, V, None), "min"), V0, cfg)
    return _finish("V_plus", sgrid, cgrid, *res, "min")


def solve_backward(model: ModelInstance, grids, cfg: Optional[SolveConfig] = None) -> ValueSolution:
    """Backward value function V- and its maximizing control index u-.

    ``u-`` is the control applied at the predecessor ``f^{-1}(x, u)``.
    """
    cfg = cfg or config_for(model)
    sgrid, cgrid = _grids(grids)
    tr = transitions(model, sgrid, cgrid, "backward")
    if cfg.seed == "relaxed":
        V0 = solve_backward_relaxed(model, grids, cfg, cfg.seed_penalty).value.values
    else:
        V0 = origin_indicator(sgrid, "max").values
    res = _iterate(lambda V: _reduce(_backward_q(tr, V, None), "max"), V0, cfg)
    return _finish("V_minus", sgrid, cgrid, *res, "max")


@dataclass
class CalibrationResult:
    p: float
    history: list  # (p, forward gap, backward gap)
    oplus: ValueSolution
    ominus: ValueSolution

    def __float__(self):
        return float(self.p)


def _gap(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    m = mask & np.isfinite(a) & np.isfinite(b)
    bad = mask & ~(np.isfinite(a) & np.isfinite(b))
    if bad.any():
        return math.inf
    return float(np.max(np.abs(a[m] - b[m]))) if m.any() else 0.0


def calibrate_penalty(model: ModelInstance, grids, cfg: Optional[SolveConfig] = None,
                      v_plus: Optional[ValueSolution] = None,
                      v_minus: Optional[ValueSolution] = None,
                      p_max: float = 2.0**20) -> CalibrationResult:
    """Smallest power-of-two penalty making both relaxations exact.

    Doubles ``p`` from 1 until ``||V+ - Voplus||`` on the V+ mask and
    ``||V- - Vominus||`` on the V- mask are below ``10*tol`` at ``p`` and at
    ``2p``; returns the first such ``p``.
    """
    cfg = cfg or config_for(model)
    v_plus = v_plus or solve_forward(model, grids, cfg)
    v_minus = v_minus or solve_backward(model, grids, cfg)
    thr = 10 * cfg.tol
    hist = []
    p = 1.0
    ok_prev = None
    while p <= p_max:
        vo = solve_forward_relaxed(model, grids, cfg, p)
        vm = solve_backward_relaxed(model, grids, cfg, p)
        gf = _gap(vo.value.values, v_plus.value.values, v_plus.domain_mask)
        gb = _gap(vm.value.values, v_minus.value.values, v_minus.domain_mask)
        hist.append((p, gf, gb))
        ok = gf <= thr and gb <= thr
        if ok and ok_prev is not None:
            return CalibrationResult(ok_prev[0], hist, ok_prev[1], ok_prev[2])
        ok_prev = (p, vo, vm) if ok else None
        p *= 2.0
    raise CalibrationError(f"relaxation not exact for any p <= {p_max:g}; history {hist}")


def value_iterate_finite(model: ModelInstance, grids, terminal: ExtendedField, N: int,
                         storage: Optional[ExtendedField] = None) -> list:
    """Finite-horizon values ``V_1 ... V_N`` from ``V_0 = terminal``.

    With ``storage`` the rotated stage cost ``l + lam(x) - lam(f(x,u))`` is used.
    """
    sgrid, cgrid = _grids(grids)
    tr = transitions(model, sgrid, cgrid, "forward")
    V = terminal.values
    out = []
    for k in range(1, N + 1):
        Vn, pol = _reduce(_forward_q(tr, V, None, storage), "min")
        res, same = _residual(V, Vn)
        V = Vn
        out.append(
            ValueSolution(ExtendedField(sgrid, V, f"V_{k}", "min"), pol, k, res,
                          np.isfinite(V), cgrid, True, f"V_{k}")
        )
    return out


# --- cost to travel ----------------------------------------------------------

@dataclass
class TravelResult:
    value: float
    target_node: int
    snap_distance: float
    warnings: list
    levels: list = field(default_factory=list, repr=False)

    def __float__(self):
        return float(self.value)


def _travel_levels(model, grids, b, N, relaxed, p, cfg):
    sgrid, cgrid = _grids(grids)
    node, dist = sgrid.nearest_node(b)
    warnings = []
    if dist > 0.5 + 1e-12:
        warnings.append(f"target {list(np.atleast_1d(b))} is {dist:.3g} cells from the nearest node")
    elif dist > 1e-9:
        warnings.append(f"target {list(np.atleast_1d(b))} snapped to node {sgrid.points()[node].tolist()}")
    tr = transitions(model, sgrid, cgrid, "forward")
    pp = p if relaxed else None
    W = origin_indicator(sgrid, node=node).values
    levels = [W]
    if N is None or N == math.inf:
        W, *_rest = _iterate(lambda V: _reduce(_forward_q(tr, V, pp), "min"), W, cfg)
        levels.append(W)
    else:
        for _ in range(int(N)):
            W, _ = _reduce(_forward_q(tr, W, pp), "min")
            levels.append(W)
    return node, dist, warnings, levels


def cost_to_travel(model: ModelInstance, grids, a, b, N, relaxed: bool = False,
                   p: Optional[float] = None, cfg: Optional[SolveConfig] = None) -> TravelResult:
    """Minimal ``N``-step cost to move from ``a`` to the grid node nearest ``b``.

    ``N`` may be ``math.inf`` (iterate to convergence).  With ``relaxed`` the
    dynamics slack is priced by ``p*||z||_1``.
    """
    cfg = cfg or SolveConfig()
    if relaxed and (p is None or not p > 0):
        raise ValueError("relaxed cost-to-travel needs a positive penalty p")
    sgrid = grids[0]
    node, dist, warnings, levels = _travel_levels(model, grids, b, N, relaxed, p, cfg)
    for w in warnings:
        log.warning(w)
    W = ExtendedField(sgrid, levels[-1], "W_0")
    return TravelResult(interpolate(W, np.atleast_1d(np.asarray(a, float))), node, dist, warnings, levels)


def optimal_split(model: ModelInstance, grids, x, N: int, p: float,
                  cfg: Optional[SolveConfig] = None) -> dict:
    """Best split of horizon ``N`` into travel to the origin and relaxed travel back.

    Minimizes ``C(x, 0, N-M) + C_r(0, x, M)`` over ``M = 1..N-1``; ties go to
    the smaller ``M``.
    """
    if N < 2:
        raise ValueError("optimal_split needs N >= 2")
    cfg = cfg or SolveConfig()
    sgrid = grids[0]
    x = np.atleast_1d(np.asarray(x, float))
    zero = np.zeros(sgrid.ndim)
    _, _, _, to0 = _travel_levels(model, grids, zero, N - 1, False, None, cfg)
    _, _, warn, fromx = _travel_levels(model, grids, x, N - 1, True, p, cfg)
    vals = []
    for M in range(1, N):
        c1 = interpolate(ExtendedField(sgrid, to0[N - M]), x)
        c2 = interpolate(ExtendedField(sgrid, fromx[M]), zero)
        vals.append(c1 + c2)
    vals = np.array(vals)
    if not np.isfinite(vals).any():
        raise InfeasibleSplitError(f"no feasible split of N={N} at x={x.tolist()}")
    i = int(np.argmin(vals))
    return {"M": i + 1, "value": float(vals[i]), "values": vals.tolist(), "warnings": warn}


def iteration_log_csv(sol: ValueSolution, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "residual"])
    for k, r in enumerate(sol.log, 1):
        w.writerow([k, "+inf" if r == math.inf else repr(float(r))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def policy_at(model: ModelInstance, grids, V: ExtendedField, Y, direction: str = "forward"):
    """Greedy control at arbitrary points ``Y`` (shape (K, n)).

    Forward: argmin of ``l(y,u) + V(f(y,u))``; backward: argmax of
    ``-l(f^{-1}(y,u), u) + V(f^{-1}(y,u))``.  Returns ``(U, feasible)``; ties go
    to the first control node.
    """
    sgrid, cgrid = _grids(grids)
    Y = np.array(Y, dtype=float, ndmin=2)
    C = cgrid.points()
    K = Y.shape[0]
    Yb = np.repeat(Y, len(C), axis=0)
    Ub = np.tile(C, (K, 1))
    if direction == "forward":
        P = model.f(Yb, Ub)
        adm = model.constraints.contains(Yb, Ub)
        with np.errstate(invalid="ignore"):
            q = model.stage_cost(Yb, Ub) + interpolate_located(V.values, locate(sgrid, P), "min")
        q = np.where(adm & ~np.isnan(q), q, np.inf).reshape(K, -1)
        j = np.argmin(q, axis=1)
    elif direction == "backward":
        P = model.finv(Yb, Ub)
        ok = ~np.isnan(P).any(axis=-1)
        Pc = np.where(ok[:, None], P, 0.0)
        adm = ok & model.constraints.contains(Pc, Ub)
        with np.errstate(invalid="ignore"):
            q = interpolate_located(V.values, locate(sgrid, Pc), "max") - model.stage_cost(Pc, Ub)
        q = np.where(adm & ~np.isnan(q), q, -np.inf).reshape(K, -1)
        j = np.argmax(q, axis=1)
    else:
        raise ValueError(direction)
    feas = np.isfinite(q[np.arange(K), j])
    return C[j], feas
