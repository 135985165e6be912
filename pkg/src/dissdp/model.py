"""
Controlled systems with stage cost and box constraints, plus the registry of
built-in example models.

All maps are vectorized: states have shape (..., n) and controls (..., m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize.elementwise import find_root

__all__ = [
    "ModelError",
    "InversionError",
    "ControlSystem",
    "StageCost",
    "ConstraintSet",
    "ModelInstance",
    "make_model",
    "eval_dynamics",
    "eval_inverse_dynamics",
    "verify_origin_steady_state",
    "admissible",
    "get_model",
    "list_models",
    "MODEL_REGISTRY",
]

ORIGIN_TOL = 1e-12
INVERSE_TOL = 1e-10


class ModelError(ValueError):
    """Contract violation in model construction or evaluation."""


class InversionError(RuntimeError):
    """The inverse dynamics could not be evaluated."""


@dataclass(frozen=True)
class ControlSystem:
    state_dim: int
    control_dim: int
    forward_map: Callable
    inverse_map: Optional[Callable] = None
    inverse_method: str = "unavailable"

    def __post_init__(self):
        if self.inverse_method not in ("closed_form", "monotone_root_find", "unavailable"):
            raise ModelError(f"unknown inverse method {self.inverse_method!r}")
        if (self.inverse_map is None) != (self.inverse_method == "unavailable"):
            raise ModelError("inverse_map and inverse_method are inconsistent")


@dataclass(frozen=True)
class StageCost:
    eval: Callable


@dataclass(frozen=True)
class ConstraintSet:
    """Box constraints on state and control, optionally refined by a predicate."""

    state_lower: tuple
    state_upper: tuple
    control_lower: tuple
    control_upper: tuple
    kind: str = "box"
    predicate: Optional[Callable] = None

    def __post_init__(self):
        for lo, hi in ((self.state_lower, self.state_upper), (self.control_lower, self.control_upper)):
            if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
                raise ModelError("box bounds must satisfy lower <= upper per dimension")
        if self.kind not in ("box", "predicate"):
            raise ModelError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "predicate" and self.predicate is None:
            raise ModelError("predicate constraint set needs a predicate")

    def contains(self, x, u, tol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        ok = np.all((x >= np.array(self.state_lower) - tol) & (x <= np.array(self.state_upper) + tol), axis=-1)
        ok &= np.all((u >= np.array(self.control_lower) - tol) & (u <= np.array(self.control_upper) + tol), axis=-1)
        if self.predicate is not None:
            ok &= np.asarray(self.predicate(x, u), dtype=bool)
        return ok


@dataclass(frozen=True)
class ModelInstance:
    system: ControlSystem
    cost: StageCost
    constraints: ConstraintSet
    name: str
    description: str = field(default="", compare=False)

    @property
    def state_dim(self) -> int:
        return self.system.state_dim

    @property
    def control_dim(self) -> int:
        return self.system.control_dim

    def f(self, x, u):
        return self.system.forward_map(np.asarray(x, float), np.asarray(u, float))

    def finv(self, y, u):
        if self.system.inverse_map is None:
            raise InversionError(f"model {self.name!r} has no inverse dynamics")
        return self.system.inverse_map(np.asarray(y, float), np.asarray(u, float))

    def stage_cost(self, x, u):
        return self.cost.eval(np.asarray(x, float), np.asarray(u, float))


def _check_dims(model: ModelInstance, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1:] != (model.state_dim,) or u.shape[-1:] != (model.control_dim,):
        raise ModelError(
            f"dimension mismatch: model {model.name!r} expects state dim {model.state_dim} "
            f"and control dim {model.control_dim}, got {x.shape} and {u.shape}"
        )
    return x, u


def eval_dynamics(model: ModelInstance, x, u) -> np.ndarray:
    """Evaluate ``f(x, u)``; no constraint check is performed."""
    x, u = _check_dims(model, np.atleast_1d(x), np.atleast_1d(u))
    return model.f(x, u)


def eval_inverse_dynamics(model: ModelInstance, y, u) -> np.ndarray:
    """Return ``x`` with ``f(x, u) = y``.

    Raises
    ------
    InversionError
        If the model has no inverse or the root is not bracketed.
    """
    y, u = _check_dims(model, np.atleast_1d(y), np.atleast_1d(u))
    x = model.finv(y, u)
    if np.any(np.isnan(x)):
        raise InversionError(
            f"no bracketing interval for the inverse of {model.name!r} at y={y}, u={u}"
        )
    return x


def verify_origin_steady_state(model: ModelInstance) -> dict:
    """Check ``f(0,0) = 0``, ``l(0,0) = 0`` and admissibility of the origin."""
    x0 = np.zeros(model.state_dim)
    u0 = np.zeros(model.control_dim)
    fr = float(np.max(np.abs(model.f(x0, u0))))
    cr = float(abs(model.stage_cost(x0, u0)))
    adm = bool(model.constraints.contains(x0, u0, tol=0.0))
    return {
        "f_residual": fr,
        "cost_residual": cr,
        "admissible": adm,
        "pass": fr <= ORIGIN_TOL and cr <= ORIGIN_TOL and adm,
    }


def admissible(model: ModelInstance, x, u) -> bool:
    """True iff ``(x, u)`` lies in the constraint set."""
    x, u = _check_dims(model, np.atleast_1d(x), np.atleast_1d(u))
    return bool(np.all(model.constraints.contains(x, u, tol=0.0)))


def make_model(system, cost, constraints, name, description="") -> ModelInstance:
    """Build a model and reject it unless the origin is an admissible steady state."""
    m = ModelInstance(system, cost, constraints, name, description)
    rep = verify_origin_steady_state(m)
    if not rep["pass"]:
        raise ModelError(
            f"model {name!r} is not normalized to the origin: "
            f"f residual {rep['f_residual']:g}, cost residual {rep['cost_residual']:g}, "
            f"origin admissible {rep['admissible']}"
        )
    return m


# --- built-in models -------------------------------------------------------

def _lq(u_bound: float = 1.0, x_bound: float = 10.0, name: str = "lq") -> ModelInstance:
    sys = ControlSystem(
        1,
        1,
        lambda x, u: x + u,
        lambda y, u: y - u,
        "closed_form",
    )
    cost = StageCost(lambda x, u: x[..., 0] ** 2 + u[..., 0] ** 2)
    cons = ConstraintSet((-x_bound,), (x_bound,), (-u_bound,), (u_bound,))
    return make_model(sys, cost, cons, name, "scalar integrator with quadratic cost")


def _cubic(x1):
    t = x1 - 1.0
    return 2.0 * x1 + t * t * t + 1.0


def _nl_forward(x, u):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([_cubic(x1) + x2, x2 + u[..., 0]], axis=-1)


def _nl_cost(x, u):
    x1, x2 = x[..., 0], x[..., 1]
    t = x1 - 1.0
    return x2 * x2 + x1 + t * t * t + 1.0 + x2 - u[..., 0]


def _make_nl_inverse(x1_lo: float, x1_hi: float):
    # bracket = state box inflated by a factor 2 about its centre
    c, r = 0.5 * (x1_lo + x1_hi), 0.5 * (x1_hi - x1_lo)
    lo, hi = c - 2.0 * r, c + 2.0 * r

    def inverse(y, u):
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        x2 = y[..., 1] - u[..., 0]
        rhs = np.asarray(np.broadcast_to(y[..., 0], x2.shape) - x2)
        # many (y, u) pairs share the same scalar equation
        flat, inv = np.unique(rhs.ravel(), return_inverse=True)
        res = find_root(
            lambda s, r: _cubic(s) - r,
            (np.full(flat.shape, lo), np.full(flat.shape, hi)),
            args=(flat,),
            tolerances=dict(xatol=1e-14, xrtol=0.0, fatol=0.0, frtol=0.0),
        )
        x1 = np.where(res.success, res.x, np.nan)
        # Newton polish; the cubic has slope >= 2 so steps are tiny and safe
        for _ in range(2):
            x1 = x1 - (_cubic(x1) - flat) / (2.0 + 3.0 * (x1 - 1.0) ** 2)
        x1 = x1[inv].reshape(rhs.shape)
        x2 = np.where(np.isnan(x1), np.nan, x2)
        return np.stack([x1, x2], axis=-1)

    return inverse


def _nonlinear(name: str = "nonlinear", x1_bound: float = 2.0, x2_bound: float = 10.0,
               u_bound: float = 10.0) -> ModelInstance:
    sys = ControlSystem(2, 1, _nl_forward, _make_nl_inverse(-x1_bound, x1_bound), "monotone_root_find")
    cons = ConstraintSet((-x1_bound, -x2_bound), (x1_bound, x2_bound), (-u_bound,), (u_bound,))
    return make_model(sys, StageCost(_nl_cost), cons, name, "cubic system with economic cost")


MODEL_REGISTRY: dict[str, Callable[..., ModelInstance]] = {
    "lq": lambda **kw: _lq(name="lq", **kw),
    "lq-wide": lambda **kw: _lq(u_bound=kw.pop("u_bound", 2.0), name="lq-wide", **kw),
    "nonlinear": lambda **kw: _nonlinear(**kw),
}


def get_model(name: str, **overrides) -> ModelInstance:
    """Build a registered model; ``overrides`` adjust its box bounds."""
    if name not in MODEL_REGISTRY:
        raise ModelError(f"unknown model {name!r}; registered models: {sorted(MODEL_REGISTRY)}")
    return MODEL_REGISTRY[name](**overrides)


def list_models() -> list[dict]:
    """Names, dimensions and default boxes of all registered models."""
    out = []
    for name in MODEL_REGISTRY:
        m = get_model(name)
        c = m.constraints
        out.append(
            {
                "name": name,
                "state_dim": m.state_dim,
                "control_dim": m.control_dim,
                "state_box": [list(c.state_lower), list(c.state_upper)],
                "control_box": [list(c.control_lower), list(c.control_upper)],
                "inverse": m.system.inverse_method,
                "description": m.description,
            }
        )
    return out
