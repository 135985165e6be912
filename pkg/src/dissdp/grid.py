"""
Rectilinear grids, extended-real value fields and the operations used by the
dynamic-programming solvers: multilinear interpolation with pessimistic
infinity propagation and the l1 inf/sup-convolution (distance transform).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridError",
    "DataCorruptionError",
    "StateGrid",
    "ControlGrid",
    "ExtendedField",
    "CellLocation",
    "locate",
    "interpolate",
    "interpolate_located",
    "inf_convolve_l1",
    "sup_convolve_l1",
    "field_to_csv",
    "field_from_csv",
    "field_summary",
    "DEFAULT_GRIDS",
    "default_grids",
]

# fractions closer than this to a cell face are snapped onto it
SNAP = 1e-9


class GridError(ValueError):
    """Invalid grid construction or query."""


class DataCorruptionError(RuntimeError):
    """A cell mixes +inf and -inf vertices."""


def _uniform_axis(lo: float, hi: float, n: int, what: str) -> np.ndarray:
    if n < 3:
        raise GridError(f"{what}: need >= 3 nodes per dimension, got {n}")
    if not hi > lo:
        raise GridError(f"{what}: upper bound must exceed lower bound")
    h = (hi - lo) / (n - 1)
    k0 = -lo / h
    i0 = int(round(k0))
    if abs(k0 - i0) > 1e-9 or not 0 <= i0 < n:
        raise GridError(
            f"{what}: origin is not a node of the uniform grid on [{lo}, {hi}] "
            f"with {n} nodes"
        )
    # nodes as integer multiples of the spacing so that 0 is exact
    return (np.arange(n) - i0) * h


class _RectGrid:
    def __init__(self, lower, upper, nodes, what="grid"):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
        if not (lower.shape == upper.shape == nodes.shape):
            raise GridError(f"{what}: bounds and node counts differ in length")
        self.axes = tuple(
            _uniform_axis(lo, hi, n, f"{what} dimension {i}")
            for i, (lo, hi, n) in enumerate(zip(lower, upper, nodes))
        )
        self.lower = np.array([a[0] for a in self.axes])
        self.upper = np.array([a[-1] for a in self.axes])
        self.spacing = np.array([a[1] - a[0] for a in self.axes])
        self.shape = tuple(len(a) for a in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """All nodes as an array of shape (size, ndim), row-major order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def origin_index(self) -> int:
        idx = tuple(int(np.argmin(np.abs(a))) for a in self.axes)
        return int(np.ravel_multi_index(idx, self.shape))

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.shape == other.shape
            and all(np.array_equal(a, b) for a, b in zip(self.axes, other.axes))
        )

    def __hash__(self):
        return hash((type(self).__name__, self.shape, tuple(self.lower), tuple(self.upper)))

    def __repr__(self):
        dims = ", ".join(
            f"[{lo:g}, {hi:g}]x{n}" for lo, hi, n in zip(self.lower, self.upper, self.shape)
        )
        return f"{type(self).__name__}({dims})"


class StateGrid(_RectGrid):
    """Uniform rectilinear grid over the state box; the origin is a node."""

    def __init__(self, lower, upper, nodes):
        super().__init__(lower, upper, nodes, "state grid")

    @property
    def strides(self) -> np.ndarray:
        s = np.ones(self.ndim, dtype=np.int64)
        for i in range(self.ndim - 2, -1, -1):
            s[i] = s[i + 1] * self.shape[i + 1]
        return s

    @property
    def cell_diameter(self) -> float:
        return float(np.sqrt(np.sum(self.spacing**2)))

    def nearest_node(self, x) -> tuple[int, float]:
        """Flat index of the node nearest to ``x`` and the scaled distance to it.

        The distance is measured in units of the grid spacing (max norm).
        """
        x = np.asarray(x, dtype=float).reshape(self.ndim)
        s = (x - self.lower) / self.spacing
        k = np.clip(np.round(s), 0, np.array(self.shape) - 1).astype(int)
        return int(np.ravel_multi_index(tuple(k), self.shape)), float(np.max(np.abs(s - k)))


class ControlGrid(_RectGrid):
    """Uniform grid over the control box; the zero control is a node."""

    def __init__(self, lower, upper, nodes):
        super().__init__(lower, upper, nodes, "control grid")

    @property
    def zero_index(self) -> int:
        return self.origin_index


@dataclass
class ExtendedField:
    """Values in R u {+inf, -inf} sampled at the nodes of a state grid.

    ``polarity`` is ``"min"`` for cost-to-go type fields (outside the grid box
    they read as +inf) and ``"max"`` for backward values (outside reads -inf).
    """

    grid: StateGrid
    values: np.ndarray
    label: str = ""
    polarity: str = "min"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise GridError(f"field has {v.size} values, grid has {self.grid.size} nodes")
        if self.polarity not in ("min", "max"):
            raise GridError(f"unknown polarity {self.polarity!r}")
        self.values = v

    @property
    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    def at_origin(self) -> float:
        return float(self.values[self.grid.origin_index])

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def with_values(self, values, label=None, polarity=None) -> "ExtendedField":
        return ExtendedField(
            self.grid,
            values,
            self.label if label is None else label,
            self.polarity if polarity is None else polarity,
        )

    def __neg__(self):
        pol = "max" if self.polarity == "min" else "min"
        return ExtendedField(self.grid, -self.values, f"-{self.label}", pol)

    def __call__(self, x):
        return interpolate(self, x)


@dataclass
class CellLocation:
    """Cell lookup for a batch of query points.

    ``corners`` and ``weights`` have shape (..., 2**d); weights below the snap
    threshold are exactly zero so those vertices do not participate.
    ``excess`` is the l1 distance from the query to the grid box (0 inside).
    """

    corners: np.ndarray
    weights: np.ndarray
    inside: np.ndarray
    excess: np.ndarray


def locate(grid: StateGrid, x, clamp: bool = False) -> CellLocation:
    """Locate query points (..., d) in ``grid``.

    With ``clamp`` the points are projected onto the box first; the l1
    projection distance is returned in ``excess`` either way.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != grid.ndim:
        raise GridError(f"query dimension {x.shape[-1]} != grid dimension {grid.ndim}")
    batch = x.shape[:-1]
    nan = np.isnan(x).any(axis=-1)
    xc = np.clip(x, grid.lower, grid.upper)
    excess = np.where(nan, np.inf, np.abs(x - xc).sum(axis=-1))
    s = (xc - grid.lower) / grid.spacing
    n = np.array(grid.shape)
    # tolerate round-off just outside the box
    inside = ~nan & np.all(np.abs(x - xc) <= SNAP * grid.spacing, axis=-1)
    excess = np.where(inside, 0.0, excess)
    s = np.where(np.isnan(s), 0.0, s)
    base = np.minimum(s.astype(np.int64), n - 2)
    t = s - base
    t = np.where(t < SNAP, 0.0, np.where(t > 1.0 - SNAP, 1.0, t))
    strides = grid.strides
    # vertices in itertools.product order (first axis most significant)
    corners = (base * strides).sum(axis=-1)[..., None]
    weights = np.ones(batch + (1,))
    for k in range(grid.ndim):
        tk = t[..., k : k + 1]
        weights = np.stack([weights * (1.0 - tk), weights * tk], axis=-1).reshape(batch + (-1,))
        corners = np.stack([corners, corners + strides[k]], axis=-1).reshape(batch + (-1,))
    if not clamp:
        weights = np.where(inside[..., None], weights, 0.0)
    return CellLocation(corners, weights, inside | clamp & ~nan, excess)


def interpolate_located(values: np.ndarray, loc: CellLocation, polarity: str = "min") -> np.ndarray:
    """Multilinear interpolation of node ``values`` at pre-located points.

    Any participating (positive-weight) vertex at +inf (-inf) yields +inf
    (-inf). Points outside the box give +inf for min-type and -inf for
    max-type fields.
    """
    v = values[loc.corners]
    w = loc.weights
    if np.isfinite(values).all():
        out = np.einsum("...k,...k->...", w, v)
    else:
        part = w > 0.0
        pos = (part & (v == np.inf)).any(axis=-1)
        neg = (part & (v == -np.inf)).any(axis=-1)
        if np.any(pos & neg):
            raise DataCorruptionError("interpolation cell mixes +inf and -inf vertices")
        out = np.einsum("...k,...k->...", w, np.where(np.isfinite(v), v, 0.0))
        out = np.where(pos, np.inf, np.where(neg, -np.inf, out))
    fill = np.inf if polarity == "min" else -np.inf
    return np.where(loc.inside, out, fill)


def interpolate(f: ExtendedField, x):
    """Evaluate ``f`` at state(s) ``x`` by multilinear interpolation.

    Parameters
    ----------
    f : ExtendedField
    x : array_like
        A single state (d,) or a batch (..., d).

    Returns
    -------
    float or np.ndarray
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1
    xx = x.reshape(1, f.grid.ndim) if scalar else x
    out = interpolate_located(f.values, locate(f.grid, xx), f.polarity)
    return float(out[0]) if scalar else out


def _sweep_axis_exact(a: np.ndarray, axis: int, step: float) -> np.ndarray:
    # neighbour relaxation: value[i] against value[i-1] + step, then backwards
    out = np.moveaxis(a.copy(), axis, 0)
    for i in range(1, out.shape[0]):
        np.minimum(out[i : i + 1], out[i - 1 : i] + step, out=out[i : i + 1])
    for i in range(out.shape[0] - 2, -1, -1):
        np.minimum(out[i : i + 1], out[i + 1 : i + 2] + step, out=out[i : i + 1])
    return np.moveaxis(out, 0, axis)


def inf_convolve_l1(f: ExtendedField, p: float) -> ExtendedField:
    """l1 inf-convolution ``min_y f(y) + p*||x - y||_1`` over grid nodes.

    Computed exactly by one forward and one backward relaxation sweep per
    dimension (separable l1 distance transform).
    """
    if not p > 0:
        raise GridError("penalty p must be positive")
    if np.any(f.values == -np.inf):
        raise GridError("inf-convolution expects a min-type field without -inf")
    a = f.reshaped().copy()
    for ax in range(f.grid.ndim):
        a = _sweep_axis_exact(a, ax, p * f.grid.spacing[ax])
    return f.with_values(a.ravel(), label=f"infconv({f.label})")


def sup_convolve_l1(f: ExtendedField, p: float) -> ExtendedField:
    """``max_y f(y) - p*||x - y||_1``, as ``-inf_convolve_l1(-f, p)``."""
    g = inf_convolve_l1(-f, p)
    return ExtendedField(f.grid, -g.values, f"supconv({f.label})", f.polarity)


def _fmt(v: float) -> str:
    if v == np.inf:
        return "+inf"
    if v == -np.inf:
        return "-inf"
    return repr(float(v))


def field_to_csv(f: ExtendedField, path=None, value_name: str = "value") -> str:
    """Serialize to CSV: one row per node, coordinates then value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(f.grid.ndim)] + [value_name])
    for pt, v in zip(f.grid.points(), f.values):
        w.writerow([repr(float(c)) for c in pt] + [_fmt(v)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def field_from_csv(text: str, grid: StateGrid, label: str = "", polarity: str = "min") -> ExtendedField:
    """Inverse of :func:`field_to_csv` for a known grid."""
    rows = list(csv.reader(io.StringIO(text)))[1:]
    vals = [float(r[-1].replace("+inf", "inf")) for r in rows]
    return ExtendedField(grid, np.array(vals), label, polarity)


def field_summary(f: ExtendedField) -> dict:
    """JSON-ready summary: min, max and argmin over finite nodes."""
    m = f.finite_mask
    out = {"label": f.label, "nodes": int(f.grid.size), "finite_nodes": int(m.sum())}
    if m.any():
        vals = np.where(m, f.values, np.inf)
        i = int(np.argmin(vals))
        out.update(
            min=float(f.values[i]),
            max=float(np.max(f.values[m])),
            argmin=[float(c) for c in f.grid.points()[i]],
        )
    else:
        out.update(min=None, max=None, argmin=None)
    return out


# Default resolutions per registered model: (state nodes, control nodes).
DEFAULT_GRIDS = {
    "lq": ((401,), (41,)),
    "lq-wide": ((401,), (81,)),
    "nonlinear": ((81, 161), (161,)),
}


def default_grids(model, state_nodes=None, control_nodes=None) -> tuple[StateGrid, ControlGrid]:
    """Build the state and control grids covering ``model``'s constraint box."""
    sn, cn = DEFAULT_GRIDS.get(model.name, (None, None))
    sn = state_nodes if state_nodes is not None else sn
    cn = control_nodes if control_nodes is not None else cn
    if sn is None or cn is None:
        raise GridError(f"no default grid for model {model.name!r}; pass node counts")
    c = model.constraints
    return (
        StateGrid(c.state_lower, c.state_upper, sn),
        ControlGrid(c.control_lower, c.control_upper, cn),
    )
