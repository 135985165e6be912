"""
Experiment configuration: a YAML document validated against a fixed schema.

Example::

    model: nonlinear            # or {name: lq, params: {x_bound: 10.0}}
    grid:
      nodes: [81, 161]          # state nodes per dimension
      control_nodes: [161]
    solver: {tol: 1.0e-6, max_iter: 10000, seed: relaxed}
    penalty: auto               # or a positive number
    output_dir: out
    experiments:
      - kind: solve
      - kind: certify
        params: {storages: [minus_v_ominus, minus_v_oplus]}
      - kind: mpc
        params: {terminals: [{kind: vf2, r: 0.5}], N_max: 20}
      - kind: travel
        params: {a: [1.0, 0.0], b: [0.0, 0.0], N: inf}
      - kind: figure
        params: {number: 2}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import yaml

from .dp import MODEL_SEEDS, SolveConfig
from .model import MODEL_REGISTRY

__all__ = ["ConfigError", "Experiment", "ExperimentConfig", "parse_config", "load_config", "EXPERIMENT_KINDS"]


class ConfigError(ValueError):
    """Schema violation in an experiment configuration."""


STORAGES = ("minus_v_plus", "minus_v_minus", "minus_v_oplus", "minus_v_ominus", "zero", "L3")
TERMINALS = ("origin_indicator", "v_plus", "v_ominus", "vf1", "vf2", "beta_composite", "amrit")

# kind -> {param: (type description, validator)}
_PARAMS = {
    "solve": {"which": "list of v_plus|v_minus|v_oplus|v_ominus"},
    "certify": {
        "storages": f"list of {'|'.join(STORAGES)}",
        "kind": "plain|strict",
        "rho_c": "nonnegative number",
        "two_storage": "bool",
        "bounds": "bool",
    },
    "mpc": {
        "terminals": "list of {kind, r}",
        "N_max": "integer >= 1",
        "max_steps": "integer >= 1",
        "dwell": "integer >= 1",
        "radius_cells": "positive number",
    },
    "travel": {"a": "list of numbers", "b": "list of numbers", "N": "integer >= 1 or 'inf'",
               "relaxed": "bool", "p": "positive number"},
    "figure": {"number": "1|2|3", "N_max": "integer >= 1", "r_values": "list of nonnegative numbers"},
}
EXPERIMENT_KINDS = tuple(_PARAMS)
_TOP = ("model", "grid", "solver", "penalty", "experiments", "output_dir")


@dataclass
class Experiment:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    model: str = "lq"
    model_params: dict = field(default_factory=dict)
    state_nodes: Optional[tuple] = None
    control_nodes: Optional[tuple] = None
    solver: SolveConfig = field(default_factory=SolveConfig)
    penalty: Union[str, float] = "auto"
    experiments: list = field(default_factory=list)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        s = self.solver
        return {
            "model": {"name": self.model, "params": dict(self.model_params)},
            "grid": {
                "nodes": list(self.state_nodes) if self.state_nodes else None,
                "control_nodes": list(self.control_nodes) if self.control_nodes else None,
            },
            "solver": {"tol": s.tol, "max_iter": s.max_iter, "seed": s.seed, "seed_penalty": s.seed_penalty},
            "penalty": self.penalty,
            "experiments": [{"kind": e.kind, "params": dict(e.params)} for e in self.experiments],
            "output_dir": self.output_dir,
        }


def _fail(key: str, expected: str, got: Any):
    raise ConfigError(f"invalid value for {key!r}: expected {expected}, got {got!r}")


def _unknown(where: str, keys, allowed):
    bad = sorted(set(keys) - set(allowed))
    if bad:
        raise ConfigError(f"unknown key(s) {bad} in {where}; allowed: {sorted(allowed)}")


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(key, v, lo=1):
    if not isinstance(v, int) or isinstance(v, bool) or v < lo:
        _fail(key, f"integer >= {lo}", v)
    return v


def _nodes(key, v):
    if v is None:
        return None
    if isinstance(v, int) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v:
        _fail(key, "list of integers", v)
    for n in v:
        if not isinstance(n, int) or isinstance(n, bool):
            _fail(key, "list of integers", v)
        if n < 3:
            raise ConfigError(f"invalid value for {key!r}: need >= 3 nodes per dimension, got {n}")
    return tuple(v)


def _check_params(kind: str, p: dict, where: str) -> dict:
    _unknown(where, p, _PARAMS[kind])
    for k, v in p.items():
        key = f"{where}.{k}"
        exp = _PARAMS[kind][k]
        if k in ("N_max", "max_steps", "dwell"):
            _int(key, v)
        elif k in ("rho_c",):
            if not _is_num(v) or v < 0:
                _fail(key, exp, v)
        elif k in ("radius_cells", "p"):
            if not _is_num(v) or v <= 0:
                _fail(key, exp, v)
        elif k in ("two_storage", "bounds", "relaxed"):
            if not isinstance(v, bool):
                _fail(key, exp, v)
        elif k == "kind":
            if v not in ("plain", "strict"):
                _fail(key, exp, v)
        elif k == "which":
            if not isinstance(v, list) or any(w not in ("v_plus", "v_minus", "v_oplus", "v_ominus") for w in v):
                _fail(key, exp, v)
        elif k == "storages":
            if not isinstance(v, list) or any(w not in STORAGES for w in v):
                _fail(key, exp, v)
        elif k == "terminals":
            if not isinstance(v, list):
                _fail(key, exp, v)
            for i, t in enumerate(v):
                if not isinstance(t, dict):
                    _fail(f"{key}[{i}]", exp, t)
                _unknown(f"{key}[{i}]", t, ("kind", "r"))
                if t.get("kind") not in TERMINALS:
                    _fail(f"{key}[{i}].kind", "|".join(TERMINALS), t.get("kind"))
                r = t.get("r", 0.0)
                if not _is_num(r) or r < 0:
                    _fail(f"{key}[{i}].r", "nonnegative number", r)
        elif k in ("a", "b"):
            if not isinstance(v, list) or not all(_is_num(x) for x in v):
                _fail(key, exp, v)
        elif k == "N":
            if not (v == "inf" or (isinstance(v, int) and not isinstance(v, bool) and v >= 1)):
                _fail(key, exp, v)
        elif k == "number":
            if v not in (1, 2, 3):
                _fail(key, exp, v)
        elif k == "r_values":
            if not isinstance(v, list) or not all(_is_num(x) and x >= 0 for x in v):
                _fail(key, exp, v)
    return dict(p)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment configuration.

    Raises
    ------
    ConfigError
        Naming the offending key and the expected type.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed configuration: {e}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    _unknown("configuration", doc, _TOP)
    cfg = ExperimentConfig()

    m = doc.get("model", "lq")
    if isinstance(m, dict):
        _unknown("model", m, ("name", "params"))
        name, params = m.get("name"), m.get("params") or {}
        if not isinstance(params, dict):
            _fail("model.params", "mapping", params)
    else:
        name, params = m, {}
    if not isinstance(name, str):
        _fail("model", "model name (string)", name)
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"invalid value for 'model': {name!r} is not in the model registry {sorted(MODEL_REGISTRY)}")
    for k, v in params.items():
        if not _is_num(v) or v <= 0:
            _fail(f"model.params.{k}", "positive number", v)
    cfg.model, cfg.model_params = name, dict(params)

    g = doc.get("grid") or {}
    if not isinstance(g, dict):
        _fail("grid", "mapping", g)
    _unknown("grid", g, ("nodes", "control_nodes"))
    cfg.state_nodes = _nodes("grid.nodes", g.get("nodes"))
    cfg.control_nodes = _nodes("grid.control_nodes", g.get("control_nodes"))

    s = doc.get("solver") or {}
    if not isinstance(s, dict):
        _fail("solver", "mapping", s)
    _unknown("solver", s, ("tol", "max_iter", "seed", "seed_penalty"))
    kw = {"seed": MODEL_SEEDS.get(name, "indicator")}
    if "tol" in s:
        if not _is_num(s["tol"]) or s["tol"] <= 0:
            _fail("solver.tol", "positive number", s["tol"])
        kw["tol"] = float(s["tol"])
    if "max_iter" in s:
        kw["max_iter"] = _int("solver.max_iter", s["max_iter"])
    if "seed" in s:
        if s["seed"] not in ("indicator", "relaxed"):
            _fail("solver.seed", "indicator|relaxed", s["seed"])
        kw["seed"] = s["seed"]
    if "seed_penalty" in s:
        if not _is_num(s["seed_penalty"]) or s["seed_penalty"] <= 0:
            _fail("solver.seed_penalty", "positive number", s["seed_penalty"])
        kw["seed_penalty"] = float(s["seed_penalty"])
    cfg.solver = SolveConfig(**kw)

    pen = doc.get("penalty", "auto")
    if pen != "auto" and (not _is_num(pen) or pen <= 0):
        _fail("penalty", "'auto' or positive number", pen)
    cfg.penalty = pen if pen == "auto" else float(pen)

    out = doc.get("output_dir", "out")
    if not isinstance(out, str) or not out:
        _fail("output_dir", "path string", out)
    cfg.output_dir = out

    exps = doc.get("experiments") or []
    if not isinstance(exps, list):
        _fail("experiments", "list", exps)
    for i, e in enumerate(exps):
        where = f"experiments[{i}]"
        if not isinstance(e, dict):
            _fail(where, "mapping with 'kind'", e)
        _unknown(where, e, ("kind", "params"))
        kind = e.get("kind")
        if kind not in _PARAMS:
            _fail(f"{where}.kind", "|".join(EXPERIMENT_KINDS), kind)
        params = e.get("params") or {}
        if not isinstance(params, dict):
            _fail(f"{where}.params", "mapping", params)
        cfg.experiments.append(Experiment(kind, _check_params(kind, params, f"{where}.params")))
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def travel_horizon(N):
    return math.inf if N == "inf" else int(N)
