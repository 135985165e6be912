"""
Command-line experiment runner.

Usage::

    python -m dissdp [--config PATH] [--output DIR] [--strict] [--threads N] COMMAND [ARGS]

Commands: ``solve``, ``certify``, ``mpc``, ``travel``, ``figure N`` (also
spelled ``figure:N``), ``list-models`` and ``run`` (all configured
experiments).  Exit status: 0 success, 1 usage/configuration error or failed
certificate, 2 solver non-convergence, 3 failed certificate under
``--strict``, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from typing import Optional

import numpy as np

from . import __version__, dp
from .config import ConfigError, Experiment, ExperimentConfig, load_config, parse_config, travel_horizon
from .dissipativity import (
    CERT_TOL,
    ComparisonFunction,
    StorageFunction,
    check_dissipativity,
    check_two_storage,
    policy_evaluation_quadratic,
    verify_value_bounds,
)
from .grid import ExtendedField, default_grids, field_summary, field_to_csv
from .model import get_model, list_models
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
from .pipelines import PipelineOutput, Workspace, figure1, figure2, figure3

__all__ = ["main", "run", "EXIT_OK", "EXIT_FAIL", "EXIT_SOLVER", "EXIT_CERT", "EXIT_IO", "THREADS_ENV"]

EXIT_OK, EXIT_FAIL, EXIT_SOLVER, EXIT_CERT, EXIT_IO = 0, 1, 2, 3, 4
THREADS_ENV = "DISSDP_THREADS"

log = logging.getLogger("dissdp")


class _CertificateAbort(Exception):
    pass


class Runner:
    def __init__(self, cfg: ExperimentConfig, output_dir: str, strict: bool = False, threads: int = 1):
        self.cfg = cfg
        self.out = output_dir
        self.strict = strict
        self.threads = threads
        self.files: list = []
        self.certificates: list = []
        self.solver_failures: list = []
        self.timings: list = []
        self._ws = None

    # -- bookkeeping
    def workspace(self) -> Workspace:
        if self._ws is None:
            c = self.cfg
            model = get_model(c.model, **c.model_params)
            grids = default_grids(model, c.state_nodes, c.control_nodes)
            self._ws = Workspace(model, grids, c.solver, c.penalty)
        return self._ws

    def write(self, rel: str, text: str):
        path = os.path.join(self.out, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        if rel not in self.files:
            self.files.append(rel)

    def certify_flag(self, name: str, passed: bool):
        self.certificates.append({"name": name, "pass": bool(passed)})
        if not passed:
            log.warning("certificate failed: %s", name)
            if self.strict:
                raise _CertificateAbort(name)

    def solver_check(self, name: str, ok: bool):
        if not ok:
            self.solver_failures.append(name)
            log.error("solver did not converge: %s", name)

    def emit(self, res: PipelineOutput, name: str):
        for rel in sorted(res.files):
            self.write(rel, res.files[rel])
        self.solver_check(name, res.solver_ok)
        for k in sorted(res.claims):
            self.certify_flag(k, res.claims[k])

    # -- experiments
    def run_experiment(self, e: Experiment):
        t0 = time.perf_counter()
        getattr(self, "exp_" + e.kind)(e.params)
        self.timings.append({"kind": e.kind, "params": e.params, "seconds": time.perf_counter() - t0})

    def exp_solve(self, params):
        ws = self.workspace()
        name = ws.model.name
        which = params.get("which", ["v_plus", "v_minus", "v_oplus", "v_ominus"])
        summary = {"model": name, "penalty": None, "fields": {}}
        for w in which:
            sol = getattr(ws, w)
            self.solver_check(f"solve.{name}.{w}", sol.converged)
            self.write(f"solve/{name}_{w}.csv", field_to_csv(sol.value))
            self.write(f"solve/{name}_{w}_log.csv", dp.iteration_log_csv(sol))
            summary["fields"][w] = dict(field_summary(sol.value), iterations=sol.iterations,
                                        residual=sol.residual, converged=sol.converged)
        if any(w in which for w in ("v_oplus", "v_ominus")):
            summary["penalty"] = ws.p
            if ws.calibration is not None:
                summary["calibration"] = [list(h) for h in ws.calibration.history]
        self.write(f"solve/{name}_summary.json", table_json(summary) + "\n")

    def _storage(self, ws, key):
        sg = ws.grids[0]
        if key == "zero":
            return StorageFunction.zero(sg)
        if key == "L3":
            lyap = policy_evaluation_quadratic(ws.model, ws.grids, ws.v_plus)
            v = -ws.v_ominus.value.values + lyap.values
            return StorageFunction.from_values(sg, np.where(np.isnan(v), np.inf, v), "L3")
        sol = getattr(ws, key[len("minus_"):])
        return StorageFunction(ExtendedField(sg, -sol.value.values, key, "max" if sol.value.polarity == "min" else "min"), key)

    def exp_certify(self, params):
        ws = self.workspace()
        name = ws.model.name
        kind = params.get("kind", "plain")
        rho = ComparisonFunction("quadratic", params.get("rho_c", 0.0)) if kind == "strict" else None
        storages = params.get("storages", ["minus_v_plus", "minus_v_minus", "minus_v_oplus", "minus_v_ominus"])
        for key in storages:
            lam = self._storage(ws, key)
            rep = check_dissipativity(ws.model, ws.grids, lam, kind, rho)
            self.write(f"certify/{name}_{key}_{kind}.json", rep.to_json() + "\n")
            self.write(f"certify/{name}_{key}_{kind}_violations.csv", rep.violations_csv())
            self.certify_flag(f"certify.{name}.{key}.{kind}", rep.passed)
            if params.get("bounds", True) and rep.passed:
                b = verify_value_bounds(ws.v_plus.value, ws.v_minus.value, lam,
                                        "strict" if kind == "strict" else "plain", rho)
                self.write(f"certify/{name}_{key}_bounds.json", b.to_json() + "\n")
                self.certify_flag(f"certify.{name}.{key}.bounds", b.passed)
        if params.get("two_storage", True):
            l1 = self._storage(ws, "minus_v_ominus")
            l2 = self._storage(ws, "minus_v_oplus")
            probe = check_two_storage(ws.model, ws.grids, l1, l2, ComparisonFunction("quadratic", 0.0))
            gamma = ComparisonFunction("quadratic", probe.gap_fitted_coefficient)
            rep = check_two_storage(ws.model, ws.grids, l1, l2, gamma)
            self.write(f"certify/{name}_two_storage.json", rep.to_json() + "\n")
            self.certify_flag(f"certify.{name}.two_storage", rep.passed and gamma.c > 0)

    def exp_mpc(self, params):
        ws = self.workspace()
        name = ws.model.name
        N_max = params.get("N_max", 20)
        terms = params.get("terminals") or [
            {"kind": k, "r": r} for k in ("vf1", "vf2") for r in DEFAULT_R
        ]
        sg = ws.grids[0]
        radius = params.get("radius_cells", 2.0) * np.asarray(sg.spacing)
        prof_rows, ns_rows = [], []
        vp = ws.v_plus.value
        needs_vo = any(t["kind"] in ("vf1", "vf2", "v_ominus", "beta_composite") for t in terms)
        vom = ws.v_ominus.value if needs_vo else None
        for t in terms:
            spec = TerminalCostSpec(t["kind"], float(t.get("r", 0.0)))
            term = build_terminal_cost(spec, vp, vom, ws.grids, ws.model)
            levels = finite_levels(ws.model, ws.grids, term, N_max)
            prof = convergence_profile(ws.model, ws.grids, spec, N_max, vp, levels=levels)
            hz = min_stabilizing_horizon(ws.model, ws.grids, spec, N_max, vp, levels=levels,
                                         max_steps=params.get("max_steps", 500), radius=radius,
                                         dwell=params.get("dwell", 10))
            prof_rows += [{"terminal": spec.kind, "r": spec.r, "N": N, "gap": g} for N, g in enumerate(prof, 1)]
            ns_rows.append({"terminal": spec.kind, "r": spec.r, "Ns": hz.value})
        self.write(f"mpc/{name}_profiles.csv", table_csv(prof_rows, ["terminal", "r", "N", "gap"]))
        self.write(f"mpc/{name}_ns.csv", table_csv(ns_rows, ["terminal", "r", "Ns"]))
        self.write(f"mpc/{name}_ns.json", table_json(ns_rows) + "\n")

    def exp_travel(self, params):
        ws = self.workspace()
        d = ws.model.state_dim
        a = params.get("a", [1.0] * d)
        b = params.get("b", [0.0] * d)
        if len(a) != d or len(b) != d:
            raise ConfigError(f"travel endpoints must have {d} coordinates")
        N = travel_horizon(params.get("N", "inf"))
        relaxed = params.get("relaxed", False)
        p = params.get("p", ws.p if relaxed else None)
        res = dp.cost_to_travel(ws.model, ws.grids, a, b, N, relaxed, p, ws.cfg)
        out = {"a": a, "b": b, "N": "inf" if N == math.inf else N, "relaxed": relaxed, "p": p,
               "value": res.value, "target_node": res.target_node, "snap_distance": res.snap_distance,
               "warnings": res.warnings}
        tag = "_".join(f"{v:g}" for v in a) + "_to_" + "_".join(f"{v:g}" for v in b)
        self.write(f"travel/{ws.model.name}_{tag}_{out['N']}{'_relaxed' if relaxed else ''}.json",
                   table_json(out) + "\n")

    def exp_figure(self, params):
        n = params.get("number", 1)
        if n == 1:
            self.emit(figure1(), "figure1")
            return
        c = self.cfg
        if c.model == "nonlinear":
            ws = self.workspace()
        else:
            m = get_model("nonlinear")
            ws = Workspace(m, default_grids(m), dp.config_for(m, tol=c.solver.tol), c.penalty)
        if n == 2:
            self.emit(figure2(ws), "figure2")
        else:
            self.emit(figure3(ws, params.get("r_values", DEFAULT_R), params.get("N_max", 20)), "figure3")


def _versions() -> dict:
    import scipy
    import yaml

    return {"dissdp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run(cfg: ExperimentConfig, output_dir: Optional[str] = None, strict: bool = False,
        threads: int = 1, experiments: Optional[list] = None) -> int:
    """Execute experiments and write artifacts plus ``manifest.json``; returns the exit status."""
    out = output_dir or cfg.output_dir
    exps = cfg.experiments if experiments is None else experiments
    runner = Runner(cfg, out, strict, threads)
    status = EXIT_OK
    error = None
    t0 = time.perf_counter()
    try:
        os.makedirs(out, exist_ok=True)
        for e in exps:
            runner.run_experiment(e)
    except _CertificateAbort as a:
        status, error = EXIT_CERT, f"certificate failed: {a}"
    except dp.ConvergenceError as e:
        runner.solver_failures.append(str(e))
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    if status == EXIT_OK:
        if runner.solver_failures:
            status = EXIT_SOLVER
        elif not all(c["pass"] for c in runner.certificates):
            status = EXIT_FAIL
    manifest = {
        "config": cfg.to_dict(),
        "command_experiments": [{"kind": e.kind, "params": e.params} for e in exps],
        "versions": _versions(),
        "threads": threads,
        "strict": strict,
        "wall_times": runner.timings,
        "total_seconds": time.perf_counter() - t0,
        "certificates": runner.certificates,
        "solver_failures": runner.solver_failures,
        "error": error,
        "exit_status": status,
    }
    try:
        manifest["files"] = [{"path": f, "sha256": _sha256(os.path.join(out, f))} for f in runner.files]
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    except OSError as e:
        log.error("I/O error writing manifest: %s", e)
        return EXIT_IO
    return status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dissdp", description="Grid DP, dissipativity certificates and economic MPC studies.")
    p.add_argument("--config", metavar="PATH", help="YAML experiment configuration")
    p.add_argument("--output", metavar="DIR", help="output directory (overrides output_dir)")
    p.add_argument("--strict", action="store_true", help="abort with status 3 on the first failed certificate")
    p.add_argument("--threads", type=int, metavar="N", help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", help="solve V+, V-, Voplus, Vominus")
    sub.add_parser("certify", help="dissipativity certificates")
    sub.add_parser("mpc", help="convergence profiles and stabilizing horizons")
    t = sub.add_parser("travel", help="cost to travel between two states")
    t.add_argument("--from", dest="a", type=float, nargs="+")
    t.add_argument("--to", dest="b", type=float, nargs="+")
    t.add_argument("--horizon", dest="N", default=None, help="integer or 'inf'")
    t.add_argument("--relaxed", action="store_true")
    f = sub.add_parser("figure", help="reproduce figure data (1, 2 or 3)")
    f.add_argument("number", type=int, choices=(1, 2, 3))
    sub.add_parser("list-models", help="print the model registry")
    sub.add_parser("run", help="run every experiment in the configuration")
    return p


def _normalize(argv: list) -> list:
    out = []
    for a in argv:
        if a.startswith("figure:"):
            out += ["figure", a.split(":", 1)[1]]
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(_normalize(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-models":
        for m in list_models():
            print(f"{m['name']}\tstate_dim={m['state_dim']}\tcontrol_dim={m['control_dim']}\t"
                  f"state_box={m['state_box']}\tcontrol_box={m['control_box']}")
        return EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
    except ConfigError as e:
        print(f"dissdp: configuration error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as e:
        print(f"dissdp: cannot read configuration: {e}", file=sys.stderr)
        return EXIT_IO
    cmd = args.command
    if cmd == "run":
        exps = cfg.experiments
    elif cmd == "figure":
        exps = [Experiment("figure", {"number": args.number})]
    else:
        exps = [e for e in cfg.experiments if e.kind == cmd] or [Experiment(cmd, {})]
        if cmd == "travel":
            extra = {k: v for k, v in (("a", args.a), ("b", args.b)) if v is not None}
            if args.N is not None:
                try:
                    extra["N"] = "inf" if args.N == "inf" else int(args.N)
                except ValueError:
                    print(f"dissdp: --horizon expects an integer or 'inf', got {args.N!r}", file=sys.stderr)
                    return EXIT_FAIL
            if args.relaxed:
                extra["relaxed"] = True
            exps = [Experiment("travel", {**e.params, **extra}) for e in exps]
    try:
        return run(cfg, args.output, args.strict, _threads(args.threads), exps)
    except ConfigError as e:
        print(f"dissdp: configuration error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
