"""Command-line entry point.

One executable, five subcommands:

* ``simulate``        coupled forward-backward solve, field snapshots
* ``verify-carleman`` weighted-inequality sweeps, one CSV row per report
* ``stability-twin``  Lipschitz / Hoelder twin experiments
* ``invert-source``   source-profile reconstruction from boundary data
* ``selftest``        quick definitional checks of every module

Configuration is a JSON document validated against a strict schema
(unknown keys rejected) before any computation.  All randomness flows
from the single config seed; the worker-count override MFG_LAB_THREADS
never changes numerical results (all reductions run in a fixed order),
so identical config + seed gives byte-identical outputs.

Exit codes: 0 success, 2 schema violation, 3 numerical failure (manifest
still written, with the cause), 4 capacity guard.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time

import numpy as np
from jsonschema import Draft202012Validator

from . import carleman, inversion, models, stability
from .grid import Field, Grid, write_fld
from .models import MfgProblem, normalized_gaussian
from .solver import (SolverConfig, martingale_residual, mass_history,
                     solve_mfg)
from .tree import CapacityError, ScenarioTree

ARTIFACT_VERSION = "0.1.0"
EXIT_SCHEMA = 2
EXIT_NUMERICAL = 3
EXIT_CAPACITY = 4

# memory guard: refuse runs whose trajectory storage would exceed this
MAX_FIELD_BYTES = 2 * 1024**3


def _num(minimum=None, exclusive_minimum=None):
    out = {"type": "number"}
    if minimum is not None:
        out["minimum"] = minimum
    if exclusive_minimum is not None:
        out["exclusiveMinimum"] = exclusive_minimum
    return out


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["command", "grid", "seed"],
    "properties": {
        "command": {"enum": ["simulate", "verify-carleman", "stability-twin",
                             "invert-source", "selftest"]},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "L", "N", "T", "K"],
            "properties": {
                "n": {"type": "integer", "minimum": 1, "maximum": 2},
                "L": _num(exclusive_minimum=0),
                "N": {"type": "integer", "minimum": 4},
                "T": _num(exclusive_minimum=0),
                "K": {"type": "integer", "minimum": 1},
            },
        },
        "tree": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"recombining": {"type": "boolean"}},
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hamiltonian": {"enum": sorted(models.HAMILTONIANS)},
                "hamiltonian_params": {"type": "object"},
                "coupling": {"enum": sorted(models.COUPLINGS) + [None]},
                "coupling_params": {"type": "object"},
                "kernel": {"enum": ["gaussian", "zero"]},
                "kernel_params": {"type": "object"},
                "rho0_sigma": _num(exclusive_minimum=0),
                "terminal_amplitude": {"type": "number"},
            },
        },
        "beta": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "output_dir": {"type": "string"},
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "snapshot_times": {"type": "array", "items": _num(minimum=0)},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": _num(exclusive_minimum=0),
            },
        },
        "carleman": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "theorem": {"enum": ["th1", "th2", "th3", "th4"]},
                "betas": {"type": "array", "items": _num(minimum=0)},
                "log10_lambdas": {"type": "array", "items": {"type": "number"}},
                "mus": {"type": "array", "items": _num(exclusive_minimum=0)},
                "n_data": {"type": "integer", "minimum": 1},
                "scan": {"type": "boolean"},
            },
        },
        "stability": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["lipschitz", "holder"]},
                "deltas": {"type": "array", "items": _num(exclusive_minimum=0)},
                "epsilon": _num(exclusive_minimum=0),
                "mu0": _num(exclusive_minimum=0),
                "n_shapes": {"type": "integer", "minimum": 1},
            },
        },
        "inversion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": _num(minimum=0),
                "noise": _num(minimum=0),
                "weight_lambda": {"type": "number"},
                "weight_mu": _num(exclusive_minimum=0),
                "eps": _num(exclusive_minimum=0),
                "max_iters": {"type": "integer", "minimum": 1},
                "fixed_iters": {"type": "integer", "minimum": 1},
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


class SchemaError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


def load_config(path: str) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
    errors = sorted(_VALIDATOR.iter_errors(cfg), key=lambda e: e.json_path)
    if errors:
        msgs = "; ".join(f"{e.json_path}: {e.message}" for e in errors)
        raise SchemaError(msgs)
    return cfg


# -- deterministic output helpers ---------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: str, columns: list, rows: list) -> None:
    """Fixed column order, repr-stable float formatting, atomic rename."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    os.replace(tmp, path)


def write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def file_checksum(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- problem construction ------------------------------------------------------

def build_grid(cfg: dict) -> Grid:
    g = cfg["grid"]
    return Grid(n=g["n"], L=float(g["L"]), N=g["N"], T=float(g["T"]),
                K=g["K"])


def _guard_capacity(grid: Grid, recombining: bool) -> None:
    levels = grid.K + 1 if recombining else 2**grid.K
    per_slice = levels * grid.size * 8
    total = per_slice * (grid.K + 1) * 3
    if total > MAX_FIELD_BYTES:
        raise CapacityError(
            f"trajectory storage {total / 1024**3:.1f} GiB exceeds the "
            f"{MAX_FIELD_BYTES / 1024**3:.0f} GiB guard "
            f"(N={grid.N}, K={grid.K}, recombining={recombining})"
        )


def build_problem(cfg: dict, source=None) -> MfgProblem:
    grid = build_grid(cfg)
    recombining = cfg.get("tree", {}).get("recombining", True)
    _guard_capacity(grid, recombining)
    tree = ScenarioTree(K=grid.K, dt=grid.dt, recombining=recombining)
    m = cfg.get("model", {})
    ham = models.HAMILTONIANS[m.get("hamiltonian", "quadratic")](
        grid.n, **m.get("hamiltonian_params", {}))
    kid = m.get("kernel", "gaussian")
    kernel = (models.gaussian_kernel(grid, **m.get("kernel_params", {}))
              if kid == "gaussian" else models.zero_kernel(grid))
    cid = m.get("coupling", "linear")
    coupling = None if cid is None else models.COUPLINGS[cid](
        **m.get("coupling_params", {}))
    rho0 = normalized_gaussian(grid, sigma=m.get("rho0_sigma", 0.4))
    amp = m.get("terminal_amplitude", 0.5)
    x = grid.coords()
    term = amp * np.cos(math.pi * x[0] / grid.L) * np.ones(grid.shape)
    return MfgProblem(grid=grid, tree=tree, hamiltonian=ham, kernel=kernel,
                      coupling=coupling, beta=cfg.get("beta", 0.5),
                      terminal_cost=term, rho0=rho0, source=source)


# -- subcommand pipelines ------------------------------------------------------

def run_simulate(cfg: dict, outdir: str) -> dict:
    block = cfg.get("simulate", {})
    problem = build_problem(cfg)
    scfg = SolverConfig(max_iters=block.get("max_iters", 60),
                        tol=block.get("tol", 1e-13))
    sol = solve_mfg(problem, scfg)
    grid = problem.grid
    mass = mass_history(sol, problem)
    mart = martingale_residual(sol, problem)
    converged = sol.picard_residual < 1e6 * scfg.tol
    files = []
    for t in block.get("snapshot_times", [grid.T]):
        k = min(int(round(t / grid.dt)), grid.K)
        rho_k = np.asarray(sol.rho[k])
        for node in range(rho_k.shape[0]):
            path = os.path.join(outdir, f"rho_k{k}_node{node}.fld")
            write_fld(path, Field(grid, rho_k[node]), time=k * grid.dt,
                      node_id=node)
            files.append(path)
    summary = {
        "iterations": sol.iterations,
        "picard_residual": sol.picard_residual,
        "mass_drift": float(np.max(np.abs(mass - 1.0))),
        "martingale_residual": mart,
        "converged": bool(converged),
    }
    write_json(os.path.join(outdir, "simulate_summary.json"), summary)
    files.append(os.path.join(outdir, "simulate_summary.json"))
    if not converged:
        raise NumericalFailure(
            f"Picard iteration stalled at residual {sol.picard_residual:g}")
    return {"files": files, "summary": summary}


_CHECKERS = {"th1": carleman.check_th1, "th2": carleman.check_th2,
             "th3": carleman.check_th3, "th4": carleman.check_th4}


def run_carleman(cfg: dict, outdir: str) -> dict:
    block = cfg.get("carleman", {})
    theorem = block.get("theorem", "th1")
    grid = build_grid(cfg)
    recombining = theorem in ("th1", "th3")
    _guard_capacity(grid, recombining)
    tree = ScenarioTree(K=grid.K, dt=grid.dt, recombining=recombining)
    kind = "backward" if recombining else "forward"
    betas = block.get("betas", [cfg.get("beta", 0.5)])
    mus = block.get("mus", [2.0])
    log10_lams = block.get("log10_lambdas", [0.0])
    n_data = block.get("n_data", 5)
    checker = _CHECKERS[theorem]
    rows, plot_rows = [], []
    n_pass = 0
    boundary = "dirichlet" if theorem in ("th3", "th4") else "periodic"
    for i in range(n_data):
        for beta in betas:
            datum = carleman.make_synthetic(
                kind, cfg["seed"] + i, tree, grid, float(beta),
                boundary=boundary)
            for mu in mus:
                if block.get("scan", False):
                    w, report, _ = carleman.scan_lambda(
                        datum, float(mu), checker=checker)
                else:
                    pairs = []
                    for l10 in log10_lams:
                        wt = carleman.CarlemanWeight(
                            log_lambda=float(l10) * math.log(10.0),
                            mu=float(mu), T=grid.T)
                        pairs.append((wt, checker(datum, wt)))
                    w, report = max(pairs,
                                    key=lambda p: p[1].relative_margin)
                rows.append(carleman.report_row(report, w, float(beta), grid))
                n_pass += int(report.satisfied())
                lam = (math.exp(w.log_lambda)
                       if w.log_lambda > -700.0 else 0.0)
                for term, val in {**report.lhs_terms,
                                  **report.rhs_terms}.items():
                    plot_rows.append({
                        "theorem": report.theorem_id, "lambda": lam,
                        "mu": w.mu, "beta": float(beta),
                        "term": term, "value": val,
                        "margin": report.margin,
                    })
    lead = ("theorem", "log_lambda", "mu", "beta", "N", "K")
    cols = sorted({c for r in rows for c in r},
                  key=lambda c: (lead.index(c) if c in lead else len(lead), c))
    write_csv(os.path.join(outdir, "carleman_reports.csv"), cols, rows)
    emit_plot_data(outdir, "carleman", plot_rows)
    summary = {"theorem": theorem, "n_reports": len(rows),
               "n_satisfied": n_pass}
    write_json(os.path.join(outdir, "carleman_summary.json"), summary)
    if n_pass < len(rows):
        raise NumericalFailure(
            f"{len(rows) - n_pass} of {len(rows)} inequality checks failed")
    return {"files": [os.path.join(outdir, "carleman_reports.csv")],
            "summary": summary}


def run_stability(cfg: dict, outdir: str) -> dict:
    block = cfg.get("stability", {})
    kind = block.get("kind", "lipschitz")
    problem = build_problem(cfg)
    deltas = tuple(block.get("deltas", [1e-1, 1e-2, 1e-3]))
    if kind == "lipschitz":
        fit = stability.lipschitz_experiment(
            problem, deltas=deltas, n_shapes=block.get("n_shapes", 2),
            seed=cfg["seed"])
    else:
        eps = block.get("epsilon", problem.grid.T / 4.0)
        fit = stability.holder_experiment(
            problem, epsilon=eps, mu0=block.get("mu0", 2.0),
            deltas=deltas, seed=cfg["seed"])
    rows = []
    reps = max(1, len(fit.lhs_norms) // len(deltas))
    for i, (l, r, q) in enumerate(zip(fit.lhs_norms, fit.rhs_norms,
                                      fit.ratios)):
        rows.append({"run": i, "delta": deltas[i % len(deltas)],
                     "lhs": l, "rhs": r, "ratio": q})
    write_csv(os.path.join(outdir, "stability_rows.csv"),
              ["run", "delta", "lhs", "rhs", "ratio"], rows)
    emit_plot_data(outdir, "stability",
                   [{k: r[k] for k in ("delta", "lhs", "rhs", "ratio")}
                    for r in rows])
    summary = {"kind": kind, "fitted_C": fit.fitted_C,
               "fitted_eta": fit.fitted_eta,
               "predicted_eta": fit.predicted_eta,
               "excluded": [list(e) for e in fit.excluded]}
    write_json(os.path.join(outdir, "stability_summary.json"), summary)
    if not fit.ratios:
        raise NumericalFailure("all stability runs were excluded")
    return {"files": [os.path.join(outdir, "stability_rows.csv")],
            "summary": summary}


def run_inversion(cfg: dict, outdir: str) -> dict:
    block = cfg.get("inversion", {})
    grid = build_grid(cfg)
    source = models.smooth_R_source(grid, r_fn=lambda t: 0.0)
    problem = build_problem(cfg, source=source)
    weight = None
    if "weight_lambda" in block and "weight_mu" in block:
        weight = carleman.CarlemanWeight.from_lambda(
            block["weight_lambda"], block["weight_mu"], grid.T)
    eps = block.get("eps", grid.T / 4.0)
    inv = inversion.InversionProblem(
        problem=problem, epsilon=eps, t1=eps / 3.0, t2=2.0 * eps / 3.0,
        alpha=block.get("alpha", 1e-8), weight=weight)
    rng = np.random.default_rng(cfg["seed"])
    times = np.arange(grid.K) * grid.dt
    r_true = 1.0 + 0.5 * np.sin(2.0 * math.pi * times / grid.T) \
        + 0.2 * rng.standard_normal(grid.K)
    fixed = block.get("fixed_iters", 8)
    fwd_cfg = SolverConfig(fixed_iters=fixed, damping=0.6)
    obs = inversion.generate_observations(
        inv, r_true, noise_level=block.get("noise", 0.0),
        seed=cfg["seed"], cfg=fwd_cfg)
    vg = inversion._misfit_fn(inv, fwd_cfg)  # compile once, reuse below
    rec = inversion.reconstruct_source(
        inv, obs, r_true=r_true, cfg=fwd_cfg,
        max_iters=block.get("max_iters", 200), vg=vg)
    cert = inversion.uniqueness_certificate(
        inv, obs, r_true=r_true, cfg=fwd_cfg, seed=cfg["seed"] + 1,
        max_iters=block.get("max_iters", 200), vg=vg)
    rhat_path = os.path.join(outdir, "r_hat.fld")
    profile_grid = Grid(n=1, L=grid.T / 2.0, N=grid.K, T=grid.T, K=grid.K)
    write_fld(rhat_path, Field(profile_grid, rec.r_hat), time=0.0, node_id=0)
    conv_rows = [{"iter": i, "misfit": m,
                  "grad_norm": rec.grad_norms[min(i, len(rec.grad_norms) - 1)],
                  "rel_error": rec.relative_l2_error}
                 for i, m in enumerate(rec.misfit_history)]
    write_csv(os.path.join(outdir, "inversion_convergence.csv"),
              ["iter", "misfit", "grad_norm", "rel_error"], conv_rows)
    emit_plot_data(outdir, "inversion", conv_rows)
    summary = {"relative_error": rec.relative_l2_error,
               "certificate": cert["certificate"],
               "alpha": inv.alpha, "noise": block.get("noise", 0.0),
               "converged": rec.converged}
    write_json(os.path.join(outdir, "inversion_certificate.json"), summary)
    if not rec.converged:
        raise NumericalFailure("source reconstruction did not converge")
    return {"files": [rhat_path], "summary": summary}


def run_selftest(cfg: dict, outdir: str) -> dict:
    """Cheap definitional checks of every module; raises on failure."""
    results = {}
    grid = Grid(n=1, L=1.0, N=32, T=0.5, K=8)
    tree = ScenarioTree(K=8, dt=grid.dt, recombining=True)
    # tree: probabilities sum to one at every depth
    for k in range(9):
        assert abs(float(np.sum(tree.probabilities(k))) - 1.0) < 1e-12
    results["tree_probabilities"] = "ok"
    # solver: mass conservation on a small coupled run
    problem = build_problem({**cfg, "grid": {"n": 1, "L": 1.0, "N": 32,
                                             "T": 0.5, "K": 8}})
    sol = solve_mfg(problem, SolverConfig(max_iters=25))
    drift = float(np.max(np.abs(mass_history(sol, problem) - 1.0)))
    assert drift < 1e-8, f"mass drift {drift:g}"
    results["solver_mass"] = drift
    # carleman: trivial weight values and a synthetic residual
    w = carleman.CarlemanWeight.from_lambda(1.0, 1.0, 1.0)
    assert abs(w.weight_log(0.0) - 2.0) < 1e-14
    datum = carleman.make_synthetic("backward", cfg["seed"], tree, grid, 0.5)
    res = carleman.datum_residual(datum)
    assert res < 1e-10, f"synthetic residual {res:g}"
    results["carleman_residual"] = res
    # stability: predicted exponent at a hand-checked point
    assert abs(stability.predicted_eta(1.0, 2.0, 2.0) - 5.0 / 12.0) < 1e-14
    results["stability_eta"] = "ok"
    # inversion: cutoff ramp endpoints and slope bound
    assert inversion.cutoff_chi(0.0, 0.1, 0.2) == 0.0
    assert inversion.cutoff_chi(0.3, 0.1, 0.2) == 1.0
    assert abs(inversion.cutoff_chi_dt(0.15, 0.1, 0.2) - 18.75) < 1e-12
    npass, ntot = inversion.poincare_check(seed=cfg["seed"], n_fields=10)
    assert npass == ntot
    results["inversion_cutoff"] = "ok"
    write_json(os.path.join(outdir, "selftest.json"), results)
    return {"files": [os.path.join(outdir, "selftest.json")],
            "summary": results}


def emit_plot_data(outdir: str, kind: str, rows: list) -> str:
    """Long-format CSV (one observation per row) for external plotting."""
    columns = {
        "carleman": ["theorem", "lambda", "mu", "beta", "term", "value",
                     "margin"],
        "stability": ["delta", "lhs", "rhs", "ratio"],
        "inversion": ["iter", "misfit", "grad_norm", "rel_error"],
    }[kind]
    path = os.path.join(outdir, f"plot_{kind}.csv")
    write_csv(path, columns, rows)
    return path


_PIPELINES = {
    "simulate": run_simulate,
    "verify-carleman": run_carleman,
    "stability-twin": run_stability,
    "invert-source": run_inversion,
    "selftest": run_selftest,
}


# -- orchestration -------------------------------------------------------------

def run(config: dict, output_dir: str | None = None) -> dict:
    """Dispatch one validated config; returns the manifest dict.

    The manifest is written atomically at run end even when the pipeline
    fails (the failure cause is recorded).  MFG_LAB_THREADS is read and
    echoed for bookkeeping but all computations are fixed-order, so it
    cannot change results.
    """
    outdir = output_dir or config.get("output_dir", ".")
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "config": config,
        "threads": os.environ.get("MFG_LAB_THREADS", "1"),
        "stages": {},
        "files": [],
        "passed": False,
        "failure": None,
    }
    t0 = time.perf_counter()
    try:
        out = _PIPELINES[config["command"]](config, outdir)
        manifest["files"] = [os.path.relpath(f, outdir)
                             for f in out.get("files", [])]
        manifest["summary"] = out.get("summary", {})
        manifest["passed"] = True
    except (AssertionError, NumericalFailure) as exc:
        manifest["failure"] = str(exc)
        raise
    finally:
        manifest["stages"]["total"] = time.perf_counter() - t0
        manifest["wall_clock_s"] = manifest["stages"]["total"]
        manifest["checksums"] = {
            f: file_checksum(os.path.join(outdir, f))
            for f in manifest["files"]
            if os.path.exists(os.path.join(outdir, f))
        }
        write_json(os.path.join(outdir, "run_manifest.json"), manifest)
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfg-lab",
        description="numerical laboratory for coupled forward-backward "
                    "systems with common noise")
    parser.add_argument("command", choices=sorted(_PIPELINES))
    parser.add_argument("--config", required=True,
                        help="path to the JSON experiment configuration")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--noise", type=float, default=None)
    parser.add_argument("--weight-lambda", type=float, default=None)
    parser.add_argument("--weight-mu", type=float, default=None)
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    if config["command"] != args.command:
        print(f"config error: config command {config['command']!r} does not "
              f"match subcommand {args.command!r}", file=sys.stderr)
        return EXIT_SCHEMA
    if args.seed is not None:
        config["seed"] = args.seed
    inv_block = dict(config.get("inversion", {}))
    for key, val in (("alpha", args.alpha), ("noise", args.noise),
                     ("weight_lambda", args.weight_lambda),
                     ("weight_mu", args.weight_mu), ("eps", args.eps),
                     ("max_iters", args.max_iters)):
        if val is not None:
            inv_block[key] = val
    if inv_block:
        config["inversion"] = inv_block
    try:
        run(config, output_dir=args.output_dir)
    except CapacityError as exc:
        print(f"capacity guard: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (AssertionError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
