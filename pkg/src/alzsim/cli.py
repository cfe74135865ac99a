"""Command-line entry points: run, validate, refine, oracle-w1.

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 fixed-point non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, from_dict, load_config, preset
from .coupling import (
    Trajectory,
    contraction_boundary,
    coupled_march,
    cross_validate,
    distance_components,
    picard_solve,
)
from .errors import AlzsimError, BoundViolation, ConvergenceError, HypothesisError, MeasureError, SolverError
from .measure import ParticleMeasure, wasserstein1, wasserstein_lp_oracle
from .smoluchowski import species_summary, write_profile_csv, write_summary_json
from .transport import write_snapshot_csv

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3
MAX_TRANSPORT_EXPORTS = 11

# invariant name -> (diagnostic key, predicate)
INVARIANTS = {
    "g_mass_conservation": ("max_mass_error", lambda v: v <= 1e-12),
    "per_step_drift_le_10dt2": ("max_drift_over_dt2", lambda v: v <= 10.0),
    "support_inclusion": ("min_support_margin", lambda v: v >= -1e-12),
    "u_nonnegative": ("min_u", lambda v: v >= -1e-12),
    "clipped_mass_le_1e-10": ("clipped_mass", lambda v: v <= 1e-10),
    "apriori_bounds": ("min_bound_margin", lambda v: v >= -1e-9),
}


# ---------------------------------------------------------------------------
# scenario-specific closed forms


def closed_form_checks(cfg: RunConfig, tr: Trajectory) -> dict:
    """Errors against the exact solutions that some presets admit."""
    p = cfg.data.params
    t = tr.times
    out = {}
    if cfg.scenario == "decoupled":
        F = p.c_f * p.mu0
        u01 = cfg.data.u0[0, 0]
        exact = (u01 - F / p.sigma[0]) * np.exp(-p.sigma[0] * t / p.eps) + F / p.sigma[0]
        err = float(np.abs(tr.u[:, 0, :] - exact[:, None]).max())
        out["u1_linear_closed_form_error"] = {"value": err, "tol": 1e-4, "pass": err <= 1e-4}
    elif cfg.scenario == "riccati-test":
        u01 = cfg.data.u0[0, 0]
        a = p.a_coag[0, 0]
        u1 = u01 / (1.0 + a * u01 * t / p.eps)
        u2 = 0.5 * (u01 - u1)
        err = float(max(np.abs(tr.u[:, 0] - u1[:, None]).max(), np.abs(tr.u[:, 1] - u2[:, None]).max()))
        cons = float(np.abs(tr.u[:, 0] + 2.0 * tr.u[:, 1] - u01).max())
        out["riccati_closed_form_error"] = {"value": err, "tol": 2e-3, "pass": err <= 2e-3}
        out["u1_plus_2u2_conservation"] = {"value": cons, "tol": 1e-6, "pass": cons <= 1e-6}
    elif cfg.scenario == "affine-test":
        c = cfg.data.kernels.S.c
        err = float(np.abs(tr.A[:, :, 0] - (1.0 - np.exp(-c * t))[:, None]).max())
        out["A0_closed_form_error"] = {"value": err, "tol": 1e-6, "pass": err <= 1e-6}
    return out


def invariant_table(diag: dict) -> dict:
    table = {}
    for name, (key, ok) in INVARIANTS.items():
        if key in diag:
            table[name] = {"value": diag[key], "pass": bool(ok(diag[key]))}
    return table


# ---------------------------------------------------------------------------
# run


def _export(out: Path, cfg: RunConfig, tr: Trajectory) -> None:
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    n = len(tr)
    picks = sorted(set(np.linspace(0, n - 1, min(n, MAX_TRANSPORT_EXPORTS)).round().astype(int).tolist()))
    for i in picks:
        tag = f"{tr.times[i]:.6f}"
        write_snapshot_csv(snap_dir / f"transport_t{tag}.csv", cfg.data.layout, tr.A[i], tr.g[i], float(tr.times[i]))
        write_profile_csv(snap_dir / f"species_t{tag}.csv", cfg.data.grid, tr.u[i], float(tr.times[i]))
    summary = species_summary(tr.u, tr.diagnostics.get("clipped_mass", 0.0),
                              tr.diagnostics.get("boundary_outflow", []))
    write_summary_json(out / "run_summary.json", summary)


def run(cfg: RunConfig, out: str | Path | None = None, mode: str | None = None) -> int:
    """Execute the configured mode and write artifacts; returns the exit status."""
    run_cfg = cfg.run
    mode = mode or run_cfg.get("mode", "march")
    out = Path(out or run_cfg.get("out", f"runs/{cfg.scenario}"))
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "package_version": __version__,
        "scenario": cfg.scenario,
        "mode": mode,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "mesh": {"K": cfg.data.grid.K, "M": int(cfg.raw["grid"].get("M", 201)),
                 "labels": cfg.data.layout.n_labels, "dt": run_cfg["dt"], "T": run_cfg["T"]},
    }
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    status = EXIT_OK
    t0 = time.perf_counter()
    try:
        if mode == "march":
            tr = coupled_march(cfg.data, float(run_cfg["T"]), float(run_cfg["dt"]),
                               stride=int(run_cfg.get("snapshot_stride", 1)))
            manifest["diagnostics"] = tr.diagnostics
            manifest["invariants"] = invariant_table(tr.diagnostics)
            manifest["closed_form_checks"] = closed_form_checks(cfg, tr)
            _export(out, cfg, tr)
        elif mode == "picard":
            tr, report = picard_solve(cfg.data, float(run_cfg["tau"]), float(run_cfg["dt"]),
                                      float(run_cfg.get("tol", 1e-8)), int(run_cfg.get("max_iter", 30)))
            manifest["contraction"] = report.as_dict()
            manifest["invariants"] = {"ratios_below_one": {"value": report.max_ratio, "pass": report.max_ratio < 1.0}}
            (out / "contraction.json").write_text(json.dumps(report.as_dict(), indent=2), encoding="utf-8")
        elif mode == "cross-validate":
            dist, report = cross_validate(cfg.data, float(run_cfg["tau"]), float(run_cfg["dt"]),
                                          float(run_cfg.get("tol", 1e-10)), int(run_cfg.get("max_iter", 50)))
            manifest["contraction"] = report.as_dict()
            manifest["cross_validation_distance"] = dist
            manifest["distance_over_dt"] = dist / float(run_cfg["dt"])
            (out / "contraction.json").write_text(json.dumps(report.as_dict(), indent=2), encoding="utf-8")
        elif mode == "refine-study":
            rows = refine_study(cfg, int(run_cfg.get("levels", 3)), out / "refine.csv")
            manifest["refine"] = rows
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        failed = [k for k, v in {**manifest.get("invariants", {}), **manifest.get("closed_form_checks", {})}.items()
                  if not v["pass"]]
        if failed:
            manifest["failure"] = {"invariants": failed}
            status = EXIT_INVARIANT
    except ConvergenceError as exc:
        manifest["failure"] = {"error": str(exc)}
        if exc.report is not None:
            manifest["contraction"] = exc.report.as_dict()
        status = EXIT_NONCONVERGENCE
    except BoundViolation as exc:
        manifest["failure"] = {"error": str(exc), "bound": exc.as_dict()}
        status = EXIT_INVARIANT
    except SolverError as exc:
        manifest["failure"] = {"error": str(exc), "step": exc.step, "iterate": exc.iterate,
                               "state": exc.state_dump}
        status = EXIT_INVARIANT
    except AlzsimError as exc:
        manifest["failure"] = {"error": str(exc)}
        status = EXIT_INVARIANT
    manifest["wall_time_s"] = time.perf_counter() - t0
    manifest["exit_status"] = status
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float), encoding="utf-8")
    return status


# ---------------------------------------------------------------------------
# refinement


def _refined(cfg: RunConfig, level: int) -> RunConfig:
    raw = cfg.to_dict()
    f = 2**level
    raw["grid"]["M"] = (int(raw["grid"].get("M", 201)) - 1) * f + 1
    raw["grid"]["K"] = (int(raw["grid"]["K"]) - 1) * f + 1
    u0 = np.asarray(raw["initial"].get("u0"), dtype=float)
    if u0.ndim == 2:
        raise ConfigError("refine-study needs spatially constant u0")
    raw["run"]["dt"] = float(raw["run"]["dt"]) / f
    raw["run"]["snapshot_stride"] = int(raw["run"].get("snapshot_stride", 1)) * f
    return from_dict(raw, cfg.path)


def refine_study(cfg: RunConfig, levels: int, csv_path: str | Path | None = None) -> list[dict]:
    """Halve (dt, 1/M, 1/K) per level and measure X_tau distances between consecutive levels.

    The finer run is restricted to the coarser mesh: characteristics at the
    shared seeds, concentrations at the shared nodes; the label measures are
    compared directly (W1 does not need matching atoms).
    """
    if levels < 3:
        raise ConfigError("a refinement study needs at least 3 levels for an order estimate")
    T = float(cfg.run["T"])
    runs = []
    for lvl in range(levels):
        c = _refined(cfg, lvl)
        tr = coupled_march(c.data, T, float(c.run["dt"]), stride=int(c.run["snapshot_stride"]), keep_log=False)
        runs.append((c, tr))
    rows = []
    for lvl in range(levels - 1):
        (cc, tc), (cf, tf) = runs[lvl], runs[lvl + 1]
        if tc.times.shape != tf.times.shape:
            raise ConfigError("snapshot meshes of consecutive levels do not match")
        seed_idx = np.searchsorted(cf.data.layout.seeds, cc.data.layout.seeds)
        if not np.array_equal(cf.data.layout.seeds[seed_idx], cc.data.layout.seeds):
            raise ConfigError("seed grids are not nested")
        d = distance_components(tc.A, tf.A[:, ::2][:, :, seed_idx], cc.data.layout.labels, tc.g,
                                cf.data.layout.labels, tf.g[:, ::2], tc.u, tf.u[:, :, ::2])
        rows.append({"level": lvl, "dt": float(cc.run["dt"]), "M": int(cc.raw["grid"]["M"]),
                     "K": int(cc.raw["grid"]["K"]), "distance": d})
    for i in range(len(rows)):
        if i + 1 < len(rows) and rows[i + 1]["distance"] > 0.0 and rows[i]["distance"] > 0.0:
            rows[i + 1]["observed_order"] = float(np.log2(rows[i]["distance"] / rows[i + 1]["distance"]))
        rows[i].setdefault("observed_order", None)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=["level", "dt", "M", "K", "distance", "observed_order"])
            wr.writeheader()
            wr.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# W1 oracle battery


def random_measure(rng: np.random.Generator, n_atoms: int) -> ParticleMeasure:
    pos = rng.uniform(0.0, 1.0, n_atoms)
    w = rng.uniform(0.05, 1.0, n_atoms)
    return ParticleMeasure.from_atoms(pos, w / w.sum())


def oracle_w1(atoms: int, trials: int, seed: int = 0) -> dict:
    """Compare the CDF formula with the transport LP on random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        mu = random_measure(rng, int(rng.integers(1, atoms + 1)))
        nu = random_measure(rng, int(rng.integers(1, atoms + 1)))
        worst = max(worst, abs(wasserstein1(mu, nu) - wasserstein_lp_oracle(mu, nu)))
    return {"trials": trials, "max_atoms": atoms, "max_abs_difference": worst, "pass": bool(worst <= 1e-10)}


# ---------------------------------------------------------------------------
# argument parsing


def _load(args) -> RunConfig:
    if args.preset:
        return from_dict(preset(args.preset))
    if not args.config:
        raise ConfigError("give --config <path> or --preset <name>")
    return load_config(args.config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alzsim", description="Neuron-health transport coupled to amyloid kinetics.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_source(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", choices=PRESETS, help="use a built-in scenario instead of a file")

    p_run = sub.add_parser("run", help="run a scenario")
    add_source(p_run)
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--mode", choices=["march", "picard", "cross-validate", "refine-study"])

    p_val = sub.add_parser("validate", help="validate a configuration and print it")
    add_source(p_val)

    p_ref = sub.add_parser("refine", help="self-convergence study")
    add_source(p_ref)
    p_ref.add_argument("--levels", type=int, default=3)
    p_ref.add_argument("--out", help="CSV file for the convergence table")

    p_bnd = sub.add_parser("contraction-boundary", help="double tau until the Picard ratio reaches 1")
    add_source(p_bnd)
    p_bnd.add_argument("--doublings", type=int, default=5)

    p_or = sub.add_parser("oracle-w1", help="CDF formula vs transport LP battery")
    p_or.add_argument("--atoms", type=int, default=8)
    p_or.add_argument("--trials", type=int, default=500)
    p_or.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "oracle-w1":
        result = oracle_w1(args.atoms, args.trials, args.seed)
        print(json.dumps(result, indent=2))
        return EXIT_OK if result["pass"] else EXIT_INVARIANT
    try:
        cfg = _load(args)
    except (ConfigError, HypothesisError, MeasureError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(cfg.dumps())
        return EXIT_OK
    if args.command == "run":
        status = run(cfg, args.out, args.mode)
        print(f"exit status {status}; artifacts in {args.out or cfg.run.get('out')}")
        return status
    if args.command == "refine":
        try:
            rows = refine_study(cfg, args.levels, args.out)
        except ConfigError as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for r in rows:
            print(json.dumps(r))
        return EXIT_OK
    if args.command == "contraction-boundary":
        result = contraction_boundary(cfg.data, float(cfg.run["tau"]), float(cfg.run["dt"]), args.doublings)
        print(json.dumps(result, indent=2))
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
