"""Experiment runner: every module behind reproducible, file-first configs.

Each subcommand reads one config (TOML or JSON, or a manifest of a previous
run), validates it strictly, runs, and writes fixed-layout CSV/JSONL files
plus a ``manifest.json`` into the output directory.  The worker count is a
flag, never part of the config, and cannot change any output byte.

Exit codes: 0 success, 2 bad config, 3 simulation diverged, 4 not enough
data, 1 anything else.  Failures print a one-line JSON error record to
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import __version__
from .analysis import (
    embed_initial_state,
    novikov_diagnostic,
    p_weighted_energy,
    q_decay_report,
    vnorm_blowup_indicator,
)
from .config import ENV_OUTPUT, SUBCOMMANDS, ExperimentConfig, load_config
from .ctmc import occupation_statistics, sample_escape_ensemble, survival_curve
from .errors import DyadicError
from .forward import build_generator, integrate, q_mean_energy, survival_bracket
from .reporting import fmt_float, write_csv, write_jsonl, write_text
from .sde import PathConfig, simulate_paths


def _outdir(cfg: ExperimentConfig, flag: str | None) -> Path:
    chosen = flag or os.environ.get(ENV_OUTPUT) or cfg.output or f"dyadic-out/{cfg.subcommand}"
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _versions() -> Dict[str, str]:
    import numba
    import scipy

    return {
        "dyadic": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _trim(values: np.ndarray) -> list:
    """Drop trailing zeros from a per-state array for compact JSONL."""
    arr = np.asarray(values)
    nz = np.nonzero(arr)[0]
    return arr[: nz[-1] + 1].tolist() if len(nz) else []


# -- subcommand runners ----------------------------------------------------------


def run_constants(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    dc = m.decay_constants(run["nu_count"])
    files = []
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "constants.csv",
            ["n", "nu_n"],
            [(n + 1, dc.nu[n]) for n in range(len(dc.nu))],
        ))
        files.append(write_csv(
            outdir / "bounds.csv",
            ["t", "survival_lower", "survival_upper"],
            [(t, m.survival_lower_bound(t), m.survival_upper_bound(t)) for t in run["t_values"]],
        ))
    verdict = "Regular" if dc.regular else "NotRegular"
    bound = m.p_rate_bound(run["e0"])
    record = {
        "nu_inf": dc.nu_inf,
        "h": dc.h,
        "verdict": verdict,
        "nu": list(dc.nu),
        "sigma_escape": m.escape_probability(1),
        "mean_visits_1": m.mean_visits(1),
        "mean_visits_2": m.mean_visits(2),
        "pi_2": m.rates(2).pi,
        "e0": run["e0"],
        "p_rate_bound": bound,
    }
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(outdir / "constants.jsonl", [record]))
    summary = [
        f"nu_inf = {fmt_float(dc.nu_inf)}",
        f"h = {fmt_float(dc.h)}",
        f"verdict = {verdict}",
        f"sigma_escape = {fmt_float(record['sigma_escape'])}",
        f"mean visits: state 1 = {fmt_float(record['mean_visits_1'])}, "
        f"state >= 2 = {fmt_float(record['mean_visits_2'])}",
        f"p_rate_bound(e0={run['e0']:g}) = "
        + (fmt_float(bound) if bound is not None else "undefined (nu_inf * e0 >= 1)"),
    ]
    return summary, files


def run_escape_mc(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    ens = sample_escape_ensemble(
        m, run["n_samples"], cfg.seed,
        start=run["start"], cap=run["cap"], time_cap=run["time_cap"], workers=workers,
    )
    est = survival_curve(m, ens, run["t_grid"])
    files = []
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "survival.csv",
            ["t", "s_hat", "ci", "lower_bound", "upper_bound"],
            zip(est.t_grid, est.s_hat, est.ci_half_width, est.lower_bound, est.upper_bound),
        ))
    tau_se = float(ens.tau.std(ddof=1) / np.sqrt(len(ens)))
    keep = ~ens.censored
    tests = {
        "n_samples": len(ens),
        "censored": int(ens.censored.sum()),
        "mean_tau": float(ens.tau.mean()),
        "mean_tau_se": tau_se,
        "mean_tau_expected": m.nu_infinity(),
        "tail_bias_bound": ens.tail_bias_bound,
        "corr_t1_t2": float(np.corrcoef(ens.occupation[keep, 0], ens.occupation[keep, 1])[0, 1]),
        "occupation": [],
        "mean_visits_2": float(ens.visits[keep, 1].mean()),
        "mean_visits_2_expected": m.mean_visits(2),
    }
    for state in run["occupation_states"]:
        st = occupation_statistics(m, ens, state)
        tests["occupation"].append({
            "state": st.state,
            "mean": st.mean,
            "variance": st.variance,
            "ks_stat": st.ks_stat,
            "n_used": st.n_used,
            "expected_mean": m.nu(state),
        })
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(outdir / "escape_tests.jsonl", [tests]))
        if run["write_samples"]:
            files.append(write_jsonl(
                outdir / "samples.jsonl",
                ({
                    "tau": float(ens.tau[i]),
                    "censored": bool(ens.censored[i]),
                    "cap_reached": bool(ens.cap_reached[i]),
                    "visits": _trim(ens.visits[i]),
                    "occupation": _trim(ens.occupation[i]),
                } for i in range(len(ens))),
            ))
    summary = [
        f"samples = {len(ens)}, censored = {tests['censored']}",
        f"mean tau = {fmt_float(tests['mean_tau'])} +- {fmt_float(tau_se)}"
        f" (closed form {fmt_float(tests['mean_tau_expected'])})",
        f"survival at t = {fmt_float(float(est.t_grid[-1]))}: {fmt_float(float(est.s_hat[-1]))}",
    ]
    return summary, files


def run_forward_solve(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    n = run["n_levels"]
    x0 = embed_initial_state(run["x0"], n)
    norm = float(x0 @ x0)
    if norm == 0.0:
        raise DyadicError("x0 must carry some energy")
    p0 = x0**2 / norm
    grid = run["t_grid"]
    bracket = survival_bracket(m, n, p0, grid, tol=run["tol"])
    energy = q_mean_energy(m, bracket.lower, run["e0"])
    lower_ref = np.array([m.survival_lower_bound(t) for t in grid])
    upper_ref = np.array([m.survival_upper_bound(t) for t in grid])
    files = []
    header = ["t"]
    if run["include_p"]:
        header += [f"p_{k}" for k in range(1, n + 1)]
    header += ["survival_absorbing", "survival_reflecting",
               "lower_bound_exp", "upper_bound_exp", "q_mean_energy"]
    rows = []
    for j in range(len(grid)):
        row = [grid[j]]
        if run["include_p"]:
            row += list(bracket.lower.p[j])
        row += [bracket.lower.survival[j], bracket.upper.survival[j],
                lower_ref[j], upper_ref[j], energy[j]]
        rows.append(row)
    if "csv" in cfg.formats:
        files.append(write_csv(outdir / "forward.csv", header, rows))
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(
            outdir / "forward.jsonl",
            [{"t": float(grid[j]),
              "survival_absorbing": float(bracket.lower.survival[j]),
              "survival_reflecting": float(bracket.upper.survival[j]),
              "lower_bound_exp": float(lower_ref[j]),
              "upper_bound_exp": float(upper_ref[j]),
              "q_mean_energy": float(energy[j])} for j in range(len(grid))],
        ))
    mid = len(grid) // 2
    summary = [
        f"levels = {n}, refinements = {bracket.lower.refinements}, "
        f"clamped = {bracket.lower.clamp_count}",
        f"survival at t = {fmt_float(float(grid[mid]))}: "
        f"[{fmt_float(float(bracket.lower.survival[mid]))}, "
        f"{fmt_float(float(bracket.upper.survival[mid]))}]",
    ]
    return summary, files


def _moment_rows(rec, expect_modes):
    rows = []
    worst = 0.0
    n_paths = rec.n_paths
    for j in range(1, len(rec.t)):
        mc = rec.mode_sq[:, j, :]
        mean = mc.mean(axis=0)
        se = np.maximum(mc.std(axis=0, ddof=1) / np.sqrt(n_paths), 1e-300)
        z = (mean - expect_modes[j - 1]) / se
        worst = max(worst, float(np.abs(z).max()))
        for mode in range(mc.shape[1]):
            rows.append([rec.t[j], mode + 1, mean[mode], se[mode],
                         expect_modes[j - 1][mode], z[mode]])
    return rows, worst


def run_sde_verify(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    n = run["n_levels"]
    x0 = embed_initial_state(run["x0"], n)
    norm = float(x0 @ x0)
    if norm == 0.0:
        raise DyadicError("x0 must carry some energy")
    p0 = x0**2 / norm
    checks = []
    files = []

    # linearized moments against the absorbing forward solution
    q_cfg = PathConfig(measure="q_linear", horizon=run["horizon"], seed=cfg.seed,
                       scheme=run["scheme"], dt_policy=run["dt_policy"],
                       n_rec=run["n_rec"], record=("energy", "mode_sq"),
                       tol_energy=run["tol_energy"])
    q_rec = simulate_paths(m, x0, q_cfg, run["n_paths"], workers=workers)
    gen = build_generator(m, n, "absorbing")
    sol = integrate(gen, p0, q_rec.t[1:], tol=1e-10)
    expect = norm * sol.p
    rows, worst = _moment_rows(q_rec, expect)
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "qlinear_moments.csv",
            ["t", "mode", "mc_mean", "mc_se", "forward", "z"], rows,
        ))
    checks.append({"check": "q_moments_vs_forward", "passed": bool(worst <= 4.0),
                   "stat": worst, "threshold": 4.0, "n_paths": run["n_paths"]})

    # reweighted nonlinear moments against the same curve, plus martingale mean
    p_cfg = PathConfig(measure="p_nonlinear", horizon=run["horizon"], seed=cfg.seed + 1,
                       scheme=run["scheme"], dt_policy=run["dt_policy"],
                       n_rec=run["n_rec"],
                       record=("energy", "mode_sq", "vnorm_int", "girsanov"),
                       tol_energy=run["tol_energy"])
    p_rec = simulate_paths(m, x0, p_cfg, run["n_paths"], workers=workers)
    wrows = []
    worst_w = 0.0
    min_ess = float("inf")
    for j in range(1, len(p_rec.t)):
        w = np.exp(p_rec.log_weight("QoverP", j))
        ess = float(w.sum() ** 2 / (w**2).sum())
        min_ess = min(min_ess, ess)
        prod = w[:, None] * p_rec.mode_sq[:, j, :]
        mean = prod.mean(axis=0)
        se = np.maximum(prod.std(axis=0, ddof=1) / np.sqrt(p_rec.n_paths), 1e-300)
        z = (mean - expect[j - 1]) / se
        if ess >= 50.0:
            worst_w = max(worst_w, float(np.abs(z).max()))
        for mode in range(n):
            wrows.append([p_rec.t[j], mode + 1, mean[mode], se[mode],
                          expect[j - 1][mode], z[mode], ess])
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "weighted_moments.csv",
            ["t", "mode", "weighted_mean", "se", "forward", "z", "ess"], wrows,
        ))
    checks.append({"check": "weighted_p_vs_forward", "passed": bool(worst_w <= 4.0),
                   "stat": worst_w, "threshold": 4.0, "min_ess": min_ess})

    w_final = np.exp(p_rec.log_weight("QoverP"))
    mart_se = float(w_final.std(ddof=1) / np.sqrt(len(w_final)))
    mart_dev = abs(float(w_final.mean()) - 1.0)
    checks.append({"check": "density_martingale_mean_one",
                   "passed": bool(mart_dev <= 3.0 * mart_se),
                   "stat": mart_dev, "threshold": 3.0 * mart_se})

    ceiling = 0.5 * norm * (1.0 + 10.0 * run["tol_energy"])
    n_over = int((p_rec.energy.max(axis=1) > ceiling).sum())
    checks.append({"check": "energy_never_exceeds_initial",
                   "passed": bool(n_over == 0), "stat": n_over, "threshold": 0})

    # deterministic cascade conserves energy
    det_cfg = PathConfig(measure="deterministic", horizon=run["det_horizon"], seed=cfg.seed,
                         dt_policy=("fixed", run["det_dt"]), n_rec=run["n_rec"])
    det_rec = simulate_paths(m, x0, det_cfg, 1)
    e = det_rec.energy[0]
    drift = float(np.abs(e - e[0]).max() / e[0] / run["det_horizon"])
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "deterministic.csv",
            ["t", "energy", "rel_drift"],
            [(det_rec.t[j], e[j], (e[j] - e[0]) / e[0]) for j in range(len(e))],
        ))
    checks.append({"check": "deterministic_energy_conserved",
                   "passed": bool(drift <= 1e-8), "stat": drift, "threshold": 1e-8})

    n_dump = min(run["n_dump_paths"], p_rec.n_paths)
    if "csv" in cfg.formats and n_dump:
        rows = []
        for i in range(n_dump):
            for j in range(len(p_rec.t)):
                rows.append([i, p_rec.t[j], p_rec.energy[i, j],
                             *p_rec.mode_sq[i, j, :], p_rec.vnorm_int[i, j],
                             float(p_rec.log_weight("PoverQ", j)[i])])
        files.append(write_csv(
            outdir / "paths.csv",
            ["path", "t", "energy"] + [f"x{k}_sq" for k in range(1, n + 1)]
            + ["vnorm_int", "log_dPdQ"],
            rows,
        ))
    if "jsonl" in cfg.formats:
        if n_dump:
            files.append(write_jsonl(
                outdir / "paths.jsonl",
                ({
                    "path": i,
                    "energy_final": float(p_rec.energy[i, -1]),
                    "vnorm_int_final": float(p_rec.vnorm_int[i, -1]),
                    "log_dPdQ_final": float(p_rec.log_weight("PoverQ")[i]),
                    "clamped": bool(p_rec.clamped[i].any()),
                } for i in range(n_dump)),
            ))
        files.append(write_jsonl(outdir / "verify.jsonl", checks))
    summary = [
        f"{c['check']}: {'pass' if c['passed'] else 'FAIL'} "
        f"(stat {fmt_float(float(c['stat']))}, threshold {fmt_float(float(c['threshold']))})"
        for c in checks
    ]
    return summary, files


def run_decay_report(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    n = run["n_levels"]
    x0 = embed_initial_state(run["x0"], n)
    q_cfg = PathConfig(measure="q_linear", horizon=run["horizon"], seed=cfg.seed,
                       dt_policy=run["dt_policy"], n_rec=run["n_rec"],
                       record=("energy",))
    q_rec = simulate_paths(m, x0, q_cfg, run["q_n_paths"], workers=workers)
    rate = q_decay_report(m, q_rec, window=run["window"])

    p_cfg = PathConfig(measure="p_nonlinear", horizon=run["horizon"], seed=cfg.seed + 1,
                       dt_policy=run["dt_policy"], n_rec=run["n_rec"],
                       record=("energy", "girsanov"))
    p_rec = simulate_paths(m, x0, p_cfg, run["p_n_paths"], workers=workers)
    curve = p_weighted_energy(m, p_rec)
    norm = float(x0 @ x0)
    p0 = x0**2 / norm
    sol = integrate(build_generator(m, n, "absorbing"), p0, p_rec.t[1:], tol=1e-10)
    forward_ref = np.concatenate(([0.5 * norm], 0.5 * norm * sol.survival))

    files = []
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "weighted_energy.csv",
            ["t", "p_mean", "p_mean_ci", "p_mean_bound",
             "q_mean", "q_mean_ci", "ess", "usable", "forward_reference"],
            [(curve.t[j], curve.p_mean[j], curve.p_mean_ci[j], curve.p_mean_bound[j],
              curve.q_mean[j], curve.q_mean_ci[j], curve.ess[j], bool(curve.usable[j]),
              forward_ref[j]) for j in range(len(curve.t))],
        ))
    report = {
        "median_slope": rate.median_slope,
        "max_slope": rate.max_slope,
        "reference_lines": rate.reference_lines,
        "n_paths": rate.n_paths,
        "n_levels": rate.n_levels,
        "horizon": rate.horizon,
        "window": rate.window,
        "short_horizon": rate.short_horizon,
        "n_floor_hits": rate.n_floor_hits,
    }
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(outdir / "rate_report.jsonl", [report]))
    summary = [
        f"median tail slope = {fmt_float(rate.median_slope)} over window {run['window']:g}",
        "reference lines: "
        + ", ".join(f"{k} = {fmt_float(v)}" for k, v in rate.reference_lines.items()),
        f"short horizon: {rate.short_horizon} (horizon {run['horizon']:g})",
        f"weighted curve usable through t = "
        f"{fmt_float(float(curve.t[curve.usable][-1]))} (min ess {fmt_float(float(curve.ess.min()))})",
    ]
    return summary, files


def run_novikov(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    e0 = run["e0"]
    margin_only = novikov_diagnostic(m, e0)
    rows = []
    records = []
    if margin_only.satisfied:
        x0 = embed_initial_state([np.sqrt(2.0 * e0)], run["n_levels"])
        for horizon in run["horizons"]:
            q_cfg = PathConfig(measure="q_linear", horizon=horizon, seed=cfg.seed,
                               dt_policy=run["dt_policy"], n_rec=run["n_rec"],
                               record=("energy", "energy_int"))
            rec = simulate_paths(m, x0, q_cfg, run["n_paths"], workers=workers)
            rep = novikov_diagnostic(m, e0, rec)
            rows.append([horizon, rep.margin, rep.satisfied, rep.mc_estimate, rep.mc_ci,
                         rep.integral_median, rep.integral_p95, rep.n_paths])
            records.append({
                "horizon": horizon, "margin": rep.margin, "satisfied": rep.satisfied,
                "mc_estimate": rep.mc_estimate, "mc_ci": rep.mc_ci,
                "integral_median": rep.integral_median, "integral_p95": rep.integral_p95,
                "n_paths": rep.n_paths,
            })
    else:
        records.append({"margin": margin_only.margin, "satisfied": False,
                        "note": "smallness condition fails; no finite-horizon proxy run"})
    files = []
    if "csv" in cfg.formats and rows:
        files.append(write_csv(
            outdir / "novikov.csv",
            ["horizon", "margin", "satisfied", "mc_estimate", "mc_ci",
             "integral_median", "integral_p95", "n_paths"], rows,
        ))
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(outdir / "novikov.jsonl", records))
    summary = [
        f"margin nu_inf * e0 = {fmt_float(margin_only.margin)}"
        f" -> {'satisfied' if margin_only.satisfied else 'NOT satisfied'}",
    ]
    for rec in records:
        if "horizon" in rec:
            summary.append(
                f"T = {rec['horizon']:g}: E[exp(int E)] = {fmt_float(rec['mc_estimate'])}"
                f" +- {fmt_float(rec['mc_ci'])}"
            )
    return summary, files


def run_blowup(cfg: ExperimentConfig, outdir: Path, workers: int):
    m = cfg.model
    run = cfg.run
    records = {}
    for n in run["n_sweep"]:
        if run["measure"] == "deterministic":
            pc = PathConfig(measure="deterministic", horizon=run["horizon"], seed=cfg.seed,
                            dt_policy=("fixed", run["det_dt"]), n_rec=run["n_rec"],
                            record=("energy", "vnorm_int"))
        else:
            pc = PathConfig(measure=run["measure"], horizon=run["horizon"], seed=cfg.seed,
                            dt_policy=run["dt_policy"], n_rec=run["n_rec"],
                            record=("energy", "vnorm_int"))
        records[n] = simulate_paths(m, embed_initial_state(run["x0"], n), pc,
                                    run["n_paths"], workers=workers)
    rows = vnorm_blowup_indicator(records)
    medians = [r.median for r in rows]
    files = []
    if "csv" in cfg.formats:
        files.append(write_csv(
            outdir / "blowup.csv",
            ["n_levels", "median", "p90", "n_paths", "horizon"],
            [(r.n_levels, r.median, r.p90, r.n_paths, r.horizon) for r in rows],
        ))
    if "jsonl" in cfg.formats:
        files.append(write_jsonl(
            outdir / "blowup.jsonl",
            [{"n_levels": r.n_levels, "median": r.median, "p90": r.p90,
              "n_paths": r.n_paths, "horizon": r.horizon} for r in rows]
            + [{"monotone_in_levels": bool(np.all(np.diff(medians) >= 0.0))}],
        ))
    summary = [
        "vnorm integral medians by level: "
        + ", ".join(f"N={r.n_levels}: {fmt_float(r.median)}" for r in rows),
        f"monotone in level: {bool(np.all(np.diff(medians) >= 0.0))}",
    ]
    return summary, files


RUNNERS = {
    "constants": run_constants,
    "escape-mc": run_escape_mc,
    "forward-solve": run_forward_solve,
    "sde-verify": run_sde_verify,
    "decay-report": run_decay_report,
    "novikov": run_novikov,
    "blowup": run_blowup,
}


def run(subcommand: str, cfg: ExperimentConfig, outdir: Path, workers: int) -> List[str]:
    """Execute one subcommand and write its manifest; returns summary lines."""
    t0 = time.perf_counter()
    summary, files = RUNNERS[subcommand](cfg, outdir, workers)
    wall = time.perf_counter() - t0
    manifest = {
        "subcommand": subcommand,
        "config": cfg.resolved(),
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": wall,
        "workers": workers,
        "outputs": sorted(p.name for p in files),
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_text(outdir / "summary.txt", summary)
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dyadic",
        description="Simulation and verification toolkit for a stochastic dyadic shell model",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="TOML/JSON config, or a manifest.json from a previous run")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted keys); wins over the file")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers; never changes results")
    args = parser.parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.subcommand, args.config, overrides)
        outdir = _outdir(cfg, args.output)
        summary = run(args.subcommand, cfg, outdir, max(1, args.workers))
    except DyadicError as exc:
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")
        return exc.exit_code
    for line in summary:
        print(line)
    print(f"outputs in {outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
