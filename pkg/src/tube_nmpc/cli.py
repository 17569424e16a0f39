"""Command-line front end: reference generation, single closed loops and
paired Monte-Carlo batches driven by scenario files.

Every command is deterministic given (scenario, flags, seed). All artifacts
are tidy CSVs with a fixed, versioned column order (``SCHEMA_VERSION``), plus
a JSON run manifest written atomically before any result file.

Exit codes: 0 success, 2 configuration error, 3 simulation failure,
4 mid-run solver abort (partial CSV retained and flagged in the manifest).
"""

import json
import os
import sys
import time
from dataclasses import dataclass, asdict

import click
import numpy as np

from . import __version__
from .config import CONTROLLER_NAMES, ConfigError, load_scenario
from .errors import TubeNmpcError
from .harness import (UncertaintyConfig, build_references, compute_metrics,
                      make_realization, monte_carlo, run_closed_loop)

SCHEMA_VERSION = 1

EXIT_CONFIG = 2
EXIT_SIM = 3
EXIT_ABORT = 4


@dataclass
class RunManifest:
    """Audit record for one CLI invocation, written before the results."""
    scenario: str
    command: str
    seed: int
    artifact_version: str
    schema_version: int
    output_dir: str
    wall_clock_s: float
    extra: dict

    def write(self, path):
        """Atomic write: compose in a temp file, then rename into place."""
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _fmt(value) -> str:
    return f"{float(value):.17g}"


def _write_csv(path, header, rows):
    """Deterministic CSV: fixed column order, full-precision floats."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, str) else v
                              for v in row) + "\n")
    os.replace(tmp, path)


def _load(scenario_path):
    try:
        return load_scenario(scenario_path)
    except FileNotFoundError as exc:
        raise SystemExit(_fail(EXIT_CONFIG, f"scenario file not found: {exc}"))
    except ConfigError as exc:
        raise SystemExit(_fail(EXIT_CONFIG, f"bad scenario: {exc}"))


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    return code


def _references(scn):
    try:
        return build_references(scn.diet, scn.cfg, scn.params, scn.tc, scn.hp)
    except TubeNmpcError as exc:
        raise SystemExit(_fail(EXIT_SIM, f"reference simulation failed: {exc}"))


def _run_rows(result, refs, scn, n_rows):
    """Per-run time series rows: state and outputs at each node, the input
    applied over the following interval (repeated on the final node) and the
    maximum slack of the solve that produced it."""
    rows = []
    for k in range(n_rows + 1):
        if result.n_completed:
            ku = min(k, result.n_completed - 1)
            u_k = result.u_applied[ku, 0]
            slack_k = result.slack_max[ku]
            sat_k = float(result.saturated[ku])
        else:
            u_k = slack_k = sat_k = 0.0
        rows.append([result.times[k], *result.states[k], u_k,
                     *result.y_true[k], *result.y_meas[k],
                     *refs.y_ref[k], slack_k, sat_k])
    return rows


def _run_header(n):
    return (["t"] + [f"x{i + 1}" for i in range(n)] + ["u"]
            + ["qm", "ratio", "qm_meas", "ratio_meas", "qm_ref", "ratio_ref"]
            + ["slack_max", "saturated"])


def _n_workers():
    raw = os.environ.get("TUBE_NMPC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise SystemExit(_fail(EXIT_CONFIG,
                               f"TUBE_NMPC_THREADS must be an integer, got {raw!r}"))


@click.group()
@click.version_option(__version__)
def main():
    """Tube-based NMPC toolkit for anaerobic co-digestion."""


@main.command("references")
@click.argument("scenario_path")
@click.option("--out", default=".", show_default=True,
              help="Output directory for the CSVs.")
def cmd_references(scenario_path, out):
    """Write the nominal feed plan and output references to CSV."""
    scn = _load(scenario_path)
    t0 = time.perf_counter()
    refs = _references(scn)
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(scenario=str(scenario_path), command="references",
                           seed=scn.uncertainty.seed,
                           artifact_version=__version__,
                           schema_version=SCHEMA_VERSION, output_dir=str(out),
                           wall_clock_s=round(time.perf_counter() - t0, 3),
                           extra={})
    manifest.write(os.path.join(out, "manifest.json"))
    m = scn.cfg.m
    names = [f.name for f in scn.cfg.feedstocks]
    n_rows = refs.d_ref.shape[0]
    grid = np.arange(n_rows) * scn.tc
    _write_csv(os.path.join(out, "d_ref.csv"), ["t"] + names,
               [[grid[k], *refs.d_ref[k]] for k in range(n_rows)])
    _write_csv(os.path.join(out, "y_ref.csv"), ["t", "qm_ref", "ratio_ref"],
               [[grid[k], *refs.y_ref[k]] for k in range(n_rows)])
    click.echo(f"wrote d_ref.csv and y_ref.csv ({n_rows} rows each) to {out}")


@main.command("run")
@click.argument("scenario_path")
@click.option("--controller", default=None,
              help="Override the scenario's controller.")
@click.option("--seed", default=None, type=int,
              help="Override the scenario's base seed.")
@click.option("--out", default=".", show_default=True)
@click.option("--zero-uncertainty", is_flag=True,
              help="Disable kinetic uncertainty and measurement noise.")
def cmd_run(scenario_path, controller, seed, out, zero_uncertainty):
    """One closed-loop run: time-series CSV, summary CSV and manifest."""
    scn = _load(scenario_path)
    mode = controller or scn.controller
    if mode not in CONTROLLER_NAMES:
        raise SystemExit(_fail(
            EXIT_CONFIG,
            f"unknown controller {mode!r}; valid: {', '.join(CONTROLLER_NAMES)}"))
    if seed is not None:
        scn.uncertainty.seed = seed
    if zero_uncertainty:
        scn.uncertainty = UncertaintyConfig(
            kinetic_rel_std=0.0, noise_rel_std=[0.0, 0.0],
            n_runs=scn.uncertainty.n_runs, seed=scn.uncertainty.seed)
    t0 = time.perf_counter()
    refs = _references(scn)
    rz = make_realization(scn.params, scn.uncertainty, scn.knockdown, 0)
    result = run_closed_loop(scn, mode, rz, refs)
    wall = time.perf_counter() - t0

    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(scenario=str(scenario_path), command="run",
                           seed=scn.uncertainty.seed,
                           artifact_version=__version__,
                           schema_version=SCHEMA_VERSION, output_dir=str(out),
                           wall_clock_s=round(wall, 3),
                           extra={"controller": mode,
                                  "realization_digest": rz.digest,
                                  "failed": result.failed,
                                  "fail_reason": result.fail_reason,
                                  "n_completed": result.n_completed})
    manifest.write(os.path.join(out, "manifest.json"))

    n_rows = result.n_completed
    _write_csv(os.path.join(out, "run.csv"), _run_header(scn.cfg.n),
               _run_rows(result, refs, scn, n_rows))
    if result.failed:
        click.echo(f"run aborted after {n_rows} steps: {result.fail_reason}",
                   err=True)
        sys.exit(EXIT_ABORT)

    report = compute_metrics([result], refs.y_ref, refs.ybar, scn.cfg.m + 3)
    _write_csv(os.path.join(out, "summary.csv"),
               ["controller", "rmse_qm", "rmse_ratio", "s2_max", "ratio_max",
                "fallbacks", "saturated_frac"],
               [[mode, report.rmse_rel[0], report.rmse_rel[1], report.s2_max,
                 report.ratio_max, float(result.fallbacks),
                 float(result.saturated.mean())]])
    click.echo(f"run complete: rmse(qm)={report.rmse_rel[0]:.3f}% "
               f"s2_max={report.s2_max:.2f}")


@main.command("montecarlo")
@click.argument("scenario_path")
@click.option("--controllers", default=None,
              help="Comma-separated controller list (default: scenario's).")
@click.option("--runs", default=None, type=int, help="Override run count.")
@click.option("--seed", default=None, type=int, help="Override base seed.")
@click.option("--out", default=".", show_default=True)
def cmd_montecarlo(scenario_path, controllers, runs, seed, out):
    """Paired Monte-Carlo batch: metrics table plus per-run CSVs."""
    scn = _load(scenario_path)
    modes = ([c.strip() for c in controllers.split(",")] if controllers
             else [scn.controller])
    for mode in modes:
        if mode not in CONTROLLER_NAMES:
            raise SystemExit(_fail(
                EXIT_CONFIG,
                f"unknown controller {mode!r}; "
                f"valid: {', '.join(CONTROLLER_NAMES)}"))
    if runs is not None:
        if runs < 1:
            raise SystemExit(_fail(EXIT_CONFIG, "--runs must be >= 1"))
        scn.uncertainty.n_runs = runs
    if seed is not None:
        scn.uncertainty.seed = seed

    t0 = time.perf_counter()
    refs = _references(scn)
    try:
        reports, all_runs, realizations = monte_carlo(
            scn, modes, refs, n_workers=_n_workers())
    except ValueError as exc:
        raise SystemExit(_fail(EXIT_SIM, f"all runs aborted: {exc}"))
    wall = time.perf_counter() - t0

    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(scenario=str(scenario_path), command="montecarlo",
                           seed=scn.uncertainty.seed,
                           artifact_version=__version__,
                           schema_version=SCHEMA_VERSION, output_dir=str(out),
                           wall_clock_s=round(wall, 3),
                           extra={"controllers": modes,
                                  "n_runs": scn.uncertainty.n_runs,
                                  "realizations": [
                                      {"run_index": rz.run_index,
                                       "digest": rz.digest,
                                       "knock_amplitude": rz.knock_amplitude,
                                       "knock_duration": rz.knock_duration}
                                      for rz in realizations]})
    manifest.write(os.path.join(out, "manifest.json"))

    metric_rows = []
    for i, mode in enumerate(modes):
        rep = reports[mode]
        metric_rows.append(
            [mode, float(rep.n_runs), float(rep.n_failed),
             rep.rmse_rel[0], rep.rmse_rel[1], rep.sigma_bar_s2,
             rep.sigma_max_s2, rep.s2_max, rep.ratio_max])
        run_dir = os.path.join(out, "runs", f"{i:02d}_{mode}")
        os.makedirs(run_dir, exist_ok=True)
        for idx, r in enumerate(all_runs[mode]):
            path = os.path.join(run_dir, f"run_{idx:03d}.csv")
            _write_csv(path, _run_header(scn.cfg.n),
                       _run_rows(r, refs, scn, r.n_completed))
    _write_csv(os.path.join(out, "metrics.csv"),
               ["controller", "n_runs", "n_failed", "rmse_qm", "rmse_ratio",
                "sigma_bar_s2", "sigma_max_s2", "s2_max", "ratio_max"],
               metric_rows)
    for row in metric_rows:
        click.echo(f"{row[0]}: rmse(qm)={row[3]:.2f}% sigma_bar={row[5]:.3f} "
                   f"s2_max={row[7]:.2f} failed={int(row[2])}")


if __name__ == "__main__":
    main()
