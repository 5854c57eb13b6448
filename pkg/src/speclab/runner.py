"""Run experiments from validated configs and persist the artifacts.

Every run writes into the config's output directory: results.json (a
schema-versioned structured report that echoes the full config), results.csv
(flat rows, RFC 4180 dialect, one header row), and plotdata/*.csv
(per-figure series in the same dialect).  Every CSV row carries the config
hash and results.json embeds both the hash and the tool version, so any
artifact on disk can be traced to the exact run that produced it.

Exit codes: 0 success, 3 numerical failure (the reason is also written to
results.json), 4 partial sweep (some cells failed, the rest are valid).
Config validation errors are raised as ConfigError before run() starts and
map to exit 2 at the command line.

The parameter sweep fans immutable cell descriptions out to stateless
worker processes and assembles rows in cell order, so repeated runs of the
same config produce byte-identical CSV files.  A crashing cell becomes a
failed row, never a failed sweep; cells the grid cannot resolve are marked
skipped.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict
from .diagnostics import (
    decay_profile,
    hypothesis_fit,
    hypothesis_probe,
    mourre_probe,
    regularity_probe,
)
from .grid import Grid, make_grid
from .hscalc import (
    QuadratureSpec,
    hs_apply,
    hs_commutator_expansion,
    matrix_operator,
    poly_decay_symbol,
    remainder_weighted_norm,
)
from .operators import OperatorRep, build_hamiltonian
from .potentials import PotentialSpec, ResolutionError, build_potential
from .spectral import detect_embedded, eigenpairs, lap_probe

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERICAL",
    "EXIT_PARTIAL",
    "SCHEMA_VERSION",
    "CellResult",
    "ScanResult",
    "run",
    "sweep",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4

SCHEMA_VERSION = 1

# Thread caps exported to sweep workers so parallel cells cannot oversubscribe
# the machine; set in the parent before the pool spawns.
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass(frozen=True)
class CellResult:
    """Outcome of one sweep cell.

    ``status`` is ok, skipped (grid cannot resolve the cell's potential) or
    failed (the cell raised; ``reason`` holds the message).  ``verdict`` is
    the cell-level call: embedded when any level in the window passed the
    embedded tests, none when the window was scanned clean, else the status.
    The best candidate is the most localised embedded level, falling back to
    the most localised level of any verdict.
    """

    zeta: float
    theta: float
    status: str
    verdict: str
    n_embedded: int
    n_scattering: int
    n_inconclusive: int
    best_energy: float | None
    best_localization: float | None
    best_drift: float | None
    reason: str


@dataclass(frozen=True)
class ScanResult:
    """Full phase-map sweep: axes, one row per cell, provenance."""

    zeta_values: tuple[float, ...]
    theta_values: tuple[float, ...]
    cells: tuple[CellResult, ...]
    config_sha256: str
    tool_version: str

    def __post_init__(self) -> None:
        expected = len(self.zeta_values) * len(self.theta_values)
        if len(self.cells) != expected:
            raise ValueError(
                f"sweep holds {len(self.cells)} cells, axes demand {expected}"
            )
        for cell in self.cells:
            if not cell.verdict:
                raise ValueError(
                    f"cell ({cell.zeta}, {cell.theta}) carries no verdict"
                )


@dataclass
class _Outcome:
    results: dict
    header: list[str]
    rows: list[list]
    plots: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    status: str = "ok"
    reason: str = ""


def _problem(config: ExperimentConfig) -> tuple[Grid, np.ndarray, OperatorRep]:
    grid = make_grid(config.half_length, config.n)
    v_field = build_potential(config.potential, grid)
    return grid, v_field, build_hamiltonian(v_field, grid)


def _eigenpair_at_level(h: OperatorRep, level: int):
    pairs = eigenpairs(h, level + 1)
    if level >= len(pairs):
        raise RuntimeError(
            f"requested eigenpair level {level} but only {len(pairs)} were found"
        )
    return pairs[level]


def _run_spectrum(config: ExperimentConfig, workers: int | None) -> _Outcome:
    _, _, h = _problem(config)
    p = config.params
    window = tuple(p["window"]) if "window" in p else p["count"]
    pairs = eigenpairs(h, window)
    rows = [[j, pair.eigenvalue, pair.residual] for j, pair in enumerate(pairs)]
    results = {
        "count": len(pairs),
        "eigenvalues": [pair.eigenvalue for pair in pairs],
        "residuals": [pair.residual for pair in pairs],
    }
    plots = {
        "spectrum_levels": (
            ["index", "eigenvalue"],
            [[j, pair.eigenvalue] for j, pair in enumerate(pairs)],
        )
    }
    return _Outcome(results, ["index", "eigenvalue", "residual"], rows, plots)


def _decay_fit_lines(pair, report, grid: Grid) -> list[list]:
    """Long-format fit-line series: observed tail and fitted line per beta."""
    lo, hi = report.fit_window
    absx = np.abs(grid.nodes)
    amp = np.abs(np.asarray(pair.vector))
    window = (absx >= lo) & (absx <= hi) & (amp > 1e-290)
    xs = absx[window]
    ys = -np.log(amp[window])
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    rows: list[list] = []
    for beta, alpha in zip(report.beta_grid, report.alpha_star):
        u = np.sqrt(1.0 + xs * xs) ** beta
        intercept = float(np.mean(ys - alpha * u))
        for uj, yj in zip(u, ys):
            rows.append([beta, float(uj), float(yj), intercept + alpha * float(uj)])
    return rows


def _run_decay(config: ExperimentConfig, workers: int | None) -> _Outcome:
    grid, _, h = _problem(config)
    pair = _eigenpair_at_level(h, config.params["level"])
    report = decay_profile(pair, config.params["beta_grid"], grid)
    rows = [[b, a] for b, a in zip(report.beta_grid, report.alpha_star)]
    results = {
        "energy": report.energy,
        "flag": report.flag,
        "s_e_estimate": report.s_e_estimate,
        "fit_window": list(report.fit_window),
        "fit_residual": report.fit_residual,
        "beta_grid": list(report.beta_grid),
        "alpha_star": list(report.alpha_star),
    }
    plots = {
        "decay_fit": (["beta", "alpha_star"], rows),
        "decay_fit_lines": (
            ["beta", "stretched_x", "neg_log_amp", "fit_line"],
            _decay_fit_lines(pair, report, grid),
        ),
    }
    return _Outcome(results, ["beta", "alpha_star"], rows, plots)


def _run_mourre(config: ExperimentConfig, workers: int | None) -> _Outcome:
    _, _, h = _problem(config)
    reports = [
        mourre_probe(h, config.conjugate, (lo, hi), config.params["discard_r"])
        for lo, hi in config.params["windows"]
    ]
    rows = [
        [r.interval[0], r.interval[1], r.raw_bottom, r.c0_estimate, r.rank_i, r.discarded]
        for r in reports
    ]
    results = {"windows": [asdict(r) for r in reports]}
    plots = {
        "mourre_bottom": (
            ["window_lo", "window_hi", "raw_bottom", "c0_estimate"],
            [[r.interval[0], r.interval[1], r.raw_bottom, r.c0_estimate] for r in reports],
        )
    }
    header = ["window_lo", "window_hi", "raw_bottom", "c0_estimate", "rank_i", "discarded"]
    return _Outcome(results, header, rows, plots)


def _run_lap(config: ExperimentConfig, workers: int | None) -> _Outcome:
    _, _, h = _problem(config)
    p = config.params
    report = lap_probe(h, p["energy"], p["s"], p["mu_sequence"])
    rows = [[mu, nrm] for mu, nrm in zip(report.mu_sequence, report.norms)]
    results = {
        "energy": report.energy,
        "weight_exponent": report.weight_exponent,
        "classified": report.classified,
        "mu_sequence": list(report.mu_sequence),
        "norms": list(report.norms),
    }
    plots = {"lap_norms": (["mu", "weighted_norm"], rows)}
    return _Outcome(results, ["mu", "weighted_norm"], rows, plots)


def _run_hypothesis(config: ExperimentConfig, workers: int | None) -> _Outcome:
    grid, v_field, h = _problem(config)
    p = config.params
    pair = _eigenpair_at_level(h, p["level"])
    points = {(a, b) for a in p["alphas"] for b in p["betas"]}
    # Sub-exponential conjugation weights from the config add probe points.
    points |= {
        (w.alpha, w.beta)
        for w in config.weights
        if w.kind == "subexp" and w.alpha > 0.0
    }
    probes = [
        hypothesis_probe(h, v_field, pair, a, b, grid) for a, b in sorted(points)
    ]
    fit = hypothesis_fit(probes, include_gad=p["include_gad"])
    header = [
        "alpha", "beta", "t_comm", "t_kin", "t_grad", "t_norm", "t_gad",
        "t_cross", "t_pot",
    ]
    rows = [
        [q.alpha, q.beta, q.t_comm, q.t_kin, q.t_grad, q.t_norm, q.t_gad,
         q.t_cross, q.t_pot]
        for q in probes
    ]
    results = {
        "energy": pair.eigenvalue,
        "fit": asdict(fit),
        "probes": [asdict(q) for q in probes],
    }
    return _Outcome(results, header, rows, {"hypothesis_probes": (header, rows)})


def _random_hermitian(rng: np.random.Generator, size: int) -> np.ndarray:
    raw = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    return 0.5 * (raw + raw.conj().T)


def _run_hscheck(config: ExperimentConfig, workers: int | None) -> _Outcome:
    p = config.params
    rng = np.random.default_rng(config.seed)
    b_mat = _random_hermitian(rng, p["size"])
    t_mat = _random_hermitian(rng, p["size"])
    b_op = matrix_operator(b_mat, label="B")
    t_op = matrix_operator(t_mat, label="T")
    phi = poly_decay_symbol(p["power"])

    vals, vecs = np.linalg.eigh(b_mat)
    oracle = (vecs * phi.evaluate(vals)) @ vecs.conj().T
    scale = max(1.0, float(np.linalg.norm(oracle, 2)))
    applied = hs_apply(phi, b_op)
    apply_err = float(np.linalg.norm(applied.dense() - oracle, 2)) / scale

    k = p["expansion_order"]
    # Depth-3 remainders need a finer mesh to pass their refinement gate.
    mesh = QuadratureSpec(x_nodes=28, y_nodes=32) if k + 1 >= 3 else None
    terms_k, rem_k = hs_commutator_expansion(phi, b_op, t_op, k, mesh=mesh)
    terms_k1, rem_k1 = hs_commutator_expansion(phi, b_op, t_op, k + 1, mesh=mesh)

    comm_true = oracle @ t_mat - t_mat @ oracle
    comm_scale = max(1.0, float(np.linalg.norm(comm_true, 2)))
    recomposed = sum(t.dense() for t in terms_k) + rem_k.dense()
    closure = float(np.linalg.norm(recomposed - comm_true, 2)) / comm_scale
    telescope = (
        float(np.linalg.norm(rem_k.dense() - terms_k1[-1].dense() - rem_k1.dense(), 2))
        / comm_scale
    )
    weighted = remainder_weighted_norm(rem_k, b_op, s=float(k), s_prime=0.5)

    rows = [
        ["hs_apply_vs_eigh", apply_err],
        ["expansion_closure", closure],
        ["telescoping", telescope],
        ["remainder_weighted_norm", weighted],
    ]
    results = {name: value for name, value in rows}
    results.update(size=p["size"], power=p["power"], expansion_order=k)
    return _Outcome(
        results, ["check", "value"], rows, {"hscheck_residuals": (["check", "value"], rows)}
    )


def _run_regularity(config: ExperimentConfig, workers: int | None) -> _Outcome:
    grid, v_field, _ = _problem(config)
    series = regularity_probe(v_field, config.conjugate, config.params["tau_list"], grid)
    rows = [[tau, d_tau] for tau, d_tau in series]
    results = {"tau": [t for t, _ in series], "d_tau": [d for _, d in series]}
    return _Outcome(
        results, ["tau", "d_tau"], rows, {"regularity_dtau": (["tau", "d_tau"], rows)}
    )


def _scan_cell(task: dict) -> dict:
    """Evaluate one sweep cell; never raises.

    Runs in a worker process.  Resolution failures (base or doubled box)
    mark the cell skipped; any other exception marks it failed with the
    message as the reason.
    """
    row = {
        "zeta": task["zeta"],
        "theta": task["theta"],
        "status": "ok",
        "verdict": "none",
        "n_embedded": 0,
        "n_scattering": 0,
        "n_inconclusive": 0,
        "best_energy": None,
        "best_localization": None,
        "best_drift": None,
        "reason": "",
    }
    try:
        base = make_grid(task["half_length"], task["n"])
        params = dict(task["template"])
        params["zeta"] = task["zeta"]
        params["theta"] = task["theta"]
        spec = PotentialSpec("oscillating", params)
        candidates = detect_embedded(
            spec,
            tuple(task["energy_range"]),
            base,
            drift_tol=task["drift_tol"],
            loc_embedded_threshold=task["loc_embedded_threshold"],
            loc_scattering_threshold=task["loc_scattering_threshold"],
        )
    except ResolutionError as exc:
        row.update(status="skipped", verdict="skipped", reason=str(exc))
        return row
    except Exception as exc:
        row.update(
            status="failed", verdict="failed", reason=f"{type(exc).__name__}: {exc}"
        )
        return row

    embedded = [c for c in candidates if c.verdict == "embedded"]
    row["n_embedded"] = len(embedded)
    row["n_scattering"] = sum(c.verdict == "scattering_artifact" for c in candidates)
    row["n_inconclusive"] = sum(c.verdict == "inconclusive" for c in candidates)
    pool = embedded or candidates
    if pool:
        best = max(pool, key=lambda c: c.localization)
        row["best_energy"] = best.eigenvalue
        row["best_localization"] = best.localization
        row["best_drift"] = best.drift
    if embedded:
        row["verdict"] = "embedded"
    return row


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("SPECLAB_WORKERS")
        if env is not None and env != "":
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError(
                    "SPECLAB_WORKERS", f"expected an integer, got {env!r}"
                ) from None
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {workers}")
    return int(workers)


def sweep(config: ExperimentConfig, workers: int | None = None) -> ScanResult:
    """Run the (zeta, theta) phase-map sweep and return every cell's row.

    Cells are independent and immutable, evaluated by a spawn-based process
    pool (one task per cell) and assembled in cell order, so the result is
    deterministic for a fixed config regardless of worker count.
    """
    if config.experiment != "scan":
        raise ConfigError("experiment", f"sweep needs a scan config, got {config.experiment!r}")
    p = config.params
    zetas = [float(z) for z in p["zeta_values"]]
    thetas = [float(t) for t in p["theta_values"]]
    tasks = [
        {
            "half_length": config.half_length,
            "n": config.n,
            "template": dict(config.potential.params),
            "zeta": z,
            "theta": t,
            "energy_range": list(p["energy_range"]),
            "drift_tol": p["drift_tol"],
            "loc_embedded_threshold": p["loc_embedded_threshold"],
            "loc_scattering_threshold": p["loc_scattering_threshold"],
        }
        for z in zetas
        for t in thetas
    ]
    workers = min(_resolve_workers(workers), len(tasks))

    if workers > 1:
        saved = {name: os.environ.get(name) for name in _BLAS_VARS}
        threads = max(1, (os.cpu_count() or workers) // workers)
        for name in _BLAS_VARS:
            os.environ[name] = str(threads)
        try:
            ctx = multiprocessing.get_context("spawn")
            with ctx.Pool(processes=workers) as pool:
                rows = pool.map(_scan_cell, tasks)
        finally:
            for name, value in saved.items():
                if value is None:
                    os.environ.pop(name, None)
                else:
                    os.environ[name] = value
    else:
        rows = [_scan_cell(task) for task in tasks]

    return ScanResult(
        zeta_values=tuple(zetas),
        theta_values=tuple(thetas),
        cells=tuple(CellResult(**row) for row in rows),
        config_sha256=config_hash(config),
        tool_version=__version__,
    )


def _run_scan(config: ExperimentConfig, workers: int | None) -> _Outcome:
    result = sweep(config, workers)
    header = [
        "zeta", "theta", "status", "verdict", "n_embedded", "n_scattering",
        "n_inconclusive", "best_energy", "best_localization", "best_drift",
        "reason",
    ]
    rows = [
        [c.zeta, c.theta, c.status, c.verdict, c.n_embedded, c.n_scattering,
         c.n_inconclusive, c.best_energy, c.best_localization, c.best_drift,
         c.reason]
        for c in result.cells
    ]
    n_failed = sum(c.status == "failed" for c in result.cells)
    n_skipped = sum(c.status == "skipped" for c in result.cells)
    results = {
        "zeta_values": list(result.zeta_values),
        "theta_values": list(result.theta_values),
        "n_failed": n_failed,
        "n_skipped": n_skipped,
        "cells": [asdict(c) for c in result.cells],
    }
    plots = {
        "phase_map": (
            ["zeta", "theta", "verdict"],
            [[c.zeta, c.theta, c.verdict] for c in result.cells],
        )
    }
    outcome = _Outcome(results, header, rows, plots)
    if n_failed == len(result.cells):
        outcome.status = "failed"
        outcome.reason = "all_cells_failed"
    elif n_failed > 0:
        outcome.status = "partial"
        outcome.reason = f"{n_failed} of {len(result.cells)} cells failed"
    return outcome


_HANDLERS = {
    "spectrum": _run_spectrum,
    "decay": _run_decay,
    "mourre": _run_mourre,
    "lap": _run_lap,
    "hypothesis": _run_hypothesis,
    "hscheck": _run_hscheck,
    "regularity": _run_regularity,
    "scan": _run_scan,
}


def _scrub(obj):
    """Make a results payload strictly JSON-safe (finite numbers or strings)."""
    if isinstance(obj, dict):
        return {key: _scrub(val) for key, val in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_scrub(val) for val in obj]
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list], digest: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*header, "config_hash"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row] + [digest])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n",
        encoding="utf-8",
    )


def run(config: ExperimentConfig, workers: int | None = None) -> int:
    """Execute the config's experiment and write all artifacts.

    Returns the process exit code.  Numerical failures are caught, recorded
    in results.json with a machine-readable reason, and mapped to 3;
    a partially failed sweep still writes every row and maps to 4.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config_sha256": digest,
        "config": config_to_dict(config),
        "experiment": config.experiment,
        "status": "ok",
        "error": None,
        "results": {},
    }
    try:
        outcome = _HANDLERS[config.experiment](config, workers)
    except ConfigError:
        raise
    except Exception as exc:
        report["status"] = "failed"
        report["error"] = {
            "reason": "numerical_failure",
            "message": f"{type(exc).__name__}: {exc}",
        }
        _write_json(out_dir / "results.json", report)
        return EXIT_NUMERICAL

    report["results"] = _scrub(outcome.results)
    exit_code = EXIT_OK
    if outcome.status == "partial":
        report["status"] = "partial"
        report["error"] = {"reason": "partial_sweep", "message": outcome.reason}
        exit_code = EXIT_PARTIAL
    elif outcome.status == "failed":
        report["status"] = "failed"
        report["error"] = {"reason": outcome.reason, "message": outcome.reason}
        exit_code = EXIT_NUMERICAL

    _write_json(out_dir / "results.json", report)
    _write_csv(out_dir / "results.csv", outcome.header, outcome.rows, digest)
    if outcome.plots:
        plot_dir = out_dir / "plotdata"
        plot_dir.mkdir(exist_ok=True)
        for name, (header, rows) in outcome.plots.items():
            _write_csv(plot_dir / f"{name}.csv", header, rows, digest)
    return exit_code
