"""
pipeline.py: the romstab experiment sequence.

    simulate -> pod -> rom -> tune -> summary  (+ report)

Each stage writes its artifacts into the run directory and records itself in
MANIFEST.json.  A failing stage is logged with its traceback, recorded as
failed, and stops the run; artifacts of completed stages are kept.

``report`` works on a finished run directory only and re-derives the
plot-ready CSVs and REPORT.md from the stored artifacts.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from jinja2 import Environment, FileSystemLoader

import config as cfgmod
import store
from config import ClosureSettings, ExperimentConfig
from mes import (CostTrace, TuneResult, closure_from_params, cost_breakdown,
                 lagrange_stability_check, lipschitz_estimate, tune)
from models.base import SnapshotSet, TruthModel, build_model, collect_snapshots, simulate
from pod import (PodBasis, compute_basis, compute_basis_blocked, energy_fraction,
                 field_error_energy, mean_projection_error, project_snapshots)
from rom import (BoundKind, ClosureConfig, QuadraticRom, assemble, bound_from_rom,
                 bound_violations, integrate_rom, rescale_viscosity, sample_theorem_check)
from timestep import TIME_RTOL, Trajectory

log = logging.getLogger(__name__)

ROOT = Path(__file__).parent
TEMPLATES = ROOT / "templates"

STAGES = ("simulate", "pod", "rom", "tune")
STOP_AFTER = {"simulate": "simulate", "pod": "pod", "rom": "rom", "tune": "tune", "run": "tune"}

THEOREM_SAMPLES = 1000
EARLY_ITERATION = 20

REPORT_INPUTS = ("config.json", "basis.json", "basis.csv", "base_state.csv",
                 "truth_coeffs.csv", "nominal_coeffs.csv", "tuned_coeffs.csv",
                 "trace.csv", "summary.json", "MANIFEST.json")


class StageFailed(RuntimeError):
    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed")


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, run_dir: Path, missing: list[str]):
        self.missing = missing
        super().__init__(f"{run_dir} is missing: {', '.join(missing)}")


@dataclass
class Run:
    """Everything the stages hand to each other."""

    cfg: ExperimentConfig
    out: Path
    manifest: store.Manifest
    use_cache: bool = False
    model: TruthModel | None = None
    snapshots: SnapshotSet | None = None
    basis: PodBasis | None = None
    rom: QuadraticRom | None = None
    truth_proj: Trajectory | None = None
    nominal: Trajectory | None = None
    q_nominal: dict[str, float] = field(default_factory=dict)
    closure: ClosureConfig | None = None
    result: TuneResult | None = None
    tuned: Trajectory | None = None
    q_tuned: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Error traces
# ---------------------------------------------------------------------------

def error_trace(truth_proj: Trajectory, traj: Trajectory,
                basis: PodBasis) -> tuple[list[str], list[list[float]]]:
    """Squared error per time in coefficient and field space, with its running integral.

    A blown-up trajectory is compared over the times it reached.
    """
    scale = max(1.0, abs(truth_proj.t_final))
    keep = truth_proj.times <= traj.t_final + TIME_RTOL * scale
    times = truth_proj.times[keep]
    blocks = basis.mode_blocks()
    header = ["t", "err_total"]
    if len(blocks) > 1:
        header += [f"err_{name}" for name, _ in blocks]
    header += ["err_field", "cumulative"]
    if times.size == 0:
        return header, []

    err = truth_proj.states[:, keep] - traj.at_times(times).states
    total = np.sum(err * err, axis=0)
    field_err = field_error_energy(basis, err)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (total[1:] + total[:-1]) * np.diff(times))])

    rows = []
    for k, t in enumerate(times):
        row = [float(t), float(total[k])]
        if len(blocks) > 1:
            row += [float(np.sum(err[sl, k] ** 2)) for _, sl in blocks]
        row += [float(field_err[k]), float(cumulative[k])]
        rows.append(row)
    return header, rows


def write_error_trace(path: Path, truth_proj: Trajectory, traj: Trajectory,
                      basis: PodBasis) -> None:
    header, rows = error_trace(truth_proj, traj, basis)
    store.write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_simulate(run: Run) -> list[str]:
    t = run.cfg.truth
    run.model = build_model(t.model, t.model_params(), t.seed)
    digest = store.digest(run.cfg.digest_source())
    if run.use_cache:
        run.snapshots = store.load_cached_snapshots(run.out, digest)
        if run.snapshots is not None:
            return ["snapshots.csv", "snapshots.json"]

    z0 = run.model.initial_state(t.z0, t.amplitude, t.seed)
    traj = simulate(run.model, z0, None, t.t_f, t.dt)
    run.snapshots = collect_snapshots(traj, run.cfg.pod.stride)
    store.save_snapshots(run.out, run.snapshots, digest)
    return ["snapshots.csv", "snapshots.json"]


def stage_pod(run: Run) -> list[str]:
    p = run.cfg.pod
    S = run.snapshots
    if p.blocked:
        run.basis = compute_basis_blocked(S, p.r_v, p.r_T, p.subtract_mean)
    else:
        run.basis = compute_basis(S, p.r, p.subtract_mean)
    b = run.basis
    log.info("Basis: r=%d blocks=%s energy=%.6f", b.r, dict(b.block_ranks) or "-",
             energy_fraction(b))
    store.save_basis(run.out, b)
    return ["basis.csv", "basis.json", "base_state.csv"]


def stage_rom(run: Run) -> list[str]:
    run.rom = assemble(run.model, run.basis)
    factor = run.cfg.pod.mu_factor
    if factor != 1.0:
        run.rom = rescale_viscosity(run.rom, factor)
        log.info("ROM viscosity set to %.4g x mu = %.6g", factor, run.rom.mu)
    store.save_rom(run.out, run.rom)

    run.truth_proj = project_snapshots(run.basis, run.snapshots)
    store.save_trajectory(run.out / "truth_coeffs.csv", run.truth_proj)

    q0 = run.truth_proj.states[:, 0]
    run.nominal = integrate_rom(run.rom, None, q0, run.truth_proj.t_final, run.cfg.truth.dt)
    store.save_trajectory(run.out / "nominal_coeffs.csv", run.nominal)
    run.q_nominal = cost_breakdown(run.truth_proj, run.nominal, run.basis.mode_blocks(),
                                   run.cfg.mes.q_penalty)
    write_error_trace(run.out / "error_nominal.csv", run.truth_proj, run.nominal, run.basis)
    log.info("Nominal ROM: Q=%.6g %s", run.q_nominal["total"],
             "stable" if run.nominal.stable else f"blew up at t={run.nominal.blowup_time:.4g}")
    return ["rom.json", "truth_coeffs.csv", "nominal_coeffs.csv", "error_nominal.csv"]


def base_closure(rom: QuadraticRom, settings: ClosureSettings) -> ClosureConfig:
    """The closure bound (before tuning) for this ROM.

    A configured bound that does not cover |F~(q)| is replaced, with a
    warning, by the affine bound derived from the ROM.
    """
    if settings.bound_from_rom:
        consts = bound_from_rom(rom, settings.c_max)
        kind = settings.bound_kind
        if consts["e_max"] > 0 or consts["l_max"] > 0:
            kind = BoundKind.AFFINE_PLUS_QUADRATIC
        return ClosureConfig(bound_kind=kind, **consts)

    cfg = ClosureConfig(c_max=settings.c_max, l_max=settings.l_max, e_max=settings.e_max,
                        bound_kind=settings.bound_kind)
    problems = bound_violations(rom, cfg)
    if not problems:
        return cfg
    log.warning("Configured closure bound does not cover the ROM (%s); "
                "using the affine bound from the ROM", "; ".join(problems))
    return ClosureConfig(bound_kind=BoundKind.AFFINE_PLUS_QUADRATIC,
                         **bound_from_rom(rom, settings.c_max))


def stage_tune(run: Run) -> list[str]:
    mcfg = run.cfg.mes
    base = base_closure(run.rom, run.cfg.closure)
    incumbent = None
    if run.nominal.stable:
        incumbent = ({name: 0.0 for name in mcfg.names}, run.q_nominal["total"])

    run.result = tune(run.rom, run.truth_proj, mcfg, dt=run.cfg.truth.dt,
                      closure=base, incumbent=incumbent)
    run.closure = closure_from_params(run.rom, base, run.result.best_params)
    q0 = run.truth_proj.states[:, 0]
    run.tuned = integrate_rom(run.rom, run.closure, q0, run.truth_proj.t_final,
                              run.cfg.truth.dt)
    run.q_tuned = cost_breakdown(run.truth_proj, run.tuned, run.basis.mode_blocks(),
                                 mcfg.q_penalty)

    store.save_trace(run.out / "trace.csv", run.result.trace)
    store.save_trajectory(run.out / "tuned_coeffs.csv", run.tuned)
    write_error_trace(run.out / "error_tuned.csv", run.truth_proj, run.tuned, run.basis)
    store.write_json(run.out / "tuner_config.json", {
        **{k: (list(v) if isinstance(v, tuple) else v)
           for k, v in dataclasses.asdict(mcfg).items()},
        "stop_reason": run.result.stop_reason,
    })
    log.info("Tuned closure %s: Q=%.6g (nominal %.6g)",
             run.result.best_params, run.q_tuned["total"], run.q_nominal["total"])
    return ["trace.csv", "tuned_coeffs.csv", "error_tuned.csv", "tuner_config.json"]


STAGE_RUNNERS = {
    "simulate": stage_simulate,
    "pod": stage_pod,
    "rom": stage_rom,
    "tune": stage_tune,
}


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

def _clean(value: Any) -> Any:
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def early_drop_ratio(trace: CostTrace, k: int = EARLY_ITERATION) -> float | None:
    """Windowed mean of Q around iteration k relative to Q at iteration 0."""
    q = trace.costs()
    if q.size <= k or not q[0] > 0:
        return None
    return float(np.mean(q[max(0, k - 4):k + 1]) / q[0])


def summarize(run: Run) -> dict[str, Any]:
    b, rom, result = run.basis, run.rom, run.result
    q_nom, q_tun = run.q_nominal["total"], run.q_tuned["total"]
    lam = b.all_eigenvalues[b.all_eigenvalues > 0]
    discarded = float(np.sum(lam) - np.sum(b.eigenvalues))
    proj_err = mean_projection_error(b, run.snapshots)
    _, nominal_rows = error_trace(run.truth_proj, run.nominal, b)
    _, tuned_rows = error_trace(run.truth_proj, run.tuned, b)
    theorem = sample_theorem_check(rom, run.closure, THEOREM_SAMPLES,
                                   np.random.default_rng(run.cfg.truth.seed))

    return _clean({
        "name": run.cfg.name,
        "r": b.r,
        "block_ranks": {name: rb for name, rb in b.block_ranks},
        "energy_fraction": energy_fraction(b),
        "Q_nominal": q_nom,
        "Q_tuned": q_tun,
        "Q_nominal_blocks": {k: v for k, v in run.q_nominal.items() if k != "total"},
        "Q_tuned_blocks": {k: v for k, v in run.q_tuned.items() if k != "total"},
        "improvement_ratio": q_nom / q_tun if q_tun > 0 else None,
        "mu_opt": result.best_params,
        "bound": {
            "kind": run.closure.bound_kind.value,
            "c_max": run.closure.c_max,
            "l_max": run.closure.l_max,
            "e_max": run.closure.e_max,
        },
        "rom_mu": rom.mu,
        "iterations": len(result.trace) - 1,
        "stop_reason": result.stop_reason,
        "stability": {
            "nominal": lagrange_stability_check(run.nominal),
            "nominal_blowup_time": run.nominal.blowup_time,
            "tuned": lagrange_stability_check(run.tuned),
            "tuned_blowup_time": run.tuned.blowup_time,
        },
        "checks": {
            "orthonormality_residual": float(np.max(np.abs(b.gram() - np.eye(b.r)))),
            "projection_error": proj_err,
            "discarded_energy": discarded,
            "lambda_max_D": rom.lambda_max_D,
            "early_drop_ratio": early_drop_ratio(result.trace),
            "lipschitz_estimate": lipschitz_estimate(result.trace),
            "error_integral_nominal": nominal_rows[-1][-1] if nominal_rows else None,
            "error_integral_tuned": tuned_rows[-1][-1] if tuned_rows else None,
            "theorem": theorem,
        },
    })


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, out: Path, *, until: str = "run",
                 use_cache: bool = False, with_report: bool = True) -> dict[str, Any]:
    """Run the stages up to ``until`` (a subcommand name) in ``out``.

    Returns the summary for a full run, an empty dict otherwise.  Raises
    ``StageFailed`` after recording the failure in the manifest.
    """
    cfgmod.validate(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.json")

    run = Run(cfg=cfg, out=out, manifest=store.Manifest(out), use_cache=use_cache)
    run.manifest.record("config", "ok", ["config.json"])
    last = STOP_AFTER[until]

    for name in STAGES:
        log.info("=== Stage: %s ===", name)
        try:
            files = STAGE_RUNNERS[name](run)
        except Exception as exc:
            log.exception("Stage %s failed", name)
            run.manifest.record(name, "failed", [], error=str(exc))
            raise StageFailed(name) from exc
        run.manifest.record(name, "ok", files)
        if name == last:
            break

    if until != "run":
        return {}

    summary = summarize(run)
    store.write_json(out / "summary.json", summary)
    run.manifest.record("summary", "ok", ["summary.json"])
    if with_report:
        try:
            files = report(out)
        except Exception as exc:
            log.exception("Report failed")
            run.manifest.record("report", "failed", [], error=str(exc))
            raise StageFailed("report") from exc
        run.manifest.record("report", "ok", files)
    log.info("Run complete -> %s/", out)
    return summary


def _iteration_rows(trace_header: list[str], table: np.ndarray, column: str) -> list[list[Any]]:
    j = trace_header.index(column)
    return [[int(row[0]), float(row[j])] for row in table]


def report(run_dir: Path) -> list[str]:
    """Plot-ready CSVs and REPORT.md from a finished run directory."""
    run_dir = Path(run_dir)
    missing = [name for name in REPORT_INPUTS if not (run_dir / name).exists()]
    if missing:
        raise MissingArtifactsError(run_dir, missing)

    basis = store.load_basis(run_dir)
    truth = store.load_trajectory(run_dir / "truth_coeffs.csv")
    nominal = store.load_trajectory(run_dir / "nominal_coeffs.csv")
    tuned = store.load_trajectory(run_dir / "tuned_coeffs.csv")
    header, table = store.load_trace_table(run_dir / "trace.csv")
    summary = store.read_json(run_dir / "summary.json")
    manifest = store.read_json(run_dir / "MANIFEST.json")
    cfg = cfgmod.load(run_dir / "config.json")

    written = []
    store.write_rows(run_dir / "cost_vs_iter.csv", ["k", "Q", "stable"],
                     ([int(row[0]), float(row[header.index("Q")]), int(row[-1])] for row in table))
    written.append("cost_vs_iter.csv")
    for name in cfg.mes.names:
        fname = f"{name}_vs_iter.csv"
        store.write_rows(run_dir / fname, ["k", f"{name}_hat"],
                         _iteration_rows(header, table, f"{name}_hat"))
        written.append(fname)
    for label, traj in (("nominal", nominal), ("tuned", tuned)):
        fname = f"error_{label}.csv"
        write_error_trace(run_dir / fname, truth, traj, basis)
        written.append(fname)

    env = Environment(loader=FileSystemLoader(str(TEMPLATES)), autoescape=False,
                      keep_trailing_newline=True)
    text = env.get_template("report.md.j2").render(
        name=cfg.name,
        cfg=cfg.to_dict(),
        summary=summary,
        stages=[s for s in manifest["stages"] if s["stage"] != "report"],
        iterations=len(table) - 1,
        first_Q=float(table[0, header.index("Q")]) if len(table) else None,
        files=sorted(written + list(REPORT_INPUTS) + ["REPORT.md"]),
    )
    (run_dir / "REPORT.md").write_text(text)
    written.append("REPORT.md")
    log.info("Report written to %s", run_dir / "REPORT.md")
    return written


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _sweep_job(cfg_dict: dict[str, Any], out: str) -> dict[str, Any]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    summary = run_pipeline(cfg, Path(out))
    return {"Q_nominal": summary.get("Q_nominal"), "Q_tuned": summary.get("Q_tuned")}


def run_sweep(cfg: ExperimentConfig, overrides: list[dict[str, Any]], out: Path,
              workers: int | None = None) -> int:
    """Fan independent runs out to a process pool; returns the number that failed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for index, item in enumerate(overrides):
        run_cfg = cfgmod.validate(cfgmod.with_overrides(cfg, item))
        jobs.append((cfgmod.sweep_label(index, item), run_cfg))

    workers = workers or cfgmod.WORKERS
    log.info("Sweep: %d runs on %d workers", len(jobs), workers)
    index_rows: list[dict[str, Any]] = []
    failed = 0
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures: dict[str, concurrent.futures.Future] = {
            label: pool.submit(_sweep_job, run_cfg.to_dict(), str(out / label))
            for label, run_cfg in jobs
        }
        for label, fut in futures.items():
            try:
                index_rows.append({"run": label, "status": "ok", **fut.result()})
            except Exception:
                log.exception("Sweep run %s failed", label)
                index_rows.append({"run": label, "status": "failed"})
                failed += 1
    store.write_json(out / "sweep.json", _clean(index_rows))
    log.info("Sweep complete: %d ok, %d failed", len(jobs) - failed, failed)
    return failed
