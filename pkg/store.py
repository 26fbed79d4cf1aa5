"""
CSV/JSON persistence for every romstab artifact.

Floats are written with repr(), the shortest decimal that round-trips, so
loading a file gives back bitwise-identical arrays.  JSON is written with a
fixed indent and key order so identical runs produce identical bytes.

Files:
  snapshots.csv  + snapshots.json   t,x_0..x_{n-1}   / {n, s, h, weights, blocks}
  basis.csv      + basis.json       mode_0..mode_{r-1} / {r, r_v, r_T, lambdas, ...}
  base_state.csv                    z_bar
  rom.json                          {r, mu, e, L, D, C}
  *_coeffs.csv                      t,q_0..q_{r-1}
  trace.csv                         k,<name>_hat...,Q,stable
  MANIFEST.json                     stage status of a run
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from mes import CostTrace
from models.base import SnapshotSet
from pod import PodBasis
from rom import QuadraticRom
from timestep import Trajectory

log = logging.getLogger(__name__)


def fmt(x: float) -> str:
    return repr(float(x))


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text())


def write_rows(path: Path, header: list[str], rows: Iterable[Iterable[Any]]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_rows(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    return header, np.array(data, dtype=float).reshape(len(data), len(header))


def digest(obj: Any) -> str:
    """Short content hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def save_snapshots(out: Path, S: SnapshotSet, config_digest: str = "") -> None:
    header = ["t"] + [f"x_{i}" for i in range(S.n)]
    write_rows(out / "snapshots.csv", header,
               ([float(t)] + [float(v) for v in S.states[:, j]] for j, t in enumerate(S.times)))
    uniform = bool(np.all(S.weights == S.weights[0]))
    meta = {
        "n": S.n,
        "s": S.s,
        "h": float(S.weights[0]) if uniform else None,
        "weights": "uniform" if uniform else [float(w) for w in S.weights],
        "blocks": [{"name": b, "start": lo, "stop": hi} for b, lo, hi in S.blocks],
    }
    if config_digest:
        meta["config_digest"] = config_digest
    write_json(out / "snapshots.json", meta)
    log.info("Saved %d snapshots (n=%d) to %s", S.s, S.n, out)


def load_snapshots(out: Path) -> SnapshotSet:
    meta = read_json(out / "snapshots.json")
    _, data = read_rows(out / "snapshots.csv")
    n = int(meta["n"])
    weights = (np.full(n, float(meta["h"])) if meta["weights"] == "uniform"
               else np.array(meta["weights"], dtype=float))
    return SnapshotSet(
        states=data[:, 1:].T,
        times=data[:, 0],
        weights=weights,
        blocks=tuple((b["name"], b["start"], b["stop"]) for b in meta["blocks"]),
    )


def load_cached_snapshots(out: Path, config_digest: str) -> SnapshotSet | None:
    """Return stored snapshots if they were produced by the same truth config."""
    meta_file = out / "snapshots.json"
    if not meta_file.exists():
        return None
    stored = read_json(meta_file).get("config_digest")
    if stored != config_digest:
        log.info("Snapshot cache in %s is stale (digest %s != %s), re-simulating",
                 out, stored, config_digest)
        return None
    log.info("Using cached snapshots from %s", out)
    return load_snapshots(out)


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------

def save_basis(out: Path, b: PodBasis) -> None:
    write_rows(out / "basis.csv", [f"mode_{i}" for i in range(b.r)],
               (list(map(float, row)) for row in b.modes))
    write_rows(out / "base_state.csv", ["z_bar"], ([float(v)] for v in b.base_state))
    uniform = bool(np.all(b.weights == b.weights[0]))
    write_json(out / "basis.json", {
        "r": b.r,
        "r_v": b.r_v,
        "r_T": b.r_T,
        "lambdas": [float(v) for v in b.eigenvalues],
        "all_lambdas": [float(v) for v in b.all_eigenvalues],
        "effective_rank": b.effective_rank,
        "subtract_mean": b.subtract_mean,
        "base_state_file": "base_state.csv",
        "weights": "uniform" if uniform else [float(w) for w in b.weights],
        "h": float(b.weights[0]) if uniform else None,
        "block_ranks": [[name, rb] for name, rb in b.block_ranks],
    })


def load_basis(out: Path) -> PodBasis:
    meta = read_json(out / "basis.json")
    _, modes = read_rows(out / "basis.csv")
    _, zbar = read_rows(out / meta["base_state_file"])
    n = modes.shape[0]
    weights = (np.full(n, float(meta["h"])) if meta["weights"] == "uniform"
               else np.array(meta["weights"], dtype=float))
    return PodBasis(
        modes=modes,
        eigenvalues=np.array(meta["lambdas"], dtype=float),
        base_state=zbar[:, 0],
        weights=weights,
        block_ranks=tuple((name, int(rb)) for name, rb in meta["block_ranks"]),
        subtract_mean=bool(meta["subtract_mean"]),
        all_eigenvalues=np.array(meta["all_lambdas"], dtype=float),
        effective_rank=int(meta["effective_rank"]),
    )


# ---------------------------------------------------------------------------
# ROM, trajectories, traces
# ---------------------------------------------------------------------------

def save_rom(out: Path, rom: QuadraticRom) -> None:
    write_json(out / "rom.json", {
        "r": rom.r,
        "mu": rom.mu,
        "basis_ref": rom.basis_ref,
        "block_ranks": [[name, rb] for name, rb in rom.block_ranks],
        "e": rom.e.tolist(),
        "L": rom.L.tolist(),
        "D": rom.D.tolist(),
        "C": rom.C.tolist(),
    })


def load_rom(out: Path) -> QuadraticRom:
    meta = read_json(out / "rom.json")
    return QuadraticRom(
        e=np.array(meta["e"], dtype=float),
        L=np.array(meta["L"], dtype=float),
        D=np.array(meta["D"], dtype=float),
        C=np.array(meta["C"], dtype=float),
        mu=float(meta["mu"]),
        basis_ref=meta.get("basis_ref", ""),
        block_ranks=tuple((name, int(rb)) for name, rb in meta.get("block_ranks", [])),
    )


def save_trajectory(path: Path, traj: Trajectory, prefix: str = "q") -> None:
    header = ["t"] + [f"{prefix}_{i}" for i in range(traj.dim)]
    write_rows(path, header,
               ([float(t)] + [float(v) for v in traj.states[:, k]]
                for k, t in enumerate(traj.times)))


def load_trajectory(path: Path) -> Trajectory:
    _, data = read_rows(path)
    return Trajectory(times=data[:, 0], states=data[:, 1:].T)


def save_trace(path: Path, trace: CostTrace) -> None:
    header = ["k"] + [f"{n}_hat" for n in trace.names] + ["Q", "stable"]
    write_rows(path, header, (
        [r.k] + [float(v) for v in r.mu_hat] + [float(r.Q), int(r.stable)]
        for r in trace.records
    ))


def load_trace_table(path: Path) -> tuple[list[str], np.ndarray]:
    return read_rows(path)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    """Stage-by-stage status of a run directory, rewritten after every stage."""

    out: Path
    stages: list[dict[str, Any]] = field(default_factory=list)
    failed_stage: str | None = None

    def record(self, stage: str, status: str, files: list[str], error: str = "") -> None:
        entry: dict[str, Any] = {"stage": stage, "status": status, "files": sorted(files)}
        if error:
            entry["error"] = error
        self.stages.append(entry)
        if status == "failed" and self.failed_stage is None:
            self.failed_stage = stage
        self.write()

    def write(self) -> None:
        write_json(self.out / "MANIFEST.json", {
            "failed_stage": self.failed_stage,
            "stages": self.stages,
        })
