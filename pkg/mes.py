"""
Multi-parametric extremum seeking (MES) for the closure amplitudes.

Discrete update for every tuned parameter i:

    y_i(k+1)  = y_i(k) + g * a_i * dt * sin(w_i k dt + pi/2) * Q(mu_hat(k))
    mu_hat_i(k) = y_i(k) + a_i * sin(w_i k dt - pi/2)

with y_i(0) = 0 and g the integrator gain.  Parameters live in O(1)
internal units; the closure sees offset_i + scale_i * mu_hat_i.  Averaged
over a dither period the update follows -g * a_i^2 / 2 * dQ/dmu_i, so the
step must satisfy w_i * dt < pi/2.

The learning cost is the squared coefficient-space error between the
projected truth and the ROM integrated over the snapshot horizon.  A ROM
that blows up is charged ``q_penalty``.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rom import ClosureConfig, QuadraticRom, integrate_rom
from timestep import BLOWUP_NORM, Trajectory

log = logging.getLogger(__name__)

Q_PENALTY = 1e12
MU_CL_FLOOR = 1e-3        # mu + mu_e >= MU_CL_FLOOR * mu
RESONANCE_RTOL = 1e-6


class TuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class MesConfig:
    names: tuple[str, ...] = ("mu_e", "mu_nl")
    a: tuple[float, ...] = (0.08, 0.1)
    omega: tuple[float, ...] = (10.0, 50.0)
    dt: float = math.pi / 200
    scale: tuple[float, ...] = (1.0, 1e-6)
    offset: tuple[float, ...] = (0.0, 0.0)
    gain: float = 1.0
    normalize: bool = False
    q_clip: float | None = None
    k_max: int = 100
    q_penalty: float = Q_PENALTY
    window: int = 50
    rel_tol: float = 1e-4
    log_every: int = 10

    def __post_init__(self) -> None:
        for name in ("names", "a", "omega", "scale", "offset"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def p(self) -> int:
        return len(self.names)

    def problems(self) -> list[tuple[str, str]]:
        """(field, message) for every violated constraint."""
        out: list[tuple[str, str]] = []
        p = self.p
        if p < 1:
            out.append(("names", "at least one parameter must be tuned"))
        for name in ("a", "omega", "scale", "offset"):
            if len(getattr(self, name)) != p:
                out.append((name, f"needs {p} entries, one per tuned parameter"))
        if len(set(self.names)) != p:
            out.append(("names", "parameter names must be unique"))
        if not self.dt > 0:
            out.append(("dt", "learning step must be positive"))
        for i, ai in enumerate(self.a):
            if not ai > 0:
                out.append((f"a[{i}]", "dither amplitudes must be positive"))
        for i, wi in enumerate(self.omega):
            if not wi > 0:
                out.append((f"omega[{i}]", "frequencies must be positive"))
            elif self.dt > 0 and wi * self.dt >= math.pi / 2:
                out.append((f"omega[{i}]", f"omega*dt = {wi * self.dt:.3g} must stay below pi/2"))
        if len(set(self.omega)) != len(self.omega):
            out.append(("omega", "frequencies must be pairwise distinct"))
        for i, si in enumerate(self.scale):
            if not si > 0:
                out.append((f"scale[{i}]", "scales must be positive"))
        if not self.gain > 0:
            out.append(("gain", "must be positive"))
        if self.k_max < 1:
            out.append(("k_max", "must be at least 1"))
        if not self.q_penalty > 0:
            out.append(("q_penalty", "must be positive"))
        if self.q_clip is not None and not self.q_clip > 0:
            out.append(("q_clip", "must be positive when set"))
        if self.window < 1:
            out.append(("window", "must be at least 1"))
        if not self.rel_tol > 0:
            out.append(("rel_tol", "must be positive"))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            field_name, msg = problems[0]
            raise ValueError(f"mes.{field_name}: {msg}")
        if not is_non_resonant(self.omega):
            log.warning("Dither frequencies %s are resonant; averaging may bias the estimate",
                        self.omega)


# ---------------------------------------------------------------------------
# Frequencies
# ---------------------------------------------------------------------------

def _combinations(omegas: tuple[float, ...]) -> list[float]:
    vals = list(omegas) + [2.0 * w for w in omegas]
    for wi, wj in itertools.combinations(omegas, 2):
        vals += [wi + wj, abs(wi - wj)]
    return vals


def is_non_resonant(omegas: tuple[float, ...] | list[float]) -> bool:
    """w_i, 2 w_i and w_i +- w_j all pairwise distinct."""
    vals = sorted(_combinations(tuple(omegas)))
    return all(b - a > RESONANCE_RTOL * max(b, 1.0) for a, b in zip(vals, vals[1:]))


def choose_frequencies(p: int, dt: float) -> tuple[float, ...]:
    """Greedy non-resonant frequencies below the sampling limit pi / (2 dt)."""
    cap = math.pi / (2.0 * dt)
    base = cap / (3 * p + 2)
    chosen: list[float] = []
    m = 1
    while len(chosen) < p:
        w = base * m
        if w >= cap:
            raise ValueError(f"cannot place {p} non-resonant frequencies below {cap:.4g}")
        if is_non_resonant(chosen + [w]):
            chosen.append(w)
        m += 1
    return tuple(chosen)


# ---------------------------------------------------------------------------
# State and update
# ---------------------------------------------------------------------------

@dataclass
class MesState:
    """Single-owner MES state; ``mes_step`` mutates it in place."""

    y: np.ndarray
    a: np.ndarray
    omega: np.ndarray
    dt: float
    scale: np.ndarray
    offset: np.ndarray
    gain: float = 1.0
    k: int = 0
    mu_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: list[tuple[int, np.ndarray, float]] = field(default_factory=list)

    @classmethod
    def start(cls, cfg: MesConfig) -> "MesState":
        cfg.validate()
        a = np.array(cfg.a, dtype=float)
        state = cls(
            y=np.zeros(cfg.p),
            a=a,
            omega=np.array(cfg.omega, dtype=float),
            dt=float(cfg.dt),
            scale=np.array(cfg.scale, dtype=float),
            offset=np.array(cfg.offset, dtype=float),
            gain=float(cfg.gain),
        )
        state.mu_hat = state.y + state.dither(0)
        return state

    def dither(self, k: int) -> np.ndarray:
        return self.a * np.sin(self.omega * k * self.dt - math.pi / 2)

    def physical(self) -> np.ndarray:
        return self.offset + self.scale * self.mu_hat


def mes_step(state: MesState, Q: float) -> MesState:
    if not math.isfinite(Q):
        raise ValueError(f"MES cost must be finite, got {Q}")
    phase = state.omega * state.k * state.dt
    state.trace.append((state.k, state.mu_hat.copy(), float(Q)))
    state.y = state.y + state.gain * state.a * state.dt * np.sin(phase + math.pi / 2) * Q
    state.k += 1
    state.mu_hat = state.y + state.dither(state.k)
    return state


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------

def _aligned(truth_proj: Trajectory, rom_traj: Trajectory) -> Trajectory:
    if truth_proj.dim != rom_traj.dim:
        raise ValueError(
            f"truth has {truth_proj.dim} coefficients, ROM trajectory has {rom_traj.dim}"
        )
    if len(rom_traj) == len(truth_proj) and np.array_equal(rom_traj.times, truth_proj.times):
        return rom_traj
    try:
        return rom_traj.at_times(truth_proj.times)
    except ValueError as exc:
        raise ValueError("mismatched time grids between truth and ROM trajectories") from exc


def cost_breakdown(truth_proj: Trajectory, rom_traj: Trajectory,
                   blocks: list[tuple[str, slice]] | None = None,
                   q_penalty: float = Q_PENALTY) -> dict[str, float]:
    """Per-block integrals of |q_true - q_rom|^2 plus their total."""
    blocks = blocks or [("all", slice(0, truth_proj.dim))]
    if not lagrange_stability_check(rom_traj):
        out = {name: q_penalty for name, _ in blocks}
        out["total"] = q_penalty
        return out
    rom_traj = _aligned(truth_proj, rom_traj)
    err = truth_proj.states - rom_traj.states
    out: dict[str, float] = {}
    for name, sl in blocks:
        out[name] = float(np.trapezoid(np.sum(err[sl] ** 2, axis=0), truth_proj.times))
    out["total"] = float(np.trapezoid(np.sum(err ** 2, axis=0), truth_proj.times))
    return out


def cost_Q(truth_proj: Trajectory, rom_traj: Trajectory,
           q_penalty: float = Q_PENALTY) -> float:
    return cost_breakdown(truth_proj, rom_traj, q_penalty=q_penalty)["total"]


def lagrange_stability_check(trajectory: Trajectory | np.ndarray) -> bool:
    """True iff every value is finite and sup |q(t)| stays below BLOWUP_NORM."""
    if isinstance(trajectory, Trajectory):
        if not trajectory.stable:
            return False
        states = trajectory.states
    else:
        states = np.asarray(trajectory, dtype=float)
    if states.size == 0:
        return True
    if not np.all(np.isfinite(states)):
        return False
    return bool(np.max(np.linalg.norm(states, axis=0)) < BLOWUP_NORM)


# ---------------------------------------------------------------------------
# Tuning loop
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    Q: float
    stable: bool = True
    blowup_time: float | None = None
    horizon: float = 1.0
    params: dict[str, float] = field(default_factory=dict)


@dataclass
class CostRecord:
    k: int
    mu_hat: np.ndarray      # physical units, before clamping
    Q: float
    stable: bool
    blowup_time: float | None
    params: dict[str, float]


@dataclass
class CostTrace:
    names: tuple[str, ...]
    records: list[CostRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def costs(self) -> np.ndarray:
        return np.array([r.Q for r in self.records])

    def estimates(self) -> np.ndarray:
        return np.array([r.mu_hat for r in self.records]).reshape(len(self.records), -1)

    def windowed_mean(self, k: int, window: int) -> float:
        q = self.costs()[max(0, k - window + 1):k + 1]
        return float(np.mean(q))

    def stable_records(self) -> list[CostRecord]:
        return [r for r in self.records if r.stable]


@dataclass
class StopRule:
    window: int = 50
    rel_tol: float = 1e-4

    def converged(self, trace: CostTrace) -> bool:
        w = self.window
        if len(trace) < 2 * w:
            return False
        q = trace.costs()
        new, old = float(np.mean(q[-w:])), float(np.mean(q[-2 * w:-w]))
        return abs(new - old) <= self.rel_tol * abs(old)


@dataclass
class TuneResult:
    best_params: dict[str, float]
    best_Q: float
    trace: CostTrace
    state: MesState
    stop_reason: str


def minimize(cost_fn: Callable[[np.ndarray], Evaluation], cfg: MesConfig,
             k_max: int | None = None, stop: StopRule | None = None,
             incumbent: tuple[dict[str, float], float] | None = None) -> TuneResult:
    """Run the MES loop on an arbitrary cost of the physical parameters.

    ``incumbent`` is an already-evaluated (params, Q) pair that the returned
    best must beat.
    """
    k_max = cfg.k_max if k_max is None else k_max
    if k_max < 1:
        raise ValueError(f"k_max must be at least 1, got {k_max}")
    stop = stop or StopRule(cfg.window, cfg.rel_tol)
    state = MesState.start(cfg)
    trace = CostTrace(cfg.names)
    best_params, best_Q = (dict(incumbent[0]), float(incumbent[1])) if incumbent else ({}, math.inf)
    q_ref: float | None = None
    reason = "k_max"

    for k in range(k_max + 1):
        phys = state.physical()
        ev = cost_fn(phys)
        params = ev.params or dict(zip(cfg.names, map(float, phys)))
        trace.records.append(CostRecord(k, phys.copy(), ev.Q, ev.stable, ev.blowup_time, params))
        if ev.stable and ev.Q < best_Q:
            best_params, best_Q = dict(params), ev.Q

        if k % cfg.log_every == 0 or k == k_max:
            log.info("MES k=%d Q=%.6g %s%s", k, ev.Q,
                     " ".join(f"{n}={v:.4g}" for n, v in params.items()),
                     "" if ev.stable else " (unstable)")
        if k == k_max:
            break
        if stop.converged(trace):
            reason = "converged"
            log.info("MES converged at k=%d (windowed-mean change < %g)", k, stop.rel_tol)
            break

        if ev.stable:
            if cfg.normalize and q_ref is None and ev.Q > 0:
                q_ref = ev.Q
            q_eff = ev.Q / q_ref if q_ref else ev.Q
        elif cfg.q_clip is not None:
            lived = (ev.blowup_time or 0.0) / ev.horizon if ev.horizon > 0 else 0.0
            q_eff = cfg.q_clip * (2.0 - min(max(lived, 0.0), 1.0))
        else:
            q_eff = cfg.q_penalty / q_ref if q_ref else cfg.q_penalty
        if cfg.q_clip is not None:
            q_eff = min(q_eff, 2.0 * cfg.q_clip)
        mes_step(state, q_eff)

    if not trace.stable_records():
        raise TuningError(
            "every MES evaluation produced an unstable ROM; "
            "increase the mu_e scale or offset so the search starts from a damped ROM"
        )
    return TuneResult(best_params, best_Q, trace, state, reason)


def closure_from_params(rom: QuadraticRom, base: ClosureConfig,
                        params: dict[str, float]) -> ClosureConfig:
    """Build the closure for a parameter vector, applying the positivity guards."""
    params = dict(params)
    if "mu_e" in params:
        params["mu_e"] = max(params["mu_e"], -(1.0 - MU_CL_FLOOR) * rom.mu)
    if "mu_nl" in params:
        params["mu_nl"] = max(params["mu_nl"], 0.0)
    return dataclasses.replace(base, **params)


def tune(rom: QuadraticRom, truth_proj: Trajectory, cfg: MesConfig, *,
         dt: float, closure: ClosureConfig | None = None, k_max: int | None = None,
         stop: StopRule | None = None,
         incumbent: tuple[dict[str, float], float] | None = None) -> TuneResult:
    """Offline MES tuning of the closure amplitudes against the projected truth.

    Every iteration integrates the stabilised ROM over the full snapshot
    horizon with step ``dt`` and charges ``cost_Q`` against ``truth_proj``.
    """
    closure = closure or ClosureConfig()
    q0 = truth_proj.states[:, 0]
    t_f = truth_proj.t_final

    def cost_fn(phys: np.ndarray) -> Evaluation:
        cl = closure_from_params(rom, closure, dict(zip(cfg.names, map(float, phys))))
        traj = integrate_rom(rom, cl, q0, t_f, dt)
        used = {n: float(getattr(cl, n)) for n in cfg.names}
        q = cost_Q(truth_proj, traj, cfg.q_penalty)
        return Evaluation(q, traj.stable, traj.blowup_time, t_f, used)

    log.info("Tuning %s with MES (k_max=%d, dt=%.4g)", ", ".join(cfg.names),
             cfg.k_max if k_max is None else k_max, cfg.dt)
    return minimize(cost_fn, cfg, k_max=k_max, stop=stop, incumbent=incumbent)


def lipschitz_estimate(trace: CostTrace) -> float:
    """max |dQ| / |d mu| over consecutive stable evaluations (a xi_2-like figure)."""
    best = 0.0
    for prev, cur in zip(trace.records, trace.records[1:]):
        if not (prev.stable and cur.stable):
            continue
        step = float(np.linalg.norm(cur.mu_hat - prev.mu_hat))
        if step > 0:
            best = max(best, abs(cur.Q - prev.Q) / step)
    return best
