"""
Quadratic Galerkin ROMs and the robust Lyapunov closure.

The ROM has the form

    q' = e + L q + mu D q + [C q] q

where D (the coefficient of the viscosity) is negative definite and
F~(q) = e + L q + [C q] q is everything else.  The stabilised ROM replaces
mu by mu_cl = mu + mu_e and adds the nonlinear closure

    H(q) = mu_nl * f~(q) * diag(d_11, ..., d_rr) q

where f~ bounds |F~(q)|.  Trajectories converge to the invariant set

    S = { q : mu_cl lam_max(D) |q| / f~(q) + mu_nl |q| max_i d_ii + 1 >= 0 }.

All right-hand sides accept a single (r,) state or an (m, r) batch.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from models.base import TruthModel
from pod import PodBasis, lambda_max_sym
from timestep import BLOWUP_NORM, Trajectory, integrate

log = logging.getLogger(__name__)

WEIGHT_RTOL = 1e-12
BOUND_RTOL = 1e-12


class BoundKind(str, enum.Enum):
    QUADRATIC_ONLY = "quadratic"
    AFFINE_PLUS_QUADRATIC = "affine"


@dataclass
class QuadraticRom:
    e: np.ndarray
    L: np.ndarray
    D: np.ndarray
    C: np.ndarray
    mu: float
    basis_ref: str = ""
    block_ranks: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        self.e = np.asarray(self.e, dtype=float)
        self.L = np.asarray(self.L, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        r = self.e.shape[0]
        if self.L.shape != (r, r) or self.D.shape != (r, r) or self.C.shape != (r, r, r):
            raise ValueError(f"ROM coefficients are not conformable with r={r}")
        if not self.mu > 0:
            raise ValueError(f"nominal mu must be positive, got {self.mu}")

    @property
    def r(self) -> int:
        return self.e.shape[0]

    @cached_property
    def lambda_max_D(self) -> float:
        return lambda_max_sym(self.D)

    @cached_property
    def d_max(self) -> float:
        return float(np.max(np.diag(self.D)))


@dataclass(frozen=True)
class ClosureConfig:
    mu_e: float = 0.0
    mu_nl: float = 0.0
    c_max: float = 10.0
    l_max: float = 0.0
    e_max: float = 0.0
    bound_kind: BoundKind = BoundKind.QUADRATIC_ONLY

    def __post_init__(self) -> None:
        if self.mu_nl < 0:
            raise ValueError(f"mu_nl must be non-negative, got {self.mu_nl}")
        if not self.c_max > 0:
            raise ValueError(f"c_max must be positive, got {self.c_max}")
        if self.l_max < 0 or self.e_max < 0:
            raise ValueError("l_max and e_max must be non-negative")
        object.__setattr__(self, "bound_kind", BoundKind(self.bound_kind))

    def mu_cl(self, rom: QuadraticRom) -> float:
        mu_cl = rom.mu + self.mu_e
        if mu_cl <= 0:
            raise ValueError(
                f"mu + mu_e = {mu_cl:g} must stay positive to keep the damping structure"
            )
        return mu_cl


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble(model: TruthModel, basis: PodBasis) -> QuadraticRom:
    """Galerkin-project the truth model onto the basis.

    Expanding F(zbar + Phi q) collects a constant term e (which also holds
    the nominal mu * D_n zbar), a linear term L (convection around zbar), the
    damping D and the quadratic tensor C.
    """
    if basis.n != model.n:
        raise ValueError(f"basis has n={basis.n}, truth model has n={model.n}")
    if not np.allclose(basis.weights, model.weights, rtol=WEIGHT_RTOL, atol=0.0):
        raise ValueError("basis weights do not match the truth model's inner product")

    Phi, zbar = basis.modes, basis.base_state
    Psi = basis.weights[:, None] * Phi
    r = basis.r

    f0 = (model.constant() + model.linear(zbar) + model.mu * model.diffusion(zbar)
          + model.quadratic(zbar, zbar))
    e = Psi.T @ f0

    Zbar = np.repeat(zbar[:, None], r, axis=1)
    L = Psi.T @ (model.linear(Phi) + model.quadratic(Zbar, Phi) + model.quadratic(Phi, Zbar))
    D = Psi.T @ model.diffusion(Phi)
    C = model.galerkin_quadratic(Phi, Psi)

    rom = QuadraticRom(e=e, L=L, D=D, C=C, mu=model.mu,
                       basis_ref=f"{model.kind}-r{r}", block_ranks=basis.block_ranks)
    if rom.lambda_max_D >= 0:
        raise ValueError(
            f"projected D is not negative definite (lambda_max={rom.lambda_max_D:.3g}); "
            "check that the basis weights match the model"
        )
    log.info("Assembled ROM r=%d: |e|=%.3g |L|=%.3g lam_max(D)=%.3g |C|_F=%.3g",
             r, np.linalg.norm(e), np.linalg.norm(L, 2) if r else 0.0,
             rom.lambda_max_D, np.sqrt(np.sum(C * C)))
    return rom


def perturb(rom: QuadraticRom, delta_C: np.ndarray) -> QuadraticRom:
    """The same ROM with C replaced by C + delta_C."""
    return replace(rom, C=rom.C + delta_C, basis_ref=f"{rom.basis_ref}+dC")


def random_perturbation(rom: QuadraticRom, c_max: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Random delta_C with |C + delta_C|_F <= c_max."""
    target = rom.C + rng.standard_normal(rom.C.shape)
    norm = np.sqrt(np.sum(target * target))
    limit = c_max * rng.uniform(0.5, 1.0)
    if norm > limit:
        target *= limit / norm
    return target - rom.C


def worst_case_perturbation(rom: QuadraticRom, q: np.ndarray, size: float) -> np.ndarray:
    """The delta_C with |delta_C|_F = size that injects the most energy at q.

    q . [delta_C q] q is at most size * |q|^3, reached by size * u (x) u (x) u
    with u = q / |q|.
    """
    q = _check_state(rom, q)
    nq = float(np.linalg.norm(q))
    if nq == 0.0:
        raise ValueError("the worst-case direction is undefined at q = 0")
    if not size >= 0:
        raise ValueError(f"perturbation size must be non-negative, got {size}")
    u = q / nq
    return size * np.einsum("i,j,k->ijk", u, u, u)


def rescale_viscosity(rom: QuadraticRom, factor: float) -> QuadraticRom:
    """The same ROM with the coefficient of D set to factor * mu.

    e, L and C are untouched, so mu_e = (1 - factor) * mu restores the
    original reduced dynamics exactly.
    """
    if not factor > 0:
        raise ValueError(f"viscosity factor must be positive, got {factor}")
    return replace(rom, mu=factor * rom.mu, basis_ref=f"{rom.basis_ref}@{factor:g}mu")


def bound_from_rom(rom: QuadraticRom, c_max: float | None = None) -> dict[str, float]:
    """Constants (e_max, l_max, c_max) making f~ a valid bound for this ROM."""
    c_rom = float(np.sqrt(np.sum(rom.C * rom.C)))
    return {
        "e_max": float(np.linalg.norm(rom.e)),
        "l_max": float(np.linalg.norm(rom.L, 2)),
        "c_max": max(c_rom, c_max or 0.0),
    }


def bound_violations(rom: QuadraticRom, cfg: ClosureConfig) -> list[str]:
    """Reasons why cfg's f~ does not bound |F~(q)| for this ROM (empty if it does)."""
    need = bound_from_rom(rom)
    slack = 1.0 + BOUND_RTOL
    out = []
    if cfg.c_max * slack < need["c_max"]:
        out.append(f"c_max={cfg.c_max:g} is below |C|_F={need['c_max']:.4g}")
    if cfg.bound_kind is BoundKind.QUADRATIC_ONLY:
        if need["e_max"] > 0:
            out.append(f"|e|={need['e_max']:.4g} needs the affine bound")
        if need["l_max"] > 0:
            out.append(f"|L|={need['l_max']:.4g} needs the affine bound")
    else:
        if cfg.e_max * slack < need["e_max"]:
            out.append(f"e_max={cfg.e_max:g} is below |e|={need['e_max']:.4g}")
        if cfg.l_max * slack < need["l_max"]:
            out.append(f"l_max={cfg.l_max:g} is below |L|={need['l_max']:.4g}")
    return out


# ---------------------------------------------------------------------------
# Right-hand sides
# ---------------------------------------------------------------------------

def _check_state(rom: QuadraticRom, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != rom.r:
        raise ValueError(f"state has length {q.shape[-1]}, ROM has r={rom.r}")
    if not np.all(np.isfinite(q)):
        raise ValueError("ROM state contains non-finite values")
    return q


def _quad(C: np.ndarray, q: np.ndarray) -> np.ndarray:
    if q.ndim == 1:
        return (C @ q) @ q
    return np.einsum("ijk,mj,mk->mi", C, q, q)


def _f_tilde(rom: QuadraticRom, q: np.ndarray) -> np.ndarray:
    return rom.e + q @ rom.L.T + _quad(rom.C, q)


def bound_value(cfg: ClosureConfig, q: np.ndarray) -> np.ndarray | float:
    """f~(q): c_max |q|^2, or e_max + l_max |q| + c_max |q|^2."""
    nq = np.linalg.norm(q, axis=-1)
    value = cfg.c_max * nq * nq
    if cfg.bound_kind is BoundKind.AFFINE_PLUS_QUADRATIC:
        value = value + cfg.l_max * nq + cfg.e_max
    return value


def rhs_nominal(rom: QuadraticRom, q: np.ndarray) -> np.ndarray:
    q = _check_state(rom, q)
    return _f_tilde(rom, q) + rom.mu * (q @ rom.D.T)


def closure_H(rom: QuadraticRom, cfg: ClosureConfig, q: np.ndarray) -> np.ndarray:
    q = _check_state(rom, q)
    if cfg.mu_nl < 0:
        raise ValueError(f"mu_nl must be non-negative, got {cfg.mu_nl}")
    f = np.asarray(bound_value(cfg, q))
    return cfg.mu_nl * f[..., None] * np.diag(rom.D) * q


def rhs_stabilized(rom: QuadraticRom, cfg: ClosureConfig, q: np.ndarray) -> np.ndarray:
    q = _check_state(rom, q)
    mu_cl = cfg.mu_cl(rom)
    return _f_tilde(rom, q) + mu_cl * (q @ rom.D.T) + closure_H(rom, cfg, q)


# ---------------------------------------------------------------------------
# Lyapunov diagnostics
# ---------------------------------------------------------------------------

def invariant_set_margin(rom: QuadraticRom, cfg: ClosureConfig,
                         q: np.ndarray) -> np.ndarray | float:
    """m(q); q is in S iff m(q) >= 0.  q = 0 is assigned to S (margin +inf)."""
    q = _check_state(rom, q)
    mu_cl = cfg.mu_cl(rom)
    nq = np.linalg.norm(q, axis=-1)
    f = np.asarray(bound_value(cfg, q), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = mu_cl * rom.lambda_max_D * nq / f + cfg.mu_nl * nq * rom.d_max + 1.0
    m = np.where(nq == 0, np.inf, m)
    return float(m) if q.ndim == 1 else m


def lyapunov_derivative(rom: QuadraticRom, cfg: ClosureConfig, q: np.ndarray):
    """dV/dt = q . rhs_stabilized(q) for V = |q|^2 / 2."""
    q = _check_state(rom, q)
    return np.sum(q * rhs_stabilized(rom, cfg, q), axis=-1)


def lyapunov_bound(rom: QuadraticRom, cfg: ClosureConfig, q: np.ndarray):
    """Upper bound |q| f~(q) m(q) on dV/dt (zero at q = 0)."""
    q = _check_state(rom, q)
    nq = np.linalg.norm(q, axis=-1)
    f = np.asarray(bound_value(cfg, q), dtype=float)
    m = np.asarray(invariant_set_margin(rom, cfg, q), dtype=float)
    out = np.where(nq == 0, 0.0, nq * f * np.where(np.isfinite(m), m, 0.0))
    return float(out) if q.ndim == 1 else out


def sample_states(r: int, count: int, rng: np.random.Generator,
                  log10_radius: tuple[float, float] = (-4.0, 4.0)) -> np.ndarray:
    """Random directions with log-uniform radii, shape (count, r)."""
    dirs = rng.standard_normal((count, r))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 10.0 ** rng.uniform(*log10_radius, size=count)
    return dirs * radii[:, None]


def sample_theorem_check(rom: QuadraticRom, cfg: ClosureConfig, count: int,
                         rng: np.random.Generator) -> dict[str, float | bool]:
    """Sample states and compare dV/dt with its bound outside S.

    "holds" is False when some sampled state outside S has dV/dt > 0.
    """
    q = sample_states(rom.r, count, rng)
    margin = invariant_set_margin(rom, cfg, q)
    deriv = lyapunov_derivative(rom, cfg, q)
    bound = lyapunov_bound(rom, cfg, q)
    outside = margin < 0
    scale = np.maximum(np.abs(bound), 1e-300)
    gap = (deriv - bound) / scale
    return {
        "samples": count,
        "outside": int(np.sum(outside)),
        "max_bound_outside": float(np.max(bound[outside])) if outside.any() else float("-inf"),
        "max_deriv_outside": float(np.max(deriv[outside])) if outside.any() else float("-inf"),
        "max_relative_gap": float(np.max(gap)),
        "holds": bool(not outside.any() or np.max(deriv[outside]) <= 0),
    }


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def integrate_rom(rom: QuadraticRom, cfg: ClosureConfig | None, q0: np.ndarray,
                  t_f: float, dt: float) -> Trajectory:
    """RK4 integration of the nominal (cfg None) or stabilised ROM.

    Never raises on blow-up: the returned trajectory is truncated and flagged
    unstable when |q| exceeds BLOWUP_NORM or goes non-finite.
    """
    q0 = _check_state(rom, q0)
    e, L, D, C = rom.e, rom.L, rom.D, rom.C
    if cfg is None:
        A = L + rom.mu * D

        def rhs(q: np.ndarray) -> np.ndarray:
            return e + A @ q + (C @ q) @ q
    else:
        A = L + cfg.mu_cl(rom) * D
        dH = cfg.mu_nl * np.diag(D)
        affine = cfg.bound_kind is BoundKind.AFFINE_PLUS_QUADRATIC

        def rhs(q: np.ndarray) -> np.ndarray:
            nq2 = q @ q
            f = cfg.c_max * nq2
            if affine:
                f += cfg.l_max * np.sqrt(nq2) + cfg.e_max
            return e + A @ q + (C @ q) @ q + f * dH * q

    traj = integrate(rhs, q0, t_f, dt, blowup_norm=BLOWUP_NORM, raise_on_blowup=False)
    if not traj.stable:
        log.debug("ROM blew up at t=%.4g (cfg=%s)", traj.blowup_time, cfg)
    return traj
