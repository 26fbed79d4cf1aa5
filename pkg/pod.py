"""
Proper orthogonal decomposition by the method of snapshots.

The s x s temporal correlation matrix

    K_ij = (1/s) <z_i - zbar, z_j - zbar>_H

is diagonalised with a cyclic Jacobi eigensolver and the modes are built as

    phi_i = (1 / (sqrt(s) * sqrt(lambda_i))) * sum_j [v_i]_j (z_j - zbar)

which makes them orthonormal in the W-weighted inner product.  Modes with
lambda_i / lambda_1 below RANK_CUTOFF are never retained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from models.base import SnapshotSet
from timestep import Trajectory

log = logging.getLogger(__name__)

RANK_CUTOFF = 1e-12       # lambda_i / lambda_1 below this is numerical noise
SYMMETRY_TOL = 1e-12
JACOBI_TOL = 1e-13        # off(K)_F < JACOBI_TOL * |K|_F ends the sweeps
JACOBI_MAX_SWEEPS = 100
JACOBI_NEGLIGIBLE = 1e-18  # |a_pq| below this times |a_pp| + |a_qq| is set to zero
ORTHO_POLISH_TOL = 1e-13
SIGN_TIE_RTOL = 1e-12


class RankError(ValueError):
    def __init__(self, requested: int, effective_rank: int):
        self.requested = requested
        self.effective_rank = effective_rank
        super().__init__(
            f"requested r={requested} exceeds the numerical rank of the snapshots "
            f"(effective rank {effective_rank})"
        )


@dataclass
class PodBasis:
    modes: np.ndarray            # n x r, W-orthonormal columns
    eigenvalues: np.ndarray      # retained lambda_i (descending within each block)
    base_state: np.ndarray       # zbar
    weights: np.ndarray
    block_ranks: tuple[tuple[str, int], ...] = field(default_factory=tuple)
    subtract_mean: bool = False
    all_eigenvalues: np.ndarray | None = None
    effective_rank: int = 0

    def __post_init__(self) -> None:
        self.modes = np.asarray(self.modes, dtype=float)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        self.base_state = np.asarray(self.base_state, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        n, r = self.modes.shape
        if self.eigenvalues.shape != (r,):
            raise ValueError(f"expected {r} eigenvalues, got {self.eigenvalues.shape}")
        if self.base_state.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("base state and weights must match the mode length")
        if self.all_eigenvalues is None:
            self.all_eigenvalues = self.eigenvalues.copy()
        if not self.effective_rank:
            self.effective_rank = r

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    @property
    def r_v(self) -> int:
        return dict(self.block_ranks).get("v", 0)

    @property
    def r_T(self) -> int:
        return dict(self.block_ranks).get("T", 0)

    def mode_blocks(self) -> list[tuple[str, slice]]:
        """Slices of the coefficient vector belonging to each block."""
        if not self.block_ranks:
            return [("all", slice(0, self.r))]
        out, start = [], 0
        for name, rb in self.block_ranks:
            out.append((name, slice(start, start + rb)))
            start += rb
        return out

    def gram(self) -> np.ndarray:
        return self.modes.T @ (self.weights[:, None] * self.modes)


# ---------------------------------------------------------------------------
# Correlation matrix and eigensolver
# ---------------------------------------------------------------------------

def correlation_matrix(S: SnapshotSet, zbar: np.ndarray) -> np.ndarray:
    zbar = np.asarray(zbar, dtype=float)
    if zbar.shape != (S.n,):
        raise ValueError(f"base state has shape {zbar.shape}, snapshots have n={S.n}")
    X = S.states - zbar[:, None]
    K = X.T @ (S.weights[:, None] * X) / S.s
    return 0.5 * (K + K.T)


def _rotate(A: np.ndarray, V: np.ndarray, p: int, q: int) -> None:
    apq = A[p, q]
    if apq == 0.0:
        return
    if abs(apq) <= JACOBI_NEGLIGIBLE * (abs(A[p, p]) + abs(A[q, q])):
        A[p, q] = A[q, p] = 0.0
        return
    tau = (A[q, q] - A[p, p]) / (2.0 * apq)
    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c

    ap, aq = A[:, p].copy(), A[:, q].copy()
    A[:, p] = c * ap - s * aq
    A[:, q] = s * ap + c * aq
    ap, aq = A[p, :].copy(), A[q, :].copy()
    A[p, :] = c * ap - s * aq
    A[q, :] = s * ap + c * aq
    A[p, q] = A[q, p] = 0.0

    vp, vq = V[:, p].copy(), V[:, q].copy()
    V[:, p] = c * vp - s * vq
    V[:, q] = s * vp + c * vq


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive (first on ties)."""
    for j in range(V.shape[1]):
        mag = np.abs(V[:, j])
        top = mag.max()
        if top == 0:
            continue
        lead = int(np.argmax(mag >= top * (1.0 - SIGN_TIE_RTOL)))
        if V[lead, j] < 0:
            V[:, j] = -V[:, j]
    return V


def eig_sym(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns, with a deterministic sign convention.
    """
    A = np.array(K, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"eig_sym needs a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError("eig_sym needs a symmetric matrix")

    m = A.shape[0]
    V = np.eye(m)
    norm = float(np.linalg.norm(A))
    if norm == 0.0:
        return np.zeros(m), V

    for sweep in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(float(np.sum(A * A) - np.sum(np.diag(A) ** 2)), 0.0))
        if off < JACOBI_TOL * norm:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                _rotate(A, V, p, q)
    else:
        log.warning("Jacobi did not converge in %d sweeps (off=%.3g)", JACOBI_MAX_SWEEPS, off)
    log.debug("Jacobi converged after %d sweeps for a %dx%d matrix", sweep, m, m)

    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], _fix_signs(V[:, order])


def lambda_max_sym(M: np.ndarray) -> float:
    """Largest eigenvalue of the symmetric part (M + M*)/2."""
    M = np.asarray(M, dtype=float)
    w, _ = eig_sym(0.5 * (M + M.T))
    return float(w[0])


# ---------------------------------------------------------------------------
# Basis construction
# ---------------------------------------------------------------------------

def effective_rank(eigenvalues: np.ndarray) -> int:
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.sum(lam / lam[0] >= RANK_CUTOFF))


def _polish(modes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Re-orthonormalise in the W inner product if roundoff crept in."""
    gram = modes.T @ (weights[:, None] * modes)
    if np.max(np.abs(gram - np.eye(modes.shape[1])), initial=0.0) <= ORTHO_POLISH_TOL:
        return modes
    sw = np.sqrt(weights)[:, None]
    Q, R = np.linalg.qr(sw * modes)
    Q *= np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q / sw


def compute_basis(S: SnapshotSet, r: int, subtract_mean: bool = False,
                  *, strict: bool = True) -> PodBasis:
    """POD basis of rank r from a snapshot set.

    With ``strict`` (the default) asking for more modes than the numerical
    rank raises ``RankError``; otherwise r is capped with a warning.
    """
    if r < 1:
        raise ValueError(f"r must be positive, got {r}")
    zbar = S.states.mean(axis=1) if subtract_mean else np.zeros(S.n)
    lam, V = eig_sym(correlation_matrix(S, zbar))
    rank = effective_rank(lam)
    if r > rank:
        if strict:
            raise RankError(r, rank)
        log.warning("Capping r=%d at the effective rank %d", r, rank)
        r = rank
        if r == 0:
            raise RankError(1, 0)

    X = S.states - zbar[:, None]
    modes = X @ V[:, :r] / (np.sqrt(S.s) * np.sqrt(lam[:r]))
    modes = _polish(modes, S.weights)
    log.info("POD: r=%d of rank %d, captured energy %.6f", r, rank,
             float(np.sum(lam[:r]) / np.sum(lam[lam > 0])))
    return PodBasis(
        modes=modes,
        eigenvalues=lam[:r],
        base_state=zbar,
        weights=S.weights,
        subtract_mean=subtract_mean,
        all_eigenvalues=lam,
        effective_rank=rank,
    )


def compute_basis_blocked(S: SnapshotSet, r_v: int, r_T: int,
                          subtract_mean: bool = False) -> PodBasis:
    """Separate POD of the velocity and temperature blocks, embedded with zeros."""
    names = [b[0] for b in S.blocks]
    if names != ["v", "T"]:
        raise ValueError(f"blocked POD needs blocks ['v', 'T'], snapshot set declares {names}")

    modes = np.zeros((S.n, r_v + r_T))
    zbar = np.zeros(S.n)
    eigenvalues, spectra, ranks = [], [], []
    col = 0
    for (name, lo, hi), rb in zip(S.blocks, (r_v, r_T)):
        sub = compute_basis(S.block(name), rb, subtract_mean)
        modes[lo:hi, col:col + rb] = sub.modes
        zbar[lo:hi] = sub.base_state
        eigenvalues.append(sub.eigenvalues)
        spectra.append(sub.all_eigenvalues)
        ranks.append(sub.effective_rank)
        col += rb

    return PodBasis(
        modes=modes,
        eigenvalues=np.concatenate(eigenvalues),
        base_state=zbar,
        weights=S.weights,
        block_ranks=(("v", r_v), ("T", r_T)),
        subtract_mean=subtract_mean,
        all_eigenvalues=np.concatenate(spectra),
        effective_rank=sum(ranks),
    )


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(b: PodBasis, z: np.ndarray) -> np.ndarray:
    """q_i = <z - zbar, phi_i>_H; accepts a vector or an n x m stack."""
    z = np.asarray(z, dtype=float)
    if z.shape[0] != b.n:
        raise ValueError(f"state has length {z.shape[0]}, basis has n={b.n}")
    if z.ndim == 1:
        return b.modes.T @ (b.weights * (z - b.base_state))
    return b.modes.T @ (b.weights[:, None] * (z - b.base_state[:, None]))


def reconstruct(b: PodBasis, q: np.ndarray) -> np.ndarray:
    """zbar + sum_i q_i phi_i; accepts a vector or an r x m stack."""
    q = np.asarray(q, dtype=float)
    if q.shape[0] != b.r:
        raise ValueError(f"coefficients have length {q.shape[0]}, basis has r={b.r}")
    if q.ndim == 1:
        return b.base_state + b.modes @ q
    return b.base_state[:, None] + b.modes @ q


def field_error_energy(b: PodBasis, q_err: np.ndarray) -> np.ndarray | float:
    """|Phi e|^2_H for a coefficient error e (vector or r x m stack)."""
    q_err = np.asarray(q_err, dtype=float)
    if q_err.shape[0] != b.r:
        raise ValueError(f"coefficients have length {q_err.shape[0]}, basis has r={b.r}")
    diff = b.modes @ q_err
    if q_err.ndim == 1:
        return float(np.sum(b.weights * diff * diff))
    return np.sum(b.weights[:, None] * diff * diff, axis=0)


def project_trajectory(b: PodBasis, traj: Trajectory) -> Trajectory:
    return Trajectory(times=traj.times, states=project(b, traj.states),
                      stable=traj.stable, blowup_time=traj.blowup_time)


def project_snapshots(b: PodBasis, S: SnapshotSet) -> Trajectory:
    return Trajectory(times=S.times, states=project(b, S.states))


def energy_fraction(b: PodBasis) -> float:
    """Share of the snapshot energy captured by the retained modes."""
    lam = b.all_eigenvalues[b.all_eigenvalues > 0]
    total = float(np.sum(lam))
    return float(np.sum(b.eigenvalues) / total) if total > 0 else 0.0


def mean_projection_error(b: PodBasis, S: SnapshotSet) -> float:
    """(1/s) sum_j |(z_j - zbar) - Pi_r (z_j - zbar)|^2_H."""
    X = S.states - b.base_state[:, None]
    resid = X - b.modes @ project(b, S.states)
    return float(np.sum(S.weights[:, None] * resid * resid) / S.s)
