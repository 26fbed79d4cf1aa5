"""
Synthetic full-order quadratic system with the Boussinesq ROM structure.

    z' = e_n + L_n z + mu * D_n z + [C_n z] z,   ([C z] z)_i = sum_jk C_ijk z_j z_k

D_n = -diag(spectrum) is negative definite, C_n is antisymmetric in its
first two indices (so z . [C z] z = 0) and L_n is a skew-symmetric
coupling standing in for buoyancy.  With e_n = 0 the energy |z|^2 / 2 can
only decay.  The state is optionally split into a velocity block "v" and a
temperature block "T" so the blocked POD path can be exercised.
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from models.base import TruthModel

log = logging.getLogger(__name__)


class SyntheticQuadratic(TruthModel):
    kind = "synthetic"

    def __init__(self, e: np.ndarray, L: np.ndarray, D: np.ndarray, C: np.ndarray,
                 mu: float, blocks: tuple[tuple[str, int, int], ...] = ()):
        n = e.shape[0]
        if L.shape != (n, n) or D.shape != (n, n) or C.shape != (n, n, n):
            raise ValueError("synthetic coefficients are not conformable")
        super().__init__(n=n, mu=mu, weights=np.ones(n), blocks=blocks)
        self.e = e
        self.L = L
        self.D = D
        self.C = C

    @classmethod
    def from_config(cls, params: dict[str, Any], seed: int) -> "SyntheticQuadratic":
        n = int(params["n"])
        spectrum = np.linspace(float(params["spectrum_max"]),
                               float(params["spectrum_min"]), n)
        return make_synthetic(
            n,
            seed,
            spectrum,
            mu=float(params["mu"]),
            c_norm=float(params["c_norm"]),
            l_norm=float(params["l_norm"]),
            blocked=bool(params["blocked"]),
        )

    def constant(self) -> np.ndarray:
        return self.e

    def linear(self, z: np.ndarray) -> np.ndarray:
        return self.L @ z

    def diffusion(self, z: np.ndarray) -> np.ndarray:
        return self.D @ z

    def quadratic(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        if np.ndim(y) == 1:
            return (self.C @ z) @ y
        return np.einsum("ijk,jm,km->im", self.C, y, z, optimize=True)

    def galerkin_quadratic(self, modes: np.ndarray, test: np.ndarray) -> np.ndarray:
        return np.einsum("ai,abc,bj,ck->ijk", test, self.C, modes, modes, optimize=True)

    def rhs(self, z: np.ndarray, mu: float | None = None) -> np.ndarray:
        mu = self.mu if mu is None else mu
        return self.e + self.L @ z + mu * (self.D @ z) + (self.C @ z) @ z


def make_synthetic(
    n: int,
    seed: int,
    spectrum: np.ndarray | None = None,
    *,
    mu: float = 0.05,
    c_norm: float = 5.0,
    l_norm: float = 1.0,
    blocked: bool = True,
) -> SyntheticQuadratic:
    """Seeded synthetic truth model; identical seeds give identical coefficients."""
    if n < 4:
        raise ValueError(f"synthetic model needs n >= 4, got {n}")
    if spectrum is None:
        spectrum = np.linspace(1.0, 0.1, n)
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.shape != (n,):
        raise ValueError(f"spectrum must have {n} entries, got {spectrum.shape}")
    if np.any(spectrum <= 0) or np.any(np.diff(spectrum) >= 0):
        raise ValueError("spectrum must be strictly decreasing and positive")

    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    L = 0.5 * (A - A.T)
    L *= l_norm / np.linalg.norm(L)

    G = rng.standard_normal((n, n, n))
    C = 0.5 * (G - G.transpose(1, 0, 2))
    C *= c_norm / np.sqrt(np.sum(C * C))

    blocks = (("v", 0, n // 2), ("T", n // 2, n)) if blocked else ()
    log.debug("Synthetic model n=%d seed=%d |L|_F=%.3g |C|_F=%.3g", n, seed, l_norm, c_norm)
    return SyntheticQuadratic(
        e=np.zeros(n),
        L=L,
        D=-np.diag(spectrum),
        C=C,
        mu=mu,
        blocks=blocks,
    )
