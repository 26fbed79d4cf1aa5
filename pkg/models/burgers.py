"""
1D periodic viscous Burgers equation on [0, 1).

    u_t = mu * u_xx - u * u_x

Second-order central differences on a uniform grid of n points, h = 1/n.
The convection term uses the skew-symmetric split

    u * u_x  ~  (1/3) * (u * du + d(u^2))

with d the periodic central difference, which makes the discrete
convection contribute exactly zero to the energy sum_k h * u_k^2 / 2.
Quadrature weights are uniform, W_k = h.
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from models.base import TruthModel

log = logging.getLogger(__name__)

MIN_POINTS = 8


def _ddx(f: np.ndarray, h: float) -> np.ndarray:
    """Periodic central first difference along axis 0."""
    return (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * h)


def _d2dx2(f: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=0) - 2.0 * f + np.roll(f, 1, axis=0)) / (h * h)


def _skew_convection(y: np.ndarray, z: np.ndarray, h: float) -> np.ndarray:
    """Bilinear form whose diagonal y = z is (1/3)(u du + d(u^2))."""
    return (y * _ddx(z, h) + _ddx(y * z, h)) / 3.0


def burgers_rhs(u: np.ndarray, mu: float) -> np.ndarray:
    """mu * u_xx - u * u_x on the periodic grid implied by len(u)."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size < MIN_POINTS:
        raise ValueError(f"Burgers state needs at least {MIN_POINTS} points, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("Burgers state contains non-finite values")
    h = 1.0 / u.size
    return mu * _d2dx2(u, h) - _skew_convection(u, u, h)


class Burgers1D(TruthModel):
    kind = "burgers1d"

    def __init__(self, n: int = 256, mu: float = 0.005):
        if n < MIN_POINTS:
            raise ValueError(f"Burgers grid needs at least {MIN_POINTS} points, got {n}")
        self.h = 1.0 / n
        super().__init__(n=n, mu=mu, weights=np.full(n, self.h))
        self.x = np.arange(n) * self.h

    @classmethod
    def from_config(cls, params: dict[str, Any], seed: int) -> "Burgers1D":
        return cls(n=int(params["n"]), mu=float(params["mu"]))

    def constant(self) -> np.ndarray:
        return np.zeros(self.n)

    def linear(self, z: np.ndarray) -> np.ndarray:
        return np.zeros_like(z, dtype=float)

    def diffusion(self, z: np.ndarray) -> np.ndarray:
        return _d2dx2(np.asarray(z, dtype=float), self.h)

    def quadratic(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return -_skew_convection(np.asarray(y, dtype=float), np.asarray(z, dtype=float), self.h)

    def rhs(self, z: np.ndarray, mu: float | None = None) -> np.ndarray:
        # Skip the zero constant/linear pieces on the hot path.
        mu = self.mu if mu is None else mu
        return mu * _d2dx2(z, self.h) - _skew_convection(z, z, self.h)

    def max_stable_dt(self, z: np.ndarray, mu: float) -> float:
        umax = float(np.max(np.abs(z))) if np.size(z) else 0.0
        bound = 0.5 * self.h * self.h / mu
        if umax > 0:
            bound = min(bound, 0.5 * self.h / umax)
        return bound

    def initial_state(self, preset: str, amplitude: float, seed: int) -> np.ndarray:
        if preset == "sine":
            return amplitude * np.sin(2.0 * np.pi * self.x)
        return super().initial_state(preset, amplitude, seed)
