"""
Base class for romstab truth models.

To add a new truth model:
  1. Create a new .py file in models/
  2. Subclass TruthModel and give it a unique ``kind``
  3. Implement the four structural pieces of the right-hand side
       z' = constant() + linear(z) + mu * diffusion(z) + quadratic(z, z)
  4. Implement ``from_config()`` so the pipeline can build it
  5. The registry auto-discovers every TruthModel subclass in this package

The split into constant / linear / diffusion / quadratic pieces is what
Galerkin projection needs: each piece is projected separately so the ROM
keeps the same structure (see rom.assemble).

Each model also owns its discrete inner product: ``weights`` W with
<f, g>_H = sum_k W_k f_k g_k.
"""

from __future__ import annotations

import abc
import importlib
import logging
import pkgutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from timestep import Trajectory, integrate

log = logging.getLogger(__name__)

Block = tuple[str, int, int]  # (name, start, stop) into the state vector


@dataclass
class SnapshotSet:
    """Time-stamped states (columns) plus the inner-product weights."""

    states: np.ndarray
    times: np.ndarray
    weights: np.ndarray
    blocks: tuple[Block, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.states.ndim != 2:
            raise ValueError(f"snapshot states must be n x s, got {self.states.shape}")
        n, s = self.states.shape
        if s < 1:
            raise ValueError("a snapshot set needs at least one snapshot")
        if self.times.shape != (s,):
            raise ValueError(f"expected {s} times, got {self.times.shape}")
        if s > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if self.weights.shape != (n,):
            raise ValueError(f"expected {n} weights, got {self.weights.shape}")
        if np.any(self.weights <= 0):
            raise ValueError("inner-product weights must be positive")
        self.blocks = tuple((str(b), int(lo), int(hi)) for b, lo, hi in self.blocks)
        for name, lo, hi in self.blocks:
            if not 0 <= lo < hi <= n:
                raise ValueError(f"block {name!r} [{lo}, {hi}) outside state of size {n}")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def s(self) -> int:
        return self.states.shape[1]

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """W-weighted inner product along the state axis."""
        w = self.weights if np.ndim(f) == 1 else self.weights[:, None]
        return np.sum(w * f * g, axis=0)

    def block(self, name: str) -> "SnapshotSet":
        for b, lo, hi in self.blocks:
            if b == name:
                return SnapshotSet(
                    states=self.states[lo:hi],
                    times=self.times,
                    weights=self.weights[lo:hi],
                )
        raise KeyError(f"no block named {name!r}")


class TruthModel(abc.ABC):
    """A full-order dissipative system that generates snapshots."""

    kind: str = ""

    def __init__(self, n: int, mu: float, weights: np.ndarray,
                 blocks: tuple[Block, ...] = ()):
        if n < 1:
            raise ValueError(f"state dimension must be positive, got {n}")
        if not mu > 0:
            raise ValueError(f"viscosity mu must be positive, got {mu}")
        self.n = n
        self.mu = float(mu)
        self.weights = np.asarray(weights, dtype=float)
        self.blocks = tuple(blocks)

    # -- structural pieces -------------------------------------------------
    # Every piece acts column-wise on an (n,) vector or an (n, m) stack.

    @abc.abstractmethod
    def constant(self) -> np.ndarray:
        """mu-independent forcing e_n."""

    @abc.abstractmethod
    def linear(self, z: np.ndarray) -> np.ndarray:
        """mu-independent linear part L_n z."""

    @abc.abstractmethod
    def diffusion(self, z: np.ndarray) -> np.ndarray:
        """Damping operator D_n z (the coefficient of mu)."""

    @abc.abstractmethod
    def quadratic(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Bilinear convection term B(y, z); B(z, z) is the nonlinearity."""

    @classmethod
    @abc.abstractmethod
    def from_config(cls, params: dict[str, Any], seed: int) -> "TruthModel":
        """Build the model from a truth-config dict."""

    # -- derived -----------------------------------------------------------

    def rhs(self, z: np.ndarray, mu: float | None = None) -> np.ndarray:
        mu = self.mu if mu is None else mu
        return (
            self.constant()
            + self.linear(z)
            + mu * self.diffusion(z)
            + self.quadratic(z, z)
        )

    def galerkin_quadratic(self, modes: np.ndarray, test: np.ndarray) -> np.ndarray:
        """C_ijk = <test_i, B(mode_j, mode_k)> for all mode pairs.

        ``test`` already carries the weights (W * Phi).  Subclasses with an
        explicit tensor override this with a direct contraction.
        """
        r = modes.shape[1]
        jj, kk = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
        pairs = self.quadratic(modes[:, jj.ravel()], modes[:, kk.ravel()])
        return (test.T @ pairs).reshape(r, r, r)

    def max_stable_dt(self, z: np.ndarray, mu: float) -> float:
        """Explicit-stability bound on dt; unbounded unless a model says so."""
        return float("inf")

    def energy(self, z: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.weights * z * z))

    def initial_state(self, preset: str, amplitude: float, seed: int) -> np.ndarray:
        if preset == "zero":
            return np.zeros(self.n)
        if preset == "random":
            rng = np.random.default_rng(seed)
            z = rng.standard_normal(self.n)
            return amplitude * z / np.sqrt(np.sum(self.weights * z * z))
        raise ValueError(f"unknown initial-state preset {preset!r} for {self.kind}")

    def describe(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "n": self.n,
            "mu": self.mu,
            "blocks": [list(b) for b in self.blocks],
        }


def simulate(model: TruthModel, z0: np.ndarray, mu: float | None,
             t_f: float, dt: float) -> Trajectory:
    """Integrate the truth model with fixed-step RK4.

    Raises ``BlowUpError`` naming the failure time if the state goes
    non-finite.
    """
    mu = model.mu if mu is None else mu
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (model.n,):
        raise ValueError(f"initial state has shape {z0.shape}, model needs ({model.n},)")
    dt_max = model.max_stable_dt(z0, mu)
    if dt > dt_max:
        raise ValueError(
            f"dt={dt:g} violates the explicit-stability bound {dt_max:g} "
            f"for {model.kind}"
        )
    log.info("Simulating %s (n=%d, mu=%g) to t=%g with dt=%g",
             model.kind, model.n, mu, t_f, dt)
    traj = integrate(lambda z: model.rhs(z, mu), z0, t_f, dt)
    traj.weights = model.weights
    traj.blocks = model.blocks
    return traj


def collect_snapshots(trajectory: Trajectory, stride: int) -> SnapshotSet:
    """Every ``stride``-th state of a trajectory, times and weights kept."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if len(trajectory) == 0:
        raise ValueError("cannot collect snapshots from an empty trajectory")
    weights = trajectory.weights
    if weights is None:
        weights = np.ones(trajectory.dim)
    idx = np.arange(0, len(trajectory), stride)
    return SnapshotSet(
        states=trajectory.states[:, idx],
        times=trajectory.times[idx],
        weights=weights,
        blocks=trajectory.blocks,
    )


def discover_models() -> dict[str, type[TruthModel]]:
    """Auto-discover all TruthModel subclasses in the models/ package."""
    package_dir = Path(__file__).parent
    for info in pkgutil.iter_modules([str(package_dir)]):
        if info.name == "base":
            continue
        importlib.import_module(f"models.{info.name}")

    registry: dict[str, type[TruthModel]] = {}
    for cls in TruthModel.__subclasses__():
        if not cls.kind:
            log.warning("Truth model %s has no kind, skipping", cls.__name__)
            continue
        registry[cls.kind] = cls
        log.debug("Discovered truth model: %s", cls.kind)
    return registry


def build_model(kind: str, params: dict[str, Any], seed: int) -> TruthModel:
    registry = discover_models()
    if kind not in registry:
        raise ValueError(
            f"unknown truth model {kind!r} (available: {', '.join(sorted(registry))})"
        )
    return registry[kind].from_config(params, seed)
