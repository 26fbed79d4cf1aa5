"""
Fixed-step classical RK4 shared by the truth models and the ROMs.

Times are always generated as k * dt (never accumulated), plus a final
partial step when t_f is not a multiple of dt, so two runs with identical
inputs produce bitwise-identical trajectories.

A step that produces a non-finite state, or a state whose norm exceeds
``blowup_norm``, stops the integration.  Callers either get a
``BlowUpError`` naming the failure time or a truncated ``Trajectory``
flagged ``stable=False``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

BLOWUP_NORM = 1e8  # ROM instability threshold on ||q||
TIME_RTOL = 1e-9   # t_f / dt treated as an integer within this tolerance

Rhs = Callable[[np.ndarray], np.ndarray]


class BlowUpError(RuntimeError):
    """Integration produced a non-finite or unbounded state."""

    def __init__(self, time: float, step: int, last_norm: float):
        self.time = time
        self.step = step
        self.last_norm = last_norm
        super().__init__(
            f"integration blew up at t={time:.6g} (step {step}, "
            f"last finite norm {last_norm:.3g})"
        )


@dataclass
class Trajectory:
    """States stored as columns: ``states[:, k]`` is the state at ``times[k]``."""

    times: np.ndarray
    states: np.ndarray
    stable: bool = True
    blowup_time: float | None = None
    weights: np.ndarray | None = None
    blocks: tuple[tuple[str, int, int], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != self.times.size:
            raise ValueError(
                f"states shape {self.states.shape} does not match "
                f"{self.times.size} times"
            )

    def __len__(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.states.shape[0]

    @property
    def t_final(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=0)

    def at_times(self, times: np.ndarray) -> "Trajectory":
        """Pick the stored states whose times match ``times``.

        Used to align a fine-grid trajectory with snapshot times.  Every
        requested time must be present (to TIME_RTOL of the horizon).
        """
        times = np.asarray(times, dtype=float)
        scale = max(1.0, abs(self.t_final))
        idx = np.searchsorted(self.times, times - TIME_RTOL * scale)
        idx = np.clip(idx, 0, max(self.times.size - 1, 0))
        if self.times.size == 0 or np.any(
            np.abs(self.times[idx] - times) > TIME_RTOL * scale
        ):
            raise ValueError("requested times are not on this trajectory's grid")
        return Trajectory(
            times=self.times[idx],
            states=self.states[:, idx],
            stable=self.stable,
            blowup_time=self.blowup_time,
            weights=self.weights,
            blocks=self.blocks,
        )


def time_grid(t_f: float, dt: float) -> np.ndarray:
    """Return 0, dt, 2dt, ... and t_f itself as the final entry."""
    if not (t_f > 0 and dt > 0):
        raise ValueError(f"t_f and dt must be positive (got t_f={t_f}, dt={dt})")
    n = int(round(t_f / dt))
    if n >= 1 and abs(n * dt - t_f) <= TIME_RTOL * t_f:
        times = np.arange(n + 1) * dt
    else:
        n = int(np.floor(t_f / dt))
        times = np.append(np.arange(n + 1) * dt, t_f)
    times[-1] = t_f
    return times


def rk4_step(rhs: Rhs, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    rhs: Rhs,
    y0: np.ndarray,
    t_f: float,
    dt: float,
    *,
    blowup_norm: float | None = None,
    raise_on_blowup: bool = True,
) -> Trajectory:
    """Integrate ``y' = rhs(y)`` from 0 to t_f with classical RK4."""
    y = np.array(y0, dtype=float)
    if y.ndim != 1:
        raise ValueError(f"initial state must be a vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state contains non-finite values")

    times = time_grid(t_f, dt)
    states = np.empty((y.size, times.size))
    states[:, 0] = y
    last_norm = float(np.linalg.norm(y))

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, times.size):
            y = rk4_step(rhs, y, times[k] - times[k - 1])
            norm = float(np.linalg.norm(y))
            bad = not np.isfinite(norm) or (
                blowup_norm is not None and norm > blowup_norm
            )
            if bad:
                log.debug("Blow-up at t=%.6g after %d steps", times[k], k)
                if raise_on_blowup:
                    raise BlowUpError(float(times[k]), k, last_norm)
                return Trajectory(
                    times=times[:k],
                    states=states[:, :k],
                    stable=False,
                    blowup_time=float(times[k]),
                )
            states[:, k] = y
            last_norm = norm

    return Trajectory(times=times, states=states)
