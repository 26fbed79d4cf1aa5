"""
Experiment configuration for romstab.

A run is described by one ExperimentConfig made of four sections:

    truth    which truth model, its parameters, horizon and initial state
    pod      snapshot stride, basis size (r, or r_v + r_T when blocked) and
             mu_factor, the ROM's viscosity as a multiple of the truth mu
    closure  bound used by the Lyapunov closure (c_max, bound kind)
    mes      the extremum-seeking tuner (see mes.MesConfig)

Configs live on disk as JSON and round-trip losslessly through
to_dict()/from_dict().  Named presets are in PRESETS; physical constant
sets (Re, Pr, Gr) are in PHYSICS.

Environment:
    ROMSTAB_WORKERS   default worker count for --sweep (default: CPU count)
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from mes import MesConfig
from models.base import discover_models
from rom import BoundKind

log = logging.getLogger(__name__)

WORKERS = int(os.environ.get("ROMSTAB_WORKERS", "0")) or (os.cpu_count() or 1)

Z0_PRESETS = {"zero", "random", "sine"}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class PhysicalConstants:
    re: float
    pr: float
    gr: float

    @property
    def mu(self) -> float:
        return 1.0 / self.re


PHYSICS: dict[str, PhysicalConstants] = {
    # Air in a quiet room at desk-scale Reynolds number.
    "quiet-room": PhysicalConstants(re=4.964e4, pr=0.712, gr=7.369e7),
}


@dataclass
class TruthConfig:
    model: str = "burgers1d"
    n: int = 256
    mu: float = 0.005
    physics: str | None = None   # overrides mu with 1/Re of the named constants
    t_f: float = 1.0
    dt: float = 1e-3
    z0: str = "sine"
    amplitude: float = 1.0
    seed: int = 0
    # synthetic model only
    spectrum_max: float = 10.0
    spectrum_min: float = 1.0
    c_norm: float = 5.0
    l_norm: float = 1.0
    blocked: bool = True

    @property
    def effective_mu(self) -> float:
        if self.physics is not None and self.physics in PHYSICS:
            return PHYSICS[self.physics].mu
        return self.mu

    def model_params(self) -> dict[str, Any]:
        params = dataclasses.asdict(self)
        params["mu"] = self.effective_mu
        return params


@dataclass
class PodConfig:
    r: int = 4
    r_v: int = 0
    r_T: int = 0
    subtract_mean: bool = False
    stride: int = 10
    mu_factor: float = 1.0

    @property
    def blocked(self) -> bool:
        return self.r_v > 0 or self.r_T > 0

    @property
    def total_rank(self) -> int:
        return self.r_v + self.r_T if self.blocked else self.r


@dataclass
class ClosureSettings:
    c_max: float = 10.0
    bound_kind: str = BoundKind.QUADRATIC_ONLY.value
    l_max: float = 0.0
    e_max: float = 0.0
    bound_from_rom: bool = False   # derive e_max / l_max / c_max from the assembled ROM


@dataclass
class ExperimentConfig:
    name: str = "custom"
    truth: TruthConfig = field(default_factory=TruthConfig)
    pod: PodConfig = field(default_factory=PodConfig)
    closure: ClosureSettings = field(default_factory=ClosureSettings)
    mes: MesConfig = field(default_factory=MesConfig)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["mes"] = {k: list(v) if isinstance(v, tuple) else v
                      for k, v in out["mes"].items()}
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        sections = {"truth": TruthConfig, "pod": PodConfig,
                    "closure": ClosureSettings, "mes": MesConfig}
        unknown = set(data) - set(sections) - {"name"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config section")
        kwargs: dict[str, Any] = {"name": str(data.get("name", "custom"))}
        for key, section_cls in sections.items():
            raw = data.get(key, {})
            if not isinstance(raw, dict):
                raise ConfigError(key, "must be an object")
            names = {f.name for f in dataclasses.fields(section_cls)}
            extra = set(raw) - names
            if extra:
                raise ConfigError(f"{key}.{sorted(extra)[0]}", "unknown field")
            try:
                kwargs[key] = section_cls(**raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, str(exc)) from exc
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest_source(self) -> dict[str, Any]:
        """The part of the config that determines the snapshots."""
        return {"truth": dataclasses.asdict(self.truth), "stride": self.pod.stride}


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def problems(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    t, p, c = cfg.truth, cfg.pod, cfg.closure

    models = discover_models()
    if t.model not in models:
        out.append(("truth.model", f"unknown model (available: {', '.join(sorted(models))})"))
    min_n = 8 if t.model == "burgers1d" else 4
    if t.n < min_n:
        out.append(("truth.n", f"must be at least {min_n} for {t.model}"))
    if t.physics is not None and t.physics not in PHYSICS:
        out.append(("truth.physics", f"unknown physical constants (available: {', '.join(PHYSICS)})"))
    elif not (t.effective_mu > 0 and math.isfinite(t.effective_mu)):
        out.append(("truth.mu", "must be positive"))
    if not t.t_f > 0:
        out.append(("truth.t_f", "must be positive"))
    if not t.dt > 0:
        out.append(("truth.dt", "must be positive"))
    elif t.t_f > 0 and t.dt > t.t_f:
        out.append(("truth.dt", "must not exceed t_f"))
    if t.z0 not in Z0_PRESETS:
        out.append(("truth.z0", f"must be one of {sorted(Z0_PRESETS)}"))
    elif t.z0 == "sine" and t.model != "burgers1d":
        out.append(("truth.z0", "'sine' is only defined for burgers1d"))
    if not t.amplitude >= 0:
        out.append(("truth.amplitude", "must be non-negative"))
    if t.model == "synthetic":
        if not t.spectrum_min > 0:
            out.append(("truth.spectrum_min", "must be positive"))
        if not t.spectrum_max > t.spectrum_min:
            out.append(("truth.spectrum_max", "must exceed spectrum_min"))
        if not t.c_norm > 0:
            out.append(("truth.c_norm", "must be positive"))
        if not t.l_norm >= 0:
            out.append(("truth.l_norm", "must be non-negative"))

    if p.stride < 1:
        out.append(("pod.stride", "must be at least 1"))
    if p.blocked:
        if p.r_v < 1:
            out.append(("pod.r_v", "must be at least 1 for a blocked basis"))
        if p.r_T < 1:
            out.append(("pod.r_T", "must be at least 1 for a blocked basis"))
        if t.model != "synthetic" or not t.blocked:
            out.append(("pod.r_v", "blocked POD needs a blocked synthetic truth model"))
    elif p.r < 1:
        out.append(("pod.r", "must be at least 1"))
    if not (p.mu_factor > 0 and math.isfinite(p.mu_factor)):
        out.append(("pod.mu_factor", "must be positive"))

    if not c.c_max > 0:
        out.append(("closure.c_max", "must be positive"))
    if c.bound_kind not in {k.value for k in BoundKind}:
        out.append(("closure.bound_kind", f"must be one of {[k.value for k in BoundKind]}"))
    if not c.l_max >= 0:
        out.append(("closure.l_max", "must be non-negative"))
    if not c.e_max >= 0:
        out.append(("closure.e_max", "must be non-negative"))

    out.extend((f"mes.{name}", msg) for name, msg in cfg.mes.problems())
    return out


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    found = problems(cfg)
    for name, msg in found[1:]:
        log.debug("Also invalid: %s: %s", name, msg)
    if found:
        raise ConfigError(*found[0])
    return cfg


# ---------------------------------------------------------------------------
# Presets, files, overrides
# ---------------------------------------------------------------------------

def burgers_small() -> ExperimentConfig:
    """Under-resolved Burgers run: 4 modes for a steepening sine wave.

    The ROM carries a fifth of the truth viscosity, so mu_e has to put back
    roughly 0.8 mu before the ROM follows the truth.
    """
    return ExperimentConfig(
        name="burgers-small",
        truth=TruthConfig(model="burgers1d", n=256, mu=0.005, t_f=1.0, dt=1e-3,
                          z0="sine", amplitude=1.0),
        pod=PodConfig(r=4, subtract_mean=False, stride=10, mu_factor=0.2),
        closure=ClosureSettings(c_max=10.0, bound_from_rom=True),
        mes=MesConfig(a=(0.25, 0.1), scale=(0.005, 1e-6), gain=50.0, normalize=True,
                      q_clip=10.0, k_max=200),
    )


def boussinesq_structured() -> ExperimentConfig:
    """Synthetic quadratic system with velocity/temperature blocks, 8 + 8 modes.

    The ROM is built around the snapshot mean (so e and L are nonzero and the
    affine bound is used) and carries a fifth of the truth viscosity.
    """
    return ExperimentConfig(
        name="boussinesq-structured",
        truth=TruthConfig(model="synthetic", n=64, mu=0.05, t_f=78.0, dt=0.02,
                          z0="random", amplitude=1.0, spectrum_max=10.0,
                          spectrum_min=1.0, c_norm=5.0, l_norm=1.0, blocked=True),
        pod=PodConfig(r_v=8, r_T=8, subtract_mean=True, stride=39, mu_factor=0.2),
        closure=ClosureSettings(c_max=10.0, bound_kind=BoundKind.AFFINE_PLUS_QUADRATIC.value,
                                bound_from_rom=True),
        mes=MesConfig(scale=(1.0, 1e-6), gain=5.0, normalize=True, q_clip=10.0,
                      k_max=100),
    )


def quiet_room() -> ExperimentConfig:
    """The blocked synthetic run at the quiet-room Reynolds number."""
    cfg = boussinesq_structured()
    cfg.name = "quiet-room"
    cfg.truth.physics = "quiet-room"
    cfg.pod.mu_factor = 1.0
    return cfg


PRESETS: dict[str, Callable[[], ExperimentConfig]] = {
    "burgers-small": burgers_small,
    "boussinesq-structured": boussinesq_structured,
    "quiet-room": quiet_room,
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return PRESETS[name]()


def load(path: Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return ExperimentConfig.from_dict(data)


def save(cfg: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(cfg.to_json())


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides such as {"truth.mu": 0.01, "mes.k_max": 50}."""
    data = copy.deepcopy(cfg.to_dict())
    for key, value in overrides.items():
        if key == "label":
            continue
        section, _, name = key.partition(".")
        if not name:
            if section == "name":
                data["name"] = value
                continue
            raise ConfigError(key, "override keys must look like 'section.field'")
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(key, "unknown config section")
        if name not in data[section]:
            raise ConfigError(key, "unknown field")
        data[section][name] = value
    return ExperimentConfig.from_dict(data)


def load_sweep(path: Path) -> list[dict[str, Any]]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list) or not all(isinstance(d, dict) for d in data):
        raise ConfigError("sweep", f"{path} must hold a JSON list of override objects")
    return data


def sweep_label(index: int, overrides: dict[str, Any]) -> str:
    if "label" in overrides:
        label = str(overrides["label"])
    else:
        label = "_".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items()) or "base"
    safe = "".join(ch if ch.isalnum() or ch in "-_=." else "-" for ch in label)
    return f"{index:03d}-{safe}"
