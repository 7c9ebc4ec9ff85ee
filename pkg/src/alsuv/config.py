"""Experiment configuration: strict JSON in, fully resolved JSON echo out."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .metrics import FARS
from .worldgen import WorldParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackParams:
    n: int = 100
    T: int = 100
    T0: int = 70
    k_top: int = 10
    base_lr: float = 0.1
    drop_step: int | None = None
    drop_factor: float = 10.0
    init_scale: float = 1.0

    def for_identity(self, seed: int, **overrides) -> AttackConfig:
        fields = {**dataclasses.asdict(self), **overrides}
        return AttackConfig(seed=seed, **fields)


@dataclass(frozen=True)
class MetricParams:
    fars: tuple[float, ...] = FARS


@dataclass(frozen=True)
class DiagnosticParams:
    enabled: bool = True
    probes: int = 64
    iters: int = 1000
    surfaces: int = 1  # identities that get a loss slice written out
    radius: float = 1.0
    resolution: int = 51


@dataclass(frozen=True)
class AblationParams:
    ns: tuple[int, ...] = (1, 20, 50, 100)
    averaging: tuple[bool, ...] = (True, False)
    validation: tuple[bool, ...] = (True, False)
    seeds: tuple[int, ...] | None = None  # None: the master seed only


SWEEPABLE = ("n", "T", "T0", "k_top", "rho")
SWEEP_METRICS = ("unseen_similarity", "seen_similarity", "validation_similarity")


@dataclass(frozen=True)
class SweepParams:
    hyperparameter: str = "T0"
    values: tuple = (1, 10, 30, 50, 70, 100)
    metrics: tuple[str, ...] = ("unseen_similarity",)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    identities: int | None = None  # attack the first k identities; None: all
    world: WorldParams = field(default_factory=WorldParams)
    attack: AttackParams = field(default_factory=AttackParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    diagnostics: DiagnosticParams = field(default_factory=DiagnosticParams)
    ablation: AblationParams = field(default_factory=AblationParams)
    sweep: SweepParams = field(default_factory=SweepParams)

    @property
    def n_attacked(self) -> int:
        return self.world.n_ids if self.identities is None else self.identities


SECTIONS = {
    "world": WorldParams,
    "attack": AttackParams,
    "metrics": MetricParams,
    "diagnostics": DiagnosticParams,
    "ablation": AblationParams,
    "sweep": SweepParams,
}


def _check_type(where: str, name: str, value, default):
    """Loose type check against the default value's type."""
    if isinstance(value, list):
        value = tuple(value)
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, tuple)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}.{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in doc.items():
        kwargs[name] = _check_type(where, name, value, getattr(defaults, name))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        if name in SECTIONS:
            kwargs[name] = _build(SECTIONS[name], value, name)
        elif name == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("seed: expected a non-negative integer")
            kwargs[name] = value
        elif name == "identities":
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError("identities: expected an integer or null")
            kwargs[name] = value
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Every cross-field check, run before any computation."""
    w, a = cfg.world, cfg.attack
    if not 1 <= cfg.n_attacked <= w.n_ids:
        raise ConfigError(f"identities must lie in [1, {w.n_ids}]")
    if w.encoder_count < 3:
        raise ConfigError("world.encoder_count must be >= 3")
    for name in ("seen_index", "validation_index"):
        if not 0 <= getattr(w, name) < w.encoder_count:
            raise ConfigError(f"world.{name} outside the ensemble")
    if w.seen_index == w.validation_index:
        raise ConfigError("world.seen_index and world.validation_index must differ")
    if not 0.0 <= w.rho <= 1.0:
        raise ConfigError("world.rho must lie in [0, 1]")
    if w.n_ids < 2 or w.samples_per_id < 2:
        raise ConfigError("world needs n_ids >= 2 and samples_per_id >= 2")
    if min(w.latent_dim, w.image_dim, w.feature_dim, w.generator_depth, w.encoder_depth) < 1:
        raise ConfigError("world dimensions must be >= 1")
    if w.noise_scale < 0:
        raise ConfigError("world.noise_scale must be >= 0")
    try:
        a.for_identity(0)
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None
    if not cfg.metrics.fars or not all(0.0 < f < 1.0 for f in cfg.metrics.fars):
        raise ConfigError("metrics.fars must be a nonempty list inside (0, 1)")
    d = cfg.diagnostics
    if d.probes < 1 or d.iters < 1 or d.resolution < 2 or not d.radius > 0 or d.surfaces < 0:
        raise ConfigError("diagnostics: probes, iters >= 1; resolution >= 2; radius > 0; surfaces >= 0")
    ab = cfg.ablation
    if not ab.ns or not ab.averaging or not ab.validation:
        raise ConfigError("ablation grid must be nonempty on every axis")
    if any(not isinstance(n, int) or n < 1 for n in ab.ns):
        raise ConfigError("ablation.ns must be positive integers")
    sw = cfg.sweep
    if sw.hyperparameter not in SWEEPABLE:
        raise ConfigError(f"sweep.hyperparameter must be one of {', '.join(SWEEPABLE)}")
    if not sw.values:
        raise ConfigError("sweep.values must be nonempty")
    if not sw.metrics or any(m not in SWEEP_METRICS for m in sw.metrics):
        raise ConfigError(f"sweep.metrics must be a nonempty subset of {', '.join(SWEEP_METRICS)}")


def validate_sweep(cfg: ExperimentConfig) -> None:
    """Check every swept point; only needed when a sweep actually runs."""
    for value in cfg.sweep.values:
        try:
            sweep_point(cfg, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep value {value!r}: {exc}") from None


def sweep_point(cfg: ExperimentConfig, value):
    """(world params, attack params) with one hyperparameter replaced.

    Sweeping ``n`` below ``k_top`` clips ``k_top`` to ``n``.
    """
    name = cfg.sweep.hyperparameter
    world, attack = cfg.world, cfg.attack
    if name == "rho":
        world = dataclasses.replace(world, rho=float(value))
        if not 0.0 <= world.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
    else:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"{name} takes integer values")
        changes = {name: value}
        if name == "n":
            changes["k_top"] = min(attack.k_top, value)
        attack = dataclasses.replace(attack, **changes)
        attack.for_identity(0)
    return world, attack


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved config with every default spelled out; lists instead of tuples."""

    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x

    doc = {"seed": cfg.seed, "identities": cfg.identities}
    for name in SECTIONS:
        section = getattr(cfg, name)
        doc[name] = {f.name: plain(getattr(section, f.name)) for f in dataclasses.fields(section)}
    return doc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(doc)
