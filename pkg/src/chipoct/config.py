"""Experiment configuration: a versioned YAML file mapped onto frozen dataclasses.

Quantities in the file carry their unit in the key name (``_ms``, ``_gauss``,
``_mm``); everything is converted to SI on load.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .constants import GAUSS, PhysicalConstants
from .oct import CL_OCT_WEIGHTS, QU_OCT_WEIGHTS, CostWeights
from .trap import ChipGeometry

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrapConfig:
    table: str | None = None
    central_segment_length_mm: float = ChipGeometry.central_segment_length * 1e3
    leg_length_mm: float = ChipGeometry.leg_length * 1e3
    wire_current: float = ChipGeometry.wire_current
    longitudinal_offset_gauss: float = ChipGeometry.longitudinal_offset_field / GAUSS
    map_range_gauss: tuple = (3.5, 23.0)
    map_samples: int = 129
    report_bias_gauss: tuple = ()

    def geometry(self) -> ChipGeometry:
        return ChipGeometry(
            central_segment_length=self.central_segment_length_mm * 1e-3,
            leg_length=self.leg_length_mm * 1e-3,
            wire_current=self.wire_current,
            longitudinal_offset_field=self.longitudinal_offset_gauss * GAUSS,
        )


@dataclass(frozen=True)
class RampConfig:
    final_time_ms: float = 150.0
    node_count: int = 2048
    bias_start_gauss: float = 21.5
    bias_end_gauss: float = 4.5
    init: str = "sta"  # sta | linear | file
    file: str | None = None


@dataclass(frozen=True)
class OptimizeConfig:
    mode: str = "qu-oct"
    weights: tuple | None = None  # defaults per mode
    epsilon: float = 3e-12
    max_iter: int = 30_000
    scheme: str = "nesterov"
    stagnation_window: int = 10_000
    stagnation_tol: float = 1e-8
    method: str = "verlet"

    def cost_weights(self) -> CostWeights:
        if self.weights is None:
            return QU_OCT_WEIGHTS if self.mode == "qu-oct" else CL_OCT_WEIGHTS
        return CostWeights(*self.weights)


@dataclass(frozen=True)
class SweepConfig:
    final_times_ms: tuple = (100.0, 120.0, 140.0, 160.0, 180.0, 200.0)
    methods: tuple = ("sta", "cl-oct", "qu-oct")
    workers: int = 1


@dataclass(frozen=True)
class GpeConfig:
    scenario: str = "harmonic"  # harmonic | chip
    points: int = 64
    dt_us: float = 1.0
    hold_ms: float = 20.0
    transport_distance_um: float = 10.0
    final_time_ms: float = 40.0
    extents_um: tuple | None = None  # chip scenario box
    record_every: int = 1000
    com_threshold: float = 0.02
    width_threshold: float = 0.05


@dataclass(frozen=True)
class GradientCheckConfig:
    ramps: int = 10
    directions: int = 3
    node_count: int = 32768
    step: float = 1e-4
    tolerance: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    schema: int = SCHEMA_VERSION
    atom_count: float = 1e5
    trap: TrapConfig = field(default_factory=TrapConfig)
    ramp: RampConfig = field(default_factory=RampConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gpe: GpeConfig = field(default_factory=GpeConfig)
    gradient_check: GradientCheckConfig = field(default_factory=GradientCheckConfig)
    output: str = "out"
    seed: int = 0
    base_dir: str = "."

    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(atom_count=self.atom_count)

    def path(self, name: str | None) -> Path | None:
        if name is None:
            return None
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self, command: str | None = None):
        """Check every field before any computation starts."""
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema}")
        if not self.atom_count > 0:
            raise ConfigError("atom_count must be positive")
        t, r, o, s, g = self.trap, self.ramp, self.optimize, self.sweep, self.gpe
        if t.table is not None and not self.path(t.table).is_file():
            raise ConfigError(f"trap table {t.table} does not exist")
        if len(t.map_range_gauss) != 2 or not 0 < t.map_range_gauss[0] < t.map_range_gauss[1]:
            raise ConfigError("trap.map_range_gauss must be [low, high] with 0 < low < high")
        if t.map_samples < 16:
            raise ConfigError("trap.map_samples must be at least 16")
        if min(t.central_segment_length_mm, t.leg_length_mm, t.wire_current) <= 0:
            raise ConfigError("wire lengths and current must be positive")
        if not r.final_time_ms > 0:
            raise ConfigError("ramp.final_time_ms must be positive")
        if r.node_count < 64:
            raise ConfigError("ramp.node_count must be at least 64")
        if r.init not in ("sta", "linear", "file"):
            raise ConfigError(f"ramp.init must be sta, linear or file, not {r.init!r}")
        if r.init == "file" and (r.file is None or not self.path(r.file).is_file()):
            raise ConfigError(f"ramp file {r.file} does not exist")
        if o.mode not in ("cl-oct", "qu-oct"):
            raise ConfigError(f"optimize.mode must be cl-oct or qu-oct, not {o.mode!r}")
        if o.weights is not None:
            if len(o.weights) != 3:
                raise ConfigError("optimize.weights needs three values")
            try:
                o.cost_weights()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if not o.epsilon > 0 or o.max_iter < 0:
            raise ConfigError("optimize.epsilon must be positive and max_iter non-negative")
        if o.scheme not in ("fixed", "nesterov") or o.method not in ("verlet", "rk4"):
            raise ConfigError("optimize.scheme must be fixed|nesterov, method verlet|rk4")
        if command == "sweep" and not s.final_times_ms:
            raise ConfigError("sweep.final_times_ms is empty")
        if any(not v > 0 for v in s.final_times_ms):
            raise ConfigError("sweep durations must be positive")
        if set(s.methods) - {"sta", "cl-oct", "qu-oct"} or s.workers < 1:
            raise ConfigError("sweep.methods must be among sta, cl-oct, qu-oct; workers >= 1")
        if g.scenario not in ("harmonic", "chip"):
            raise ConfigError("gpe.scenario must be harmonic or chip")
        if g.points < 32 or g.points & (g.points - 1):
            raise ConfigError("gpe.points must be a power of two >= 32")
        if min(g.dt_us, g.final_time_ms, g.transport_distance_um) <= 0 or g.hold_ms < 0:
            raise ConfigError("gpe time step, durations and distance must be positive")
        if g.com_threshold < 0 or g.width_threshold < 0:
            raise ConfigError("gpe thresholds must be non-negative")
        gc = self.gradient_check
        if gc.ramps < 1 or gc.directions < 1 or gc.node_count < 64 or not gc.step > 0:
            raise ConfigError("gradient_check settings out of range")
        return self


_SECTIONS = {"trap": TrapConfig, "ramp": RampConfig, "optimize": OptimizeConfig,
             "sweep": SweepConfig, "gpe": GpeConfig, "gradient_check": GradientCheckConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kw)


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    data = dict(data or {})
    if "schema" not in data:
        raise ConfigError("config lacks the 'schema' version field")
    kw = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            kw[key] = _build(cls, data.pop(key), key)
    top = _build(ExperimentConfig, data, "config")
    return dataclasses.replace(top, base_dir=str(base_dir), **kw)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data, p.parent)


def dump_config(config: ExperimentConfig) -> str:
    d = dataclasses.asdict(config)
    d.pop("base_dir")

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return yaml.safe_dump(plain(d), sort_keys=False)
