"""Experiment configuration: TOML sections mapped onto frozen dataclasses.

Unknown keys are rejected. Relative paths are resolved against the config
file's directory. ``dump_config`` writes a document that loads back equal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .phantom import DEFAULT_SHAPES, PRIOR_TOTAL_COUNTS, PRIOR_WINDOWS, FramingSchedule
from .recon import METHODS, NetworkConfig, ReconConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridSection:
    nx: int = 64
    ny: int = 64
    pixel_size: float = 3.0
    nz: int = 0                       # 0 means a 2-D study
    slice_thickness: float = 0.0


@dataclass(frozen=True)
class GeometrySection:
    n_angles: int = 0                 # 0: one view per image column
    bin_size: float = 0.0             # 0: the pixel size


@dataclass(frozen=True)
class PhantomSection:
    supersample: int = 5
    shapes: tuple[dict, ...] = DEFAULT_SHAPES


@dataclass(frozen=True)
class ScheduleSection:
    preset: str = "desk"              # desk | protocol | custom
    durations: tuple[float, ...] = ()
    starts: tuple[float, ...] = ()

    def build(self) -> FramingSchedule:
        if self.preset == "desk":
            return FramingSchedule.desk()
        if self.preset == "protocol":
            return FramingSchedule.protocol()
        if self.preset == "custom":
            return FramingSchedule(self.durations, self.starts or None)
        raise ConfigError(f"unknown schedule preset {self.preset!r}")


@dataclass(frozen=True)
class SimulationSection:
    background_fraction: float = 0.2
    frame_counts: tuple[float, ...] = (20000.0, 120000.0, 400000.0)
    total_counts: float = 0.0         # > 0 replaces frame_counts with one global scale
    realizations: int = 1


@dataclass(frozen=True)
class KernelSection:
    k: int = 48
    sigma: float = 1.0
    window: tuple[int, ...] = ()
    row_normalize: bool = False
    composite_windows: tuple[tuple[float, float], ...] = PRIOR_WINDOWS
    composite_iters: int = 60
    composite_source: str = "noisy"
    prior_total_counts: float = PRIOR_TOTAL_COUNTS   # 0: rebin the study's own frames instead


@dataclass(frozen=True)
class EvalSection:
    iterations: tuple[int, ...] = (10, 20, 30, 40, 50, 60)
    rois: tuple[str, ...] = ("blood", "tumor")
    background_roi: str = "white"
    pgm: bool = True


DEFAULT_RECON = {
    "mlem": ReconConfig("mlem"),
    "kem": ReconConfig("kem"),
    "dip_ot": ReconConfig("dip_ot"),
    "neural_kem": ReconConfig("neural_kem"),
    "dip_admm": ReconConfig("dip_admm", subiters=50),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    grid: GridSection = GridSection()
    geometry: GeometrySection = GeometrySection()
    phantom: PhantomSection = PhantomSection()
    schedule: ScheduleSection = ScheduleSection()
    simulation: SimulationSection = SimulationSection()
    kernel: KernelSection = KernelSection()
    network: NetworkConfig = NetworkConfig()
    recon: dict = field(default_factory=lambda: dict(DEFAULT_RECON))
    eval: EvalSection = EvalSection()
    init_image: str = ""              # raw image path replacing the uniform start
    base_dir: str = "."

    def recon_config(self, method: str) -> ReconConfig:
        method = method.replace("-", "_")
        if method not in self.recon:
            raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
        return dataclasses.replace(self.recon[method], network=self.network, seed=self.seed)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        """Plain-data form (TOML/JSON friendly); ``base_dir`` is not part of it."""
        out = {"seed": self.seed}
        if self.init_image:
            out["init_image"] = self.init_image
        for name in ("grid", "geometry", "phantom", "schedule", "simulation", "kernel", "network", "eval"):
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        out["recon"] = {m: _plain({k: v for k, v in dataclasses.asdict(c).items() if k not in ("method", "network", "seed")})
                        for m, c in self.recon.items()}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(value, current, where: str):
    """Shape ``value`` like the default ``current`` (tuples stay tuples)."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        return tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in value)
    return value


def _section(cls, table, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    default = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        current = getattr(default, key)
        if key == "scale_rule":
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.scale_rule: expected 'peak', 'mean' or a number")
            kwargs[key] = value if isinstance(value, str) else float(value)
        elif key == "shapes":
            kwargs[key] = _shapes(value, where)
        else:
            kwargs[key] = _coerce(value, current, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _shapes(value, where):
    if not isinstance(value, list):
        raise ConfigError(f"{where}.shapes: expected an array of tables")
    out = []
    for i, s in enumerate(value):
        if not isinstance(s, dict):
            raise ConfigError(f"{where}.shapes[{i}]: expected a table")
        extra = set(s) - {"region", "center_mm", "semi_axes_mm", "angle_deg"}
        missing = {"region", "center_mm", "semi_axes_mm"} - set(s)
        if extra or missing:
            raise ConfigError(f"{where}.shapes[{i}]: unknown keys {sorted(extra)} / missing {sorted(missing)}")
        shape = {"region": s["region"], "center_mm": tuple(map(float, s["center_mm"])),
                 "semi_axes_mm": tuple(map(float, s["semi_axes_mm"]))}
        if "angle_deg" in s:
            shape["angle_deg"] = float(s["angle_deg"])
        out.append(shape)
    return tuple(out)


SECTIONS = {
    "grid": GridSection,
    "geometry": GeometrySection,
    "phantom": PhantomSection,
    "schedule": ScheduleSection,
    "simulation": SimulationSection,
    "kernel": KernelSection,
    "network": NetworkConfig,
    "eval": EvalSection,
}


def config_from_dict(doc: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    unknown = sorted(set(doc) - set(SECTIONS) - {"recon", "seed", "init_image"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    kwargs = {name: _section(cls, doc[name], name) for name, cls in SECTIONS.items() if name in doc}
    if "seed" in doc:
        kwargs["seed"] = _coerce(doc["seed"], 0, "seed")
    if "init_image" in doc:
        kwargs["init_image"] = _coerce(doc["init_image"], "", "init_image")
    recon = dict(DEFAULT_RECON)
    tables = doc.get("recon", {})
    if not isinstance(tables, dict):
        raise ConfigError("[recon] must be a table of per-method tables")
    for method, table in tables.items():
        if method not in DEFAULT_RECON:
            raise ConfigError(f"[recon.{method}] is not a method; choose from {METHODS}")
        if not isinstance(table, dict):
            raise ConfigError(f"[recon.{method}] must be a table")
        bad = sorted(set(table) & {"method", "network", "seed"})
        if bad:
            raise ConfigError(f"[recon.{method}] unknown keys: {', '.join(bad)}")
        base = DEFAULT_RECON[method]
        merged = {k: v for k, v in dataclasses.asdict(base).items() if k not in ("network",)}
        merged.update(table)
        merged.pop("network", None)
        recon[method] = _section(_ReconTable, merged, f"recon.{method}").build()
    kwargs["recon"] = recon
    cfg = ExperimentConfig(base_dir=str(Path(base_dir)), **kwargs)
    _validate(cfg)
    return cfg


@dataclass(frozen=True)
class _ReconTable:
    method: str = "mlem"
    outer_iters: int = 60
    subiters: int = 150
    rho: float = 0.05
    admm_recon_subiters: int = 4
    seed: int = 0
    guard: bool = True
    guard_retries: int = 3
    checkpoints: tuple[int, ...] = ()

    def build(self) -> ReconConfig:
        try:
            return ReconConfig(**dataclasses.asdict(self))
        except ValueError as exc:
            raise ConfigError(f"[recon.{self.method}] {exc}") from exc


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.schedule.build()
    except ValueError as exc:
        raise ConfigError(f"[schedule] {exc}") from exc
    n = cfg.schedule.build().n_frames
    if cfg.simulation.total_counts <= 0 and len(cfg.simulation.frame_counts) != n:
        raise ConfigError(f"[simulation] frame_counts needs {n} entries (one per frame)")
    if cfg.simulation.realizations < 1:
        raise ConfigError("[simulation] realizations must be >= 1")
    if cfg.kernel.prior_total_counts < 0:
        raise ConfigError("[kernel] prior_total_counts must be >= 0")
    if cfg.kernel.composite_source not in ("noisy", "noisefree"):
        raise ConfigError("[kernel] composite_source must be 'noisy' or 'noisefree'")


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse a TOML file; ``None`` gives the all-default configuration."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, path.resolve().parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
