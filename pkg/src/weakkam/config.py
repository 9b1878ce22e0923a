"""Run configuration: a JSON document mapped onto nested dataclasses.

Unknown keys are rejected at every level.  ``build_problem`` turns a
validated configuration into the grid, frame, Lagrangian and control set
used by every command.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .lagrangian import (
    BUILTIN_POTENTIALS,
    LagrangianSpec,
    constant_drift,
    constant_potential,
    control_radius_bound,
    load_custom_table,
    potential_by_name,
    tabulated_function,
    zero_drift,
)
from .lax_oleinik import DEFAULT_CFL_CELLS, cfl_check, n_steps
from .sr_structure import BUILTIN_FRAMES, ControlGrid, FieldSystem, TorusGrid, frame_by_name, tabulated_frame


class ConfigError(ValueError):
    pass


@dataclass
class FrameConfig:
    name: str = "grushin-periodic"
    file: str | None = None  # tabulated frame, row-major nodes, d*m values per line
    m: int | None = None


@dataclass
class LagrangianConfig:
    kind: str = "mane"
    V: Any = "zero"  # "zero", a constant vector, or {"file": path}
    G: Any = "zero"  # built-in name, a constant, or {"file": path}
    shift: float = 0.0
    table: str | None = None  # custom kind
    sigma: float | None = None
    K1: float | None = None
    K2: float | None = None


@dataclass
class GridConfig:
    n: int = 32
    d: int = 2


@dataclass
class ControlsConfig:
    n_u: int = 21
    radius: Any = "auto"
    cfl_cells: float = DEFAULT_CFL_CELLS


@dataclass
class TimeConfig:
    delta: float = 0.02
    T_max: float = 20.0


@dataclass
class CriticalConfig:
    K_modes: int = 3
    iters: int = 200
    restarts: int = 6
    tol: float = 1e-4
    max_iters: int = 20000
    slack: float = 0.02
    warm_start: bool = True  # solve on n/2 first when n >= 64
    c: float | None = None  # skip the estimators in aubry/mather when given


@dataclass
class BarrierConfig:
    T_min: float = 1.28
    T_max: float = 20.48
    sources: Any = "all"  # "all" (up to 1024 stratified nodes) or an integer cap
    base_steps: int = 64
    refine: str = "aubry"  # rows recomputed directly: "aubry", "all" or "none"
    max_refine: int = 16
    slope: float = 50.0
    stab_tol: float = 1e-3


@dataclass
class LPConfig:
    n_lp: int | None = None  # default n // 2
    n_u_lp: int = 5
    K_modes: int = 3
    tol: float = 1e-9


@dataclass
class ThresholdsConfig:
    aubry_eps: Any = "auto"
    w_min: float = 1e-6
    graph_tol: float = 0.1
    fixed_point_tol: float = 0.05
    t_check: float = 1.0


@dataclass
class ChecksConfig:
    inject_shift: list | None = None  # cells added to the Mather support (negative control)
    n_samples: int = 200


@dataclass
class RunConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    lagrangian: LagrangianConfig = field(default_factory=LagrangianConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    controls: ControlsConfig = field(default_factory=ControlsConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    critical: CriticalConfig = field(default_factory=CriticalConfig)
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    lp: LPConfig = field(default_factory=LPConfig)
    thresholds: ThresholdsConfig = field(default_factory=ThresholdsConfig)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    seed: int = 0
    output_dir: str = "out"
    base_dir: str = field(default=".", metadata={"internal": True})

    # -- io -------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "RunConfig":
        cfg = _build(cls, data, "config")
        cfg.base_dir = str(base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=str(path.parent))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def canonical_json(self) -> str:
        """Sorted compact JSON of everything that can change results
        (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        def positive(name, v):
            if v is None or not v > 0:
                raise ConfigError(f"{name} must be positive, got {v!r}")

        if self.grid.d < 1:
            raise ConfigError("grid.d must be >= 1")
        if self.grid.n < 4:
            raise ConfigError("grid.n must be >= 4")
        positive("time.delta", self.time.delta)
        positive("time.T_max", self.time.T_max)
        positive("critical.tol", self.critical.tol)
        positive("critical.slack", self.critical.slack)
        positive("lp.tol", self.lp.tol)
        positive("thresholds.w_min", self.thresholds.w_min)
        positive("thresholds.graph_tol", self.thresholds.graph_tol)
        positive("thresholds.fixed_point_tol", self.thresholds.fixed_point_tol)
        positive("thresholds.t_check", self.thresholds.t_check)
        positive("barrier.stab_tol", self.barrier.stab_tol)
        positive("controls.cfl_cells", self.controls.cfl_cells)
        if self.thresholds.aubry_eps != "auto":
            positive("thresholds.aubry_eps", self.thresholds.aubry_eps)
        if self.controls.radius != "auto":
            positive("controls.radius", self.controls.radius)
        if self.controls.n_u < 3 or self.controls.n_u % 2 == 0:
            raise ConfigError("controls.n_u must be odd and >= 3 so that u = 0 is a lattice point")
        if self.lp.n_u_lp < 3 or self.lp.n_u_lp % 2 == 0:
            raise ConfigError("lp.n_u_lp must be odd and >= 3")
        if self.critical.K_modes < 0 or self.lp.K_modes < 1:
            raise ConfigError("critical.K_modes must be >= 0 and lp.K_modes >= 1")
        if not 0 < self.barrier.T_min <= self.barrier.T_max:
            raise ConfigError("need 0 < barrier.T_min <= barrier.T_max")
        if self.barrier.max_refine < 1 or self.barrier.base_steps < 1:
            raise ConfigError("barrier.max_refine and barrier.base_steps must be >= 1")
        if self.barrier.refine not in ("aubry", "all", "none"):
            raise ConfigError("barrier.refine must be 'aubry', 'all' or 'none'")
        if self.barrier.sources != "all" and not (isinstance(self.barrier.sources, int) and self.barrier.sources > 0):
            raise ConfigError("barrier.sources must be 'all' or a positive integer")
        if self.lagrangian.kind not in ("mane", "custom"):
            raise ConfigError(f"lagrangian.kind must be 'mane' or 'custom', got {self.lagrangian.kind!r}")
        if self.lagrangian.kind == "custom":
            lc = self.lagrangian
            if lc.table is None or lc.sigma is None or lc.K1 is None or lc.K2 is None:
                raise ConfigError("custom Lagrangian needs table, sigma, K1 and K2")
        if self.frame.file is None and self.frame.name not in BUILTIN_FRAMES:
            raise ConfigError(f"unknown frame {self.frame.name!r}; built-ins: {sorted(BUILTIN_FRAMES)}")
        if isinstance(self.lagrangian.G, str) and self.lagrangian.G not in BUILTIN_POTENTIALS:
            raise ConfigError(f"unknown potential {self.lagrangian.G!r}; built-ins: {sorted(BUILTIN_POTENTIALS)}")
        if isinstance(self.lagrangian.V, str) and self.lagrangian.V != "zero":
            raise ConfigError("lagrangian.V must be 'zero', a vector or {'file': path}")
        n_lp = self.lp.n_lp or self.grid.n // 2
        if n_lp < 4:
            raise ConfigError("lp.n_lp must be >= 4")
        for name, T in (("time.T_max", self.time.T_max), ("barrier.T_min", self.barrier.T_min),
                        ("barrier.T_max", self.barrier.T_max), ("thresholds.t_check", self.thresholds.t_check)):
            try:
                n_steps(T, self.time.delta)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------


@dataclass
class Problem:
    grid: TorusGrid
    sys: FieldSystem
    spec: LagrangianSpec
    ctrl: ControlGrid
    step: float
    cfg: RunConfig

    @property
    def lp_grid(self) -> TorusGrid:
        return TorusGrid(self.grid.d, self.cfg.lp.n_lp or self.grid.n // 2)

    @property
    def lp_controls(self) -> ControlGrid:
        return ControlGrid(self.sys.m, self.ctrl.radius, self.cfg.lp.n_u_lp)


def _function_entry(value, what: str, cfg: RunConfig, width: int | None):
    if isinstance(value, dict):
        if set(value) != {"file"}:
            raise ConfigError(f"lagrangian.{what} object must be {{'file': path}}")
        table = np.loadtxt(cfg.resolve(value["file"]), comments="#", ndmin=2)
        n, d = cfg.grid.n, cfg.grid.d
        if table.shape[0] != n**d:
            raise ConfigError(f"{value['file']}: expected {n**d} rows, found {table.shape[0]}")
        if width is None and table.shape[1] == 1:
            table = table[:, 0]
        return tabulated_function(table.reshape((n,) * d + table.shape[1:]))
    return value


def build_problem(cfg: RunConfig) -> Problem:
    grid = TorusGrid(cfg.grid.d, cfg.grid.n)
    try:
        if cfg.frame.file is not None:
            sys = tabulated_frame(cfg.resolve(cfg.frame.file), cfg.grid.d, cfg.frame.m or cfg.grid.d)
        else:
            sys = frame_by_name(cfg.frame.name, cfg.grid.d)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"frame: {exc}") from exc
    if sys.d != grid.d:
        raise ConfigError(f"frame dimension {sys.d} != grid.d {grid.d}")

    lc = cfg.lagrangian
    try:
        if lc.kind == "mane":
            V = _function_entry(lc.V, "V", cfg, sys.m)
            if isinstance(V, str):
                V = zero_drift(sys.m)
            elif isinstance(V, (list, tuple)):
                if len(V) != sys.m:
                    raise ConfigError(f"lagrangian.V needs {sys.m} components")
                V = constant_drift(V)
            G = _function_entry(lc.G, "G", cfg, None)
            if isinstance(G, str):
                G = potential_by_name(G)
            elif isinstance(G, (int, float)):
                G = constant_potential(float(G))
            names = {"V": lc.V, "G": lc.G}
            spec = LagrangianSpec.mane(V, G, grid, sys.m, shift=lc.shift, names=names)
        else:
            table = load_custom_table(cfg.resolve(lc.table))
            spec = LagrangianSpec.custom(table, lc.sigma, lc.K1, lc.K2, names={"table": lc.table})
            if lc.shift:
                spec = spec.shifted(lc.shift)
    except ConfigError:
        raise
    except (ValueError, OSError) as exc:
        raise ConfigError(f"lagrangian: {exc}") from exc

    radius = control_radius_bound(spec) if cfg.controls.radius == "auto" else float(cfg.controls.radius)
    ctrl = ControlGrid(sys.m, radius, cfg.controls.n_u)
    try:
        cfl_check(grid, sys, ctrl, cfg.time.delta, cfg.controls.cfl_cells)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Problem(grid, sys, spec, ctrl, cfg.time.delta, cfg)
