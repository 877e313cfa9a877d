"""Plain-text experiment configs and the builders that turn them into objects.

Format is INI (configparser) with one section per concern.  Keys not listed
here are rejected so typos fail loudly.  Multi-number values are
whitespace-separated.

[mesh]      kind = structured | file ; dim ; size ; file
[space]     method = ccg | dg-1 | dg-2 | dg-3
[physics]   permeability = uniform | lens | raster ; kappa ; kappa_in ;
            lens_box ; raster_file ; raster_log10 ; porosity ;
            d_m ; a_l ; a_t ; viscosity = none | power | quarter_mix ;
            mu0 ; alpha ; beta ; mu_s ; mu_o
[wells]     rate ; injection_box ; production_box ; injected_concentration
[forms]     epsilon ; sigma_p ; sigma_c ; bc = noflow | dirichlet
[time]      t_end ; dt ; scheme = be | cn
[output]    snapshot_times ; profile_time ; profile_line ; profile_samples
[mms]       sizes ; methods                      (mms-convergence only)
[nnz]       structured_2d ; unstructured_file ; structured_3d ;
            value_cell_cap                       (nnz-report only)
[matrix1d]  epsilons ; sigmas ; sizes            (matrix-1d only)

Boxes and lines are flattened coordinate lists: a 2D box is x0 x1 y0 y1,
a 2D line is x0 y0 x1 y1.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from importlib import resources

from ..mesh import Mesh, generate_structured, load_mesh
from ..spaces import CcgSpace, DgSpace
from ..physics import (DispersionParams, PermeabilityField, ViscosityModel,
                       WellSources, load_raster)
from ..assembly import FlowFormParams, TransportFormParams
from ..solver import DisplacementProblem, TimeGrid


class ConfigError(ValueError):
    pass


_KNOWN_KEYS = {
    "mesh": {"kind", "dim", "size", "file"},
    "space": {"method"},
    "physics": {"permeability", "kappa", "kappa_in", "lens_box",
                "raster_file", "raster_log10", "porosity", "d_m", "a_l",
                "a_t", "viscosity", "mu0", "alpha", "beta", "mu_s", "mu_o"},
    "wells": {"rate", "injection_box", "production_box",
              "injected_concentration"},
    "forms": {"epsilon", "sigma_p", "sigma_c", "bc"},
    "time": {"t_end", "dt", "scheme"},
    "output": {"snapshot_times", "profile_time", "profile_line",
               "profile_samples"},
    "mms": {"sizes", "methods"},
    "nnz": {"structured_2d", "unstructured_file", "structured_3d",
            "value_cell_cap"},
    "matrix1d": {"epsilons", "sigmas", "sizes"},
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split())


def _box(text: str, dim: int, what: str) -> tuple[tuple[float, float], ...]:
    vals = _floats(text)
    if len(vals) != 2 * dim:
        raise ConfigError(f"{what}: expected {2 * dim} numbers, got {len(vals)}")
    box = tuple((vals[2 * i], vals[2 * i + 1]) for i in range(dim))
    for lo, hi in box:
        if hi <= lo:
            raise ConfigError(f"{what}: empty interval [{lo}, {hi}]")
    return box


@dataclass
class SimulationConfig:
    """Validated contents of one experiment config file."""

    path: str
    mesh_kind: str = "structured"
    dim: int = 2
    size: int = 64
    mesh_file: str | None = None
    method: str = "ccg"
    permeability: str = "uniform"
    kappa: float = 1.0
    kappa_in: float = 1.0
    lens_box: tuple | None = None
    raster_file: str | None = None
    raster_log10: bool = False
    porosity: float = 1.0
    d_m: float = 1.0
    a_l: float = 0.0
    a_t: float = 0.0
    viscosity_kind: str = "none"
    viscosity_args: dict = field(default_factory=dict)
    rate: float = 0.0
    injection_box: tuple | None = None
    production_box: tuple | None = None
    injected_concentration: float = 1.0
    epsilon: float = -1.0
    sigma_p: float = 1.0
    sigma_c: float = 1.0
    bc: str = "noflow"
    t_end: float = 1.0
    dt: float = 0.05
    scheme: str = "be"
    snapshot_times: tuple[float, ...] = ()
    profile_time: float | None = None
    profile_line: tuple[float, ...] | None = None
    profile_samples: int = 201
    mms_sizes: tuple[int, ...] = (8, 16, 32)
    mms_methods: tuple[str, ...] = ("ccg", "dg-1")
    nnz_structured_2d: tuple[int, ...] = (32, 64, 128)
    nnz_unstructured_file: str | None = None
    nnz_structured_3d: tuple[int, ...] = (4, 8, 16)
    nnz_value_cell_cap: int = 100_000
    m1d_epsilons: tuple[float, ...] = (-1.0, 0.0, 1.0)
    m1d_sigmas: tuple[float, ...] = (2.0 / 9.0, 0.3, 0.5, 1.0, 1.4, 1.709, 1.8)
    m1d_sizes: tuple[int, ...] = (8, 16, 64)

    # ---- builders ------------------------------------------------------

    def build_mesh(self, mesh_file: str | None = None) -> Mesh:
        override = mesh_file or self.mesh_file
        if self.mesh_kind == "file":
            if override is None:
                raise ConfigError("mesh kind is 'file' but no file given "
                                  "(config [mesh] file or --mesh-file)")
            return load_mesh(override)
        return generate_structured(self.dim, self.size)

    def build_space(self, mesh: Mesh):
        if self.method == "ccg":
            policy = "dirichlet" if self.bc == "dirichlet" else "mirror"
            return CcgSpace(mesh, boundary_policy=policy)
        return DgSpace(mesh, int(self.method.split("-")[1]))

    def permeability_field(self) -> PermeabilityField:
        if self.permeability == "uniform":
            return PermeabilityField.uniform(self.kappa)
        if self.permeability == "lens":
            return PermeabilityField.lens(self.kappa_in, self.kappa, self.lens_box)
        values = load_raster(self.raster_file, log10=self.raster_log10)
        return PermeabilityField.raster(values)

    def viscosity_model(self) -> ViscosityModel | None:
        if self.viscosity_kind == "none":
            return None
        if self.viscosity_kind == "power":
            return ViscosityModel.power(**self.viscosity_args)
        return ViscosityModel.quarter_mix(**self.viscosity_args)

    def dispersion(self) -> DispersionParams:
        return DispersionParams(self.d_m, self.a_l, self.a_t)

    def wells(self) -> WellSources | None:
        if self.injection_box is None:
            return None
        return WellSources(self.injection_box, self.production_box,
                           self.rate, self.injected_concentration)

    def flow_params(self) -> FlowFormParams:
        return FlowFormParams(self.epsilon, self.sigma_p, bc=self.bc)

    def transport_params(self) -> TransportFormParams:
        return TransportFormParams(self.epsilon, self.sigma_c,
                                   porosity=self.porosity, bc=self.bc)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.t_end, self.dt, self.scheme)

    def build_problem(self, mesh: Mesh | None = None, space=None,
                      mesh_file: str | None = None) -> DisplacementProblem:
        if mesh is None:
            mesh = self.build_mesh(mesh_file)
        if space is None:
            space = self.build_space(mesh)
        return DisplacementProblem(
            space=space,
            permeability=self.permeability_field().cell_values(mesh),
            flow_params=self.flow_params(),
            transport_params=self.transport_params(),
            dispersion=self.dispersion(),
            viscosity=self.viscosity_model(),
            wells=self.wells(),
        )


def load_config(path: str) -> SimulationConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: "
                              f"{', '.join(sorted(unknown))}")

    cfg = SimulationConfig(path=path)
    get = parser.get

    if parser.has_section("mesh"):
        s = parser["mesh"]
        cfg.mesh_kind = s.get("kind", cfg.mesh_kind)
        cfg.dim = s.getint("dim", cfg.dim)
        cfg.size = s.getint("size", cfg.size)
        cfg.mesh_file = s.get("file", None)
    if cfg.mesh_kind not in ("structured", "file"):
        raise ConfigError(f"mesh kind must be structured|file, got {cfg.mesh_kind}")
    if cfg.mesh_kind == "file" and cfg.mesh_file and not os.path.exists(cfg.mesh_file):
        raise ConfigError(f"mesh file does not exist: {cfg.mesh_file}")

    if parser.has_section("space"):
        cfg.method = get("space", "method", fallback=cfg.method).strip()
    if cfg.method not in ("ccg", "dg-1", "dg-2", "dg-3"):
        raise ConfigError(f"space method must be ccg|dg-1|dg-2|dg-3, got {cfg.method}")

    if parser.has_section("physics"):
        s = parser["physics"]
        cfg.permeability = s.get("permeability", cfg.permeability)
        cfg.kappa = s.getfloat("kappa", cfg.kappa)
        cfg.kappa_in = s.getfloat("kappa_in", cfg.kappa_in)
        if "lens_box" in s:
            cfg.lens_box = _box(s["lens_box"], cfg.dim, "lens_box")
        cfg.raster_file = s.get("raster_file", None)
        cfg.raster_log10 = s.getboolean("raster_log10", cfg.raster_log10)
        cfg.porosity = s.getfloat("porosity", cfg.porosity)
        cfg.d_m = s.getfloat("d_m", cfg.d_m)
        cfg.a_l = s.getfloat("a_l", cfg.a_l)
        cfg.a_t = s.getfloat("a_t", cfg.a_t)
        cfg.viscosity_kind = s.get("viscosity", cfg.viscosity_kind)
        if cfg.viscosity_kind == "power":
            cfg.viscosity_args = {"mu0": s.getfloat("mu0", 1.0),
                                  "alpha": s.getfloat("alpha", 0.0),
                                  "beta": s.getfloat("beta", 1.0)}
        elif cfg.viscosity_kind == "quarter_mix":
            cfg.viscosity_args = {"mu_s": s.getfloat("mu_s"),
                                  "mu_o": s.getfloat("mu_o")}
        elif cfg.viscosity_kind != "none":
            raise ConfigError(f"viscosity must be none|power|quarter_mix, "
                              f"got {cfg.viscosity_kind}")
    if cfg.permeability not in ("uniform", "lens", "raster"):
        raise ConfigError(f"permeability must be uniform|lens|raster, "
                          f"got {cfg.permeability}")
    if cfg.permeability == "lens" and cfg.lens_box is None:
        raise ConfigError("lens permeability needs lens_box")
    if cfg.permeability == "raster":
        if cfg.raster_file is None:
            raise ConfigError("raster permeability needs raster_file")
        cfg.raster_file = _resolve_data_file(cfg.raster_file, "raster file")
    if not cfg.kappa > 0 or not cfg.kappa_in > 0:
        raise ConfigError("permeability values must be positive")
    if not cfg.porosity > 0:
        raise ConfigError("porosity must be positive")

    if parser.has_section("wells"):
        s = parser["wells"]
        cfg.rate = s.getfloat("rate", cfg.rate)
        cfg.injection_box = _box(s["injection_box"], cfg.dim, "injection_box")
        cfg.production_box = _box(s["production_box"], cfg.dim, "production_box")
        cfg.injected_concentration = s.getfloat("injected_concentration",
                                                cfg.injected_concentration)
        if not cfg.rate > 0:
            raise ConfigError("well rate must be positive")

    if parser.has_section("forms"):
        s = parser["forms"]
        cfg.epsilon = s.getfloat("epsilon", cfg.epsilon)
        cfg.sigma_p = s.getfloat("sigma_p", cfg.sigma_p)
        cfg.sigma_c = s.getfloat("sigma_c", cfg.sigma_c)
        cfg.bc = s.get("bc", cfg.bc)
    if cfg.bc not in ("noflow", "dirichlet"):
        raise ConfigError(f"bc must be noflow|dirichlet, got {cfg.bc}")
    if not (cfg.sigma_p > 0 and cfg.sigma_c > 0):
        raise ConfigError("penalties sigma_p, sigma_c must be positive")

    if parser.has_section("time"):
        s = parser["time"]
        cfg.t_end = s.getfloat("t_end", cfg.t_end)
        cfg.dt = s.getfloat("dt", cfg.dt)
        cfg.scheme = s.get("scheme", cfg.scheme)
    if cfg.scheme not in ("be", "cn"):
        raise ConfigError(f"scheme must be be|cn, got {cfg.scheme}")

    if parser.has_section("output"):
        s = parser["output"]
        if "snapshot_times" in s:
            cfg.snapshot_times = _floats(s["snapshot_times"])
        if "profile_time" in s:
            cfg.profile_time = s.getfloat("profile_time")
        if "profile_line" in s:
            line = _floats(s["profile_line"])
            if len(line) != 2 * cfg.dim:
                raise ConfigError(f"profile_line: expected {2 * cfg.dim} "
                                  f"numbers, got {len(line)}")
            cfg.profile_line = line
        cfg.profile_samples = s.getint("profile_samples", cfg.profile_samples)
    for t in cfg.snapshot_times + ((cfg.profile_time,)
                                   if cfg.profile_time is not None else ()):
        if not 0.0 <= t <= cfg.t_end + 1e-12:
            raise ConfigError(f"output time {t} outside [0, {cfg.t_end}]")

    if parser.has_section("mms"):
        s = parser["mms"]
        if "sizes" in s:
            cfg.mms_sizes = _ints(s["sizes"])
        if "methods" in s:
            cfg.mms_methods = tuple(s["methods"].split())
        bad = set(cfg.mms_methods) - {"ccg", "dg-1"}
        if bad:
            raise ConfigError(f"mms methods must be among ccg, dg-1: {bad}")

    if parser.has_section("nnz"):
        s = parser["nnz"]
        if "structured_2d" in s:
            cfg.nnz_structured_2d = _ints(s["structured_2d"])
        cfg.nnz_unstructured_file = s.get("unstructured_file", None)
        if "structured_3d" in s:
            cfg.nnz_structured_3d = _ints(s["structured_3d"])
        cfg.nnz_value_cell_cap = s.getint("value_cell_cap", cfg.nnz_value_cell_cap)
        if cfg.nnz_unstructured_file:
            cfg.nnz_unstructured_file = _resolve_data_file(
                cfg.nnz_unstructured_file, "unstructured mesh")

    if parser.has_section("matrix1d"):
        s = parser["matrix1d"]
        if "epsilons" in s:
            cfg.m1d_epsilons = _floats(s["epsilons"])
        if "sigmas" in s:
            cfg.m1d_sigmas = _floats(s["sigmas"])
        if "sizes" in s:
            cfg.m1d_sizes = _ints(s["sizes"])

    return cfg


def _resolve_data_file(name: str, what: str) -> str:
    """Return name if it exists on disk, else look in the package data dir."""
    if os.path.exists(name):
        return name
    pkg = resources.files("ccgflow") / "data" / name
    if not pkg.is_file():
        raise ConfigError(f"{what} not found: {name}")
    return str(pkg)


def builtin_config_path(name: str) -> str:
    """Path of a shipped config, e.g. builtin_config_path('five_spot')."""
    ref = resources.files("ccgflow") / "configs" / f"{name}.ini"
    if not ref.is_file():
        shipped = sorted(p.name[:-4] for p in
                         (resources.files("ccgflow") / "configs").iterdir()
                         if p.name.endswith(".ini"))
        raise ConfigError(f"no shipped config named {name!r}; "
                          f"available: {', '.join(shipped)}")
    return str(ref)
