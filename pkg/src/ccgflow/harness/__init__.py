"""Experiment CLI: configuration, drivers, and CSV/VTK output."""

from .config import load_config, builtin_config_path
from .io import (write_vtk, write_csv, write_csv_profile, read_csv_profile,
                 profile_points, front_width, first_crossing,
                 convergence_rates, vertex_sampled)

__all__ = [
    "load_config", "builtin_config_path", "write_vtk", "write_csv",
    "write_csv_profile", "read_csv_profile", "profile_points", "front_width",
    "first_crossing", "convergence_rates", "vertex_sampled",
]
