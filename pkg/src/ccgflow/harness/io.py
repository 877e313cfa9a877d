"""Output writers and profile utilities for the experiment drivers.

CSV files are plain comma-separated text with a header row, floats printed
with repr-faithful %.17g so identical runs produce bit-identical files.
VTK output is the legacy ASCII unstructured-grid dialect, carrying per-cell
constants and (optionally) vertex-sampled reconstructions as point data.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import numpy as np

from ..mesh import Mesh
from ..spaces import CcgSpace

_VTK_TYPE = {1: 3, 2: 5, 3: 10}  # line, triangle, tetrahedron


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path: str, header: Sequence[str], rows) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")
    return path


def write_csv_profile(path: str, s: np.ndarray, values: np.ndarray) -> str:
    """Cross-section profile: columns s (arclength), value."""
    return write_csv(path, ("s", "value"), zip(s, values))


def read_csv_profile(path: str) -> tuple[np.ndarray, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return np.atleast_1d(data["s"]), np.atleast_1d(data["value"])


def write_vtk(mesh: Mesh, path: str, cell_data: Optional[dict] = None,
              point_data: Optional[dict] = None,
              title: str = "ccgflow fields") -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    nv, nc = len(mesh.vertices), len(mesh.cells)
    pts = np.zeros((nv, 3))
    pts[:, : mesh.dim] = mesh.vertices
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n%s\nASCII\n" % title)
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d double\n" % nv)
        for p in pts:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))
        k = mesh.dim + 1
        fh.write("CELLS %d %d\n" % (nc, nc * (k + 1)))
        for cell in mesh.cells:
            fh.write(" ".join([str(k)] + [str(int(v)) for v in cell]) + "\n")
        fh.write("CELL_TYPES %d\n" % nc)
        fh.write(("%d\n" % _VTK_TYPE[mesh.dim]) * nc)
        for label, data, n in (("CELL_DATA", cell_data, nc),
                               ("POINT_DATA", point_data, nv)):
            if not data:
                continue
            fh.write("%s %d\n" % (label, n))
            for name, values in data.items():
                values = np.asarray(values, float)
                if len(values) != n:
                    raise ValueError(
                        f"field {name!r}: {len(values)} values for {n} slots")
                fh.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
                for v in values:
                    fh.write("%.17g\n" % v)
    return path


def vertex_sampled(space, values, data=None) -> np.ndarray:
    """Reconstructed field at mesh vertices, averaged over incident cells
    (the point-sampled companion of the per-cell output)."""
    mesh = space.mesh
    values = np.asarray(values, float)
    if isinstance(space, CcgSpace):
        g = (space.gradient_op @ values).reshape(-1, mesh.dim)
        g = g + space.gradient_offset(data)
        rel = mesh.cell_vertices - mesh.cell_centroids[:, None, :]
        corner = values[:, None] + np.einsum("cd,cvd->cv", g, rel)
    else:
        lam = np.eye(mesh.dim + 1)
        phi = space.eval_basis(lam)                        # (d+1, nb)
        corner = np.einsum("vb,cb->cv", phi, values[space.dof_map])
    out = np.zeros(len(mesh.vertices))
    cnt = np.zeros(len(mesh.vertices))
    np.add.at(out, mesh.cells, corner)
    np.add.at(cnt, mesh.cells, 1.0)
    return out / cnt


def profile_points(line: Sequence[float], n: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Sample points and arclengths along a segment.

    line: flat (start..., end...) coordinates, e.g. (0, 0, 1, 1) for the
    unit-square diagonal.
    """
    line = np.asarray(line, float)
    d = len(line) // 2
    a, b = line[:d], line[d:]
    t = np.linspace(0.0, 1.0, n)
    pts = a + t[:, None] * (b - a)
    return pts, t * float(np.linalg.norm(b - a))


def first_crossing(s: np.ndarray, v: np.ndarray, level: float
                   ) -> Optional[float]:
    """Arclength of the first downward crossing of `level`, scanning from
    s[0]; linear interpolation between samples; None if no crossing."""
    for i in range(len(v) - 1):
        if v[i] >= level and v[i + 1] < level:
            f = (v[i] - level) / (v[i] - v[i + 1])
            return float(s[i] + f * (s[i + 1] - s[i]))
    return None


def front_width(s: np.ndarray, v: np.ndarray, lo: float = 0.25,
                hi: float = 0.75) -> Optional[float]:
    """Distance between the first hi- and lo-level downward crossings."""
    s_hi, s_lo = first_crossing(s, v, hi), first_crossing(s, v, lo)
    if s_hi is None or s_lo is None:
        return None
    return s_lo - s_hi


def convergence_rates(h: Sequence[float], errors: Sequence[float]
                      ) -> list[float]:
    """rate_i = log(e_{i-1}/e_i) / log(h_{i-1}/h_i), one per refinement."""
    h, errors = np.asarray(h, float), np.asarray(errors, float)
    return [float(np.log(errors[i - 1] / errors[i])
                  / np.log(h[i - 1] / h[i])) for i in range(1, len(errors))]
