"""Simplicial meshes: structured generators, file I/O, faces, and stencils.

A mesh stores vertices and cells (d+1 vertex ids per cell) and derives the
face topology: every face knows its vertex set, measure, barycenter, a fixed
unit normal, and its one or two adjacent cells.  Interior face normals point
from the lower-id cell to the higher-id cell; boundary normals point outward.

Face stencils are the cell neighborhoods used by the barycentric trace
interpolator: for each interior face, d+1 nearby cells whose centroids form a
non-degenerate simplex containing (in the barycentric-extrapolation sense) the
face barycenter.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class MeshFormatError(ValueError):
    """Raised for unparsable mesh files; message carries the line number."""


class MeshTopologyError(ValueError):
    """Raised for broken connectivity (duplicate cells, over-shared faces)."""


class AdmissibilityError(RuntimeError):
    """Raised when no candidate stencil passes the degeneracy floor."""


@dataclass(frozen=True)
class FaceStencil:
    """Cells and barycentric weights interpolating one face barycenter."""

    face: int
    cells: tuple[int, ...]
    weights: np.ndarray


class Mesh:
    """Immutable simplicial mesh in d in {1, 2, 3} dimensions."""

    def __init__(self, dim: int, vertices: np.ndarray, cells: np.ndarray):
        if dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
        self.dim = dim
        self.vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, dim)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64).reshape(-1, dim + 1)
        if self.cells.size and (self.cells.min() < 0
                                or self.cells.max() >= len(self.vertices)):
            raise MeshTopologyError("cell vertex index out of range")
        self._build_cell_geometry()
        self._build_faces()

    # -- geometry ----------------------------------------------------------

    def _build_cell_geometry(self) -> None:
        pts = self.vertices[self.cells]              # (nc, d+1, d)
        self.cell_vertices = pts
        self.cell_centroids = pts.mean(axis=1)
        edges = pts[:, 1:, :] - pts[:, :1, :]        # (nc, d, d)
        det = np.linalg.det(edges)
        if np.any(np.abs(det) < 1e-300):
            raise MeshTopologyError("degenerate (zero-volume) cell")
        self.cell_measures = np.abs(det) / _factorial(self.dim)
        diffs = pts[:, :, None, :] - pts[:, None, :, :]
        self.cell_diameters = np.sqrt((diffs ** 2).sum(-1)).max(axis=(1, 2))

    @cached_property
    def barycentric_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell affine functionals: lambda_i(x) = A[c, i] + B[c, i, :] @ x."""
        nc, d = len(self.cells), self.dim
        M = np.empty((nc, d + 1, d + 1))
        M[:, :, 0] = 1.0
        M[:, :, 1:] = self.cell_vertices
        inv = np.linalg.inv(M)                       # columns are functionals
        A = inv[:, 0, :].copy()                      # (nc, d+1)
        B = np.transpose(inv[:, 1:, :], (0, 2, 1)).copy()  # (nc, d+1, d)
        return A, B

    # -- face topology -----------------------------------------------------

    def _build_faces(self) -> None:
        d = self.dim
        nc = len(self.cells)
        sorted_cells = np.sort(self.cells, axis=1)
        _, first, counts = np.unique(sorted_cells, axis=0,
                                     return_index=True, return_counts=True)
        if counts.max(initial=1) > 1:
            ci = int(first[np.argmax(counts)])
            raise MeshTopologyError(
                f"duplicated cell {ci}: vertices {tuple(sorted_cells[ci])}")
        # local face k is opposite local vertex k
        keep = np.array([[v for v in range(d + 1) if v != k] for k in range(d + 1)])
        flat = np.sort(self.cells[:, keep], axis=2).reshape(-1, d)
        keys, inverse, counts = np.unique(flat, axis=0, return_inverse=True,
                                          return_counts=True)
        if counts.max() > 2:
            fi = int(np.argmax(counts))
            owners = sorted((np.flatnonzero(inverse == fi) // (d + 1)).tolist())
            raise MeshTopologyError(
                f"face {tuple(keys[fi])} shared by {counts[fi]} cells: {owners}")
        nf = len(keys)
        self.face_vertices = keys
        self._cell_face_ids = inverse.reshape(nc, d + 1)
        # flat row order is cell-major, so a stable grouping sort leaves each
        # face's owners in ascending cell id
        order = np.argsort(inverse, kind="stable")
        owners = order // (d + 1)
        starts = np.searchsorted(inverse[order], np.arange(nf))
        fcells = np.full((nf, 2), -1, dtype=np.int64)
        fcells[:, 0] = owners[starts]
        two = counts == 2
        fcells[two, 1] = owners[starts[two] + 1]
        self.face_cells = fcells
        self.is_boundary_face = fcells[:, 1] < 0

        fpts = self.vertices[self.face_vertices]     # (nf, d, dim)
        self.face_centers = fpts.mean(axis=1)
        if d == 1:
            self.face_measures = np.ones(nf)
            normals = np.ones((nf, 1))
        elif d == 2:
            t = fpts[:, 1] - fpts[:, 0]
            length = np.linalg.norm(t, axis=1)
            self.face_measures = length
            normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / length[:, None]
        else:
            cr = np.cross(fpts[:, 1] - fpts[:, 0], fpts[:, 2] - fpts[:, 0])
            area2 = np.linalg.norm(cr, axis=1)
            self.face_measures = area2 / 2.0
            normals = cr / area2[:, None]
        # orient outward from the first (lower-id) adjacent cell
        to_face = self.face_centers - self.cell_centroids[fcells[:, 0]]
        flip = (normals * to_face).sum(axis=1) < 0
        normals[flip] *= -1.0
        self.face_normals = normals

        # substitute length scale for penalties: |e| in 2D/3D, mean adjacent
        # cell diameter in 1D where point faces have no measure
        if d == 1:
            other = np.where(self.is_boundary_face, fcells[:, 0], fcells[:, 1])
            self.face_length_scales = 0.5 * (
                self.cell_diameters[fcells[:, 0]] + self.cell_diameters[other])
        else:
            self.face_length_scales = self.face_measures.copy()

    @property
    def cell_face_ids(self) -> np.ndarray:
        """(nc, d+1) face ids per cell, ordered by opposite local vertex."""
        return self._cell_face_ids

    @cached_property
    def cell_neighbor_array(self) -> np.ndarray:
        """(nc, d+1) face-neighbor cell ids, ascending within row, -1 padded."""
        fc = self.face_cells[self._cell_face_ids]        # (nc, d+1, 2)
        own = np.arange(len(self.cells))[:, None, None]
        other = np.where(fc == own, -1, fc).max(axis=2)  # partner or -1
        big = np.iinfo(np.int64).max
        other = np.sort(np.where(other >= 0, other, big), axis=1)
        return np.where(other < big, other, -1)

    @cached_property
    def cell_neighbors(self) -> list[list[int]]:
        """Face-neighbor cell ids per cell, ascending."""
        arr = self.cell_neighbor_array
        return [[int(j) for j in row if j >= 0] for row in arr]

    # -- invariant checks ---------------------------------------------------

    def validate(self, rtol: float = 1e-12) -> None:
        """Check the closed-polytope identity and total measure bookkeeping."""
        d = self.dim
        acc = np.zeros((len(self.cells), d))
        w = self.face_measures[:, None] * self.face_normals
        np.add.at(acc, self.face_cells[:, 0], w)
        interior = ~self.is_boundary_face
        np.subtract.at(acc, self.face_cells[interior, 1], w[interior])
        scale = (self.face_measures.mean() or 1.0)
        if np.abs(acc).max() > 1e-10 * scale * (d + 1):
            raise MeshTopologyError("face normals do not close around a cell")
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        box = float(np.prod(hi - lo))
        total = float(self.cell_measures.sum())
        if box > 0 and abs(total - box) > rtol * box * 100:
            # only meaningful for box-shaped domains; callers with other
            # shapes should skip validate()
            raise MeshTopologyError(
                f"cell measures sum to {total}, bounding box is {box}")


def _factorial(d: int) -> int:
    return (1, 1, 2, 6)[d]


# -- generators --------------------------------------------------------------

def generate_structured(dim: int, n_per_axis: int,
                        domain_box: tuple[tuple[float, float], ...] | None = None,
                        ) -> Mesh:
    """Uniform simplicial mesh of a box.

    1D: n cells; 2D: n^2 squares split along the (i,j)->(i+1,j+1) diagonal
    into 2n^2 triangles; 3D: n^3 cubes split into 48n^3 congruent
    orthoschemes (barycentric subdivision).  Vertex and cell ordering is
    deterministic.
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    n = n_per_axis
    if domain_box is None:
        domain_box = ((0.0, 1.0),) * dim
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in domain_box]

    if dim == 1:
        vertices = axes[0][:, None]
        cells = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        return Mesh(1, vertices, cells)

    if dim == 2:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
        vid = lambda i, j: j * (n + 1) + i
        cells = []
        for j in range(n):
            for i in range(n):
                v00, v10 = vid(i, j), vid(i + 1, j)
                v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
                cells.append((v00, v10, v11))
                cells.append((v00, v11, v01))
        return Mesh(2, vertices, np.array(cells))

    # barycentric (Coxeter) subdivision: each cube splits into 48 congruent
    # orthoschemes (corner, edge midpoint, face center, cube center).  Shared
    # cube faces are triangulated by their own corners/midpoints/center, so
    # the mesh conforms, and cell centers cluster tightly around each cube,
    # which keeps face-stencil simplices compact and well shaped.
    offs = []
    for axis in range(3):
        for side in (0, 2):
            fc = np.array([1, 1, 1]); fc[axis] = side
            a1, a2 = [a for a in range(3) if a != axis]
            for e_axis, e_off in ((a1, 0), (a1, 2), (a2, 0), (a2, 2)):
                o_axis = a2 if e_axis == a1 else a1
                em = fc.copy(); em[o_axis] = e_off
                for c_off in (0, 2):
                    v = em.copy(); v[e_axis] = c_off
                    offs.append((tuple(v), tuple(em), tuple(fc), (1, 1, 1)))
    offs = np.array(offs, dtype=np.int64)                  # (48, 4, 3)
    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                             indexing="ij")
    origins = 2 * np.stack([kk.ravel(), jj.ravel(), ii.ravel()], axis=1)
    # integer coordinates on the half-step lattice, deduplicated into vertices
    coords = origins[:, None, None, :] + offs[None, :, :, :]
    coords = coords.reshape(-1, 3)
    m = 2 * n + 1
    keys = (coords[:, 0] * m + coords[:, 1]) * m + coords[:, 2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    kx, rem = np.divmod(uniq, m * m)
    ky, kz = np.divmod(rem, m)
    lattice = np.stack([kx, ky, kz], axis=1) / (2.0 * n)
    lo = np.array([b[0] for b in domain_box])
    hi = np.array([b[1] for b in domain_box])
    vertices = lo + lattice * (hi - lo)
    cells = inverse.reshape(-1, 4)
    return Mesh(3, vertices, cells)


def generate_unstructured_square(n_grid: int, n_extra: int,
                                 seed: int = 0, jitter: float = 0.35,
                                 min_sep: float = 0.45) -> Mesh:
    """Delaunay mesh of the unit square from a jittered grid plus extra points.

    Boundary grid points stay on the boundary, so the triangle count is
    exactly 2*N - 2 - B with N total points and B = 4*n_grid boundary points.
    Rejection sampling keeps extra points min_sep*h away from existing ones,
    which avoids sliver triangles.  Fully deterministic for a fixed seed.
    """
    from scipy.spatial import Delaunay, cKDTree

    rng = np.random.default_rng(seed)
    h = 1.0 / n_grid
    xs = np.linspace(0.0, 1.0, n_grid + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    interior = ((pts[:, 0] > 0) & (pts[:, 0] < 1)
                & (pts[:, 1] > 0) & (pts[:, 1] < 1))
    pts[interior] += rng.uniform(-jitter * h, jitter * h,
                                 size=(interior.sum(), 2))
    accepted: list[np.ndarray] = []
    tree = cKDTree(pts)
    attempts = 0
    while len(accepted) < n_extra:
        attempts += 1
        if attempts > 1000 * n_extra:
            raise RuntimeError("rejection sampling stalled; lower min_sep")
        cand = rng.uniform(1.5 * h, 1 - 1.5 * h, size=2)
        d_old = tree.query(cand)[0]
        d_new = min((float(np.linalg.norm(cand - a)) for a in accepted),
                    default=np.inf)
        if min(d_old, d_new) >= min_sep * h:
            accepted.append(cand)
    allpts = np.vstack([pts] + [np.asarray(accepted)]) if accepted else pts
    tri = Delaunay(allpts)
    return Mesh(2, allpts, tri.simplices.astype(np.int64))


# -- file format --------------------------------------------------------------

def load_mesh(path: str) -> Mesh:
    """Read the plain-text format: header `dim nv nc`, coordinates, cells.

    Values are whitespace-separated; `#` starts a comment.  Cell lines give
    0-based vertex indices.
    """
    rows: list[tuple[int, list[str]]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                rows.append((lineno, text.split()))
    if not rows:
        raise MeshFormatError(f"{path}: empty mesh file")
    lineno, header = rows[0]
    if len(header) != 3:
        raise MeshFormatError(f"{path}:{lineno}: header must be 'dim nv nc'")
    try:
        dim, nv, nc = (int(tok) for tok in header)
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{lineno}: bad header: {exc}") from None
    if len(rows) != 1 + nv + nc:
        raise MeshFormatError(
            f"{path}: expected {1 + nv + nc} data lines, found {len(rows)}")
    vertices = np.empty((nv, dim))
    for r, (lineno, toks) in enumerate(rows[1:1 + nv]):
        if len(toks) != dim:
            raise MeshFormatError(
                f"{path}:{lineno}: expected {dim} coordinates, got {len(toks)}")
        try:
            vertices[r] = [float(t) for t in toks]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad coordinate: {exc}") from None
    cells = np.empty((nc, dim + 1), dtype=np.int64)
    for r, (lineno, toks) in enumerate(rows[1 + nv:]):
        if len(toks) != dim + 1:
            raise MeshFormatError(
                f"{path}:{lineno}: expected {dim + 1} vertex ids, got {len(toks)}")
        try:
            cells[r] = [int(t) for t in toks]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: bad vertex id: {exc}") from None
        if cells[r].min() < 0 or cells[r].max() >= nv:
            raise MeshFormatError(f"{path}:{lineno}: vertex id out of range")
    return Mesh(dim, vertices, cells)


def save_mesh(mesh: Mesh, path: str) -> None:
    """Write the plain-text mesh format read by load_mesh."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {len(mesh.vertices)} {len(mesh.cells)}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(x)) for x in c) + "\n")


# -- face stencils -------------------------------------------------------------

def select_face_stencils(mesh: Mesh, eta: float = 1e-6,
                         w_max: float = 2.0) -> list[FaceStencil]:
    """Deterministic stencil choice for the barycentric trace interpolator.

    Interior faces always include the two adjacent cells; the remaining d-1
    cells are scanned in ascending-id combinations over the adjacent cells'
    face neighbors, accepting the first centroid simplex whose edge-matrix
    determinant clears eta*(mean cell diameter)^d and whose barycentric
    weights at the face barycenter lie in [-w_max, 1 + w_max].  If the first
    neighbor ring admits no valid combination (corner cells may have too few
    interior neighbors), the scan widens once to the second ring.  Boundary
    faces get a degenerate one-cell stencil used only by the boundary-trace
    policy.
    """
    cells_out, weights_out = face_stencil_arrays(mesh, eta, w_max)
    bnd = mesh.is_boundary_face
    return [FaceStencil(fi,
                        (int(cells_out[fi, 0]),) if bnd[fi]
                        else tuple(int(c) for c in cells_out[fi]),
                        np.array([1.0]) if bnd[fi] else weights_out[fi].copy())
            for fi in range(len(mesh.face_vertices))]


def face_stencil_arrays(mesh: Mesh, eta: float = 1e-6,
                        w_max: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Array form of select_face_stencils: (cells, weights), each (nf, d+1).

    Boundary faces carry (adjacent cell, -1 padding) with weight 1 on the
    first slot; the selection rule is identical to select_face_stencils.
    """
    d = mesh.dim
    mean_h = float(mesh.cell_diameters.mean())
    floor = eta * mean_h ** d
    nf = len(mesh.face_vertices)
    cells_out = np.full((nf, d + 1), -1, dtype=np.int64)
    weights_out = np.zeros((nf, d + 1))
    bnd = mesh.is_boundary_face
    cells_out[bnd, 0] = mesh.face_cells[bnd, 0]
    weights_out[bnd, 0] = 1.0

    interior = np.flatnonzero(~bnd)
    c1 = mesh.face_cells[interior, 0]
    c2 = mesh.face_cells[interior, 1]
    if d == 1:
        pts = mesh.cell_centroids
        det = pts[c2, 0] - pts[c1, 0]
        if np.any(np.abs(det) < floor):
            fi = int(interior[np.argmin(np.abs(det))])
            raise AdmissibilityError(
                f"face {fi}: adjacent cell centers are degenerate")
        a = (mesh.face_centers[interior, 0] - pts[c1, 0]) / det
        cells_out[interior, 0] = c1
        cells_out[interior, 1] = c2
        weights_out[interior, 0] = 1.0 - a
        weights_out[interior, 1] = a
        return cells_out, weights_out

    # ring-1 candidate pool per interior face: union of face neighbors of the
    # two adjacent cells, self-free, deduplicated, ascending, sentinel-padded
    big = np.iinfo(np.int64).max
    nbr = mesh.cell_neighbor_array
    pool = np.concatenate([nbr[c1], nbr[c2]], axis=1)
    pool = np.where((pool < 0) | (pool == c1[:, None]) | (pool == c2[:, None]),
                    big, pool)
    pool = np.sort(pool, axis=1)
    dup = np.zeros_like(pool, dtype=bool)
    dup[:, 1:] = pool[:, 1:] == pool[:, :-1]
    pool = np.sort(np.where(dup, big, pool), axis=1)
    width = pool.shape[1]

    unresolved = np.ones(len(interior), dtype=bool)
    for combo in itertools.combinations(range(width), d - 1):
        if not unresolved.any():
            break
        cand = pool[:, list(combo)]                        # (m, d-1)
        feasible = unresolved & (cand != big).all(axis=1)
        idx = np.flatnonzero(feasible)
        if not len(idx):
            continue
        stack = np.column_stack([c1[idx], c2[idx], cand[idx]])  # (m, d+1)
        lam = _barycentric_batch(mesh.cell_centroids, stack,
                                 mesh.face_centers[interior[idx]], floor)
        ok = (~np.isnan(lam[:, 0]) & (lam.min(axis=1) >= -w_max)
              & (lam.max(axis=1) <= 1.0 + w_max))
        win = idx[ok]
        cells_out[interior[win]] = stack[ok]
        weights_out[interior[win]] = lam[ok]
        unresolved[win] = False

    # ring-2 fallback for the stragglers (rare; corner cells)
    neighbors = mesh.cell_neighbors if unresolved.any() else None
    for k in np.flatnonzero(unresolved):
        fi = int(interior[k])
        e1, e2 = int(c1[k]), int(c2[k])
        ring1 = set(neighbors[e1]) | set(neighbors[e2])
        ring2 = set().union(ring1, *(neighbors[c] for c in ring1))
        found = _scan_pool(mesh, fi, e1, e2, ring2, floor, w_max)
        if found is None:
            raise AdmissibilityError(
                f"face {fi}: no candidate cell set passes the degeneracy floor")
        cells_out[fi] = found.cells
        weights_out[fi] = found.weights

    # degenerate-direction weights are floating-point dust; snapping them to
    # exact zeros keeps reconstruction sparsity patterns reproducible
    weights_out[np.abs(weights_out) < 1e-13] = 0.0
    return cells_out, weights_out


def _scan_pool(mesh: Mesh, fi: int, c1: int, c2: int, pool_set: set[int],
               floor: float, w_max: float) -> FaceStencil | None:
    pool = sorted(pool_set - {c1, c2})
    center = mesh.face_centers[fi]
    for combo in itertools.combinations(pool, mesh.dim - 1):
        cells = (c1, c2, *combo)
        lam = _barycentric(mesh.cell_centroids, cells, center, floor)
        if lam is not None and lam.min() >= -w_max and lam.max() <= 1.0 + w_max:
            return FaceStencil(fi, cells, lam)
    return None


def _barycentric(centroids: np.ndarray, cells: tuple[int, ...],
                 point: np.ndarray, floor: float) -> np.ndarray | None:
    pts = centroids[list(cells)]
    M = (pts[1:] - pts[0]).T
    det = np.linalg.det(M) if M.shape[0] > 1 else M[0, 0]
    if abs(det) < floor:
        return None
    alpha = np.linalg.solve(M, point - pts[0])
    return np.concatenate([[1.0 - alpha.sum()], alpha])


def _barycentric_batch(centroids: np.ndarray, cells: np.ndarray,
                       points: np.ndarray, floor: float) -> np.ndarray:
    """Batched barycentric weights; rows failing the floor are all-NaN.

    cells: (m, d+1) ids; points: (m, d); returns (m, d+1).
    """
    pts = centroids[cells]                                # (m, d+1, d)
    M = np.transpose(pts[:, 1:, :] - pts[:, :1, :], (0, 2, 1))
    det = np.linalg.det(M)
    good = np.abs(det) >= floor
    out = np.full((len(cells), cells.shape[1]), np.nan)
    if good.any():
        alpha = np.linalg.solve(M[good], (points - pts[:, 0])[good][..., None])
        alpha = alpha[..., 0]
        out[good, 0] = 1.0 - alpha.sum(axis=1)
        out[good, 1:] = alpha
    return out


def locate_cells(mesh: Mesh, points: np.ndarray, tol: float = 1e-10,
                 k: int = 32) -> np.ndarray:
    """Cell id containing each point (lowest id when several touch it).

    Containment is tested on the k nearest-centroid candidates with a
    barycentric tolerance, so points on shared faces and mesh vertices
    resolve deterministically.  Raises for points outside the mesh.
    """
    from scipy.spatial import cKDTree

    pts = np.atleast_2d(np.asarray(points, float))
    if pts.shape[1] != mesh.dim:
        raise ValueError(f"points must be (n, {mesh.dim})")
    tree = mesh.__dict__.get("_centroid_tree")
    if tree is None:
        tree = mesh.__dict__["_centroid_tree"] = cKDTree(mesh.cell_centroids)
    kq = min(k, len(mesh.cells))
    _, cand = tree.query(pts, k=kq)
    cand = cand.reshape(len(pts), kq)
    A, B = mesh.barycentric_maps
    lam = A[cand] + np.einsum("pkid,pd->pki", B[cand], pts)
    inside = lam.min(axis=2) >= -tol
    masked = np.where(inside, cand, np.iinfo(np.int64).max)
    out = masked.min(axis=1)
    if (out == np.iinfo(np.int64).max).any():
        bad = pts[out == np.iinfo(np.int64).max][0]
        raise ValueError(f"point {bad} not inside any candidate cell")
    return out
