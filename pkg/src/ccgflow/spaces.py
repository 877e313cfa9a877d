"""Discrete spaces: simplex quadrature, broken Pk bases, and the cell-centered
reconstruction space.

The cell-centered space has one DOF per cell.  Its face-trace interpolator
uses the barycentric stencil weights from the mesh; its gradient and affine
reconstructions make it a sparse subspace of broken P1, which is what lets a
single interior-penalty assembly kernel serve both families.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import FaceStencil, Mesh, face_stencil_arrays

# -- quadrature ---------------------------------------------------------------

_MAX_ORDER = 6


def quadrature(dim: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference simplex, exact to `order`.

    Returns (points, weights) with points in reference Cartesian coordinates
    (shape (nq, dim)) and weights summing to the reference simplex measure
    1/dim!.  Order 1 is the one-point centroid rule.
    """
    if not 1 <= order <= _MAX_ORDER:
        raise ValueError(f"quadrature order must be in 1..{_MAX_ORDER}, got {order}")
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 0..3, got {dim}")
    from scipy.special import roots_jacobi, roots_legendre

    n = order // 2 + 1
    xg, wg = roots_legendre(n)
    xi, wi = (xg + 1) / 2, wg / 2                       # [0,1], weight 1
    if dim == 1:
        return xi[:, None], wi
    xj1, wj1 = roots_jacobi(n, 1, 0)
    e1, f1 = (xj1 + 1) / 2, wj1 / 4                     # weight (1-x) on [0,1]
    if dim == 2:
        # x = xi*(1-eta), y = eta; Jacobian (1-eta)
        X = np.outer(xi, 1 - e1).ravel()
        Y = np.tile(e1, n)
        W = np.outer(wi, f1).ravel()
        return np.stack([X, Y], axis=1), W
    xj2, wj2 = roots_jacobi(n, 2, 0)
    e2, f2 = (xj2 + 1) / 2, wj2 / 8                     # weight (1-x)^2 on [0,1]
    pts = np.empty((n ** 3, 3))
    wts = np.empty(n ** 3)
    idx = 0
    for a, wa in zip(xi, wi):
        for b, wb in zip(e1, f1):
            for c, wc in zip(e2, f2):
                pts[idx] = (a * (1 - b) * (1 - c), b * (1 - c), c)
                wts[idx] = wa * wb * wc
                idx += 1
    return pts, wts


def barycentric_points(points: np.ndarray) -> np.ndarray:
    """Append the complementary coordinate: (nq, d) -> (nq, d+1)."""
    return np.concatenate([1.0 - points.sum(axis=1, keepdims=True), points],
                          axis=1)


# -- broken Pk basis ----------------------------------------------------------

def lattice_multi_indices(dim: int, degree: int) -> np.ndarray:
    """Multi-indices alpha in N^{d+1}, |alpha| = k, vertices first for k = 1."""
    idx = [a for a in itertools.product(range(degree + 1), repeat=dim + 1)
           if sum(a) == degree]
    return np.array(sorted(idx, reverse=True), dtype=np.int64)


def _axis_factors(k: int, ai: int, lam_i: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative (w.r.t. lam_i) of prod_{m<ai}(k*lam_i - m)/ai!."""
    val = np.ones_like(lam_i) / math.factorial(ai)
    terms = [k * lam_i - m for m in range(ai)]
    for t in terms:
        val = val * t
    der = np.zeros_like(lam_i)
    for m in range(ai):
        part = np.full_like(lam_i, k / math.factorial(ai))
        for mm in range(ai):
            if mm != m:
                part = part * terms[mm]
        der += part
    return val, der


class DgSpace:
    """Broken Pk space, k in {1, 2, 3}: nodal Lagrange basis per cell.

    Basis functions sit on the principal lattice (nodes alpha/k in barycentric
    coordinates) and vanish identically on every face not containing their
    node, which keeps cross-face coupling blocks sparse.  DOF layout is one
    contiguous block of binom(k+d, d) values per cell, lattice order.
    """

    def __init__(self, mesh: Mesh, degree: int):
        if degree not in (1, 2, 3):
            raise ValueError(f"degree must be 1, 2 or 3, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.multi_indices = lattice_multi_indices(mesh.dim, degree)
        self.ndof_cell = len(self.multi_indices)
        assert self.ndof_cell == math.comb(degree + mesh.dim, mesh.dim)
        self.ndofs = self.ndof_cell * len(mesh.cells)
        self.dof_map = np.arange(self.ndofs).reshape(len(mesh.cells),
                                                     self.ndof_cell)

    def cell_dofs(self, cell: int) -> np.ndarray:
        return self.dof_map[cell]

    def nodes_barycentric(self) -> np.ndarray:
        return self.multi_indices / float(self.degree)

    def eval_basis(self, lam: np.ndarray) -> np.ndarray:
        """Basis values at barycentric points: (nq, d+1) -> (nq, nb)."""
        nq = lam.shape[0]
        out = np.ones((nq, self.ndof_cell))
        k = self.degree
        for b, alpha in enumerate(self.multi_indices):
            for i, ai in enumerate(alpha):
                if ai:
                    out[:, b] *= _axis_factors(k, int(ai), lam[:, i])[0]
        return out

    def eval_basis_grad(self, lam: np.ndarray) -> np.ndarray:
        """Derivatives w.r.t. barycentric coordinates: (nq, nb, d+1)."""
        nq = lam.shape[0]
        nb, k = self.ndof_cell, self.degree
        vals = np.empty((nq, nb, lam.shape[1]))
        ders = np.empty_like(vals)
        for b, alpha in enumerate(self.multi_indices):
            for i, ai in enumerate(alpha):
                v, d = _axis_factors(k, int(ai), lam[:, i])
                vals[:, b, i] = v
                ders[:, b, i] = d
        out = np.empty_like(vals)
        for i in range(lam.shape[1]):
            prod_others = np.ones((nq, nb))
            for j in range(lam.shape[1]):
                if j != i:
                    prod_others *= vals[:, :, j]
            out[:, :, i] = ders[:, :, i] * prod_others
        return out


# -- cell-centered space --------------------------------------------------------

@dataclass
class Field:
    """DOF vector attached to its space."""

    space: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.values) != self.space.ndofs:
            raise ValueError(
                f"field length {len(self.values)} != space dim {self.space.ndofs}")


class CcgSpace:
    """Cell-centered space: one DOF per cell plus reconstruction stencils.

    boundary_policy selects the boundary face trace: 'dirichlet' reads a
    supplied data function at face barycenters (the trace enters the gradient
    as an affine offset, not a DOF coupling); 'mirror' copies the adjacent
    cell average, so boundary faces contribute nothing to the gradient.
    """

    def __init__(self, mesh: Mesh, stencils: list[FaceStencil] | None = None,
                 boundary_policy: str = "mirror",
                 dirichlet_data=None):
        if boundary_policy not in ("mirror", "dirichlet"):
            raise ValueError(f"unknown boundary policy {boundary_policy!r}")
        if boundary_policy == "dirichlet" and dirichlet_data is None:
            dirichlet_data = lambda x: np.zeros(len(x))
        self.mesh = mesh
        if stencils is None:
            st_cells, st_weights = face_stencil_arrays(mesh)
            self.stencils = None
        else:
            self.stencils = stencils
            d = mesh.dim
            st_cells = np.full((len(stencils), d + 1), -1, dtype=np.int64)
            st_weights = np.zeros((len(stencils), d + 1))
            for st in stencils:
                st_cells[st.face, : len(st.cells)] = st.cells
                st_weights[st.face, : len(st.weights)] = st.weights
        self.stencil_cells = st_cells
        self.stencil_weights = st_weights
        self.boundary_policy = boundary_policy
        self.dirichlet_data = dirichlet_data
        self.ndofs = len(mesh.cells)
        self._offset_cells = None
        self._offset_weights = None
        self._offset_points = None
        self._build_gradient_operator()
        self._loc = None

    def face_stencils(self) -> list[FaceStencil]:
        """Stencils as objects (built lazily when arrays came from the mesh)."""
        if self.stencils is None:
            bnd = self.mesh.is_boundary_face
            self.stencils = [
                FaceStencil(fi,
                            (int(self.stencil_cells[fi, 0]),) if bnd[fi]
                            else tuple(int(c) for c in self.stencil_cells[fi]),
                            np.array([1.0]) if bnd[fi]
                            else self.stencil_weights[fi].copy())
                for fi in range(len(bnd))]
        return self.stencils

    def _build_gradient_operator(self) -> None:
        """G: (nc*d, nc) sparse with G_h(v)|_E = (G v + offset)[E*d : E*d+d].

        Every (face, adjacent cell) pair contributes w = +-(|F|/|E|) n_F to
        the stencil cells (scaled by their weights) and -w to the cell itself;
        dirichlet boundary faces push their data term into the affine offset.
        """
        mesh = self.mesh
        nc, d = len(mesh.cells), mesh.dim
        nf = len(mesh.face_vertices)
        bnd = mesh.is_boundary_face
        offset = np.zeros((nc, d))

        rows_l, cols_l, vals_l = [], [], []

        def emit(E, J, W):
            # W: (m, d) vectors attached to (cell E, column J)
            rows_l.append((E[:, None] * d + np.arange(d)).ravel())
            cols_l.append(np.repeat(J, d))
            vals_l.append(W.ravel())

        for side in (0, 1):
            if side == 0:
                faces = np.arange(nf)
                sign = 1.0
            else:
                faces = np.flatnonzero(~bnd)
                sign = -1.0
            E = mesh.face_cells[faces, side]
            w = (sign * (mesh.face_measures[faces]
                         / mesh.cell_measures[E])[:, None]
                 * mesh.face_normals[faces])                     # (m, d)
            inter = ~bnd[faces]
            # stencil contributions (interior faces only)
            fi_int = faces[inter]
            E_int = E[inter]
            w_int = w[inter]
            for k in range(d + 1):
                emit(E_int, self.stencil_cells[fi_int, k],
                     self.stencil_weights[fi_int, k][:, None] * w_int)
            # own-cell term -w on all faces handled by this side, except that
            # mirror boundary faces contribute nothing at all
            if self.boundary_policy == "mirror" and side == 0:
                emit(E_int, E_int, -w_int)
            else:
                emit(E, E, -w)
            if side == 0 and self.boundary_policy == "dirichlet" and bnd.any():
                bf = faces[~inter]
                self._offset_cells = E[~inter]
                self._offset_weights = w[~inter]          # (m, d)
                self._offset_points = mesh.face_centers[bf]

        G = sp.coo_matrix(
            (np.concatenate(vals_l),
             (np.concatenate(rows_l), np.concatenate(cols_l))),
            shape=(nc * d, nc)).tocsr()
        G.sum_duplicates()
        G.data[np.abs(G.data) < 1e-15] = 0.0
        G.eliminate_zeros()
        self.gradient_op = G
        self.grad_offset = self.gradient_offset()

    def gradient_offset(self, data=None) -> np.ndarray:
        """Affine part of G_h from Dirichlet face data (zeros under mirror).

        `data` overrides the space's default boundary data, so one space can
        serve several fields (time-dependent data in particular).
        """
        nc, d = self.ndofs, self.mesh.dim
        offset = np.zeros((nc, d))
        if self._offset_cells is not None:
            g = np.asarray((data or self.dirichlet_data)(self._offset_points),
                           float)
            np.add.at(offset, self._offset_cells,
                      g[:, None] * self._offset_weights)
        return offset

    def cell_gradient_stencil(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        """(cells j, vectors g_{E,j}) with G_h(v)|_E = sum_j g_{E,j} v_j."""
        d = self.mesh.dim
        block = self.gradient_op[cell * d: (cell + 1) * d, :].tocoo()
        cols = np.unique(block.col)
        vecs = np.zeros((len(cols), d))
        vecs[np.searchsorted(cols, block.col), block.row] = block.data
        return cols, vecs

    def gradient_matrix(self) -> sp.csr_matrix:
        """Sparse (nc*d, nc) operator: component i of G_h on cell E at row E*d+i."""
        return self.gradient_op

    def localization(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """(R, r0): P1 vertex values of the reconstruction, nodal = R v + r0.

        Rows follow the broken-P1 DOF layout (cell-major, vertex order), so
        any matrix assembled on broken P1 restricts to this space as R^T A R.
        Cached after the first call.
        """
        if self._loc is None:
            mesh = self.mesh
            nc, d = self.ndofs, mesh.dim
            nb = d + 1
            rel = mesh.cell_vertices - mesh.cell_centroids[:, None, :]
            rows = np.repeat(np.arange(nc * nb), d)
            cols = ((np.arange(nc)[:, None, None] * d
                     + np.arange(d)[None, None, :])
                    * np.ones((1, nb, 1), dtype=np.int64)).ravel()
            L = sp.coo_matrix((rel.ravel(), (rows, cols)),
                              shape=(nc * nb, nc * d)).tocsr()
            ident = sp.coo_matrix(
                (np.ones(nc * nb),
                 (np.arange(nc * nb), np.repeat(np.arange(nc), nb))),
                shape=(nc * nb, nc))
            R = (ident + L @ self.gradient_op).tocsr()
            R.sum_duplicates()
            R.data[np.abs(R.data) < 1e-15] = 0.0
            R.eliminate_zeros()
            self._loc = R
            self._loc_L = L
        return self._loc, self.reconstruction_offset()

    def reconstruction_offset(self, data=None) -> np.ndarray:
        """Affine-offset part r0 of the nodal reconstruction R v + r0."""
        if self._loc is None:
            self.localization()
        return self._loc_L @ self.gradient_offset(data).ravel()


def trace_interpolate(space: CcgSpace, fld: Field, face: int) -> float:
    """Barycentric face trace of a cell-centered field."""
    if not 0 <= face < len(space.mesh.face_vertices):
        raise IndexError(f"face {face} out of range")
    if space.mesh.is_boundary_face[face]:
        if space.boundary_policy == "mirror":
            return float(fld.values[space.stencil_cells[face, 0]])
        x = space.mesh.face_centers[face][None, :]
        return float(np.asarray(space.dirichlet_data(x)).ravel()[0])
    return float(fld.values[space.stencil_cells[face]]
                 @ space.stencil_weights[face])


def reconstruct_gradient(space: CcgSpace, fld: Field, cell: int) -> np.ndarray:
    """Reconstructed cell gradient: face-flux combination of trace values."""
    d = space.mesh.dim
    g = space.gradient_op[cell * d: (cell + 1) * d, :] @ fld.values
    return g + space.grad_offset[cell]


def reconstruct_affine(space: CcgSpace, fld: Field, cell: int,
                       point: np.ndarray) -> float:
    """Affine reconstruction evaluated at a point."""
    g = reconstruct_gradient(space, fld, cell)
    rel = np.asarray(point, float) - space.mesh.cell_centroids[cell]
    return float(fld.values[cell] + g @ rel)


def point_values(space, values, points, data=None) -> np.ndarray:
    """Reconstructed field sampled at physical points.

    Cell-centered spaces evaluate the affine reconstruction (with optional
    Dirichlet `data` feeding the gradient offset); broken Pk evaluates the
    local basis.  Points on shared faces resolve to the lowest-id side.
    """
    from .mesh import locate_cells

    values = np.asarray(values, float)
    pts = np.atleast_2d(np.asarray(points, float))
    cells = locate_cells(space.mesh, pts)
    if isinstance(space, CcgSpace):
        g = (space.gradient_op @ values).reshape(-1, space.mesh.dim)
        g = g + space.gradient_offset(data)
        rel = pts - space.mesh.cell_centroids[cells]
        return values[cells] + np.einsum("pd,pd->p", g[cells], rel)
    A, B = space.mesh.barycentric_maps
    lam = A[cells] + np.einsum("pid,pd->pi", B[cells], pts)
    return (space.eval_basis(lam) * values[space.dof_map[cells]]).sum(axis=1)
