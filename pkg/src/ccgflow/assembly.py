"""Sparse assembly of the interior-penalty flow and transport forms.

One vectorized kernel assembles the broken-Pk forms; cell-centered matrices
are Galerkin restrictions R^T A R of the broken-P1 kernel through the
localization operator, so both discretizations share every volume and face
term by construction.  Coefficients (mobility K/mu(c), dispersion D(u), well
densities) enter as per-cell constants frozen at centroid values; with
piecewise-constant coefficients the quadrature orders used here integrate
every bilinear term exactly.

The cell-centered mass matrix is the exception to the restriction rule: it
is diagonal, phi_E*|E|, the one-point rule that motivates the method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .physics import (DispersionParams, PermeabilityField, ViscosityModel,
                      dispersion_tensor)
from .spaces import CcgSpace, DgSpace, Field, barycentric_points, quadrature

# assembled entries at or below this magnitude are not stored
DROP_TOL = 1e-14

_TERMS = ("volume", "consistency", "symmetry", "penalty", "boundary")


@dataclass(frozen=True)
class FlowFormParams:
    """Symmetry weight, jump penalty, and boundary closure of the flow form.

    penalty is a positive constant or the string "dg_formula" for
    sigma_e = 4 (n.kn) |e| / min(|E1|,|E2|) with k the mobility.
    """
    epsilon: int
    penalty: Union[float, str]
    bc: str = "dirichlet"
    dirichlet: Optional[Callable] = None

    def __post_init__(self):
        _check_form_params(self.epsilon, self.penalty, self.bc)


@dataclass(frozen=True)
class TransportFormParams:
    """Transport-form counterpart: adds porosity and the upwind switch."""
    epsilon: int
    penalty: Union[float, str]
    porosity: Union[float, np.ndarray] = 1.0
    upwind: bool = True
    bc: str = "noflow"
    dirichlet: Optional[Callable] = None

    def __post_init__(self):
        _check_form_params(self.epsilon, self.penalty, self.bc)


def _check_form_params(epsilon, penalty, bc):
    if epsilon not in (-1, 0, 1):
        raise ValueError(f"epsilon must be -1, 0 or 1, got {epsilon!r}")
    if isinstance(penalty, str):
        if penalty != "dg_formula":
            raise ValueError(f"unknown penalty rule {penalty!r}")
    elif not penalty > 0:
        raise ValueError("penalty must be positive")
    if bc not in ("dirichlet", "noflow"):
        raise ValueError(f"unknown boundary condition {bc!r}")


@dataclass
class ElementVelocity:
    """Piecewise-constant Darcy velocity with single-valued face fluxes.

    cell_values[E] = -(K_E/mu_E) grad p_h|_E; face_normal[f] is the mean of
    the two one-sided u.n_f values (n_f oriented first-to-second cell), the
    one-sided value on boundary faces.
    """
    cell_values: np.ndarray          # (nc, d)
    face_normal: np.ndarray          # (nf,)


def cell_coefficient(mesh: Mesh, value) -> np.ndarray:
    """Normalize scalar / per-cell array / field-object coefficients."""
    if isinstance(value, PermeabilityField):
        return value.cell_values(mesh)
    if callable(value):
        return np.asarray(value(mesh.cell_centroids), float)
    arr = np.asarray(value, float)
    if arr.ndim == 0:
        return np.full(len(mesh.cells), float(arr))
    if arr.shape != (len(mesh.cells),):
        raise ValueError(f"per-cell coefficient has shape {arr.shape}, "
                         f"expected ({len(mesh.cells)},)")
    return arr


def cell_centroid_values(space, values: np.ndarray) -> np.ndarray:
    """Field values at cell centroids (the dof itself for cell-centered)."""
    values = np.asarray(values, float)
    if isinstance(space, CcgSpace):
        return values
    lam = np.full((1, space.mesh.dim + 1), 1.0 / (space.mesh.dim + 1))
    phi = space.eval_basis(lam)[0]
    return values.reshape(len(space.mesh.cells), space.ndof_cell) @ phi


def mobility_values(mesh: Mesh, kappa, viscosity=None, c_field=None,
                    c_space=None) -> np.ndarray:
    """Per-cell mobility K_E / mu(c(x_E)) from the lagged concentration."""
    kap = cell_coefficient(mesh, kappa)
    if viscosity is None:
        return kap
    if np.isscalar(viscosity):
        return kap / float(viscosity)
    if c_field is None:
        c_cell = np.zeros(len(mesh.cells))
    elif isinstance(c_field, Field):
        c_cell = cell_centroid_values(c_field.space, c_field.values)
    else:
        c_cell = cell_centroid_values(c_space, c_field) if c_space is not None \
            else np.asarray(c_field, float)
    return kap / viscosity(c_cell)


# ---------------------------------------------------------------------------
# cached quadrature/basis tables

def _volume_tables(space: DgSpace, order: int) -> dict:
    cache = space.__dict__.setdefault("_asm_volume", {})
    if order in cache:
        return cache[order]
    mesh = space.mesh
    d = mesh.dim
    pts, w = quadrature(d, order)
    lam = barycentric_points(pts)                       # (nq, d+1)
    phi = space.eval_basis(lam)                         # (nq, nb)
    dphi = space.eval_basis_grad(lam)                   # (nq, nb, d+1)
    B = mesh.barycentric_maps[1]                      # (nc, d+1, d)
    gphi = np.einsum("qbi,cid->cqbd", dphi, B)          # (nc, nq, nb, d)
    scale = mesh.cell_measures * math.factorial(d)      # |E| d!, weights sum 1/d!
    xq = np.einsum("qi,cid->cqd", lam, mesh.cell_vertices)
    cache[order] = dict(w=w, phi=phi, gphi=gphi, scale=scale, xq=xq)
    return cache[order]


def _face_tables(space: DgSpace, order: int) -> dict:
    """Two-sided basis traces at shared physical face quadrature points."""
    cache = space.__dict__.setdefault("_asm_face", {})
    if order in cache:
        return cache[order]
    mesh = space.mesh
    d = mesh.dim
    pts, w = quadrature(d - 1, order)
    bary = barycentric_points(pts)                      # (nq, d)
    fverts = mesh.vertices[mesh.face_vertices]          # (nf, d, d)
    xq = np.einsum("qi,fid->fqd", bary, fverts)         # (nf, nq, d)
    A, B = mesh.barycentric_maps
    interior = np.flatnonzero(~mesh.is_boundary_face)
    boundary = np.flatnonzero(mesh.is_boundary_face)
    # integral scale: |f| (d-1)! since the reference weights sum to 1/(d-1)!
    fs = mesh.face_measures * math.factorial(max(d - 1, 0))

    def side(faces, cells):
        lam = A[cells][:, None, :] + np.einsum("fqd,fid->fqi", xq[faces],
                                               B[cells])
        nq = lam.shape[1]
        phi = space.eval_basis(lam.reshape(-1, d + 1))
        gl = space.eval_basis_grad(lam.reshape(-1, d + 1))
        phi = phi.reshape(len(faces), nq, -1)
        gphi = np.einsum("fqbi,fid->fqbd",
                         gl.reshape(len(faces), nq, -1, d + 1), B[cells])
        return phi, gphi

    c1, c2 = mesh.face_cells[interior, 0], mesh.face_cells[interior, 1]
    phi1, gphi1 = side(interior, c1)
    phi2, gphi2 = side(interior, c2)
    cb = mesh.face_cells[boundary, 0]
    phib, gphib = side(boundary, cb)
    cache[order] = dict(
        w=w, interior=interior, boundary=boundary,
        cells=(c1, c2), bcells=cb,
        n=mesh.face_normals[interior], nb_=mesh.face_normals[boundary],
        fs_int=fs[interior], fs_bnd=fs[boundary],
        len_int=mesh.face_length_scales[interior],
        len_bnd=mesh.face_length_scales[boundary],
        phi=(phi1, phi2), gphi=(gphi1, gphi2),
        phib=phib, gphib=gphib,
        xq_bnd=xq[boundary])
    return cache[order]


def _p1_surrogate(space: CcgSpace) -> DgSpace:
    if not hasattr(space, "_p1_space"):
        space._p1_space = DgSpace(space.mesh, 1)
    return space._p1_space


def _face_penalty(params, coef, tabs) -> tuple[np.ndarray, np.ndarray]:
    """Per-face penalty sigma_e on interior and boundary faces.

    coef: per-cell scalar diffusivity entering n.(coef)n (the mobility for
    the flow form; the normal dispersion component for transport).
    """
    if not isinstance(params.penalty, str):
        nint = len(tabs["interior"])
        nbnd = len(tabs["boundary"])
        return (np.full(nint, float(params.penalty)),
                np.full(nbnd, float(params.penalty)))
    c1, c2 = tabs["cells"]
    kbar = 0.5 * (coef[c1] + coef[c2])
    sig_int = 4.0 * kbar * tabs["fs_int"] / np.minimum.reduce(
        [_cellmeas(tabs, c1), _cellmeas(tabs, c2)])
    kb = coef[tabs["bcells"]]
    sig_bnd = 4.0 * kb * tabs["fs_bnd"] / _cellmeas(tabs, tabs["bcells"])
    return sig_int, sig_bnd


def _cellmeas(tabs, cells):
    return tabs["_cell_measures"][cells]


class _Accumulator:
    """COO triplet accumulator over (cell, local i, local j) blocks."""

    def __init__(self, space: DgSpace):
        self.dofs = space.dof_map                       # (nc, nb)
        self.n = space.ndofs
        self.rows, self.cols, self.vals = [], [], []

    def add_blocks(self, cells_i, cells_j, blocks):
        """blocks: (m, nb, nb) coupling dofs of cells_i (rows) x cells_j."""
        di, dj = self.dofs[cells_i], self.dofs[cells_j]
        nb = di.shape[1]
        self.rows.append(np.repeat(di, nb, axis=1).ravel())
        self.cols.append(np.tile(dj, (1, nb)).ravel())
        self.vals.append(np.asarray(blocks).ravel())

    def matrix(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix((self.n, self.n))
        A = sp.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n, self.n)).tocsr()
        A.sum_duplicates()
        return A


def finalize(A: sp.csr_matrix) -> sp.csr_matrix:
    """Drop stored entries with |a_ij| <= DROP_TOL; sort indices."""
    A = A.tocsr()
    A.sum_duplicates()
    A.data[np.abs(A.data) <= DROP_TOL] = 0.0
    A.eliminate_zeros()
    A.sort_indices()
    return A


def nnz_report(A) -> dict:
    """nnz statistics of an assembled (finalized) matrix."""
    nnz = int(A.nnz)
    rows = int(A.shape[0])
    return {"nnz": nnz, "rows": rows, "nnz_per_row": nnz / rows}


# ---------------------------------------------------------------------------
# broken-Pk kernels

def _dg_flow(space: DgSpace, mob: np.ndarray, params: FlowFormParams,
             q_inject, q_produce, source, dirichlet,
             terms: Sequence[str] = _TERMS, orders=None):
    mesh = space.mesh
    d, nb = mesh.dim, space.ndof_cell
    vol_order, face_order = orders or (2 * space.degree, 2 * space.degree)
    vt = _volume_tables(space, vol_order)
    ft = _face_tables(space, face_order)
    ft["_cell_measures"] = mesh.cell_measures
    acc = _Accumulator(space)
    b = np.zeros(space.ndofs)
    w, phi = vt["w"], vt["phi"]
    cells = np.arange(len(mesh.cells))

    if "volume" in terms:
        blocks = np.einsum("q,cqid,cqjd->cij", w, vt["gphi"], vt["gphi"])
        acc.add_blocks(cells, cells, (mob * vt["scale"])[:, None, None] * blocks)

    const_src = np.zeros(len(mesh.cells))
    if q_inject is not None:
        const_src += q_inject
    if q_produce is not None:
        const_src -= q_produce
    if const_src.any():
        binc = const_src[:, None] * vt["scale"][:, None] * (w @ phi)[None, :]
        np.add.at(b, space.dof_map, binc)
    if source is not None:
        f = np.asarray(source(vt["xq"].reshape(-1, d)), float)
        f = f.reshape(len(mesh.cells), -1)
        binc = vt["scale"][:, None] * np.einsum("q,cq,qi->ci", w, f, phi)
        np.add.at(b, space.dof_map, binc)

    c1, c2 = ft["cells"]
    fw = ft["w"]
    n = ft["n"]
    phis = ft["phi"]
    gns = tuple(np.einsum("fqbd,fd->fqb", g, n) for g in ft["gphi"])
    mobs = (mob[c1], mob[c2])
    fcells = (c1, c2)
    sgn = (1.0, -1.0)
    sig_int, sig_bnd = _face_penalty(params, mob, ft)

    for s in (0, 1):
        for t in (0, 1):
            if "consistency" in terms:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                -0.5 * sgn[s] * mobs[t] * ft["fs_int"],
                                fw, phis[s], gns[t])
                acc.add_blocks(fcells[s], fcells[t], blk)
            if "symmetry" in terms and params.epsilon != 0:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                params.epsilon * 0.5 * sgn[t] * mobs[s]
                                * ft["fs_int"],
                                fw, gns[s], phis[t])
                acc.add_blocks(fcells[s], fcells[t], blk)
            if "penalty" in terms:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                sgn[s] * sgn[t] * sig_int * ft["fs_int"]
                                / ft["len_int"],
                                fw, phis[s], phis[t])
                acc.add_blocks(fcells[s], fcells[t], blk)

    if "boundary" in terms and params.bc == "dirichlet" and len(ft["boundary"]):
        cb = ft["bcells"]
        phib, gnb = ft["phib"], np.einsum("fqbd,fd->fqb", ft["gphib"],
                                          ft["nb_"])
        mobb = mob[cb]
        blk = (np.einsum("f,q,fqi,fqj->fij", -mobb * ft["fs_bnd"], fw,
                         phib, gnb)
               + params.epsilon * np.einsum("f,q,fqi,fqj->fij",
                                            mobb * ft["fs_bnd"], fw, gnb, phib)
               + np.einsum("f,q,fqi,fqj->fij",
                           sig_bnd * ft["fs_bnd"] / ft["len_bnd"],
                           fw, phib, phib))
        acc.add_blocks(cb, cb, blk)
        if dirichlet is not None:
            g = np.asarray(dirichlet(ft["xq_bnd"].reshape(-1, d)), float)
            g = g.reshape(len(cb), -1)
            binc = (params.epsilon
                    * np.einsum("f,q,fq,fqi->fi", mobb * ft["fs_bnd"], fw, g,
                                gnb)
                    + np.einsum("f,q,fq,fqi->fi",
                                sig_bnd * ft["fs_bnd"] / ft["len_bnd"],
                                fw, g, phib))
            np.add.at(b, space.dof_map[cb], binc)

    return acc.matrix(), b


def _dg_transport(space: DgSpace, velocity: ElementVelocity, disp: np.ndarray,
                  params: TransportFormParams, q_inject, q_produce,
                  injected_conc, source, dirichlet,
                  terms: Sequence[str] = _TERMS, orders=None):
    """disp: dispersion tensors D(u_E), shape (nc, d, d)."""
    mesh = space.mesh
    d = mesh.dim
    vol_order, face_order = orders or (2 * space.degree, 2 * space.degree)
    vt = _volume_tables(space, vol_order)
    ft = _face_tables(space, face_order)
    ft["_cell_measures"] = mesh.cell_measures
    acc = _Accumulator(space)
    b = np.zeros(space.ndofs)
    w, phi = vt["w"], vt["phi"]
    cells = np.arange(len(mesh.cells))
    u = velocity.cell_values

    if "volume" in terms:
        Dg = np.einsum("cde,cqje->cqjd", disp, vt["gphi"])
        blocks = np.einsum("q,cqid,cqjd->cij", w, vt["gphi"], Dg)
        if q_produce is not None and q_produce.any():
            blocks = blocks + q_produce[:, None, None] * np.einsum(
                "q,qi,qj->ij", w, phi, phi)[None, :, :]
        ug = np.einsum("cqid,cd->cqi", vt["gphi"], u)
        blocks = blocks - np.einsum("q,cqi,qj->cij", w, ug, phi)
        acc.add_blocks(cells, cells, vt["scale"][:, None, None] * blocks)

    if q_inject is not None and q_inject.any():
        src = q_inject * (injected_conc if np.ndim(injected_conc) == 0
                          else np.asarray(injected_conc, float))
        binc = src[:, None] * vt["scale"][:, None] * (w @ phi)[None, :]
        np.add.at(b, space.dof_map, binc)
    if source is not None:
        f = np.asarray(source(vt["xq"].reshape(-1, d)), float)
        f = f.reshape(len(mesh.cells), -1)
        binc = vt["scale"][:, None] * np.einsum("q,cq,qi->ci", w, f, phi)
        np.add.at(b, space.dof_map, binc)

    c1, c2 = ft["cells"]
    fw = ft["w"]
    n = ft["n"]
    phis = ft["phi"]
    # (D grad phi).n = grad phi . (D n) for symmetric D
    Dn = (np.einsum("fde,fe->fd", disp[c1], n),
          np.einsum("fde,fe->fd", disp[c2], n))
    gns = tuple(np.einsum("fqbd,fd->fqb", g, dn)
                for g, dn in zip(ft["gphi"], Dn))
    fcells = (c1, c2)
    sgn = (1.0, -1.0)
    sig_int, sig_bnd = _transport_penalty(params, disp, ft)

    for s in (0, 1):
        for t in (0, 1):
            if "consistency" in terms:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                -0.5 * sgn[s] * ft["fs_int"], fw,
                                phis[s], gns[t])
                acc.add_blocks(fcells[s], fcells[t], blk)
            if "symmetry" in terms and params.epsilon != 0:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                params.epsilon * 0.5 * sgn[t] * ft["fs_int"],
                                fw, gns[s], phis[t])
                acc.add_blocks(fcells[s], fcells[t], blk)
            if "penalty" in terms:
                blk = np.einsum("f,q,fqi,fqj->fij",
                                sgn[s] * sgn[t] * sig_int * ft["fs_int"]
                                / ft["len_int"],
                                fw, phis[s], phis[t])
                acc.add_blocks(fcells[s], fcells[t], blk)

    if params.upwind and "volume" in terms:
        un = velocity.face_normal[ft["interior"]]
        up = (un >= 0.0)
        for t, mask in ((0, up), (1, ~up)):
            if not mask.any():
                continue
            for s in (0, 1):
                blk = np.einsum("f,q,fqi,fqj->fij",
                                sgn[s] * un[mask] * ft["fs_int"][mask], fw,
                                phis[s][mask], phis[t][mask])
                acc.add_blocks(fcells[s][mask], fcells[t][mask], blk)

    if "boundary" in terms and params.bc == "dirichlet" and len(ft["boundary"]):
        cb = ft["bcells"]
        nbv = ft["nb_"]
        Dnb = np.einsum("fde,fe->fd", disp[cb], nbv)
        gnb = np.einsum("fqbd,fd->fqb", ft["gphib"], Dnb)
        phib = ft["phib"]
        blk = (np.einsum("f,q,fqi,fqj->fij", -ft["fs_bnd"], fw, phib, gnb)
               + params.epsilon * np.einsum("f,q,fqi,fqj->fij", ft["fs_bnd"],
                                            fw, gnb, phib)
               + np.einsum("f,q,fqi,fqj->fij",
                           sig_bnd * ft["fs_bnd"] / ft["len_bnd"],
                           fw, phib, phib))
        unb = velocity.face_normal[ft["boundary"]]
        out = unb > 0.0
        if params.upwind and out.any():
            blk[out] += np.einsum("f,q,fqi,fqj->fij",
                                  unb[out] * ft["fs_bnd"][out], fw,
                                  phib[out], phib[out])
        acc.add_blocks(cb, cb, blk)
        if dirichlet is not None:
            g = np.asarray(dirichlet(ft["xq_bnd"].reshape(-1, d)), float)
            g = g.reshape(len(cb), -1)
            binc = (params.epsilon * np.einsum("f,q,fq,fqi->fi", ft["fs_bnd"],
                                               fw, g, gnb)
                    + np.einsum("f,q,fq,fqi->fi",
                                sig_bnd * ft["fs_bnd"] / ft["len_bnd"],
                                fw, g, phib))
            if params.upwind and (~out).any():
                binc[~out] -= np.einsum("f,q,fq,fqi->fi",
                                        unb[~out] * ft["fs_bnd"][~out], fw,
                                        g[~out], phib[~out])
            np.add.at(b, space.dof_map[cb], binc)

    return acc.matrix(), b


def _transport_penalty(params, disp, tabs):
    if not isinstance(params.penalty, str):
        return (np.full(len(tabs["interior"]), float(params.penalty)),
                np.full(len(tabs["boundary"]), float(params.penalty)))
    c1, c2 = tabs["cells"]
    n = tabs["n"]
    k1 = np.einsum("fd,fde,fe->f", n, disp[c1], n)
    k2 = np.einsum("fd,fde,fe->f", n, disp[c2], n)
    sig_int = 4.0 * 0.5 * (k1 + k2) * tabs["fs_int"] / np.minimum.reduce(
        [_cellmeas(tabs, c1), _cellmeas(tabs, c2)])
    nbv = tabs["nb_"]
    kb = np.einsum("fd,fde,fe->f", nbv, disp[tabs["bcells"]], nbv)
    sig_bnd = 4.0 * kb * tabs["fs_bnd"] / _cellmeas(tabs, tabs["bcells"])
    return sig_int, sig_bnd


# ---------------------------------------------------------------------------
# public assembly entry points

def _restrict(space: CcgSpace, A_dg, b_dg, dirichlet):
    R, _ = space.localization()
    r0 = space.reconstruction_offset(dirichlet) if dirichlet is not None \
        else space.reconstruction_offset()
    A = (R.T @ (A_dg @ R)).tocsr()
    b = R.T @ (b_dg - A_dg @ r0)
    return A, b


def _check_policy(space: CcgSpace, bc: str):
    want = "dirichlet" if bc == "dirichlet" else "mirror"
    if space.boundary_policy != want:
        raise ValueError(
            f"boundary condition {bc!r} needs a space with "
            f"{want!r} boundary policy, got {space.boundary_policy!r}")


def assemble_flow(space, kappa, params: FlowFormParams, viscosity=None,
                  c_field=None, q_inject=None, q_produce=None, source=None):
    """(A, b) realizing the pressure form with mobility K/mu(c).

    space: CcgSpace (cell-centered unknowns) or DgSpace (broken Pk).
    q_inject/q_produce: per-cell well densities; source: callable f(x) for
    manufactured right-hand sides.  Dirichlet data rides on params.
    """
    mesh = space.mesh
    mob = mobility_values(mesh, kappa, viscosity, c_field)
    qi = None if q_inject is None else cell_coefficient(mesh, q_inject)
    qp = None if q_produce is None else cell_coefficient(mesh, q_produce)
    if isinstance(space, CcgSpace):
        _check_policy(space, params.bc)
        dg = _p1_surrogate(space)
        # one-point rules: face terms sampled at barycenters, where jumps of
        # the reconstruction superconverge; exact quadrature would lock the
        # penalty against the slaved jumps
        A_dg, b_dg = _dg_flow(dg, mob, params, qi, qp, source,
                              params.dirichlet, orders=(1, 1))
        A, b = _restrict(space, A_dg, b_dg, params.dirichlet)
    else:
        A, b = _dg_flow(space, mob, params, qi, qp, source, params.dirichlet)
    return finalize(A), b


def assemble_transport(space, velocity: Optional[ElementVelocity],
                       dispersion: DispersionParams,
                       params: TransportFormParams, q_inject=None,
                       q_produce=None, injected_conc=1.0, source=None):
    """(A, M, b) for the concentration equation with frozen velocity.

    A realizes the dispersion/convection/well form, M the phi-weighted mass
    matrix (diagonal for cell-centered spaces), b the injection source.
    """
    mesh = space.mesh
    nf = len(mesh.face_vertices)
    if velocity is None:
        velocity = ElementVelocity(np.zeros((len(mesh.cells), mesh.dim)),
                                   np.zeros(nf))
    if velocity.face_normal.shape != (nf,):
        raise ValueError("velocity must supply a normal flux on every face")
    disp = dispersion_tensor(dispersion, velocity.cell_values)
    poro = cell_coefficient(mesh, params.porosity)
    qi = None if q_inject is None else cell_coefficient(mesh, q_inject)
    qp = None if q_produce is None else cell_coefficient(mesh, q_produce)
    if isinstance(space, CcgSpace):
        _check_policy(space, params.bc)
        dg = _p1_surrogate(space)
        A_dg, b_dg = _dg_transport(dg, velocity, disp, params, qi, qp,
                                   injected_conc, source, params.dirichlet,
                                   orders=(1, 1))
        A, b = _restrict(space, A_dg, b_dg, params.dirichlet)
        M = sp.diags(poro * mesh.cell_measures).tocsr()
    else:
        A, b = _dg_transport(space, velocity, disp, params, qi, qp,
                             injected_conc, source, params.dirichlet)
        M = mass_matrix(space, poro)
    return finalize(A), M, b


def mass_matrix(space, porosity=1.0) -> sp.csr_matrix:
    """phi-weighted mass matrix: diagonal phi_E |E| for cell-centered
    spaces (one-point rule), block-diagonal for broken Pk."""
    mesh = space.mesh
    poro = cell_coefficient(mesh, porosity)
    if isinstance(space, CcgSpace):
        return sp.diags(poro * mesh.cell_measures).tocsr()
    vt = _volume_tables(space, 2 * space.degree)
    blocks = np.einsum("q,qi,qj->ij", vt["w"], vt["phi"], vt["phi"])
    acc = _Accumulator(space)
    cells = np.arange(len(mesh.cells))
    acc.add_blocks(cells, cells,
                   (poro * vt["scale"])[:, None, None] * blocks[None])
    return acc.matrix()


def reconstruct_velocity(space, p_values, kappa, viscosity=None, c_field=None,
                         dirichlet=None) -> ElementVelocity:
    """Element Darcy velocities u = -(K/mu) grad p_h with averaged fluxes."""
    mesh = space.mesh
    mob = mobility_values(mesh, kappa, viscosity, c_field)
    p_values = np.asarray(p_values, float)
    if isinstance(space, CcgSpace):
        grad = (space.gradient_matrix() @ p_values).reshape(-1, mesh.dim)
        grad = grad + (space.gradient_offset(dirichlet) if dirichlet is not None
                       else space.gradient_offset())
    else:
        lam = np.full((1, mesh.dim + 1), 1.0 / (mesh.dim + 1))
        dphi = space.eval_basis_grad(lam)[0]            # (nb, d+1)
        B = mesh.barycentric_maps[1]
        gphi = np.einsum("bi,cid->cbd", dphi, B)        # (nc, nb, d)
        vals = p_values.reshape(len(mesh.cells), space.ndof_cell)
        grad = np.einsum("cb,cbd->cd", vals, gphi)
    u = -mob[:, None] * grad
    un = np.empty(len(mesh.face_vertices))
    bnd = mesh.is_boundary_face
    c1, c2 = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    inter = ~bnd
    un[inter] = 0.5 * np.einsum(
        "fd,fd->f", u[c1[inter]] + u[c2[inter]], mesh.face_normals[inter])
    un[bnd] = np.einsum("fd,fd->f", u[c1[bnd]], mesh.face_normals[bnd])
    return ElementVelocity(u, un)


def upwind_trace(c_field: Field, u_normal: float, face: int) -> float:
    """Face trace taken from the upwind side: the first adjacent cell when
    u.n >= 0 (n oriented first-to-second), the second otherwise."""
    mesh = c_field.space.mesh
    if mesh.is_boundary_face[face]:
        raise ValueError(f"face {face} is a boundary face")
    side = 0 if u_normal >= 0.0 else 1
    cell = mesh.face_cells[face, side]
    if isinstance(c_field.space, CcgSpace):
        return float(c_field.values[cell])
    space = c_field.space
    x = mesh.face_centers[face]
    A, B = mesh.barycentric_maps
    lam = (A[cell] + B[cell] @ x)[None, :]
    vals = c_field.values.reshape(len(mesh.cells), space.ndof_cell)[cell]
    return float(space.eval_basis(lam)[0] @ vals)


# ---------------------------------------------------------------------------
# error norms and sparsity patterns

def l2_error(space, values, exact, order=6, dirichlet=None) -> float:
    """Broken L2 distance between a field and a callable exact(x).

    Cell-centered fields are measured through their affine reconstruction.
    """
    mesh = space.mesh
    if isinstance(space, CcgSpace):
        dg = _p1_surrogate(space)
        R, _ = space.localization()
        r0 = space.reconstruction_offset(dirichlet) if dirichlet is not None \
            else space.reconstruction_offset()
        nodal = R @ np.asarray(values, float) + r0
        return l2_error(dg, nodal, exact, order)
    vt = _volume_tables(space, order)
    vals = np.asarray(values, float).reshape(len(mesh.cells), space.ndof_cell)
    uh = np.einsum("cb,qb->cq", vals, vt["phi"])
    ue = np.asarray(exact(vt["xq"].reshape(-1, mesh.dim)),
                    float).reshape(uh.shape)
    err2 = vt["scale"] @ ((uh - ue) ** 2 @ vt["w"])
    return float(np.sqrt(err2))


def dg_pattern_nnz(mesh: Mesh, degree: int = 1) -> int:
    """Structural nnz of the broken-Pk flow matrix without assembling values.

    Full diagonal blocks plus cross-face blocks with the exact zeros of the
    nodal basis removed: entry (i, j) of a cross block vanishes when both
    basis traces vanish identically on the shared face, i.e. when neither
    lattice node lies on it.  For P1 that is the single face-opposite vertex
    pair, which reproduces value-assembled counts exactly.
    """
    d = mesh.dim
    nb = math.comb(degree + d, d)
    face_nodes = math.comb(degree + d - 1, d - 1)
    vanishing = nb - face_nodes
    n_int = int((~mesh.is_boundary_face).sum())
    return nb * nb * len(mesh.cells) + (nb * nb - vanishing ** 2) * 2 * n_int


def _dg_pattern_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Boolean broken-P1 flow pattern (the blocks dg_pattern_nnz counts)."""
    nb = mesh.dim + 1
    nc = len(mesh.cells)
    dofs = np.arange(nc * nb, dtype=np.int64).reshape(nc, nb)
    inter = np.flatnonzero(~mesh.is_boundary_face)
    c1, c2 = mesh.face_cells[inter, 0], mesh.face_cells[inter, 1]
    # local face index == index of the opposite vertex, whose basis function
    # is the one vanishing on the face
    k1 = np.argmax(mesh.cell_face_ids[c1] == inter[:, None], axis=1)
    k2 = np.argmax(mesh.cell_face_ids[c2] == inter[:, None], axis=1)
    ii, jj = np.divmod(np.arange(nb * nb), nb)
    rows = [np.repeat(dofs, nb, axis=1).ravel()]
    cols = [np.tile(dofs, (1, nb)).ravel()]
    for a, b_, ka, kb in ((c1, c2, k1, k2), (c2, c1, k2, k1)):
        sel = ~((ii[None, :] == ka[:, None]) & (jj[None, :] == kb[:, None]))
        rows.append(dofs[a][:, ii][sel])
        cols.append(dofs[b_][:, jj][sel])
    A = sp.coo_matrix(
        (np.ones(sum(len(r) for r in rows), np.float32),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(nc * nb, nc * nb)).tocsr()
    A.sum_duplicates()
    return A


def ccg_pattern_nnz(space: CcgSpace) -> int:
    """Structural nnz of the restricted flow matrix, R^T A R over booleans.

    The localization structure comes from the stencil cell lists rather than
    the numeric weights: a stencil member whose barycentric weight happens to
    vanish (face barycenter on the segment of the two adjacent centers, as on
    uniform triangulations) still occupies a slot in positionally-assembled
    sparse storage, which is what allocation and solver cost see.
    """
    mesh = space.mesh
    d = mesh.dim
    nc = len(mesh.cells)
    # per-cell support: the cell itself plus every member of its face stencils
    fids = mesh.cell_face_ids                        # (nc, d+1)
    sup = np.concatenate(
        [np.arange(nc, dtype=np.int64)[:, None],
         space.stencil_cells[fids].reshape(nc, -1)], axis=1)
    own = np.repeat(np.arange(nc, dtype=np.int64), sup.shape[1])
    sup = sup.ravel()
    keep = sup >= 0                                  # boundary padding
    own, sup = own[keep], sup[keep]
    nb = d + 1
    rows = (own[:, None] * nb + np.arange(nb)).ravel()
    cols = np.repeat(sup, nb)
    Rb = sp.csr_matrix(
        (np.ones(len(rows), np.float32), (rows, cols)), shape=(nc * nb, nc))
    Rb.sum_duplicates()
    Rb.data[:] = 1.0
    Ab = _dg_pattern_matrix(mesh)
    prod = (Rb.T @ (Ab @ Rb)).tocsr()
    prod.sum_duplicates()
    return int(prod.nnz)


def project(space, f, order: int = 4) -> np.ndarray:
    """L2 projection of f(x): exact cell averages for cell-centered spaces,
    local mass-matrix projection for broken Pk."""
    mesh = space.mesh
    d = mesh.dim
    if isinstance(space, CcgSpace):
        pts, w = quadrature(d, order)
        lam = barycentric_points(pts)
        xq = np.einsum("qi,cid->cqd", lam, mesh.cell_vertices)
        vals = np.asarray(f(xq.reshape(-1, d)), float).reshape(len(mesh.cells), -1)
        # reference weights sum to 1/d!, so this is the mean of f over E
        return (vals @ w) * math.factorial(d)
    vt = _volume_tables(space, max(order, 2 * space.degree))
    nc, nq = vt["xq"].shape[:2]
    fv = np.asarray(f(vt["xq"].reshape(-1, d)), float).reshape(nc, nq)
    # affine cells: the Jacobian cancels between mass block and moments
    Mloc = np.einsum("q,qi,qj->ij", vt["w"], vt["phi"], vt["phi"])
    rhs = np.einsum("q,cq,qi->ci", vt["w"], fv, vt["phi"])
    return np.linalg.solve(Mloc, rhs.T).T.ravel()
