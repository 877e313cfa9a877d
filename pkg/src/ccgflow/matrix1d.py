"""Closed-form 1D cell-centered stiffness matrices and monotonicity checks.

The cell-centered Galerkin discretization of -u'' = f with homogeneous
Dirichlet data on a uniform 1D mesh produces a symmetric 7-banded matrix
(1/h)*T whose interior and boundary band values are explicit polynomials in
the symmetry parameter eps and the penalty sigma.  This module builds that
matrix directly from the band formulas and provides the machinery used to
verify its structural properties: Z-matrix tests, irreducibility, dense
inverse-positivity, the tridiagonal/7-band Toeplitz comparison matrices, and
the quartic root criterion that certifies monotonicity on the line
sigma + eps = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class ToeplitzCoefficients:
    """Band values of the 1D cell-centered stiffness matrix (h = 1 scale).

    a, b, c, d are the interior diagonals (offsets 0..3); a1, a0, b0, c0
    replace them in the first/last three rows as laid out in ``build_T``.
    """

    a: float
    b: float
    c: float
    d: float
    a1: float
    a0: float
    b0: float
    c0: float


def toeplitz_coefficients(eps: float, sigma: float) -> ToeplitzCoefficients:
    """Evaluate the eight band formulas for given symmetry/penalty values."""
    return ToeplitzCoefficients(
        a=5 * sigma / 4 - eps / 4 + 3 / 4,
        b=eps / 16 - 15 * sigma / 16 - 1 / 16,
        c=eps / 8 + 3 * sigma / 8 - 3 / 8,
        d=1 / 16 - sigma / 16 - eps / 16,
        a1=5 * sigma / 4 - 3 * eps / 16 + 11 / 16,
        a0=13 * sigma / 8 - 5 * eps / 16 + 13 / 16,
        b0=5 / 16 - 9 * sigma / 8 - eps / 16,
        c0=3 * eps / 16 + 7 * sigma / 16 - 7 / 16,
    )


def build_T(N: int, eps: float, sigma: float, h: float = 1.0) -> sp.csr_matrix:
    """Build the N x N matrix (1/h)*T_{eps,sigma}.

    Rows 1..3 and N-2..N carry the boundary bands (a0 b0 c0 d / b0 a1 b c d /
    c0 b a b c d); all other rows carry the interior stencil (d c b a b c d).
    The layout is only well defined for N >= 7.
    """
    if N < 7:
        raise ValueError(f"band layout requires N >= 7, got N={N}")
    co = toeplitz_coefficients(eps, sigma)
    T = np.zeros((N, N))
    for off, val in ((0, co.a), (1, co.b), (2, co.c), (3, co.d)):
        idx = np.arange(N - off)
        T[idx, idx + off] = val
        T[idx + off, idx] = val
    for i, j, val in (
        (0, 0, co.a0), (0, 1, co.b0), (0, 2, co.c0),
        (1, 1, co.a1),
    ):
        T[i, j] = val
        T[j, i] = val
        T[N - 1 - i, N - 1 - j] = val
        T[N - 1 - j, N - 1 - i] = val
    T /= h
    out = sp.csr_matrix(T)
    out.eliminate_zeros()
    return out


def is_z_matrix(T: sp.spmatrix, tol: float = 1e-14) -> bool:
    """True iff every off-diagonal entry is <= tol."""
    A = sp.coo_matrix(T)
    off = A.row != A.col
    return bool(np.all(A.data[off] <= tol))


def is_irreducible(T: sp.spmatrix) -> bool:
    """True iff the sparsity pattern's directed graph is strongly connected."""
    n_comp, _ = connected_components(sp.csr_matrix(T), directed=True,
                                     connection="strong")
    return n_comp == 1


def is_monotone(T: sp.spmatrix, dense_cap: int = 512,
                tol: float = -1e-10) -> tuple[bool, float]:
    """Dense inverse-positivity check.

    Returns (flag, min inverse entry); flag is True iff the inverse exists and
    its smallest entry is >= tol.  tol is slightly negative to tolerate
    roundoff in genuinely nonnegative inverses.  Guarded by a dense size cap.
    """
    n = T.shape[0]
    if n > dense_cap:
        raise ValueError(f"dense inversion capped at {dense_cap}, got n={n}")
    dense = T.toarray() if sp.issparse(T) else np.asarray(T)
    try:
        inv = np.linalg.inv(dense)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"matrix is singular: {exc}") from exc
    m = float(inv.min())
    return m >= tol, m


def monotone_range_sigma2() -> float:
    """Largest penalty on the line sigma + eps = 1 with nonneg. discriminant."""
    return 104 * math.sqrt(2) / 79 - 12 / 79


def discriminant(sigma: float) -> float:
    """Closed-form discriminant of the shifted root polynomial on sigma+eps=1."""
    return 17 / 16 - 79 * sigma ** 2 / 256 - 3 * sigma / 32


@dataclass(frozen=True)
class SandwichMatrices:
    """Toeplitz comparison matrices with band maxima of T_{eps,sigma}.

    T_M is the 7-band Toeplitz matrix with bands (A, B, C, d) and T_m the
    tridiagonal one with (A, B), where A = max{a0, a1, a}, B = max{b0, b},
    C = max{c0, c}.  Every band of T_M dominates the corresponding band of
    T_{eps,sigma}, so T <= T_M holds entrywise.  The analogous lower claim
    T_m <= T is *not* an entrywise fact (the T_m diagonal is the band maximum,
    which exceeds a1 and a); ``check`` reports both directions separately.
    """

    eps: float
    sigma: float
    A: float
    B: float
    C: float
    d: float

    def build_T_m(self, N: int, h: float = 1.0) -> sp.csr_matrix:
        return _toeplitz_band(N, (self.A, self.B), h)

    def build_T_M(self, N: int, h: float = 1.0) -> sp.csr_matrix:
        return _toeplitz_band(N, (self.A, self.B, self.C, self.d), h)


def _toeplitz_band(N: int, bands: tuple[float, ...], h: float) -> sp.csr_matrix:
    T = np.zeros((N, N))
    for off, val in enumerate(bands):
        idx = np.arange(N - off)
        T[idx, idx + off] = val
        T[idx + off, idx] = val
    out = sp.csr_matrix(T / h)
    out.eliminate_zeros()
    return out


def sandwich_matrices(eps: float, sigma: float) -> SandwichMatrices:
    co = toeplitz_coefficients(eps, sigma)
    return SandwichMatrices(
        eps=eps, sigma=sigma,
        A=max(co.a0, co.a1, co.a),
        B=max(co.b0, co.b),
        C=max(co.c0, co.c),
        d=co.d,
    )


def sandwich_check(N: int, eps: float, sigma: float,
                   tol: float = 1e-12) -> dict:
    """Entrywise comparisons and monotonicity of T, T_m, T_M at size N."""
    sm = sandwich_matrices(eps, sigma)
    T = build_T(N, eps, sigma).toarray()
    Tm = sm.build_T_m(N).toarray()
    TM = sm.build_T_M(N).toarray()
    mono_T, min_T = is_monotone(sp.csr_matrix(T))
    mono_m, min_m = is_monotone(sp.csr_matrix(Tm))
    mono_M, min_M = is_monotone(sp.csr_matrix(TM))
    return {
        "lower_entrywise": bool(np.all(Tm <= T + tol)),
        "upper_entrywise": bool(np.all(T <= TM + tol)),
        "monotone_T": mono_T,
        "monotone_T_m": mono_m,
        "monotone_T_M": mono_M,
        "min_inverse_T": min_T,
        "min_inverse_T_m": min_m,
        "min_inverse_T_M": min_M,
    }


def root_criterion_check(eps: float, sigma: float) -> dict:
    """Root criterion for monotonicity of T_M on the line sigma + eps = 1.

    The symbol polynomial of T_M with d = 0 reduces, via w = z + 1/z, to
    Q(w) = C w^2 + B w + (A - 2C).  All roots z are real positive iff both
    roots w of Q are real and > 2, which the four reported sign conditions on
    the shifted polynomial Q(w+2) guarantee.
    """
    if abs(sigma + eps - 1.0) > 1e-12:
        raise ValueError("root criterion applies on the line sigma + eps = 1")
    sm = sandwich_matrices(eps, sigma)
    A, B, C = sm.A, sm.B, sm.C
    delta = (4 * C + B) ** 2 - 4 * C * (2 * C + 2 * B + A)
    conditions = {
        "discriminant_nonneg": delta >= 0,
        "C_positive": C > 0,
        "4C_plus_B_negative": 4 * C + B < 0,
        "2C_2B_A_positive": 2 * C + 2 * B + A > 0,
    }
    roots_w: list[float] = []
    roots_z: list[float] = []
    if C != 0 and delta >= 0:
        sq = math.sqrt(delta)
        roots_w = sorted(((-B + sq) / (2 * C), (-B - sq) / (2 * C)))
        for w in roots_w:
            if w >= 2:
                s = math.sqrt(w * w - 4)
                roots_z.extend(((w - s) / 2, (w + s) / 2))
    all_w_above_2 = len(roots_w) == 2 and all(w > 2 for w in roots_w)
    return {
        "discriminant": delta,
        "conditions": conditions,
        "roots_w": roots_w,
        "roots_z": roots_z,
        "all_conditions_hold": all(conditions.values()),
        "roots_real_above_two": all_w_above_2,
    }
