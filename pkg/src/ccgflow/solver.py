"""Sparse linear solves and the lagged sequential time stepper.

One step advances the coupled system in three stages: assemble and solve the
pressure equation with viscosity evaluated at the previous concentration,
reconstruct element Darcy velocities, then solve the concentration equation
with that frozen velocity (backward Euler, or a trapezoidal variant that
keeps the lagged velocity in both halves so each step still performs one
flow solve).  Matrices are scipy CSR throughout.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (FlowFormParams, TransportFormParams, assemble_flow,
                       assemble_transport, mass_matrix, project,
                       reconstruct_velocity)
from .physics import DispersionParams, ViscosityModel, WellSources
from .spaces import CcgSpace, DgSpace

# beyond this dimension the solver switches from sparse LU to preconditioned
# GMRES (desk-scale memory budget)
DIRECT_CAP = 200_000


class LinearSolveError(RuntimeError):
    """Factorization breakdown or Krylov stagnation, with diagnostics."""


def solve_linear(A: sp.spmatrix, b: np.ndarray, *,
                 direct_cap: int = DIRECT_CAP, tol: float = 1e-10,
                 maxiter: int = 500) -> np.ndarray:
    """Solve Ax = b to relative residual <= tol.

    Sparse LU (with iterative refinement) up to `direct_cap` unknowns,
    ILU-preconditioned restarted GMRES beyond it.
    """
    n = A.shape[0]
    if A.shape[1] != n or len(b) != n:
        raise ValueError(f"shape mismatch: A {A.shape}, b {len(b)}")
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    if n <= direct_cap:
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise LinearSolveError(
                f"factorization breakdown (n={n}, nnz={A.nnz}): {exc}") from exc
        x = lu.solve(b)
        for _ in range(3):
            r = b - A @ x
            if np.linalg.norm(r) <= tol * bnorm:
                break
            x = x + lu.solve(r)
    else:
        try:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=10.0)
        except RuntimeError as exc:
            raise LinearSolveError(
                f"ILU breakdown (n={n}, nnz={A.nnz}): {exc}") from exc
        prec = spla.LinearOperator((n, n), matvec=ilu.solve)
        iters = [0]

        def count(_):
            iters[0] += 1

        x, info = spla.gmres(A, b, M=prec, rtol=0.1 * tol, atol=0.0,
                             restart=200, maxiter=maxiter, callback=count,
                             callback_type="pr_norm")
        if info != 0:
            rel = np.linalg.norm(b - A @ x) / bnorm
            raise LinearSolveError(
                f"GMRES stagnated after {iters[0]} iterations "
                f"(n={n}, relative residual {rel:.3e})")
    rel = float(np.linalg.norm(b - A @ x)) / bnorm
    if rel > tol:
        raise LinearSolveError(
            f"solution rejected: relative residual {rel:.3e} > {tol:.1e} "
            f"(n={n}, nnz={A.nnz})")
    return x


def pin_cell_gauge(A: sp.spmatrix, b: np.ndarray,
                   cell: int = 0) -> tuple[sp.csr_matrix, np.ndarray]:
    """Pinned copies of (A, b): row `cell` replaced by the identity row.

    Fixes the constant mode of a pure-Neumann pressure system; callers shift
    the solution to zero mean afterwards.
    """
    A = A.tocsr(copy=True)
    s, e = A.indptr[cell], A.indptr[cell + 1]
    cols = A.indices[s:e]
    j = int(np.searchsorted(cols, cell))
    if j >= len(cols) or cols[j] != cell:
        raise ValueError(f"row {cell} has no stored diagonal to pin")
    A.data[s:e] = 0.0
    A.data[s + j] = 1.0
    b = np.asarray(b, float).copy()
    b[cell] = 0.0
    return A, b


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid; scheme 'be' (backward Euler) or 'cn'."""

    t_end: float
    dt: float
    scheme: str = "be"

    def __post_init__(self):
        object.__setattr__(self, "scheme", self.scheme.lower())
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < self.dt:
            raise ValueError("t_end must be at least one step")
        if self.scheme not in ("be", "cn"):
            raise ValueError(f"scheme must be 'be' or 'cn', got {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n_steps + 1)


@dataclass
class MassLedger:
    """Cumulative injected/produced solute mass and current stored mass."""

    stored_initial: float
    injected: float = 0.0
    produced: float = 0.0
    stored: float = 0.0

    def __post_init__(self):
        if self.stored == 0.0:
            self.stored = self.stored_initial

    def imbalance(self) -> float:
        return self.injected - self.produced - (self.stored - self.stored_initial)

    def relative_imbalance(self) -> float:
        scale = max(abs(self.injected), abs(self.produced),
                    abs(self.stored - self.stored_initial), 1e-30)
        return abs(self.imbalance()) / scale


@dataclass
class StepDiagnostics:
    step: int
    time: float
    flow_residual: float
    transport_residual: float
    mass_residual: float
    c_min: float
    c_max: float
    producer_c: float
    flow_seconds: float
    transport_seconds: float


@dataclass
class SimulationState:
    time: float
    step: int
    pressure: np.ndarray
    concentration: np.ndarray
    velocity: object  # ElementVelocity after the first step
    ledger: MassLedger


@dataclass
class DisplacementProblem:
    """Everything a sequential step needs besides the time grid.

    Sources and Dirichlet data are callables of (x, t); time-independent
    data may ignore t.  Well densities integrate back to the configured
    rate exactly (see WellSources).
    """

    space: Union[CcgSpace, DgSpace]
    permeability: Union[float, np.ndarray]
    flow_params: FlowFormParams
    transport_params: TransportFormParams
    dispersion: DispersionParams
    viscosity: Optional[ViscosityModel] = None
    wells: Optional[WellSources] = None
    flow_source: Optional[Callable] = None
    transport_source: Optional[Callable] = None
    flow_dirichlet: Optional[Callable] = None
    transport_dirichlet: Optional[Callable] = None
    initial_concentration: Union[float, Callable] = 0.0

    def well_densities(self, mesh) -> tuple:
        cached = self.__dict__.get("_well_cache")
        if cached is None:
            if self.wells is None:
                z = np.zeros(len(mesh.cells))
                cached = (z, z)
            else:
                cached = self.wells.cell_densities(mesh)
            self.__dict__["_well_cache"] = cached
        return cached


@dataclass
class _StepWork:
    """Per-run invariants shared by every step."""

    M: sp.csr_matrix
    ones: np.ndarray
    q_inject: np.ndarray
    q_produce: np.ndarray
    producer_cell: int
    gauge_weights: Optional[np.ndarray]


def _producer_corner_cell(problem: DisplacementProblem) -> int:
    """Cell whose centroid is nearest the production-box corner farthest
    from the injector (the breakthrough monitoring point)."""
    if problem.wells is None:
        return 0
    mesh = problem.space.mesh
    inj = np.array([(lo + hi) / 2 for lo, hi in problem.wells.injection_box])
    corners = np.array(np.meshgrid(
        *[(lo, hi) for lo, hi in problem.wells.production_box],
        indexing="ij")).reshape(mesh.dim, -1).T
    corner = corners[np.argmax(np.linalg.norm(corners - inj, axis=1))]
    return int(np.argmin(np.linalg.norm(mesh.cell_centroids - corner, axis=1)))


def _step_work(problem: DisplacementProblem) -> _StepWork:
    space = problem.space
    mesh = space.mesh
    M = mass_matrix(space, problem.transport_params.porosity)
    qi, qp = problem.well_densities(mesh)
    gauge = None
    if problem.flow_params.bc == "noflow":
        # measure weights of the constant mode: unit-porosity mass row sums
        gauge = np.asarray(mass_matrix(space, 1.0).sum(axis=1)).ravel()
    ones = np.ones(M.shape[0])
    return _StepWork(M, ones, qi, qp, _producer_corner_cell(problem), gauge)


def _at_time(f: Optional[Callable], t: float) -> Optional[Callable]:
    if f is None:
        return None
    return lambda x, _t=t: f(x, _t)


def initial_state(problem: DisplacementProblem,
                  work: Optional[_StepWork] = None) -> SimulationState:
    """State at t = 0: projected initial concentration, zero pressure."""
    space = problem.space
    if callable(problem.initial_concentration):
        c0 = project(space, problem.initial_concentration)
    else:
        c0 = np.full(space.ndofs, float(problem.initial_concentration))
    work = work or _step_work(problem)
    stored = float(work.ones @ (work.M @ c0))
    return SimulationState(0.0, 0, np.zeros(space.ndofs), c0, None,
                           MassLedger(stored_initial=stored))


def step(state: SimulationState, problem: DisplacementProblem, grid: TimeGrid,
         work: Optional[_StepWork] = None,
         ) -> tuple[SimulationState, StepDiagnostics]:
    """One lagged sequential step from state.time to state.time + dt."""
    work = work or _step_work(problem)
    space, dt = problem.space, grid.dt
    t1 = state.time + dt
    c_old = state.concentration

    # stage 1: pressure with viscosity at the old concentration
    t_flow = time.perf_counter()
    fp = replace(problem.flow_params,
                 dirichlet=_at_time(problem.flow_dirichlet, t1))
    A_p, b_p = assemble_flow(
        space, problem.permeability, fp, viscosity=problem.viscosity,
        c_field=c_old, q_inject=work.q_inject, q_produce=work.q_produce,
        source=_at_time(problem.flow_source, t1))
    try:
        if fp.bc == "noflow":
            A_sys, b_sys = pin_cell_gauge(A_p, b_p)
            p = solve_linear(A_sys, b_sys)
            p -= (work.gauge_weights @ p) / work.gauge_weights.sum()
            # residual of the pinned system; the singular original cannot be
            # driven below assembly roundoff by any solution
            b_sys[0] = p[0]
        else:
            A_sys, b_sys = A_p, b_p
            p = solve_linear(A_sys, b_sys)
    except LinearSolveError as exc:
        raise LinearSolveError(f"flow stage, step {state.step + 1}: {exc}") from exc
    bn = np.linalg.norm(b_sys)
    flow_res = float(np.linalg.norm(b_sys - A_sys @ p)) / (bn if bn else 1.0)
    t_flow = time.perf_counter() - t_flow

    # stage 2: element velocities from the new pressure, old concentration
    u = reconstruct_velocity(space, p, problem.permeability,
                             viscosity=problem.viscosity, c_field=c_old,
                             dirichlet=fp.dirichlet)

    # stage 3: transport with the frozen velocity
    t_tr = time.perf_counter()
    tp = replace(problem.transport_params,
                 dirichlet=_at_time(problem.transport_dirichlet, t1))
    A_c, M, b_c = assemble_transport(
        space, u, problem.dispersion, tp, q_inject=work.q_inject,
        q_produce=work.q_produce,
        injected_conc=(problem.wells.injected_concentration
                       if problem.wells else 1.0),
        source=_at_time(problem.transport_source, t1))
    Mdt = work.M.multiply(1.0 / dt)
    if grid.scheme == "be":
        sys, rhs = (Mdt + A_c).tocsr(), Mdt @ c_old + b_c
    else:
        half = A_c.multiply(0.5)
        sys, rhs = (Mdt + half).tocsr(), (Mdt - half) @ c_old + b_c
    try:
        c_new = solve_linear(sys, rhs)
    except LinearSolveError as exc:
        raise LinearSolveError(
            f"transport stage, step {state.step + 1}: {exc}") from exc
    rn = np.linalg.norm(rhs)
    tr_res = float(np.linalg.norm(rhs - sys @ c_new)) / (rn if rn else 1.0)
    t_tr = time.perf_counter() - t_tr

    # ledger: row sums of the solved system are the discrete balance
    c_eval = c_new if grid.scheme == "be" else 0.5 * (c_old + c_new)
    ones = work.ones
    mass_res = float(ones @ (work.M @ (c_new - c_old)) / dt
                     + ones @ (A_c @ c_eval) - ones @ b_c)
    led = state.ledger
    ledger = MassLedger(led.stored_initial,
                        led.injected + dt * float(ones @ b_c),
                        led.produced + dt * float(ones @ (A_c @ c_eval)),
                        float(ones @ (work.M @ c_new)))
    diag = StepDiagnostics(
        step=state.step + 1, time=t1, flow_residual=flow_res,
        transport_residual=tr_res, mass_residual=mass_res,
        c_min=float(c_new.min()), c_max=float(c_new.max()),
        producer_c=float(c_new[work.producer_cell]) if isinstance(
            space, CcgSpace) else float(
            c_new[space.dof_map[work.producer_cell]].mean()),
        flow_seconds=t_flow, transport_seconds=t_tr)
    return SimulationState(t1, state.step + 1, p, c_new, u, ledger), diag


@dataclass
class SimulationResult:
    final: SimulationState
    diagnostics: list
    snapshots: list  # (time, pressure, concentration) triples


def run(problem: DisplacementProblem, grid: TimeGrid,
        snapshot_times: Sequence[float] = ()) -> SimulationResult:
    """Advance from t = 0 to t_end recording diagnostics and snapshots."""
    for ts in snapshot_times:
        if not (0.0 <= ts <= grid.t_end + 1e-12):
            raise ValueError(f"snapshot time {ts} outside [0, {grid.t_end}]")
    work = _step_work(problem)
    state = initial_state(problem, work)
    remaining = sorted(snapshot_times)
    snaps, diags = [], []
    while remaining and remaining[0] <= 0.5 * grid.dt:
        snaps.append((0.0, state.pressure.copy(), state.concentration.copy()))
        remaining.pop(0)
    for _ in range(grid.n_steps):
        state, diag = step(state, problem, grid, work)
        diags.append(diag)
        while remaining and remaining[0] <= state.time + 0.5 * grid.dt:
            snaps.append((state.time, state.pressure.copy(),
                          state.concentration.copy()))
            remaining.pop(0)
    return SimulationResult(state, diags, snaps)


def breakthrough_time(diagnostics: Sequence[StepDiagnostics],
                      threshold: float = 0.1) -> Optional[float]:
    """First step time with producer-corner concentration above threshold."""
    for d in diagnostics:
        if d.producer_c > threshold:
            return d.time
    return None
