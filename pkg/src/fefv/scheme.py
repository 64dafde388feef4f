"""Implicit backward-Euler step for the mixed FE-FV method.

Unknowns per time level: cellwise density rho > 0, cellwise potential
temperature theta (evolved through Z = rho * theta), and a
boundary-constrained Crouzeix-Raviart velocity.  One step solves

  * transport of rho and Z with the dissipative upwind flux (linear,
    M-structured, for a frozen velocity),
  * the momentum equation with viscous terms mu grad:grad + nu div div
    and pressure p(Z) + h^delta (rho^2 + Z^2) acting through the broken
    divergence,

coupled by a Picard loop: each iterate freezes the velocity in the
fluxes, solves the two transport systems exactly, then solves the
(linear) momentum system with the fresh rho, Z.  Convergence is declared
on the max-norm of the scaled residual of the fully coupled system.  If
Picard stalls, a continuation fallback rescales the flux, div-div and
pressure terms by zeta and walks zeta from 1/N to 1, warm-starting each
stage; the zeta-scaled systems keep the M-structure, so positivity and
conservation hold at every iterate of every stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import SimplicialMesh
from .spaces import CellField, CRVectorField, cell_average_of_cr, project_cell, project_cr
from . import upwind

DEGENERATE_FLOOR = 1e-300


class SolverError(Exception):
    """Raised when a step cannot be completed at the requested tolerance."""


def _positive(name, value):
    return [] if value > 0 else [f"{name} must be > 0, got {value}"]


@dataclass(frozen=True)
class SchemeParams:
    """Physical and numerical parameters of the method.

    gamma > 1 and a > 0 define the pressure p(Z) = a Z^gamma; mu > 0 and
    lam >= -2 mu / d are the viscosities with nu = (d-2)/d mu + lam >= 0;
    epsilon > 1 is the upwind-penalty exponent (weight h^epsilon); delta
    in (0, 1/2) the artificial-pressure exponent; dt and T the time step
    and final time with T/dt a positive integer.
    """

    gamma: float
    a: float
    mu: float
    lam: float
    epsilon: float
    delta: float
    dt: float
    T: float
    dim: int = 2

    def __post_init__(self):
        errors = []
        if not self.gamma > 1.0:
            errors.append(f"gamma must be > 1, got {self.gamma}")
        errors += _positive("a", self.a)
        errors += _positive("mu", self.mu)
        if self.lam < -2.0 * self.mu / self.dim:
            errors.append(f"lambda must be >= -2 mu / d, got {self.lam}")
        if self.nu < 0.0:
            errors.append(f"nu = (d-2)/d mu + lambda must be >= 0, got {self.nu}")
        if not self.epsilon > 1.0:
            errors.append(f"epsilon must be > 1, got {self.epsilon}")
        if not 0.0 < self.delta < 0.5:
            errors.append(f"delta must be in (0, 1/2), got {self.delta}")
        errors += _positive("dt", self.dt)
        errors += _positive("T", self.T)
        if not errors:
            n = self.T / self.dt
            if abs(n - round(n)) > 1e-8 * max(1.0, n) or round(n) < 1:
                errors.append(f"T/dt must be a positive integer, got {n}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def nu(self) -> float:
        return (self.dim - 2.0) / self.dim * self.mu + self.lam

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass(frozen=True)
class SolverSettings:
    """Nonlinear and linear solver controls."""

    tol_nl: float = 1e-10
    tol_lin: float = 1e-12
    max_picard: int = 200
    relax: float = 1.0
    homotopy_steps: int = 8

    def __post_init__(self):
        if not self.tol_nl > 0.0:
            raise ValueError(f"tol_nl must be > 0, got {self.tol_nl}")
        if not 0.0 < self.relax <= 1.0:
            raise ValueError(f"relax must be in (0, 1], got {self.relax}")
        if self.homotopy_steps < 1:
            raise ValueError("homotopy_steps must be >= 1")


@dataclass
class State:
    """One time level: (rho, theta, u) with Z = rho * theta derived."""

    k: int
    rho: CellField
    theta: CellField
    u: CRVectorField

    @property
    def mesh(self) -> SimplicialMesh:
        return self.rho.mesh

    @property
    def Z(self) -> CellField:
        return CellField(self.mesh, self.rho.values * self.theta.values)

    def u_bar(self) -> np.ndarray:
        """Cellwise velocity averages (n_elements, d)."""
        return cell_average_of_cr(self.u)

    def validate(self) -> None:
        if np.any(self.rho.values <= 0.0):
            raise ValueError("state has nonpositive density")
        if np.any(self.theta.values <= 0.0):
            raise ValueError("state has nonpositive potential temperature")
        ext = self.mesh.exterior_faces
        if np.any(self.u.values[ext] != 0.0):
            raise ValueError("velocity violates the no-slip constraint")


def pressure(Z: CellField, params: SchemeParams) -> CellField:
    """Pressure p = a Z^gamma."""
    if np.any(Z.values < 0.0):
        raise ValueError("pressure requires Z >= 0")
    return CellField(Z.mesh, params.a * Z.values ** params.gamma)


def pressure_potential(Z: CellField, params: SchemeParams) -> CellField:
    """Pressure potential P = a Z^gamma / (gamma - 1)."""
    if np.any(Z.values < 0.0):
        raise ValueError("pressure potential requires Z >= 0")
    return CellField(Z.mesh, params.a / (params.gamma - 1.0)
                     * Z.values ** params.gamma)


def discrete_initial_data(rho0, theta0, u0, mesh: SimplicialMesh) -> State:
    """Project continuous initial data onto the discrete spaces.

    rho0 and theta0 are cell-averaged, u0 is face-mean projected with the
    no-slip constraint enforced.  The projected data must keep rho > 0
    and theta > 0 (cell averaging preserves strict pointwise bounds).
    """
    rho = project_cell(rho0, mesh)
    theta = project_cell(theta0, mesh)
    u = project_cr(u0, mesh, boundary_constrained=True)
    if not isinstance(u, CRVectorField):
        raise ValueError("u0 must be vector valued")
    if np.any(rho.values <= 0.0):
        raise ValueError(
            f"projected density not positive (min {rho.values.min():.3e})")
    if np.any(theta.values <= 0.0):
        raise ValueError(
            f"projected temperature not positive (min {theta.values.min():.3e})")
    return State(k=0, rho=rho, theta=theta, u=u)


@dataclass
class StepReport:
    next: State
    picard_iters: int
    residual: float
    used_homotopy: bool


@dataclass
class RunResult:
    states: list
    reports: list


_ORDERING = "MMD_AT_PLUS_A"


def _defect_correct(matvec, psolve, b, tol_abs, max_sweeps=40):
    """Preconditioned defect correction; returns (x, converged).

    Stops early when the residual no longer contracts, signalling that
    the preconditioner is too far from the operator.
    """
    x = psolve(b)
    prev_norm = np.inf
    for _ in range(max_sweeps):
        r = b - matvec(x)
        norm = np.abs(r).max()
        if norm <= tol_abs:
            return x, True
        if norm > 0.6 * prev_norm:
            return x, False
        prev_norm = norm
        x = x + psolve(r)
    return x, False


class _LazyDirectSolver:
    """Direct solver that reuses its factorization across nearby matrices.

    The cached LU acts as a preconditioner for defect correction against
    the current matrix; when the correction stalls, the matrix is
    refactorized.  All decisions are data-deterministic, so repeated
    runs produce bit-identical results.
    """

    def __init__(self, tol: float):
        self.tol = tol
        self._lu = None
        self._shape = None

    def solve(self, A: sp.csc_matrix, b: np.ndarray) -> np.ndarray:
        scale = np.abs(b).max()
        if scale == 0.0:
            return np.zeros_like(b)
        tol_abs = self.tol * scale
        if self._lu is not None and self._shape == A.shape:
            x, ok = _defect_correct(lambda v: A @ v, self._lu.solve, b, tol_abs)
            if ok:
                return x
        self._lu = splu(A, permc_spec=_ORDERING)
        self._shape = A.shape
        x, ok = _defect_correct(lambda v: A @ v, self._lu.solve, b, tol_abs)
        if not ok:
            raise SolverError("linear solve stalled above tol_lin even "
                              "after refactorization")
        return x


# Transport solves feed conservation and positivity guarantees, so they
# are driven well below the nonlinear tolerance regardless of tol_lin.
TRANSPORT_TOL = 1e-14

# Safety factor of the implicit pressure damping in the Picard loop.
PRESSURE_DAMPING = 1.2


class Stepper:
    """Carries the mesh operators and factorization caches for a run."""

    def __init__(self, mesh: SimplicialMesh, params: SchemeParams,
                 settings: SolverSettings = SolverSettings()):
        if params.dim != mesh.dim:
            raise ValueError("params.dim does not match the mesh dimension")
        self.mesh = mesh
        self.params = params
        self.settings = settings
        self.h_eps = mesh.h ** params.epsilon
        self.h_delta = mesh.h ** params.delta

        ne, nf, d = mesh.n_elements, mesh.n_faces, mesh.dim
        rows = np.repeat(np.arange(ne), d + 1)
        cols = mesh.elem_faces.ravel()
        self.C = sp.csr_matrix(
            (np.full(ne * (d + 1), 1.0 / (d + 1)), (rows, cols)),
            shape=(ne, nf))
        self.int_idx = mesh.interior_faces
        self.C_int = self.C[:, self.int_idx].tocsr()
        self.CT_int = self.C_int.T.tocsr()
        # Adjacency pattern (element x interior face) for diagonal scaling.
        self.AdjT_int = self.C_int.T.astype(bool).astype(float).tocsr()

        # Face-weighted divergence operators W_c[K, f] = |sigma| n_K(sigma)_c.
        w = mesh.outward_face_vectors                # (ne, d+1, d)
        self.W = [sp.csr_matrix((w[:, :, c].ravel(), (rows, cols)),
                                shape=(ne, nf)) for c in range(d)]
        self.W_int = [m[:, self.int_idx].tocsr() for m in self.W]
        inv_vol = sp.diags(1.0 / mesh.elem_volume)
        self.S_int = sum(m.T @ inv_vol @ m for m in self.W_int).tocsr()
        self.D_int = [[(self.W_int[c].T @ inv_vol @ self.W_int[cp]).tocsr()
                       for cp in range(d)] for c in range(d)]
        self.D_full = sp.bmat(self.D_int, format="csr")
        self.S_diag = self.S_int.diagonal()
        self.D_diag = [self.D_int[c][c].diagonal() for c in range(d)]

        self._transport_solver = _LazyDirectSolver(TRANSPORT_TOL)
        self._block_lu = None                        # LU of one momentum block
        self._momentum_full = _LazyDirectSolver(settings.tol_lin)
        self._prev_u = None                          # for warm-start extrapolation

    # -- assembly -----------------------------------------------------

    def transport_matrix(self, u_values: np.ndarray,
                         zeta: float = 1.0) -> sp.csr_matrix:
        u = CRVectorField(self.mesh, u_values, boundary_constrained=True)
        return upwind.assemble_transport_operator(
            u, self.mesh, self.params.dt, self.h_eps, zeta)

    def total_pressure(self, rho: np.ndarray, Z: np.ndarray) -> np.ndarray:
        p = self.params.a * Z ** self.params.gamma
        return p + self.h_delta * (rho ** 2 + Z ** 2)

    def _pressure_damping(self, rho: np.ndarray, Z: np.ndarray,
                          zeta: float) -> float:
        """Damping coefficient that makes the pressure coupling implicit.

        Within a Picard iterate the pressure reacts to the velocity
        through the transport solves with stiffness ~ dt (p_Z Z + p_rho
        rho) in div-div form; adding tau * grad:grad (which dominates
        div-div) to the momentum matrix and tau * grad:grad of the
        lagged velocity to its right-hand side leaves the fixed point
        unchanged while removing the acoustic restriction on dt.
        """
        par = self.params
        stiffness = (par.a * par.gamma * Z ** par.gamma
                     + 2.0 * self.h_delta * (rho ** 2 + Z ** 2))
        return PRESSURE_DAMPING * zeta * par.dt * float(stiffness.max())

    def _momentum_system(self, A_t: sp.csr_matrix, rho: np.ndarray,
                         Z: np.ndarray, m_prev: np.ndarray, zeta: float):
        """Component block, coupling and right-hand side of the momentum solve.

        The full matrix on stacked interior-face coefficients (component
        major) is blockdiag(base, ..., base) + coupling; the base block
        is shared by all components because the transported momentum and
        the viscous grad:grad term do not mix them.  A_t already contains
        the mass/dt term, so C^T A_t diag(rho) C covers both the time
        derivative and the upwinded momentum flux.
        """
        nu = zeta * self.params.nu
        tau = self._pressure_damping(rho, Z, zeta)
        base = (self.CT_int @ (A_t @ (sp.diags(rho) @ self.C_int))
                + (self.params.mu + tau) * self.S_int)
        coupling = nu * self.D_full if nu != 0.0 else None
        vol_dt = self.mesh.elem_volume / self.params.dt
        ptot = self.total_pressure(rho, Z)
        rhs = np.concatenate([
            self.CT_int @ (vol_dt * m_prev[:, c]) + zeta * (self.W_int[c].T @ ptot)
            for c in range(self.mesh.dim)])
        return base, coupling, rhs, tau

    def _momentum_diag(self, rho: np.ndarray, zeta: float) -> np.ndarray:
        """Diagonal of the velocity mass-plus-stiffness block (residual scale)."""
        d = self.mesh.dim
        mass = (self.AdjT_int @ (self.mesh.elem_volume * rho)
                / ((d + 1) ** 2 * self.params.dt))
        return np.concatenate([
            mass + self.params.mu * self.S_diag
            + zeta * self.params.nu * self.D_diag[c]
            for c in range(d)])

    # -- residual -----------------------------------------------------

    def residual(self, A_t, rho, Z, u_values, b_rho, b_Z, m_prev, zeta):
        """Max-norm of the scaled residual of the coupled system.

        Transport residuals are scaled by dt/|K|, the momentum residual
        by the diagonal of its mass-plus-stiffness block, making the
        stopping criterion mesh independent.
        """
        dt_vol = self.params.dt / self.mesh.elem_volume
        res_rho = np.abs((A_t @ rho - b_rho) * dt_vol).max()
        res_Z = np.abs((A_t @ Z - b_Z) * dt_vol).max()

        d = self.mesh.dim
        vol_dt = self.mesh.elem_volume / self.params.dt
        ubar = self.C @ u_values                     # (ne, d)
        m = rho[:, None] * ubar
        flux = A_t @ m - vol_dt[:, None] * m_prev    # time + zeta * upwind
        u_int = u_values[self.int_idx]
        ptot = self.total_pressure(rho, Z)
        parts = []
        for c in range(d):
            r = (self.CT_int @ flux[:, c]
                 + self.params.mu * (self.S_int @ u_int[:, c])
                 - zeta * (self.W_int[c].T @ ptot))
            if self.params.nu != 0.0:
                for cp in range(d):
                    r = r + zeta * self.params.nu * (self.D_int[c][cp]
                                                     @ u_int[:, cp])
            parts.append(r)
        res_u = np.abs(np.concatenate(parts)
                       / self._momentum_diag(rho, zeta)).max()
        return max(res_rho, res_Z, res_u)

    # -- linear solves --------------------------------------------------

    def _solve_momentum(self, base: sp.csr_matrix, coupling: sp.csr_matrix,
                        b: np.ndarray) -> np.ndarray:
        """Solve blockdiag(base, ..., base) + coupling against b.

        Tier 1 factorizes only the shared component block and treats the
        coupling (pressure stabilization and the div-div term) by defect
        correction; this covers fine meshes where the coupling is a small
        perturbation.  Tier 2 falls back to a lazy factorization of the
        full matrix (coarse meshes, where it is cheap).
        """
        d = self.mesh.dim
        nfi = base.shape[0]
        scale = np.abs(b).max()
        if scale == 0.0:
            return np.zeros_like(b)
        tol_abs = self.settings.tol_lin * scale

        def matvec(x):
            y = np.concatenate([base @ x[c * nfi:(c + 1) * nfi]
                                for c in range(d)])
            if coupling is not None:
                y = y + coupling @ x
            return y

        def psolve(r):
            return np.concatenate([self._block_lu.solve(r[c * nfi:(c + 1) * nfi])
                                   for c in range(d)])

        fresh = False
        if self._block_lu is None or self._block_lu.shape != base.shape:
            self._block_lu = splu(base.tocsc(), permc_spec=_ORDERING)
            fresh = True
        x, ok = _defect_correct(matvec, psolve, b, tol_abs)
        if not ok and not fresh:
            self._block_lu = splu(base.tocsc(), permc_spec=_ORDERING)
            x, ok = _defect_correct(matvec, psolve, b, tol_abs)
        if ok:
            return x
        A_full = sp.block_diag([base] * d)
        if coupling is not None:
            A_full = A_full + coupling
        return self._momentum_full.solve(A_full.tocsc(), b)

    # -- nonlinear iteration -------------------------------------------

    def _picard(self, prev_rho, prev_Z, prev_u, start, zeta):
        """Picard loop for the zeta-scaled system; returns (fields, info).

        ``start`` is the warm-start triple (rho, Z, u_values).  The
        residual is evaluated before each correction, so an exact fixed
        point (e.g. the uniform rest state) is recognized at iterate 0
        and returned unchanged.
        """
        mesh, st = self.mesh, self.settings
        vol_dt = mesh.elem_volume / self.params.dt
        b_rho = vol_dt * prev_rho
        b_Z = vol_dt * prev_Z
        m_prev = prev_rho[:, None] * (self.C @ prev_u)

        rho, Z, u = start[0].copy(), start[1].copy(), start[2].copy()
        A_t = self.transport_matrix(u, zeta)
        omega = st.relax
        update_prev = None
        for it in range(st.max_picard + 1):
            res = self.residual(A_t, rho, Z, u, b_rho, b_Z, m_prev, zeta)
            if res <= st.tol_nl:
                return (rho, Z, u), it, res, True
            if it == st.max_picard:
                return (rho, Z, u), it, res, False
            A_t_csc = A_t.tocsc()
            rho_new = self._transport_solver.solve(A_t_csc, b_rho)
            Z_new = self._transport_solver.solve(A_t_csc, b_Z)
            if (rho_new.min() <= DEGENERATE_FLOOR
                    or Z_new.min() <= DEGENERATE_FLOOR):
                raise SolverError(
                    "positivity lost in a transport solve; the M-structure "
                    "guarantees positivity exactly, so check tol_lin or the mesh")
            base, coupling, rhs, tau = self._momentum_system(
                A_t, rho_new, Z_new, m_prev, zeta)
            u_int = u[self.int_idx]
            rhs = rhs + tau * np.concatenate(
                [self.S_int @ u_int[:, c] for c in range(mesh.dim)])
            x = self._solve_momentum(base, coupling, rhs)
            u_new = np.zeros_like(u)
            u_new[self.int_idx] = x.reshape(mesh.dim, -1).T

            # Aitken dynamic relaxation on the velocity update; the user
            # relax is the starting value of the adaptive factor.
            update = u_new - u
            if update_prev is not None:
                diff = update - update_prev
                denom = float((diff * diff).sum())
                if denom > 0.0:
                    omega = -omega * float((update_prev * diff).sum()) / denom
                    omega = min(max(omega, 0.1), 2.0)
            u = u + omega * update
            update_prev = update
            rho, Z = rho_new, Z_new
            A_t = self.transport_matrix(u, zeta)
        raise AssertionError("unreachable")

    def step(self, prev: State) -> StepReport:
        """Advance one time level; falls back to zeta-continuation."""
        prev_rho = prev.rho.values
        prev_Z = prev.rho.values * prev.theta.values
        prev_u = prev.u.values

        # Linear-in-time velocity extrapolation as the warm start; the
        # transported fields always restart from the previous level.
        if self._prev_u is not None and self._prev_u.shape == prev_u.shape:
            u_guess = 2.0 * prev_u - self._prev_u
        else:
            u_guess = prev_u
        start = (prev_rho, prev_Z, u_guess)

        fields, iters, res, ok = self._picard(prev_rho, prev_Z, prev_u,
                                              start, zeta=1.0)
        used_homotopy = False
        if not ok:
            used_homotopy = True
            n = self.settings.homotopy_steps
            current = (prev_rho, prev_Z, prev_u)
            total = iters
            for j in range(1, n + 1):
                zeta = j / n
                fields, iters, res, ok = self._picard(
                    prev_rho, prev_Z, prev_u, current, zeta)
                total += iters
                if not ok:
                    raise SolverError(
                        f"Picard stalled at continuation stage zeta={zeta:.3f} "
                        f"(residual {res:.3e}); reduce dt")
                current = fields
            iters = total

        self._prev_u = prev_u.copy()
        rho, Z, u = fields
        theta = Z / rho
        next_state = State(
            k=prev.k + 1,
            rho=CellField(self.mesh, rho),
            theta=CellField(self.mesh, theta),
            u=CRVectorField(self.mesh, u.copy(), boundary_constrained=True),
        )
        return StepReport(next=next_state, picard_iters=iters,
                          residual=res, used_homotopy=used_homotopy)


def step(prev: State, params: SchemeParams,
         settings: SolverSettings = SolverSettings()) -> StepReport:
    """Single step with a transient Stepper (tests and one-off use)."""
    return Stepper(prev.mesh, params, settings).step(prev)


def run(initial: State, params: SchemeParams,
        settings: SolverSettings = SolverSettings(),
        callbacks=(), keep_states: bool = True) -> RunResult:
    """March n_steps = T/dt backward-Euler steps from the initial state.

    Callbacks receive (k, t, prev_state, report) after every step.  With
    ``keep_states`` the full trajectory is returned (desk-scale runs);
    otherwise only the initial and final states are kept.
    """
    stepper = Stepper(initial.mesh, params, settings)
    states = [initial]
    reports = []
    state = initial
    for k in range(1, params.n_steps + 1):
        try:
            report = stepper.step(state)
        except SolverError as exc:
            raise SolverError(f"step {k} (t={k * params.dt:.6g}): {exc}") from exc
        reports.append(report)
        prev = state
        state = report.next
        if keep_states:
            states.append(state)
        for cb in callbacks:
            cb(k, k * params.dt, prev, report)
    if not keep_states:
        states.append(state)
    return RunResult(states=states, reports=reports)
