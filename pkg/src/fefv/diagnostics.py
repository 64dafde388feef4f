"""Structural diagnostics: every provable discrete property, evaluated.

The scheme provably conserves mass of rho and rho*theta, keeps rho
positive, traps theta between its initial bounds, dissipates the total
energy, and satisfies a discrete entropy inequality.  This module turns
each of those facts into a number: a residual, a margin, or a monitored
norm.  All functions are pure in the states they receive and assume the
states come from converged steps (the solver tolerance is the only
slack in the exact identities).

Quadratic renormalization (b(z) = z^2) makes every mean-value remainder
in the energy and renormalization identities explicit, so gamma = 2 is
the configuration in which the full energy balance is checked termwise;
for other gamma the balance is verified in inequality form (the energy
is nonincreasing because every right-hand-side term is nonpositive).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import SimplicialMesh
from .scheme import SchemeParams, State, pressure_potential
from .spaces import (CellField, cell_average_of_cr, cr_gradient, div_h,
                     grad_h, project_cell, project_cr)
from .upwind import normal_velocity, plain_flux


def _interior(mesh: SimplicialMesh):
    idx = mesh.interior_faces
    return idx, mesh.face_in[idx], mesh.face_out[idx], mesh.face_area[idx]


def _face_normal_velocity(state: State) -> np.ndarray:
    """Face-mean normal velocity on interior faces."""
    return normal_velocity(state.u)[state.mesh.interior_faces]


def masses(state: State) -> tuple[float, float]:
    """Total mass of rho and of Z = rho * theta."""
    vol = state.mesh.elem_volume
    m_rho = float((vol * state.rho.values).sum())
    m_z = float((vol * state.rho.values * state.theta.values).sum())
    return m_rho, m_z


# -- energy ----------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    internal: float
    artificial: float
    total: float


@dataclass(frozen=True)
class EnergyBalance:
    """Termwise energy budget of one step.

    ``lhs`` is D_t E + viscous dissipation, ``rhs_terms`` the labeled
    nonpositive dissipation terms (NaN entries are the two mean-value
    terms that are only constructive for gamma = 2), ``residual`` the
    scaled identity defect for gamma = 2 or the scaled positive part of
    lhs (inequality violation) otherwise.
    """

    lhs: float
    viscous_dissipation: float
    rhs_terms: dict
    residual: float
    scale: float

    @property
    def rhs_total(self) -> float:
        return sum(v for v in self.rhs_terms.values() if not math.isnan(v))


def total_energy(state: State, params: SchemeParams, h: float) -> EnergyReport:
    """Discrete energy: kinetic + pressure potential + artificial terms."""
    vol = state.mesh.elem_volume
    rho = state.rho.values
    Z = rho * state.theta.values
    ubar = state.u_bar()
    kinetic = float((vol * 0.5 * rho * (ubar ** 2).sum(axis=1)).sum())
    internal = float((vol * pressure_potential(CellField(state.mesh, Z),
                                               params).values).sum())
    artificial = float((h ** params.delta * vol * (rho ** 2 + Z ** 2)).sum())
    return EnergyReport(kinetic=kinetic, internal=internal,
                        artificial=artificial,
                        total=kinetic + internal + artificial)


def viscous_dissipation(state: State, params: SchemeParams) -> float:
    """mu * |grad_h u|^2 + nu * |div_h u|^2 integrated over the mesh."""
    vol = state.mesh.elem_volume
    g = grad_h(state.u)
    d = div_h(state.u)
    gsq = (g ** 2).reshape(state.mesh.n_elements, -1).sum(axis=1)
    return float((vol * (params.mu * gsq + params.nu * d ** 2)).sum())


def energy_balance_residual(prev: State, next_state: State,
                            params: SchemeParams, h: float,
                            dt: float) -> EnergyBalance:
    """Evaluate the discrete energy budget of one converged step.

    For gamma = 2 the pressure potential is quadratic, all mean-value
    remainders are explicit, and the budget is an exact identity whose
    defect is returned (scaled by E_prev + 1).  For other gamma the two
    mean-value terms are NaN and the returned residual is the scaled
    violation of the dissipation inequality lhs <= 0.
    """
    mesh = prev.mesh
    vol = mesh.elem_volume
    h_eps = h ** params.epsilon
    h_delta = h ** params.delta

    rho_p, rho_n = prev.rho.values, next_state.rho.values
    z_p = rho_p * prev.theta.values
    z_n = rho_n * next_state.theta.values
    ubar_p, ubar_n = prev.u_bar(), next_state.u_bar()

    idx, k_in, k_out, area = _interior(mesh)
    q = _face_normal_velocity(next_state)
    jump_z = z_n[k_out] - z_n[k_in]
    jump_rho = rho_n[k_out] - rho_n[k_in]
    jump_ubar_sq = ((ubar_n[k_out] - ubar_n[k_in]) ** 2).sum(axis=1)
    mean_rho = 0.5 * (rho_n[k_in] + rho_n[k_out])
    upw_rho = (rho_n[k_in] * np.maximum(q, 0.0)
               - rho_n[k_out] * np.minimum(q, 0.0))

    e_prev = total_energy(prev, params, h).total
    e_next = total_energy(next_state, params, h).total
    visc = viscous_dissipation(next_state, params)
    lhs = (e_next - e_prev) / dt + visc

    terms = {
        "jump_pressure": float(-0.5 * h_eps * (area * jump_z
                               * (params.a * params.gamma / (params.gamma - 1.0))
                               * (z_n[k_out] ** (params.gamma - 1.0)
                                  - z_n[k_in] ** (params.gamma - 1.0))).sum()),
        "time_velocity": float(-(0.5 / dt) * (vol * rho_p
                               * ((ubar_n - ubar_p) ** 2).sum(axis=1)).sum()),
        "jump_velocity": float(-0.5 * h_eps * (area * mean_rho
                                               * jump_ubar_sq).sum()),
        "upwind_velocity": float(-0.5 * (area * upw_rho * jump_ubar_sq).sum()),
        "art_time_rho": float(-h_delta / dt * (vol * (rho_n - rho_p) ** 2).sum()),
        "art_jump_rho": float(-h_delta * (area * (h_eps + np.abs(q))
                                          * jump_rho ** 2).sum()),
        "art_time_z": float(-h_delta / dt * (vol * (z_n - z_p) ** 2).sum()),
        "art_jump_z": float(-h_delta * (area * (h_eps + np.abs(q))
                                        * jump_z ** 2).sum()),
    }
    if params.gamma == 2.0:
        # P'' = 2a, so the time and upwind mean-value terms are exact.
        terms["time_pressure"] = float(-params.a / dt
                                       * (vol * (z_n - z_p) ** 2).sum())
        terms["upwind_pressure"] = float(-params.a * (area * np.abs(q)
                                                      * jump_z ** 2).sum())
    else:
        terms["time_pressure"] = math.nan
        terms["upwind_pressure"] = math.nan

    scale = e_prev + 1.0
    if params.gamma == 2.0:
        rhs = sum(terms.values())
        residual = abs(lhs - rhs) / scale
    else:
        residual = max(lhs, 0.0) / scale
    return EnergyBalance(lhs=lhs, viscous_dissipation=visc, rhs_terms=terms,
                         residual=residual, scale=scale)


# -- renormalization --------------------------------------------------------


def renormalization_residual(prev: State, next_state: State, u_next,
                             params: SchemeParams, dt: float,
                             b: str = "square",
                             variable: str = "rho") -> float:
    """Defect of the quadratic renormalization identity of one step.

    For variable "rho" or "Z" the identity balances the time increment
    of r^2, the divergence term, the time-Taylor remainder and the jump
    dissipation; for "theta" it is the rho * b(theta) identity with unit
    test function.  Exact (up to solver tolerance) because b'' is
    constant for b(z) = z^2.  ``u_next`` is the velocity the step was
    solved with (the new time level).
    """
    if b != "square":
        raise ValueError(f"unsupported renormalization function {b!r}")
    mesh = prev.mesh
    vol = mesh.elem_volume
    idx, k_in, k_out, area = _interior(mesh)
    h_eps = mesh.h ** params.epsilon
    q = normal_velocity(u_next)[idx]
    abs_q = np.abs(q)
    divu = div_h(u_next)

    if variable in ("rho", "Z"):
        if variable == "rho":
            r_p, r_n = prev.rho.values, next_state.rho.values
        else:
            r_p = prev.rho.values * prev.theta.values
            r_n = next_state.rho.values * next_state.theta.values
        jump_r = r_n[k_out] - r_n[k_in]
        total = (
            float((vol * (r_n ** 2 - r_p ** 2)).sum()) / dt
            + float((vol * r_n ** 2 * divu).sum())
            + float((vol * (r_n - r_p) ** 2).sum()) / dt
            + float((area * (h_eps + abs_q) * jump_r ** 2).sum())
        )
        return abs(total)

    if variable != "theta":
        raise ValueError(f"unknown renormalization variable {variable!r}")
    rho_p, rho_n = prev.rho.values, next_state.rho.values
    th_p, th_n = prev.theta.values, next_state.theta.values
    z_n = rho_n * th_n
    jump_th = th_n[k_out] - th_n[k_in]
    jump_rho = rho_n[k_out] - rho_n[k_in]
    jump_z = z_n[k_out] - z_n[k_in]
    jump_thsq = th_n[k_out] ** 2 - th_n[k_in] ** 2
    upw_rho = (rho_n[k_in] * np.maximum(q, 0.0)
               - rho_n[k_out] * np.minimum(q, 0.0))
    total = (
        float((vol * (rho_n * th_n ** 2 - rho_p * th_p ** 2)).sum()) / dt
        + float((vol * rho_p * (th_n - th_p) ** 2).sum()) / dt
        + h_eps * float((area * jump_z * jump_th).sum())
        + float((area * upw_rho * jump_th ** 2).sum())
        - 0.5 * h_eps * float((area * jump_rho * jump_thsq).sum())
    )
    return abs(total)


# -- entropy ----------------------------------------------------------------


def entropy_residual(prev: State, next_state: State, u_next,
                     params: SchemeParams, h: float, dt: float,
                     psi: CellField) -> float:
    """Margin of the discrete entropy inequality with chi = ln.

    Evaluates the right-hand side of the inequality for a nonnegative
    cellwise test function psi; the result must be >= 0 up to solver
    tolerance.  The convective term uses the plain (undissipated) upwind
    flux of rho * ln(theta).
    """
    if np.any(psi.values < 0.0):
        raise ValueError("entropy test function must be nonnegative")
    mesh = prev.mesh
    vol = mesh.elem_volume
    idx, k_in, k_out, area = _interior(mesh)
    h_eps = h ** params.epsilon
    q = normal_velocity(u_next)[idx]

    rho_p, rho_n = prev.rho.values, next_state.rho.values
    th_p, th_n = prev.theta.values, next_state.theta.values
    z_n = rho_n * th_n
    s_p = rho_p * np.log(th_p)
    s_n = rho_n * np.log(th_n)
    psi_v = psi.values

    time_term = float((vol * (s_n - s_p) * psi_v).sum()) / dt
    flux = plain_flux(s_n[k_in], s_n[k_out], q)
    jump_psi = psi_v[k_out] - psi_v[k_in]
    convective = -float((area * flux * jump_psi).sum())
    aux1 = psi_v / th_n
    jump_aux1 = aux1[k_out] - aux1[k_in]
    jump_z = z_n[k_out] - z_n[k_in]
    pen1 = 0.5 * h_eps * float((area * jump_z * jump_aux1).sum())
    aux2 = (np.log(th_n) - 1.0) * psi_v
    jump_aux2 = aux2[k_out] - aux2[k_in]
    jump_rho = rho_n[k_out] - rho_n[k_in]
    pen2 = 0.5 * h_eps * float((area * jump_rho * jump_aux2).sum())
    return time_term + convective + pen1 + pen2


# -- conservation, bounds, relative energy ----------------------------------


@dataclass(frozen=True)
class ConservationReport:
    mass_rho_drift: float
    mass_z_drift: float
    min_rho: float
    min_theta: float
    max_theta: float
    initial_theta_min: float
    initial_theta_max: float


def conservation_and_bounds(states) -> ConservationReport:
    """Relative mass drifts and field bounds over a state series."""
    states = list(states)
    m_rho0, m_z0 = masses(states[0])
    drift_rho = 0.0
    drift_z = 0.0
    min_rho = math.inf
    min_th = math.inf
    max_th = -math.inf
    for s in states:
        m_rho, m_z = masses(s)
        drift_rho = max(drift_rho, abs(m_rho - m_rho0) / abs(m_rho0))
        drift_z = max(drift_z, abs(m_z - m_z0) / abs(m_z0))
        min_rho = min(min_rho, float(s.rho.values.min()))
        min_th = min(min_th, float(s.theta.values.min()))
        max_th = max(max_th, float(s.theta.values.max()))
    return ConservationReport(
        mass_rho_drift=drift_rho, mass_z_drift=drift_z, min_rho=min_rho,
        min_theta=min_th, max_theta=max_th,
        initial_theta_min=float(states[0].theta.values.min()),
        initial_theta_max=float(states[0].theta.values.max()))


def relative_energy(state: State, rho_ref, theta_ref, u_ref,
                    params: SchemeParams) -> float:
    """Bregman-type distance between a state and a smooth reference triple.

    The reference is projected onto the discrete spaces first, so the
    value is exactly zero when the state IS the projected reference.
    The potential is the pressure potential expressed in the density /
    total-entropy variables; its convexity makes the result nonnegative.
    """
    mesh = state.mesh
    r = project_cell(rho_ref, mesh).values
    t = project_cell(theta_ref, mesh).values
    if np.any(r <= 0.0) or np.any(t <= 0.0):
        raise ValueError("reference density and temperature must be positive")
    w = cell_average_of_cr(project_cr(u_ref, mesh, boundary_constrained=True))

    gamma, a = params.gamma, params.a
    rho = state.rho.values
    th = state.theta.values
    ubar = state.u_bar()

    def entropy(density, temperature):
        return density / (gamma - 1.0) * np.log(a * temperature ** gamma)

    s_state = entropy(rho, th)
    s_ref = entropy(r, t)
    p_ref = a * (r * t) ** gamma
    dP_dS = p_ref / r
    dP_drho = p_ref * (gamma / ((gamma - 1.0) * r) - s_ref / r ** 2)
    P_state = a / (gamma - 1.0) * (rho * th) ** gamma
    P_ref = a / (gamma - 1.0) * (r * t) ** gamma

    cellwise = (0.5 * rho * ((ubar - w) ** 2).sum(axis=1)
                + P_state - P_ref
                - dP_drho * (rho - r) - dP_dS * (s_state - s_ref))
    return float((mesh.elem_volume * cellwise).sum())


# -- stability monitor -------------------------------------------------------


@dataclass
class StabilityMonitor:
    """Running record of the stability-estimate norms and accumulators.

    Sup-in-time norms update on every state; the time-integrated
    dissipation accumulators add dt-weighted face terms for every state
    with k >= 1 (fields are constant on each time slab).
    """

    params: SchemeParams
    h: float
    sup_norms: dict = field(default_factory=dict)
    grad_u_sq_time: float = 0.0
    div_u_sq_time: float = 0.0
    jump_rho_acc: float = 0.0
    jump_z_acc: float = 0.0
    jump_ubar_acc: float = 0.0
    upwind_ubar_acc: float = 0.0

    def update(self, state: State, dt: float | None = None) -> None:
        mesh = state.mesh
        vol = mesh.elem_volume
        par = self.params
        rho = state.rho.values
        z = rho * state.theta.values
        ubar = state.u_bar()
        uabs2 = (ubar ** 2).sum(axis=1)
        gamma = par.gamma
        p_exp = 2.0 * gamma / (gamma + 1.0)
        values = {
            "rho_usq_l1": float((vol * rho * uabs2).sum()),
            "rho_lgamma": float((vol * rho ** gamma).sum() ** (1.0 / gamma)),
            "mom_l2g": float((vol * (rho * np.sqrt(uabs2)) ** p_exp).sum()
                             ** (1.0 / p_exp)),
            "z_lgamma": float((vol * z ** gamma).sum() ** (1.0 / gamma)),
            "hd2_rho_l2": self.h ** (par.delta / 2.0)
                          * float(np.sqrt((vol * rho ** 2).sum())),
            "hd2_z_l2": self.h ** (par.delta / 2.0)
                        * float(np.sqrt((vol * z ** 2).sum())),
        }
        for key, val in values.items():
            self.sup_norms[key] = max(self.sup_norms.get(key, 0.0), val)
        if dt is None or state.k == 0:
            return

        g = grad_h(state.u)
        gsq = (g ** 2).reshape(mesh.n_elements, -1).sum(axis=1)
        du = div_h(state.u)
        self.grad_u_sq_time += dt * float((vol * gsq).sum())
        self.div_u_sq_time += dt * float((vol * du ** 2).sum())

        idx, k_in, k_out, area = _interior(mesh)
        q = normal_velocity(state.u)[idx]
        h_eps = self.h ** par.epsilon
        h_delta = self.h ** par.delta
        weight = np.maximum(h_eps, np.abs(q))
        jr = rho[k_out] - rho[k_in]
        jz = z[k_out] - z[k_in]
        jub = ((ubar[k_out] - ubar[k_in]) ** 2).sum(axis=1)
        mean_rho = 0.5 * (rho[k_in] + rho[k_out])
        upw_rho = rho[k_in] * np.maximum(q, 0.0) - rho[k_out] * np.minimum(q, 0.0)
        self.jump_rho_acc += dt * h_delta * float((area * weight * jr ** 2).sum())
        self.jump_z_acc += dt * h_delta * float((area * weight * jz ** 2).sum())
        self.jump_ubar_acc += dt * 0.5 * h_eps * float((area * mean_rho * jub).sum())
        self.upwind_ubar_acc += dt * 0.5 * float((area * upw_rho * jub).sum())

    def snapshot(self) -> dict:
        out = dict(self.sup_norms)
        out.update({
            "grad_u_sq_time": self.grad_u_sq_time,
            "div_u_sq_time": self.div_u_sq_time,
            "jump_rho_acc": self.jump_rho_acc,
            "jump_z_acc": self.jump_z_acc,
            "jump_ubar_acc": self.jump_ubar_acc,
            "upwind_ubar_acc": self.upwind_ubar_acc,
        })
        return out


# -- per-step CSV row --------------------------------------------------------

CSV_HEADER = [
    "k", "t", "total_energy", "kinetic", "internal", "artificial",
    "energy_residual", "entropy_margin", "mass_rho", "mass_Z",
    "min_rho", "min_theta", "max_theta", "grad_u_l2",
    "jump_rho_acc", "jump_z_acc", "jump_ubar_acc", "upwind_ubar_acc",
]


def diagnostics_row(k: int, t: float, prev: State | None, state: State,
                    params: SchemeParams, h: float, dt: float,
                    monitor: StabilityMonitor) -> dict:
    """One CSV row of per-step diagnostics (see CSV_HEADER)."""
    report = total_energy(state, params, h)
    m_rho, m_z = masses(state)
    if prev is not None:
        balance = energy_balance_residual(prev, state, params, h, dt)
        ones = CellField(state.mesh, np.ones(state.mesh.n_elements))
        margin = entropy_residual(prev, state, state.u, params, h, dt, ones)
        energy_residual = balance.residual
    else:
        margin = 0.0
        energy_residual = 0.0
    g = cr_gradient(state.u.values, state.mesh)
    grad_l2 = float(np.sqrt((state.mesh.elem_volume
                             * (g ** 2).reshape(state.mesh.n_elements, -1)
                             .sum(axis=1)).sum()))
    snap = monitor.snapshot()
    return {
        "k": k,
        "t": t,
        "total_energy": report.total,
        "kinetic": report.kinetic,
        "internal": report.internal,
        "artificial": report.artificial,
        "energy_residual": energy_residual,
        "entropy_margin": margin,
        "mass_rho": m_rho,
        "mass_Z": m_z,
        "min_rho": float(state.rho.values.min()),
        "min_theta": float(state.theta.values.min()),
        "max_theta": float(state.theta.values.max()),
        "grad_u_l2": grad_l2,
        "jump_rho_acc": snap["jump_rho_acc"],
        "jump_z_acc": snap["jump_z_acc"],
        "jump_ubar_acc": snap["jump_ubar_acc"],
        "upwind_ubar_acc": snap["upwind_ubar_acc"],
    }
