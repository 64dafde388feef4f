"""Property suites: exact identities, rate tests and structure checks.

Each suite exercises one provable fact about the discretization on
randomized inputs with a fixed seed and reports pass/fail plus the
worst observed instance.  The report is machine readable (JSON).  A
deliberately corrupted flux sign is available as a negative control for
the conservation suite.

Polynomial test data is capped at degree 2 wherever a face integral of
(function x affine trace) appears, keeping every quadrature exact so
the identities hold to rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import quadrature, scheme, upwind
from .diagnostics import energy_balance_residual, renormalization_residual
from .mesh import build_structured_triangulation
from .scheme import SchemeParams, SolverSettings, discrete_initial_data
from .spaces import (cell_average_of_cr, cr_gradient, div_h, evaluate_cr,
                     l2_norm_cr, l2_norm_grad, project_cell, project_cr,
                     random_v0h)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    seed: int
    suites: list

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "passed": self.passed,
            "suites": [{"name": s.name, "passed": s.passed,
                        "details": s.details} for s in self.suites],
        }, indent=2, sort_keys=True, default=float)

    def summary(self) -> str:
        lines = [f"[{'PASS' if s.passed else 'FAIL'}] {s.name}"
                 for s in self.suites]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_polynomial(rng, degree: int = 2):
    """Random 2D polynomial of total degree <= degree, with gradient."""
    coeffs = np.zeros((degree + 1, degree + 1))
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            coeffs[i, j] = rng.uniform(-1.0, 1.0)

    def value(x, y):
        acc = np.zeros_like(np.asarray(x, dtype=float))
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                acc = acc + coeffs[i, j] * x ** i * y ** j
        return acc

    def grad(x, y):
        gx = np.zeros_like(np.asarray(x, dtype=float))
        gy = np.zeros_like(np.asarray(x, dtype=float))
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                if i > 0:
                    gx = gx + i * coeffs[i, j] * x ** (i - 1) * y ** j
                if j > 0:
                    gy = gy + j * coeffs[i, j] * x ** i * y ** (j - 1)
        return gx, gy

    return value, grad


# -- exact identity checkers (shared with the test suite) ---------------------


def upwind_rearrangement_defect(mesh, r, f, v, phi, phi_grad,
                                h_eps: float) -> float:
    """Relative defect of the upwind-sum rearrangement identity.

    Moves the flux sum against jumps of f into a divergence term, two
    element-boundary correction terms and the penalty term; exact for
    polynomial phi of degree <= 2 with the configured quadrature.
    """
    idx = mesh.interior_faces
    k_in, k_out = mesh.face_in[idx], mesh.face_out[idx]
    area = mesh.face_area[idx]
    epts, ewts = quadrature.element_points(mesh)
    fpts, fwts = quadrature.face_points(mesh)

    q = upwind.normal_velocity(v)[idx]
    flux = upwind.dissipative_flux(r[k_in], r[k_out], q, h_eps)
    lhs_flux = float((area * flux * (f[k_out] - f[k_in])).sum())

    gx, gy = phi_grad(epts[..., 0], epts[..., 1])
    gphi = np.stack([np.broadcast_to(np.asarray(gx, float), ewts.shape),
                     np.broadcast_to(np.asarray(gy, float), ewts.shape)],
                    axis=-1)
    v_vals = evaluate_cr(v, epts, np.arange(mesh.n_elements))
    lhs_vol = float((ewts * r[:, None] * (v_vals * gphi).sum(axis=2)).sum())
    lhs = lhs_vol - lhs_flux

    int_phi = (ewts * phi(epts[..., 0], epts[..., 1])).sum(axis=1)
    term1 = float((r * (f * mesh.elem_volume - int_phi) * div_h(v)).sum())

    phi_f = phi(fpts[..., 0], fpts[..., 1])
    mean_phi = (fwts * phi_f).sum(axis=1) / mesh.face_area
    qn_all = upwind.normal_velocity(v)
    avg = cell_average_of_cr(v)
    grad_v = cr_gradient(v.values, mesh)
    elems = np.arange(mesh.n_elements)
    term2 = 0.0
    term3 = 0.0
    for loc in range(mesh.dim + 1):
        faces = mesh.elem_faces[:, loc]
        signs = mesh.elem_face_sign[:, loc]
        interior = mesh.face_out[faces] != -1
        neigh = np.where(mesh.face_in[faces] == elems,
                         mesh.face_out[faces], mesh.face_in[faces])
        fa = mesh.face_area[faces]
        qn = signs * qn_all[faces]                   # <v . n_K>
        jump_r_K = np.where(interior, r[neigh] - r, 0.0)
        term2 += float(((f - mean_phi[faces]) * jump_r_K
                        * np.minimum(qn, 0.0) * fa).sum())

        pts = fpts[faces]                            # (ne, nq, d)
        wts = fwts[faces]
        rel = pts - mesh.elem_center[:, None, :]
        v_here = avg[:, None, :] + np.einsum("nqi,nci->nqc", rel, grad_v)
        nK = signs[:, None] * mesh.face_normal[faces]
        vn = (v_here * nK[:, None, :]).sum(axis=2)
        phi_here = phi(pts[..., 0], pts[..., 1])
        integrand = ((phi_here - mean_phi[faces][:, None]) * r[:, None]
                     * (vn - qn[:, None]))
        term3 += float((wts * integrand).sum())

    term4 = 0.5 * h_eps * float((area * (r[k_out] - r[k_in])
                                 * (f[k_out] - f[k_in])).sum())
    rhs = term1 + term2 + term3 + term4
    scale = (abs(lhs_vol) + abs(lhs_flux) + abs(term1) + abs(term2)
             + abs(term3) + abs(term4) + 1.0)
    return abs(lhs - rhs) / scale


def projection_duality_defects(mesh, v, r, phi, phi_grad, vec_pair) -> tuple:
    """Relative defects of the two projection exactness identities.

    (1) grad_h v pairs identically with grad_h of the projected phi and
        with the true gradient of phi;
    (2) cellwise r pairs identically with div_h of the projected vector
        field and with its true divergence.
    Exact for polynomial data within the quadrature degrees.
    """
    epts, ewts = quadrature.element_points(mesh)
    proj = project_cr(phi, mesh)
    gv = cr_gradient(v.values, mesh)
    gproj = cr_gradient(proj.values, mesh)
    lhs1 = float((mesh.elem_volume * (gv * gproj).sum(axis=1)).sum())
    gx, gy = phi_grad(epts[..., 0], epts[..., 1])
    gphi = np.stack([np.broadcast_to(np.asarray(gx, float), ewts.shape),
                     np.broadcast_to(np.asarray(gy, float), ewts.shape)],
                    axis=-1)
    rhs1 = float((ewts[..., None] * gv[:, None, :] * gphi).sum())
    defect1 = abs(lhs1 - rhs1) / (abs(lhs1) + abs(rhs1) + 1.0)

    (phix, phix_grad), (phiy, phiy_grad) = vec_pair
    vproj = project_cr(lambda x, y: (phix(x, y), phiy(x, y)), mesh)
    lhs2 = float((mesh.elem_volume * r * div_h(vproj)).sum())
    div_true = (phix_grad(epts[..., 0], epts[..., 1])[0]
                + phiy_grad(epts[..., 0], epts[..., 1])[1])
    rhs2 = float((ewts * r[:, None] * div_true).sum())
    defect2 = abs(lhs2 - rhs2) / (abs(lhs2) + abs(rhs2) + 1.0)
    return defect1, defect2


# -- suites -------------------------------------------------------------------


def suite_mesh_invariants(sizes) -> SuiteResult:
    """Validation plus exact refinement scaling of h and element count."""
    details = {}
    ok = True
    for n in sizes:
        mesh = build_structured_triangulation(n, n)
        mesh.validate()
        fine = build_structured_triangulation(2 * n, 2 * n)
        ratio = mesh.h / fine.h
        details[f"h_ratio_{n}"] = ratio
        ok &= abs(ratio - 2.0) < 1e-13
        ok &= fine.n_elements == 4 * mesh.n_elements
        ok &= abs(mesh.elem_volume.sum() - 1.0) < 1e-14
    return SuiteResult("mesh_invariants", bool(ok), details)


def suite_upwind_forms(rng, n_samples=1000) -> SuiteResult:
    """Equivalence of the two closed forms of the dissipative flux."""
    r_in = rng.standard_normal(n_samples) * 3.0
    r_out = rng.standard_normal(n_samples) * 3.0
    q = rng.standard_normal(n_samples)
    h_eps = 10.0 ** rng.uniform(-4, 0, n_samples)
    f1 = upwind.dissipative_flux(r_in, r_out, q, h_eps)
    f2 = (0.5 * (r_in + r_out) * q
          - 0.5 * (r_out - r_in) * (h_eps + np.abs(q)))
    worst = float((np.abs(f1 - f2) / (np.abs(f1) + 1.0)).max())
    return SuiteResult("upwind_closed_forms", worst <= 1e-14,
                       {"max_rel_discrepancy": worst})


def suite_flux_conservation(rng, sizes, corrupt_flux_sign=False) -> SuiteResult:
    """Interior fluxes telescope to zero when summed over all elements.

    With ``corrupt_flux_sign`` the out-element contribution is added
    instead of subtracted; the suite must then fail (negative control).
    """
    sign = 1.0 if corrupt_flux_sign else -1.0
    worst = 0.0
    for n in sizes:
        mesh = build_structured_triangulation(n, n)
        r = rng.random(mesh.n_elements) + 0.5
        u = random_v0h(mesh, rng, vector=True)
        idx = mesh.interior_faces
        k_in, k_out = mesh.face_in[idx], mesh.face_out[idx]
        q = upwind.normal_velocity(u)[idx]
        flux = mesh.face_area[idx] * upwind.dissipative_flux(
            r[k_in], r[k_out], q, mesh.h ** 1.5)
        per_elem = np.zeros(mesh.n_elements)
        np.add.at(per_elem, k_in, flux)
        np.add.at(per_elem, k_out, sign * flux)
        total = abs(per_elem.sum()) / (np.abs(flux).sum() + 1.0)
        worst = max(worst, total)
    return SuiteResult("flux_conservation", worst <= 1e-13,
                       {"max_rel_total": worst,
                        "corrupted": corrupt_flux_sign})


def suite_transport_structure(rng, sizes) -> SuiteResult:
    """M-structure of the transport matrix and positivity of its solves."""
    details = {}
    ok = True
    for n in sizes:
        mesh = build_structured_triangulation(n, n)
        u = random_v0h(mesh, rng, vector=True)
        dt = 0.05
        A = upwind.assemble_transport_operator(u, mesh, dt, mesh.h ** 1.5)
        off = A - sp.diags(A.diagonal())
        max_offdiag = off.max() if off.nnz else 0.0
        colsums = np.asarray(A.sum(axis=0)).ravel()
        col_err = np.abs(colsums - mesh.elem_volume / dt).max()
        rhs = (mesh.elem_volume / dt) * (rng.random(mesh.n_elements) + 1e-3)
        sol = spsolve(A.tocsc(), rhs)
        drift = abs((mesh.elem_volume * sol).sum() - dt * rhs.sum())
        details[f"min_solution_{n}"] = float(sol.min())
        ok &= max_offdiag <= 0.0
        ok &= col_err <= 1e-12 * mesh.elem_volume.max() / dt
        ok &= sol.min() > 0.0
        ok &= drift <= 1e-11 * abs(dt * rhs.sum())
    return SuiteResult("transport_m_structure", bool(ok), details)


def suite_upwind_rearrangement(rng, sizes, n_instances=100) -> SuiteResult:
    """Exact rearrangement of the flux sum (scalar and vector forms)."""
    worst = 0.0
    for n in sizes:
        mesh = build_structured_triangulation(n, n)
        h_eps = mesh.h ** 1.5
        for _ in range(n_instances):
            v = random_v0h(mesh, rng, vector=True)
            r = rng.standard_normal(mesh.n_elements)
            f = rng.standard_normal(mesh.n_elements)
            phi, phi_grad = random_polynomial(rng, degree=2)
            worst = max(worst, upwind_rearrangement_defect(
                mesh, r, f, v, phi, phi_grad, h_eps))
    return SuiteResult("upwind_rearrangement", worst <= 1e-12,
                       {"max_rel_defect": worst})


def suite_projection_exactness(rng, sizes, n_instances=60) -> SuiteResult:
    """Gradient/divergence pairing exactness of the CR projection."""
    worst1 = worst2 = 0.0
    for n in sizes:
        mesh = build_structured_triangulation(n, n)
        for _ in range(n_instances):
            v = random_v0h(mesh, rng)
            r = rng.standard_normal(mesh.n_elements)
            phi, phi_grad = random_polynomial(rng, degree=3)
            vec_pair = (random_polynomial(rng, degree=3),
                        random_polynomial(rng, degree=3))
            d1, d2 = projection_duality_defects(mesh, v, r, phi, phi_grad,
                                                vec_pair)
            worst1 = max(worst1, d1)
            worst2 = max(worst2, d2)
    ok = worst1 <= 1e-12 and worst2 <= 1e-12
    return SuiteResult("projection_exactness", ok,
                       {"max_grad_defect": worst1, "max_div_defect": worst2})


def suite_projection_rates(levels=(4, 8, 16, 32)) -> SuiteResult:
    """Empirical convergence orders of the two projections on smooth data."""

    def f(x, y):
        return np.sin(np.pi * x) * np.cos(2.0 * np.pi * y) + x * y

    def fg(x, y):
        return (np.pi * np.cos(np.pi * x) * np.cos(2 * np.pi * y) + y,
                -2 * np.pi * np.sin(np.pi * x) * np.sin(2 * np.pi * y) + x)

    errs_q, errs_v, errs_g = [], [], []
    for n in levels:
        mesh = build_structured_triangulation(n, n)
        pts, wts = quadrature.element_points(mesh)
        fv = f(pts[..., 0], pts[..., 1])
        cf = project_cell(f, mesh)
        errs_q.append(float(np.sqrt((wts * (fv - cf.values[:, None]) ** 2).sum())))
        crf = project_cr(f, mesh)
        vals = evaluate_cr(crf, pts, np.arange(mesh.n_elements))
        errs_v.append(float(np.sqrt((wts * (fv - vals) ** 2).sum())))
        g = cr_gradient(crf.values, mesh)
        gx, gy = fg(pts[..., 0], pts[..., 1])
        gerr = (gx - g[:, 0][:, None]) ** 2 + (gy - g[:, 1][:, None]) ** 2
        errs_g.append(float(np.sqrt((wts * gerr).sum())))

    def eocs(errs):
        return [float(np.log2(errs[i] / errs[i + 1]))
                for i in range(len(errs) - 1)]

    eoc_q, eoc_v, eoc_g = eocs(errs_q), eocs(errs_v), eocs(errs_g)
    ok = (min(eoc_q) >= 0.9 and min(eoc_v) >= 1.9 and min(eoc_g) >= 0.9)
    return SuiteResult("projection_rates", ok,
                       {"eoc_cell": eoc_q, "eoc_cr": eoc_v,
                        "eoc_cr_gradient": eoc_g})


def suite_poincare(rng, levels=(8, 16, 32), n_fields=100) -> SuiteResult:
    """Refinement-stable bound on ||v|| / ||grad_h v|| for constrained fields."""
    ratios = []
    for n in levels:
        mesh = build_structured_triangulation(n, n)
        worst = 0.0
        for _ in range(n_fields):
            v = random_v0h(mesh, rng)
            denom = l2_norm_grad(v)
            if denom > 0.0:
                worst = max(worst, l2_norm_cr(v) / denom)
        ratios.append(worst)
    growth = [ratios[i + 1] / ratios[i] for i in range(len(ratios) - 1)]
    ok = all(g <= 1.10 for g in growth)
    return SuiteResult("discrete_poincare", ok,
                       {"max_ratios": ratios, "growth": growth})


def suite_trace_inequality(rng, levels=(8, 16, 32), n_fields=50) -> SuiteResult:
    """Face norms of cellwise data controlled by h^{-1/2} element norms."""
    consts = []
    for n in levels:
        mesh = build_structured_triangulation(n, n)
        worst = 0.0
        for _ in range(n_fields):
            r = rng.standard_normal(mesh.n_elements)
            for loc in range(mesh.dim + 1):
                faces = mesh.elem_faces[:, loc]
                lhs = np.sqrt(mesh.face_area[faces]) * np.abs(r)
                rhs = mesh.h ** -0.5 * np.sqrt(mesh.elem_volume) * np.abs(r)
                nz = rhs > 0
                if nz.any():
                    worst = max(worst, float((lhs[nz] / rhs[nz]).max()))
        consts.append(worst)
    growth = [consts[i + 1] / consts[i] for i in range(len(consts) - 1)]
    ok = all(g <= 1.05 for g in growth)
    return SuiteResult("trace_inequality", ok,
                       {"constants": consts, "growth": growth})


def suite_piq_stability(rng, n_samples=20) -> SuiteResult:
    """Cell averaging does not increase L^q norms (q = 1, 2, inf)."""
    mesh = build_structured_triangulation(16, 16)
    pts, wts = quadrature.element_points(mesh)
    ok = True
    for _ in range(n_samples):
        phi, _ = random_polynomial(rng, degree=2)
        vals = np.asarray(phi(pts[..., 0], pts[..., 1]), dtype=float)
        proj = (wts * vals).sum(axis=1) / mesh.elem_volume
        for q in (1, 2):
            norm_f = float((wts * np.abs(vals) ** q).sum()) ** (1 / q)
            norm_p = float((mesh.elem_volume * np.abs(proj) ** q).sum()) ** (1 / q)
            ok &= norm_p <= norm_f * (1 + 1e-12)
        ok &= np.abs(proj).max() <= np.abs(vals).max() * (1 + 1e-12)
    return SuiteResult("cell_projection_stability", bool(ok),
                       {"samples": n_samples})


def suite_step_properties(rng) -> SuiteResult:
    """Converged steps: conservation, min-max, gamma=2 energy identity."""
    mesh = build_structured_triangulation(12, 12)
    params = SchemeParams(gamma=2.0, a=1.0, mu=0.1, lam=0.0, epsilon=1.5,
                          delta=0.25, dt=0.4 * mesh.h, T=0.8 * mesh.h)
    settings = SolverSettings()

    def rho0(x, y):
        return 1.0 + 0.3 * np.sin(np.pi * x) * np.sin(2 * np.pi * y)

    def th0(x, y):
        return 1.0 + 0.25 * np.cos(np.pi * x) * np.cos(np.pi * y)

    def u0(x, y):
        return (0.1 * np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
                -0.1 * np.sin(2 * np.pi * x) * np.sin(np.pi * y) ** 2)

    state = discrete_initial_data(rho0, th0, u0, mesh)
    result = scheme.run(state, params, settings)
    ok = True
    worst_energy = 0.0
    worst_renorm = 0.0
    for i in range(len(result.reports)):
        prev, nxt = result.states[i], result.states[i + 1]
        bal = energy_balance_residual(prev, nxt, params, mesh.h, params.dt)
        worst_energy = max(worst_energy, bal.residual)
        for var in ("rho", "Z", "theta"):
            worst_renorm = max(worst_renorm, renormalization_residual(
                prev, nxt, nxt.u, params, params.dt, "square", var))
        m_prev = (mesh.elem_volume * prev.rho.values).sum()
        m_next = (mesh.elem_volume * nxt.rho.values).sum()
        ok &= abs(m_next - m_prev) <= 1e-11 * abs(m_prev)
        ok &= nxt.theta.values.min() >= prev.theta.values.min() - 1e-10
        ok &= nxt.theta.values.max() <= prev.theta.values.max() + 1e-10
        ok &= nxt.rho.values.min() > 0.0
    tol = max(1e-8, 10 * settings.tol_nl)
    ok &= worst_energy <= tol
    ok &= worst_renorm <= 1e-9
    return SuiteResult("step_properties", bool(ok),
                       {"max_energy_residual": worst_energy,
                        "max_renorm_defect": worst_renorm})


def run_verification(seed: int = 0, sizes=(4, 8, 16),
                     corrupt_flux_sign: bool = False) -> VerificationReport:
    """Run every property suite with a deterministic seed."""
    rng = np.random.default_rng(seed)
    suites = [
        suite_mesh_invariants(sizes),
        suite_upwind_forms(rng),
        suite_flux_conservation(rng, sizes, corrupt_flux_sign),
        suite_transport_structure(rng, sizes),
        suite_upwind_rearrangement(rng, sizes[:2]),
        suite_projection_exactness(rng, sizes[:2]),
        suite_projection_rates(),
        suite_poincare(rng),
        suite_trace_inequality(rng),
        suite_piq_stability(rng),
        suite_step_properties(rng),
    ]
    return VerificationReport(seed=seed, suites=suites)
