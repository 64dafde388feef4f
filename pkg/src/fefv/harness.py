"""Experiment drivers: single runs, refinement studies, consistency defects.

A single run marches the scheme and streams per-step diagnostics into a
CSV (plus optional VTK snapshots).  The convergence driver repeats the
experiment on meshes h, h/2, h/4, ... with dt halved exactly alongside
(so snapshot times coincide across levels), measures the weak-form
consistency defects against fixed space-time test functions, and builds
Cauchy error proxies by conservatively coarsening fine solutions onto
the next-coarser mesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import scheme
from .config import ExperimentConfig, initial_fields
from .diagnostics import (CSV_HEADER, StabilityMonitor, diagnostics_row)
from .mesh import Rect, SimplicialMesh, build_structured_triangulation
from .scheme import SchemeParams, State, discrete_initial_data
from .spaces import cell_average_of_cr, cr_gradient, div_h
from . import quadrature
from .vtkio import write_rows_csv, write_vtk_state


# -- single experiment -------------------------------------------------------


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    mesh: SimplicialMesh
    params: SchemeParams
    states: list
    reports: list
    rows: list
    csv_path: object = None
    vtk_paths: tuple = ()


def execute(cfg: ExperimentConfig) -> RunArtifacts:
    """Run the configured experiment and collect per-step diagnostics."""
    cfg.validate()
    mesh = cfg.mesh()
    params = cfg.scheme_params(mesh.h)
    settings = cfg.solver_settings()
    rho0, theta0, u0 = initial_fields(cfg)
    state0 = discrete_initial_data(rho0, theta0, u0, mesh)

    monitor = StabilityMonitor(params, mesh.h)
    monitor.update(state0)
    rows = [diagnostics_row(0, 0.0, None, state0, params, mesh.h,
                            params.dt, monitor)]

    def collect(k, t, prev, report):
        monitor.update(report.next, params.dt)
        rows.append(diagnostics_row(k, t, prev, report.next, params,
                                    mesh.h, params.dt, monitor))

    result = scheme.run(state0, params, settings, callbacks=[collect])
    return RunArtifacts(config=cfg, mesh=mesh, params=params,
                        states=result.states, reports=result.reports,
                        rows=rows)


def run_experiment(cfg: ExperimentConfig, outdir) -> RunArtifacts:
    """Execute and write artifacts (CSV, optional VTK) under outdir."""
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = execute(cfg)
    if "csv" in cfg.formats:
        artifacts.csv_path = write_rows_csv(CSV_HEADER, artifacts.rows,
                                            out / "diagnostics.csv")
    vtk_paths = []
    if "vtk" in cfg.formats:
        stride = cfg.snapshot_stride
        n = len(artifacts.states) - 1
        picks = range(0, n + 1, stride) if stride > 0 else []
        picked = sorted(set(picks) | {n})
        for k in picked:
            path = write_vtk_state(artifacts.states[k], artifacts.params,
                                   out / f"state_{k:06d}.vtk")
            vtk_paths.append(path)
    artifacts.vtk_paths = tuple(vtk_paths)
    return artifacts


# -- space-time test functions ------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeTestFunction:
    """Separable test function g(t) * w(x, y) with exact time quadrature.

    ``g_antiderivative`` makes the slab integrals of g exact; w and its
    gradient are integrated with the element quadrature rule.
    """

    w: callable
    grad_w: callable
    g: callable
    g_antiderivative: callable

    def slab_integrals(self, times: np.ndarray):
        """(g(t_k) - g(t_{k-1}), int_slab g dt) for every slab."""
        g_vals = self.g(times)
        big_g = self.g_antiderivative(times)
        return np.diff(g_vals), np.diff(big_g)


def default_scalar_test_function(T: float) -> SpaceTimeTestFunction:
    """cos(pi t / (2T)) * (1 + x y): vanishes at t = T, boundary values
    allowed for the mass/temperature defects."""
    freq = math.pi / (2.0 * T)
    return SpaceTimeTestFunction(
        w=lambda x, y: 1.0 + x * y,
        grad_w=lambda x, y: (y, x),
        g=lambda t: np.cos(freq * t),
        g_antiderivative=lambda t: np.sin(freq * t) / freq,
    )


def constant_test_function(T: float) -> SpaceTimeTestFunction:
    """Spatially constant control: the defect must telescope to zero."""
    freq = math.pi / (2.0 * T)
    return SpaceTimeTestFunction(
        w=lambda x, y: np.ones_like(x),
        grad_w=lambda x, y: (np.zeros_like(x), np.zeros_like(x)),
        g=lambda t: np.cos(freq * t),
        g_antiderivative=lambda t: np.sin(freq * t) / freq,
    )


def momentum_test_function(T: float, rect: Rect) -> SpaceTimeTestFunction:
    """Bump-type polynomial (x(1-x)y(1-y))^2 in normalized coordinates;
    compactly supported in the domain as the momentum defect requires."""
    freq = math.pi / (2.0 * T)

    def to_unit(x, y):
        return ((x - rect.x0) / rect.width, (y - rect.y0) / rect.height)

    def w(x, y):
        X, Y = to_unit(x, y)
        return (X * (1.0 - X) * Y * (1.0 - Y)) ** 2

    def grad_w(x, y):
        X, Y = to_unit(x, y)
        gx = X * (1.0 - X)
        gy = Y * (1.0 - Y)
        dx = 2.0 * gx * (1.0 - 2.0 * X) * gy ** 2 / rect.width
        dy = 2.0 * gy * (1.0 - 2.0 * Y) * gx ** 2 / rect.height
        return (dx, dy)

    return SpaceTimeTestFunction(
        w=w, grad_w=grad_w,
        g=lambda t: np.cos(freq * t),
        g_antiderivative=lambda t: np.sin(freq * t) / freq,
    )


def _element_integrals(mesh: SimplicialMesh, tf: SpaceTimeTestFunction):
    """(int_K w, int_K grad w) per element via the element quadrature."""
    pts, wts = quadrature.element_points(mesh)
    w_vals = tf.w(pts[..., 0], pts[..., 1])
    int_w = (wts * w_vals).sum(axis=1)
    gx, gy = tf.grad_w(pts[..., 0], pts[..., 1])
    gx = np.broadcast_to(np.asarray(gx, dtype=float), wts.shape)
    gy = np.broadcast_to(np.asarray(gy, dtype=float), wts.shape)
    int_gw = np.stack([(wts * gx).sum(axis=1), (wts * gy).sum(axis=1)], axis=1)
    return int_w, int_gw


def mass_defect(states, dt: float, tf: SpaceTimeTestFunction,
                quantity: str = "rho") -> float:
    """Weak-form consistency defect of the transported quantity.

    Fields are constant on each time slab; the dt-quadrature of the test
    function is exact, so exact conservation makes the defect vanish for
    spatially constant w.  ``quantity`` is "rho", "Z", or "entropy"
    (rho * ln theta, for the entropy-defect sign).
    """
    mesh = states[0].mesh
    int_w, int_gw = _element_integrals(mesh, tf)
    n = len(states) - 1
    times = dt * np.arange(n + 1)
    dg, ig = tf.slab_integrals(times)

    def cell_quantity(s):
        if quantity == "rho":
            return s.rho.values
        if quantity == "Z":
            return s.rho.values * s.theta.values
        if quantity == "entropy":
            return s.rho.values * np.log(s.theta.values)
        raise ValueError(f"unknown quantity {quantity!r}")

    total = float(tf.g(0.0)) * float((cell_quantity(states[0]) * int_w).sum())
    for k in range(1, n + 1):
        r = cell_quantity(states[k])
        ubar = states[k].u_bar()
        total += float(dg[k - 1]) * float((r * int_w).sum())
        total += float(ig[k - 1]) * float((r * (ubar * int_gw).sum(axis=1)).sum())
    if quantity == "entropy":
        return -total
    return total


def momentum_defect(states, params: SchemeParams, dt: float,
                    tf: SpaceTimeTestFunction) -> float:
    """Weak-form consistency defect of the momentum balance.

    Both velocity components carry the same scalar bump profile.
    """
    mesh = states[0].mesh
    h_delta = mesh.h ** params.delta
    int_w, int_gw = _element_integrals(mesh, tf)
    n = len(states) - 1
    times = dt * np.arange(n + 1)
    dg, ig = tf.slab_integrals(times)

    def pieces(s):
        rho = s.rho.values
        z = rho * s.theta.values
        ubar = cell_average_of_cr(s.u)
        ptot = params.a * z ** params.gamma + h_delta * (rho ** 2 + z ** 2)
        mom = rho[:, None] * ubar
        return rho, ubar, ptot, mom

    _, ubar0, _, mom0 = pieces(states[0])
    total = float(tf.g(0.0)) * float((mom0.sum(axis=1) * int_w).sum())
    for k in range(1, n + 1):
        s = states[k]
        rho, ubar, ptot, mom = pieces(s)
        # time derivative against both components
        total += float(dg[k - 1]) * float((mom.sum(axis=1) * int_w).sum())
        # convection rho ubar (x) ubar : grad phi, phi = (w, w)
        conv = (mom * (ubar * int_gw).sum(axis=1)[:, None]).sum(axis=1)
        total += float(ig[k - 1]) * float(conv.sum())
        # pressure against div phi = dw/dx + dw/dy
        total += float(ig[k - 1]) * float((ptot * int_gw.sum(axis=1)).sum())
        # viscous terms move to the other side of the balance
        g = cr_gradient(s.u.values, mesh)          # (ne, d, d)
        visc = params.mu * (g * int_gw[:, None, :]).sum(axis=(1, 2))
        dv = div_h(s.u)
        visc = visc + params.nu * dv * int_gw.sum(axis=1)
        total -= float(ig[k - 1]) * float(visc.sum())
    return total


# -- conservative coarsening and Cauchy proxies -------------------------------


def locate_structured(nx: int, ny: int, rect: Rect,
                      points: np.ndarray) -> np.ndarray:
    """Element indices of points in a structured triangulation.

    Assumes the fixed lower-left/upper-right diagonal split and the
    element ordering of `build_structured_triangulation`.
    """
    X = (points[:, 0] - rect.x0) / rect.width * nx
    Y = (points[:, 1] - rect.y0) / rect.height * ny
    i = np.clip(np.floor(X).astype(np.int64), 0, nx - 1)
    j = np.clip(np.floor(Y).astype(np.int64), 0, ny - 1)
    local_x = X - i
    local_y = Y - j
    upper = local_y > local_x
    return 2 * (i * ny + j) + upper.astype(np.int64)


def coarsen_cell_values(fine: SimplicialMesh, fine_values: np.ndarray,
                        coarse: SimplicialMesh, coarse_nx: int,
                        coarse_ny: int, rect: Rect) -> np.ndarray:
    """Volume-weighted restriction of cellwise data onto a coarser mesh.

    Preserves sum(|K| value) exactly up to roundoff.
    """
    target = locate_structured(coarse_nx, coarse_ny, rect, fine.elem_center)
    shape = ((coarse.n_elements,) if fine_values.ndim == 1
             else (coarse.n_elements, fine_values.shape[1]))
    acc = np.zeros(shape)
    weighted = (fine.elem_volume[:, None] * fine_values
                if fine_values.ndim == 2 else fine.elem_volume * fine_values)
    np.add.at(acc, target, weighted)
    if fine_values.ndim == 2:
        return acc / coarse.elem_volume[:, None]
    return acc / coarse.elem_volume


def _l2_cell_distance(mesh: SimplicialMesh, a: np.ndarray,
                      b: np.ndarray) -> float:
    diff = (a - b) ** 2
    if diff.ndim == 2:
        diff = diff.sum(axis=1)
    return float(np.sqrt((mesh.elem_volume * diff).sum()))


# -- convergence study --------------------------------------------------------


@dataclass
class ConvergenceRow:
    level: int
    nx: int
    h: float
    dt: float
    defect_rho: float
    defect_z: float
    defect_entropy: float
    defect_momentum: float
    control: float
    monitors: dict


@dataclass
class ConvergenceTable:
    rows: list
    eoc: dict
    cauchy: dict

    def to_text(self) -> str:
        lines = ["level  nx      h          dt         |D_rho|      |D_Z|"
                 "        D_entropy     |D_mom|      control"]
        for r in self.rows:
            lines.append(
                f"{r.level:>5d} {r.nx:>3d} {r.h:>11.4e} {r.dt:>11.4e} "
                f"{abs(r.defect_rho):>12.4e} {abs(r.defect_z):>12.4e} "
                f"{r.defect_entropy:>+12.4e} {abs(r.defect_momentum):>12.4e} "
                f"{abs(r.control):>12.4e}")
        for name, values in self.eoc.items():
            pretty = ", ".join(f"{v:.3f}" for v in values)
            lines.append(f"EOC {name}: {pretty}")
        for name, values in self.cauchy.items():
            pretty = ", ".join(f"{v:.4e}" for v in values)
            lines.append(f"Cauchy {name}: {pretty}")
        return "\n".join(lines)


def convergence_study(base: ExperimentConfig, levels: int = 3) -> ConvergenceTable:
    """Run the experiment at h, h/2, ... and measure defects and proxies.

    dt is halved exactly level to level (so step counts double and the
    snapshot at T falls on the same physical time), matching dt = c_dt h
    to machine precision.
    """
    if levels < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    base.validate()
    if base.n_steps is None:
        raise ValueError("the convergence driver requires params.n_steps "
                         "(snapshot times must nest exactly)")

    runs = []
    mesh0 = build_structured_triangulation(base.nx, base.ny, base.rect)
    dt0, _ = base.resolve_dt_T(mesh0.h)
    for level in range(levels):
        cfg = replace(base)
        cfg.nx = base.nx * 2 ** level
        cfg.ny = base.ny * 2 ** level
        cfg.dt = dt0 / 2 ** level
        cfg.c_dt = None
        cfg.n_steps = base.n_steps * 2 ** level
        cfg.T = None
        runs.append(execute(cfg))

    T = runs[0].params.T
    scalar_tf = default_scalar_test_function(T)
    control_tf = constant_test_function(T)
    rows = []
    for level, art in enumerate(runs):
        mom_tf = momentum_test_function(T, base.rect)
        monitor = StabilityMonitor(art.params, art.mesh.h)
        for k, s in enumerate(art.states):
            monitor.update(s, art.params.dt)
        rows.append(ConvergenceRow(
            level=level, nx=art.config.nx, h=art.mesh.h, dt=art.params.dt,
            defect_rho=mass_defect(art.states, art.params.dt, scalar_tf, "rho"),
            defect_z=mass_defect(art.states, art.params.dt, scalar_tf, "Z"),
            defect_entropy=mass_defect(art.states, art.params.dt, scalar_tf,
                                       "entropy"),
            defect_momentum=momentum_defect(art.states, art.params,
                                            art.params.dt, mom_tf),
            control=mass_defect(art.states, art.params.dt, control_tf, "rho"),
            monitors=monitor.snapshot(),
        ))

    eoc = {}
    for name in ("defect_rho", "defect_z", "defect_momentum"):
        vals = [abs(getattr(r, name)) for r in rows]
        eoc[name] = [math.log2(vals[i] / vals[i + 1])
                     if vals[i + 1] > 0 else math.inf
                     for i in range(len(vals) - 1)]

    cauchy = {"rho": [], "Z": [], "u_bar": []}
    for i in range(len(runs) - 1):
        coarse, fine = runs[i], runs[i + 1]
        final_c = coarse.states[-1]
        final_f = fine.states[-1]
        cnx, cny = coarse.config.nx, coarse.config.ny
        rho_f = coarsen_cell_values(fine.mesh, final_f.rho.values,
                                    coarse.mesh, cnx, cny, base.rect)
        z_f = coarsen_cell_values(
            fine.mesh, final_f.rho.values * final_f.theta.values,
            coarse.mesh, cnx, cny, base.rect)
        u_f = coarsen_cell_values(fine.mesh, final_f.u_bar(),
                                  coarse.mesh, cnx, cny, base.rect)
        cauchy["rho"].append(_l2_cell_distance(
            coarse.mesh, rho_f, final_c.rho.values))
        cauchy["Z"].append(_l2_cell_distance(
            coarse.mesh, z_f, final_c.rho.values * final_c.theta.values))
        cauchy["u_bar"].append(_l2_cell_distance(
            coarse.mesh, u_f, final_c.u_bar()))

    return ConvergenceTable(rows=rows, eoc=eoc, cauchy=cauchy)
