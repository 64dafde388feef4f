"""Experiment configuration: flat key=value files with dotted sections.

Grammar (one setting per line):

    # comment
    mesh.nx = 64
    params.gamma = 1.4
    output.formats = csv,vtk

Sections: ``mesh`` (nx, ny, x0, y0, x1, y1), ``params`` (gamma, a, mu,
lambda, epsilon, delta, and either dt or c_dt plus either T or n_steps),
``solver`` (tol_nl, tol_lin, max_picard, relax, homotopy_steps),
``initial`` (preset and preset-specific keys), ``output`` (dir,
snapshot_stride, formats).  Validation collects every violated
constraint before raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Rect, build_structured_triangulation
from .scheme import SchemeParams, SolverSettings

PRESETS = ("rest", "smooth_vortex", "gaussian_bump", "custom")


class ConfigError(Exception):
    """Raised with the full list of configuration violations."""


@dataclass
class ExperimentConfig:
    nx: int = 16
    ny: int = 16
    rect: Rect = field(default_factory=Rect)
    gamma: float = 1.4
    a: float = 1.0
    mu: float = 0.1
    lam: float = 0.0
    epsilon: float = 1.5
    delta: float = 0.25
    dt: float | None = None
    c_dt: float | None = 0.5
    T: float | None = None
    n_steps: int | None = 10
    tol_nl: float = 1e-10
    tol_lin: float = 1e-12
    max_picard: int = 200
    relax: float = 1.0
    homotopy_steps: int = 8
    preset: str = "smooth_vortex"
    initial_options: dict = field(default_factory=dict)
    output_dir: str = "out"
    snapshot_stride: int = 0            # 0: final state only
    formats: tuple = ("csv",)

    def mesh(self):
        return build_structured_triangulation(self.nx, self.ny, self.rect)

    def resolve_dt_T(self, h: float) -> tuple[float, float]:
        """Concrete (dt, T) from either explicit values or the dt ~ h coupling."""
        dt = self.dt if self.dt is not None else self.c_dt * h
        if self.T is not None:
            T = self.T
        elif self.n_steps is not None:
            T = self.n_steps * dt
        else:
            raise ConfigError("either params.T or params.n_steps is required")
        return dt, T

    def scheme_params(self, h: float) -> SchemeParams:
        dt, T = self.resolve_dt_T(h)
        return SchemeParams(gamma=self.gamma, a=self.a, mu=self.mu,
                            lam=self.lam, epsilon=self.epsilon,
                            delta=self.delta, dt=dt, T=T)

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(tol_nl=self.tol_nl, tol_lin=self.tol_lin,
                              max_picard=self.max_picard, relax=self.relax,
                              homotopy_steps=self.homotopy_steps)

    def validate(self) -> None:
        errors = []
        if self.nx < 1 or self.ny < 1:
            errors.append(f"mesh.nx/ny must be >= 1, got {self.nx}x{self.ny}")
        if self.rect.width <= 0 or self.rect.height <= 0:
            errors.append("mesh extents must describe a nondegenerate rectangle")
        if not self.gamma > 1.0:
            errors.append(f"params.gamma must be > 1, got {self.gamma}")
        if not self.a > 0.0:
            errors.append(f"params.a must be > 0, got {self.a}")
        if not self.mu > 0.0:
            errors.append(f"params.mu must be > 0, got {self.mu}")
        if self.lam < -self.mu:
            errors.append(f"params.lambda must be >= -mu in 2D, got {self.lam}")
        if not self.epsilon > 1.0:
            errors.append(f"params.epsilon must be > 1, got {self.epsilon}")
        if not 0.0 < self.delta < 0.5:
            errors.append(f"params.delta must be in (0, 1/2), got {self.delta}")
        if self.dt is None and self.c_dt is None:
            errors.append("one of params.dt or params.c_dt is required")
        if self.dt is not None and self.dt <= 0:
            errors.append(f"params.dt must be > 0, got {self.dt}")
        if self.c_dt is not None and self.c_dt <= 0:
            errors.append(f"params.c_dt must be > 0, got {self.c_dt}")
        if self.T is None and self.n_steps is None:
            errors.append("one of params.T or params.n_steps is required")
        if self.n_steps is not None and self.n_steps < 1:
            errors.append(f"params.n_steps must be >= 1, got {self.n_steps}")
        if not self.tol_nl > 0:
            errors.append(f"solver.tol_nl must be > 0, got {self.tol_nl}")
        if not 0 < self.relax <= 1:
            errors.append(f"solver.relax must be in (0, 1], got {self.relax}")
        if self.homotopy_steps < 1:
            errors.append("solver.homotopy_steps must be >= 1")
        if self.preset not in PRESETS:
            errors.append(f"initial.preset must be one of {PRESETS}, "
                          f"got {self.preset!r}")
        bad = set(self.formats) - {"csv", "vtk"}
        if bad:
            errors.append(f"output.formats entries must be csv or vtk, got {bad}")
        if self.snapshot_stride < 0:
            errors.append("output.snapshot_stride must be >= 0")
        if errors:
            raise ConfigError("; ".join(errors))


_SECTION_KEYS = {
    ("mesh", "nx"): ("nx", int),
    ("mesh", "ny"): ("ny", int),
    ("params", "gamma"): ("gamma", float),
    ("params", "a"): ("a", float),
    ("params", "mu"): ("mu", float),
    ("params", "lambda"): ("lam", float),
    ("params", "epsilon"): ("epsilon", float),
    ("params", "delta"): ("delta", float),
    ("params", "dt"): ("dt", float),
    ("params", "c_dt"): ("c_dt", float),
    ("params", "T"): ("T", float),
    ("params", "n_steps"): ("n_steps", int),
    ("solver", "tol_nl"): ("tol_nl", float),
    ("solver", "tol_lin"): ("tol_lin", float),
    ("solver", "max_picard"): ("max_picard", int),
    ("solver", "relax"): ("relax", float),
    ("solver", "homotopy_steps"): ("homotopy_steps", int),
    ("initial", "preset"): ("preset", str),
    ("output", "dir"): ("output_dir", str),
    ("output", "snapshot_stride"): ("snapshot_stride", int),
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key=value grammar into an ExperimentConfig."""
    cfg = ExperimentConfig()
    rect = {"x0": 0.0, "y0": 0.0, "x1": 1.0, "y1": 1.0}
    explicit_dt = False
    explicit_T = False
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value, got {raw!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            errors.append(f"line {lineno}: key must be section.name, got {key!r}")
            continue
        section, name = key.split(".", 1)
        try:
            if (section, name) in _SECTION_KEYS:
                attr, cast = _SECTION_KEYS[(section, name)]
                setattr(cfg, attr, cast(value))
                explicit_dt |= (section, name) == ("params", "dt")
                explicit_T |= (section, name) == ("params", "T")
            elif section == "mesh" and name in rect:
                rect[name] = float(value)
            elif section == "output" and name == "formats":
                cfg.formats = tuple(v.strip() for v in value.split(",") if v.strip())
            elif section == "initial":
                cfg.initial_options[name] = value
            else:
                errors.append(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            errors.append(f"line {lineno}: bad value for {key!r}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg.rect = Rect(rect["x0"], rect["y0"], rect["x1"], rect["y1"])
    # Explicit dt/T override the default coupling/step-count defaults.
    if explicit_dt:
        cfg.c_dt = None
    if explicit_T:
        cfg.n_steps = None
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# -- initial-data presets ----------------------------------------------------


def _floats(options: dict, key: str, default: str) -> list[float]:
    raw = options.get(key, default)
    return [float(v) for v in str(raw).split(",") if str(v).strip()]


def initial_fields(cfg: ExperimentConfig):
    """(rho0, theta0, u0) callables for the configured preset.

    All presets are phrased in coordinates normalized to the rectangle,
    keep the initial density/temperature strictly positive, and give a
    velocity compatible with the no-slip boundary.
    """
    rect = cfg.rect

    def nx(x):
        return (x - rect.x0) / rect.width

    def ny(y):
        return (y - rect.y0) / rect.height

    if cfg.preset == "rest":
        rho = lambda x, y: np.ones_like(x)
        theta = lambda x, y: np.ones_like(x)
        u = lambda x, y: (np.zeros_like(x), np.zeros_like(x))
        return rho, theta, u

    if cfg.preset == "smooth_vortex":
        def rho(x, y):
            return 1.0 + 0.2 * np.sin(np.pi * nx(x)) * np.sin(np.pi * ny(y))

        def theta(x, y):
            return 1.0 + 0.2 * np.cos(np.pi * nx(x)) * np.cos(np.pi * ny(y))

        def u(x, y):
            sx, sy = np.pi * nx(x), np.pi * ny(y)
            return (0.1 * np.sin(sx) ** 2 * np.sin(2.0 * sy),
                    -0.1 * np.sin(2.0 * sx) * np.sin(sy) ** 2)

        return rho, theta, u

    if cfg.preset == "gaussian_bump":
        amp = float(cfg.initial_options.get("amplitude", 0.2))
        width = float(cfg.initial_options.get("width", 50.0))

        def rho(x, y):
            r2 = (nx(x) - 0.5) ** 2 + (ny(y) - 0.5) ** 2
            return 1.0 + amp * np.exp(-width * r2)

        theta = lambda x, y: np.ones_like(x)
        u = lambda x, y: (np.zeros_like(x), np.zeros_like(x))
        return rho, theta, u

    # custom: bilinear coefficient lists c0 + c1*X + c2*Y + c3*X*Y and a
    # stream-function velocity that vanishes on the boundary.
    rc = _floats(cfg.initial_options, "rho_coeffs", "1.0")
    tc = _floats(cfg.initial_options, "theta_coeffs", "1.0")
    amp = float(cfg.initial_options.get("u_amplitude", 0.0))

    def bilinear(coeffs):
        c = (coeffs + [0.0] * 4)[:4]

        def f(x, y):
            X, Y = nx(x), ny(y)
            return c[0] + c[1] * X + c[2] * Y + c[3] * X * Y

        return f

    rho = bilinear(rc)
    theta = bilinear(tc)

    def u(x, y):
        # u = amp * curl(psi), psi = (X(1-X)Y(1-Y))^2: double zeros on
        # the boundary make both components vanish there.
        X, Y = nx(x), ny(y)
        gx = X * (1.0 - X)
        gy = Y * (1.0 - Y)
        dpsi_dy = gx ** 2 * 2.0 * gy * (1.0 - 2.0 * Y) / rect.height
        dpsi_dx = gy ** 2 * 2.0 * gx * (1.0 - 2.0 * X) / rect.width
        return amp * dpsi_dy, -amp * dpsi_dx

    return rho, theta, u
