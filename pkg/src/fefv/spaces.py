"""Discrete function spaces, projections and broken differential operators.

Two spaces live here: piecewise constants (one value per element, used
for density, potential temperature and pressures) and the nonconforming
piecewise-affine Crouzeix-Raviart space whose degree of freedom is the
face mean (one scalar, or d scalars, per face).  Boundary-constrained CR
fields have all exterior-face coefficients pinned to zero (no-slip).

Trace conventions on a face: the ``in`` side is the element the face
normal points out of, the ``out`` side the other element; on exterior
faces the ``out`` value is zero.  The jump is out - in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import NO_ELEMENT, SimplicialMesh
from . import quadrature


@dataclass
class CellField:
    """Piecewise-constant scalar field, one value per element."""

    mesh: SimplicialMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_elements,):
            raise ValueError("values must have one entry per element")

    def copy(self) -> "CellField":
        return CellField(self.mesh, self.values.copy())


@dataclass
class CRScalarField:
    """Crouzeix-Raviart scalar field; values are face means."""

    mesh: SimplicialMesh
    values: np.ndarray
    boundary_constrained: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_faces,):
            raise ValueError("values must have one entry per face")
        if self.boundary_constrained:
            ext = self.mesh.exterior_faces
            if np.any(self.values[ext] != 0.0):
                self.values = self.values.copy()
                self.values[ext] = 0.0


@dataclass
class CRVectorField:
    """Crouzeix-Raviart vector field; values are face means, d per face."""

    mesh: SimplicialMesh
    values: np.ndarray
    boundary_constrained: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_faces, self.mesh.dim):
            raise ValueError("values must be (n_faces, dim)")
        if self.boundary_constrained:
            ext = self.mesh.exterior_faces
            if np.any(self.values[ext] != 0.0):
                self.values = self.values.copy()
                self.values[ext] = 0.0

    def copy(self) -> "CRVectorField":
        return CRVectorField(self.mesh, self.values.copy(),
                             self.boundary_constrained)


@dataclass(frozen=True)
class FaceTracePair:
    """In/out trace values on one face with derived jump and means."""

    face: int
    in_value: np.ndarray | float
    out_value: np.ndarray | float
    face_mean: np.ndarray | float

    @property
    def jump(self):
        return self.out_value - self.in_value

    @property
    def mean(self):
        return 0.5 * (self.out_value + self.in_value)


def project_cell(f, mesh: SimplicialMesh) -> CellField:
    """Cell-mean projection: value on K is the mean of f over K.

    ``f`` must accept coordinate arrays, f(x, y) -> array.
    """
    pts, wts = quadrature.element_points(mesh)
    vals = np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float)
    means = (wts * vals).sum(axis=1) / mesh.elem_volume
    return CellField(mesh, means)


def project_cr(f, mesh: SimplicialMesh, boundary_constrained: bool = False):
    """Face-mean projection onto the Crouzeix-Raviart space.

    The coefficient on a face is the mean of f over that face.  Returns a
    scalar or vector field depending on what f produces; vector f may
    return a tuple of components or a trailing-axis stack.  With
    ``boundary_constrained`` the exterior coefficients are zeroed after
    projection (intended for data vanishing on the boundary).
    """
    pts, wts = quadrature.face_points(mesh)
    raw = f(pts[..., 0], pts[..., 1])
    if isinstance(raw, (tuple, list)):
        raw = np.stack(raw, axis=-1)
    raw = np.asarray(raw, dtype=float)
    if raw.shape == pts.shape[:2]:
        coeff = (wts * raw).sum(axis=1) / mesh.face_area
        return CRScalarField(mesh, coeff, boundary_constrained)
    coeff = (wts[..., None] * raw).sum(axis=1) / mesh.face_area[:, None]
    return CRVectorField(mesh, coeff, boundary_constrained)


def cr_gradient(values: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """Broken gradient of CR coefficients.

    For scalar coefficients (n_faces,) returns (n_elements, dim); for
    vector coefficients (n_faces, d) returns (n_elements, d, dim) with
    grad[K, c, i] = d u_c / d x_i on K.  Uses the exact affine identity
    grad = sum_sigma v_sigma |sigma| n_K(sigma) / |K|.
    """
    w = mesh.outward_face_vectors                    # (ne, d+1, dim)
    vol = mesh.elem_volume
    face_vals = values[mesh.elem_faces]              # (ne, d+1[, d])
    if face_vals.ndim == 2:
        return np.einsum("ef,efi->ei", face_vals, w) / vol[:, None]
    return np.einsum("efc,efi->eci", face_vals, w) / vol[:, None, None]


def grad_h(field) -> np.ndarray:
    """Elementwise constant gradient of a CR field."""
    return cr_gradient(field.values, field.mesh)


def div_h(field: CRVectorField) -> np.ndarray:
    """Broken divergence of a CR vector field, one value per element."""
    w = field.mesh.outward_face_vectors
    face_vals = field.values[field.mesh.elem_faces]  # (ne, d+1, d)
    return np.einsum("efc,efc->e", face_vals, w) / field.mesh.elem_volume


def cell_average_of_cr(field) -> np.ndarray:
    """Cell averages of a CR field (exact: mean of the face coefficients).

    Returns (n_elements,) for scalar fields, (n_elements, d) for vector
    fields; equals the affine function's value at the element barycenter.
    """
    face_vals = field.values[field.mesh.elem_faces]
    return face_vals.mean(axis=1)


def cell_averaging_weights(mesh: SimplicialMesh) -> float:
    """Weight of one face coefficient in the cell average."""
    return 1.0 / (mesh.dim + 1)


def face_traces(field, sigma: int) -> FaceTracePair:
    """Trace pair of a field on one face.

    Cell fields trace to their adjacent constants.  CR fields are traced
    at the face barycenter, where both one-sided limits coincide with the
    stored coefficient (the face mean); the face mean itself is
    side-independent on interior faces.
    """
    mesh = field.mesh
    k_in = mesh.face_in[sigma]
    k_out = mesh.face_out[sigma]
    if isinstance(field, CellField):
        in_v = field.values[k_in]
        out_v = field.values[k_out] if k_out != NO_ELEMENT else 0.0
        return FaceTracePair(sigma, in_v, out_v, in_v)
    coeff = field.values[sigma]
    zero = np.zeros_like(coeff)
    out_v = coeff if k_out != NO_ELEMENT else zero
    return FaceTracePair(sigma, coeff, out_v, coeff)


def interior_cell_traces(values: np.ndarray, mesh: SimplicialMesh):
    """(in, out) arrays of cellwise values on all interior faces."""
    idx = mesh.interior_faces
    return values[mesh.face_in[idx]], values[mesh.face_out[idx]]


def interior_cell_jumps(values: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """Jumps out - in of cellwise values on all interior faces."""
    v_in, v_out = interior_cell_traces(values, mesh)
    return v_out - v_in


def evaluate_cr(field, points: np.ndarray, elems: np.ndarray) -> np.ndarray:
    """Evaluate the affine restriction of a CR field at given points.

    ``points`` has shape (n, nq, dim) and ``elems`` (n,) gives the element
    each row of points lies in.
    """
    mesh = field.mesh
    avg = cell_average_of_cr(field)[elems]
    grad = cr_gradient(field.values, mesh)[elems]
    rel = points - mesh.elem_center[elems][:, None, :]
    if field.values.ndim == 1:
        return avg[:, None] + np.einsum("nqi,ni->nq", rel, grad)
    return avg[:, None, :] + np.einsum("nqi,nci->nqc", rel, grad)


def l2_norm_cell(values: np.ndarray, mesh: SimplicialMesh) -> float:
    """L2 norm of a cellwise-constant (possibly vector) field."""
    sq = np.asarray(values) ** 2
    if sq.ndim == 2:
        sq = sq.sum(axis=1)
    return float(np.sqrt((mesh.elem_volume * sq).sum()))


def lp_norm_cell(values: np.ndarray, mesh: SimplicialMesh, p: float) -> float:
    """L^p norm (p < inf) of a cellwise-constant scalar or vector field."""
    mag = np.abs(np.asarray(values))
    if mag.ndim == 2:
        mag = np.linalg.norm(mag, axis=1)
    return float((mesh.elem_volume * mag ** p).sum() ** (1.0 / p))


def l2_norm_cr(field) -> float:
    """L2 norm of a CR field via the element quadrature."""
    mesh = field.mesh
    pts, wts = quadrature.element_points(mesh)
    vals = evaluate_cr(field, pts, np.arange(mesh.n_elements))
    sq = vals ** 2
    if sq.ndim == 3:
        sq = sq.sum(axis=2)
    return float(np.sqrt((wts * sq).sum()))


def l2_norm_grad(field) -> float:
    """L2 norm of the broken gradient of a CR field."""
    g = cr_gradient(field.values, field.mesh)
    sq = (g ** 2).reshape(field.mesh.n_elements, -1).sum(axis=1)
    return float(np.sqrt((field.mesh.elem_volume * sq).sum()))


def random_v0h(mesh: SimplicialMesh, rng: np.random.Generator,
               vector: bool = False):
    """Random boundary-constrained CR field with standard-normal DOFs."""
    if vector:
        vals = rng.standard_normal((mesh.n_faces, mesh.dim))
        return CRVectorField(mesh, vals, boundary_constrained=True)
    vals = rng.standard_normal(mesh.n_faces)
    return CRScalarField(mesh, vals, boundary_constrained=True)
