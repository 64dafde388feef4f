"""Conforming simplicial meshes with oriented face topology.

The mesh is the geometric substrate for every discrete operator in the
package: elements carry volumes and barycenters, faces carry measures,
barycenters, unit normals and the (in, out) element pair that fixes the
orientation of all trace and jump operators.  A face normal always points
out of its ``in`` element, which is chosen as the adjacent element with
the smaller index.  Meshes are immutable after construction and safe for
concurrent read access.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NO_ELEMENT = -1

# Default bound on (element diameter)/(inradius).  The admissible mesh
# family only requires some uniform bound; the concrete value is a tool
# parameter.  Structured right-triangle meshes have ratio ~4.83.
SHAPE_RATIO_BOUND = 8.0


class MeshError(Exception):
    """Raised when a mesh fails construction or validation."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]``."""

    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class SimplicialMesh:
    """Conforming triangulation with precomputed face topology.

    Attributes
    ----------
    dim : int
        Spatial dimension (2 supported natively; the data layout is
        dimension-generic).
    vertices : (n_vertices, dim) float array
    elements : (n_elements, dim+1) int array
        Vertex indices per element.
    elem_volume, elem_center, elem_diameter : per-element geometry
    face_vertices : (n_faces, dim) int array
    face_area, face_center, face_normal : per-face geometry; the unit
        normal points out of ``face_in``.
    face_in, face_out : (n_faces,) int arrays
        Adjacent elements; ``face_out`` is ``NO_ELEMENT`` on the boundary.
        ``face_in`` is the adjacent element with the smaller index.
    elem_faces : (n_elements, dim+1) int array
        Face indices per element.
    elem_face_sign : (n_elements, dim+1) float array
        +1 where the element is the face's ``in`` side, -1 otherwise, so
        that ``sign * face_normal`` is the outward normal of the element.
    outward_face_vectors : (n_elements, dim+1, dim) float array
        ``|sigma| * n_K(sigma)`` per element face; the basic building
        block of the broken gradient/divergence and of all face sums.
        Stored as exact sign flips of shared face data so that the two
        sides of a face cancel bit-exactly.
    h : float
        Mesh parameter, the maximum element diameter.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    elem_volume: np.ndarray
    elem_center: np.ndarray
    elem_diameter: np.ndarray
    face_vertices: np.ndarray
    face_area: np.ndarray
    face_center: np.ndarray
    face_normal: np.ndarray
    face_in: np.ndarray
    face_out: np.ndarray
    elem_faces: np.ndarray
    elem_face_sign: np.ndarray
    outward_face_vectors: np.ndarray
    h: float
    interior_faces: np.ndarray = field(init=False)
    exterior_faces: np.ndarray = field(init=False)

    def __post_init__(self):
        self.interior_faces = np.flatnonzero(self.face_out != NO_ELEMENT)
        self.exterior_faces = np.flatnonzero(self.face_out == NO_ELEMENT)
        for arr in (self.vertices, self.elements, self.elem_volume,
                    self.elem_center, self.elem_diameter, self.face_vertices,
                    self.face_area, self.face_center, self.face_normal,
                    self.face_in, self.face_out, self.elem_faces,
                    self.elem_face_sign, self.outward_face_vectors,
                    self.interior_faces, self.exterior_faces):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_area.shape[0]

    @property
    def n_interior_faces(self) -> int:
        return self.interior_faces.shape[0]

    def inradius(self) -> np.ndarray:
        """Inradius per element: ``d * |K| / sum(|sigma|)``."""
        face_areas = self.face_area[self.elem_faces]
        return self.dim * self.elem_volume / face_areas.sum(axis=1)

    def shape_ratios(self) -> np.ndarray:
        return self.elem_diameter / self.inradius()

    def validate(self, shape_ratio_bound: float = SHAPE_RATIO_BOUND) -> None:
        """Assert the structural mesh invariants; raise MeshError on failure.

        Checks positivity of measures, two-sided interior adjacency,
        normal orientation (out of the ``in`` element), the per-element
        closed-boundary identity sum(|sigma| n_K) = 0, and the shape
        regularity bound.  Conformity holds by construction for meshes
        built from shared vertex/face tables.
        """
        if np.any(self.elem_volume <= 0.0):
            raise MeshError("nonpositive element volume")
        if np.any(self.face_area <= 0.0):
            raise MeshError("nonpositive face measure")
        norms = np.linalg.norm(self.face_normal, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise MeshError("face normals are not unit vectors")
        if np.any(self.face_in == NO_ELEMENT):
            raise MeshError("face without an `in` element")
        interior = self.interior_faces
        if np.any(self.face_in[interior] == self.face_out[interior]):
            raise MeshError("interior face with identical adjacent elements")
        if np.any(self.face_in[interior] > self.face_out[interior]):
            raise MeshError("`in` element must be the smaller element index")
        # Orientation: n_sigma . (x_sigma - x_{K_in}) > 0.
        offset = self.face_center - self.elem_center[self.face_in]
        if np.any(np.einsum("fd,fd->f", offset, self.face_normal) <= 0.0):
            raise MeshError("face normal does not point out of its `in` element")
        # Adjacency is an involution: each face is listed by its elements.
        for side in (self.face_in, self.face_out[interior]):
            faces = np.arange(self.n_faces) if side is self.face_in else interior
            listed = self.elem_faces[side] == faces[:, None]
            if not np.all(listed.any(axis=1)):
                raise MeshError("face/element adjacency is not an involution")
        # Closed boundary: sum of outward face vectors vanishes per element.
        closure = np.abs(self.outward_face_vectors.sum(axis=1)).max()
        if closure > 1e-13 * max(1.0, self.face_area.max()):
            raise MeshError(f"closed-boundary identity violated ({closure:.3e})")
        ratio = self.shape_ratios().max()
        if ratio > shape_ratio_bound:
            raise MeshError(
                f"shape ratio {ratio:.3f} exceeds bound {shape_ratio_bound}")


@dataclass(frozen=True)
class MeshStatistics:
    h: float
    min_volume: float
    shape_ratio_max: float
    counts: dict


def mesh_statistics(mesh: SimplicialMesh) -> MeshStatistics:
    """Summary record: mesh parameter, extreme volumes, shape ratio, counts."""
    return MeshStatistics(
        h=mesh.h,
        min_volume=float(mesh.elem_volume.min()),
        shape_ratio_max=float(mesh.shape_ratios().max()),
        counts={
            "vertices": mesh.n_vertices,
            "elements": mesh.n_elements,
            "faces": mesh.n_faces,
            "interior_faces": mesh.n_interior_faces,
            "exterior_faces": mesh.n_faces - mesh.n_interior_faces,
        },
    )


def build_structured_triangulation(nx: int, ny: int,
                                   rect: Rect = Rect()) -> SimplicialMesh:
    """Triangulate an axis-aligned rectangle into 2*nx*ny right triangles.

    Every grid cell is split along its lower-left to upper-right diagonal
    (fixed orientation for reproducibility).  All mesh invariants hold on
    the result; `validate` is cheap and run by the test suite on every
    constructed mesh.
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"grid must be at least 1x1, got {nx}x{ny}")
    if rect.width <= 0.0 or rect.height <= 0.0:
        raise MeshError(f"degenerate rectangle {rect}")

    xs = np.linspace(rect.x0, rect.x1, nx + 1)
    ys = np.linspace(rect.y0, rect.y1, ny + 1)
    xv, yv = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    v00 = vid(ii, jj).ravel()
    v10 = vid(ii + 1, jj).ravel()
    v01 = vid(ii, jj + 1).ravel()
    v11 = vid(ii + 1, jj + 1).ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    return _finalize_triangle_mesh(vertices, elements)


def _finalize_triangle_mesh(vertices: np.ndarray,
                            elements: np.ndarray) -> SimplicialMesh:
    """Derive face topology and geometry for a 2D triangle mesh."""
    ne = elements.shape[0]
    coords = vertices[elements]                      # (ne, 3, 2)
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    elem_volume = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    if np.any(elem_volume <= 0.0):
        raise MeshError("degenerate element in triangulation")
    elem_center = coords.mean(axis=1)
    edge_vecs = coords[:, [1, 2, 0]] - coords[:, [0, 1, 2]]
    elem_diameter = np.linalg.norm(edge_vecs, axis=2).max(axis=1)

    # Local face l is opposite local vertex l: faces (1,2), (2,0), (0,1).
    local = [(1, 2), (2, 0), (0, 1)]
    pairs = np.stack([np.sort(elements[:, f], axis=1) for f in local], axis=1)
    flat = pairs.reshape(-1, 2)                      # (3*ne, 2)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    nf = uniq.shape[0]
    elem_faces = inverse.reshape(ne, 3).astype(np.int64)

    # Adjacent elements per face; `in` is the smaller element index.
    owner = np.repeat(np.arange(ne, dtype=np.int64), 3)
    face_in = np.full(nf, ne, dtype=np.int64)
    face_out = np.full(nf, NO_ELEMENT, dtype=np.int64)
    np.minimum.at(face_in, inverse, owner)
    counts = np.bincount(inverse, minlength=nf)
    if counts.max() > 2 or counts.min() < 1:
        raise MeshError("non-conforming connectivity: face shared by "
                        f"{counts.max()} elements")
    other = np.full(nf, NO_ELEMENT, dtype=np.int64)
    np.maximum.at(other, inverse, owner)
    two_sided = counts == 2
    face_out[two_sided] = other[two_sided]

    a = vertices[uniq[:, 0]]
    b = vertices[uniq[:, 1]]
    tangent = b - a
    face_area = np.linalg.norm(tangent, axis=1)
    face_center = 0.5 * (a + b)
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / face_area[:, None]
    # Orient out of the `in` element.
    offset = face_center - elem_center[face_in]
    flip = np.einsum("fd,fd->f", offset, normal) < 0.0
    normal[flip] *= -1.0

    elem_face_sign = np.where(face_in[elem_faces] == np.arange(ne)[:, None],
                              1.0, -1.0)
    outward = (elem_face_sign[:, :, None]
               * face_area[elem_faces][:, :, None]
               * normal[elem_faces])

    return SimplicialMesh(
        dim=2,
        vertices=vertices,
        elements=elements,
        elem_volume=elem_volume,
        elem_center=elem_center,
        elem_diameter=elem_diameter,
        face_vertices=uniq,
        face_area=face_area,
        face_center=face_center,
        face_normal=normal,
        face_in=face_in,
        face_out=face_out,
        elem_faces=elem_faces,
        elem_face_sign=elem_face_sign,
        outward_face_vectors=outward,
        h=float(elem_diameter.max()),
    )
