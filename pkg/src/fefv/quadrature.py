"""Fixed quadrature rules for projections, norms and face integrals.

Element rule: 6-point triangle rule, exact for polynomials of degree <= 4.
Face rule: 2-point Gauss-Legendre on each edge, exact for degree <= 3.
Both rules have positive weights, so projections of positive data stay
positive and strict pointwise bounds survive cell averaging.
"""

from __future__ import annotations

import numpy as np

from .mesh import SimplicialMesh

# Degree-4 triangle rule in barycentric coordinates, weights sum to 1.
_A1 = 0.44594849091596488632
_W1 = 0.22338158967801146570
_A2 = 0.09157621350977074346
_W2 = 0.10995174365532186764
TRI_POINTS = np.array([
    [1.0 - 2.0 * _A1, _A1, _A1],
    [_A1, 1.0 - 2.0 * _A1, _A1],
    [_A1, _A1, 1.0 - 2.0 * _A1],
    [1.0 - 2.0 * _A2, _A2, _A2],
    [_A2, 1.0 - 2.0 * _A2, _A2],
    [_A2, _A2, 1.0 - 2.0 * _A2],
])
TRI_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# 2-point Gauss-Legendre on [0, 1].
_G = 0.5 / np.sqrt(3.0)
EDGE_POINTS = np.array([0.5 - _G, 0.5 + _G])
EDGE_WEIGHTS = np.array([0.5, 0.5])


def element_points(mesh: SimplicialMesh):
    """Physical quadrature points and weights for every element.

    Returns (points, weights) with shapes (n_elements, nq, dim) and
    (n_elements, nq); weights include the element volume, so a plain
    weighted sum integrates over the mesh.
    """
    coords = mesh.vertices[mesh.elements]            # (ne, d+1, d)
    pts = np.einsum("qv,evd->eqd", TRI_POINTS, coords)
    wts = mesh.elem_volume[:, None] * TRI_WEIGHTS[None, :]
    return pts, wts


def face_points(mesh: SimplicialMesh):
    """Physical quadrature points and weights for every face.

    Weights include the face measure.
    """
    a = mesh.vertices[mesh.face_vertices[:, 0]]
    b = mesh.vertices[mesh.face_vertices[:, 1]]
    pts = (a[:, None, :] * (1.0 - EDGE_POINTS)[None, :, None]
           + b[:, None, :] * EDGE_POINTS[None, :, None])
    wts = mesh.face_area[:, None] * EDGE_WEIGHTS[None, :]
    return pts, wts
