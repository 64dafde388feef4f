"""Legacy ASCII VTK and CSV writers for meshes and states.

The VTK output is an unstructured grid with triangle (or tetrahedron)
cells and cell-data arrays named rho, theta, p plus the cell-averaged
velocity as the vector array u_bar.  Numbers are written with %.17g so
repeated runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import SimplicialMesh
from .scheme import SchemeParams, State, pressure
from .spaces import CellField, cell_average_of_cr

VTK_CELL_TYPE = {2: 5, 3: 10}          # VTK_TRIANGLE, VTK_TETRA


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_vtk_header(lines, mesh: SimplicialMesh, title: str) -> None:
    lines.append("# vtk DataFile Version 3.0")
    lines.append(title)
    lines.append("ASCII")
    lines.append("DATASET UNSTRUCTURED_GRID")
    lines.append(f"POINTS {mesh.n_vertices} double")
    for v in mesh.vertices:
        coords = list(v) + [0.0] * (3 - mesh.dim)
        lines.append(" ".join(_fmt(c) for c in coords))
    npe = mesh.dim + 1
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (npe + 1)}")
    for elem in mesh.elements:
        lines.append(f"{npe} " + " ".join(str(i) for i in elem))
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    cell_type = str(VTK_CELL_TYPE[mesh.dim])
    lines.extend([cell_type] * mesh.n_elements)


def write_vtk_mesh(mesh: SimplicialMesh, path) -> Path:
    """Write the bare mesh as a legacy VTK unstructured grid."""
    lines = []
    _write_vtk_header(lines, mesh, "fefv mesh")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_vtk_state(state: State, params: SchemeParams, path) -> Path:
    """Write a state snapshot: rho, theta, p as scalars, u_bar as vectors."""
    mesh = state.mesh
    lines = []
    _write_vtk_header(lines, mesh, f"fefv state k={state.k}")
    lines.append(f"CELL_DATA {mesh.n_elements}")
    z = CellField(mesh, state.rho.values * state.theta.values)
    scalars = [
        ("rho", state.rho.values),
        ("theta", state.theta.values),
        ("p", pressure(z, params).values),
    ]
    for name, values in scalars:
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in values)
    ubar = cell_average_of_cr(state.u)
    lines.append("VECTORS u_bar double")
    for row in ubar:
        coords = list(row) + [0.0] * (3 - mesh.dim)
        lines.append(" ".join(_fmt(c) for c in coords))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_cell_fields_csv(mesh: SimplicialMesh, fields: dict, path) -> Path:
    """CSV export of cellwise arrays: element id, barycenter, then fields."""
    names = list(fields)
    lines = ["element," + ",".join(["x", "y"][: mesh.dim]) + ","
             + ",".join(names)]
    for k in range(mesh.n_elements):
        center = ",".join(_fmt(c) for c in mesh.elem_center[k])
        vals = ",".join(_fmt(np.asarray(fields[n])[k]) for n in names)
        lines.append(f"{k},{center},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_rows_csv(header, rows, path) -> Path:
    """Write diagnostics rows (dicts) with a fixed header, %.17g floats."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            v = row[key]
            cells.append(str(v) if isinstance(v, (int, np.integer)) else _fmt(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
