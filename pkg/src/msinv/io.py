"""Deterministic file exports: legacy VTK models, trace CSV, basis triplets."""

import numpy as np

from .operators import sigma_map


def export_model_vtk(m, mesh, path, name="sigma"):
    """Write conductivity ``exp(m)`` as a legacy ASCII STRUCTURED_POINTS file.

    Cell data is written as point data on the cell-center grid, so DIMENSIONS
    are the cell counts and the origin sits at the first cell center.
    """
    sigma = sigma_map(m)
    if sigma.size != mesh.n_cells:
        raise ValueError("model length does not match mesh")
    lines = [
        "# vtk DataFile Version 3.0",
        "cell-wise conductivity",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {mesh.n1} {mesh.n2} {mesh.n3}",
        f"ORIGIN {0.5 * mesh.h1:.17g} {0.5 * mesh.h2:.17g} {0.5 * mesh.h3:.17g}",
        f"SPACING {mesh.h1:.17g} {mesh.h2:.17g} {mesh.h3:.17g}",
        f"POINT_DATA {mesh.n_cells}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    lines.extend(f"{v:.17g}" for v in sigma)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def export_trace_csv(trace, path):
    """One row per outer iteration; row 0 is the initial state."""
    header = ",".join(trace.COLUMNS)
    lines = [header]
    for row in trace.rows:
        lines.append(",".join(_fmt(row[c]) for c in trace.COLUMNS))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def dump_basis_triplets(basis, path):
    """Coordinate-triplet text dump (row, col, value) of the basis matrix."""
    coo = basis.S.tocoo()
    order = np.lexsort((coo.row, coo.col))
    with open(path, "w", encoding="utf-8") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")
