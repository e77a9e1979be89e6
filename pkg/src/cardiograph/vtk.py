"""Legacy-format ASCII VTK export of nodal fields on structured grids."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeMismatch, Unsupported


def write_vtk(path, geometry, fields: dict, title: str = "cardiograph") -> None:
    if not geometry.is_structured:
        raise Unsupported("VTK export needs a structured grid")
    dims = list(geometry.dims) + [1] * (3 - geometry.ndim)
    spacing = list(geometry.spacing) + [1.0] * (3 - geometry.ndim)
    lines = [
        "# vtk DataFile Version 3.0",
        title[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*dims),
        "ORIGIN 0 0 0",
        "SPACING {!r} {!r} {!r}".format(*spacing),
        f"POINT_DATA {geometry.n_nodes}",
    ]
    for name, values in fields.items():
        values = np.asarray(values, dtype=float).ravel()
        if values.size != geometry.n_nodes:
            raise ShapeMismatch(f"field '{name}' has {values.size} values, grid has {geometry.n_nodes}")
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(repr(float(v)) for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
