"""ASCII PLY reading and writing for :class:`~posegen.geometry.PointCloud`.

Only the vertex element is interpreted. ``x y z`` are required; ``red green
blue`` (uchar) map to the ``colors`` attribute and ``nx ny nz`` to
``normals``. Any other property is skipped with a warning.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

from .geometry import PointCloud

_GROUPS = {
    "colors": ("red", "green", "blue"),
    "normals": ("nx", "ny", "nz"),
}


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_ply(path: str | os.PathLike, pc: PointCloud) -> None:
    """Write ``pc`` as ASCII PLY; float columns use 17 significant digits."""
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    has_normals = "normals" in pc.attributes
    has_colors = "colors" in pc.attributes
    if has_normals:
        header += [f"property float {n}" for n in _GROUPS["normals"]]
    if has_colors:
        header += [f"property uchar {n}" for n in _GROUPS["colors"]]
    header.append("end_header")

    lines = []
    normals = pc.attributes.get("normals")
    colors = pc.attributes.get("colors")
    for i, p in enumerate(pc.points):
        row = [_fmt(v) for v in p]
        if has_normals:
            row += [_fmt(v) for v in normals[i]]
        if has_colors:
            row += [str(int(v)) for v in colors[i]]
        lines.append(" ".join(row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(header + lines) + "\n")


def read_ply(path: str | os.PathLike) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")

    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise ValueError(f"{path}: malformed PLY header")
    for axis in "xyz":
        if axis not in props:
            raise ValueError(f"{path}: missing vertex property {axis!r}")

    rows = text[body_start:body_start + n_vertex]
    if len(rows) != n_vertex:
        raise ValueError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    data = np.array([r.split() for r in rows], dtype=np.float64).reshape(n_vertex, len(props))
    col = {name: data[:, k] for k, name in enumerate(props)}

    known = {"x", "y", "z"}
    attrs = {}
    for name, group in _GROUPS.items():
        if all(g in col for g in group):
            attrs[name] = np.stack([col[g] for g in group], axis=1)
            known.update(group)
    if "colors" in attrs:
        attrs["colors"] = attrs["colors"].astype(np.uint8)
    for name in props:
        if name not in known:
            warnings.warn(f"{path}: skipping unknown vertex property {name!r}", stacklevel=2)

    points = np.stack([col["x"], col["y"], col["z"]], axis=1)
    return PointCloud(points, attrs)
