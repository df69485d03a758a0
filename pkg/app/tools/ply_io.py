"""
PLY Tool - ASCII PLY point clouds (vertex element with x, y, z only)
"""

from typing import List

import numpy as np

from tools.errors import PlyFormatError

_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def write_ply(path: str, points) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", newline="\n") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for p in pts:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_ply(path: str) -> np.ndarray:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError(f"{path}: missing 'ply' magic line")

    count = None
    props: List[str] = []
    body_start = None
    for k, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PlyFormatError(f"{path}: only ASCII PLY is supported, got '{raw.strip()}'")
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise PlyFormatError(f"{path}: unsupported element '{raw.strip()}' (only 'vertex' allowed)")
            if count is not None:
                raise PlyFormatError(f"{path}: duplicate vertex element")
            count = int(tok[2])
        elif tok[0] == "property":
            if count is None:
                raise PlyFormatError(f"{path}: property before element declaration")
            if len(tok) != 3 or tok[1] not in _FLOAT_TYPES:
                raise PlyFormatError(f"{path}: unsupported property '{raw.strip()}'")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = k + 1
            break
        else:
            raise PlyFormatError(f"{path}: unexpected header line '{raw.strip()}'")

    if body_start is None or count is None:
        raise PlyFormatError(f"{path}: incomplete header")
    if props != ["x", "y", "z"]:
        raise PlyFormatError(f"{path}: vertex properties must be exactly x, y, z, got {props}")

    rows = [l for l in lines[body_start:] if l.strip()]
    if len(rows) != count:
        raise PlyFormatError(f"{path}: header declares {count} vertices, body has {len(rows)}")
    try:
        pts = np.array([[float(v) for v in r.split()] for r in rows], dtype=float).reshape(-1, 3)
    except ValueError as e:
        raise PlyFormatError(f"{path}: malformed vertex row: {e}")
    if pts.shape[0] != count:
        raise PlyFormatError(f"{path}: each vertex row needs 3 values")
    return pts
