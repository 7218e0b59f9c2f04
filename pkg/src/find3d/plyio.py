"""PLY point-cloud IO, ascii and binary little-endian.

Writes vertices with properties x,y,z,nx,ny,nz (float32) and red,green,blue
(uchar). The reader accepts any property layout, fills missing normals with
zeros and missing colors with mid-gray, and maps 8-bit colors to [0,1].
"""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud

_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(f):
    if f.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype)])
    while True:
        line = f.readline()
        if not line:
            raise ValueError("unexpected end of PLY header")
        parts = line.decode("ascii", "replace").strip().split()
        if not parts:
            continue
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ValueError(f"unsupported PLY format: {fmt}")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ValueError("property before element in PLY header")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], ("list", _DTYPES[parts[2]], _DTYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[2], _DTYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt is None:
        raise ValueError("PLY header missing format line")
    return fmt, elements


def read_ply(path) -> PointCloud:
    """Read a PLY file into a PointCloud."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise ValueError("PLY file has no vertex element")
        if elements[0][0] != "vertex":
            raise ValueError("only vertex-first PLY layouts are supported")
        _, count, props = vertex
        if any(isinstance(d, tuple) for _, d in props):
            raise ValueError("list properties on vertices are not supported")
        rec = np.dtype([(name, "<" + d) for name, d in props])
        if fmt == "binary_little_endian":
            data = np.fromfile(f, dtype=rec, count=count)
        else:
            body = np.loadtxt(f, max_rows=count, ndmin=2)
            if body.shape[0] != count or body.shape[1] != len(props):
                raise ValueError("truncated or malformed ascii PLY body")
            data = np.empty(count, dtype=rec)
            for j, (name, _) in enumerate(props):
                data[name] = body[:, j]
        if len(data) != count:
            raise ValueError("truncated PLY body")

    names = set(rec.names)
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"PLY vertex element lacks property {axis}")
    positions = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        np.divide(normals, lens, out=normals, where=lens > 1e-12)
    else:
        normals = np.zeros_like(positions)
    if {"red", "green", "blue"} <= names:
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64)
        if rec["red"].kind == "u" or rec["red"].kind == "i":
            colors /= 255.0
        colors = np.clip(colors, 0.0, 1.0)
    else:
        colors = np.full_like(positions, 0.5)
    return PointCloud(positions, normals, colors)


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    """Write a PointCloud; colors are stored as 8-bit."""
    n = len(cloud)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    colors_u8 = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.dtype(
                [(k, "<f4") for k in ("x", "y", "z", "nx", "ny", "nz")]
                + [(k, "u1") for k in ("red", "green", "blue")]
            )
            out = np.empty(n, dtype=rec)
            for j, k in enumerate(("x", "y", "z")):
                out[k] = cloud.positions[:, j].astype(np.float32)
            for j, k in enumerate(("nx", "ny", "nz")):
                out[k] = cloud.normals[:, j].astype(np.float32)
            for j, k in enumerate(("red", "green", "blue")):
                out[k] = colors_u8[:, j]
            out.tofile(f)
        else:
            pos = cloud.positions.astype(np.float32)
            nrm = cloud.normals.astype(np.float32)
            for i in range(n):
                vals = [repr(float(v)) for v in (*pos[i], *nrm[i])]
                vals += [str(int(v)) for v in colors_u8[i]]
                f.write((" ".join(vals) + "\n").encode("ascii"))
