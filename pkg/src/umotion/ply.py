"""PLY point clouds (ascii and binary little-endian, vertex element only)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


@dataclass
class PlyCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyError("missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("header ends before end_header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if len(parts) < 2:
                raise PlyError("malformed format line")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"malformed element line: {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if len(parts) >= 2 and parts[1] == "list":
                if len(parts) != 5:
                    raise PlyError("malformed list property")
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                if len(parts) != 3 or parts[1] not in _TYPES:
                    raise PlyError(f"unsupported property line: {line!r}")
                elements[-1][2].append((parts[2], _TYPES[parts[1]]))
        else:
            raise PlyError(f"unexpected header line: {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> PlyCloud:
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    vertex = None
    skip_lines = 0
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if fmt != "ascii" and count:
            raise PlyError(f"binary element {name!r} before vertex is not supported")
        skip_lines += count
    if vertex is None:
        raise PlyError("no vertex element")
    count, props = vertex
    if any(p[1] == "list" for p in props):
        raise PlyError("list properties on vertices are not supported")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    known = {"x", "y", "z", "red", "green", "blue"}
    for n in names:
        if n not in known:
            log.warning("skipping unknown vertex property %r", n)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    if fmt == "ascii":
        lines = body.decode("ascii", "replace").splitlines()[skip_lines:]
        lines = [ln for ln in lines[:count] if ln.strip()]
        if len(lines) < count:
            raise PlyError(f"header declares {count} vertices, file has {len(lines)}")
        rows = [ln.split() for ln in lines]
        if any(len(r) < len(props) for r in rows):
            raise PlyError("vertex line with too few values")
        data = np.zeros(count, dtype=dtype)
        cols = list(zip(*rows)) if rows else [[] for _ in props]
        for i, (n, t) in enumerate(props):
            data[n] = np.asarray(cols[i], dtype=np.float64 if t[0] == "f" else np.int64).astype(t)
    else:
        need = dtype.itemsize * count
        if len(body) < need:
            raise PlyError(f"header declares {count} vertices, file holds {len(body) // max(dtype.itemsize, 1)}")
        data = np.frombuffer(body, dtype=dtype, count=count)
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.int64)
    return PlyCloud(pts, colors)


def write_ply(cloud: PlyCloud, path, binary=False) -> None:
    pts = np.asarray(cloud.points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PlyError("points must be an (N, 3) array")
    kind = pts.dtype.kind
    ptype = "i4" if kind in "iu" else ("f4" if pts.dtype == np.float32 else "f8")
    props = [("x", ptype), ("y", ptype), ("z", ptype)]
    if cloud.colors is not None:
        col = np.asarray(cloud.colors)
        if col.shape != pts.shape or col.min(initial=0) < 0 or col.max(initial=0) > 255:
            raise PlyError("colors must be an (N, 3) array of 8-bit values")
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    data = np.zeros(len(pts), dtype=dtype)
    for i, axis in enumerate("xyz"):
        data[axis] = pts[:, i]
    if cloud.colors is not None:
        for i, c in enumerate(("red", "green", "blue")):
            data[c] = cloud.colors[:, i]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(pts)}"]
    header += [f"property {_NAMES[t]} {n}" for n, t in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            fmts = ["%d" if t[0] in "iu" else "%.9g" for _, t in props]
            lines = (" ".join(f % v for f, v in zip(fmts, row)) for row in data.tolist())
            fh.write(("\n".join(lines) + ("\n" if len(pts) else "")).encode("ascii"))
