"""Point cloud files: whitespace ``.xyzn`` text and a PLY subset.

PLY support covers ``ascii 1.0`` and ``binary_little_endian 1.0`` with a
``vertex`` element holding float ``x y z`` and optional ``nx ny nz``,
``red green blue`` and an integer ``label``. Other elements after the vertex
element are ignored. Integer colors are mapped from 0-255 to [0, 1];
normals are renormalized on load.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from ..geometry import PointCloud
from .atomic import atomic_write_bytes


class PointCloudFormatError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_pointcloud(path) -> PointCloud:
    """Read a ``.xyzn`` (or ``.xyz``/``.txt``) or ``.ply`` file."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyzn(path)


def _finalize(coords, normals=None, colors=None, labels=None) -> PointCloud:
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) == 0:
        raise PointCloudFormatError("file holds no points")
    if not np.all(np.isfinite(coords)):
        raise PointCloudFormatError("non-finite coordinates")
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        if not np.all(np.isfinite(normals)) or np.any(norm == 0):
            raise PointCloudFormatError("normals must be finite and non-zero")
        normals = normals / norm
    return PointCloud(coords, normals=normals, colors=colors, labels=labels)


# -- xyzn ----------------------------------------------------------------------

def read_xyzn(path) -> PointCloud:
    """``x y z [nx ny nz] [label]`` per line; ``#`` comments and blank lines skipped."""
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if width is None:
            width = len(parts)
            if width not in (3, 4, 6, 7):
                raise PointCloudFormatError(f"line {lineno}: expected 3, 4, 6 or 7 columns, got {width}")
        elif len(parts) != width:
            raise PointCloudFormatError(f"line {lineno}: {len(parts)} columns, earlier lines have {width}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise PointCloudFormatError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise PointCloudFormatError("file holds no points")
    a = np.array(rows)
    normals = a[:, 3:6] if width >= 6 else None
    labels = None
    if width in (4, 7):
        lab = a[:, -1]
        if np.any(lab != np.round(lab)):
            raise PointCloudFormatError("label column must hold integers")
        labels = lab.astype(np.int64)
    return _finalize(a[:, :3], normals, None, labels)


def write_xyzn(path, cloud: PointCloud) -> None:
    cols = [cloud.coords]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    out = io.StringIO()
    for i in range(len(cloud)):
        vals = [repr(float(v)) for c in cols for v in c[i]]
        if cloud.labels is not None:
            vals.append(str(int(cloud.labels[i])))
        out.write(" ".join(vals) + "\n")
    atomic_write_bytes(path, out.getvalue().encode())


# -- PLY -------------------------------------------------------------------------

def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PointCloudFormatError("missing 'ply' magic line")
    fmt = None
    elements: list[tuple[str, int, list]] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PointCloudFormatError("header ended without end_header")
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) != 3 or words[2] != "1.0" or words[1] not in ("ascii", "binary_little_endian"):
                raise PointCloudFormatError(f"unsupported format line: {' '.join(words)}")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PointCloudFormatError(f"malformed element line: {' '.join(words)}")
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise PointCloudFormatError("property before any element")
            if words[1] == "list":
                elements[-1][2].append(("list", words[-1]))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1][2].append((_PLY_TYPES[words[1]], words[2]))
            else:
                raise PointCloudFormatError(f"malformed property line: {' '.join(words)}")
        else:
            raise PointCloudFormatError(f"unexpected header line: {' '.join(words)}")
    if fmt is None:
        raise PointCloudFormatError("header has no format line")
    if not elements or elements[0][0] != "vertex":
        raise PointCloudFormatError("the first element must be 'vertex'")
    return fmt, elements[0]


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, (_, count, props) = _parse_header(fh)
        if any(kind == "list" for kind, _ in props):
            raise PointCloudFormatError("list properties on vertices are not supported")
        names = [name for _, name in props]
        if len(set(names)) != len(names):
            raise PointCloudFormatError("duplicate vertex property")
        dtype = np.dtype([(name, "<" + kind) for kind, name in props])
        if fmt == "binary_little_endian":
            buf = fh.read(dtype.itemsize * count)
            if len(buf) != dtype.itemsize * count:
                raise PointCloudFormatError("truncated binary vertex data")
            data = np.frombuffer(buf, dtype=dtype, count=count)
        else:
            data = np.empty(count, dtype=dtype)
            for i in range(count):
                words = fh.readline().split()
                if len(words) != len(props):
                    raise PointCloudFormatError(f"vertex {i}: expected {len(props)} values, got {len(words)}")
                try:
                    data[i] = tuple(
                        int(w) if np.dtype(kind).kind in "iu" else float(w)
                        for w, (kind, _) in zip(words, props)
                    )
                except ValueError as exc:
                    raise PointCloudFormatError(f"vertex {i}: {exc}") from exc
    for axis in "xyz":
        if axis not in names:
            raise PointCloudFormatError(f"vertex element lacks property {axis}")
        if data.dtype[axis].kind != "f":
            raise PointCloudFormatError(f"property {axis} must be float")
    coords = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64)
        if data.dtype["red"].kind in "iu":
            colors = colors / 255.0
    labels = None
    if "label" in names:
        if data.dtype["label"].kind not in "iu":
            raise PointCloudFormatError("label property must be an integer type")
        labels = data["label"].astype(np.int64)
    return _finalize(coords, normals, colors, labels)


def ply_bytes(cloud: PointCloud, binary: bool = True) -> bytes:
    """Serialize ``cloud``; coordinates and normals are written as doubles."""
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    columns = [cloud.coords[:, 0], cloud.coords[:, 1], cloud.coords[:, 2]]
    if cloud.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        columns += [cloud.normals[:, i] for i in range(3)]
    if cloud.colors is not None:
        rgb = np.clip(np.round(np.asarray(cloud.colors) * 255.0), 0, 255).astype(np.uint8)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        columns += [rgb[:, i] for i in range(3)]
    if cloud.labels is not None:
        fields.append(("label", "i4"))
        columns.append(cloud.labels.astype(np.int32))
    names = {"f8": "double", "u1": "uchar", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {names[k]} {n}" for n, k in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    rec = np.empty(len(cloud), dtype=[(n, "<" + k) for n, k in fields])
    for (n, _), col in zip(fields, columns):
        rec[n] = col
    if binary:
        return head + rec.tobytes()
    lines = []
    for row in rec:
        lines.append(" ".join(repr(float(v)) if isinstance(v, np.floating) else str(int(v)) for v in row))
    return head + ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    atomic_write_bytes(path, ply_bytes(cloud, binary))
