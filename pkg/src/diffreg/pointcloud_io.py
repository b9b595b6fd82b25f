"""ASCII point cloud serialization: PLY and XYZ.

PLY files carry x, y, z plus optional descriptor columns named d0..d{k-1}.
XYZ files are whitespace-delimited rows, descriptors as trailing columns.
Floats are written with repr so read(write(cloud)) is bit exact.
"""

import numpy as np

from .errors import IOFormatError
from .geometry import PointCloud

_FLOAT_TYPES = {"float", "double", "float32", "float64"}


def _fmt(v):
    return repr(float(v))


def write_ply(path, cloud):
    pts = cloud.points
    desc = cloud.descriptors
    k = 0 if desc is None else desc.shape[1]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
    ]
    lines += [f"property double d{i}" for i in range(k)]
    lines.append("end_header")
    rows = pts if desc is None else np.hstack([pts, desc])
    lines += [" ".join(_fmt(v) for v in row) for row in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path):
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise IOFormatError(f"{path}: not a PLY file")
    n_vertex = None
    prop_names = []
    body_start = None
    in_vertex_element = False
    for i, raw in enumerate(lines[1:], start=1):
        parts = raw.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise IOFormatError(f"{path}: only ascii PLY is supported")
        elif parts[0] == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex_element:
            if len(parts) != 3 or parts[1] not in _FLOAT_TYPES:
                raise IOFormatError(f"{path}: unsupported property line {raw!r}")
            prop_names.append(parts[2])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise IOFormatError(f"{path}: incomplete PLY header")
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise IOFormatError(f"{path}: vertex element lacks property {axis}")
    body = lines[body_start : body_start + n_vertex]
    if len(body) < n_vertex:
        raise IOFormatError(f"{path}: expected {n_vertex} vertex rows")
    try:
        data = np.array([[float(v) for v in row.split()] for row in body])
    except ValueError as exc:
        raise IOFormatError(f"{path}: bad vertex row ({exc})") from exc
    if data.shape != (n_vertex, len(prop_names)):
        raise IOFormatError(f"{path}: vertex rows do not match header properties")
    cols = {name: data[:, i] for i, name in enumerate(prop_names)}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    desc_names = [n for n in prop_names if n not in ("x", "y", "z")]
    desc = np.stack([cols[n] for n in desc_names], axis=1) if desc_names else None
    return PointCloud(pts, desc)


def write_xyz(path, cloud):
    rows = cloud.points if cloud.descriptors is None else np.hstack(
        [cloud.points, cloud.descriptors]
    )
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_xyz(path):
    rows = []
    width = None
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if width is None:
                width = len(parts)
                if width < 3:
                    raise IOFormatError(f"{path}:{ln}: need at least x y z")
            elif len(parts) != width:
                raise IOFormatError(f"{path}:{ln}: ragged row")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise IOFormatError(f"{path}:{ln}: bad number ({exc})") from exc
    if not rows:
        raise IOFormatError(f"{path}: empty cloud")
    data = np.array(rows)
    desc = data[:, 3:] if data.shape[1] > 3 else None
    return PointCloud(data[:, :3], desc)
