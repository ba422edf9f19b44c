"""OBJ and binary PLY readers/writers for meshes, fields and point clouds.

OBJ carries geometry only (``v x y z`` / ``f i j k [l]``, 1-based); scalar
vertex fields ride in a CSV sidecar ``<stem>.fields.csv`` with header
``vertex_index,<field>[,<field>...]``. PLY is binary little-endian 1.0 with
double-precision vertex properties, so positions and fields round-trip
bit-exact.
"""

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import MeshFormatError, TopologyError
from .mesh import PointCloud, QuadControlMesh, TriMesh

_PLY_DTYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt.lower()
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("obj", "ply"):
        return suffix
    raise MeshFormatError(f"cannot infer mesh format from {path!r}")


def _mesh_from_arrays(vertices, faces_list):
    if not faces_list:
        raise MeshFormatError("file contains no faces")
    degrees = {len(f) for f in faces_list}
    if degrees == {3}:
        cls = TriMesh
    elif degrees == {4}:
        cls = QuadControlMesh
    else:
        raise MeshFormatError(
            f"mixed or unsupported face degrees {sorted(degrees)}; "
            "faces must be all triangles or all quads"
        )
    return cls(np.asarray(vertices, dtype=np.float64), np.asarray(faces_list))


def _parse_obj(path):
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex line")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: bad index {tok!r}") from exc
                    if i < 1:
                        raise MeshFormatError(f"{path}:{lineno}: OBJ indices are 1-based")
                    idx.append(i - 1)
                if len(idx) not in (3, 4):
                    raise MeshFormatError(
                        f"{path}:{lineno}: face with {len(idx)} vertices"
                    )
                faces.append(idx)
            # other tags (vn, vt, o, g, s, usemtl, ...) are ignored
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices found")
    return vertices, faces


def _sidecar_path(path):
    p = Path(path)
    return p.with_suffix(p.suffix + ".fields.csv") if p.suffix != ".obj" \
        else p.with_name(p.stem + ".fields.csv")


def _read_sidecar(path, n_vertices):
    fields = {}
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        return fields
    with open(sidecar, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "vertex_index":
            raise MeshFormatError(f"{sidecar}: first column must be vertex_index")
        names = header[1:]
        data = np.full((n_vertices, len(names)), np.nan)
        for row in reader:
            i = int(row[0])
            data[i] = [float(x) for x in row[1:]]
    for k, name in enumerate(names):
        fields[name] = data[:, k].copy()
    return fields


def _write_sidecar(path, fields):
    sidecar = _sidecar_path(path)
    names = list(fields)
    n = len(next(iter(fields.values())))
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex_index"] + names)
        for i in range(n):
            writer.writerow([i] + [repr(float(fields[name][i])) for name in names])


class _PlyHeader:
    def __init__(self):
        self.elements = []  # (name, count, [(prop_name, dtype) or ("list", count_dt, item_dt, name)])


def _parse_ply_header(fh, path):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise MeshFormatError(f"{path}: not a PLY file")
    header = _PlyHeader()
    fmt_seen = False
    current = None
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError(f"{path}: truncated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] != "binary_little_endian":
                raise MeshFormatError(f"{path}: only binary_little_endian PLY supported")
            fmt_seen = True
        elif tokens[0] == "element":
            current = (tokens[1], int(tokens[2]), [])
            header.elements.append(current)
        elif tokens[0] == "property":
            if current is None:
                raise MeshFormatError(f"{path}: property before element")
            if tokens[1] == "list":
                current[2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                current[2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
        else:
            raise MeshFormatError(f"{path}: unsupported header line {tokens[0]!r}")
    if not fmt_seen:
        raise MeshFormatError(f"{path}: missing format line")
    return header


def _read_ply(path):
    """Returns (vertex_props: dict name->array, faces: list of index lists)."""
    with open(path, "rb") as fh:
        header = _parse_ply_header(fh, path)
        vertex_props = {}
        faces = []
        for name, count, props in header.elements:
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise MeshFormatError(f"{path}: list property on vertices")
                dt = np.dtype([(pname, _PLY_DTYPES[ptype][0]) for pname, ptype in props])
                raw = fh.read(dt.itemsize * count)
                if len(raw) != dt.itemsize * count:
                    raise MeshFormatError(f"{path}: truncated vertex data")
                arr = np.frombuffer(raw, dtype=dt)
                for pname, _ in props:
                    vertex_props[pname] = arr[pname].astype(np.float64)
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise MeshFormatError(f"{path}: face element must be a single list")
                _, cdt, idt, _ = props[0]
                cdtype, csize = _PLY_DTYPES[cdt]
                idtype, isize = _PLY_DTYPES[idt]
                for _ in range(count):
                    raw = fh.read(csize)
                    k = int(np.frombuffer(raw, dtype=cdtype)[0])
                    raw = fh.read(isize * k)
                    faces.append(list(np.frombuffer(raw, dtype=idtype).astype(np.int64)))
            else:
                raise MeshFormatError(f"{path}: unsupported element {name!r}")
    return vertex_props, faces


def _write_ply(path, vertices, faces, fields=None, normals=None):
    fields = fields or {}
    with open(path, "wb") as fh:
        fh.write(b"ply\n")
        fh.write(b"format binary_little_endian 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n".encode())
        names = ["x", "y", "z"]
        cols = [vertices[:, 0], vertices[:, 1], vertices[:, 2]]
        if normals is not None:
            names += ["nx", "ny", "nz"]
            cols += [normals[:, 0], normals[:, 1], normals[:, 2]]
        for fname, values in fields.items():
            names.append(fname)
            cols.append(np.asarray(values, dtype=np.float64))
        for nm in names:
            fh.write(f"property double {nm}\n".encode())
        if faces is not None:
            fh.write(f"element face {len(faces)}\n".encode())
            fh.write(b"property list uchar uint vertex_indices\n")
        fh.write(b"end_header\n")
        block = np.column_stack(cols).astype("<f8")
        fh.write(block.tobytes())
        if faces is not None:
            deg = faces.shape[1]
            for corners in faces:
                fh.write(struct.pack("<B", deg))
                fh.write(np.asarray(corners, dtype="<u4").tobytes())


def load_mesh(path, fmt=None):
    """Load a closed triangle or quad mesh from OBJ or binary PLY.

    The face table decides the return type: all-triangle files become
    TriMesh, all-quad files QuadControlMesh; mixed degrees are rejected.
    """
    mesh, _ = load_mesh_with_fields(path, fmt)
    return mesh


def load_mesh_with_fields(path, fmt=None):
    """Load a mesh plus any per-vertex scalar fields stored with it."""
    fmt = _infer_format(path, fmt)
    if fmt == "obj":
        vertices, faces = _parse_obj(path)
        mesh = _mesh_from_arrays(vertices, faces)
        fields = _read_sidecar(path, mesh.n_vertices)
        return mesh, fields
    if fmt == "ply":
        props, faces = _read_ply(path)
        for needed in ("x", "y", "z"):
            if needed not in props:
                raise MeshFormatError(f"{path}: vertex property {needed!r} missing")
        vertices = np.column_stack([props["x"], props["y"], props["z"]])
        mesh = _mesh_from_arrays(vertices, faces)
        fields = {k: v for k, v in props.items() if k not in ("x", "y", "z")}
        return mesh, fields
    raise MeshFormatError(f"unsupported mesh format {fmt!r}")


def save_mesh(mesh, path, fmt=None):
    save_mesh_with_fields(mesh, {}, path, fmt)


def save_mesh_with_fields(mesh, fields, path, fmt=None, levelline=None):
    """Write a mesh with named per-vertex scalar fields.

    PLY stores fields as extra double vertex properties; OBJ writes a CSV
    sidecar. With ``levelline`` set to an angular frequency w, every field
    g additionally exports a ``cos_w<name>`` column holding cos(w * g),
    which renders level lines of g in external viewers.
    """
    fields = dict(fields or {})
    for name, values in fields.items():
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (mesh.n_vertices,):
            raise ValueError(
                f"field {name!r} has length {values.shape}, expected {mesh.n_vertices}"
            )
        fields[name] = values
    if levelline is not None:
        for name in list(fields):
            fields[f"cos_{name}"] = np.cos(levelline * fields[name])
    fmt = _infer_format(path, fmt)
    if fmt == "ply":
        _write_ply(path, mesh.vertices, mesh.faces, fields=fields)
    elif fmt == "obj":
        with open(path, "w") as fh:
            fh.write("# subdivfit mesh\n")
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            for corners in mesh.faces:
                fh.write("f " + " ".join(str(int(c) + 1) for c in corners) + "\n")
        if fields:
            _write_sidecar(path, fields)
    else:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")


def load_point_cloud(path):
    """Load a PLY point cloud; picks up unit normals from nx/ny/nz if present."""
    props, faces = _read_ply(path)
    if faces:
        raise MeshFormatError(f"{path}: expected a point cloud, found faces")
    for needed in ("x", "y", "z"):
        if needed not in props:
            raise MeshFormatError(f"{path}: vertex property {needed!r} missing")
    points = np.column_stack([props["x"], props["y"], props["z"]])
    normals = None
    if all(k in props for k in ("nx", "ny", "nz")):
        normals = np.column_stack([props["nx"], props["ny"], props["nz"]])
    return PointCloud(points, normals)


def save_point_cloud(cloud, path):
    _write_ply(path, cloud.points, None, normals=cloud.normals)
