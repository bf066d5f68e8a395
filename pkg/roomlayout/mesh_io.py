"""
Mesh I/O - Labeled layout mesh export and read-back.

PLY is binary little-endian:
    vertex: float x, y, z (float64 as 'double')
    face:   list uchar int vertex_indices, int element_id, int class_id
OBJ is a convenience export with one group per element.
"""

from typing import List, Tuple

import numpy as np

from roomlayout.annotations import StructuralClass
from roomlayout.exceptions import MeshFormatError
from roomlayout.extent import LayoutMesh

_FACE_DTYPE = np.dtype([
    ("n", "u1"),
    ("v", "<i4", (3,)),
    ("element_id", "<i4"),
    ("class_id", "<i4"),
])
_VERTEX_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8")])


def write_ply(mesh: LayoutMesh, path: str) -> None:
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "property int element_id",
        "property int class_id",
        "end_header",
    ]) + "\n"

    verts = np.empty(len(mesh.vertices), dtype=_VERTEX_DTYPE)
    if len(mesh.vertices):
        verts["x"], verts["y"], verts["z"] = mesh.vertices.T
    faces = np.empty(len(mesh.triangles), dtype=_FACE_DTYPE)
    faces["n"] = 3
    faces["v"] = mesh.triangles
    faces["element_id"] = mesh.element_ids
    faces["class_id"] = mesh.class_ids

    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
        f.write(faces.tobytes())


def _parse_header(lines: List[str]) -> Tuple[int, int]:
    if not lines or lines[0] != "ply":
        raise MeshFormatError("missing 'ply' magic")
    if "format binary_little_endian 1.0" not in lines:
        raise MeshFormatError("only binary_little_endian PLY is supported")
    n_vert = n_face = None
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vert is None or n_face is None:
        raise MeshFormatError("vertex/face element declarations missing")
    return n_vert, n_face


def read_ply(path: str) -> LayoutMesh:
    """Read a PLY written by write_ply."""
    with open(path, "rb") as f:
        data = f.read()
    marker = b"end_header\n"
    end = data.find(marker)
    if end < 0:
        raise MeshFormatError(f"{path}: no end_header")
    header = data[:end].decode("ascii").splitlines()
    n_vert, n_face = _parse_header(header)
    body = data[end + len(marker):]

    v_bytes = n_vert * _VERTEX_DTYPE.itemsize
    f_bytes = n_face * _FACE_DTYPE.itemsize
    if len(body) != v_bytes + f_bytes:
        raise MeshFormatError(f"{path}: body size {len(body)} != expected {v_bytes + f_bytes}")
    verts = np.frombuffer(body[:v_bytes], dtype=_VERTEX_DTYPE)
    faces = np.frombuffer(body[v_bytes:], dtype=_FACE_DTYPE)
    if n_face and not np.all(faces["n"] == 3):
        raise MeshFormatError(f"{path}: non-triangle face")

    return LayoutMesh(
        vertices=np.column_stack([verts["x"], verts["y"], verts["z"]]).astype(np.float64) if n_vert else np.zeros((0, 3)),
        triangles=faces["v"].astype(np.int64).reshape(-1, 3),
        element_ids=faces["element_id"].astype(np.int64),
        class_ids=faces["class_id"].astype(np.int64),
    )


def write_obj(mesh: LayoutMesh, path: str) -> None:
    lines = ["# room layout mesh", f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces"]
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9f} {y:.9f} {z:.9f}")
    for gid in np.unique(mesh.element_ids):
        rows = np.flatnonzero(mesh.element_ids == gid)
        class_id = int(mesh.class_ids[rows[0]])
        name = StructuralClass.from_id(class_id).value if class_id >= 0 else "Unknown"
        lines.append(f"g element_{int(gid)}_{name}")
        for a, b, c in mesh.triangles[rows] + 1:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
