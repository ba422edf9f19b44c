"""Mesh and point-cloud containers with topology validation.

All meshes handled here are closed oriented 2-manifolds: every undirected
edge is shared by exactly two faces and is traversed once in each
direction. Open boundaries and non-manifold configurations are rejected
at construction.
"""

from collections import Counter

import numpy as np

from .errors import TopologyError

INDEX_DTYPE = np.uint32


def _as_vertex_array(vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError("vertices must be an (n, 3) array")
    if not np.all(np.isfinite(v)):
        raise ValueError("vertices contain non-finite values")
    return v


def _as_face_array(faces, degree: int) -> np.ndarray:
    f = np.asarray(faces)
    if f.ndim != 2 or f.shape[1] != degree:
        raise ValueError(f"faces must be an (m, {degree}) index array")
    if f.size and f.min() < 0:
        raise TopologyError("face index out of range (negative)")
    return f.astype(INDEX_DTYPE)


def _validate_connectivity(faces: np.ndarray, n_vertices: int) -> None:
    """Check index range, repeated corners, closedness and orientation.

    Raises TopologyError naming the first violation found.
    """
    m, deg = faces.shape
    if m == 0:
        raise TopologyError("mesh has no faces")
    if int(faces.max()) >= n_vertices:
        raise TopologyError(
            f"face index {int(faces.max())} out of range for {n_vertices} vertices"
        )
    for fi in range(m):
        corners = faces[fi]
        if len(set(int(c) for c in corners)) != deg:
            raise TopologyError(f"face {fi} repeats a vertex")

    directed = Counter()
    for fi in range(m):
        corners = faces[fi]
        for k in range(deg):
            a, b = int(corners[k]), int(corners[(k + 1) % deg])
            directed[(a, b)] += 1

    for (a, b), cnt in directed.items():
        if cnt > 1:
            raise TopologyError(
                f"edge ({a}, {b}) traversed {cnt} times in the same direction "
                "(inconsistent orientation or non-manifold edge)"
            )
        if directed.get((b, a), 0) == 0:
            raise TopologyError(f"open boundary at edge ({a}, {b})")


def _edge_list(faces: np.ndarray) -> np.ndarray:
    """Undirected edges as a (e, 2) array of sorted pairs, lexicographic order."""
    deg = faces.shape[1]
    pairs = set()
    for corners in faces:
        for k in range(deg):
            a, b = int(corners[k]), int(corners[(k + 1) % deg])
            pairs.add((a, b) if a < b else (b, a))
    return np.array(sorted(pairs), dtype=INDEX_DTYPE).reshape(-1, 2)


class _BaseMesh:
    face_degree = None

    def __init__(self, vertices, faces, validate: bool = True):
        self.vertices = _as_vertex_array(vertices)
        self.faces = _as_face_array(faces, self.face_degree)
        if validate:
            _validate_connectivity(self.faces, self.n_vertices)
        self.degenerate_faces = self._find_degenerate_faces()

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edges(self) -> np.ndarray:
        return _edge_list(self.faces)

    @property
    def n_edges(self) -> int:
        return self.edges().shape[0]

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    def bounding_box_diagonal(self) -> float:
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(span))

    def _find_degenerate_faces(self):
        """Indices of zero-area faces. Accepted but reported for downstream care."""
        v = self.vertices
        f = self.faces
        if self.face_degree == 3:
            area2 = np.linalg.norm(
                np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
            )
        else:
            # split quad along one diagonal; both triangles must vanish
            a1 = np.linalg.norm(
                np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
            )
            a2 = np.linalg.norm(
                np.cross(v[f[:, 2]] - v[f[:, 0]], v[f[:, 3]] - v[f[:, 0]]), axis=1
            )
            area2 = a1 + a2
        scale = max(self.bounding_box_diagonal(), 1.0)
        return [int(i) for i in np.nonzero(area2 < 1e-14 * scale**2)[0]]

    def translated(self, offset):
        return type(self)(self.vertices + np.asarray(offset, dtype=np.float64),
                          self.faces, validate=False)


class TriMesh(_BaseMesh):
    """Closed oriented triangle mesh."""

    face_degree = 3


class QuadControlMesh(_BaseMesh):
    """Closed oriented quad mesh acting as a subdivision control mesh."""

    face_degree = 4


class PointCloud:
    """Oriented or plain point samples of a surface.

    Normals, when given, must be unit length (per-vector tolerance 1e-6).
    """

    def __init__(self, points, normals=None):
        self.points = _as_vertex_array(points)
        if self.points.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if normals is None:
            self.normals = None
        else:
            nrm = _as_vertex_array(normals)
            if nrm.shape != self.points.shape:
                raise ValueError("normals shape does not match points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals are not unit length")
            self.normals = nrm

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def bounding_box_diagonal(self) -> float:
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(span))
