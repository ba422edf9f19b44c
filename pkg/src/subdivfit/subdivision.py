"""Catmull-Clark subdivision steps and their sparse matrices.

One subdivision step maps a control mesh with n vertices, e edges and m
quad faces to a mesh with n + e + m vertices and 4m faces. New vertices
are ordered vertex points (0..n-1, keeping original ids), then edge points
(n..n+e-1, by undirected edge id), then face points. Every step is a
sparse row-stochastic matrix, so positions and scalar coefficients refine
by the same multiplication.
"""

import numpy as np
import scipy.sparse as sp

from .halfedge import HalfedgeTopology, build_halfedge
from .mesh import QuadControlMesh


def subdivision_matrix(topology: HalfedgeTopology) -> sp.csr_matrix:
    """Sparse subdivision step for one Catmull-Clark refinement.

    Rows sum to one (affine invariance). The vertex rule is
    (F + 2R + (valence-3) P) / valence with F the average of incident
    face points and R the average of incident edge midpoints.
    """
    n = topology.n_vertices
    e = topology.n_edges
    m = topology.n_faces
    deg = topology.face_degree
    rows, cols, vals = [], [], []

    def put(r, c, w):
        rows.append(r)
        cols.append(c)
        vals.append(w)

    # vertex points
    for v in range(n):
        k = int(topology.vertex_valence[v])
        ring_faces = topology.faces_around_vertex(v)
        ring_vertices = topology.vertex_ring(v)
        acc = {v: (k - 3.0) / k}
        # F: average of incident face centroids
        for f in ring_faces:
            for c in topology.faces[f]:
                c = int(c)
                acc[c] = acc.get(c, 0.0) + 1.0 / (k * k * deg)
        # 2R: incident edge midpoints
        acc[v] += 2.0 * k * 0.5 / (k * k)
        for w in ring_vertices:
            acc[w] = acc.get(w, 0.0) + 2.0 * 0.5 / (k * k)
        for c, w in acc.items():
            put(v, c, w)

    # edge points: mean of endpoints and the two adjacent face centroids
    for ei in range(e):
        a, b = (int(x) for x in topology.edge_vertices[ei])
        f1, f2 = (int(x) for x in topology.edge_faces[ei])
        acc = {a: 0.25, b: 0.25}
        for f in (f1, f2):
            for c in topology.faces[f]:
                c = int(c)
                acc[c] = acc.get(c, 0.0) + 0.25 / deg
        for c, w in acc.items():
            put(n + ei, c, w)

    # face points: centroids
    for f in range(m):
        for c in topology.faces[f]:
            put(n + e + f, int(c), 1.0 / deg)

    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n + e + m, n))
    mat.sum_duplicates()
    return mat


def _subdivided_faces(topology: HalfedgeTopology) -> np.ndarray:
    """Face table after one step: quadrant i of face f lands at row 4f+i.

    Quadrant i is (corner_i, edge_point(i, i+1), face_point, edge_point(i-1, i)),
    which preserves orientation.
    """
    n = topology.n_vertices
    e = topology.n_edges
    deg = topology.face_degree
    faces = topology.faces
    out = np.empty((topology.n_faces * deg, 4), dtype=np.int64)
    for f in range(topology.n_faces):
        fp = n + e + f
        for i in range(deg):
            h_next = f * deg + i
            h_prev = f * deg + (i - 1) % deg
            ep_next = n + int(topology.edge_of_halfedge[h_next])
            ep_prev = n + int(topology.edge_of_halfedge[h_prev])
            out[f * deg + i] = (int(faces[f, i]), ep_next, fp, ep_prev)
    return out


def cc_subdivide(mesh: QuadControlMesh, topology: HalfedgeTopology = None):
    """One Catmull-Clark step. Returns (refined mesh, step matrix)."""
    if topology is None:
        topology = build_halfedge(mesh)
    step = subdivision_matrix(topology)
    vertices = step @ mesh.vertices
    faces = _subdivided_faces(topology)
    return QuadControlMesh(vertices, faces, validate=False), step


def refine_for_visualization(mesh: QuadControlMesh, coefficients, k: int):
    """Refine a mesh and a per-vertex coefficient vector k times.

    The same subdivision weights apply to positions and to scalar
    coefficients, so the refined field is A_k @ coefficients.
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape[0] != mesh.n_vertices:
        raise ValueError("coefficient length does not match vertex count")
    current = mesh
    field = coefficients
    for _ in range(k):
        topo = build_halfedge(current)
        step = subdivision_matrix(topo)
        faces = _subdivided_faces(topo)
        current = QuadControlMesh(step @ current.vertices, faces, validate=False)
        field = step @ field
    return current, field


def composed_subdivision_matrix(mesh: QuadControlMesh, k: int) -> sp.csr_matrix:
    """A_k = hat(A)_k ... hat(A)_1 mapping control vertices to level-k vertices."""
    mat = sp.identity(mesh.n_vertices, format="csr")
    current = mesh
    for _ in range(k):
        current, step = cc_subdivide(current)
        mat = step @ mat
    return mat


def limit_stencil_matrix(topology: HalfedgeTopology) -> sp.csr_matrix:
    """Limit positions of all control vertices as a sparse row-stochastic map.

    The limit point of a vertex with valence k is
    (k^2 v + 4 sum(neighbors) + sum(face diagonals)) / (k (k + 5)),
    which the subdivision step leaves invariant.
    """
    n = topology.n_vertices
    deg = topology.face_degree
    rows, cols, vals = [], [], []
    for v in range(n):
        k = int(topology.vertex_valence[v])
        denom = k * (k + 5.0)
        acc = {v: k * k / denom}
        for w in topology.vertex_ring(v):
            acc[w] = acc.get(w, 0.0) + 4.0 / denom
        for f in topology.faces_around_vertex(v):
            corners = [int(c) for c in topology.faces[f]]
            d = corners[(corners.index(v) + 2) % deg]
            acc[d] = acc.get(d, 0.0) + 1.0 / denom
        for c, w in acc.items():
            rows.append(v)
            cols.append(c)
            vals.append(w)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    return mat


def descend_param(face: int, u: float, v: float):
    """Map a parameter on face f to the child face and parameter after one step.

    Children follow the quadrant layout of cc_subdivide: quadrant i of
    face f is child 4f+i with its corner_i image at local (0, 0).
    """
    if u < 0.5 and v < 0.5:
        return 4 * face + 0, 2.0 * u, 2.0 * v
    if u >= 0.5 and v < 0.5:
        return 4 * face + 1, 2.0 * v, 2.0 - 2.0 * u
    if u >= 0.5 and v >= 0.5:
        return 4 * face + 2, 2.0 - 2.0 * u, 2.0 - 2.0 * v
    return 4 * face + 3, 2.0 - 2.0 * v, 2.0 * u
