"""Triangle-to-quad conversion by pairing triangles across shared edges.

Removing an interior edge merges its two triangles into a quad. The cost
of removing edge e is
    c(e) = 1/4 sum_i d(alpha_i(e), pi/2)^2 + tan(eta(e))^2
over the four corner angles of the resulting quad, with eta(e) the angle
between the two triangle normals; edges with |eta| >= pi/2 cost infinity.
Pairs are chosen greedily by ascending finite cost. If any triangle stays
unmatched, one conforming centroid/midpoint split of every face turns the
mixed mesh into an all-quad mesh.
"""

from dataclasses import dataclass

import numpy as np

from .halfedge import HalfedgeTopology, build_halfedge
from .mesh import QuadControlMesh, TriMesh


@dataclass
class EdgePairingCost:
    edge: int
    alphas: np.ndarray        # radians, the four corner angles of the merged quad
    eta: float                # radians, angle between the two triangle normals
    cost: float


@dataclass
class TriToQuadResult:
    mesh: QuadControlMesh
    total_cost: float
    matched_pairs: int
    unmatched_triangles: int
    split_applied: bool


def _angle(p, q, r):
    """Angle at p between directions toward q and r."""
    u = q - p
    w = r - p
    c = float(u @ w) / max(np.linalg.norm(u) * np.linalg.norm(w), 1e-300)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _merged_quad(topology: HalfedgeTopology, edge: int):
    """Vertices (a, d, b, c) of the quad left by removing edge (a, b)."""
    h1, h2 = (int(x) for x in topology.edge_halfedges[edge])
    a, b = int(topology.origin[h1]), int(topology.dest[h1])
    c = int(topology.dest[topology.next(h1)])
    d = int(topology.dest[topology.next(h2)])
    return a, b, c, d


def pairing_cost(mesh: TriMesh, topology: HalfedgeTopology, edge: int) -> EdgePairingCost:
    """Cost of removing one interior edge of a closed triangle mesh."""
    a, b, c, d = _merged_quad(topology, edge)
    v = mesh.vertices
    n1 = np.cross(v[b] - v[a], v[c] - v[a])
    n2 = np.cross(v[a] - v[b], v[d] - v[b])
    n1 = n1 / max(np.linalg.norm(n1), 1e-300)
    n2 = n2 / max(np.linalg.norm(n2), 1e-300)
    eta = float(np.arccos(np.clip(float(n1 @ n2), -1.0, 1.0)))
    alphas = np.array([
        _angle(v[a], v[d], v[c]),
        _angle(v[d], v[a], v[b]),
        _angle(v[b], v[d], v[c]),
        _angle(v[c], v[b], v[a]),
    ])
    if eta < 0.5 * np.pi:
        cost = 0.25 * float(np.sum((alphas - 0.5 * np.pi) ** 2)) + float(np.tan(eta)) ** 2
    else:
        cost = np.inf
    return EdgePairingCost(edge=edge, alphas=alphas, eta=eta, cost=cost)


def _conforming_split(vertices, quads, triangles):
    """Split quads into 4 and triangles into 3 quads via centroids and shared
    edge midpoints; the result is a conforming closed all-quad mesh."""
    verts = [v for v in vertices]
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            verts.append(0.5 * (vertices[a] + vertices[b]))
            midpoint[key] = len(verts) - 1
        return midpoint[key]

    out = []
    for face in quads + triangles:
        k = len(face)
        verts.append(np.mean([vertices[v] for v in face], axis=0))
        g = len(verts) - 1
        mids = [mid(face[i], face[(i + 1) % k]) for i in range(k)]
        for i in range(k):
            out.append([face[i], mids[i], g, mids[(i - 1) % k]])
    return np.asarray(verts), np.asarray(out)


def tri_to_quad(mesh: TriMesh) -> TriToQuadResult:
    """Pair triangles of a closed mesh into quads by greedy cost matching.

    Matching an edge is skipped when its cost is infinite or when removing
    it would push an endpoint valence below 3. Any triangles left over
    trigger the conforming split fallback (which then also splits the
    matched quads once to keep the mesh closed and all-quad).
    """
    topology = build_halfedge(mesh)
    costs = [pairing_cost(mesh, topology, e) for e in range(topology.n_edges)]
    order = sorted(
        (c.cost, c.edge) for c in costs if np.isfinite(c.cost)
    )
    matched_face = np.zeros(mesh.n_faces, dtype=bool)
    remaining_valence = topology.vertex_valence.astype(np.int64).copy()
    quads = []
    total_cost = 0.0
    pairs = 0
    for cost, edge in order:
        f1, f2 = (int(x) for x in topology.edge_faces[edge])
        if matched_face[f1] or matched_face[f2]:
            continue
        a, b = (int(x) for x in topology.edge_vertices[edge])
        if remaining_valence[a] - 1 < 3 or remaining_valence[b] - 1 < 3:
            continue
        va, vb, vc, vd = _merged_quad(topology, edge)
        matched_face[f1] = matched_face[f2] = True
        remaining_valence[a] -= 1
        remaining_valence[b] -= 1
        quads.append([va, vd, vb, vc])
        total_cost += cost
        pairs += 1

    unmatched = [fi for fi in range(mesh.n_faces) if not matched_face[fi]]
    if not unmatched:
        quad_mesh = QuadControlMesh(mesh.vertices.copy(), np.asarray(quads))
        return TriToQuadResult(quad_mesh, total_cost, pairs, 0, False)

    triangles = [[int(c) for c in mesh.faces[fi]] for fi in unmatched]
    verts, faces = _conforming_split(mesh.vertices, quads, triangles)
    quad_mesh = QuadControlMesh(verts, faces)
    return TriToQuadResult(quad_mesh, total_cost, pairs, len(unmatched), True)
