"""Array-based halfedge connectivity for closed uniform-degree meshes.

Halfedge ``h`` of a mesh with face degree ``d`` lives in face ``h // d``
at slot ``h % d`` and points from ``faces[f][s]`` to ``faces[f][(s+1) % d]``.
``next`` and ``prev`` are therefore index arithmetic; only ``twin`` needs
a lookup table, built once at construction.
"""

import numpy as np

from .errors import TopologyError
from .mesh import _BaseMesh


class HalfedgeTopology:
    """Gluing of per-face reference domains along shared edges.

    Attributes
    ----------
    faces : (m, d) int array
        The validated face table this topology was built from.
    twin : (h,) int array
        Opposite halfedge; an involution without fixed points.
    origin, dest : (h,) int arrays
        Endpoint vertices of each halfedge.
    edge_of_halfedge : (h,) int array
        Undirected edge id of each halfedge; edges are numbered by
        lexicographic order of their sorted endpoint pair.
    edge_vertices : (e, 2) int array
    edge_faces : (e, 2) int array
        The two incident faces of each edge, in halfedge order
        (lower halfedge first), giving dihedral access.
    vertex_valence : (n,) int array
    """

    def __init__(self, mesh: _BaseMesh):
        faces = np.asarray(mesh.faces, dtype=np.int64)
        m, deg = faces.shape
        n = mesh.n_vertices
        self.faces = faces
        self.face_degree = deg
        self.n_vertices = n
        self.n_faces = m
        self.n_halfedges = m * deg

        self.origin = faces.reshape(-1).copy()
        self.dest = np.roll(faces, -1, axis=1).reshape(-1).copy()

        directed = {}
        for h in range(self.n_halfedges):
            key = (int(self.origin[h]), int(self.dest[h]))
            if key in directed:
                raise TopologyError(
                    f"edge {key} traversed twice in the same direction"
                )
            directed[key] = h
        self._directed = directed

        twin = np.full(self.n_halfedges, -1, dtype=np.int64)
        for (a, b), h in directed.items():
            t = directed.get((b, a))
            if t is None:
                raise TopologyError(f"open boundary at edge ({a}, {b})")
            twin[h] = t
        self.twin = twin

        # undirected edges in lexicographic order of sorted endpoints
        pairs = sorted({(min(a, b), max(a, b)) for (a, b) in directed})
        self.edge_vertices = np.array(pairs, dtype=np.int64)
        self.n_edges = len(pairs)
        edge_index = {p: i for i, p in enumerate(pairs)}
        self.edge_of_halfedge = np.array(
            [edge_index[(min(int(self.origin[h]), int(self.dest[h])),
                         max(int(self.origin[h]), int(self.dest[h])))]
             for h in range(self.n_halfedges)], dtype=np.int64)

        self.edge_faces = np.empty((self.n_edges, 2), dtype=np.int64)
        self.edge_halfedges = np.empty((self.n_edges, 2), dtype=np.int64)
        seen = np.zeros(self.n_edges, dtype=bool)
        for h in range(self.n_halfedges):
            e = self.edge_of_halfedge[h]
            if not seen[e]:
                self.edge_halfedges[e] = (h, twin[h])
                self.edge_faces[e] = (h // deg, twin[h] // deg)
                seen[e] = True

        self.vertex_valence = np.bincount(self.origin, minlength=n)
        if np.any(self.vertex_valence < 3):
            bad = int(np.argmin(self.vertex_valence))
            raise TopologyError(
                f"vertex {bad} has valence {int(self.vertex_valence[bad])} < 3"
            )

        # one outgoing halfedge per vertex, smallest id for determinism
        self.vertex_halfedge = np.full(n, -1, dtype=np.int64)
        for h in range(self.n_halfedges - 1, -1, -1):
            self.vertex_halfedge[self.origin[h]] = h

    def face_of(self, h: int) -> int:
        return h // self.face_degree

    def next(self, h: int) -> int:
        f, s = divmod(h, self.face_degree)
        return f * self.face_degree + (s + 1) % self.face_degree

    def prev(self, h: int) -> int:
        f, s = divmod(h, self.face_degree)
        return f * self.face_degree + (s - 1) % self.face_degree

    def halfedge(self, a: int, b: int) -> int:
        """Halfedge from vertex a to vertex b, or -1 if absent."""
        return self._directed.get((a, b), -1)

    def faces_around_vertex(self, v: int):
        """Faces incident to v, in rotation order around v."""
        h0 = int(self.vertex_halfedge[v])
        out = []
        h = h0
        while True:
            out.append(h // self.face_degree)
            h = self.next(int(self.twin[h]))  # next outgoing halfedge of v
            if h == h0:
                break
            if len(out) > self.n_faces:
                raise TopologyError(f"vertex {v} ring does not close")
        return out

    def vertex_ring(self, v: int):
        """Neighbor vertices of v, in rotation order matching faces_around_vertex."""
        h0 = int(self.vertex_halfedge[v])
        out = []
        h = h0
        while True:
            out.append(int(self.dest[h]))
            h = self.next(int(self.twin[h]))
            if h == h0:
                break
        return out

    def flatten_faces(self):
        """Face table reconstructed by walking next-cycles (for validation)."""
        out = np.empty_like(self.faces)
        for f in range(self.n_faces):
            h = f * self.face_degree
            for s in range(self.face_degree):
                out[f, s] = self.origin[h]
                h = self.next(h)
        return out


def build_halfedge(mesh: _BaseMesh) -> HalfedgeTopology:
    """Build validated halfedge connectivity for a closed oriented mesh."""
    return HalfedgeTopology(mesh)
