"""Quadric-error edge collapse for closed triangle meshes.

Garland-Heckbert style: each vertex accumulates the squared-distance
quadric of its supporting planes (area weighted); edges collapse in
ascending error order to the quadric-optimal point. Collapses that would
break manifoldness, drop a valence below 3, or flip a face normal by more
than pi/2 are skipped.
"""

import heapq
import logging

import numpy as np

from .mesh import TriMesh

logger = logging.getLogger(__name__)


def _face_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    area2 = np.linalg.norm(n)
    if area2 < 1e-30:
        return np.zeros((4, 4))
    n = n / area2
    plane = np.array([n[0], n[1], n[2], -float(n @ p0)])
    return 0.5 * area2 * np.outer(plane, plane)


def _optimal_point(quadric, fallback):
    a = quadric[:3, :3]
    scale = np.abs(a).max()
    if scale <= 0.0 or abs(np.linalg.det(a)) < 1e-12 * scale ** 3:
        return fallback
    return np.linalg.solve(a, -quadric[:3, 3])


def _quadric_error(quadric, x):
    xh = np.array([x[0], x[1], x[2], 1.0])
    return max(float(xh @ quadric @ xh), 0.0)


class _CollapseState:
    def __init__(self, mesh: TriMesh):
        self.positions = mesh.vertices.copy()
        self.faces = [list(int(c) for c in f) for f in mesh.faces]
        self.vertex_faces = {v: set() for v in range(mesh.n_vertices)}
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vertex_faces[v].add(fi)
        self.alive = set(range(mesh.n_vertices))
        self.version = np.zeros(mesh.n_vertices, dtype=np.int64)
        self.quadrics = np.zeros((mesh.n_vertices, 4, 4))
        for f in self.faces:
            q = _face_quadric(*(self.positions[v] for v in f))
            for v in f:
                self.quadrics[v] += q

    def neighbors(self, v):
        out = set()
        for fi in self.vertex_faces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def face_alive(self, fi):
        return self.faces[fi] is not None

    def collapse_ok(self, a, b, x):
        shared = self.vertex_faces[a] & self.vertex_faces[b]
        if len(shared) != 2:
            return False
        # link condition: common neighbors must be exactly the two opposite corners
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {a, b}
        if self.neighbors(a) & self.neighbors(b) != opposite:
            return False
        # opposite corners lose one edge; keep all valences >= 3
        for c in opposite:
            if len(self.neighbors(c)) - 1 < 3:
                return False
        if len((self.neighbors(a) | self.neighbors(b)) - {a, b}) < 3:
            return False
        # reject normal flips > pi/2 and collapses to degenerate faces
        for fi in (self.vertex_faces[a] | self.vertex_faces[b]) - shared:
            f = self.faces[fi]
            old = [self.positions[v] for v in f]
            new = [x if v in (a, b) else self.positions[v] for v in f]
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if float(n_old @ n_new) <= 0.0:
                return False
        return True

    def collapse(self, a, b, x):
        shared = self.vertex_faces[a] & self.vertex_faces[b]
        self.positions[a] = x
        self.quadrics[a] = self.quadrics[a] + self.quadrics[b]
        for fi in sorted(shared):
            for v in self.faces[fi]:
                self.vertex_faces[v].discard(fi)
            self.faces[fi] = None
        for fi in sorted(self.vertex_faces[b]):
            f = self.faces[fi]
            self.faces[fi] = [a if v == b else v for v in f]
            self.vertex_faces[a].add(fi)
        del self.vertex_faces[b]
        self.alive.discard(b)
        self.version[a] += 1
        self.version[b] += 1

    def compact(self):
        order = sorted(self.alive)
        remap = {v: i for i, v in enumerate(order)}
        faces = [[remap[v] for v in f] for f in self.faces if f is not None]
        return TriMesh(self.positions[order], np.asarray(faces))


def qem_collapse(mesh: TriMesh, target_vertices: int, with_stats: bool = False):
    """Collapse edges of a closed manifold triangle mesh down to a target size.

    Returns the simplified TriMesh (still closed and manifold). If the
    target cannot be reached without breaking manifoldness, the best
    achievable mesh is returned and the shortfall is logged; pass
    with_stats=True to also get a stats dict.
    """
    if target_vertices < 4:
        raise ValueError("target_vertices must be >= 4")
    state = _CollapseState(mesh)
    stats = {"collapses": 0, "skipped": 0, "shortfall": 0}
    if mesh.n_vertices <= target_vertices:
        out = state.compact()
        return (out, stats) if with_stats else out

    heap = []

    def push_edge(a, b):
        a, b = (a, b) if a < b else (b, a)
        q = state.quadrics[a] + state.quadrics[b]
        mid = 0.5 * (state.positions[a] + state.positions[b])
        x = _optimal_point(q, mid)
        err = _quadric_error(q, x)
        heapq.heappush(heap, (err, a, b, int(state.version[a]), int(state.version[b]), tuple(x)))

    pushed = set()
    for f in state.faces:
        for k in range(3):
            a, b = f[k], f[(k + 1) % 3]
            key = (a, b) if a < b else (b, a)
            if key not in pushed:
                pushed.add(key)
                push_edge(a, b)

    while len(state.alive) > target_vertices and heap:
        err, a, b, va, vb, x = heapq.heappop(heap)
        if a not in state.alive or b not in state.alive:
            continue
        if va != state.version[a] or vb != state.version[b]:
            continue
        if b not in state.neighbors(a):
            continue
        x = np.asarray(x)
        if not state.collapse_ok(a, b, x):
            stats["skipped"] += 1
            continue
        state.collapse(a, b, x)
        stats["collapses"] += 1
        for w in sorted(state.neighbors(a)):
            push_edge(a, w)

    if len(state.alive) > target_vertices:
        stats["shortfall"] = len(state.alive) - target_vertices
        logger.warning(
            "qem_collapse stopped %d vertices short of target %d",
            stats["shortfall"], target_vertices,
        )
    out = state.compact()
    return (out, stats) if with_stats else out
