"""Exact limit-surface evaluation with first and second derivatives.

A face whose four corners all have valence 4 carries a uniform bicubic
B-spline patch defined by its 16-point stencil, evaluated in closed form.
A face touching one extraordinary vertex is evaluated by subdividing a
local control fragment into the quadrant containing the parameter until
that quadrant is regular; the per-face quadrant stencils are cached, so
repeated evaluations cost one 16-point spline evaluation plus a small
dense product.

Meshes where some face touches two or more extraordinary vertices are
pre-split by one internal subdivision at construction, which isolates the
extraordinary vertices; basis rows are composed back through the step
matrix so they always refer to the caller's control vertices.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import GeometryError
from .halfedge import build_halfedge
from .mesh import QuadControlMesh
from .subdivision import cc_subdivide, descend_param

_ROW_NAMES = ("value", "du", "dv", "duu", "duv", "dvv")


@dataclass(frozen=True)
class SurfaceParam:
    """A point of the glued parameter domain: face index plus (u, v) in [0,1]^2."""

    face: int
    u: float
    v: float

    def __post_init__(self):
        if not (0.0 <= self.u <= 1.0 and 0.0 <= self.v <= 1.0):
            raise ValueError(f"uv out of range: ({self.u}, {self.v})")


@dataclass
class SurfaceJet:
    """Position, partials and sparse basis rows of the limit surface at a param.

    ``weights`` has six rows (value, du, dv, duu, duv, dvv) over the control
    vertices listed in ``indices``; the position equals weights[0] @ V[indices]
    by construction.
    """

    position: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    duu: np.ndarray
    duv: np.ndarray
    dvv: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    face: int
    uv: tuple
    at_extraordinary: bool = False


class JetBatch:
    """Structure-of-arrays result of batched evaluation.

    L, L1, L2 are (N x n) CSR basis matrices for values and the two first
    derivatives; they are only built when rows=True was requested.
    """

    __slots__ = ("position", "du", "dv", "duu", "duv", "dvv",
                 "flagged", "L", "L1", "L2")

    def __init__(self, n_points):
        for name in ("position", "du", "dv", "duu", "duv", "dvv"):
            setattr(self, name, np.zeros((n_points, 3)))
        self.flagged = np.zeros(n_points, dtype=bool)
        self.L = self.L1 = self.L2 = None


def bspline_basis(t):
    """Uniform cubic B-spline segment basis with first and second derivatives.

    t may be scalar or an array; returns three (.., 4) arrays (b, db, ddb).
    """
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    b = np.stack([
        s ** 3 / 6.0,
        (3.0 * t ** 3 - 6.0 * t ** 2 + 4.0) / 6.0,
        (-3.0 * t ** 3 + 3.0 * t ** 2 + 3.0 * t + 1.0) / 6.0,
        t ** 3 / 6.0,
    ], axis=-1)
    db = np.stack([
        -0.5 * s ** 2,
        (3.0 * t ** 2 - 4.0 * t) / 2.0,
        (-3.0 * t ** 2 + 2.0 * t + 1.0) / 2.0,
        0.5 * t ** 2,
    ], axis=-1)
    ddb = np.stack([s, 3.0 * t - 2.0, 1.0 - 3.0 * t, t], axis=-1)
    return b, db, ddb


def _tensor_weights(u, v):
    """Six (N, 16) weight arrays over a stencil ordered s[4*j + i] (i: u, j: v)."""
    bu, dbu, ddbu = bspline_basis(u)
    bv, dbv, ddbv = bspline_basis(v)

    def outer(wv, wu):
        return np.einsum("...j,...i->...ji", wv, wu).reshape(*np.shape(u), 16)

    return (outer(bv, bu), outer(bv, dbu), outer(dbv, bu),
            outer(bv, ddbu), outer(dbv, dbu), outer(ddbv, bu))


def _directed_edge_map(faces):
    demap = {}
    for fi, corners in enumerate(faces):
        for s in range(4):
            demap[(int(corners[s]), int(corners[(s + 1) % 4]))] = (fi, s)
    return demap


def _rotated(faces, fi, slot):
    f = faces[fi]
    return [int(f[(slot + k) % 4]) for k in range(4)]


def _collect_stencil(faces, demap, fi):
    """16-point B-spline stencil of a face whose corners all have valence 4.

    Grid order s[4*j + i] with the face corners at s[5], s[6], s[10], s[9].
    Raises KeyError if a needed neighbor face is missing.
    """
    p0, p1, p2, p3 = (int(c) for c in faces[fi])
    s = [-1] * 16
    s[5], s[6], s[10], s[9] = p0, p1, p2, p3

    south = _rotated(faces, *demap[(p1, p0)])
    s[1], s[2] = south[2], south[3]
    east = _rotated(faces, *demap[(p2, p1)])
    s[7], s[11] = east[2], east[3]
    north = _rotated(faces, *demap[(p3, p2)])
    s[14], s[13] = north[2], north[3]
    west = _rotated(faces, *demap[(p0, p3)])
    s[8], s[4] = west[2], west[3]

    def diagonal(face_tuple, v):
        return face_tuple[(face_tuple.index(v) + 2) % 4]

    s[0] = diagonal(_rotated(faces, *demap[(s[1], p0)]), p0)
    s[3] = diagonal(_rotated(faces, *demap[(p1, s[2])]), p1)
    s[15] = diagonal(_rotated(faces, *demap[(p2, s[11])]), p2)
    s[12] = diagonal(_rotated(faces, *demap[(p3, s[13])]), p3)
    return np.asarray(s, dtype=np.int64)


class _Fragment:
    """Local control net: quad faces over local ids, each id carrying a dense
    weight row over the initial fragment's global control vertices."""

    __slots__ = ("faces", "weights", "valence", "target")

    def __init__(self, faces, weights, valence, target):
        self.faces = faces
        self.weights = weights
        self.valence = valence
        self.target = target


def _subdivide_fragment(fr: _Fragment):
    """One Catmull-Clark step on a fragment.

    Vertices whose stencil is incomplete inside the fragment are dropped,
    along with child faces that would reference them. Returns the full
    child fragment (faces, weights, valence), the demap of the child face
    table, and the four child rows of the target face (by quadrant,
    -1 where missing).
    """
    faces, weights, valence = fr.faces, fr.weights, fr.valence
    n_loc = weights.shape[0]
    n_faces = faces.shape[0]

    face_count = np.zeros(n_loc, dtype=np.int64)
    edge_faces = {}
    for fi, corners in enumerate(faces):
        for k in range(4):
            a, b = int(corners[k]), int(corners[(k + 1) % 4])
            face_count[a] += 1
            key = (a, b) if a < b else (b, a)
            edge_faces.setdefault(key, []).append(fi)

    fp_rows = np.stack([weights[faces[fi]].mean(axis=0) for fi in range(n_faces)])

    new_rows = []
    new_valence = []
    vp_id = np.full(n_loc, -1, dtype=np.int64)
    ep_id = {}

    def add(row, val):
        new_rows.append(row)
        new_valence.append(val)
        return len(new_rows) - 1

    for v in range(n_loc):
        k = int(valence[v])
        if face_count[v] != k:
            continue
        ring_faces = [fi for fi, corners in enumerate(faces) if v in corners]
        neighbor_mid = np.zeros_like(weights[v])
        count_edges = 0
        seen = set()
        for fi in ring_faces:
            corners = [int(c) for c in faces[fi]]
            i = corners.index(v)
            for w in (corners[(i + 1) % 4], corners[(i - 1) % 4]):
                if w not in seen:
                    seen.add(w)
                    neighbor_mid = neighbor_mid + 0.5 * (weights[v] + weights[w])
                    count_edges += 1
        if count_edges != k:
            continue
        favg = fp_rows[ring_faces].mean(axis=0)
        ravg = neighbor_mid / k
        row = (favg + 2.0 * ravg + (k - 3.0) * weights[v]) / k
        vp_id[v] = add(row, k)

    for (a, b), incident in edge_faces.items():
        if len(incident) != 2:
            continue
        row = 0.25 * (weights[a] + weights[b] + fp_rows[incident[0]] + fp_rows[incident[1]])
        ep_id[(a, b)] = add(row, 4)

    fp_loc = np.empty(n_faces, dtype=np.int64)
    for fi in range(n_faces):
        fp_loc[fi] = add(fp_rows[fi], 4)

    def ep(a, b):
        return ep_id.get((a, b) if a < b else (b, a), -1)

    child_faces = []
    target_children = [-1, -1, -1, -1]
    for fi, corners in enumerate(faces):
        c = [int(x) for x in corners]
        vp = [vp_id[x] for x in c]
        e01, e12 = ep(c[0], c[1]), ep(c[1], c[2])
        e23, e30 = ep(c[2], c[3]), ep(c[3], c[0])
        fp = int(fp_loc[fi])
        # parameter-preserving quadrant tuples: slot 0 at the child's (0,0)
        quadrants = (
            (vp[0], e01, fp, e30),
            (e01, vp[1], e12, fp),
            (fp, e12, vp[2], e23),
            (e30, fp, e23, vp[3]),
        )
        for q, tup in enumerate(quadrants):
            if min(tup) < 0:
                continue
            if fi == fr.target:
                target_children[q] = len(child_faces)
            child_faces.append(tup)

    child = _Fragment(
        np.asarray(child_faces, dtype=np.int64),
        np.stack(new_rows),
        np.asarray(new_valence, dtype=np.int64),
        -1,
    )
    return child, _directed_edge_map(child.faces), target_children


def _restrict_fragment(fr: _Fragment, target_row: int) -> _Fragment:
    """Keep only faces sharing a vertex with the target face; compact ids."""
    target_verts = set(int(x) for x in fr.faces[target_row])
    keep = [fi for fi, corners in enumerate(fr.faces)
            if target_verts.intersection(int(x) for x in corners)]
    used = []
    remap = {}
    for fi in keep:
        for x in fr.faces[fi]:
            x = int(x)
            if x not in remap:
                remap[x] = len(used)
                used.append(x)
    faces = np.asarray([[remap[int(x)] for x in fr.faces[fi]] for fi in keep],
                       dtype=np.int64)
    return _Fragment(faces, fr.weights[used], fr.valence[used], keep.index(target_row))


class _IrregularPatch:
    """Cached quadrant stencils of one face touching one extraordinary vertex."""

    def __init__(self, topology, face, ev_slot):
        self.ev_slot = ev_slot
        corners = [int(c) for c in topology.faces[face]]
        ring = []
        for c in corners:
            for fi in topology.faces_around_vertex(c):
                if fi not in ring:
                    ring.append(fi)
        ring.sort()
        used = []
        remap = {}
        for fi in ring:
            for x in topology.faces[fi]:
                x = int(x)
                if x not in remap:
                    remap[x] = len(used)
                    used.append(x)
        faces = np.asarray([[remap[int(x)] for x in topology.faces[fi]] for fi in ring],
                           dtype=np.int64)
        self.global_ids = np.asarray(used, dtype=np.int64)
        k0 = len(used)
        fragment = _Fragment(
            faces,
            np.eye(k0),
            topology.vertex_valence[self.global_ids].astype(np.int64),
            ring.index(face),
        )
        self._fragment = fragment          # fragment at the current deepest level
        self._stencils = []                # per depth d >= 1: dict q -> (16, k0) array

    def ensure_depth(self, depth):
        while len(self._stencils) < depth:
            child, demap, target_children = _subdivide_fragment(self._fragment)
            level = {}
            for q in range(4):
                if q == self.ev_slot:
                    continue
                row = target_children[q]
                if row < 0:
                    raise GeometryError("fragment subdivision lost a regular quadrant")
                ids = _collect_stencil(child.faces, demap, row)
                level[q] = child.weights[ids]
            self._stencils.append(level)
            ev_row = target_children[self.ev_slot]
            if ev_row < 0:
                raise GeometryError("fragment subdivision lost the EV quadrant")
            self._fragment = _restrict_fragment(child, ev_row)

    def stencil(self, depth, quadrant):
        self.ensure_depth(depth)
        return self._stencils[depth - 1][quadrant]

    def limit_row_at_ev(self):
        """Row-stochastic limit mask of the extraordinary corner over global ids."""
        fr = self._fragment
        ev_local = int(fr.faces[fr.target][self.ev_slot])
        k = int(fr.valence[ev_local])
        row = k * k * fr.weights[ev_local]
        for corners in fr.faces:
            corners = [int(x) for x in corners]
            if ev_local not in corners:
                continue
            i = corners.index(ev_local)
            row = row + 2.0 * (fr.weights[corners[(i + 1) % 4]]
                               + fr.weights[corners[(i - 1) % 4]])
            row = row + fr.weights[corners[(i + 2) % 4]]
        return row / (k * (k + 5.0))


_QUAD_OFFSET = ((0, 0), (1, 0), (1, 1), (0, 1))


class LimitEvaluator:
    """Evaluator of one control mesh's limit surface.

    Construction classifies faces, collects regular stencils and, when some
    face touches several extraordinary vertices, performs the isolating
    pre-split. Evaluation is pure and reentrant afterwards.
    """

    def __init__(self, mesh: QuadControlMesh, depth_cap: int = 10):
        if depth_cap < 1:
            raise ValueError("depth_cap must be >= 1")
        self.control_mesh = mesh
        self.depth_cap = depth_cap
        topo = build_halfedge(mesh)
        irregular = topo.vertex_valence != 4
        if np.any(irregular[topo.faces].sum(axis=1) >= 2):
            refined, step = cc_subdivide(mesh, topo)
            self._lift = step.tocsr()
            self.mesh = refined
            self.topology = build_halfedge(refined)
        else:
            self._lift = None
            self.mesh = mesh
            self.topology = topo

        faces = self.topology.faces
        irregular = self.topology.vertex_valence != 4
        ev_count = irregular[faces].sum(axis=1)
        if np.any(ev_count >= 2):
            raise GeometryError("pre-split failed to isolate extraordinary vertices")
        self.face_regular = ev_count == 0
        self._ev_slot = np.where(
            self.face_regular, -1, np.argmax(irregular[faces], axis=1)
        ).astype(np.int64)

        demap = _directed_edge_map(faces)
        self._stencil_table = np.full((self.topology.n_faces, 16), -1, dtype=np.int64)
        for fi in np.nonzero(self.face_regular)[0]:
            self._stencil_table[fi] = _collect_stencil(faces, demap, int(fi))
        self._patches = {}

    @property
    def n_control(self) -> int:
        return self.control_mesh.n_vertices

    def with_positions(self, vertices) -> "LimitEvaluator":
        """Evaluator for the same connectivity with new control positions.

        All cached topology work (classification, stencils, fragments) is
        shared; only vertex positions are replaced. This is what the
        fitting loop uses between iterations.
        """
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != (self.control_mesh.n_vertices, 3):
            raise ValueError("vertex array shape does not match the control mesh")
        clone = object.__new__(LimitEvaluator)
        clone.__dict__.update(self.__dict__)
        clone.control_mesh = QuadControlMesh(
            vertices, self.control_mesh.faces, validate=False
        )
        if self._lift is None:
            clone.mesh = clone.control_mesh
        else:
            clone.mesh = QuadControlMesh(
                self._lift @ vertices, self.mesh.faces, validate=False
            )
        return clone

    def _patch(self, face: int) -> _IrregularPatch:
        patch = self._patches.get(face)
        if patch is None:
            patch = _IrregularPatch(self.topology, face, int(self._ev_slot[face]))
            self._patches[face] = patch
        return patch

    def jets(self, faces, u, v, rows: bool = False) -> JetBatch:
        """Evaluate the jet at each (face, u, v); everything is vectorized per
        patch group. With rows=True also assembles L, L1, L2 over the control
        vertices of the caller's mesh."""
        faces = np.atleast_1d(np.asarray(faces, dtype=np.int64)).copy()
        u = np.atleast_1d(np.asarray(u, dtype=np.float64)).copy()
        v = np.atleast_1d(np.asarray(v, dtype=np.float64)).copy()
        n_pts = faces.shape[0]
        if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
            raise ValueError("uv out of [0,1]^2")
        if np.any((faces < 0) | (faces >= self.control_mesh.n_faces)):
            raise ValueError("face index out of range")

        jacs = None
        if self._lift is not None:
            jacs = np.zeros((n_pts, 2, 2))
            for p in range(n_pts):
                child, un, vn = descend_param(int(faces[p]), float(u[p]), float(v[p]))
                quadrant = child % 4
                jacs[p] = (((2, 0), (0, 2)), ((0, 2), (-2, 0)),
                           ((-2, 0), (0, -2)), ((0, -2), (2, 0)))[quadrant]
                faces[p], u[p], v[p] = child, un, vn

        batch = JetBatch(n_pts)
        V = self.mesh.vertices
        row_idx, row_col = [], []
        row_dat = [[], [], []]  # value, du, dv

        def emit(points, stencil_ids, w6, scale):
            # w6: six (B, K) arrays over stencil_ids (B, K); scale = 2**depth
            Vs = V[stencil_ids]
            sc = (1.0, scale, scale, scale * scale, scale * scale, scale * scale)
            for name, w, s in zip(("position", "du", "dv", "duu", "duv", "dvv"), w6, sc):
                getattr(batch, name)[points] = s * np.einsum("bk,bkc->bc", w, Vs)
            if rows:
                k = stencil_ids.shape[1]
                row_idx.append(np.repeat(points, k))
                row_col.append(stencil_ids.reshape(-1))
                for d, w, s in zip(row_dat, w6[:3], sc[:3]):
                    d.append((s * w).reshape(-1))

        regular = self.face_regular[faces]
        reg_pts = np.nonzero(regular)[0]
        if reg_pts.size:
            w6 = _tensor_weights(u[reg_pts], v[reg_pts])
            emit(reg_pts, self._stencil_table[faces[reg_pts]], w6, 1.0)

        irr_pts = np.nonzero(~regular)[0]
        groups = {}
        fallback = []
        for p in irr_pts:
            face = int(faces[p])
            r = int(self._ev_slot[face])
            uu, vv = float(u[p]), float(v[p])
            cu, cv = _QUAD_OFFSET[r]
            if uu == float(cu) and vv == float(cv):
                fallback.append(p)
                continue
            depth = 0
            placed = False
            while depth < self.depth_cap:
                q = (1 if uu >= 0.5 else 0) + (2 if vv >= 0.5 else 0)
                q = (0, 1, 3, 2)[q]  # (u-half, v-half) -> corner quadrant index
                uu = 2.0 * uu - (1.0 if q in (1, 2) else 0.0)
                vv = 2.0 * vv - (1.0 if q in (2, 3) else 0.0)
                depth += 1
                if q != r:
                    groups.setdefault((face, depth, q), []).append((p, uu, vv))
                    placed = True
                    break
            if not placed:
                fallback.append(p)

        for (face, depth, q) in sorted(groups):
            entries = groups[(face, depth, q)]
            pts = np.asarray([e[0] for e in entries], dtype=np.int64)
            uu = np.asarray([e[1] for e in entries])
            vv = np.asarray([e[2] for e in entries])
            patch = self._patch(face)
            stencil_w = patch.stencil(depth, q)          # (16, K0)
            w6 = tuple(w @ stencil_w for w in _tensor_weights(uu, vv))
            ids = np.broadcast_to(patch.global_ids, (pts.size, patch.global_ids.size))
            emit(pts, ids, w6, float(2 ** depth))

        for p in fallback:
            face = int(faces[p])
            patch = self._patch(face)
            patch.ensure_depth(self.depth_cap)
            r = patch.ev_slot
            q = (r + 2) % 4
            stencil_w = patch.stencil(self.depth_cap, q)
            corner = {0: (1.0, 1.0), 1: (0.0, 1.0), 2: (0.0, 0.0), 3: (1.0, 0.0)}[r]
            w6 = [w @ stencil_w for w in _tensor_weights(*corner)]
            w6[0] = patch.limit_row_at_ev()
            ids = patch.global_ids.reshape(1, -1)
            emit(np.asarray([p]), ids, [w.reshape(1, -1) for w in w6],
                 float(2 ** self.depth_cap))
            batch.flagged[p] = True

        if jacs is not None:
            self._pull_back_jets(batch, jacs)

        if rows:
            idx = np.concatenate(row_idx) if row_idx else np.zeros(0, dtype=np.int64)
            col = np.concatenate(row_col) if row_col else np.zeros(0, dtype=np.int64)
            mats = []
            for d in row_dat:
                dat = np.concatenate(d) if d else np.zeros(0)
                mats.append(sp.csr_matrix((dat, (idx, col)),
                                          shape=(n_pts, self.mesh.n_vertices)))
            if jacs is not None:
                val, lu, lv = mats
                j = jacs
                du = sp.diags(j[:, 0, 0]) @ lu + sp.diags(j[:, 1, 0]) @ lv
                dv = sp.diags(j[:, 0, 1]) @ lu + sp.diags(j[:, 1, 1]) @ lv
                mats = [val, du, dv]
            if self._lift is not None:
                mats = [(m @ self._lift).tocsr() for m in mats]
            batch.L, batch.L1, batch.L2 = mats
        return batch

    @staticmethod
    def _pull_back_jets(batch, jacs):
        """Chain rule through the constant per-point pre-split jacobians."""
        a, b = jacs[:, 0, 0:1], jacs[:, 0, 1:2]   # du'/du, du'/dv
        c, d = jacs[:, 1, 0:1], jacs[:, 1, 1:2]   # dv'/du, dv'/dv
        gu, gv = batch.du.copy(), batch.dv.copy()
        guu, guv, gvv = batch.duu.copy(), batch.duv.copy(), batch.dvv.copy()
        batch.du = a * gu + c * gv
        batch.dv = b * gu + d * gv
        batch.duu = a * a * guu + 2 * a * c * guv + c * c * gvv
        batch.duv = a * b * guu + (a * d + b * c) * guv + c * d * gvv
        batch.dvv = b * b * guu + 2 * b * d * guv + d * d * gvv

    def jet(self, param: SurfaceParam) -> SurfaceJet:
        """Single-parameter evaluation returning the full six sparse rows."""
        batch = self.jets([param.face], [param.u], [param.v], rows=False)
        indices, weights = self._jet_rows(param)
        return SurfaceJet(
            position=batch.position[0], du=batch.du[0], dv=batch.dv[0],
            duu=batch.duu[0], duv=batch.duv[0], dvv=batch.dvv[0],
            indices=indices, weights=weights,
            face=param.face, uv=(param.u, param.v),
            at_extraordinary=bool(batch.flagged[0]),
        )

    def _jet_rows(self, param: SurfaceParam):
        """Six basis rows at one param, composed back to the control mesh."""
        face, u, v = param.face, param.u, param.v
        jac = None
        if self._lift is not None:
            face, u, v = descend_param(face, u, v)
            jac = np.asarray((((2, 0), (0, 2)), ((0, 2), (-2, 0)),
                              ((-2, 0), (0, -2)), ((0, -2), (2, 0)))[face % 4],
                             dtype=np.float64)

        if self.face_regular[face]:
            ids = self._stencil_table[face]
            w6 = np.stack([w.reshape(-1) for w in _tensor_weights(u, v)])
        else:
            patch = self._patch(face)
            r = patch.ev_slot
            cu, cv = _QUAD_OFFSET[r]
            uu, vv, depth, q_found = u, v, 0, None
            if not (u == float(cu) and v == float(cv)):
                while depth < self.depth_cap:
                    q = (1 if uu >= 0.5 else 0) + (2 if vv >= 0.5 else 0)
                    q = (0, 1, 3, 2)[q]
                    uu = 2.0 * uu - (1.0 if q in (1, 2) else 0.0)
                    vv = 2.0 * vv - (1.0 if q in (2, 3) else 0.0)
                    depth += 1
                    if q != r:
                        q_found = q
                        break
            ids = patch.global_ids
            if q_found is not None:
                stencil_w = patch.stencil(depth, q_found)
                scale = float(2 ** depth)
                w6 = np.stack([w.reshape(-1) @ stencil_w
                               for w in _tensor_weights(uu, vv)])
            else:
                patch.ensure_depth(self.depth_cap)
                q = (r + 2) % 4
                stencil_w = patch.stencil(self.depth_cap, q)
                corner = {0: (1.0, 1.0), 1: (0.0, 1.0),
                          2: (0.0, 0.0), 3: (1.0, 0.0)}[r]
                scale = float(2 ** self.depth_cap)
                w6 = np.stack([w.reshape(-1) @ stencil_w
                               for w in _tensor_weights(*corner)])
                w6[0] = patch.limit_row_at_ev()
            w6[1:3] *= scale
            w6[3:] *= scale * scale

        if jac is not None:
            a, b, c, d = jac[0, 0], jac[0, 1], jac[1, 0], jac[1, 1]
            gu, gv = w6[1].copy(), w6[2].copy()
            guu, guv, gvv = w6[3].copy(), w6[4].copy(), w6[5].copy()
            w6[1] = a * gu + c * gv
            w6[2] = b * gu + d * gv
            w6[3] = a * a * guu + 2 * a * c * guv + c * c * gvv
            w6[4] = a * b * guu + (a * d + b * c) * guv + c * d * gvv
            w6[5] = b * b * guu + 2 * b * d * guv + d * d * gvv

        if self._lift is not None:
            sub = self._lift[np.asarray(ids, dtype=np.int64)]
            composed = w6 @ sub.toarray()
            keep = np.nonzero(np.abs(composed).max(axis=0) > 0.0)[0]
            return keep.astype(np.int64), composed[:, keep]
        return np.asarray(ids, dtype=np.int64), w6


def eval_limit(mesh_or_evaluator, param: SurfaceParam, depth_cap: int = 10) -> SurfaceJet:
    """Evaluate the limit surface jet at one parameter.

    Accepts either a QuadControlMesh (an evaluator is built on the fly,
    which is the expensive part) or a prepared LimitEvaluator.
    """
    if isinstance(mesh_or_evaluator, LimitEvaluator):
        return mesh_or_evaluator.jet(param)
    return LimitEvaluator(mesh_or_evaluator, depth_cap=depth_cap).jet(param)


def sample_grid(evaluator: LimitEvaluator, samples_per_face: int):
    """Deterministic s x s per-face parameter grid with limit positions.

    Sample order is face-major, then v, then u; uv = ((a+1/2)/s, (b+1/2)/s).
    Returns (faces, u, v, positions).
    """
    s = int(samples_per_face)
    if s < 2:
        raise ValueError("samples_per_face must be >= 2")
    m = evaluator.control_mesh.n_faces
    centers = (np.arange(s) + 0.5) / s
    uu, vv = np.meshgrid(centers, centers, indexing="xy")
    u = np.tile(uu.reshape(-1), m)
    v = np.tile(vv.reshape(-1), m)
    faces = np.repeat(np.arange(m, dtype=np.int64), s * s)
    batch = evaluator.jets(faces, u, v, rows=False)
    return faces, u, v, batch.position


def sample_surface(mesh_or_evaluator, samples_per_face: int):
    """Uniform parameter-grid samples of the limit surface.

    Returns a list of (SurfaceParam, position) pairs, m * s^2 of them.
    """
    ev = (mesh_or_evaluator if isinstance(mesh_or_evaluator, LimitEvaluator)
          else LimitEvaluator(mesh_or_evaluator))
    faces, u, v, pos = sample_grid(ev, samples_per_face)
    return [(SurfaceParam(int(f), float(a), float(b)), p)
            for f, a, b, p in zip(faces, u, v, pos)]
