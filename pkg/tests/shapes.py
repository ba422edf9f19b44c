"""Shared synthetic shapes and reference oracles for the test suite."""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull

from subdivfit.evaluation import LimitEvaluator, sample_grid
from subdivfit.fitting import regularizer_matrix
from subdivfit.halfedge import build_halfedge
from subdivfit.mesh import QuadControlMesh, TriMesh
from subdivfit.subdivision import cc_subdivide

CUBE_FACES = np.array([
    [0, 1, 3, 2],   # x = -1
    [4, 6, 7, 5],   # x = +1
    [0, 4, 5, 1],   # y = -1
    [2, 3, 7, 6],   # y = +1
    [0, 2, 6, 4],   # z = -1
    [1, 5, 7, 3],   # z = +1
])


def cube(half=1.0) -> QuadControlMesh:
    """The [-half, half]^3 cube; vertex i at bits (x, y, z) of i."""
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                 dtype=np.float64) * half
    return QuadControlMesh(v, CUBE_FACES)


def triangulated_cube(half=1.0) -> TriMesh:
    base = cube(half)
    tris = []
    for a, b, c, d in base.faces:
        tris.append([a, b, c])
        tris.append([a, c, d])
    return TriMesh(base.vertices, np.asarray(tris))


def torus_grid(nu, nv, positions=None) -> QuadControlMesh:
    """Quad torus with vertex (i, j) at index i*nv + j; all valences are 4."""
    faces = []
    for i in range(nu):
        for j in range(nv):
            faces.append([
                i * nv + j,
                ((i + 1) % nu) * nv + j,
                ((i + 1) % nu) * nv + (j + 1) % nv,
                i * nv + (j + 1) % nv,
            ])
    if positions is None:
        pos = []
        for i in range(nu):
            for j in range(nv):
                th, ph = 2 * np.pi * i / nu, 2 * np.pi * j / nv
                pos.append([(2 + 0.7 * np.cos(ph)) * np.cos(th),
                            (2 + 0.7 * np.cos(ph)) * np.sin(th),
                            0.7 * np.sin(ph)])
        positions = np.asarray(pos)
    return QuadControlMesh(positions, np.asarray(faces))


def planar_grid_torus(n=6) -> QuadControlMesh:
    """Torus connectivity with positions (i, j, 0): faces whose 16-point
    stencil does not wrap behave exactly like an infinite regular grid."""
    pos = np.array([[i, j, 0.0] for i in range(n) for j in range(n)])
    return torus_grid(n, n, pos)


def planar_interior_faces(n=6):
    """Faces of planar_grid_torus(n) whose stencil stays inside the sheet."""
    return [i * n + j for i in range(1, n - 2) for j in range(1, n - 2)]


def icosahedron() -> TriMesh:
    phi = (1 + 5 ** 0.5) / 2
    v = []
    for a, b in [(1, phi), (-1, phi), (1, -phi), (-1, -phi)]:
        v += [[0, a, b], [a, b, 0], [b, 0, a]]
    v = np.asarray(v, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1)[:, None]
    hull = ConvexHull(v)
    faces = []
    for simplex, eq in zip(hull.simplices, hull.equations):
        a, b, c = (int(x) for x in simplex)
        n = np.cross(v[b] - v[a], v[c] - v[a])
        if n @ eq[:3] < 0:
            a, b, c = a, c, b
        faces.append([a, b, c])
    return TriMesh(v, np.asarray(sorted(faces)))


def icosphere(subdivisions: int) -> TriMesh:
    """Icosahedron refined by edge midpoint splits, projected to the unit
    sphere: 12, 42, 162, 642, 2562, 10242, ... vertices."""
    mesh = icosahedron()
    for _ in range(subdivisions):
        verts = [p for p in mesh.vertices]
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        faces = []
        for a, b, c in mesh.faces:
            a, b, c = int(a), int(b), int(c)
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        mesh = TriMesh(np.asarray(verts), np.asarray(faces))
    return mesh


def tetrahedron() -> TriMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    return TriMesh(v, f)


def pentagonal_bipyramid() -> TriMesh:
    """Two valence-5 poles; becomes an all-quad mesh after one split."""
    ring = [[np.cos(2 * np.pi * i / 5), np.sin(2 * np.pi * i / 5), 0.0]
            for i in range(5)]
    v = np.asarray([[0, 0, 1.0]] + ring + [[0, 0, -1.0]])
    faces = []
    for i in range(5):
        a, b = 1 + i, 1 + (i + 1) % 5
        faces.append([0, a, b])
        faces.append([6, b, a])
    return TriMesh(v, np.asarray(faces))


def valence5_quad_mesh(perturb=0.0, seed=0) -> QuadControlMesh:
    """Closed quad mesh containing valence-5 (and valence-3) vertices."""
    from subdivfit.quadify import tri_to_quad

    base = pentagonal_bipyramid()
    result = tri_to_quad(base)
    mesh = result.mesh
    if perturb:
        rng = np.random.default_rng(seed)
        mesh = QuadControlMesh(
            mesh.vertices + rng.normal(scale=perturb, size=mesh.vertices.shape),
            mesh.faces,
        )
    return mesh


def random_closed_quad_meshes(seed=0):
    """Five small closed quad meshes covering valences 3, 4 and 5."""
    rng = np.random.default_rng(seed)
    meshes = [cube()]
    jittered = cube()
    meshes.append(QuadControlMesh(
        jittered.vertices + rng.normal(scale=0.15, size=(8, 3)), jittered.faces))
    meshes.append(torus_grid(5, 4))
    meshes.append(valence5_quad_mesh(perturb=0.05, seed=seed + 1))
    refined, _ = cc_subdivide(meshes[1])
    meshes.append(QuadControlMesh(
        refined.vertices + rng.normal(scale=0.02, size=refined.vertices.shape),
        refined.faces))
    return meshes


def quad_sphere_topology(levels: int) -> QuadControlMesh:
    """Cube subdivided `levels` times with vertices projected to the unit
    sphere; 8 valence-3 vertices remain, everything else is regular."""
    mesh = cube()
    for _ in range(levels):
        mesh, _ = cc_subdivide(mesh)
    v = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1)[:, None]
    return QuadControlMesh(v, mesh.faces)


def fitted_sphere(levels: int = 3, samples_per_face: int = 4, iterations: int = 4,
                  reg: float = 1e-9) -> QuadControlMesh:
    """Least-squares fit of the limit surface to the unit sphere.

    Starts from the projected cube topology and alternates re-projection of
    the surface samples with a linear solve, which drives the radial error
    of the limit surface to a few 1e-5.
    """
    mesh = quad_sphere_topology(levels)
    evaluator = LimitEvaluator(mesh)
    R = regularizer_matrix(build_halfedge(mesh))
    RtR = (R.T @ R).tocsr()
    V = mesh.vertices.copy()
    for _ in range(iterations):
        faces, u, v, pos = sample_grid(evaluator, samples_per_face)
        batch = evaluator.jets(faces, u, v, rows=True)
        L = batch.L
        targets = pos / np.linalg.norm(pos, axis=1)[:, None]
        lhs = (L.T @ L + reg * RtR).tocsc()
        solve = spla.factorized(lhs)
        V = np.column_stack([solve(L.T @ targets[:, c]) for c in range(3)])
        evaluator = evaluator.with_positions(V)
    return QuadControlMesh(V, mesh.faces)


def great_circle_distance(points, source_point):
    p = points / np.linalg.norm(points, axis=1)[:, None]
    s = source_point / np.linalg.norm(source_point)
    return np.arccos(np.clip(p @ s, -1.0, 1.0))


def cotan_heat_geodesic(mesh: TriMesh, source: int, m_factor: float = 1.0):
    """Heat-method geodesics on a triangle mesh (cotangent Laplacian).

    Reference/baseline oracle for comparing triangle-mesh discretizations
    against the subdivision pipeline; not part of the package API.
    """
    v, f = mesh.vertices, np.asarray(mesh.faces, dtype=np.int64)
    n = len(v)
    i1, i2, i3 = f[:, 0], f[:, 1], f[:, 2]
    e1 = v[i3] - v[i2]
    e2 = v[i1] - v[i3]
    e3 = v[i2] - v[i1]
    normal = np.cross(e3, -e2)
    double_area = np.linalg.norm(normal, axis=1)
    unit_n = normal / double_area[:, None]

    def cot(a, b):
        return np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)

    c1 = cot(-e2, e3)
    c2 = cot(-e3, e1)
    c3 = cot(-e1, e2)
    rows = np.concatenate([i1, i2, i2, i3, i3, i1, i1, i2, i3])
    cols = np.concatenate([i2, i1, i3, i2, i1, i3, i1, i2, i3])
    w12, w23, w31 = 0.5 * c3, 0.5 * c1, 0.5 * c2
    vals = np.concatenate([-w12, -w12, -w23, -w23, -w31, -w31,
                           w12 + w31, w12 + w23, w23 + w31])
    Lc = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mass = np.zeros(n)
    for idx in (i1, i2, i3):
        np.add.at(mass, idx, double_area / 6.0)
    M = sp.diags(mass)

    h = np.mean([np.linalg.norm(e, axis=1).mean() for e in (e1, e2, e3)])
    t = m_factor * h * h
    delta = np.zeros(n)
    delta[source] = 1.0
    heat = spla.spsolve((M + t * Lc).tocsc(), delta)

    grad = (np.cross(unit_n, e1) * heat[i1, None]
            + np.cross(unit_n, e2) * heat[i2, None]
            + np.cross(unit_n, e3) * heat[i3, None]) / double_area[:, None]
    norm = np.linalg.norm(grad, axis=1)
    X = np.zeros_like(grad)
    ok = norm > 1e-12
    X[ok] = -grad[ok] / norm[ok, None]

    div = np.zeros(n)
    np.add.at(div, i1, 0.5 * (c3 * np.einsum("ij,ij->i", -e3, X)
                              + c2 * np.einsum("ij,ij->i", e2, X)))
    np.add.at(div, i2, 0.5 * (c1 * np.einsum("ij,ij->i", -e1, X)
                              + c3 * np.einsum("ij,ij->i", e3, X)))
    np.add.at(div, i3, 0.5 * (c2 * np.einsum("ij,ij->i", -e2, X)
                              + c1 * np.einsum("ij,ij->i", e1, X)))

    ones = np.ones((n, 1))
    kkt = sp.bmat([[Lc, ones], [ones.T, None]], format="csc")
    chi = spla.spsolve(kkt, np.concatenate([div, [0.0]]))[:n]
    return chi - chi.min()
