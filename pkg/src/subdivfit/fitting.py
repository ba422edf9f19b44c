"""Robust surface fitting by majorize-minimize with a second-order
squared-distance model.

The energy being minimized over the control vertices V is

    E = sum_j ||Phi(u_j) - p_j||^q
        + alpha * sum_j sum_i |<t_j, d_i Phi(u_j)>|^q
        + beta * ||R V||^2,           q in (1, 2],

with correspondences u_j refreshed between outer iterations from a
kd-tree over a uniform surface sampling. Each outer iteration majorizes
the q-powers by weighted quadratics, replaces the squared distance with
the curvature-aware quadratic model at the footpoint, and solves the
resulting sparse SPD system by warm-started conjugate gradients. The
iteration stops as soon as the true energy no longer decreases; the
best-energy iterate is returned.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import GeometryError
from .evaluation import LimitEvaluator, sample_grid
from .halfedge import HalfedgeTopology, build_halfedge
from .mesh import PointCloud, QuadControlMesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    """Parameters of the robust fit.

    eps_residual defaults to 1e-6 of the cloud bounding-box diagonal when
    left as None; alpha and beta are shape dependent and must be chosen by
    the caller.
    """

    q: float = 1.3
    alpha: float = 0.0
    beta: float = 0.0
    eps_residual: float = None
    eps_tangent: float = 1e-6
    samples_per_face: int = 4
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    outer_max_iter: int = 50
    energy_decrease_tol: float = 1e-4

    def __post_init__(self):
        if not (1.0 < self.q <= 2.0):
            raise ValueError("q must lie in (1, 2]")
        for name in ("alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.samples_per_face < 2:
            raise ValueError("samples_per_face must be >= 2")

    def resolved(self, cloud: PointCloud) -> "FitConfig":
        """Fill scale-dependent defaults from the cloud."""
        eps = self.eps_residual
        if eps is None:
            eps = 1e-6 * max(cloud.bounding_box_diagonal(), 1e-300)
        alpha = self.alpha if cloud.normals is not None else 0.0
        return replace(self, eps_residual=eps, alpha=alpha)


@dataclass
class Correspondences:
    """Per input point: parameter of the nearest surface sample."""

    faces: np.ndarray
    u: np.ndarray
    v: np.ndarray
    footpoints: np.ndarray
    distances: np.ndarray


@dataclass
class QuadDistanceModels:
    """Batched curvature-aware quadratic distance models.

    matrices[j] = (d/(d+rho1)) tau1 tau1^T + (d/(d+rho2)) tau2 tau2^T + nu nu^T
    with magnitudes of d and the curvature radii, so each matrix is PSD with
    eigenvalues in [0, 1].
    """

    tau1: np.ndarray
    tau2: np.ndarray
    normal: np.ndarray
    rho: np.ndarray
    distances: np.ndarray
    matrices: np.ndarray


@dataclass
class MMWeights:
    point: np.ndarray            # w_j = (q/2) max(d_j, eps_d)^(q-2)
    tangent: np.ndarray = None   # (2, N), (alpha q/2) max(|<t, d_i Phi>|, eps)^(q-2)


@dataclass
class QuadraticSystem:
    """Sparse SPD quadratic model  V -> sum_ab V_a^T Q_ab V_b - 2 <b, V> + c."""

    blocks: dict
    rhs: np.ndarray
    constant: float

    def apply(self, V: np.ndarray) -> np.ndarray:
        out = np.zeros_like(V)
        for (a, b), block in self.blocks.items():
            out[:, a] += block @ V[:, b]
            if a != b:
                out[:, b] += block.T @ V[:, a]
        return out

    def value(self, V: np.ndarray) -> float:
        return float(np.sum(V * self.apply(V)) - 2.0 * np.sum(self.rhs * V)
                     + self.constant)


def regularizer_matrix(topology: HalfedgeTopology) -> sp.csr_matrix:
    """One row per undirected edge with +1/-1 at its endpoints, so that
    ||R V||^2 sums squared edge vectors. Translations are in the nullspace."""
    e = topology.n_edges
    rows = np.repeat(np.arange(e), 2)
    cols = topology.edge_vertices.reshape(-1)
    vals = np.tile([1.0, -1.0], e)
    return sp.csr_matrix((vals, (rows, cols)), shape=(e, topology.n_vertices))


def update_correspondences(evaluator: LimitEvaluator, cloud: PointCloud,
                           samples_per_face: int) -> Correspondences:
    """Nearest surface sample per input point, exact among the m*s^2 samples.

    Ties at exactly equal distance resolve to the smallest sample index.
    """
    faces, u, v, positions = sample_grid(evaluator, samples_per_face)
    tree = cKDTree(positions)
    k = min(2, positions.shape[0])
    dist, idx = tree.query(cloud.points, k=k)
    if k == 2:
        tied = dist[:, 0] == dist[:, 1]
        pick = np.where(tied, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])
        dist = dist[:, 0]
    else:
        pick, dist = idx, dist
    pick = np.asarray(pick, dtype=np.int64)
    return Correspondences(
        faces=faces[pick], u=u[pick], v=v[pick],
        footpoints=positions[pick],
        distances=np.linalg.norm(cloud.points - positions[pick], axis=1),
    )


def _sym2x2_eig(a, b, c):
    """Eigen-decomposition of symmetric [[a, b], [b, c]] batches.

    Returns (lam1, lam2, v1, v2) with lam1 >= lam2 and unit eigenvectors
    stacked as (..., 2) arrays.
    """
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b ** 2, 0.0))
    lam1 = half_tr + disc
    lam2 = half_tr - disc
    # eigenvector of lam1: (b, lam1 - a) or (lam1 - c, b), whichever is larger
    e1 = np.stack([b, lam1 - a], axis=-1)
    e2 = np.stack([lam1 - c, b], axis=-1)
    use2 = np.linalg.norm(e2, axis=-1) > np.linalg.norm(e1, axis=-1)
    v1 = np.where(use2[..., None], e2, e1)
    norm = np.linalg.norm(v1, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.array([1.0, 0.0]), v1.shape)
    v1 = np.where(norm > 1e-300, v1 / np.maximum(norm, 1e-300), fallback)
    v2 = np.stack([-v1[..., 1], v1[..., 0]], axis=-1)
    return lam1, lam2, v1, v2


def quad_distance_models(jets, points, scale, det_floor=1e-14) -> QuadDistanceModels:
    """Build the quadratic distance model at each jet for each query point.

    The principal frame comes from the shape operator (second fundamental
    form measured against the first); curvature radii are clamped to
    [1e-3, 1e6] * scale before assembling the matrix.
    """
    du, dv = jets.du, jets.dv
    g11 = np.einsum("ij,ij->i", du, du)
    g12 = np.einsum("ij,ij->i", du, dv)
    g22 = np.einsum("ij,ij->i", dv, dv)
    det = g11 * g22 - g12 ** 2
    bad = det <= det_floor * scale ** 4
    if np.any(bad):
        raise GeometryError(
            f"singular first fundamental form at {int(np.count_nonzero(bad))} "
            "correspondence(s); the control mesh is degenerate there "
            "(consider increasing beta)"
        )
    normal = np.cross(du, dv)
    normal = normal / np.linalg.norm(normal, axis=1, keepdims=True)

    e = np.einsum("ij,ij->i", jets.duu, normal)
    f = np.einsum("ij,ij->i", jets.duv, normal)
    g = np.einsum("ij,ij->i", jets.dvv, normal)

    # G^(-1/2) through the eigen-frame of G
    lam1, lam2, w1, w2 = _sym2x2_eig(g11, g12, g22)
    inv_s1 = 1.0 / np.sqrt(lam1)
    inv_s2 = 1.0 / np.sqrt(lam2)
    # columns of S = G^(-1/2): S = w1 w1^T / sqrt(lam1) + w2 w2^T / sqrt(lam2)
    s11 = inv_s1 * w1[:, 0] ** 2 + inv_s2 * w2[:, 0] ** 2
    s12 = inv_s1 * w1[:, 0] * w1[:, 1] + inv_s2 * w2[:, 0] * w2[:, 1]
    s22 = inv_s1 * w1[:, 1] ** 2 + inv_s2 * w2[:, 1] ** 2

    # M = S II S, symmetric; its eigenvalues are the principal curvatures
    m11 = s11 * (e * s11 + f * s12) + s12 * (f * s11 + g * s12)
    m12 = s11 * (e * s12 + f * s22) + s12 * (f * s12 + g * s22)
    m22 = s12 * (e * s12 + f * s22) + s22 * (f * s12 + g * s22)
    k1, k2, z1, z2 = _sym2x2_eig(m11, m12, m22)

    # y = S z pulled to 3D through the jacobian gives an orthonormal frame
    def tangent_dir(z):
        y0 = s11 * z[:, 0] + s12 * z[:, 1]
        y1 = s12 * z[:, 0] + s22 * z[:, 1]
        t = du * y0[:, None] + dv * y1[:, None]
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    tau1 = tangent_dir(z1)
    tau2 = tangent_dir(z2)

    rho = np.stack([
        1.0 / np.maximum(np.abs(k1), 1e-300),
        1.0 / np.maximum(np.abs(k2), 1e-300),
    ], axis=1)
    rho = np.clip(rho, 1e-3 * scale, 1e6 * scale)

    d = np.linalg.norm(points - jets.position, axis=1)
    c1 = (d / (d + rho[:, 0]))[:, None, None]
    c2 = (d / (d + rho[:, 1]))[:, None, None]
    matrices = (
        c1 * np.einsum("ij,ik->ijk", tau1, tau1)
        + c2 * np.einsum("ij,ik->ijk", tau2, tau2)
        + np.einsum("ij,ik->ijk", normal, normal)
    )
    return QuadDistanceModels(tau1=tau1, tau2=tau2, normal=normal, rho=rho,
                              distances=d, matrices=matrices)


def quad_distance_model(jet, point, scale=1.0):
    """Single-jet convenience wrapper around quad_distance_models.

    Returns a QuadDistanceModels holding one entry; its .matrices[0] is the
    3x3 PSD model matrix at the jet's footpoint.
    """

    class _One:
        pass

    batch = _One()
    for name in ("position", "du", "dv", "duu", "duv", "dvv"):
        setattr(batch, name, np.asarray(getattr(jet, name), dtype=np.float64)[None, :])
    return quad_distance_models(batch, np.asarray(point, dtype=np.float64)[None, :],
                                scale)


def mm_weights(distances, tangent_residuals, config: FitConfig) -> MMWeights:
    """Majorize-minimize weights at the current iterate.

    Residuals are clamped from below before the (q-2)-power so weights stay
    finite at zero residual.
    """
    q = config.q
    w = 0.5 * q * np.maximum(distances, config.eps_residual) ** (q - 2.0)
    tw = None
    if tangent_residuals is not None and config.alpha > 0:
        tw = (0.5 * config.alpha * q
              * np.maximum(np.abs(tangent_residuals), config.eps_tangent) ** (q - 2.0))
    return MMWeights(point=w, tangent=tw)


def tangent_residuals(jets, cloud: PointCloud):
    """<t_j, d_i Phi(u_j)> stacked as a (2, N) array, or None without normals."""
    if cloud.normals is None:
        return None
    return np.stack([
        np.einsum("ij,ij->i", cloud.normals, jets.du),
        np.einsum("ij,ij->i", cloud.normals, jets.dv),
    ])


def energy_terms(jets, cloud: PointCloud, corr: Correspondences, config: FitConfig,
                 R: sp.csr_matrix, V: np.ndarray):
    """Weighted energy contributions (point, tangent, regularizer)."""
    e_point = float(np.sum(corr.distances ** config.q))
    tres = tangent_residuals(jets, cloud)
    e_tan = 0.0
    if tres is not None and config.alpha > 0:
        e_tan = config.alpha * float(np.sum(np.abs(tres) ** config.q))
    e_reg = config.beta * float(np.sum((R @ V) ** 2))
    return e_point, e_tan, e_reg


def energy(evaluator: LimitEvaluator, cloud: PointCloud, corr: Correspondences,
           config: FitConfig, R: sp.csr_matrix = None) -> float:
    """The true robust energy at the current control vertices."""
    config = config.resolved(cloud)
    if R is None:
        R = regularizer_matrix(build_halfedge(evaluator.control_mesh))
    jets = evaluator.jets(corr.faces, corr.u, corr.v)
    e_point, e_tan, e_reg = energy_terms(
        jets, cloud, corr, config, R, evaluator.control_mesh.vertices
    )
    return e_point + e_tan + e_reg


def assemble_quadratic(jets, cloud: PointCloud, weights: MMWeights,
                       models: QuadDistanceModels, config: FitConfig,
                       R: sp.csr_matrix) -> QuadraticSystem:
    """Normal equations of the weighted least-squares majorizer.

    jets must carry basis rows (L, L1, L2). The blocks couple coordinates
    through the 3x3 model matrices; the tangent and regularizer terms add
    rank-one and Laplacian-like pieces.
    """
    L, L1, L2 = jets.L, jets.L1, jets.L2
    if L is None:
        raise ValueError("jets were evaluated without basis rows")
    w = weights.point
    D = models.matrices
    p = cloud.points
    Dp = np.einsum("ijk,ik->ij", D, p)
    RtR = (R.T @ R).tocsr()

    blocks = {}
    for a in range(3):
        for b in range(a, 3):
            block = (L.T @ sp.diags(w * D[:, a, b]) @ L).tocsr()
            if weights.tangent is not None:
                t = cloud.normals
                for i, Li in enumerate((L1, L2)):
                    block = block + (
                        Li.T @ sp.diags(weights.tangent[i] * t[:, a] * t[:, b]) @ Li
                    ).tocsr()
            if a == b:
                block = block + config.beta * RtR
            blocks[(a, b)] = block

    rhs = np.stack([L.T @ (w * Dp[:, a]) for a in range(3)], axis=1)
    constant = float(np.sum(w * np.einsum("ij,ij->i", p, Dp)))
    return QuadraticSystem(blocks=blocks, rhs=rhs, constant=constant)


def cg_solve(system: QuadraticSystem, V0: np.ndarray, tol: float = 1e-8,
             max_iter: int = 500):
    """Conjugate gradients on the block system, warm-started at V0.

    Returns (V, iterations, relative_residual). Raises GeometryError when a
    direction of negative curvature reveals an indefinite system.
    """
    x = np.array(V0, dtype=np.float64, copy=True)
    b = system.rhs
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(x), 0, 0.0
    r = b - system.apply(x)
    p = r.copy()
    rs = float(np.sum(r * r))
    it = 0
    while np.sqrt(rs) / bnorm > tol and it < max_iter:
        Ap = system.apply(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 0.0:
            raise GeometryError(
                f"conjugate gradients found negative curvature (p^T Q p = {pAp:.3e}); "
                "the quadratic system is not positive definite"
            )
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(np.sum(r * r))
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    rel = float(np.sqrt(rs) / bnorm)
    if rel > tol:
        logger.warning("cg_solve hit max_iter=%d at residual %.3e", max_iter, rel)
    return x, it, rel


@dataclass
class FitResult:
    mesh: QuadControlMesh
    history: list = field(default_factory=list)
    best_iteration: int = 0
    stop_reason: str = ""

    def energy_log_rows(self):
        """Rows (iter, E_point, E_tangent, E_reg, E_total) for the CSV log."""
        return [(h["iteration"], h["e_point"], h["e_tangent"], h["e_reg"], h["e_total"])
                for h in self.history]


def fit(cloud: PointCloud, init_mesh: QuadControlMesh, config: FitConfig) -> FitResult:
    """Run the outer fitting loop; returns the best-energy iterate.

    Each outer iteration refreshes correspondences, evaluates the true
    energy (that is what the history reports), then builds and solves the
    quadratic majorizer. Stops when the energy increases, stalls below
    energy_decrease_tol relative decrease, or outer_max_iter is reached.
    """
    config = config.resolved(cloud)
    scale = max(cloud.bounding_box_diagonal(), 1e-300)
    topology = build_halfedge(init_mesh)
    R = regularizer_matrix(topology)
    evaluator = LimitEvaluator(init_mesh)
    V = init_mesh.vertices.copy()

    history = []
    best_V = V.copy()
    best_energy = np.inf
    best_iter = 0
    stop_reason = f"outer_max_iter={config.outer_max_iter} reached"
    prev_energy = np.inf

    for iteration in range(config.outer_max_iter):
        corr = update_correspondences(evaluator, cloud, config.samples_per_face)
        jets = evaluator.jets(corr.faces, corr.u, corr.v, rows=True)
        e_point, e_tan, e_reg = energy_terms(jets, cloud, corr, config, R, V)
        e_total = e_point + e_tan + e_reg
        history.append({
            "iteration": iteration, "e_point": e_point, "e_tangent": e_tan,
            "e_reg": e_reg, "e_total": e_total,
        })
        if e_total < best_energy:
            best_energy = e_total
            best_V = V.copy()
            best_iter = iteration
        if iteration > 0:
            if e_total > prev_energy:
                stop_reason = "energy increased"
                break
            if prev_energy - e_total < config.energy_decrease_tol * abs(prev_energy):
                stop_reason = "energy decrease below tolerance"
                break
        prev_energy = e_total

        models = quad_distance_models(jets, cloud.points, scale)
        weights = mm_weights(corr.distances, tangent_residuals(jets, cloud), config)
        system = assemble_quadratic(jets, cloud, weights, models, config, R)
        V, _, _ = cg_solve(system, V, tol=config.cg_tol, max_iter=config.cg_max_iter)
        evaluator = evaluator.with_positions(V)

    mesh = QuadControlMesh(best_V, init_mesh.faces, validate=False)
    return FitResult(mesh=mesh, history=history, best_iteration=best_iter,
                     stop_reason=stop_reason)


def point_surface_distance(evaluator: LimitEvaluator, points,
                           samples_per_face: int = 8, starts: int = 3,
                           iterations: int = 15):
    """Accurate point-to-limit-surface distances.

    Seeds Gauss-Newton parameter refinement from the nearest few grid
    samples (which may sit on different faces) and keeps the best result,
    so boundary minima are found through the neighboring face's seed.
    """
    points = np.asarray(points, dtype=np.float64)
    faces, u, v, positions = sample_grid(evaluator, samples_per_face)
    tree = cKDTree(positions)
    k = min(starts, positions.shape[0])
    _, idx = tree.query(points, k=k)
    idx = idx.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for s in range(k):
        fi = faces[idx[:, s]]
        uu = u[idx[:, s]].copy()
        vv = v[idx[:, s]].copy()
        for _ in range(iterations):
            jets = evaluator.jets(fi, uu, vv)
            r = jets.position - points
            j11 = np.einsum("ij,ij->i", jets.du, jets.du)
            j12 = np.einsum("ij,ij->i", jets.du, jets.dv)
            j22 = np.einsum("ij,ij->i", jets.dv, jets.dv)
            g1 = np.einsum("ij,ij->i", jets.du, r)
            g2 = np.einsum("ij,ij->i", jets.dv, r)
            det = np.maximum(j11 * j22 - j12 ** 2, 1e-300)
            du = -(j22 * g1 - j12 * g2) / det
            dv = -(-j12 * g1 + j11 * g2) / det
            uu = np.clip(uu + du, 0.0, 1.0)
            vv = np.clip(vv + dv, 0.0, 1.0)
        jets = evaluator.jets(fi, uu, vv)
        best = np.minimum(best, np.linalg.norm(jets.position - points, axis=1))
    return best
