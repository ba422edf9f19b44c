"""Shape analysis on the spectral basis of a subdivision surface.

Everything here consumes the generalized eigenpairs of (stiffness, mass)
and stays intrinsic: wave-kernel signatures per control vertex, heat-method
geodesic fields, and a minimal functional-map matcher with nearest-neighbor
point-map readout.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import GeometryError
from .evaluation import LimitEvaluator
from .fem import OperatorMatrices, SpectralBasis, quadrature_jets
from .subdivision import cc_subdivide, refine_for_visualization


@dataclass
class WKSDescriptor:
    """Per-vertex wave-kernel signature over a log-energy grid.

    Each energy level is normalized so its weights over the eigenvalues sum
    to one; the zero eigenvalue (constant mode) is excluded.
    """

    values: np.ndarray    # (n, E)
    energies: np.ndarray  # (E,)
    sigma: float


@dataclass
class GeodesicField:
    """Geodesic-distance coefficients over the subdivision basis.

    Shifted so the minimum over the twice-refined coefficient field is 0.
    """

    coefficients: np.ndarray
    source: int
    time: float
    degenerate_nodes: int = 0


@dataclass
class FunctionalMap:
    """Linear map C between truncated eigenbases (spectral coefficients
    of shape A to shape B) and the residual of its least-squares fit."""

    matrix: np.ndarray
    residual: float


def wks(basis: SpectralBasis, levels: int = 100, sigma_factor: float = 2.0) -> WKSDescriptor:
    """Wave-kernel signature of every control vertex.

    Energies are uniformly spaced on [log lambda_2, log lambda_K]; the
    Gaussian width is sigma_factor times the grid spacing.
    """
    if basis.count < 2:
        raise ValueError("wks needs at least 2 eigenpairs")
    lam = basis.eigenvalues[1:]
    phi2 = basis.eigenvectors[:, 1:] ** 2
    log_lam = np.log(np.maximum(lam, 1e-300))
    e_min, e_max = log_lam[0], log_lam[-1]
    energies = np.linspace(e_min, e_max, levels)
    spacing = (e_max - e_min) / max(levels - 1, 1)
    sigma = sigma_factor * spacing if spacing > 0 else 1.0
    gauss = np.exp(-((energies[:, None] - log_lam[None, :]) ** 2) / (2.0 * sigma ** 2))
    norm = 1.0 / gauss.sum(axis=1)
    values = (phi2 @ gauss.T) * norm[None, :]
    return WKSDescriptor(values=values, energies=energies, sigma=sigma)


def mean_edge_length_refined(mesh) -> float:
    """Mean edge length of the once-subdivided mesh. Control edges
    overestimate the intrinsic scale of the limit surface."""
    refined, _ = cc_subdivide(mesh)
    edges = refined.edges()
    vec = refined.vertices[edges[:, 0]] - refined.vertices[edges[:, 1]]
    return float(np.mean(np.linalg.norm(vec, axis=1)))


def heat_geodesic(mesh_or_evaluator, matrices: OperatorMatrices, source: int,
                  m_factor: float = 1.0) -> GeodesicField:
    """Geodesic distance field from a source control vertex by the heat method.

    Three steps: short-time heat diffusion (D0 + t D1) f = delta_source,
    normalization of the surface gradient X = -grad f / |grad f| at the
    quadrature nodes, and the Poisson solve D1 chi = -div X with the
    constant nullspace pinned by a mean-zero constraint.
    """
    evaluator = (mesh_or_evaluator if isinstance(mesh_or_evaluator, LimitEvaluator)
                 else LimitEvaluator(mesh_or_evaluator))
    n = evaluator.control_mesh.n_vertices
    if not (0 <= source < n):
        raise ValueError("source vertex out of range")
    d0, d1 = matrices.mass, matrices.stiffness

    h = mean_edge_length_refined(evaluator.control_mesh)
    t = m_factor * h * h
    delta = np.zeros(n)
    delta[source] = 1.0
    # Diffuse the source basis hat (rhs = D0 e_src) with a row-sum lumped
    # mass matrix. The consistent Galerkin mass is not monotone at short
    # times and a raw point load makes the far field oscillate in sign,
    # which destroys the normalized gradient direction.
    lumped = sp.diags(np.asarray(d0.sum(axis=1)).ravel())
    f = spla.spsolve((lumped + t * d1).tocsc(), d0 @ delta)

    rule, faces, jets, (g11, g12, g22, root) = quadrature_jets(
        evaluator, matrices.quadrature_order
    )
    m = evaluator.control_mesh.n_faces
    wq = np.tile(rule.weights, m) * root

    # reference gradient of f, then raise through G^-1 and the jacobian
    fu = jets.L1 @ f
    fv = jets.L2 @ f
    det = root ** 2
    a = (g22 * fu - g12 * fv) / det
    b = (-g12 * fu + g11 * fv) / det
    grad = jets.du * a[:, None] + jets.dv * b[:, None]
    norm = np.linalg.norm(grad, axis=1)
    ok = norm > 1e-12
    degenerate = int(np.count_nonzero(~ok))
    X = np.zeros_like(grad)
    X[ok] = -grad[ok] / norm[ok, None]

    # Poisson rhs: minimizing int ||grad chi - X||^2 over the basis gives
    # (D1 chi)_i = + int <grad Phi_i, X>  for the PSD stiffness convention
    # D1_ij = int <grad Phi_i, grad Phi_j> used here.
    jx = np.einsum("ij,ij->i", jets.du, X)
    jy = np.einsum("ij,ij->i", jets.dv, X)
    y0 = (g22 * jx - g12 * jy) / det
    y1 = (-g12 * jx + g11 * jy) / det
    rhs = jets.L1.T @ (wq * y0) + jets.L2.T @ (wq * y1)

    ones = np.ones((n, 1))
    kkt = sp.bmat([[d1, ones], [ones.T, None]], format="csc")
    sol = spla.spsolve(kkt, np.concatenate([rhs, [0.0]]))
    chi = sol[:n]

    _, refined_field = refine_for_visualization(evaluator.control_mesh, chi, 2)
    chi = chi - float(refined_field.min())
    return GeodesicField(coefficients=chi, source=source, time=t,
                         degenerate_nodes=degenerate)


def _spectral_coefficients(basis: SpectralBasis, descriptors: np.ndarray, k: int):
    """Project per-vertex descriptor columns onto the first k eigenvectors
    through the D0 inner product."""
    return basis.eigenvectors[:, :k].T @ (basis.mass @ descriptors)


def functional_map(basis_a: SpectralBasis, basis_b: SpectralBasis,
                   desc_a: np.ndarray, desc_b: np.ndarray,
                   k, mu: float = 0.0) -> FunctionalMap:
    """Least-squares functional map from shape A's eigenbasis to shape B's.

    Solves row-wise  min ||C A - B||_F^2 + mu sum_ij (lam_i^B - lam_j^A)^2 C_ij^2
    in closed form. k may be one truncation for both shapes or a pair
    (k_a, k_b).
    """
    if np.isscalar(k):
        k_a = k_b = int(k)
    else:
        k_a, k_b = (int(x) for x in k)
    if k_a > basis_a.count or k_b > basis_b.count:
        raise ValueError("k exceeds available eigenpairs")
    A = _spectral_coefficients(basis_a, desc_a, k_a)
    B = _spectral_coefficients(basis_b, desc_b, k_b)
    gram = A @ A.T
    lam_a = basis_a.eigenvalues[:k_a]
    lam_b = basis_b.eigenvalues[:k_b]
    if mu == 0.0:
        svals = np.linalg.svd(gram, compute_uv=False)
        if svals[-1] < 1e-12 * max(svals[0], 1e-300):
            raise GeometryError(
                "descriptor Gram matrix is rank deficient; pass mu > 0"
            )
    C = np.empty((k_b, k_a))
    At_B = A @ B.T   # (k_a, k_b)
    for i in range(k_b):
        reg = mu * (lam_b[i] - lam_a) ** 2
        C[i] = np.linalg.solve(gram + np.diag(reg), At_B[:, i])
    residual = float(np.linalg.norm(C @ A - B))
    return FunctionalMap(matrix=C, residual=residual)


def point_map(fmap: FunctionalMap, basis_a: SpectralBasis,
              basis_b: SpectralBasis) -> np.ndarray:
    """Per-vertex correspondence A -> B by nearest spectral coordinates.

    Vertex a maps to argmin_b ||C phi_A(a) - phi_B(b)||; exact ties resolve
    to the smallest index.
    """
    k_b, k_a = fmap.matrix.shape
    emb_a = basis_a.eigenvectors[:, :k_a] @ fmap.matrix.T
    emb_b = basis_b.eigenvectors[:, :k_b]
    tree = cKDTree(emb_b)
    k = min(2, emb_b.shape[0])
    dist, idx = tree.query(emb_a, k=k)
    if k == 2:
        tied = dist[:, 0] == dist[:, 1]
        return np.where(tied, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0]).astype(np.int64)
    return np.asarray(idx, dtype=np.int64)
