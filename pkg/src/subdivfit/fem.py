"""Galerkin mass and stiffness matrices in the subdivision basis.

Surface integrals are pulled back to the reference quad of every face and
evaluated with tensor-product Gauss-Legendre quadrature:

    (D0)_ij = sum_f sum_q w_q  Phi_i Phi_j sqrt(det G)
    (D1)_ij = sum_f sum_q w_q (grad Phi_i)^T G^-1 (grad Phi_j) sqrt(det G)

where grad is the 2-vector of reference-quad partials and G the first
fundamental form of the limit surface at the node. The Laplace-Beltrami
operator is used through the generalized eigenproblem D1 v = lambda D0 v;
its matrix form D0^-1 D1 is never assembled.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GeometryError
from .evaluation import LimitEvaluator

DENSE_EIGEN_LIMIT = 500


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss-Legendre nodes on (0,1)^2; weights sum to 1."""

    nodes: np.ndarray    # (g*g, 2)
    weights: np.ndarray  # (g*g,)
    order: int

    @staticmethod
    def gauss_legendre(order: int) -> "QuadratureRule":
        if order < 1:
            raise ValueError("quadrature order must be >= 1")
        x, w = np.polynomial.legendre.leggauss(order)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        uu, vv = np.meshgrid(x, x, indexing="xy")
        ww = np.outer(w, w)
        return QuadratureRule(
            nodes=np.column_stack([uu.reshape(-1), vv.reshape(-1)]),
            weights=ww.reshape(-1),
            order=order,
        )


@dataclass
class OperatorMatrices:
    """Sparse mass (SPD) and stiffness (PSD, constants in the kernel)."""

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    area: float
    quadrature_order: int


@dataclass
class SpectralBasis:
    """Smallest eigenpairs of  D1 v = lambda D0 v,  D0-orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray   # (n, K), column k pairs with eigenvalues[k]
    mass: sp.csr_matrix
    residuals: np.ndarray

    @property
    def count(self) -> int:
        return len(self.eigenvalues)


def first_fundamental(jet) -> np.ndarray:
    """Metric tensor [[<du,du>, <du,dv>], [<du,dv>, <dv,dv>]] of a jet."""
    du, dv = np.asarray(jet.du), np.asarray(jet.dv)
    return np.array([
        [float(du @ du), float(du @ dv)],
        [float(du @ dv), float(dv @ dv)],
    ])


def quadrature_jets(evaluator: LimitEvaluator, order: int):
    """Jets with basis rows at every quadrature node of every face.

    Returns (rule, faces, jets, metric) where metric bundles per-node
    g11, g12, g22, sqrt(det G) arrays. Raises when the metric degenerates,
    naming the face.
    """
    rule = QuadratureRule.gauss_legendre(order)
    m = evaluator.control_mesh.n_faces
    nq = rule.nodes.shape[0]
    faces = np.repeat(np.arange(m, dtype=np.int64), nq)
    u = np.tile(rule.nodes[:, 0], m)
    v = np.tile(rule.nodes[:, 1], m)
    jets = evaluator.jets(faces, u, v, rows=True)
    g11 = np.einsum("ij,ij->i", jets.du, jets.du)
    g12 = np.einsum("ij,ij->i", jets.du, jets.dv)
    g22 = np.einsum("ij,ij->i", jets.dv, jets.dv)
    det = g11 * g22 - g12 ** 2
    scale = max(evaluator.control_mesh.bounding_box_diagonal(), 1e-300)
    bad = det <= 1e-14 * scale ** 4
    if np.any(bad):
        face = int(faces[int(np.argmax(bad))])
        raise GeometryError(
            f"singular first fundamental form at a quadrature node of face {face}"
        )
    return rule, faces, jets, (g11, g12, g22, np.sqrt(det))


def assemble(mesh_or_evaluator, order: int = 3) -> OperatorMatrices:
    """Assemble mass and stiffness matrices at the given quadrature order."""
    evaluator = (mesh_or_evaluator if isinstance(mesh_or_evaluator, LimitEvaluator)
                 else LimitEvaluator(mesh_or_evaluator))
    rule, faces, jets, (g11, g12, g22, root) = quadrature_jets(evaluator, order)
    m = evaluator.control_mesh.n_faces
    n = evaluator.control_mesh.n_vertices
    wq = np.tile(rule.weights, m) * root

    # inverse metric entries per node
    det = root ** 2
    i11 = g22 / det
    i12 = -g12 / det
    i22 = g11 / det

    L = jets.L.tocsr()
    L1 = jets.L1.tocsr()
    L2 = jets.L2.tocsr()

    rows, cols = [], []
    d0_vals, d1_vals = [], []
    indptr, indices, data = L.indptr, L.indices, L.data
    ip1, ix1, dat1 = L1.indptr, L1.indices, L1.data
    ip2, ix2, dat2 = L2.indptr, L2.indices, L2.data
    for node in range(L.shape[0]):
        sl = slice(indptr[node], indptr[node + 1])
        idx = indices[sl]
        phi = data[sl]
        # derivative rows share the sparsity pattern of the value row
        s1 = slice(ip1[node], ip1[node + 1])
        s2 = slice(ip2[node], ip2[node + 1])
        du = np.zeros_like(phi)
        dv = np.zeros_like(phi)
        pos = {int(c): k for k, c in enumerate(idx)}
        for c, val in zip(ix1[s1], dat1[s1]):
            du[pos[int(c)]] = val
        for c, val in zip(ix2[s2], dat2[s2]):
            dv[pos[int(c)]] = val

        w = wq[node]
        gi, gj = np.meshgrid(idx, idx, indexing="ij")
        rows.append(gi.reshape(-1))
        cols.append(gj.reshape(-1))
        d0_vals.append((w * np.outer(phi, phi)).reshape(-1))
        a = i11[node] * np.outer(du, du)
        b = i12[node] * (np.outer(du, dv) + np.outer(dv, du))
        c = i22[node] * np.outer(dv, dv)
        d1_vals.append((w * (a + b + c)).reshape(-1))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    d0 = sp.csr_matrix((np.concatenate(d0_vals), (rows, cols)), shape=(n, n))
    d1 = sp.csr_matrix((np.concatenate(d1_vals), (rows, cols)), shape=(n, n))
    d0.sum_duplicates()
    d1.sum_duplicates()
    # symmetrize away roundoff
    d0 = 0.5 * (d0 + d0.T)
    d1 = 0.5 * (d1 + d1.T)
    return OperatorMatrices(mass=d0.tocsr(), stiffness=d1.tocsr(),
                            area=float(wq.sum()), quadrature_order=order)


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    flip = np.sign(vectors[np.argmax(np.abs(vectors), axis=0),
                           np.arange(vectors.shape[1])])
    flip[flip == 0] = 1.0
    return vectors * flip


def eigensolve(matrices: OperatorMatrices, k: int, tol: float = 1e-8,
               method: str = "auto") -> SpectralBasis:
    """K smallest eigenpairs of the generalized problem D1 v = lambda D0 v.

    method 'dense' uses a full generalized solver (the oracle for small n);
    'sparse' uses shift-invert Lanczos around a small negative shift;
    'auto' picks dense for n <= 500.
    """
    d0, d1 = matrices.mass, matrices.stiffness
    n = d0.shape[0]
    if not (0 < k < n):
        raise ValueError("need 0 < k < n")
    if method == "auto":
        method = "dense" if n <= DENSE_EIGEN_LIMIT else "sparse"
    if method == "dense":
        vals, vecs = scipy.linalg.eigh(
            d1.toarray(), d0.toarray(), subset_by_index=[0, k - 1]
        )
    elif method == "sparse":
        sigma = -1e-2 * float(d1.diagonal().sum() / max(d0.diagonal().sum(), 1e-300))
        v0 = np.ones(n) / np.sqrt(n)
        vals, vecs = spla.eigsh(d1, k=k, M=d0, sigma=sigma, which="LM", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    else:
        raise ValueError(f"unknown eigensolve method {method!r}")

    vecs = _canonical_signs(vecs)
    scale = spla.norm(d1) if sp.issparse(d1) else np.linalg.norm(d1)
    residuals = np.empty(k)
    for i in range(k):
        lhs = d1 @ vecs[:, i]
        # floor the denominator so the near-null constant mode is judged
        # against the operator scale rather than against ~0
        denom = max(np.linalg.norm(lhs),
                    1e-6 * scale * np.linalg.norm(vecs[:, i]))
        residuals[i] = np.linalg.norm(lhs - vals[i] * (d0 @ vecs[:, i])) / denom
    if np.any(residuals > max(tol, 1e-10) * 10):
        worst = float(residuals.max())
        raise GeometryError(
            f"eigensolve did not converge: worst relative residual {worst:.3e}"
        )
    return SpectralBasis(eigenvalues=vals, eigenvectors=vecs,
                         mass=matrices.mass, residuals=residuals)
