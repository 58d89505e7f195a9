"""Discrete harmonic forms, Hodge decomposition, the mixed Hodge Laplace
saddle-point solver, and Poincare-constant estimation.

All operators act on cochains of the constrained Whitney complex. The
harmonic space is the kernel of the discrete exterior derivative intersected
with the mass-orthogonal complement of the previous range; its dimension is
cross-checked against the exact relative Betti number and a mismatch is a
hard error.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SimplicialMesh, BoundaryPartition
from .quadrature import simplex_rule
from .topology import betti_relative
from .whitney import Cochain, FESpace, exterior_derivative, mass_matrix

RANK_THRESHOLD = 1e-8   # relative singular-value cutoff for null spaces
SOLVER_TOL = 1e-10


class HodgeError(Exception):
    pass


class DeRhamComplex:
    """The three constrained Whitney spaces on one mesh, with their mass and
    incidence matrices and exact Betti numbers."""

    def __init__(self, mesh, partition):
        self.mesh = mesh
        self.partition = partition
        self.spaces = [FESpace(mesh, partition, k) for k in range(3)]
        self.d = [
            exterior_derivative(self.spaces[0], self.spaces[1]),
            exterior_derivative(self.spaces[1], self.spaces[2]),
        ]
        self.mass = [mass_matrix(s) for s in self.spaces]
        self.betti = betti_relative(mesh, partition)
        self._harmonic = {}
        self._chol = {}

    def d_matrix(self, k):
        """D_k as a sparse matrix; empty blocks outside 0 <= k < n."""
        if 0 <= k < 2:
            return self.d[k]
        rows = self.spaces[k + 1].dim if 0 <= k + 1 <= 2 else 0
        cols = self.spaces[k].dim if 0 <= k <= 2 else 0
        return sp.csr_matrix((rows, cols))

    def space_dim(self, k):
        return self.spaces[k].dim if 0 <= k <= 2 else 0

    def mass_chol(self, k):
        """Lower Cholesky factor L with M_k = L L^T (dense, cached)."""
        if k not in self._chol:
            self._chol[k] = sla.cholesky(self.mass[k].toarray(), lower=True)
        return self._chol[k]


@dataclass
class HarmonicBasis:
    k: int
    space: FESpace
    vectors: np.ndarray  # (dim_k, m), mass-orthonormal columns

    @property
    def dim(self):
        return self.vectors.shape[1]

    def cochains(self):
        return [Cochain(self.space, self.vectors[:, i]) for i in range(self.dim)]

    def project(self, coeffs, mass):
        """Mass-orthogonal projection onto the harmonic space."""
        if self.dim == 0:
            return np.zeros_like(coeffs)
        return self.vectors @ (self.vectors.T @ (mass @ coeffs))


def harmonic_basis(complex_, k):
    """Mass-orthonormal basis of ker d_k intersected with the M-orthogonal
    complement of range d_{k-1}; dimension must equal the Betti number."""
    if k in complex_._harmonic:
        return complex_._harmonic[k]
    dk = complex_.d_matrix(k).toarray()
    mk = complex_.mass[k].toarray()
    nk = complex_.space_dim(k)
    if dk.shape[0] > 0:
        _, svals, vt = sla.svd(dk)
        tol = RANK_THRESHOLD * (svals[0] if len(svals) else 1.0)
        rank = int((svals > tol).sum())
        kernel = vt[rank:].T  # (nk, m)
    else:
        kernel = np.eye(nk)
    dkm1 = complex_.d_matrix(k - 1).toarray()
    if dkm1.shape[1] > 0 and kernel.shape[1] > 0:
        # rows: range d_{k-1} paired against kernel vectors in the mass product
        pairing = dkm1.T @ (mk @ kernel)
        _, svals, vt = sla.svd(pairing) if pairing.size else (None, np.array([]), None)
        if pairing.size:
            tol = RANK_THRESHOLD * (svals[0] if len(svals) and svals[0] > 0 else 1.0)
            rank = int((svals > tol).sum())
            coeffs = vt[rank:].T
            basis = kernel @ coeffs
        else:
            basis = kernel
    else:
        basis = kernel
    expected = complex_.betti[k]
    if basis.shape[1] != expected:
        raise HodgeError(
            f"harmonic dimension {basis.shape[1]} != Betti number {expected} for k={k}"
        )
    # mass Gram-Schmidt
    q = []
    for j in range(basis.shape[1]):
        v = basis[:, j]
        for u in q:
            v = v - u * float(u @ (mk @ v))
        nrm = float(np.sqrt(v @ (mk @ v)))
        q.append(v / nrm)
    vectors = np.column_stack(q) if q else np.zeros((nk, 0))
    hb = HarmonicBasis(k, complex_.spaces[k], vectors)
    complex_._harmonic[k] = hb
    return hb


def hodge_decompose(complex_, cochain):
    """Split a k-cochain into exact + harmonic + coexact parts (all mass
    orthogonal, summing to the input)."""
    k = cochain.space.k
    u = cochain.coeffs
    mk = complex_.mass[k]
    hb = harmonic_basis(complex_, k)
    h = hb.project(u, mk)
    dkm1 = complex_.d_matrix(k - 1)
    if dkm1.shape[1] > 0:
        lt = complex_.mass_chol(k)
        a, *_ = np.linalg.lstsq(lt.T @ dkm1.toarray(), lt.T @ (u - h), rcond=None)
        d_part = dkm1 @ a
    else:
        d_part = np.zeros_like(u)
    delta_part = u - h - d_part
    space = cochain.space
    return (
        Cochain(space, d_part),
        Cochain(space, h),
        Cochain(space, delta_part),
    )


@dataclass
class SaddleSolution:
    sigma: Cochain          # degree k-1 (zero-dimensional space when k=0)
    u: Cochain              # degree k
    p: Cochain              # harmonic part, degree k
    p_coeffs: np.ndarray    # coordinates in the harmonic basis
    residuals: dict
    diagnostics: dict = field(default_factory=dict)


def _load_vector(complex_, k, f, degree=6):
    """Galerkin load <f, phi_i> for a FormField or cochain right-hand side."""
    if isinstance(f, Cochain):
        if f.space is not complex_.spaces[k]:
            raise HodgeError("cochain rhs lives in the wrong space")
        return complex_.mass[k] @ f.coeffs
    space = complex_.spaces[k]
    mesh = complex_.mesh
    bary, wts = simplex_rule(2, degree)
    ncells = mesh.n_simplices(2)
    load = np.zeros(space.dim)
    verts = mesh.vertices[mesh.simplices[2]]
    for q, w in zip(bary, wts):
        pts = np.einsum("a,maj->mj", q, verts)
        fv = f(pts)  # (T, ncomp)
        basis = space.basis_values(np.arange(ncells), np.tile(q, (ncells, 1)))
        contrib = (basis * fv[:, None, :]).sum(axis=2) * (w * mesh.volume)[:, None]
        for t in range(ncells):
            for a, g in enumerate(space.cell_basis_ids(t)):
                loc = space.global_to_local[g]
                if loc >= 0:
                    load[loc] += contrib[t, a]
    return load


def solve_mixed_hodge(complex_, k, f, degree=6):
    """Solve the discrete mixed Hodge Laplace system for degree k.

    Unknowns (sigma, u, p): sigma in degree k-1, u in degree k, p harmonic;
    the three Galerkin equations are assembled into one symmetric indefinite
    block system and solved by sparse LU.
    """
    if not 0 <= k <= 2:
        raise HodgeError("degree k out of range")
    nk = complex_.space_dim(k)
    nkm1 = complex_.space_dim(k - 1) if k > 0 else 0
    mk = complex_.mass[k]
    hb = harmonic_basis(complex_, k)
    load = _load_vector(complex_, k, f, degree=degree)

    dkm1 = complex_.d_matrix(k - 1) if k > 0 else sp.csr_matrix((nk, 0))
    dk = complex_.d_matrix(k)
    b_blk = mk @ dkm1 if k > 0 else sp.csr_matrix((nk, 0))
    if dk.shape[0] > 0:
        c_blk = dk.T @ complex_.mass[k + 1] @ dk
    else:
        c_blk = sp.csr_matrix((nk, nk))
    g_blk = sp.csr_matrix(mk @ hb.vectors) if hb.dim else sp.csr_matrix((nk, 0))

    blocks = [
        [-(complex_.mass[k - 1]) if k > 0 else None, b_blk.T if k > 0 else None, None],
        [b_blk if k > 0 else None, c_blk, g_blk if hb.dim else None],
        [None, g_blk.T if hb.dim else None, None],
    ]
    # drop empty block rows/cols
    keep = [k > 0, True, hb.dim > 0]
    blocks = [
        [blocks[i][j] for j in range(3) if keep[j]] for i in range(3) if keep[i]
    ]
    system = sp.bmat(blocks, format="csc")
    rhs = np.concatenate(
        ([np.zeros(nkm1)] if k > 0 else [])
        + [load]
        + ([np.zeros(hb.dim)] if hb.dim else [])
    )
    lu = spla.splu(system)
    sol = lu.solve(rhs)
    res = system @ sol - rhs
    data_norm = float(np.linalg.norm(rhs))
    rel = float(np.linalg.norm(res)) / max(data_norm, 1e-300)
    if rel > 1e3 * SOLVER_TOL:
        raise HodgeError(f"singular mixed system: relative residual {rel:.2e}")

    off = 0
    sigma = sol[:nkm1]
    off += nkm1
    u = sol[off : off + nk]
    off += nk
    c = sol[off:] if hb.dim else np.zeros(0)
    p = hb.vectors @ c if hb.dim else np.zeros(nk)

    eq_res = {
        "relative": rel,
        "orthogonality": float(
            np.abs(hb.vectors.T @ (mk @ u)).max() if hb.dim else 0.0
        ),
    }
    sigma_space = complex_.spaces[k - 1] if k > 0 else None
    return SaddleSolution(
        sigma=Cochain(sigma_space, sigma) if sigma_space else None,
        u=Cochain(complex_.spaces[k], u),
        p=Cochain(complex_.spaces[k], p),
        p_coeffs=c,
        residuals=eq_res,
        diagnostics={"n": system.shape[0], "nnz": int(system.nnz)},
    )


def solution_norms(complex_, k, solution):
    """(|sigma| + |u|_{H d} + |p|) building blocks for stability checks."""
    mk = complex_.mass[k]
    u = solution.u.coeffs
    norms = {}
    norms["u_l2"] = float(np.sqrt(u @ (mk @ u)))
    dk = complex_.d_matrix(k)
    if dk.shape[0] > 0:
        du = dk @ u
        norms["du_l2"] = float(np.sqrt(du @ (complex_.mass[k + 1] @ du)))
    else:
        norms["du_l2"] = 0.0
    if solution.sigma is not None:
        s = solution.sigma.coeffs
        norms["sigma_l2"] = float(np.sqrt(s @ (complex_.mass[k - 1] @ s)))
    else:
        norms["sigma_l2"] = 0.0
    p = solution.p.coeffs
    norms["p_l2"] = float(np.sqrt(p @ (mk @ p)))
    norms["total"] = (
        norms["sigma_l2"] + norms["u_l2"] + norms["du_l2"] + norms["p_l2"]
    )
    return norms


def poincare_constant(complex_, k, tol=1e-9, max_iterations=2000, seed=3):
    """Discrete Poincare-Friedrichs constant 1/sqrt(lambda_min) of
    (d^T M d) x = lambda M x on the complement of ker d.

    Inverse iteration with a small spectral shift; kernel components are
    deflated (mass-orthogonal projection) every step. The drift tolerance is
    on the Rayleigh quotient; clusters of nearly degenerate lowest modes
    (symmetric boxes) converge at cluster level, which bounds the constant
    to well below the tolerances any caller checks.
    """
    if k >= 2:
        raise HodgeError("Poincare constant needs k < n")
    dk = complex_.d_matrix(k)
    mk = complex_.mass[k]
    a = (dk.T @ complex_.mass[k + 1] @ dk).tocsc()
    dk_dense = dk.toarray()
    _, svals, vt = sla.svd(dk_dense)
    cutoff = RANK_THRESHOLD * (svals[0] if len(svals) else 1.0)
    rank = int((svals > cutoff).sum())
    kernel = vt[rank:].T
    # mass-orthonormalize the kernel for clean deflation
    qk = []
    for j in range(kernel.shape[1]):
        v = kernel[:, j]
        for u in qk:
            v = v - u * float(u @ (mk @ v))
        v = v / float(np.sqrt(v @ (mk @ v)))
        qk.append(v)
    kernel = np.column_stack(qk) if qk else np.zeros((a.shape[0], 0))

    scale = a.diagonal().sum() / max(mk.diagonal().sum(), 1e-300)
    shift = 1e-6 * scale
    lu = spla.splu((a + shift * mk).tocsc())

    def deflate(x):
        if kernel.shape[1]:
            return x - kernel @ (kernel.T @ (mk @ x))
        return x

    rng = np.random.default_rng(seed)
    x = deflate(rng.standard_normal(a.shape[0]))
    x = x / np.sqrt(x @ (mk @ x))
    lam_old = np.inf
    for _ in range(max_iterations):
        y = deflate(lu.solve(mk @ x))
        y = y / np.sqrt(y @ (mk @ y))
        lam = float(y @ (a @ y))
        x = y
        if abs(lam - lam_old) <= tol * max(abs(lam), 1e-300):
            break
        lam_old = lam
    else:
        raise HodgeError("inverse iteration for the Poincare constant did not converge")
    if lam <= 0:
        raise HodgeError("nonpositive eigenvalue in Poincare estimation")
    return 1.0 / np.sqrt(lam)
