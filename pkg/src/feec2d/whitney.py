"""Lowest-order trimmed (Whitney) finite element spaces with essential
boundary conditions.

Degrees of freedom are integrals over free k-simplices in the sorted-tuple
orientation; simplices in the closure of the boundary triangulation of
Gamma_T carry no DOF, which imposes the essential condition by construction.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .forms import FormField, n_components
from .quadrature import simplex_rule
from .topology import relative_complex


class WhitneyError(Exception):
    pass


class FESpace:
    """Whitney k-form space on a mesh with DOFs removed on Gamma_T."""

    def __init__(self, mesh, partition, k):
        if mesh.dim != 2:
            raise WhitneyError("Whitney spaces implemented for 2D meshes")
        if not 0 <= k <= mesh.dim:
            raise WhitneyError(f"degree k={k} out of range")
        self.mesh = mesh
        self.partition = partition
        self.k = k
        self._basis_table = None
        closure = partition.gamma_t_closure()
        constrained = closure.get(k, set())
        self.free = np.array(
            [i for i in range(mesh.n_simplices(k)) if i not in constrained], dtype=int
        )
        self.global_to_local = np.full(mesh.n_simplices(k), -1, dtype=int)
        self.global_to_local[self.free] = np.arange(len(self.free))
        self._mass = None
        self._grads = None

    @property
    def dim(self):
        return len(self.free)

    def zero_cochain(self):
        return Cochain(self, np.zeros(self.dim))

    def cell_basis_ids(self, cell_id):
        """Global k-simplex ids of the basis simplices of one cell."""
        return self.cell_basis_table()[cell_id]

    def cell_basis_table(self):
        """(ncells, nbasis) table of global k-simplex ids per cell."""
        if getattr(self, "_basis_table", None) is None:
            mesh = self.mesh
            k = self.k
            ncells = mesh.n_simplices(2)
            if k == 2:
                table = np.arange(ncells, dtype=int).reshape(-1, 1)
            else:
                rows = []
                for cell in mesh.simplices[2]:
                    cell = tuple(cell)
                    if k == 0:
                        rows.append([mesh.index[0][(v,)] for v in cell])
                    else:
                        rows.append(
                            [
                                mesh.index[1][(cell[0], cell[1])],
                                mesh.index[1][(cell[0], cell[2])],
                                mesh.index[1][(cell[1], cell[2])],
                            ]
                        )
                table = np.array(rows, dtype=int)
            self._basis_table = table
        return self._basis_table

    def _barycentric_gradients(self):
        """Per-cell gradients of the three barycentric coordinates, (T,3,2)."""
        if self._grads is None:
            cells = self.mesh.simplices[2]
            pts = self.mesh.vertices[cells]
            grads = np.empty((len(cells), 3, 2))
            a2 = 2.0 * self.mesh.signed_volume
            for i in range(3):
                p, q = pts[:, (i + 1) % 3], pts[:, (i + 2) % 3]
                # rotate the opposite edge by 90 degrees; scale by 1/(2A)
                grads[:, i, 0] = (p[:, 1] - q[:, 1]) / a2
                grads[:, i, 1] = (q[:, 0] - p[:, 0]) / a2
            self._grads = grads
        return self._grads

    def basis_values(self, cell_ids, bary):
        """Values of the cell's Whitney basis forms at barycentric points.

        Returns an array (m, nbasis, ncomp) matching cell_basis_ids order.
        bary has shape (m, 3); cell_ids has shape (m,).
        """
        cell_ids = np.asarray(cell_ids, dtype=int)
        bary = np.atleast_2d(bary)
        m = len(cell_ids)
        grads = self._barycentric_gradients()[cell_ids]  # (m,3,2)
        k = self.k
        if k == 0:
            return bary[:, :, None]
        if k == 1:
            out = np.empty((m, 3, 2))
            for b, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)]):
                out[:, b, :] = (
                    bary[:, i, None] * grads[:, j, :] - bary[:, j, None] * grads[:, i, :]
                )
            return out
        val = 1.0 / self.mesh.signed_volume[cell_ids]
        return np.broadcast_to(val[:, None, None], (m, 1, 1)).copy()


@dataclass
class Cochain:
    space: FESpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if len(self.coeffs) != self.space.dim:
            raise WhitneyError(
                f"coefficient length {len(self.coeffs)} != space dimension {self.space.dim}"
            )

    def __add__(self, other):
        return Cochain(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return Cochain(self.space, self.coeffs - other.coeffs)

    def __rmul__(self, scalar):
        return Cochain(self.space, scalar * self.coeffs)

    def global_coeffs(self):
        """Coefficients over all k-simplices, zeros on constrained ones."""
        full = np.zeros(self.space.mesh.n_simplices(self.space.k))
        full[self.space.free] = self.coeffs
        return full

    def as_form(self):
        return reconstruction(self)

    def to_dict(self):
        return {
            "k": self.space.k,
            "coeffs": self.coeffs.tolist(),
            "simplex_ids": self.space.free.tolist(),
        }


def whitney_evaluate(cochain, point, containing_cell):
    """Value of the Whitney reconstruction at one point of a given cell."""
    space = cochain.space
    lam = space.mesh.barycentric(point, space.mesh.simplices[2][containing_cell])
    if np.min(lam) < -1e-12:
        raise WhitneyError(f"point {point} outside cell {containing_cell}")
    vals = space.basis_values([containing_cell], lam.reshape(1, 3))[0]
    full = cochain.global_coeffs()
    ids = space.cell_basis_ids(containing_cell)
    return np.tensordot(full[ids], vals, axes=(0, 0))


def reconstruction(cochain):
    """The cochain's Whitney form as a FormField on the mesh."""
    space = cochain.space
    mesh = space.mesh
    full = cochain.global_coeffs()

    def func(points):
        cells = mesh.locate(points, tol=1e-9)
        if np.any(cells < 0):
            j = int(np.flatnonzero(cells < 0)[0])
            raise WhitneyError(f"point {points[j]} outside the mesh")
        bary = _barycentric_batch(mesh, points, cells)
        vals = space.basis_values(cells, bary)  # (m, nb, ncomp)
        ids = space.cell_basis_table()[cells]
        return (full[ids][:, :, None] * vals).sum(axis=1)

    return FormField(space.k, func)


def _barycentric_batch(mesh, points, cells):
    verts = mesh.vertices[mesh.simplices[2][cells]]  # (m,3,2)
    t = np.empty((len(points), 2, 2))
    t[:, :, 0] = verts[:, 1] - verts[:, 0]
    t[:, :, 1] = verts[:, 2] - verts[:, 0]
    rhs = points - verts[:, 0]
    sol = np.linalg.solve(t, rhs[:, :, None])[:, :, 0]
    return np.column_stack([1.0 - sol.sum(axis=1), sol])


def canonical_interpolant(space, form, degree=6):
    """de Rham map: DOF on sigma = integral of the trace of the form.

    Integrals use the sorted-tuple orientation of each simplex; DOFs on the
    boundary triangulation of Gamma_T are never created.
    """
    mesh = space.mesh
    k = space.k
    if form.k != k:
        raise WhitneyError(f"form degree {form.k} != space degree {k}")
    coeffs = np.empty(space.dim)
    simplices = mesh.simplices[k][space.free]
    if k == 0:
        coeffs = form(mesh.vertices[simplices[:, 0]])[:, 0]
        return Cochain(space, coeffs)
    bary, wts = simplex_rule(k, degree)
    verts = mesh.vertices[simplices]  # (m, k+1, 2)
    pts = np.einsum("qa,maj->mqj", bary, verts)  # (m, q, 2)
    vals = form(pts.reshape(-1, 2)).reshape(len(simplices), len(wts), -1)
    if k == 1:
        tang = verts[:, 1] - verts[:, 0]  # sorted orientation a -> b
        integrand = (vals * tang[:, None, :]).sum(axis=2)
        coeffs = integrand @ wts
    else:
        area = _signed_area(verts)
        coeffs = (vals[:, :, 0] @ wts) * area
    return Cochain(space, coeffs)


def _signed_area(verts):
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def exterior_derivative(space_k, space_k1):
    """Constrained incidence matrix: the discrete d from degree k to k+1."""
    if space_k.mesh is not space_k1.mesh:
        raise WhitneyError("spaces live on different meshes")
    if space_k1.k != space_k.k + 1:
        raise WhitneyError("space degrees must be consecutive")
    if space_k.partition is not space_k1.partition:
        raise WhitneyError("spaces carry different boundary partitions")
    rc = relative_complex(space_k.mesh, space_k.partition)
    if not (
        np.array_equal(rc.free[space_k.k], space_k.free)
        and np.array_equal(rc.free[space_k1.k], space_k1.free)
    ):
        raise WhitneyError("space DOF sets differ from the relative complex")
    return rc.matrices[space_k.k]


def apply_d(space_k, space_k1, cochain):
    d = exterior_derivative(space_k, space_k1)
    return Cochain(space_k1, d @ cochain.coeffs)


def mass_matrix(space):
    """Assembled L2 Gram matrix of the constrained Whitney basis."""
    if space._mass is not None:
        return space._mass
    mesh = space.mesh
    k = space.k
    bary, wts = simplex_rule(2, 2)  # Whitney products are quadratic
    ncells = mesh.n_simplices(2)
    cell_ids = np.arange(ncells)
    rows, cols, vals = [], [], []
    area = mesh.volume
    acc = None
    for q, w in zip(bary, wts):
        basis = space.basis_values(cell_ids, np.tile(q, (ncells, 1)))  # (T,nb,ncomp)
        gram = np.einsum("tic,tjc->tij", basis, basis) * (w * area)[:, None, None]
        acc = gram if acc is None else acc + gram
    for t in range(ncells):
        ids = [space.global_to_local[g] for g in space.cell_basis_ids(t)]
        for a, ia in enumerate(ids):
            if ia < 0:
                continue
            for b, ib in enumerate(ids):
                if ib < 0:
                    continue
                rows.append(ia)
                cols.append(ib)
                vals.append(acc[t, a, b])
    m = sp.csr_matrix((vals, (rows, cols)), shape=(space.dim, space.dim))
    m = 0.5 * (m + m.T)  # symmetrize roundoff
    space._mass = m.tocsr()
    return space._mass


def l2_inner(ca, cb):
    if ca.space is not cb.space:
        raise WhitneyError("cochains live in different spaces")
    m = mass_matrix(ca.space)
    return float(ca.coeffs @ (m @ cb.coeffs))


def l2_norm(cochain, p=2, samples_per_cell=16, seed=0):
    """L^p norm of the reconstruction; p=2 exact via the mass matrix, p=inf
    approximated by per-cell sampling (reported as a sample maximum)."""
    if p == 2:
        return float(np.sqrt(max(l2_inner(cochain, cochain), 0.0)))
    if p != np.inf:
        raise WhitneyError("only p=2 and p=inf norms are supported")
    space = cochain.space
    mesh = space.mesh
    rng = np.random.default_rng(seed)
    ncells = mesh.n_simplices(2)
    lam = rng.dirichlet((1.0, 1.0, 1.0), size=(ncells, samples_per_cell))
    full = cochain.global_coeffs()
    best = 0.0
    for s in range(samples_per_cell):
        vals = space.basis_values(np.arange(ncells), lam[:, s, :])
        ids = space.cell_basis_table()
        rec = (full[ids][:, :, None] * vals).sum(axis=1)
        best = max(best, float(np.sqrt((rec ** 2).sum(axis=1)).max()))
    return best
