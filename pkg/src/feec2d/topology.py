"""Exact simplicial (co)homology of the pair (mesh, Gamma_T).

Incidence matrices are signed integer matrices; ranks are computed with
fraction-free (Bareiss) elimination so Betti numbers are exact rational
dimensions. The relative complex keeps the simplices outside the closure of
Gamma_T ("free" simplices) and restricts the incidence matrices to them.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class _Int64Overflow(Exception):
    pass


def incidence_matrix(mesh, k):
    """Signed incidence D_k mapping k-cochains to (k+1)-cochains.

    Entry (tau, sigma) is (-1)^i when sigma is tau with its i-th vertex
    omitted (sorted-tuple convention).
    """
    rows, cols, vals = [], [], []
    for t, s in enumerate(mesh.simplices[k + 1]):
        s = tuple(s)
        for i in range(k + 2):
            face = s[:i] + s[i + 1 :]
            rows.append(t)
            cols.append(mesh.index[k][face])
            vals.append((-1) ** i)
    shape = (mesh.n_simplices(k + 1), mesh.n_simplices(k))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.int64)


def incidence_matrices(mesh):
    """All D_k for 0 <= k < n."""
    return [incidence_matrix(mesh, k) for k in range(mesh.dim)]


def _bareiss_rank_int64(a):
    a = a.astype(np.int64, copy=True)
    m, n = a.shape
    rank, row, prev = 0, 0, 1
    for col in range(n):
        piv = -1
        for r in range(row, m):
            if a[r, col] != 0:
                piv = r
                break
        if piv < 0:
            continue
        if piv != row:
            a[[row, piv]] = a[[piv, row]]
        pv = a[row, col]
        if row + 1 < m:
            block = a[row + 1 :, col + 1 :]
            colv = a[row + 1 :, col]
            if max(abs(int(pv)), int(np.abs(a).max())) > 2 ** 30:
                raise _Int64Overflow
            a[row + 1 :, col + 1 :] = (block * pv - np.outer(colv, a[row, col + 1 :])) // prev
            a[row + 1 :, col] = 0
        prev = pv
        rank += 1
        row += 1
        if row == m:
            break
    return rank


def _bareiss_rank_object(a):
    # arbitrary-precision fallback; same elimination with Python integers
    a = np.array([[int(x) for x in r] for r in a], dtype=object)
    m, n = a.shape
    rank, row, prev = 0, 0, 1
    for col in range(n):
        piv = -1
        for r in range(row, m):
            if a[r, col] != 0:
                piv = r
                break
        if piv < 0:
            continue
        if piv != row:
            a[[row, piv]] = a[[piv, row]]
        pv = a[row, col]
        if row + 1 < m:
            block = a[row + 1 :, col + 1 :]
            colv = a[row + 1 :, col]
            a[row + 1 :, col + 1 :] = (block * pv - np.outer(colv, a[row, col + 1 :])) // prev
            a[row + 1 :, col] = 0
        prev = pv
        rank += 1
        row += 1
        if row == m:
            break
    return rank


def integer_rank(matrix):
    """Exact rank of an integer matrix (fraction-free elimination)."""
    if sp.issparse(matrix):
        matrix = matrix.toarray()
    a = np.asarray(matrix)
    if a.size == 0:
        return 0
    try:
        return _bareiss_rank_int64(a)
    except _Int64Overflow:
        return _bareiss_rank_object(a)


@dataclass
class RelativeComplex:
    """Free simplices (outside the closure of Gamma_T) and the incidence
    matrices restricted to them."""

    mesh: object
    free: dict          # k -> sorted int array of free k-simplex ids
    matrices: list      # D_k restricted, k = 0..n-1

    def n_free(self, k):
        return len(self.free[k])


def relative_complex(mesh, partition):
    closure = partition.gamma_t_closure()
    free = {}
    for k in range(mesh.dim + 1):
        constrained = closure.get(k, set())
        free[k] = np.array(
            [i for i in range(mesh.n_simplices(k)) if i not in constrained], dtype=int
        )
    mats = []
    for k in range(mesh.dim):
        d = incidence_matrix(mesh, k)
        mats.append(d[free[k + 1], :][:, free[k]].tocsr())
    return RelativeComplex(mesh, free, mats)


def betti_relative(mesh, partition):
    """Relative Betti numbers b_k(closure(Omega), Gamma_T), exact."""
    rc = relative_complex(mesh, partition)
    n = mesh.dim
    ranks = [integer_rank(m) for m in rc.matrices]
    betti = []
    for k in range(n + 1):
        rank_dk = ranks[k] if k < n else 0
        rank_dkm1 = ranks[k - 1] if k > 0 else 0
        betti.append(rc.n_free(k) - rank_dk - rank_dkm1)
    return tuple(betti)


@dataclass
class DualityReport:
    betti_t: tuple
    betti_n: tuple
    match: bool

    def as_dict(self):
        return {
            "b": list(self.betti_t),
            "b_complement": list(self.betti_n),
            "dual_check": self.match,
        }


def verify_poincare_lefschetz(mesh, partition):
    """Check b_k(Omega,Gamma_T) = b_{n-k}(Omega,Gamma_N) for all k."""
    n = mesh.dim
    bt = betti_relative(mesh, partition)
    bn = betti_relative(mesh, partition.complementary())
    match = all(bt[k] == bn[n - k] for k in range(n + 1))
    return DualityReport(bt, bn, match)
