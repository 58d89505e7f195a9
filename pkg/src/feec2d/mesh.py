"""Simplicial meshes with tagged boundary patches.

A mesh stores oriented simplices of every dimension as sorted vertex-index
tuples; orientation is the global sorted-tuple convention, with signs carried
by incidence matrices and by the per-triangle signed area. Boundary patches
mark a subset of the boundary (n-1)-simplices as the essential part Gamma_T;
the complementary part is Gamma_N and the interface Gamma_I consists of the
lower-dimensional simplices shared by both closures.

Generation is restricted to axis-aligned boxes [-1,1]^n; arbitrary 2D
triangulations can be imported from JSON for the topology and solver layers.
"""

from dataclasses import dataclass, field
import itertools
import json

import numpy as np

from .quadrature import disk_rule

BOX_FACES_2D = ("left", "right", "bottom", "top")
BOX_FACES_1D = ("left", "right")


class MeshError(Exception):
    pass


class PatchSpecError(MeshError):
    pass


def _face_tuples(simplex):
    """All (k-1)-faces of a sorted vertex tuple."""
    return [simplex[:i] + simplex[i + 1 :] for i in range(len(simplex))]


class SimplicialMesh:
    """Simplicial complex with vertex coordinates.

    Attributes:
        dim: spatial dimension n.
        vertices: (V, n) float array.
        simplices: dict k -> (S_k, k+1) int array of sorted vertex tuples,
            for 0 <= k <= n.
    """

    def __init__(self, dim, vertices, cells, box_info=None):
        self.dim = int(dim)
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, self.dim)
        cells = np.asarray(cells, dtype=int)
        cells = np.sort(cells, axis=1)
        if len(np.unique(cells, axis=0)) != len(cells):
            raise MeshError("duplicate cells")
        self.simplices = {self.dim: cells}
        for k in range(self.dim - 1, -1, -1):
            faces = set()
            for s in self.simplices[k + 1]:
                faces.update(_face_tuples(tuple(s)))
            self.simplices[k] = np.array(sorted(faces), dtype=int).reshape(len(faces), k + 1)
        self.index = {
            k: {tuple(s): i for i, s in enumerate(self.simplices[k])}
            for k in self.simplices
        }
        # box_info = (divisions, lo, hi) for meshes generated on a box; used
        # for O(1) point location.
        self.box_info = box_info
        self._build_geometry()

    def _build_geometry(self):
        n = self.dim
        cells = self.simplices[n]
        pts = self.vertices[cells]  # (T, n+1, n)
        edges_mat = pts[:, 1:, :] - pts[:, :1, :]  # (T, n, n)
        det = np.linalg.det(edges_mat)
        self.signed_volume = det / np.prod(np.arange(1, n + 1))
        if np.any(np.abs(self.signed_volume) < 1e-14):
            bad = int(np.argmin(np.abs(self.signed_volume)))
            raise MeshError(f"degenerate simplex {tuple(cells[bad])} has zero volume")
        self.volume = np.abs(self.signed_volume)
        # diameters of every simplex of every dimension
        self.diameter = {}
        for k in range(1, n + 1):
            vk = self.vertices[self.simplices[k]]  # (S, k+1, n)
            d = 0.0
            for a, b in itertools.combinations(range(k + 1), 2):
                d = np.maximum(d, np.linalg.norm(vk[:, a] - vk[:, b], axis=1))
            self.diameter[k] = d
        # vertex -> incident n-simplices
        self.vertex_cells = [[] for _ in range(len(self.vertices))]
        for t, s in enumerate(cells):
            for v in s:
                self.vertex_cells[v].append(t)
        hv = np.array([
            np.mean(self.diameter[n][cs]) if cs else 0.0 for cs in self.vertex_cells
        ])
        self.diameter[0] = hv

    def n_simplices(self, k):
        return len(self.simplices[k])

    def boundary_faces(self):
        """Indices of (n-1)-simplices incident to exactly one n-simplex."""
        n = self.dim
        count = np.zeros(self.n_simplices(n - 1), dtype=int)
        for s in self.simplices[n]:
            for f in _face_tuples(tuple(s)):
                count[self.index[n - 1][f]] += 1
        if np.any(count > 2):
            raise MeshError("non-manifold face")
        return np.flatnonzero(count == 1)

    def closure_of_faces(self, face_ids, k_face=None):
        """Simplex ids, per dimension, in the closure of the given faces."""
        n = self.dim
        kf = n - 1 if k_face is None else k_face
        closure = {k: set() for k in range(kf + 1)}
        closure[kf] = set(int(i) for i in face_ids)
        for k in range(kf, 0, -1):
            for i in closure[k]:
                for f in _face_tuples(tuple(self.simplices[k][i])):
                    closure[k - 1].add(self.index[k - 1][f])
        return closure

    def validate(self):
        """Check closure, uniqueness, sortedness, nondegeneracy."""
        for k in range(self.dim + 1):
            sk = self.simplices[k]
            if np.any(np.diff(sk, axis=1) <= 0):
                raise MeshError(f"{k}-simplex tuple not strictly increasing")
            if len(np.unique(sk, axis=0)) != len(sk):
                raise MeshError(f"duplicate {k}-simplices")
        for k in range(1, self.dim + 1):
            for s in self.simplices[k]:
                for f in _face_tuples(tuple(s)):
                    if f not in self.index[k - 1]:
                        raise MeshError(f"missing face {f} of {tuple(s)}")
        # nondegeneracy was enforced in _build_geometry
        return True

    def euler_characteristic(self):
        return sum((-1) ** k * self.n_simplices(k) for k in range(self.dim + 1))

    def locate(self, points, tol=1e-12):
        """Containing n-simplex index per point, -1 if outside the mesh."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.box_info is not None and self.dim == 2:
            return self._locate_box(points, tol)
        return self._locate_generic(points, tol)

    def _locate_box(self, points, tol):
        divisions, lo, hi = self.box_info
        h = (hi - lo) / divisions
        xi = np.clip(((points[:, 0] - lo) / h).astype(int), 0, divisions - 1)
        yi = np.clip(((points[:, 1] - lo) / h).astype(int), 0, divisions - 1)
        inside = np.all((points >= lo - tol) & (points <= hi + tol), axis=1)
        # cell (i,j) holds triangles 2*(j*divisions+i) (lower, below the
        # a-e diagonal) and +1 (upper); diagonal runs lower-left to upper-right
        fx = (points[:, 0] - lo) / h - xi
        fy = (points[:, 1] - lo) / h - yi
        upper = fy > fx
        tri = 2 * (yi * divisions + xi) + upper.astype(int)
        return np.where(inside, tri, -1)

    def _locate_generic(self, points, tol):
        out = np.full(len(points), -1, dtype=int)
        cells = self.simplices[self.dim]
        if not hasattr(self, "_bucket_grid"):
            self._build_buckets()
        lo, hi, nb, buckets = self._bucket_grid
        span = np.maximum(hi - lo, 1e-30)
        ij = np.clip(((points - lo) / span * nb).astype(int), 0, nb - 1)
        for p in range(len(points)):
            key = tuple(ij[p])
            for t in buckets.get(key, ()):
                if self._point_in_cell(points[p], cells[t], tol):
                    out[p] = t
                    break
        return out

    def _build_buckets(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        nb = max(1, int(np.sqrt(self.n_simplices(self.dim))))
        buckets = {}
        span = np.maximum(hi - lo, 1e-30)
        for t, s in enumerate(self.simplices[self.dim]):
            pts = self.vertices[s]
            bmin = np.clip(((pts.min(axis=0) - lo) / span * nb).astype(int), 0, nb - 1)
            bmax = np.clip(((pts.max(axis=0) - lo) / span * nb).astype(int), 0, nb - 1)
            for key in itertools.product(*[range(bmin[d], bmax[d] + 1) for d in range(self.dim)]):
                buckets.setdefault(key, []).append(t)
        self._bucket_grid = (lo, hi, nb, buckets)

    def _point_in_cell(self, point, cell, tol):
        lam = self.barycentric(point, cell)
        return np.all(lam >= -tol)

    def barycentric(self, point, cell):
        verts = self.vertices[np.asarray(cell)]
        a = np.vstack([verts.T, np.ones(len(verts))])
        b = np.append(np.asarray(point, dtype=float), 1.0)
        return np.linalg.solve(a, b)

    def to_dict(self, gamma_t_edges=()):
        return {
            "dim": self.dim,
            "vertices": self.vertices.tolist(),
            "cells": self.simplices[self.dim].tolist(),
            "gamma_T": [self.simplices[self.dim - 1][i].tolist() for i in sorted(gamma_t_edges)],
        }


@dataclass
class BoundaryPartition:
    """Tagged boundary: gamma_T / gamma_N are (n-1)-simplex id sets, gamma_I
    the interface simplex ids of dimension <= n-2 (vertices in 2D)."""

    mesh: SimplicialMesh
    gamma_t: frozenset
    gamma_n: frozenset = field(init=False)
    gamma_i: dict = field(init=False)

    def __post_init__(self):
        boundary = set(int(i) for i in self.mesh.boundary_faces())
        self.gamma_t = frozenset(int(i) for i in self.gamma_t)
        if not self.gamma_t <= boundary:
            raise MeshError("gamma_T contains non-boundary faces")
        self.gamma_n = frozenset(boundary - self.gamma_t)
        ct = self.mesh.closure_of_faces(self.gamma_t)
        cn = self.mesh.closure_of_faces(self.gamma_n)
        self.gamma_i = {
            k: frozenset(ct[k] & cn[k]) for k in range(self.mesh.dim - 1)
        }

    def gamma_t_closure(self):
        return self.mesh.closure_of_faces(self.gamma_t)

    def complementary(self):
        """Partition with the roles of gamma_T and gamma_N swapped."""
        return BoundaryPartition(self.mesh, self.gamma_n)

    def check_admissible(self):
        """Combinatorial admissibility: the interface is a codimension-2
        complex; chart admissibility of the continuous patches is assumed."""
        for k, ids in self.gamma_i.items():
            if k > self.mesh.dim - 2 and ids:
                raise MeshError("interface contains codimension-1 simplices")
        return True


@dataclass
class MeshQuality:
    h: np.ndarray                 # per n-simplex diameter
    h_vertex: np.ndarray          # per-vertex average of adjacent diameters
    shape_constant: float
    neighbor_bound: int
    epsilon_h: float


@dataclass
class MeshSizeFunction:
    """Smooth global mesh-size field: mollified piecewise element diameter.

    value() is the fixed-radius mollification of the per-element diameter
    (extended by its nearest value outside the mesh); grad() differentiates
    under the mollification integral. L_h and C_h are measured constants.
    """

    mesh: SimplicialMesh
    radius: float
    h_min: float
    h_max: float
    lipschitz: float = 0.0
    comparability: float = 1.0
    _rule: tuple = None

    def __post_init__(self):
        if self._rule is None:
            pts, wts = disk_rule(16, 16)
            self._rule = (pts, wts)

    def _h_field(self, points):
        """Piecewise per-element diameter, nearest-value extension outside."""
        points = np.atleast_2d(points)
        if self.mesh.box_info is not None:
            divisions, lo, hi = self.mesh.box_info
            clamped = np.clip(points, lo + 1e-13, hi - 1e-13)
        else:
            lo = self.mesh.vertices.min(axis=0)
            hi = self.mesh.vertices.max(axis=0)
            clamped = np.clip(points, lo + 1e-13, hi - 1e-13)
        tri = self.mesh.locate(clamped)
        vals = np.empty(len(points))
        good = tri >= 0
        vals[good] = self.mesh.diameter[self.mesh.dim][tri[good]]
        if np.any(~good):
            # non-box mesh, point outside: nearest vertex's average diameter
            verts = self.mesh.vertices
            for i in np.flatnonzero(~good):
                j = np.argmin(np.linalg.norm(verts - clamped[i], axis=1))
                vals[i] = self.mesh.diameter[0][j]
        return vals

    def value(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        y, w = self._rule
        mu = _bump(y)
        w_eff = w * mu
        w_eff = w_eff / w_eff.sum()
        samples = points[:, None, :] - self.radius * y[None, :, :]
        vals = self._h_field(samples.reshape(-1, 2)).reshape(len(points), -1)
        return vals @ w_eff

    def grad(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        y, w = self._rule
        mu = _bump(y)
        norm = (w * mu).sum()
        gmu = _bump_grad(y)  # (m, 2)
        samples = points[:, None, :] - self.radius * y[None, :, :]
        vals = self._h_field(samples.reshape(-1, 2)).reshape(len(points), -1)
        # d/dx of int mu_r(x - z) h(z) dz, pulled to the unit ball
        return (vals[:, :, None] * (w[None, :, None] * gmu[None, :, :])).sum(axis=1) / (
            self.radius * norm
        )


def _bump(y):
    """Standard mollifier shape exp(-1/(1-|y|^2)) on the unit ball, unnormalized."""
    y = np.atleast_2d(y)
    r2 = (y ** 2).sum(axis=1)
    out = np.zeros(len(y))
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out

def _bump_grad(y):
    y = np.atleast_2d(y)
    r2 = (y ** 2).sum(axis=1)
    out = np.zeros_like(y)
    inside = r2 < 1.0
    f = np.exp(-1.0 / (1.0 - r2[inside]))
    out[inside] = (-2.0 * f / (1.0 - r2[inside]) ** 2)[:, None] * y[inside]
    return out


def _parse_patch_2d(mesh, patch_spec, divisions):
    """Boundary edge ids selected by a patch descriptor.

    patch_spec is None, an iterable of face names, or an iterable of segment
    endpoint pairs ((x0,y0),(x1,y1)) running along one box face with endpoints
    on grid nodes.
    """
    boundary = mesh.boundary_faces()
    if not patch_spec:
        return frozenset()
    spec = list(patch_spec)
    edges = mesh.simplices[1]
    mids = mesh.vertices[edges].mean(axis=1)
    selected = set()
    if all(isinstance(s, str) for s in spec):
        bad = [s for s in spec if s not in BOX_FACES_2D]
        if bad:
            raise PatchSpecError(f"unknown face name(s) {bad}; valid: {BOX_FACES_2D}")
        for i in boundary:
            m = mids[i]
            if "left" in spec and abs(m[0] + 1.0) < 1e-12:
                selected.add(int(i))
            if "right" in spec and abs(m[0] - 1.0) < 1e-12:
                selected.add(int(i))
            if "bottom" in spec and abs(m[1] + 1.0) < 1e-12:
                selected.add(int(i))
            if "top" in spec and abs(m[1] - 1.0) < 1e-12:
                selected.add(int(i))
        return frozenset(selected)
    # segment form
    grid = np.linspace(-1.0, 1.0, divisions + 1)
    for seg in spec:
        (x0, y0), (x1, y1) = seg
        for c in (x0, y0, x1, y1):
            if np.min(np.abs(grid - c)) > 1e-12:
                raise PatchSpecError(
                    f"segment endpoint coordinate {c} is not on a grid node "
                    f"(divisions={divisions})"
                )
        if abs(x0 - x1) < 1e-12 and abs(abs(x0) - 1.0) < 1e-12:
            axis, fixed, lo, hi = 1, x0, min(y0, y1), max(y0, y1)
        elif abs(y0 - y1) < 1e-12 and abs(abs(y0) - 1.0) < 1e-12:
            axis, fixed, lo, hi = 0, y0, min(x0, x1), max(x0, x1)
        else:
            raise PatchSpecError(f"segment {seg} is not axis-aligned along a box face")
        for i in boundary:
            m = mids[i]
            on_face = abs(m[1 - axis] - fixed) < 1e-12
            if on_face and lo - 1e-12 <= m[axis] <= hi + 1e-12:
                selected.add(int(i))
    return frozenset(selected)


def make_box_mesh(n, divisions, patch_spec=None):
    """Triangulate [-1,1]^n uniformly and tag the selected boundary patch.

    In 2D each grid cell is split along its lower-left to upper-right
    diagonal. patch_spec selects whole faces by name or boundary segments
    with endpoints on grid nodes.
    """
    if n not in (1, 2):
        raise MeshError("box meshes supported for n in {1, 2}")
    if divisions < 1:
        raise MeshError("divisions must be >= 1")
    if n == 1:
        verts = np.linspace(-1.0, 1.0, divisions + 1).reshape(-1, 1)
        cells = np.column_stack([np.arange(divisions), np.arange(1, divisions + 1)])
        mesh = SimplicialMesh(1, verts, cells, box_info=(divisions, -1.0, 1.0))
        spec = list(patch_spec) if patch_spec else []
        bad = [s for s in spec if s not in BOX_FACES_1D]
        if bad:
            raise PatchSpecError(f"unknown face name(s) {bad}; valid: {BOX_FACES_1D}")
        sel = set()
        if "left" in spec:
            sel.add(int(mesh.index[0][(0,)]))
        if "right" in spec:
            sel.add(int(mesh.index[0][(divisions,)]))
        return mesh, BoundaryPartition(mesh, frozenset(sel))
    d = divisions
    xs = np.linspace(-1.0, 1.0, d + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (d + 1) + i

    cells = []
    for j in range(d):
        for i in range(d):
            a, b = vid(i, j), vid(i + 1, j)
            c, e = vid(i, j + 1), vid(i + 1, j + 1)
            cells.append((a, b, e))  # lower triangle, below the a-e diagonal
            cells.append((a, c, e))  # upper triangle
    mesh = SimplicialMesh(2, verts, np.array(cells), box_info=(d, -1.0, 1.0))
    gamma_t = _parse_patch_2d(mesh, patch_spec, d)
    return mesh, BoundaryPartition(mesh, gamma_t)


def refine_uniform(mesh, partition=None):
    """Split every triangle into 4 via edge midpoints; patch tags inherit."""
    if mesh.dim != 2:
        raise MeshError("uniform refinement implemented for 2D meshes")
    nv = len(mesh.vertices)
    edges = mesh.simplices[1]
    mid_id = {tuple(e): nv + i for i, e in enumerate(edges)}
    verts = np.vstack([mesh.vertices, mesh.vertices[edges].mean(axis=1)])

    def m(a, b):
        return mid_id[(a, b) if a < b else (b, a)]

    cells = []
    for (a, b, c) in mesh.simplices[2]:
        ab, bc, ac = m(a, b), m(b, c), m(a, c)
        cells.extend([(a, ab, ac), (ab, b, bc), (ac, bc, c), (ab, bc, ac)])
    box_info = None
    if mesh.box_info is not None:
        box_info = (mesh.box_info[0] * 2, mesh.box_info[1], mesh.box_info[2])
    fine = SimplicialMesh(2, verts, np.array(cells), box_info=box_info)
    if partition is None:
        return fine, None
    gamma_t = set()
    for i in partition.gamma_t:
        a, b = mesh.simplices[1][i]
        mm = m(a, b)
        for child in ((min(a, mm), max(a, mm)), (min(b, mm), max(b, mm))):
            gamma_t.add(int(fine.index[1][child]))
    return fine, BoundaryPartition(fine, frozenset(gamma_t))


def mesh_quality(mesh, n_dirs=16, bisect_steps=20):
    """Shape constant, neighbor bound, and the sampled neighborhood radius
    epsilon_h with B_{eps h_T}(T) intersect closure(Omega) inside T's patch."""
    n = mesh.dim
    h = mesh.diameter[n]
    vol = mesh.volume
    c_vol = float(np.max(h ** n / vol))
    # diameter comparability over touching pairs: per vertex star it is
    # (max h)/(min h) over all simplices in the star, across all dimensions
    c_nbr = 1.0
    star_h = [[] for _ in range(len(mesh.vertices))]
    for k in range(n + 1):
        dk = mesh.diameter[k]
        for i, s in enumerate(mesh.simplices[k]):
            for v in np.atleast_1d(s):
                star_h[int(v)].append(dk[i])
    for hs in star_h:
        if hs:
            c_nbr = max(c_nbr, max(hs) / min(hs))
    shape_constant = max(1.0, c_vol, c_nbr)

    cells = mesh.simplices[n]
    cell_neighbors = []
    for t, s in enumerate(cells):
        nbrs = set()
        for v in s:
            nbrs.update(mesh.vertex_cells[v])
        cell_neighbors.append(sorted(nbrs))
    neighbor_bound = max(len(nb) for nb in cell_neighbors)

    # epsilon_h by bisection on sampled ball-boundary points
    thetas = np.linspace(0.0, 2.0 * np.pi, n_dirs, endpoint=False)
    dirs = np.column_stack([np.cos(thetas), np.sin(thetas)]) if n == 2 else None

    def feasible(eps):
        for t, s in enumerate(cells):
            pts = mesh.vertices[s]
            base = np.vstack([pts, pts.mean(axis=0), (pts + np.roll(pts, 1, axis=0)) / 2.0])
            if n == 1:
                probe = np.vstack([base - eps * h[t], base + eps * h[t]])
            else:
                probe = (base[:, None, :] + eps * h[t] * dirs[None, :, :]).reshape(-1, 2)
            loc = mesh.locate(probe, tol=1e-9)
            ok = loc < 0  # outside the mesh: no constraint
            for j in np.flatnonzero(~ok):
                if loc[j] in cell_neighbors[t]:
                    ok[j] = True
            if not np.all(ok):
                return False
        return True

    lo_eps, hi_eps = 0.0, 1.0
    for _ in range(bisect_steps):
        mid = 0.5 * (lo_eps + hi_eps)
        if feasible(mid):
            lo_eps = mid
        else:
            hi_eps = mid
    return MeshQuality(
        h=h,
        h_vertex=mesh.diameter[0],
        shape_constant=shape_constant,
        neighbor_bound=neighbor_bound,
        epsilon_h=lo_eps,
    )


def build_mesh_size_function(mesh, smoothing_radius_factor=0.5, n_samples=400, seed=7):
    """Mollify the per-element diameter into a smooth mesh-size field and
    measure its Lipschitz and local-comparability constants on samples."""
    n = mesh.dim
    if n != 2:
        raise MeshError("mesh-size function implemented for 2D meshes")
    h = mesh.diameter[n]
    radius = smoothing_radius_factor * float(h.min())
    msf = MeshSizeFunction(mesh, radius, float(h.min()), float(h.max()))
    rng = np.random.default_rng(seed)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    pts = lo + (hi - lo) * rng.random((n_samples, 2))
    tri = mesh.locate(pts)
    pts = pts[tri >= 0]
    tri = tri[tri >= 0]
    vals = msf.value(pts)
    grads = msf.grad(pts)
    msf.lipschitz = float(np.linalg.norm(grads, axis=1).max()) * 1.05 + 1e-12
    ratio = np.maximum(vals / h[tri], h[tri] / vals)
    msf.comparability = float(ratio.max()) * 1.05
    return msf


def mesh_to_json(mesh, partition=None, path=None):
    data = mesh.to_dict(partition.gamma_t if partition is not None else ())
    text = json.dumps(data, sort_keys=True)
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def mesh_from_json(source):
    """Read the mesh JSON format and validate closure and admissibility."""
    if isinstance(source, (str, bytes)) and not str(source).lstrip().startswith("{"):
        with open(source) as f:
            data = json.load(f)
    elif isinstance(source, dict):
        data = source
    else:
        data = json.loads(source)
    mesh = SimplicialMesh(data["dim"], data["vertices"], data["cells"])
    mesh.validate()
    gamma_t = set()
    for pair in data.get("gamma_T", []):
        key = tuple(sorted(int(v) for v in pair))
        if key not in mesh.index[mesh.dim - 1]:
            raise MeshError(f"gamma_T face {key} is not a mesh face")
        gamma_t.add(int(mesh.index[mesh.dim - 1][key]))
    partition = BoundaryPartition(mesh, frozenset(gamma_t))
    partition.check_admissible()
    return mesh, partition
