"""Boundary-respecting smoothing of differential forms on box domains.

The composite operator is mollification with a variable radius applied to
the distorted pullback of the extended form:

    M u = R_{delta rho} (D_rho^* (E u)),    rho = epsilon * meshsize

E extends by zero over the bulge attached along Gamma_T and by reflection
elsewhere; D_rho pushes a neighborhood of the bulge boundary into the bulge,
so M u vanishes near Gamma_T; R averages pullbacks over the unit ball with
the standard mollifier. Every stage commutes with the exterior derivative
(exactly at the quadrature level, since pullbacks carry exact Jacobians),
which is what the smoothed interpolant Q = I o M and the final idempotent
projection inherit.

All unit-ball integrals use one fixed product rule whose weights are
normalized to unit mass; rule order is part of the reproducibility metadata.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .forms import FormField
from .geometry import (
    BoxGeometry,
    DistortionMap,
    ExtensionOperator,
    GeometryError,
    build_distortion,
)
from .mesh import build_mesh_size_function
from .quadrature import disk_rule, simplex_rule
from .whitney import Cochain, canonical_interpolant

import scipy.linalg as sla
import scipy.sparse as sp


class SmoothingError(Exception):
    pass


class Mollifier:
    """Standard mollifier C exp(-(1-|y|^2)^{-1}) on the closed unit ball,
    normalized to unit integral by quadrature."""

    def __init__(self, dim=2):
        self.dim = dim
        if dim == 2:
            integral = 2.0 * np.pi * quad(
                lambda r: r * np.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0, epsabs=1e-14
            )[0]
        elif dim == 1:
            integral = quad(
                lambda r: np.exp(-1.0 / (1.0 - r * r)), -1.0, 1.0, epsabs=1e-14
            )[0]
        else:
            raise SmoothingError("mollifier implemented for dimensions 1 and 2")
        self.c_mu = 1.0 / integral

    def __call__(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        r2 = (y ** 2).sum(axis=1)
        out = np.zeros(len(y))
        inside = r2 < 1.0
        out[inside] = self.c_mu * np.exp(-1.0 / (1.0 - r2[inside]))
        return out

    def scaled(self, r, y):
        """mu_r(y) = r^{-n} mu(y / r)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self(y / r) / r ** self.dim


class BallRule:
    """Fixed product rule on the unit ball with mollifier-weighted nodes.

    Weights are scaled so the mollifier integrates to exactly 1 under the
    rule; constants are then reproduced exactly by the discrete operator.
    """

    def __init__(self, mollifier, n_radial=16, n_angular=16):
        self.n_radial = n_radial
        self.n_angular = n_angular
        pts, w = disk_rule(n_radial, n_angular)
        mu = mollifier(pts)
        wm = w * mu
        self.points = pts
        self.weights = wm / wm.sum()
        self.raw_weights = w
        self.quadrature_mass = float(wm.sum())


class RadiusFunction:
    """Smooth nonnegative mollification radius with reported bounds."""

    def __init__(self, value, grad, lip, sup, inf, label="custom"):
        self._value = value
        self._grad = grad
        self._lip = float(lip)
        self._sup = float(sup)
        self._inf = float(inf)
        self.label = label

    def value(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self._value(points), dtype=float).reshape(len(points))

    def grad(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self._grad(points), dtype=float).reshape(len(points), -1)

    def lipschitz(self):
        return self._lip

    def sup_norm(self):
        return self._sup

    def inf_over(self, points):
        return float(self.value(points).min())

    def sup_over(self, points):
        return float(self.value(points).max())

    @classmethod
    def constant(cls, c):
        c = float(c)
        if c < 0:
            raise SmoothingError("radius must be nonnegative")
        return cls(
            value=lambda p: np.full(len(p), c),
            grad=lambda p: np.zeros_like(p),
            lip=0.0,
            sup=c,
            inf=c,
            label=f"constant {c:g}",
        )

    @classmethod
    def from_mesh_size(cls, msf, epsilon, grid_n=97, margin=1.2):
        """epsilon * meshsize, cached on a bilinear grid for fast evaluation.

        The cache is exact for uniform meshes (constant field) and a
        deterministic interpolant otherwise; bounds come from the mesh-size
        invariants.
        """
        epsilon = float(epsilon)
        lo = msf.mesh.vertices.min(axis=0) - margin
        hi = msf.mesh.vertices.max(axis=0) + margin
        if msf.h_max - msf.h_min < 1e-13 * msf.h_max:
            base = cls.constant(epsilon * msf.h_min)
            base.label = f"{epsilon:g} * meshsize (uniform)"
            return base
        xs = np.linspace(lo[0], hi[0], grid_n)
        ys = np.linspace(lo[1], hi[1], grid_n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        vals = (epsilon * msf.value(pts)).reshape(grid_n, grid_n)
        grads = (epsilon * msf.grad(pts)).reshape(grid_n, grid_n, 2)

        def interp(points, table):
            fx = np.clip((points[:, 0] - lo[0]) / (hi[0] - lo[0]), 0, 1) * (grid_n - 1)
            fy = np.clip((points[:, 1] - lo[1]) / (hi[1] - lo[1]), 0, 1) * (grid_n - 1)
            i = np.clip(fx.astype(int), 0, grid_n - 2)
            j = np.clip(fy.astype(int), 0, grid_n - 2)
            sx = (fx - i)[:, None] if table.ndim == 3 else fx - i
            sy = (fy - j)[:, None] if table.ndim == 3 else fy - j
            return (
                table[i, j] * (1 - sx) * (1 - sy)
                + table[i + 1, j] * sx * (1 - sy)
                + table[i, j + 1] * (1 - sx) * sy
                + table[i + 1, j + 1] * sx * sy
            )

        lip = epsilon * msf.lipschitz * 1.05
        return cls(
            value=lambda p: interp(p, vals),
            grad=lambda p: interp(p, grads),
            lip=lip,
            sup=epsilon * msf.h_max,
            inf=epsilon * msf.h_min,
            label=f"{epsilon:g} * meshsize",
        )

    @classmethod
    def from_callable(cls, func, grad, lip, sup, inf, label="callable"):
        return cls(
            value=lambda p: func(p[:, 0], p[:, 1]),
            grad=lambda p: np.column_stack(grad(p[:, 0], p[:, 1])),
            lip=lip,
            sup=sup,
            inf=inf,
            label=label,
        )


def mollify(form, rho, points, rule, domain_check=None):
    """Variable-radius mollification R_rho of a form, at the given points.

    Averages the pullbacks along x -> x + rho(x) y over the unit ball; the
    pullback carries the exact Jacobian I + y grad(rho)^T.
    """
    if rho.lipschitz() >= 0.5:
        raise SmoothingError(
            f"Lip(rho) = {rho.lipschitz():.4g} >= 1/2: x -> x + rho(x) y is "
            "not uniformly bi-Lipschitz"
        )
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(points)
    y, w = rule.points, rule.weights
    q = len(y)
    rv = rho.value(points)
    samples = points[:, None, :] + rv[:, None, None] * y[None, :, :]
    flat = samples.reshape(-1, 2)
    if domain_check is not None:
        ok = domain_check(flat)
        if not np.all(ok):
            bad = flat[~ok][0]
            raise SmoothingError(f"mollification sample outside the domain at {bad}")
    vals = form(flat).reshape(m, q, form.ncomp)
    if form.k == 0:
        return (vals[:, :, 0] @ w).reshape(m, 1)
    g = rho.grad(points)
    if form.k == 1:
        ydotu = (vals * y[None, :, :]).sum(axis=2)            # (m, q)
        pulled = vals + ydotu[:, :, None] * g[:, None, :]
        return np.einsum("mqc,q->mc", pulled, w)
    ydotg = y @ g.T                                           # (q, m)
    det = 1.0 + ydotg.T                                       # (m, q)
    return ((vals[:, :, 0] * det) @ w).reshape(m, 1)


def mollified_form(form, rho, rule, domain_check=None):
    """R_rho form as a FormField; the derivative is R_rho of the derivative
    (mollification commutes with d)."""
    out = FormField(form.k, lambda p: mollify(form, rho, p, rule, domain_check))
    if form.derivative is not None and form.k < form.dim:
        out.derivative = mollified_form(form.derivative, rho, rule, domain_check)
    return out


def mollify_commutes_check(form, rho, points, rule, step_factor=1e-5):
    """Max defect |d(R u) - R(d u)| at the points, outer d by central
    finite differences with step proportional to the local radius."""
    if form.derivative is None:
        raise SmoothingError("commutation check needs a form with analytic d")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ru = FormField(form.k, lambda p: mollify(form, rho, p, rule))
    steps = step_factor * rho.value(points)
    fd = ru.fd_exterior_derivative(points, steps)
    rdu = mollify(form.d(), rho, points, rule)
    return float(np.abs(fd - rdu).max())


class SmoothingPipeline:
    """Extension + distortion + mollification bundle for one box mesh and
    whole-face boundary patch."""

    def __init__(
        self,
        mesh,
        partition,
        tau_b=2.0,
        tau_e=0.25,
        n_radial=16,
        n_angular=16,
        delta_cap=0.1,
        mesh_size=None,
    ):
        if mesh.box_info is None or mesh.dim != 2:
            raise SmoothingError("smoothing pipeline requires a generated 2D box mesh")
        self.mesh = mesh
        self.partition = partition
        faces = faces_of_partition(mesh, partition)
        self.geometry = BoxGeometry(faces, tau_b=tau_b, tau_e=tau_e)
        self.extension = ExtensionOperator(self.geometry)
        self.mollifier = Mollifier(2)
        self.rule = BallRule(self.mollifier, n_radial, n_angular)
        self.delta_cap = float(delta_cap)
        self.mesh_size = mesh_size if mesh_size is not None else build_mesh_size_function(mesh)

    def radius(self, epsilon):
        return RadiusFunction.from_mesh_size(self.mesh_size, epsilon)

    def distortion(self, epsilon):
        """Distortion for rho = epsilon * meshsize; raises when epsilon is
        too large for the certified geometry constants."""
        return build_distortion(self.geometry, self.radius(epsilon))

    def delta_for(self, dist_map, delta=None):
        """Inner mollification factor: capped at delta_cap and scaled so the
        bulge absorbs the inner mollification ball (2 delta L_D < 1, with
        margin for the vanishing band)."""
        if delta is None:
            delta = min(self.delta_cap, 0.32 / dist_map.l_d)
        if 2.0 * delta * dist_map.l_d >= 1.0:
            raise SmoothingError(
                f"2 delta L_D = {2 * delta * dist_map.l_d:.3g} >= 1 "
                f"(delta={delta:.3g}, L_D={dist_map.l_d:.3g})"
            )
        return delta

    def smooth_mollify(self, form, epsilon, delta=None):
        """M u = R_{delta rho} D_rho^* E u with rho = epsilon * meshsize."""
        rho = self.radius(epsilon)
        dmap = build_distortion(self.geometry, rho)
        delta = self.delta_for(dmap, delta)
        ext = self.extension.extend(form)
        return _MollifiedExtension(self, form, ext, rho, dmap, delta)

    def interpolate_smoothed(self, space, form, epsilon, delta=None, degree=6):
        """Q u = I(M u): canonical interpolant of the smoothed field.

        The DOF quadrature is banded for the mollification layer and panelled
        toward the boundary triangulation of Gamma_T; fields presented as
        exterior derivatives (form.primitive set) integrate by parts through
        the de Rham map identity, which keeps the interpolation exactly
        compatible with the discrete d.
        """
        mu = self.smooth_mollify(form, epsilon, delta)
        return _interpolate_m_field(self, space, mu, degree)


def _m_quadrature(pipeline, space, mfield, degree):
    band = 1.5 * mfield.delta * mfield.rho.sup_norm() * (1.0 + mfield.rho.lipschitz())
    j_max = mfield.dmap.constants.j_max
    reach = 0.55 * j_max * mfield.rho.sup_norm() + 4.0 * band
    return _dof_quadrature_flat(space, degree, band=band, reach=reach)


def _interpolate_m_field(pipeline, space, mfield, degree):
    """Interpolate a mollified-extended field, integrating by parts when the
    field carries a primitive (int_sigma dw = int_{bdry sigma} w; traces on
    the boundary triangulation of Gamma_T vanish structurally)."""
    from .whitney import FESpace, exterior_derivative

    if mfield.primitive is not None and space.k >= 1:
        lower = FESpace(space.mesh, space.partition, space.k - 1)
        d_rel = exterior_derivative(lower, space)
        inner = _interpolate_m_field(pipeline, lower, mfield.primitive, degree)
        return Cochain(space, d_rel @ inner.coeffs)
    quad = _m_quadrature(pipeline, space, mfield, degree)
    return interpolate_flat(space, mfield, quad)


class _MollifiedExtension(FormField):
    """Evaluation chain of M u; carries M(du) as its derivative when the
    input has one (valid for inputs with vanishing trace on Gamma_T)."""

    def __init__(self, pipeline, base, ext, rho, dmap, delta):
        self.pipeline = pipeline
        self.base = base
        self.ext = ext
        self.rho = rho
        self.dmap = dmap
        self.delta = delta
        super().__init__(base.k, self._eval)
        if base.derivative is not None and base.k < 2:
            self.derivative = _MollifiedExtension(
                pipeline, base.d(), ext.d(), rho, dmap, delta
            )

    def _eval(self, points):
        pipe = self.pipeline
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(pipe.geometry.in_omega(points, slack=1e-9)):
            bad = points[~pipe.geometry.in_omega(points, slack=1e-9)][0]
            raise SmoothingError(f"M is defined on closure(Omega); got {bad}")
        m = len(points)
        y, w = pipe.rule.points, pipe.rule.weights
        q = len(y)
        rv = self.delta * self.rho.value(points)
        g = self.delta * self.rho.grad(points)
        z0 = (points[:, None, :] + rv[:, None, None] * y[None, :, :]).reshape(-1, 2)
        if not np.all(pipe.geometry.in_omega_e(z0, slack=1e-9)):
            bad = z0[~pipe.geometry.in_omega_e(z0, slack=1e-9)][0]
            raise SmoothingError(f"inner mollification sample outside Omega^e at {bad}")
        z = self.dmap(z0)
        vals = self.ext(z).reshape(m, q, self.ncomp)
        if self.k == 0:
            return (vals[:, :, 0] @ w).reshape(m, 1)
        jac = self.dmap.jacobian(z0).reshape(m, q, 2, 2)
        if self.k == 1:
            pulled = np.einsum("mqji,mqj->mqi", jac, vals)
            ydotu = (pulled * y[None, :, :]).sum(axis=2)
            pulled = pulled + ydotu[:, :, None] * g[:, None, :]
            return np.einsum("mqc,q->mc", pulled, w)
        det = jac[:, :, 0, 0] * jac[:, :, 1, 1] - jac[:, :, 0, 1] * jac[:, :, 1, 0]
        phi_det = 1.0 + (y[None, :, :] * g[:, None, :]).sum(axis=2)
        return ((vals[:, :, 0] * det * phi_det) @ w).reshape(m, 1)


def faces_of_partition(mesh, partition):
    """Whole box faces covered by gamma_T; partial faces are rejected."""
    edges = mesh.simplices[1]
    mids = mesh.vertices[edges].mean(axis=1)
    boundary = mesh.boundary_faces()
    tests = {
        "left": lambda m: abs(m[0] + 1.0) < 1e-12,
        "right": lambda m: abs(m[0] - 1.0) < 1e-12,
        "bottom": lambda m: abs(m[1] + 1.0) < 1e-12,
        "top": lambda m: abs(m[1] - 1.0) < 1e-12,
    }
    faces = set()
    for name, test in tests.items():
        on_face = [int(i) for i in boundary if test(mids[i])]
        selected = [i for i in on_face if i in partition.gamma_t]
        if not selected:
            continue
        if len(selected) != len(on_face):
            raise SmoothingError(
                f"smoothing requires whole-face patches; face '{name}' is "
                f"partially selected ({len(selected)}/{len(on_face)} edges)"
            )
        faces.add(name)
    covered = set()
    for name in faces:
        covered.update(i for i in boundary if tests[name](mids[i]))
    if covered != set(partition.gamma_t):
        raise SmoothingError("gamma_T contains edges outside whole box faces")
    return frozenset(faces)


# ---------------------------------------------------------------------------
# smoothed interpolant matrix and the idempotent projection
# ---------------------------------------------------------------------------


def _feature_depths(band, reach, extent):
    """Panel depths resolving the boundary transition layer.

    Uniform steps of ~3/4 band width cover [0, reach] (the distorted jump
    locus sits at depth up to rho/8 with features of width ~ delta rho =
    band scale); beyond the reach, depths grow geometrically up to `extent`.
    """
    step = 0.75 * band
    depths = []
    d = step
    while d < min(reach, extent):
        depths.append(d)
        d += step
    d = max(reach, step)
    while d < 0.6 * extent:
        depths.append(d)
        d *= 2.5
    return sorted(set(depths))


def _edge_breakpoints(touch_a, touch_b, length, band, reach):
    """Panel breakpoints on [0,1] for one edge DOF.

    Ends touching the boundary triangulation of Gamma_T get transition-layer
    panels (uniform at the band scale out to the locus reach, geometric
    beyond); other ends get two thin band panels that isolate the compactly
    supported mollification layer of piecewise inputs.
    """
    cuts = {0.0, 0.5, 1.0}
    for end, touch in ((0.0, touch_a), (1.0, touch_b)):
        if touch:
            rel = [d / length for d in _feature_depths(band, reach, length)]
        elif band is not None:
            rel = [min(band / length, 0.4), min(band / (4 * length), 0.1)]
        else:
            rel = []
        for r in rel:
            if 0 < r < 0.5:
                cuts.add(end + r if end == 0.0 else end - r)
    pts = sorted(cuts)
    return list(zip(pts[:-1], pts[1:]))


def _inner_offset_triangle(p, margin):
    """Triangle at inward distance `margin` from each side of p, or None."""
    e1, e2 = p[1] - p[0], p[2] - p[0]
    area = abs(0.5 * (e1[0] * e2[1] - e1[1] * e2[0]))
    heights = np.array(
        [
            2.0 * area / np.linalg.norm(p[2] - p[1]),
            2.0 * area / np.linalg.norm(p[2] - p[0]),
            2.0 * area / np.linalg.norm(p[1] - p[0]),
        ]
    )
    tau = margin / heights
    if tau.sum() >= 0.9:
        return None
    corners = np.empty((3, 2))
    for i in range(3):
        lam = tau.copy()
        lam[i] = 1.0 - tau.sum() + tau[i]
        corners[i] = lam @ p
    return corners


def _banded_subtriangles(p, margins):
    """Core plus boundary rings of triangle p at the given inward margins."""
    polys = [p]
    for m in sorted(margins):  # ascending margins nest inward
        inner = _inner_offset_triangle(p, m)
        if inner is None:
            return [p]
        polys.append(inner)
    tris = [polys[-1]]  # core
    for outer, inner in zip(polys[:-1], polys[1:]):
        for i in range(3):
            j = (i + 1) % 3
            tris.append(np.array([outer[i], outer[j], inner[i]]))
            tris.append(np.array([outer[j], inner[j], inner[i]]))
    return tris


def _strip_polygons(p, edge_local, scales):
    """Corner points of the lambda-level lines toward a local edge of p."""
    i, j = edge_local
    w = p[3 - i - j]
    e1, e2 = p[i], p[j]

    def line(s):
        return w + (1.0 - s) * (e1 - w), w + (1.0 - s) * (e2 - w)

    return line, e1, e2, w


def _u_feature_subtriangles(p, feature, band, reach, margins):
    """Transition-layer decomposition toward the Gamma_T feature of p.

    feature = ("edge", (i, j)) cuts strips parallel to the local edge at the
    feature depths; feature = ("vertex", i) cuts similar rings around the
    vertex. Each piece is then banded along its sides so the mollification
    layers of piecewise inputs on the parent's sides stay resolved.
    """
    kind, which = feature
    pieces = []
    if kind == "edge":
        line, e1, e2, w = _strip_polygons(p, which, None)
        # depth of the lambda_w = s level line above the edge
        i, j = which
        e_vec = p[j] - p[i]
        height = abs(np.cross(e_vec, w - p[i])) / max(np.linalg.norm(e_vec), 1e-300)
        levels = [d / height for d in _feature_depths(band, reach, height)]
        levels = [s for s in levels if s < 0.9] + [1.0]
        prev1, prev2 = e1, e2
        prev_s = 0.0
        for s in levels:
            if s >= 1.0:
                pieces.append(np.array([w, prev1, prev2]))
                break
            u1, u2 = line(s)
            pieces.append(np.array([prev1, u1, u2]))
            pieces.append(np.array([prev1, u2, prev2]))
            prev1, prev2, prev_s = u1, u2, s
    else:
        v = p[which]
        o1, o2 = p[(which + 1) % 3], p[(which + 2) % 3]
        leg = min(np.linalg.norm(o1 - v), np.linalg.norm(o2 - v))
        levels = [d / leg for d in _feature_depths(band, 1.5 * reach, leg)]
        levels = [s for s in levels if s < 0.9] + [1.0]
        prev1, prev2 = None, None
        for s in levels:
            q1, q2 = v + s * (o1 - v), v + s * (o2 - v)
            if prev1 is None:
                pieces.append(np.array([v, q1, q2]))
            else:
                pieces.append(np.array([prev1, q1, q2]))
                pieces.append(np.array([prev1, q2, prev2]))
            prev1, prev2 = q1, q2
    out = []
    for q in pieces:
        out.extend(_banded_subtriangles(q, margins))
    return out


def _dof_quadrature_flat(space, degree, band=None, reach=None):
    """Flat per-DOF quadrature: (row_ids, points, trace_weights).

    Pairing a k-form's coefficients at `points` with `trace_weights` and
    accumulating by `row_ids` yields the integral of the trace over each
    free simplex (sorted orientation).

    `band` is the absolute width of the mollification layer (about
    1.5 * delta * sup rho): piecewise inputs produce integrand features of
    exactly this compact support along every mesh edge, so panels isolate a
    band of that width along all simplex sides. Simplices touching the
    closure of the boundary triangulation of Gamma_T are panelled at the
    band scale out to `reach` (the depth of the distorted transition layer,
    ~ sup rho / 8), where the extended field jumps to its bulge zero.
    Both may be None for plain rules (smooth integrands).
    """
    mesh = space.mesh
    k = space.k
    simplices = mesh.simplices[k][space.free]
    if k == 0:
        pts = mesh.vertices[simplices[:, 0]]
        return np.arange(len(simplices)), pts, np.ones((len(simplices), 1))
    if band is not None and reach is None:
        reach = 16.0 * band
    closure = space.partition.gamma_t_closure() if band is not None else {}
    touch_v = closure.get(0, set())
    u_edges = closure.get(1, set())
    rows, pts, tws = [], [], []
    if k == 1:
        t1d, w1d = simplex_rule(1, degree)
        t1d = t1d[:, 1]  # parameter of the second vertex
        for i, (a, b) in enumerate(simplices):
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            length = float(np.linalg.norm(pb - pa))
            panels = _edge_breakpoints(
                a in touch_v, b in touch_v, length, band, reach
            )
            for lo, hi in panels:
                t = lo + (hi - lo) * t1d
                rows.append(np.full(len(t), i))
                pts.append(pa[None, :] + t[:, None] * (pb - pa)[None, :])
                tws.append(np.outer(w1d * (hi - lo), pb - pa))
        return np.concatenate(rows), np.vstack(pts), np.vstack(tws)
    bary, wq = simplex_rule(2, degree)
    margins = [] if band is None else [band, band / 4.0]
    for i, tri in enumerate(simplices):
        p = mesh.vertices[tri]
        e1, e2 = p[1] - p[0], p[2] - p[0]
        sign = np.sign(0.5 * (e1[0] * e2[1] - e1[1] * e2[0]))
        local_u_edges = [
            (a, b)
            for a, b in ((0, 1), (0, 2), (1, 2))
            if mesh.index[1][(min(tri[a], tri[b]), max(tri[a], tri[b]))] in u_edges
        ]
        touching = [j for j in range(3) if tri[j] in touch_v]
        if band is None:
            subtris = [p]
        elif len(local_u_edges) == 1:
            subtris = _u_feature_subtriangles(
                p, ("edge", local_u_edges[0]), band, reach, margins
            )
        elif len(local_u_edges) >= 2:
            shared = set(local_u_edges[0]) & set(local_u_edges[1])
            subtris = _u_feature_subtriangles(
                p, ("vertex", shared.pop()), band, reach, margins
            )
        elif touching:
            subtris = _u_feature_subtriangles(
                p, ("vertex", touching[0]), band, reach, margins
            )
        else:
            subtris = _banded_subtriangles(p, margins)
        for q in subtris:
            f1, f2 = q[1] - q[0], q[2] - q[0]
            area = abs(0.5 * (f1[0] * f2[1] - f1[1] * f2[0]))
            if area < 1e-300:
                continue
            rows.append(np.full(len(wq), i))
            pts.append(bary @ q)
            tws.append((wq * area * sign)[:, None])
    return np.concatenate(rows), np.vstack(pts), np.vstack(tws)


def interpolate_flat(space, form, quadrature):
    """Canonical interpolant using a precomputed flat DOF quadrature."""
    rows, pts, tw = quadrature
    vals = form(pts)
    contrib = (vals * tw).sum(axis=1)
    coeffs = np.zeros(space.dim)
    np.add.at(coeffs, rows, contrib)
    return Cochain(space, coeffs)


def assemble_smoothed_interpolant(pipeline, space, rho, dmap, delta,
                                  quadrature=None, degree=6, chunk=8192):
    """Matrix of Q = I o M against all k-simplex Whitney basis forms.

    Rows are the constrained DOFs of `space`; columns are global k-simplices
    (columns on constrained simplices included, so the same pass serves both
    the Schoeberl correction and operator-norm measurements).
    """
    mesh = pipeline.mesh
    geo = pipeline.geometry
    k = space.k
    n_rows = space.dim
    n_cols = mesh.n_simplices(k)
    if quadrature is None:
        quadrature = _dof_quadrature_flat(space, degree)
    all_rows, all_pts, all_tw = quadrature
    y, w = pipeline.rule.points, pipeline.rule.weights
    qm = len(y)
    triplets_r, triplets_c, triplets_v = [], [], []
    from .whitney import _barycentric_batch

    for start in range(0, len(all_rows), chunk):
        sl = slice(start, min(start + chunk, len(all_rows)))
        x = all_pts[sl]
        tww = all_tw[sl]
        rows = all_rows[sl]
        rv = delta * rho.value(x)
        g = delta * rho.grad(x)
        z0 = (x[:, None, :] + rv[:, None, None] * y[None, :, :]).reshape(-1, 2)
        z = dmap(z0)
        folded, signs = geo.fold(z)
        inside = geo.in_omega(folded)
        if not np.any(inside):
            continue
        idx = np.flatnonzero(inside)
        zf = np.clip(folded[idx], geo.lo + 1e-14, geo.hi - 1e-14)
        cells = mesh.locate(zf)
        bary = _barycentric_batch(mesh, zf, cells)
        basis = space.basis_values(cells, bary)              # (s, nb, ncomp)
        ids = space.cell_basis_table()[cells]  # (s, nb)
        sample_of = idx // qm                                # index into x
        node_of = idx % qm
        wmoll = w[node_of]
        if k == 0:
            coeff = wmoll * tww[sample_of, 0]
            contrib = coeff[:, None] * basis[:, :, 0]
        elif k == 1:
            jac = dmap.jacobian(z0[idx])
            a = (g[sample_of] * tww[sample_of]).sum(axis=1)
            dphi_tw = tww[sample_of] + a[:, None] * y[node_of]
            ell = np.einsum("sij,sj->si", jac, dphi_tw) * signs[idx]
            contrib = wmoll[:, None] * np.einsum("si,sbi->sb", ell, basis)
        else:
            jac = dmap.jacobian(z0[idx])
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            phi_det = 1.0 + (y[node_of] * g[sample_of]).sum(axis=1)
            sgn = signs[idx, 0] * signs[idx, 1]
            coeff = wmoll * tww[sample_of, 0] * det * phi_det * sgn
            contrib = coeff[:, None] * basis[:, :, 0]
        row_ids = rows[sample_of]
        nb = ids.shape[1]
        triplets_r.append(np.repeat(row_ids, nb))
        triplets_c.append(ids.ravel())
        triplets_v.append(contrib.ravel())
    if triplets_r:
        mat = sp.coo_matrix(
            (
                np.concatenate(triplets_v),
                (np.concatenate(triplets_r), np.concatenate(triplets_c)),
            ),
            shape=(n_rows, n_cols),
        ).tocsr()
    else:
        mat = sp.csr_matrix((n_rows, n_cols))
    return mat


@dataclass
class ProjectionReport:
    epsilon: float
    delta: float
    retries: list
    q_deviation: dict          # k -> ||I - Q|_P|| in the mass norm
    constants: dict


class SmoothedProjection:
    """Idempotent commuting projection onto the constrained Whitney complex.

    pi = (Q|_P)^{-1} o Q: epsilon is halved (up to max_halvings times) until
    ||I - Q|_P" < 1 in the mass-weighted operator norm for every degree.
    """

    def __init__(self, pipeline, complex_, epsilon=0.3, delta=None,
                 max_halvings=8, degree=6):
        self.pipeline = pipeline
        self.complex = complex_
        retries = []
        eps = float(epsilon)
        last_dev = None
        for attempt in range(max_halvings + 1):
            try:
                rho = pipeline.radius(eps)
                dmap = build_distortion(pipeline.geometry, rho)
            except GeometryError as exc:
                retries.append({"epsilon": eps, "reason": str(exc)})
                eps *= 0.5
                continue
            dlt = pipeline.delta_for(dmap, delta)
            band = 1.5 * dlt * rho.sup_norm() * (1.0 + rho.lipschitz())
            reach = (
                0.55 * dmap.constants.j_max * rho.sup_norm() + 4.0 * band
            )
            quads = {
                k: _dof_quadrature_flat(
                    complex_.spaces[k], degree, band=band, reach=reach
                )
                for k in range(3)
            }
            mats = {}
            devs = {}
            ok = True
            for k in range(3):
                space = complex_.spaces[k]
                full = assemble_smoothed_interpolant(
                    pipeline, space, rho, dmap, dlt, quadrature=quads[k]
                ).tolil()
                mats[k] = full
            corrected, assembly_defect = _commutation_correct_all(complex_, mats)
            for k in range(3):
                devs[k] = _mass_operator_norm(
                    np.eye(complex_.spaces[k].dim) - corrected[k],
                    complex_.mass[k].toarray(),
                )
                if devs[k] >= 1.0:
                    ok = False
            last_dev = devs
            if ok:
                break
            retries.append(
                {"epsilon": eps, "reason": f"||I - Q|_P|| = {max(devs.values()):.3g} >= 1"}
            )
            eps *= 0.5
        else:
            raise SmoothingError(
                f"no admissible epsilon found after {max_halvings} halvings; "
                f"achieved ||I - Q|_P|| = {max(last_dev.values()):.3g}"
                if last_dev
                else "no admissible epsilon found"
            )
        self.epsilon = eps
        self.delta = dlt
        self.rho = rho
        self.dmap = dmap
        self.degree = degree
        self.quadratures = quads
        self.q_constrained = corrected
        # keep the full-column matrices consistent with the corrected
        # constrained blocks (extra columns touch Gamma_T; the commutation
        # identity does not apply to them and they stay as assembled)
        self.q_full = {}
        for k in range(3):
            space = complex_.spaces[k]
            full = mats[k]
            full[:, space.free] = corrected[k]
            self.q_full[k] = full.tocsr()
        self.lu = {k: sla.lu_factor(self.q_constrained[k]) for k in range(3)}
        self.report = ProjectionReport(
            epsilon=eps,
            delta=dlt,
            retries=retries,
            q_deviation=devs,
            constants={
                "eps_D": dmap.constants.eps_d,
                "L_D": dmap.constants.l_d,
                "J": dmap.constants.j_max,
                "r0_min": dmap.constants.r0_min,
                "rule": (pipeline.rule.n_radial, pipeline.rule.n_angular),
                "assembly_commutation_defect": assembly_defect,
            },
        )

    def _mollify_field(self, form):
        """M form, with the primitive chain mirrored so that interpolation
        can integrate by parts."""
        if form.primitive is not None:
            mprim = self._mollify_field(form.primitive)
            return mprim.d()
        ext = self.pipeline.extension.extend(form)
        return _MollifiedExtension(
            self.pipeline, form, ext, self.rho, self.dmap, self.delta
        )

    def apply_form(self, k, form):
        """pi applied to a FormField: (Q|_P)^{-1} I(M form).

        Fields presented as exterior derivatives interpolate through the de
        Rham map identity, so d(pi u) = pi(d u) holds to rounding.
        """
        space = self.complex.spaces[k]
        mform = self._mollify_field(form)
        q = self._interpolate(k, mform)
        return Cochain(space, sla.lu_solve(self.lu[k], q))

    def _interpolate(self, k, mform):
        if mform.primitive is not None and k >= 1:
            return self.complex.d_matrix(k - 1) @ self._interpolate(
                k - 1, mform.primitive
            )
        return interpolate_flat(
            self.complex.spaces[k], mform, self.quadratures[k]
        ).coeffs

    def apply_global_cochain(self, k, global_coeffs):
        """pi applied to the Whitney field of unconstrained coefficients."""
        space = self.complex.spaces[k]
        q = self.q_full[k] @ np.asarray(global_coeffs, dtype=float)
        return Cochain(space, sla.lu_solve(self.lu[k], q))

    def projection_matrix(self, k):
        """Matrix of pi on unconstrained Whitney inputs."""
        a = self.q_constrained[k]
        return np.linalg.solve(a, self.q_full[k].toarray())

    def operator_norm(self, k, iterations=200, seed=11, tol=1e-10):
        """Mass-weighted L2 operator norm of pi measured over unconstrained
        Whitney inputs on the same mesh, by power iteration."""
        from .whitney import FESpace, mass_matrix
        from .mesh import BoundaryPartition

        empty = BoundaryPartition(self.pipeline.mesh, frozenset())
        space_u = FESpace(self.pipeline.mesh, empty, k)
        m_u = mass_matrix(space_u).toarray()
        m_c = self.complex.mass[k].toarray()
        p = self.projection_matrix(k)[:, space_u.free]
        a = p.T @ m_c @ p
        lu = sla.lu_factor(m_u)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(a.shape[0])
        x /= np.sqrt(x @ (m_u @ x))
        lam = 0.0
        for _ in range(iterations):
            y = sla.lu_solve(lu, a @ x)
            nrm = np.sqrt(y @ (m_u @ y))
            if nrm == 0:
                return 0.0
            y /= nrm
            lam_new = float(y @ (a @ y))
            done = abs(lam_new - lam) <= tol * max(lam_new, 1e-300)
            x, lam = y, lam_new
            if done:
                break
        return float(np.sqrt(max(lam, 0.0)))


def _commutation_correct_all(complex_, full_mats):
    """Restore the discrete commutation A_{k+1} D_k = D_k A_k of the
    assembled smoothed-interpolant matrices.

    The identity holds in exact arithmetic: d commutes with every stage of
    M, and the canonical interpolant of an exact field integrates by parts
    (traces on the boundary triangulation of Gamma_T vanish structurally).
    Quadrature breaks it by the size of the per-entry integration error; the
    minimal row-space adjustment puts it back. Pre-correction defects are
    returned for reporting.
    """
    a = {
        k: full_mats[k][:, complex_.spaces[k].free].toarray() for k in range(3)
    }
    defects = {}
    d0 = complex_.d_matrix(0).toarray()
    d1 = complex_.d_matrix(1).toarray()
    delta = d0 @ a[0] - a[1] @ d0
    defects["01"] = float(np.abs(delta).max()) if delta.size else 0.0
    if delta.size:
        a[1] = a[1] + delta @ np.linalg.pinv(d0)
    # harmonic directions of ker d1 outside range d0: force d1 A1 h = 0
    # (the true value: d of the harmonic Whitney field is zero)
    if d1.size:
        kernel = sla.null_space(d1)
        if kernel.size and d0.size:
            u, s, _ = np.linalg.svd(d0, full_matrices=False)
            rng = u[:, s > 1e-10 * (s[0] if len(s) else 1.0)]
            kernel = kernel - rng @ (rng.T @ kernel)
            kernel = kernel[:, np.linalg.norm(kernel, axis=0) > 1e-8]
            if kernel.size:
                kernel, _ = np.linalg.qr(kernel)
        if kernel.size:
            w = d1 @ (a[1] @ kernel)
            defects["harmonic"] = float(np.abs(w).max())
            a[1] = a[1] - np.linalg.pinv(d1) @ w @ kernel.T
        delta = d1 @ a[1] - a[2] @ d1
        defects["12"] = float(np.abs(delta).max())
        a[2] = a[2] + delta @ np.linalg.pinv(d1)
    return a, defects


def _mass_operator_norm(mat, mass):
    """Operator norm of `mat` acting on cochains in the mass inner product."""
    l = sla.cholesky(mass, lower=True)
    b = l.T @ mat @ sla.solve_triangular(l.T, np.eye(len(mass)), lower=False)
    return float(np.linalg.norm(b, 2))


def density_convergence_table(pipeline, form, epsilons, degree=6):
    """L2 errors of u - M_eps u and du - M_eps du over the mesh, per epsilon.

    Evidence for the density of smooth boundary-respecting forms: both
    errors must decrease to zero as epsilon shrinks.
    """
    if form.derivative is None:
        raise SmoothingError("density check needs a form with analytic d")
    mesh = pipeline.mesh
    bary, wq = simplex_rule(2, degree)
    verts = mesh.vertices[mesh.simplices[2]]
    rows = []
    for eps in epsilons:
        mu = pipeline.smooth_mollify(form, eps)
        err_u = 0.0
        err_du = 0.0
        for qb, qw in zip(bary, wq):
            pts = np.einsum("a,maj->mj", qb, verts)
            du = (form(pts) - mu(pts)) ** 2
            ddu = (form.d()(pts) - mu.d()(pts)) ** 2
            err_u += qw * float((du.sum(axis=1) * mesh.volume).sum())
            err_du += qw * float((ddu.sum(axis=1) * mesh.volume).sum())
        rows.append(
            {
                "epsilon": float(eps),
                "err_l2": float(np.sqrt(err_u)),
                "err_d_l2": float(np.sqrt(err_du)),
                "err_w22": float(np.sqrt(err_u) + np.sqrt(err_du)),
            }
        )
    return rows
