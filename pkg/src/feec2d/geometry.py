"""Box-domain geometry for the boundary-respecting smoothing pipeline.

The essential patch Gamma_T is a union of whole faces of the box (-1,1)^2.
A bulge slab of thickness tau_b is attached outside each selected face;
where two selected faces meet, the shared corner square joins them, so the
bulged domain is again an axis-aligned box. Around the bulge boundary a
radial collar (rays from a kernel point of each star-shaped bulge component,
arc-length calibrated) carries the distortion map: a strictly monotone
piecewise-linear profile pushes a neighborhood of the bulge boundary into
the bulge. The profile is the identity outside [-2a, 4a], sends 0 to 2a, and
has slopes 2 and 1/2, with a = rho(x0)/8; forward and inverse are exact
closed forms, so the composition identity holds to rounding.

Extension beyond the bulged box is by coordinate folding (even reflection
with the pullback sign pattern), which commutes with the exterior derivative.
"""

from dataclasses import dataclass, field

import numpy as np

from .forms import FormField

FACES = ("left", "right", "bottom", "top")
_ADJACENT = {
    frozenset(("left", "bottom")): (-1.0, -1.0),
    frozenset(("bottom", "right")): (1.0, -1.0),
    frozenset(("right", "top")): (1.0, 1.0),
    frozenset(("top", "left")): (-1.0, 1.0),
}


class GeometryError(Exception):
    pass


def _face_cycle_groups(faces):
    """Connected groups of selected faces in the boundary cycle order."""
    cycle = ("left", "bottom", "right", "top")
    sel = [f in faces for f in cycle]
    if all(sel):
        return [set(cycle)]
    groups, current = [], []
    # start at an unselected face so groups do not wrap
    start = sel.index(False)
    for i in range(4):
        f = cycle[(start + i) % 4]
        if f in faces:
            current.append(f)
        elif current:
            groups.append(set(current))
            current = []
    if current:
        groups.append(set(current))
    return groups


def _slab_polygon(face, tau):
    if face == "left":
        return np.array([(-1 - tau, -1), (-1, -1), (-1, 1), (-1 - tau, 1)], float)
    if face == "right":
        return np.array([(1, -1), (1 + tau, -1), (1 + tau, 1), (1, 1)], float)
    if face == "bottom":
        return np.array([(-1, -1 - tau), (1, -1 - tau), (1, -1), (-1, -1)], float)
    return np.array([(-1, 1), (1, 1), (1, 1 + tau), (-1, 1 + tau)], float)


def _l_polygon(pair, tau):
    """Two adjacent slabs joined through their shared corner square, CCW."""
    cx, cy = _ADJACENT[frozenset(pair)]
    # canonical construction at corner (-1,-1), reflected into place
    base = np.array(
        [
            (-1 - tau, -1 - tau),
            (1, -1 - tau),
            (1, -1),
            (-1, -1),
            (-1, 1),
            (-1 - tau, 1),
        ],
        float,
    )
    pts = base * np.array([[-cx, -cy]])
    # a single-axis reflection flips orientation; restore CCW
    area = 0.5 * np.sum(
        pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1]
    )
    if area < 0:
        pts = pts[::-1]
    return pts


@dataclass
class StarCollar:
    """Radial collar of a star-shaped polygon boundary.

    Rays start at the kernel point `center`; `sign` is +1 when the bulge
    lies on the inside of the polygon and -1 when it lies outside (the inner
    boundary of a full ring). The collar parameter is radial arc length.
    """

    polygon: np.ndarray   # (m, 2) CCW vertices
    center: np.ndarray
    sign: int = 1
    normals: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        a = self.polygon
        b = np.roll(a, -1, axis=0)
        edge = b - a
        # outward normal of a CCW polygon: rotate edge by -90 degrees
        nrm = np.column_stack([edge[:, 1], -edge[:, 0]])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        self.normals = nrm
        self.offsets = ((a - self.center) * nrm).sum(axis=1)
        if np.any(self.offsets <= 0):
            raise GeometryError("collar center is not a kernel point of the polygon")
        self._edge_a = a
        self._edge_b = b

    def radial(self, unit_dirs):
        """Distance from the kernel point to the polygon along each ray."""
        dots = unit_dirs @ self.normals.T  # (m, F)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dots > 1e-14, self.offsets[None, :] / dots, np.nan)
            # keep only facets whose segment the ray actually crosses
            hit = self.center[None, None, :] + t[:, :, None] * unit_dirs[:, None, :]
            e = self._edge_b - self._edge_a
            ee = (e * e).sum(axis=1)
            s = ((hit - self._edge_a[None, :, :]) * e[None, :, :]).sum(axis=2) / ee[None, :]
            valid = (dots > 1e-14) & (s >= -1e-9) & (s <= 1.0 + 1e-9)
        t = np.where(valid, t, np.inf)
        r0 = t.min(axis=1)
        if np.any(~np.isfinite(r0)):
            raise GeometryError("ray misses the polygon; center is not a kernel point")
        return r0

    def coordinates(self, points):
        """(x0, t, r0, unit) radial collar coordinates of the points."""
        v = points - self.center
        dist = np.linalg.norm(v, axis=1)
        safe = np.maximum(dist, 1e-300)
        unit = v / safe[:, None]
        r0 = self.radial(unit)
        t = self.sign * (r0 - dist)
        x0 = self.center + r0[:, None] * unit
        return x0, t, r0, unit

    def geometry_constants(self):
        """Exact r0 range and ray/normal metric distortion J along the boundary.

        The minimum center-to-boundary distance is the point-segment minimum;
        the maximum over a facet is attained at an endpoint.
        """
        j_max = 1.0
        r_min, r_max = np.inf, 0.0
        for f in range(len(self.polygon)):
            a, b = self._edge_a[f], self._edge_b[f]
            e = b - a
            s = np.clip(((self.center - a) @ e) / (e @ e), 0.0, 1.0)
            foot = a + s * e
            r_min = min(r_min, float(np.linalg.norm(foot - self.center)))
            r_end = max(
                float(np.linalg.norm(a - self.center)),
                float(np.linalg.norm(b - self.center)),
            )
            r_max = max(r_max, r_end)
            j_max = max(j_max, r_end / self.offsets[f])
        return r_min, r_max, j_max


def _zeta(t, alpha):
    """Monotone piecewise-linear push profile: identity outside [-2a, 4a],
    0 -> 2a, slopes 2 on [-2a, 0] and 1/2 on [0, 4a]."""
    out = np.array(t, dtype=float, copy=True)
    lo = (t > -2.0 * alpha) & (t <= 0.0)
    hi = (t > 0.0) & (t < 4.0 * alpha)
    out[lo] = 2.0 * t[lo] + 2.0 * alpha[lo]
    out[hi] = 2.0 * alpha[hi] + 0.5 * t[hi]
    return out


def _zeta_inv(s, alpha):
    out = np.array(s, dtype=float, copy=True)
    lo = (s > -2.0 * alpha) & (s <= 2.0 * alpha)
    hi = (s > 2.0 * alpha) & (s < 4.0 * alpha)
    out[lo] = 0.5 * (s[lo] - 2.0 * alpha[lo])
    out[hi] = 2.0 * s[hi] - 4.0 * alpha[hi]
    return out


def _zeta_slopes(t, alpha):
    """(d zeta/dt, d zeta/d alpha) on the profile pieces."""
    st = np.ones_like(t)
    sa = np.zeros_like(t)
    lo = (t > -2.0 * alpha) & (t <= 0.0)
    hi = (t > 0.0) & (t < 4.0 * alpha)
    st[lo] = 2.0
    st[hi] = 0.5
    sa[lo | hi] = 2.0
    return st, sa


@dataclass
class DistortionConstants:
    eps_d: float
    l_d: float
    j_max: float
    r0_min: float
    shift_max_factor: float = 0.25  # |x - D(x)| <= shift_max_factor * rho + slack


class DistortionMap:
    """Bi-Lipschitz push of a neighborhood of the bulge boundary into the
    bulge, locally controlled by the radius function rho."""

    def __init__(self, collars, rho, constants):
        self.collars = collars
        self.rho = rho
        self.constants = constants
        self.eps_d = constants.eps_d
        self.l_d = constants.l_d

    def _transform(self, points, inverse):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = points.copy()
        for collar in self.collars:
            x0, t, r0, unit = collar.coordinates(out)
            alpha = self.rho.value(x0) / 8.0
            active = (t > -2.0 * alpha) & (t < 4.0 * alpha) & (alpha > 0)
            if not np.any(active):
                continue
            prof = _zeta_inv if inverse else _zeta
            t_new = prof(t[active], alpha[active])
            dist_new = r0[active] - collar.sign * t_new
            out[active] = collar.center + dist_new[:, None] * unit[active]
        return out

    def __call__(self, points):
        return self._transform(points, inverse=False)

    def inverse(self, points):
        return self._transform(points, inverse=True)

    def jacobian(self, points):
        """Analytic Jacobian (m,2,2); identity off the active collar zones."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(points)
        jac = np.tile(np.eye(2), (m, 1, 1))
        for collar in self.collars:
            v = points - collar.center
            dist = np.linalg.norm(v, axis=1)
            safe = np.maximum(dist, 1e-300)
            unit = v / safe[:, None]
            r0 = collar.radial(unit)
            t = collar.sign * (r0 - dist)
            x0 = collar.center + r0[:, None] * unit
            alpha = self.rho.value(x0) / 8.0
            active = (t > -2.0 * alpha) & (t < 4.0 * alpha) & (alpha > 0)
            if not np.any(active):
                continue
            idx = np.flatnonzero(active)
            ui = unit[idx]
            di = dist[idx]
            r0i = r0[idx]
            ti = t[idx]
            ai = alpha[idx]
            # facet normal seen by each active ray
            dots = ui @ collar.normals.T
            with np.errstate(divide="ignore"):
                tf = np.where(dots > 1e-14, collar.offsets[None, :] / dots, np.inf)
            face = np.argmin(np.abs(tf - r0i[:, None]), axis=1)
            nf = collar.normals[face]
            proj = np.eye(2)[None, :, :] - ui[:, :, None] * ui[:, None, :]
            p_over = proj / di[:, None, None]
            # grad r0 = -(r0^2/d_F) n^T P / |v|
            dfac = collar.offsets[face]
            grad_r0 = -(r0i ** 2 / dfac)[:, None] * np.einsum(
                "mi,mij->mj", nf, p_over
            )
            grad_dist = ui
            grad_t = collar.sign * (grad_r0 - grad_dist)
            grad_x0 = ui[:, :, None] * grad_r0[:, None, :] + r0i[:, None, None] * p_over
            grho = self.rho.grad(x0[idx])
            grad_alpha = np.einsum("mi,mij->mj", grho, grad_x0) / 8.0
            st, sa = _zeta_slopes(ti, ai)
            zeta_val = _zeta(ti, ai)
            grad_zeta = st[:, None] * grad_t + sa[:, None] * grad_alpha
            dist_new = r0i - collar.sign * zeta_val
            grad_dn = grad_r0 - collar.sign * grad_zeta
            jac[idx] = (
                ui[:, :, None] * grad_dn[:, None, :] + dist_new[:, None, None] * p_over
            )
        return jac


@dataclass
class BoxGeometry:
    """Domain, bulge, and extension boxes for a union-of-faces patch."""

    faces: frozenset
    tau_b: float = 2.0
    tau_e: float = 0.25
    lo: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0]))
    hi: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))

    def __post_init__(self):
        self.faces = frozenset(self.faces)
        unknown = self.faces - set(FACES)
        if unknown:
            raise GeometryError(f"unknown faces {sorted(unknown)}")
        t = self.tau_b
        self.lo_b = self.lo - t * np.array(["left" in self.faces, "bottom" in self.faces], float)
        self.hi_b = self.hi + t * np.array(["right" in self.faces, "top" in self.faces], float)
        self.lo_e = self.lo_b - self.tau_e
        self.hi_e = self.hi_b + self.tau_e

    def collars(self):
        if not self.faces:
            return []
        if len(self.faces) == 4:
            outer = np.array(
                [
                    (self.lo_b[0], self.lo_b[1]),
                    (self.hi_b[0], self.lo_b[1]),
                    (self.hi_b[0], self.hi_b[1]),
                    (self.lo_b[0], self.hi_b[1]),
                ]
            )
            inner = np.array(
                [
                    (self.lo[0], self.lo[1]),
                    (self.hi[0], self.lo[1]),
                    (self.hi[0], self.hi[1]),
                    (self.lo[0], self.hi[1]),
                ]
            )
            center = 0.5 * (self.lo + self.hi)
            return [
                StarCollar(outer, center, sign=1),
                StarCollar(inner, center, sign=-1),
            ]
        collars = []
        for group in _face_cycle_groups(self.faces):
            if len(group) == 1:
                face = next(iter(group))
                poly = _slab_polygon(face, self.tau_b)
                center = poly.mean(axis=0)
                collars.append(StarCollar(poly, center, sign=1))
            elif len(group) == 2:
                poly = _l_polygon(group, self.tau_b)
                cx, cy = _ADJACENT[frozenset(group)]
                center = np.array([cx * (1 + self.tau_b / 2), cy * (1 + self.tau_b / 2)])
                collars.append(StarCollar(poly, center, sign=1))
            else:
                raise GeometryError(
                    "three adjacent selected faces form a bulge that is not "
                    "star-shaped; this geometry is not supported by the "
                    "smoothing pipeline"
                )
        return collars

    def in_omega(self, points, slack=0.0):
        points = np.atleast_2d(points)
        return np.all(
            (points >= self.lo - slack) & (points <= self.hi + slack), axis=1
        )

    def in_bulge(self, points):
        """Strictly inside the bulge (inside Omega^b, outside closure(Omega))."""
        points = np.atleast_2d(points)
        in_b = np.all((points > self.lo_b) & (points < self.hi_b), axis=1)
        out_o = np.any((points < self.lo) | (points > self.hi), axis=1)
        return in_b & out_o

    def in_omega_e(self, points, slack=0.0):
        points = np.atleast_2d(points)
        return np.all(
            (points >= self.lo_e - slack) & (points <= self.hi_e + slack), axis=1
        )

    def fold(self, points):
        """Fold Omega^e onto closure(Omega^b) by per-coordinate reflection.

        Returns the folded points and the diagonal pullback signs (m, 2).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        folded = points.copy()
        signs = np.ones_like(points)
        for d in range(2):
            low = folded[:, d] < self.lo_b[d]
            high = folded[:, d] > self.hi_b[d]
            folded[low, d] = 2.0 * self.lo_b[d] - folded[low, d]
            folded[high, d] = 2.0 * self.hi_b[d] - folded[high, d]
            signs[low | high, d] = -1.0
        return folded, signs

    def certify_distortion(self):
        """Certified eps_D and L_D for this bulge geometry.

        eps_D caps both sup(rho) and Lip(rho): the profile zone [-2a, 4a]
        (a < eps_D/8) must stay inside each collar's radial reach, inside the
        extension margin, and away from other collar zones. L_D is dominated
        by the intobulge property, which costs a factor of the ray/normal
        metric distortion J.
        """
        collars = self.collars()
        if not collars:
            return DistortionConstants(np.inf, 1.0, 1.0, np.inf), collars
        r0_min, j_max = np.inf, 1.0
        for c in collars:
            rmin, _, j = c.geometry_constants()
            r0_min = min(r0_min, rmin)
            j_max = max(j_max, j)
        seps = [2.0 * self.tau_e, 2.0 * r0_min]
        if len(collars) > 1:
            # zones reach at most rho/2 from their boundary polygon
            seps.append(self.tau_b if len(self.faces) == 4 else 2.0)
        eps_d = 0.8 * min(1.0, *seps)
        l_d = max(4.0, 10.0 * (1.0 + j_max))
        return DistortionConstants(eps_d, l_d, j_max, r0_min), collars


def build_distortion(geometry, rho):
    """Distortion map for the geometry, rejecting rho that exceeds the
    certified bounds."""
    constants, collars = geometry.certify_distortion()
    if collars:
        sup = rho.sup_norm()
        lip = rho.lipschitz()
        if sup >= constants.eps_d or lip >= constants.eps_d:
            raise GeometryError(
                f"radius function too large or too steep: sup={sup:.4g}, "
                f"Lip={lip:.4g}, certified eps_D={constants.eps_d:.4g}"
            )
    return DistortionMap(collars, rho, constants)


def segment_distances(points, a, b):
    """Distance from each point to each segment [a_f, b_f]; (m, F)."""
    points = np.atleast_2d(points)
    e = b - a                                    # (F, 2)
    ee = (e * e).sum(axis=1)
    rel = points[:, None, :] - a[None, :, :]     # (m, F, 2)
    s = np.clip((rel * e[None, :, :]).sum(axis=2) / ee[None, :], 0.0, 1.0)
    foot = a[None, :, :] + s[:, :, None] * e[None, :, :]
    return np.linalg.norm(points[:, None, :] - foot, axis=2)


def bulge_boundary_distance(geometry, points):
    """Distance to the bulge boundary (all collar polygons)."""
    collars = geometry.collars()
    if not collars:
        return np.full(len(np.atleast_2d(points)), np.inf)
    dists = [
        segment_distances(points, c._edge_a, c._edge_b).min(axis=1) for c in collars
    ]
    return np.min(dists, axis=0)


def sample_bulge_boundary(geometry, n, rng):
    """Uniform-ish random points on the bulge boundary polygons."""
    collars = geometry.collars()
    if not collars:
        return np.zeros((0, 2))
    segs_a = np.vstack([c._edge_a for c in collars])
    segs_b = np.vstack([c._edge_b for c in collars])
    lengths = np.linalg.norm(segs_b - segs_a, axis=1)
    probs = lengths / lengths.sum()
    pick = rng.choice(len(lengths), size=n, p=probs)
    s = rng.random(n)
    return segs_a[pick] + s[:, None] * (segs_b[pick] - segs_a[pick])


class ExtensionOperator:
    """E: forms on closure(Omega) -> forms on Omega^e.

    Zero extension onto the bulge, then even reflection (coordinate folding
    with the pullback sign pattern) across the bulged box boundary; commutes
    with d for inputs with vanishing tangential trace on Gamma_T.
    """

    def __init__(self, geometry):
        self.geometry = geometry

    def extend(self, form):
        geo = self.geometry

        def func(points):
            points = np.atleast_2d(points)
            if not np.all(geo.in_omega_e(points, slack=1e-9)):
                bad = points[~geo.in_omega_e(points, slack=1e-9)][0]
                raise GeometryError(f"evaluation outside Omega^e at {bad}")
            folded, signs = geo.fold(points)
            inside = geo.in_omega(folded, slack=0.0)
            out = np.zeros((len(points), form.ncomp))
            if np.any(inside):
                pts_in = np.clip(folded[inside], geo.lo + 1e-14, geo.hi - 1e-14)
                vals = form(pts_in)
                if form.k == 1:
                    vals = vals * signs[inside]
                elif form.k == 2:
                    vals = vals * (signs[inside, 0] * signs[inside, 1])[:, None]
                out[inside] = vals
            return out

        ext = FormField(form.k, func)
        if form.derivative is not None:
            ext.derivative = self.extend(form.derivative)
        return ext
