"""Fixed quadrature rules: Gauss rules on simplices and a polar product rule
on the unit disk.

All rules return (points, weights) with weights summing to the reference
measure. Simplex rules are given in barycentric coordinates so they can be
mapped affinely to any physical simplex.
"""

import numpy as np

# Dunavant degree-6 rule on the triangle, 12 points.
# Barycentric coordinates and weights (weights sum to 1, i.e. normalized
# to the reference area).
_DUNAVANT6_BARY = [
    (0.873821971016996, 0.063089014491502, 0.063089014491502, 0.050844906370207),
    (0.063089014491502, 0.873821971016996, 0.063089014491502, 0.050844906370207),
    (0.063089014491502, 0.063089014491502, 0.873821971016996, 0.050844906370207),
    (0.501426509658179, 0.249286745170910, 0.249286745170911, 0.116786275726379),
    (0.249286745170910, 0.501426509658179, 0.249286745170911, 0.116786275726379),
    (0.249286745170910, 0.249286745170911, 0.501426509658179, 0.116786275726379),
    (0.636502499121399, 0.310352451033785, 0.053145049844816, 0.082851075618374),
    (0.636502499121399, 0.053145049844816, 0.310352451033785, 0.082851075618374),
    (0.310352451033785, 0.636502499121399, 0.053145049844816, 0.082851075618374),
    (0.310352451033785, 0.053145049844816, 0.636502499121399, 0.082851075618374),
    (0.053145049844816, 0.636502499121399, 0.310352451033785, 0.082851075618374),
    (0.053145049844816, 0.310352451033785, 0.636502499121399, 0.082851075618374),
]

# Degree-2 midpoint rule (3 edge midpoints), exact for quadratics.
_MIDPOINT_BARY = [
    (0.5, 0.5, 0.0, 1.0 / 3.0),
    (0.0, 0.5, 0.5, 1.0 / 3.0),
    (0.5, 0.0, 0.5, 1.0 / 3.0),
]


def triangle_rule(degree):
    """Barycentric points (m,3) and weights (m,) summing to 1."""
    table = _MIDPOINT_BARY if degree <= 2 else _DUNAVANT6_BARY
    arr = np.array(table)
    return arr[:, :3], arr[:, 3]


def interval_rule(npoints=4):
    """Gauss-Legendre rule on [0,1]; degree 2*npoints-1."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w


def simplex_rule(k, degree):
    """Quadrature on the reference k-simplex in barycentric coordinates.

    Returns (bary, weights) with bary of shape (m, k+1) and weights summing
    to 1; the caller scales by the k-volume of the physical simplex.
    """
    if k == 0:
        return np.array([[1.0]]), np.array([1.0])
    if k == 1:
        n = max(2, (degree + 2) // 2)
        t, w = interval_rule(n)
        return np.column_stack([1.0 - t, t]), w
    if k == 2:
        return triangle_rule(degree)
    raise ValueError(f"no simplex rule for dimension k={k}")


def disk_rule(n_radial=16, n_angular=16):
    """Product rule on the closed unit disk: radial Gauss x angular trapezoid.

    Returns points (m,2) and weights (m,) summing to pi (the disk area).
    The periodic trapezoid rule in the angle is spectrally accurate.
    """
    r, wr = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * (r + 1.0)
    wr = 0.5 * wr
    theta = 2.0 * np.pi * np.arange(n_angular) / n_angular
    wt = 2.0 * np.pi / n_angular
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    pts = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    wts = (np.outer(wr * r, np.full(n_angular, wt))).ravel()
    return pts, wts


def interval_ball_rule(n_points=24):
    """Gauss rule on [-1,1], the unit ball in one dimension."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    return x.reshape(-1, 1), w
