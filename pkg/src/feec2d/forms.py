"""Smooth differential forms as evaluation interfaces.

A FormField of degree k evaluates points to coefficient arrays over the
(n choose k) basis alternants dx^{i1} ^ ... ^ dx^{ik}; in 2D these are
1 / (dx, dy) / dx^dy for k = 0, 1, 2. An analytic exterior derivative can be
attached; a central finite-difference derivative is available as a
verification oracle and is never used inside operators.
"""

from math import comb

import numpy as np


def n_components(n, k):
    return comb(n, k) if 0 <= k <= n else 0


class FormField:
    """Differential k-form given by a vectorized evaluation callback.

    func maps an (m, n) point array to an (m, ncomp) coefficient array.
    derivative, when given, is the analytic exterior derivative as another
    FormField.
    """

    def __init__(self, k, func, derivative=None, dim=2):
        self.k = int(k)
        self.dim = int(dim)
        self.ncomp = n_components(self.dim, self.k)
        self._func = func
        self.derivative = derivative
        # set on fields obtained through d(); lets interpolation integrate
        # by parts (the de Rham map identity int_sigma dw = int_bdry w)
        self.primitive = None

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.asarray(self._func(points), dtype=float).reshape(len(points), self.ncomp)
        if not np.all(np.isfinite(out)):
            raise ValueError("form evaluation produced non-finite coefficients")
        return out

    def d(self):
        if self.derivative is None:
            raise ValueError("form has no analytic exterior derivative attached")
        if self.derivative.primitive is None:
            self.derivative.primitive = self
        return self.derivative

    # -- pointwise algebra -------------------------------------------------

    def inner(self, other, points):
        """Pointwise l2 pairing of coefficient arrays."""
        if self.k != other.k:
            raise ValueError("inner product needs equal degrees")
        return (self(points) * other(points)).sum(axis=1)

    def norm_pointwise(self, points):
        return np.sqrt((self(points) ** 2).sum(axis=1))

    def star(self):
        """2D Hodge star as a coefficient permutation with signs."""
        if self.dim != 2:
            raise ValueError("Hodge star implemented in 2D only")
        k = self.k
        if k == 0:
            return FormField(2, lambda p: self(p))
        if k == 2:
            return FormField(0, lambda p: self(p))
        def f(p):
            c = self(p)
            return np.column_stack([-c[:, 1], c[:, 0]])
        return FormField(1, f)

    def wedge(self, other):
        if self.dim != 2 or self.k + other.k > 2:
            raise ValueError("wedge out of range")
        ka, kb = self.k, other.k
        if ka == 0 or kb == 0:
            scal, vec = (self, other) if ka == 0 else (other, self)
            return FormField(ka + kb, lambda p: scal(p) * vec(p))
        # 1-form ^ 1-form
        def f(p):
            a, b = self(p), other(p)
            return (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).reshape(-1, 1)
        return FormField(2, f)

    def fd_exterior_derivative(self, points, step):
        """Central-difference exterior derivative (verification oracle only)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        step = np.broadcast_to(np.asarray(step, dtype=float), (len(points),))
        if self.k >= self.dim:
            return np.zeros((len(points), 0))
        partials = []
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = 1.0
            hp = points + step[:, None] * e
            hm = points - step[:, None] * e
            partials.append((self(hp) - self(hm)) / (2.0 * step[:, None]))
        if self.k == 0:
            return np.column_stack([partials[0][:, 0], partials[1][:, 0]])
        # k == 1 in 2D: d(a dx + b dy) = (db/dx - da/dy) dx^dy
        return (partials[0][:, 1] - partials[1][:, 0]).reshape(-1, 1)


def constant_form(k, coeffs, dim=2):
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    zero = zero_form(k + 1, dim) if k + 1 <= dim else None
    return FormField(
        k, lambda p: np.tile(coeffs, (len(p), 1)), derivative=zero, dim=dim
    )


def zero_form(k, dim=2):
    nc = n_components(dim, k)
    deriv = None
    f = FormField(k, lambda p: np.zeros((len(p), nc)), dim=dim)
    if k + 1 <= dim:
        f.derivative = zero_form(k + 1, dim)
    return f


def scalar_form(func, grad=None):
    """0-form from f(x, y); grad, when given, supplies the analytic d."""
    deriv = None
    if grad is not None:
        deriv = FormField(1, lambda p: np.column_stack(grad(p[:, 0], p[:, 1])))
    return FormField(0, lambda p: func(p[:, 0], p[:, 1]).reshape(-1, 1), derivative=deriv)


def one_form(fx, fy, curl=None):
    """1-form fx dx + fy dy; curl supplies d(fx dx + fy dy) = curl dx^dy."""
    deriv = None
    if curl is not None:
        deriv = FormField(2, lambda p: curl(p[:, 0], p[:, 1]).reshape(-1, 1))
    return FormField(
        1,
        lambda p: np.column_stack([fx(p[:, 0], p[:, 1]), fy(p[:, 0], p[:, 1])]),
        derivative=deriv,
    )


def two_form(func):
    return FormField(2, lambda p: func(p[:, 0], p[:, 1]).reshape(-1, 1))


def pullback(form, mapping, jacobian):
    """Phi^* form: coefficients transform by the k-th exterior power of the
    transposed Jacobian; mapping/jacobian must be vectorized."""
    k, dim = form.k, form.dim
    if dim != 2:
        raise ValueError("pullback implemented in 2D")

    def f(p):
        vals = form(mapping(p))
        jac = jacobian(p)  # (m, 2, 2), rows d(Phi_i)/dx_j
        if k == 0:
            return vals
        if k == 1:
            # (Phi^* u)_i = sum_j u_j dPhi_j/dx_i
            return np.einsum("mj,mji->mi", vals, jac)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        return vals * det[:, None]

    return FormField(k, f)


def trig_form(k, freq=1.0, phase=0.3):
    """Smooth trigonometric test forms with analytic derivatives."""
    w = np.pi * freq
    if k == 0:
        return scalar_form(
            lambda x, y: np.sin(w * x + phase) * np.cos(w * y),
            grad=lambda x, y: (
                w * np.cos(w * x + phase) * np.cos(w * y),
                -w * np.sin(w * x + phase) * np.sin(w * y),
            ),
        )
    if k == 1:
        return one_form(
            lambda x, y: np.sin(w * x) * np.cos(w * y),
            lambda x, y: np.cos(w * x + phase) * np.sin(w * y),
            curl=lambda x, y: -w * np.sin(w * x + phase) * np.sin(w * y)
            + w * np.sin(w * x) * np.sin(w * y),
        )
    return two_form(lambda x, y: np.cos(w * x) * np.cos(w * y + phase))
