"""Declarative linear PDEs and their quadratic spline-coefficient penalties.

A PDE is a sum of terms, each the product of a parameter multiplier, a
separable polynomial coefficient and a mixed partial derivative of the
state function, plus an optional forcing term without derivatives:

    F(x, u) = sum_k  m_k(theta) * prod_d a_{k,d}(x_d) * D^{alpha_k} u(x)
              + m_f(theta) * prod_d a_{f,d}(x_d)

Squaring and integrating F over the basis domain box gives the penalty

    PEN(c | theta) = c' R(theta) c + 2 c' r(theta) + l(theta),

whose pieces factor across dimensions into Kronecker products of small
1-D weighted Gram matrices and moment vectors.  The 1-D integrals are
computed once per (basis, term pair) on a shared per-dimension composite
trapezoid grid and cached, aggregated by theta-monomial, so re-assembling
for a new theta is a cheap weighted sum.  Sharing one quadrature grid per
dimension across all terms makes the assembled R an exact Gram matrix of
the discretized operator, hence positive semidefinite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from numpy.polynomial import polynomial as npoly

from .basis import BasisSpec1D, TensorBasis, eval_basis_1d, quadrature_grid, tensor_design


@dataclass(frozen=True)
class Multiplier:
    """Scalar multiplier ``constant * prod_k theta_k ** theta_powers[k]``."""

    constant: float = 1.0
    theta_powers: tuple = ()

    def __post_init__(self):
        powers = tuple(int(p) for p in self.theta_powers)
        if any(p < 0 for p in powers):
            raise ValueError(f"theta exponents must be non-negative, got {powers}")
        object.__setattr__(self, "theta_powers", powers)
        object.__setattr__(self, "constant", float(self.constant))

    def value(self, theta) -> float:
        out = self.constant
        for p, t in zip(self.theta_powers, theta):
            if p:
                out *= t ** p
        return out


def _norm_polys(coeff_polys, p):
    polys = tuple(tuple(float(c) for c in poly) for poly in coeff_polys)
    if len(polys) != p:
        raise ValueError(f"expected {p} per-dimension polynomials, got {len(polys)}")
    if any(len(poly) == 0 for poly in polys):
        raise ValueError("polynomial coefficient lists must be non-empty")
    return polys


@dataclass(frozen=True)
class PdeTerm:
    """One linear term: multiplier x separable coefficient x mixed derivative."""

    multiplier: Multiplier
    coeff_polys: tuple  # per-dimension ascending coefficient tuples
    deriv_orders: tuple

    def __post_init__(self):
        orders = tuple(int(d) for d in self.deriv_orders)
        if any(d < 0 for d in orders):
            raise ValueError(f"derivative orders must be non-negative, got {orders}")
        object.__setattr__(self, "deriv_orders", orders)
        object.__setattr__(
            self, "coeff_polys", _norm_polys(self.coeff_polys, len(orders))
        )


@dataclass(frozen=True)
class ForcingTerm:
    """Additive term in F depending on x only (no derivatives of u)."""

    multiplier: Multiplier
    coeff_polys: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "coeff_polys", _norm_polys(self.coeff_polys, len(self.coeff_polys))
        )


@dataclass(frozen=True)
class PdeSpec:
    """Linear PDE ``F(x, u, theta) = 0`` in the term grammar above."""

    p: int
    theta_names: tuple
    terms: tuple
    forcing: ForcingTerm | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta_names", tuple(self.theta_names))
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a PdeSpec needs at least one term")
        for i, term in enumerate(self.terms):
            if len(term.deriv_orders) != self.p:
                raise ValueError(
                    f"term #{i} has {len(term.deriv_orders)} derivative orders, "
                    f"PDE dimension is {self.p}"
                )
            if len(term.multiplier.theta_powers) != len(self.theta_names):
                raise ValueError(
                    f"term #{i} multiplier has {len(term.multiplier.theta_powers)} "
                    f"theta exponents for {len(self.theta_names)} parameters"
                )
        if self.forcing is not None:
            if len(self.forcing.coeff_polys) != self.p:
                raise ValueError("forcing polynomial count must match PDE dimension")
            if len(self.forcing.multiplier.theta_powers) != len(self.theta_names):
                raise ValueError("forcing multiplier theta exponents mismatch")

    @property
    def order(self) -> int:
        """Highest total derivative order appearing in any dimension."""
        return max(max(t.deriv_orders) for t in self.terms)

    def max_deriv(self, dim: int) -> int:
        return max(t.deriv_orders[dim] for t in self.terms)


@dataclass(frozen=True)
class PenaltyQuadratic:
    """PEN(c | theta) = c'Rc + 2c'r + l at a fixed theta."""

    R: np.ndarray
    r: np.ndarray
    l: float


@dataclass(frozen=True)
class ConstraintSet:
    """Linear restrictions H c = v from differential conditions."""

    H: np.ndarray
    v: np.ndarray
    point_meta: tuple = ()

    def __post_init__(self):
        if self.H.shape[0] != len(self.v):
            raise ValueError(
                f"H has {self.H.shape[0]} rows but v has {len(self.v)} entries"
            )
        if self.H.shape[0] > self.H.shape[1]:
            raise ValueError(
                f"more condition rows ({self.H.shape[0]}) than coefficients "
                f"({self.H.shape[1]})"
            )


def weighted_gram_1d(spec: BasisSpec1D, deriv_i: int, deriv_j: int,
                     poly_i=(1.0,), poly_j=(1.0,), quad_points_per_span: int = 32) -> np.ndarray:
    """M x M matrix of ∫ a_i(x) a_j(x) B^(deriv_i)(x) B^(deriv_j)(x)' dx.

    Composite trapezoid on a per-knot-span subdivided grid; second-order
    accurate in the subdivision width.
    """
    x, w = quadrature_grid(spec, quad_points_per_span)
    Bi = eval_basis_1d(spec, x, deriv_i)
    Bj = Bi if deriv_j == deriv_i else eval_basis_1d(spec, x, deriv_j)
    ai = npoly.polyval(x, np.asarray(poly_i, dtype=float))
    aj = npoly.polyval(x, np.asarray(poly_j, dtype=float))
    return (Bi * (w * ai * aj)[:, None]).T @ Bj


def weighted_moment_1d(spec: BasisSpec1D, deriv: int, poly_a=(1.0,), poly_b=(1.0,),
                       quad_points_per_span: int = 32) -> np.ndarray:
    """M-vector of ∫ a(x) b(x) B^(deriv)(x) dx on the basis domain."""
    x, w = quadrature_grid(spec, quad_points_per_span)
    B = eval_basis_1d(spec, x, deriv)
    a = npoly.polyval(x, np.asarray(poly_a, dtype=float))
    b = npoly.polyval(x, np.asarray(poly_b, dtype=float))
    return B.T @ (w * a * b)


def _check_orders(pde: PdeSpec, basis: TensorBasis):
    for ti, term in enumerate(pde.terms):
        for d, (order, spec) in enumerate(zip(term.deriv_orders, basis.dims)):
            if order > spec.degree:
                raise ValueError(
                    f"term #{ti} needs derivative order {order} in dimension "
                    f"{d + 1} but the basis degree there is {spec.degree}"
                )


def _mono_key(mult_a: Multiplier, mult_b: Multiplier, n_theta: int) -> tuple:
    pa = mult_a.theta_powers or (0,) * n_theta
    pb = mult_b.theta_powers or (0,) * n_theta
    return tuple(a + b for a, b in zip(pa, pb))


class PenaltyAssembler:
    """Caches theta-independent penalty blocks for one (pde, basis) pair.

    The profiling loop and the samplers re-assemble R(theta) thousands of
    times; with the blocks aggregated by theta-monomial the re-assembly is
    a handful of scaled matrix additions.
    """

    def __init__(self, pde: PdeSpec, basis: TensorBasis, quad_points_per_span=32):
        if basis.p != pde.p:
            raise ValueError(f"basis dimension {basis.p} != PDE dimension {pde.p}")
        _check_orders(pde, basis)
        if np.isscalar(quad_points_per_span):
            qs = (int(quad_points_per_span),) * basis.p
        else:
            qs = tuple(int(q) for q in quad_points_per_span)
            if len(qs) != basis.p:
                raise ValueError("quad_points_per_span must be scalar or one per dimension")
        self.pde = pde
        self.basis = basis
        self.quad_points_per_span = qs
        self.n = basis.n_basis
        n_theta = len(pde.theta_names)

        gram_cache = {}

        def gram(dim, di, dj, pi, pj):
            key = (dim, di, dj, pi, pj)
            if key not in gram_cache:
                gram_cache[key] = weighted_gram_1d(
                    basis.dims[dim], di, dj, pi, pj, qs[dim]
                )
            return gram_cache[key]

        self._R_profiles = {}
        terms = pde.terms
        for a in range(len(terms)):
            for b in range(a, len(terms)):
                ta, tb = terms[a], terms[b]
                factors = [gram(d, ta.deriv_orders[d], tb.deriv_orders[d],
                                ta.coeff_polys[d], tb.coeff_polys[d])
                           for d in range(basis.p)]
                block = reduce(np.kron, factors[::-1])
                if a != b:
                    block = block + block.T
                const = ta.multiplier.constant * tb.multiplier.constant
                key = _mono_key(ta.multiplier, tb.multiplier, n_theta)
                prof = self._R_profiles.setdefault(key, np.zeros((self.n, self.n)))
                prof += const * block

        self._r_profiles = {}
        self._l_profiles = {}
        if pde.forcing is not None:
            f = pde.forcing
            for term in terms:
                factors = [weighted_moment_1d(basis.dims[d], term.deriv_orders[d],
                                              term.coeff_polys[d], f.coeff_polys[d], qs[d])
                           for d in range(basis.p)]
                vec = reduce(np.kron, factors[::-1])
                const = term.multiplier.constant * f.multiplier.constant
                key = _mono_key(term.multiplier, f.multiplier, n_theta)
                prof = self._r_profiles.setdefault(key, np.zeros(self.n))
                prof += const * vec
            l_val = 1.0
            for d in range(basis.p):
                x, w = quadrature_grid(basis.dims[d], qs[d])
                a_d = npoly.polyval(x, np.asarray(f.coeff_polys[d], dtype=float))
                l_val *= float(w @ (a_d * a_d))
            key = _mono_key(f.multiplier, f.multiplier, n_theta)
            self._l_profiles[key] = self._l_profiles.get(key, 0.0) + f.multiplier.constant ** 2 * l_val

    def _weight(self, mono, theta):
        out = 1.0
        for p, t in zip(mono, theta):
            if p:
                out *= t ** p
        return out

    def penalty(self, theta) -> PenaltyQuadratic:
        """Assemble PEN(c | theta) components for the given parameter values."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if len(theta) != len(self.pde.theta_names):
            raise ValueError(
                f"theta has {len(theta)} entries for parameters {self.pde.theta_names}"
            )
        R = np.zeros((self.n, self.n))
        for mono, mat in self._R_profiles.items():
            R += self._weight(mono, theta) * mat
        R = 0.5 * (R + R.T)
        r = np.zeros(self.n)
        for mono, vec in self._r_profiles.items():
            r += self._weight(mono, theta) * vec
        l = 0.0
        for mono, val in self._l_profiles.items():
            l += self._weight(mono, theta) * val
        return PenaltyQuadratic(R=R, r=r, l=float(l))


def assemble_penalty(pde: PdeSpec, basis: TensorBasis, theta,
                     quad_points_per_span=32) -> PenaltyQuadratic:
    """One-shot penalty assembly; see :class:`PenaltyAssembler` for reuse."""
    return PenaltyAssembler(pde, basis, quad_points_per_span).penalty(theta)


def penalty_value(q: PenaltyQuadratic, c) -> float:
    """Evaluate the quadratic c'Rc + 2c'r + l."""
    c = np.asarray(c, dtype=float)
    if c.shape != (q.R.shape[0],):
        raise ValueError(f"coefficient vector has shape {c.shape}, expected ({q.R.shape[0]},)")
    return float(c @ (q.R @ c) + 2.0 * (c @ q.r) + q.l)


@dataclass(frozen=True)
class Condition:
    """Differential condition sampled at explicit support points.

    ``target`` is either a callable evaluated at each point (rows of the
    N x p array) or an array of values, one per point.
    """

    points: np.ndarray
    deriv_orders: tuple
    target: object

    def values(self) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if callable(self.target):
            return np.asarray([float(self.target(*row)) for row in pts])
        vals = np.atleast_1d(np.asarray(self.target, dtype=float))
        if len(vals) == 1 and len(pts) > 1:
            vals = np.full(len(pts), vals[0])
        if len(vals) != len(pts):
            raise ValueError(
                f"condition has {len(pts)} points but {len(vals)} target values"
            )
        return vals


def build_constraints(conditions, basis: TensorBasis) -> ConstraintSet:
    """Stack condition rows into the linear system H c = v."""
    conditions = list(conditions)
    if not conditions or all(np.size(c.points) == 0 for c in conditions):
        raise ValueError("constraint construction needs at least one condition point")
    rows, vals, meta = [], [], []
    for cond in conditions:
        pts = np.atleast_2d(np.asarray(cond.points, dtype=float))
        if pts.shape[1] != basis.p:
            raise ValueError(
                f"condition points have {pts.shape[1]} columns, basis has {basis.p}"
            )
        design = tensor_design(basis, pts, cond.deriv_orders, mode="scatter")
        rows.append(design.values)
        vals.append(cond.values())
        meta.extend((tuple(row), tuple(cond.deriv_orders)) for row in pts)
    return ConstraintSet(
        H=np.vstack(rows), v=np.concatenate(vals), point_meta=tuple(meta)
    )
