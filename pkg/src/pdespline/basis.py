"""Clamped B-spline bases in one dimension and their tensor products.

A basis is described by its domain, degree and interior knots.  Boundary
knots are replicated ``degree + 1`` times (open/clamped knot vector), so
the basis spans exactly the declared domain, sums to one everywhere inside
it, and has well-conditioned boundary rows for condition matrices.

Coefficient layout for tensor products is dimension-1-fastest: the column
for multi-index ``(i_1, ..., i_p)`` is ``i_1 + M_1*i_2 + M_1*M_2*i_3 + ...``.
This matches a Kronecker product taken with dimension ``p`` as the leading
(slowest) factor and is the on-disk layout for coefficient vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class BasisSpec1D:
    """One-dimensional clamped B-spline basis.

    Attributes
    ----------
    domain_lo, domain_hi : float
        Endpoints of the basis domain.
    degree : int
        Polynomial degree (order minus one).
    internal_knots : tuple of float
        Strictly increasing knots, all strictly inside the open domain.
    """

    domain_lo: float
    domain_hi: float
    degree: int
    internal_knots: tuple = ()
    knot_vector: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.domain_lo < self.domain_hi:
            raise ValueError(
                f"domain_lo must be < domain_hi, got [{self.domain_lo}, {self.domain_hi}]"
            )
        if self.degree < 0:
            raise ValueError(f"degree must be non-negative, got {self.degree}")
        knots = tuple(float(x) for x in self.internal_knots)
        object.__setattr__(self, "internal_knots", knots)
        for i, x in enumerate(knots):
            if not self.domain_lo < x < self.domain_hi:
                raise ValueError(
                    f"internal knot #{i} = {x} lies outside the open domain "
                    f"({self.domain_lo}, {self.domain_hi})"
                )
            if i and not knots[i - 1] < x:
                raise ValueError(
                    f"internal knots must be strictly increasing; "
                    f"knot #{i} = {x} does not exceed knot #{i-1} = {knots[i-1]}"
                )
        pad = self.degree + 1
        kv = np.concatenate(
            [np.full(pad, self.domain_lo), knots, np.full(pad, self.domain_hi)]
        )
        object.__setattr__(self, "knot_vector", kv)

    @property
    def n_basis(self) -> int:
        """Number of basis functions M = len(internal_knots) + degree + 1."""
        return len(self.internal_knots) + self.degree + 1

    @property
    def spans(self) -> np.ndarray:
        """Distinct knot values (span breakpoints), including the endpoints."""
        return np.unique(self.knot_vector)


@dataclass(frozen=True)
class TensorBasis:
    """Ordered per-dimension bases forming a tensor-product space."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(self.dims)
        if not dims:
            raise ValueError("TensorBasis needs at least one dimension")
        object.__setattr__(self, "dims", dims)

    @property
    def p(self) -> int:
        return len(self.dims)

    @property
    def n_basis(self) -> int:
        """Total coefficient count (product of per-dimension sizes)."""
        return int(np.prod([d.n_basis for d in self.dims]))

    @property
    def shape(self) -> tuple:
        return tuple(d.n_basis for d in self.dims)

    def domain(self) -> list:
        return [(d.domain_lo, d.domain_hi) for d in self.dims]


@dataclass(frozen=True)
class DesignMatrix:
    """Evaluated (derivative) design matrix with its provenance."""

    values: np.ndarray
    deriv_orders: tuple

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def build_knots(domain_lo, domain_hi, degree, internal_knots=()) -> BasisSpec1D:
    """Validate inputs and construct a clamped 1-D basis specification."""
    return BasisSpec1D(float(domain_lo), float(domain_hi), int(degree), tuple(internal_knots))


def uniform_basis(domain_lo, domain_hi, degree, n_internal) -> BasisSpec1D:
    """Basis with ``n_internal`` equidistant interior knots."""
    internal = np.linspace(domain_lo, domain_hi, n_internal + 2)[1:-1]
    return build_knots(domain_lo, domain_hi, degree, internal)


def _check_points(spec: BasisSpec1D, x: np.ndarray):
    bad = (x < spec.domain_lo) | (x > spec.domain_hi) | ~np.isfinite(x)
    if np.any(bad):
        raise ValueError(
            f"evaluation points outside basis domain [{spec.domain_lo}, {spec.domain_hi}]: "
            f"{np.asarray(x)[bad][:5]}"
        )


def _derivative_lift(t: np.ndarray, degree: int, deriv: int) -> np.ndarray:
    # Maps degree-(degree-deriv) basis values to derivative-order-`deriv`
    # values of the degree-`degree` basis, via the knot-difference recurrence.
    A = None
    for j in range(degree, degree - deriv, -1):
        nj = len(t) - j - 1
        D = np.zeros((nj + 1, nj))
        for i in range(nj):
            den = t[i + j] - t[i]
            if den > 0.0:
                D[i, i] += j / den
            den = t[i + j + 1] - t[i + 1]
            if den > 0.0:
                D[i + 1, i] -= j / den
        A = D if A is None else D @ A
    return A


def eval_basis_1d(spec: BasisSpec1D, points, deriv: int = 0) -> np.ndarray:
    """Evaluate all basis functions (or a derivative) at the given points.

    Returns an ``N x M`` dense matrix.  Derivatives are produced by lifting
    a lower-degree design matrix through the knot-difference recurrence, so
    each row keeps at most ``degree + 1`` nonzero entries.  Points equal to
    the right domain endpoint are evaluated by the left-limit convention.
    """
    if deriv < 0:
        raise ValueError(f"derivative order must be non-negative, got {deriv}")
    if deriv > spec.degree:
        raise ValueError(
            f"derivative order {deriv} exceeds basis degree {spec.degree}"
        )
    x = np.atleast_1d(np.asarray(points, dtype=float))
    _check_points(spec, x)
    t = spec.knot_vector
    if deriv == 0:
        return BSpline.design_matrix(x, t, spec.degree, extrapolate=False).toarray()
    # scipy keys the right endpoint to the degenerate padded element of the
    # lower-degree basis; nudge one ulp inside to take the left limit.
    xs = np.where(x == spec.domain_hi, np.nextafter(spec.domain_hi, spec.domain_lo), x)
    low = BSpline.design_matrix(xs, t, spec.degree - deriv, extrapolate=False).toarray()
    return low @ _derivative_lift(t, spec.degree, deriv)


def _as_axes(basis: TensorBasis, points) -> list:
    axes = [np.atleast_1d(np.asarray(ax, dtype=float)) for ax in points]
    if len(axes) != basis.p:
        raise ValueError(f"expected {basis.p} coordinate axes, got {len(axes)}")
    return axes


def tensor_design(basis: TensorBasis, points, deriv_orders=None, mode="scatter") -> DesignMatrix:
    """Tensor-product design matrix at grid axes or scattered points.

    Parameters
    ----------
    points
        In ``grid`` mode, a sequence of ``p`` coordinate axes whose outer
        product forms the evaluation grid (dimension 1 fastest in the row
        ordering).  In ``scatter`` mode, an ``N x p`` array of points.
    deriv_orders
        Per-dimension derivative orders, default all zero.
    """
    if deriv_orders is None:
        deriv_orders = (0,) * basis.p
    deriv_orders = tuple(int(d) for d in deriv_orders)
    if len(deriv_orders) != basis.p:
        raise ValueError(
            f"deriv_orders has length {len(deriv_orders)}, basis has {basis.p} dimensions"
        )
    if mode == "grid":
        axes = _as_axes(basis, points)
        mats = [eval_basis_1d(spec, ax, d)
                for spec, ax, d in zip(basis.dims, axes, deriv_orders)]
        full = reduce(np.kron, mats[::-1])  # dimension p slowest
    elif mode == "scatter":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != basis.p:
            raise ValueError(
                f"scatter points have {pts.shape[1]} columns, basis has {basis.p} dimensions"
            )
        mats = [eval_basis_1d(spec, pts[:, i], d)
                for i, (spec, d) in enumerate(zip(basis.dims, deriv_orders))]
        full = mats[0]
        for m in mats[1:]:
            # row-wise (face-splitting) product, keeping dimension 1 fastest
            full = (m[:, :, None] * full[:, None, :]).reshape(full.shape[0], -1)
    else:
        raise ValueError(f"mode must be 'grid' or 'scatter', got {mode!r}")
    return DesignMatrix(values=full, deriv_orders=deriv_orders)


def grid_points(axes) -> np.ndarray:
    """Flatten grid axes to an N x p array in the design-row ordering."""
    axes = [np.atleast_1d(np.asarray(ax, dtype=float)) for ax in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    # dimension 1 fastest: last index of the reversed stack varies first
    cols = [m.T.ravel() for m in mesh]
    return np.column_stack(cols)


def quadrature_grid(spec: BasisSpec1D, points_per_span: int):
    """Composite trapezoid nodes/weights on a per-span subdivided grid.

    Each knot span carries ``points_per_span`` nodes counting both span
    endpoints, so shared knots are single nodes of the composite grid.
    """
    if points_per_span < 2:
        raise ValueError(f"points_per_span must be >= 2, got {points_per_span}")
    br = spec.spans
    parts = [np.linspace(br[i], br[i + 1], points_per_span)[:-1]
             for i in range(len(br) - 1)]
    x = np.concatenate(parts + [br[-1:]])
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return x, w
