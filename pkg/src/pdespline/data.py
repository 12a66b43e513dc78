"""Observation containers shared by the estimation front ends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import DesignMatrix, TensorBasis, grid_points, tensor_design


@dataclass(frozen=True)
class Dataset:
    """Noisy observations of the state function.

    ``points`` is either a tuple of per-dimension grid axes (``grid=True``)
    or an ``N x p`` array of scattered locations.  ``zeta`` follows the
    design-row ordering (dimension 1 fastest for grids).
    """

    points: object
    zeta: np.ndarray
    grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float).ravel())

    @property
    def n(self) -> int:
        return len(self.zeta)

    def design(self, basis: TensorBasis, deriv_orders=None) -> DesignMatrix:
        mode = "grid" if self.grid else "scatter"
        return tensor_design(basis, self.points, deriv_orders, mode=mode)

    def locations(self) -> np.ndarray:
        if self.grid:
            return grid_points(self.points)
        return np.atleast_2d(np.asarray(self.points, dtype=float))
