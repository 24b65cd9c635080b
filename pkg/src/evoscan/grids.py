"""Sampling grids: the lattice of trial points and trial normals probed by the inversion."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplingGrid:
    """Uniform rectangular grid of sampling points with a half-circle normal sweep.

    Points are ordered x-major: point index ``p = ix * n_y + iy``, so a flat
    array of per-point values reshapes to ``(n_x, n_y)`` with C order.  Trial
    normals cover the half circle, ``theta_j = pi * j / n_normals``; antipodal
    normals produce collinear dipole signatures, so the full circle adds nothing.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    n_x: int
    n_y: int
    n_normals: int = 1

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("grid must contain at least one point")
        if self.n_normals < 1:
            raise ValueError("need at least one trial normal")
        if not (self.x_min < self.x_max or self.n_x == 1):
            raise ValueError("x bounds must be increasing")
        if not (self.y_min < self.y_max or self.n_y == 1):
            raise ValueError("y bounds must be increasing")

    @property
    def n_points(self) -> int:
        return self.n_x * self.n_y

    def points(self) -> np.ndarray:
        """Sampling points, shape (n_points, 2), x-major order."""
        xs = np.linspace(self.x_min, self.x_max, self.n_x)
        ys = np.linspace(self.y_min, self.y_max, self.n_y)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def normals(self) -> np.ndarray:
        """Trial normals over the half circle, shape (n_normals, 2)."""
        theta = np.pi * np.arange(self.n_normals) / self.n_normals
        return np.column_stack([np.cos(theta), np.sin(theta)])

    def cell_area(self) -> float:
        dx = (self.x_max - self.x_min) / (self.n_x - 1) if self.n_x > 1 else 0.0
        dy = (self.y_max - self.y_min) / (self.n_y - 1) if self.n_y > 1 else 0.0
        return dx * dy

    def meta(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "n_x": self.n_x, "n_y": self.n_y, "n_normals": self.n_normals,
        }
