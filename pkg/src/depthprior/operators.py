"""Sparse derivative operators, intensity-dependent edge weights, and the
quadratic-form matrices of the hand-crafted smoothness priors.

Convention used project-wide: the hand-crafted densities are written as
exp(-x' Q x) with Q = lam * D'D + eps * I (optionally with a diagonal
weight matrix between the derivative factors).  Q is *half* the Gaussian
precision; model code builds N(0, (2Q)^-1) so standard Gaussian formulas
apply unchanged.  This is fixed here once and tested by the normalization
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import PATCH_SIDE, as_vector
from .errors import DimensionError


@dataclass(frozen=True)
class DerivativeOperator:
    """Forward-difference operator mapping an image vector to stacked
    x- then y-derivatives.

    Rows scan the image row-major; each row holds one (+1, -1) pair.
    Boundary rows are dropped (no wraparound), so x-rows = (width-1)*height
    and y-rows = width*(height-1).
    """

    matrix: sp.csr_matrix = field(repr=False)
    width: int
    height: int

    @property
    def n_x_rows(self) -> int:
        return (self.width - 1) * self.height

    @property
    def n_y_rows(self) -> int:
        return self.width * (self.height - 1)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def apply(self, x) -> np.ndarray:
        return self.matrix @ as_vector(x)


@dataclass(frozen=True)
class IntensityWeights:
    """Per-derivative weights in (0, 1], low where the intensity has an edge."""

    w_x: np.ndarray
    w_y: np.ndarray
    sigma: float

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.w_x, self.w_y])


@dataclass(frozen=True)
class PrecisionMatrix:
    """Sparse SPD quadratic-form matrix lam * D'(W)D + eps * I.

    The Gaussian precision of the corresponding density is twice this
    matrix (see module docstring).
    """

    matrix: sp.csr_matrix = field(repr=False)
    lam: float
    eps: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def quad(self, x) -> float:
        """The quadratic form x' Q x."""
        v = as_vector(x)
        return float(v @ (self.matrix @ v))


def build_derivative_operator(width: int = PATCH_SIDE, height: int = PATCH_SIDE) -> DerivativeOperator:
    """Forward-difference derivative operator for a width x height grid."""
    if width < 1 or height < 1 or width * height < 2:
        raise DimensionError(f"grid {width}x{height} has no derivatives")
    n = width * height
    idx = np.arange(n).reshape(height, width)

    rows, cols, vals = [], [], []
    r = 0
    # x-derivatives: right neighbor minus pixel, row-major scan
    for i in range(height):
        for j in range(width - 1):
            rows += [r, r]
            cols += [idx[i, j + 1], idx[i, j]]
            vals += [1.0, -1.0]
            r += 1
    # y-derivatives: lower neighbor minus pixel
    for i in range(height - 1):
        for j in range(width):
            rows += [r, r]
            cols += [idx[i + 1, j], idx[i, j]]
            vals += [1.0, -1.0]
            r += 1

    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
    return DerivativeOperator(matrix=matrix, width=width, height=height)


def build_dl2_precision(op: DerivativeOperator, lam: float, eps: float) -> PrecisionMatrix:
    """Quadratic-penalty matrix lam * D'D + eps * I."""
    if lam <= 0 or eps <= 0:
        raise ValueError("lam and eps must be positive")
    a = op.matrix
    q = lam * (a.T @ a) + eps * sp.identity(op.n_pixels, format="csr")
    return PrecisionMatrix(matrix=q.tocsr(), lam=lam, eps=eps)


def derivative_magnitudes(op: DerivativeOperator, intensity) -> np.ndarray:
    """Stacked forward differences of an intensity patch/image vector."""
    return op.apply(intensity)


def build_intensity_weights(op: DerivativeOperator, intensity, sigma: float) -> IntensityWeights:
    """Edge weights exp(-(dI)^2 / sigma^2) at every derivative location."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = derivative_magnitudes(op, intensity)
    w = np.exp(-(d * d) / (sigma * sigma))
    nx = op.n_x_rows
    return IntensityWeights(w_x=w[:nx], w_y=w[nx:], sigma=float(sigma))


def build_dl2int_precision(op: DerivativeOperator, weights: IntensityWeights,
                           lam: float, eps: float) -> PrecisionMatrix:
    """Weighted quadratic-penalty matrix lam * D'WD + eps * I."""
    if lam <= 0 or eps <= 0:
        raise ValueError("lam and eps must be positive")
    w = weights.stacked()
    if w.size != op.n_rows:
        raise DimensionError(
            f"weights cover {w.size} derivative rows, operator has {op.n_rows}"
        )
    a = op.matrix
    wa = sp.diags(w) @ a
    q = lam * (a.T @ wa) + eps * sp.identity(op.n_pixels, format="csr")
    return PrecisionMatrix(matrix=q.tocsr(), lam=lam, eps=eps)


def dense_operator(op: DerivativeOperator) -> np.ndarray:
    return op.matrix.toarray()


def batched_weighted_precisions(op: DerivativeOperator, intensities: np.ndarray,
                                lam: float, eps: float, sigma: float) -> np.ndarray:
    """Dense (n, N, N) stack of lam * D'W(c)D + eps * I, one per intensity patch.

    Intended for patch-sized grids where dense 64x64 algebra is cheapest.
    """
    a = dense_operator(op)
    d = intensities @ a.T
    w = np.exp(-(d * d) / (sigma * sigma))
    q = lam * np.einsum("ri,nr,rj->nij", a, w, a, optimize=True)
    n = op.n_pixels
    q[:, np.arange(n), np.arange(n)] += eps
    return q
