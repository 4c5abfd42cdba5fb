"""Truncated uniform grids on R^n (n = 1, 2): quadrature, stencils, probes.

Box truncation in log-affine coordinates with graded stencil closures and
no imposed boundary condition: every integrand downstream carries det D^2 phi
or e^{-2 phi} weights that decay exponentially toward the box edge, so
truncation contamination is controlled, and it is measured rather than
assumed (truncation_report).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from .constants import BOUNDARY_SHELL_FRACTION, DEFAULT_ACCURACY

ACCURACIES = (2, 4, 6)
QUADRATURE_RULES = ("simpson", "trapezoid")


class GridError(ValueError):
    pass


# --- finite-difference weights -------------------------------------------------


def fornberg_weights(z, x, m):
    """Weights of derivatives 0..m at z from arbitrary nodes x (Fornberg's recursion)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


@lru_cache(maxsize=None)
def _diff_matrix_1d(N, h, deriv, accuracy):
    """1-d differentiation matrix: central interior, graded centered closures.

    Near the walls the half-width shrinks with the distance to the edge, so
    every row except the outermost stays a centered stencil of reduced order.
    Full one-sided closures at the interior order are deliberately avoided:
    their weights alternate in sign and grow combinatorially, and the edge
    block they form is numerically near-singular, which poisons shifted
    factorizations of any operator assembled from these matrices.  The two
    outermost rows fall back to the shortest usable one-sided stencil; the
    order drop lives entirely on nodes whose quadrature mass is negligible
    for every resolved field.
    """
    if accuracy not in ACCURACIES:
        raise GridError(f"accuracy must be one of {ACCURACIES}, got {accuracy}")
    if deriv not in (1, 2):
        raise GridError(f"derivative order must be 1 or 2, got {deriv}")
    halfw = (accuracy + deriv - 1) // 2
    edge = deriv + 2  # shortest one-sided stencil of order >= 2
    if N < 2 * halfw + 1:
        raise GridError(f"N={N} too small for accuracy {accuracy}")
    rows, cols, vals = [], [], []
    for i in range(N):
        wi = min(i, N - 1 - i, halfw)
        if wi >= 1:
            idx = np.arange(i - wi, i + wi + 1)
        elif i == 0:
            idx = np.arange(edge)
        else:
            idx = np.arange(N - edge, N)
        w = fornberg_weights(0.0, (idx - i) * h, deriv)[:, deriv]
        w[np.where(idx == i)[0][0]] -= w.sum()  # annihilate constants exactly
        rows.extend([i] * len(idx))
        cols.extend(idx)
        vals.extend(w)
    D = sparse.csr_matrix((vals, (rows, cols)), shape=(N, N))
    D.data.setflags(write=False)
    return D


# --- grid ----------------------------------------------------------------------


def _weights_1d(N, h, rule):
    if rule == "trapezoid":
        w = np.full(N, h)
        w[0] = w[-1] = h / 2
    elif rule == "simpson":
        w = np.empty(N)
        w[0::2] = 2 * h / 3
        w[1::2] = 4 * h / 3
        w[0] = w[-1] = h / 3
    else:
        raise GridError(f"unknown quadrature rule {rule!r}")
    return w


@dataclass(frozen=True)
class Grid:
    dim: int
    R: float
    N: int
    rule: str
    h: float
    axis: np.ndarray
    weights_1d: np.ndarray
    weights: np.ndarray          # full tensor weights, shape == self.shape
    coords: tuple                # broadcastable coordinate arrays, len == dim

    @property
    def shape(self):
        return (self.N,) * self.dim

    @property
    def size(self):
        return self.N**self.dim

    def integrate(self, f):
        return float(np.sum(self.weights * f))

    def diff_matrix(self, deriv, accuracy=DEFAULT_ACCURACY):
        return _diff_matrix_1d(self.N, self.h, deriv, accuracy)

    def inner_mask(self, fraction):
        """Nodes with max_j |x_j| <= fraction * R."""
        m = np.abs(self.coords[0]) <= fraction * self.R + 1e-12 * self.R
        for c in self.coords[1:]:
            m = m & (np.abs(c) <= fraction * self.R + 1e-12 * self.R)
        return m

    def boundary_shell_mask(self, shell_fraction=BOUNDARY_SHELL_FRACTION):
        return ~self.inner_mask(1.0 - 2.0 * shell_fraction)


def build_grid(n, R, N, rule="simpson"):
    """Symmetric uniform grid on [-R, R]^n with the requested quadrature rule."""
    if n not in (1, 2):
        raise GridError(f"dim must be 1 or 2, got {n}")
    if not (isinstance(N, (int, np.integer)) and N >= 5 and N % 2 == 1):
        raise GridError(f"N must be an odd integer >= 5, got {N}")
    if not R > 0:
        raise GridError(f"half-width R must be positive, got {R}")
    h = 2.0 * R / (N - 1)
    axis = np.linspace(-R, R, N)
    w1 = _weights_1d(N, h, rule)
    assert abs(w1.sum() - 2 * R) < 1e-10 * max(1.0, R), "quadrature weights must sum to 2R"
    if n == 1:
        weights = w1.copy()
        coords = (axis.copy(),)
    else:
        weights = np.outer(w1, w1)
        coords = (axis[:, None].copy(), axis[None, :].copy())
    for arr in (axis, w1, weights, *coords):
        arr.setflags(write=False)
    return Grid(dim=n, R=float(R), N=int(N), rule=rule, h=h, axis=axis,
                weights_1d=w1, weights=weights, coords=coords)


# --- differentiation -----------------------------------------------------------


def differentiate(grid, f, order, accuracy=DEFAULT_ACCURACY):
    """Apply a mixed partial derivative, multi-index `order` with |order| <= 2."""
    f = np.asarray(f)
    if f.shape != grid.shape:
        raise GridError(f"field shape {f.shape} does not match grid shape {grid.shape}")
    order = tuple(order)
    if len(order) != grid.dim or any(d < 0 for d in order) or sum(order) > 2:
        raise GridError(f"bad derivative multi-index {order} for dim {grid.dim}")
    out = f
    for ax, d in enumerate(order):
        if d == 0:
            continue
        D = grid.diff_matrix(d, accuracy)
        out = D @ out if ax == 0 else (D @ out.T).T
    return out.copy() if out is f else out


def gradient(grid, f, accuracy=DEFAULT_ACCURACY):
    eye = np.eye(grid.dim, dtype=int)
    return [differentiate(grid, f, tuple(row), accuracy) for row in eye]


def hessian_entries(grid, f, accuracy=DEFAULT_ACCURACY):
    """Unique Hessian entries: (f_xx,) in 1-d, (f_xx, f_xy, f_yy) in 2-d.

    The mixed entry composes the two first-derivative stencils; det and the
    inverse downstream use exactly these discrete values, which is what makes
    the discrete delta-f formula the exact linearization of the discrete f.
    """
    if grid.dim == 1:
        return (differentiate(grid, f, (2,), accuracy),)
    fxx = differentiate(grid, f, (2, 0), accuracy)
    fyy = differentiate(grid, f, (0, 2), accuracy)
    fxy = differentiate(grid, f, (1, 1), accuracy)
    return (fxx, fxy, fyy)


# --- truncation accounting -------------------------------------------------------


def truncation_report(state):
    """|quadrature of det D^2 phi - vol(P)|: the mass the box fails to capture.

    The moment map sends the grid box into P with density det D^2 phi, so the
    defect is exactly the polytope volume missed by the truncated image. Used
    to gate tolerances of every moment-map pushforward identity downstream.
    """
    from . import toric  # local import keeps module load cheap

    vol = float(toric.volume(state.polytope))
    return abs(state.grid.integrate(state.det_hess) - vol)


# --- smooth probe functions -------------------------------------------------------


def smooth_probes(grid, count, seed, center_frac=0.15):
    """Seeded smooth test functions concentrated in the core of the box.

    Low-degree polynomials times one wide gaussian each. Identity checks
    (self-adjointness, brackets, variations) are statements about smooth
    functions; raw nodal noise probes the one-sided boundary closures instead
    and is meaningless here. No hard cutoff: every compactly-supported window
    has shoulder curvature ~ 1/shoulder^2, which flips the sign of
    det D^2 phi wherever the metric is soft. The gaussian's own tail is below
    1e-9 at the box edge, which is effectively compact for every consumer
    (closures, tail corrections), while its curvature stays ~ (4/R)^2.
    """
    rng = np.random.default_rng(seed)
    R = grid.R
    out = np.empty((count,) + grid.shape)
    for k in range(count):
        center = rng.uniform(-center_frac * R, center_frac * R, size=grid.dim)
        width = rng.uniform(R / 4.5, R / 3.5)
        r2 = np.zeros(grid.shape)
        # constant coefficient kept away from 0 so sup-normalization cannot
        # inflate the derivative scale
        a0 = rng.normal()
        poly = np.full(grid.shape, np.sign(a0) * (0.5 + 0.5 * abs(a0)))
        for j, c in enumerate(grid.coords):
            r2 = r2 + (c - center[j]) ** 2
            poly = poly + rng.normal() * c / R
            for c2 in grid.coords:
                poly = poly + rng.normal() * (c * c2) / R**2
        probe = poly * np.exp(-r2 / (2.0 * width**2))
        out[k] = probe / np.max(np.abs(probe))  # sup norm 1: eps means amplitude
    return out
