"""Bernstein-polynomial abstraction of scalar functions over boxes.

The polynomial interpolates the function on a uniform grid of the box (the
grid values are the Bernstein coefficients).  A certified error bound comes
from sampling |f - B| on a finer grid and padding with Lipschitz constants of
both f and B, so f(x) lies in B(x) +/- eps everywhere on the box.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .reach import IntervalBox

# Absolute slack added to certified bounds to absorb floating-point rounding.
ROUNDING_SLACK = 1e-12
# points per batch when scanning error grids
_CHUNK = 1 << 14


class BernsteinError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _casteljau_axis(coeffs: np.ndarray, t: np.ndarray, axis: int) -> np.ndarray:
    """Contract one coefficient axis at parameters t (one per leading batch row).

    ``coeffs`` has shape (N, ...) with the contracted axis at position ``axis``.
    """
    b = np.moveaxis(coeffs, axis, 1).copy()
    d = b.shape[1] - 1
    tt = t.reshape((-1, 1) + (1,) * (b.ndim - 2))
    for j in range(d):
        b[:, : d - j] = (1.0 - tt) * b[:, : d - j] + tt * b[:, 1 : d - j + 1]
    return b[:, 0]


def _split_axis(coeffs: np.ndarray, axis: int, t: float = 0.5):
    """de Casteljau subdivision of one axis at parameter t -> (left, right)."""
    b = np.moveaxis(coeffs, axis, 0).astype(float)
    d = b.shape[0] - 1
    left = [b[0]]
    right = [b[d]]
    work = b.copy()
    for j in range(1, d + 1):
        work = (1.0 - t) * work[:-1] + t * work[1:]
        left.append(work[0])
        right.append(work[-1])
    left = np.moveaxis(np.stack(left), 0, axis)
    right = np.moveaxis(np.stack(right[::-1]), 0, axis)
    return left, right


@dataclass(frozen=True, eq=False)
class BernsteinPoly:
    """Tensor-product Bernstein polynomial over ``domain``.

    Only the nondegenerate dimensions of the domain (``dims``) are polynomial
    variables; degenerate dimensions are fixed coordinates.
    """

    coeffs: np.ndarray
    degree: tuple[int, ...]
    domain: IntervalBox
    dims: tuple[int, ...]

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        expected = tuple(d + 1 for d in self.degree)
        if c.shape != expected:
            raise BernsteinError(f"coefficient shape {c.shape} does not match degree {self.degree}")
        if not np.all(np.isfinite(c)):
            raise BernsteinError("non-finite Bernstein coefficient")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def dim(self) -> int:
        return len(self.dims)

    def _unit(self, x: np.ndarray, check: bool = True) -> np.ndarray:
        lo = self.domain.lo[list(self.dims)]
        w = self.domain.width[list(self.dims)]
        t = (x[:, list(self.dims)] - lo) / w
        if check:
            tol = 1e-9
            outside = (t < -tol) | (t > 1.0 + tol)
            fixed = [j for j in range(self.domain.n) if j not in self.dims]
            if fixed:
                scale = 1e-9 * np.maximum(1.0, np.abs(self.domain.lo[fixed]))
                outside_fixed = np.abs(x[:, fixed] - self.domain.lo[fixed]) > scale
            else:
                outside_fixed = np.zeros((len(x), 0), dtype=bool)
            if outside.any() or outside_fixed.any():
                raise DomainError("evaluation point outside the polynomial's domain")
        return np.clip(t, 0.0, 1.0)

    def __call__(self, x, check: bool = True):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        if not self.dims:
            out = np.full(len(xs), float(self.coeffs))
            if check:
                self._unit(xs)
            return out[0] if single else out
        t = self._unit(xs, check)
        b = np.broadcast_to(self.coeffs, (len(xs),) + self.coeffs.shape)
        for k in range(self.dim):
            b = _casteljau_axis(b, t[:, k], 1)
        return b[0] if single else b

    def range(self, subdivisions: int = 0) -> tuple[float, float]:
        return poly_range(self, subdivisions)

    def on_grid(self, counts) -> np.ndarray:
        """Values on the uniform tensor grid with ``counts[k]`` nodes per variable, flattened in 'ij' order."""
        out = np.asarray(self.coeffs, dtype=float)
        for k, (d, m) in enumerate(zip(self.degree, counts)):
            t = np.arange(m) / (m - 1)
            j = np.arange(d + 1)
            basis = np.array([math.comb(d, i) for i in j]) * t[:, None] ** j * (1.0 - t[:, None]) ** (d - j)
            out = np.moveaxis(np.tensordot(basis, out, axes=([1], [k])), 0, k)
        return out.reshape(-1)

    def lipschitz(self) -> float:
        """l2 Lipschitz bound in raw coordinates from coefficient first differences."""
        if not self.dims:
            return 0.0
        w = self.domain.width[list(self.dims)]
        parts = []
        for k, d in enumerate(self.degree):
            diff = np.diff(self.coeffs, axis=k)
            parts.append(d * float(np.max(np.abs(diff))) / w[k])
        return float(np.sqrt(np.sum(np.square(parts))))

    def linear_coeffs(self, weights: np.ndarray, const: float = 0.0) -> np.ndarray:
        """Coefficients of ``weights @ x + const`` in this polynomial's basis (exact)."""
        weights = np.asarray(weights, dtype=float)
        fixed = [j for j in range(self.domain.n) if j not in self.dims]
        base = const + float(weights[fixed] @ self.domain.lo[fixed]) if fixed else float(const)
        out = np.full(self.coeffs.shape, base)
        for k, (j, d) in enumerate(zip(self.dims, self.degree)):
            grid = self.domain.lo[j] + np.arange(d + 1) / d * self.domain.width[j]
            shape = [1] * self.dim
            shape[k] = d + 1
            out = out + weights[j] * grid.reshape(shape)
        return out


def _grid_points(box: IntervalBox, dims, counts) -> np.ndarray:
    """All grid points with ``counts[k]`` uniform nodes on dimension ``dims[k]``."""
    axes = [box.lo[j] + np.arange(m) / (m - 1) * box.width[j] for j, m in zip(dims, counts)]
    pts = np.tile(box.lo, (int(np.prod(counts)), 1)) if dims else box.lo[None].copy()
    if dims:
        mesh = np.meshgrid(*axes, indexing="ij")
        for k, j in enumerate(dims):
            pts[:, j] = mesh[k].reshape(-1)
    return pts


def build_bernstein(f: Callable, box: IntervalBox, degree: Sequence[int]) -> BernsteinPoly:
    """Bernstein polynomial of f over ``box`` with per-dimension ``degree``.

    ``f`` maps an (N, n) array of points to N values.  Zero-width box
    dimensions are held fixed and excluded from the polynomial variables.
    """
    degree = tuple(int(d) for d in np.broadcast_to(degree, box.lo.shape))
    if any(d < 1 for d in degree):
        raise BernsteinError("all degrees must be at least 1")
    dims = tuple(int(j) for j in box.active_dims)
    deg = tuple(degree[j] for j in dims)
    pts = _grid_points(box, dims, [d + 1 for d in deg])
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise BernsteinError("function is not finite at a Bernstein grid point")
    coeffs = vals.reshape(tuple(d + 1 for d in deg)) if dims else np.asarray(vals[0])
    return BernsteinPoly(coeffs, deg, box, dims)


def poly_range(poly: BernsteinPoly, subdivisions: int = 0) -> tuple[float, float]:
    """Enclosure of the polynomial's range on its domain from coefficient extremes.

    Each subdivision round halves every variable's interval by de Casteljau
    splitting; the union of the pieces' enclosures only ever shrinks.
    """
    lo, hi = float(np.min(poly.coeffs)), float(np.max(poly.coeffs))
    if subdivisions <= 0 or not poly.dims:
        return lo, hi
    pieces = [np.asarray(poly.coeffs)]
    for _ in range(subdivisions):
        for axis in range(poly.dim):
            nxt = []
            for c in pieces:
                nxt.extend(_split_axis(c, axis))
            pieces = nxt
    sub_lo = min(float(np.min(c)) for c in pieces)
    sub_hi = max(float(np.max(c)) for c in pieces)
    return max(lo, sub_lo), min(hi, sub_hi)


def error_bound(f: Callable, lipschitz_f: float, poly: BernsteinPoly, box: IntervalBox | None = None, m: int = 8) -> float:
    """Certified eps with |f(x) - B(x)| <= eps on the box.

    Max of |f - B| over an m-per-dimension grid, plus (L_f + L_B) times the
    half-diagonal of a grid cell: every box point is that close to a node.
    """
    box = poly.domain if box is None else box
    if m < 2:
        raise ValueError("error grid needs at least 2 points per dimension")
    if not math.isfinite(lipschitz_f):
        raise ValueError("Lipschitz bound must be finite")
    dims = list(poly.dims)
    if not dims:
        return ROUNDING_SLACK
    counts = [m] * len(dims)
    pts = _grid_points(box, dims, counts)
    if box == poly.domain:
        approx = poly.on_grid(counts)
    else:
        approx = np.concatenate([poly(pts[k : k + _CHUNK], check=False) for k in range(0, len(pts), _CHUNK)])
    worst = 0.0
    for k in range(0, len(pts), _CHUNK):
        gap = np.abs(np.asarray(f(pts[k : k + _CHUNK]), dtype=float).reshape(-1) - approx[k : k + _CHUNK])
        worst = max(worst, float(gap.max()))
    r = 0.5 * float(np.sqrt(np.sum(np.square(box.width[dims] / (m - 1)))))
    return worst + (lipschitz_f + poly.lipschitz()) * r + ROUNDING_SLACK


@dataclass(frozen=True)
class CertifiedApprox:
    poly: BernsteinPoly
    epsilon: float
    source_tag: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ValueError("epsilon must be finite and nonnegative")

    def range(self, subdivisions: int = 0) -> tuple[float, float]:
        lo, hi = poly_range(self.poly, subdivisions)
        return lo - self.epsilon, hi + self.epsilon

    def contains(self, x, values) -> np.ndarray:
        """Whether f(x) = values lies within B(x) +/- eps (vectorised)."""
        return np.abs(np.asarray(values) - self.poly(x, check=False)) <= self.epsilon


def certify(f: Callable, lipschitz_f: float, box: IntervalBox, degree, m: int = 8, tag: str = "") -> CertifiedApprox:
    poly = build_bernstein(f, box, degree)
    return CertifiedApprox(poly, error_bound(f, lipschitz_f, poly, box, m), tag)


def approx_range(f: Callable, lipschitz_f: float, box: IntervalBox, degree, m: int = 8, subdivisions: int = 0):
    """Sound enclosure of f's range over the box: polynomial range widened by eps."""
    return certify(f, lipschitz_f, box, degree, m).range(subdivisions)


def dump_coefficients(poly: BernsteinPoly) -> dict:
    """Debug view of a polynomial as plain data."""
    return {
        "dims": list(poly.dims),
        "degree": list(poly.degree),
        "domain": {"lo": poly.domain.lo.tolist(), "hi": poly.domain.hi.tolist()},
        "coeffs": np.asarray(poly.coeffs).tolist(),
    }
