"""Time-basis construction.

Four basis families are supported:

* exact orthonormal polynomials on a complete grid,
* approximate orthonormal polynomials at arbitrary times, obtained by
  evaluating the coefficient table derived on a reference grid,
* restricted cubic spline covariates (linear tails, C2 at the knots),
* plain natural (monomial) polynomials.

Raw times live on [0, 24] hours.  Internally the polynomial coefficients
are expressed in an affinely rescaled variable on [-1, 1]; monomials of
degree 9 on [0, 24] are far too ill-conditioned to work with directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, GridError, KnotError, RankError

TIME_DOMAIN = (0.0, 24.0)

_ORTHO_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time points, in hours within [0, 24]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        if pts.ndim != 1:
            raise GridError("time grid must be one-dimensional")
        if not np.all(np.isfinite(pts)):
            raise GridError("time grid contains non-finite values")
        lo, hi = TIME_DOMAIN
        if pts.size and (pts[0] < lo or pts[-1] > hi):
            raise GridError(f"time points must lie in [{lo}, {hi}]")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise GridError("time points must be strictly increasing")
        object.__setattr__(self, "points", _readonly(pts))

    @classmethod
    def equispaced(cls, n: int, start: float = 0.0, end: float = 24.0) -> "TimeGrid":
        if n < 1:
            raise GridError("need at least one grid point")
        return cls(np.linspace(start, end, n))

    @classmethod
    def hourly_midpoints(cls) -> "TimeGrid":
        """The 24 hourly bin midpoints 0.5, 1.5, ..., 23.5."""
        return cls(np.arange(24, dtype=float) + 0.5)

    @property
    def spacing_kind(self) -> str:
        gaps = np.diff(self.points)
        if gaps.size == 0 or np.ptp(gaps) <= 1e-12:
            return "equispaced"
        return "irregular"

    def __len__(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class PolynomialCoefficients:
    """Monomial coefficient table of an orthonormal polynomial family.

    Row j holds the coefficients of basis polynomial j in the rescaled
    variable u = (t - offset) / scale, lowest power first.  The table is
    lower triangular; evaluating all rows on the generating grid gives
    columns with B'B = I.
    """

    degree: int
    coeffs: np.ndarray
    offset: float
    scale: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.degree + 1, self.degree + 1):
            raise ValueError("coefficient table has the wrong shape")
        object.__setattr__(self, "coeffs", _readonly(c))

    def rescale(self, times: np.ndarray) -> np.ndarray:
        return (np.asarray(times, dtype=float) - self.offset) / self.scale

    def to_jsonable(self) -> dict:
        return {
            "degree": self.degree,
            "coeffs": self.coeffs.tolist(),
            "offset": self.offset,
            "scale": self.scale,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "PolynomialCoefficients":
        return cls(
            degree=int(d["degree"]),
            coeffs=np.asarray(d["coeffs"], dtype=float),
            offset=float(d["offset"]),
            scale=float(d["scale"]),
        )


@dataclass(frozen=True)
class BasisMatrix:
    """Evaluated basis columns together with generation metadata."""

    values: np.ndarray
    kind: str
    meta: dict
    times: TimeGrid

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError("basis matrix contains non-finite entries")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]


def orthonormality_deviation(values: np.ndarray) -> float:
    """max |B'B - I|, the diagnostic of approximate orthonormality."""
    b = np.asarray(values, dtype=float)
    g = b.T @ b
    return float(np.max(np.abs(g - np.eye(g.shape[0]))))


def _eval_table(coeffs: PolynomialCoefficients, times: np.ndarray) -> np.ndarray:
    u = coeffs.rescale(times)
    v = np.vander(u, coeffs.degree + 1, increasing=True)
    return v @ coeffs.coeffs.T


def orthonormal_polynomial_basis(grid: TimeGrid, degree: int):
    """Exact orthonormal polynomials on a complete grid.

    Built by the three-term shift recurrence in coefficient space with
    two-pass re-orthogonalization against all earlier columns, which keeps
    degree-9 drift below 1e-13.  Returns the evaluated matrix and the
    coefficient table that reproduces it.
    """
    p = len(grid)
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree >= p:
        raise RankError(f"degree {degree} needs more than {p} distinct time points")

    lo, hi = float(grid.points[0]), float(grid.points[-1])
    if p == 1:
        offset, scale = lo, 1.0
    else:
        offset, scale = (lo + hi) / 2.0, (hi - lo) / 2.0
    u = (grid.points - offset) / scale
    vand = np.vander(u, degree + 1, increasing=True)

    ncol = degree + 1
    table = np.zeros((ncol, ncol))
    cols = np.empty((p, ncol))

    c0 = np.zeros(ncol)
    c0[0] = 1.0
    v = vand @ c0
    nrm = np.linalg.norm(v)
    table[0] = c0 / nrm
    cols[:, 0] = v / nrm

    for j in range(1, ncol):
        # multiply the previous polynomial by u: shift coefficients up one power
        c = np.zeros(ncol)
        c[1 : j + 1] = table[j - 1, :j]
        v = vand @ c
        for _ in range(2):
            for k in range(j):
                proj = cols[:, k] @ v
                c -= proj * table[k]
                v -= proj * cols[:, k]
        nrm = np.linalg.norm(v)
        if nrm <= 1e-13 * max(1.0, np.linalg.norm(vand @ np.abs(c))):
            raise RankError(f"basis degenerates at degree {j}")
        table[j] = c / nrm
        cols[:, j] = v / nrm

    # sign convention: largest-magnitude entry of each column positive
    # (ties broken toward the last such entry, so increasing columns keep
    # positive slope)
    for j in range(ncol):
        mag = np.abs(cols[:, j])
        i = len(mag) - 1 - int(np.argmax(mag[::-1]))
        if cols[i, j] < 0:
            table[j] = -table[j]
            cols[:, j] = -cols[:, j]

    coeffs = PolynomialCoefficients(degree=degree, coeffs=table, offset=offset, scale=scale)
    # regenerate through the evaluation path so evaluate() is bitwise identical
    values = _eval_table(coeffs, grid.points)
    basis = BasisMatrix(values=values, kind="orthonormal_poly", meta={"degree": degree}, times=grid)
    return basis, coeffs


def evaluate_polynomial_basis(coeffs: PolynomialCoefficients, times: TimeGrid) -> BasisMatrix:
    """Evaluate a stored coefficient table at arbitrary times in [0, 24].

    On the generating grid this reproduces the exact basis bitwise; at
    other times the columns are only approximately orthonormal and the
    deviation is exposed via ``orthonormality_deviation``.
    """
    lo, hi = TIME_DOMAIN
    pts = times.points
    if pts.size and (pts[0] < lo or pts[-1] > hi):
        raise DomainError(f"times outside [{lo}, {hi}]: extrapolation refused")
    values = _eval_table(coeffs, pts)
    return BasisMatrix(
        values=values,
        kind="approx_orthonormal_poly",
        meta={"degree": coeffs.degree},
        times=times,
    )


def restricted_cubic_spline_basis(times: TimeGrid, knots) -> BasisMatrix:
    """Restricted cubic spline covariates: the linear term plus k-2 columns.

    Column i (i >= 1) is
        (t - t_i)+^3 - (t - t_{k-1})+^3 (t_k - t_i)/(t_k - t_{k-1})
                     + (t - t_k)+^3 (t_{k-1} - t_i)/(t_k - t_{k-1}),
    which makes the implied spline C2 everywhere and linear outside the
    boundary knots.  No intercept column is included.
    """
    kn = np.asarray(knots, dtype=float)
    if kn.ndim != 1 or kn.size < 3:
        raise KnotError("need at least 3 strictly increasing knots")
    if not np.all(np.diff(kn) > 0):
        raise KnotError("knots must be strictly increasing")
    lo, hi = TIME_DOMAIN
    if kn[0] < lo or kn[-1] > hi:
        raise KnotError(f"knots must lie within [{lo}, {hi}]")
    if len(times) == 0:
        raise GridError("empty time grid")

    t = times.points
    k = kn.size
    tkm1, tk = kn[-2], kn[-1]
    span = tk - tkm1

    def plus3(x):
        return np.where(x > 0, x, 0.0) ** 3

    cols = [t]
    for i in range(k - 2):
        ti = kn[i]
        xi = (
            plus3(t - ti)
            - plus3(t - tkm1) * (tk - ti) / span
            + plus3(t - tk) * (tkm1 - ti) / span
        )
        cols.append(xi)
    values = np.column_stack(cols)
    return BasisMatrix(
        values=values,
        kind="restricted_cubic_spline",
        meta={"knots": kn.tolist()},
        times=times,
    )


def natural_polynomial_basis(times: TimeGrid, degree: int) -> BasisMatrix:
    """Plain monomial columns 1, t, ..., t^degree."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    values = np.vander(times.points, degree + 1, increasing=True)
    return BasisMatrix(
        values=values, kind="natural_poly", meta={"degree": degree}, times=times
    )


def gram_schmidt_transform(m: np.ndarray):
    """Modified Gram-Schmidt with re-orthogonalization.

    Returns (Q, T) with Q = M @ T, Q'Q = I and T upper triangular, so
    column j of Q spans the same space as columns 1..j of M.  Each output
    column has its largest-magnitude entry positive.
    """
    m = np.asarray(m, dtype=float)
    p, c = m.shape
    scale = np.linalg.norm(m)
    q = np.empty((p, c))
    t = np.zeros((c, c))
    for j in range(c):
        v = m[:, j].copy()
        tj = np.zeros(c)
        tj[j] = 1.0
        for _ in range(2):
            for k in range(j):
                proj = q[:, k] @ v
                v -= proj * q[:, k]
                tj -= proj * t[:, k]
        nrm = np.linalg.norm(v)
        if nrm <= _ORTHO_TOL * scale:
            raise RankError(f"rank deficiency at column {j + 1}")
        q[:, j] = v / nrm
        t[:, j] = tj / nrm
    for j in range(c):
        mag = np.abs(q[:, j])
        i = len(mag) - 1 - int(np.argmax(mag[::-1]))
        if q[i, j] < 0:
            q[:, j] = -q[:, j]
            t[:, j] = -t[:, j]
    return q, t


def gram_schmidt_orthonormalize(basis: BasisMatrix, add_intercept: bool = True) -> BasisMatrix:
    """Orthonormalize basis columns, optionally prepending an intercept.

    With ``add_intercept`` the later columns are centered against a
    constant column, matching how spline covariates enter the fixed
    design.
    """
    m = basis.values
    if add_intercept:
        m = np.column_stack([np.ones(m.shape[0]), m])
    q, _ = gram_schmidt_transform(m)
    meta = dict(basis.meta)
    meta["orthonormalized"] = True
    meta["intercept_added"] = bool(add_intercept)
    return BasisMatrix(values=q, kind=basis.kind, meta=meta, times=basis.times)


def clock_knots_to_elapsed(clock_knots, start_hour: float):
    """Map clock-hour knots to elapsed hours since recording start, sorted.

    The default 9-knot placement crosses midnight; the spline formula
    needs knots on the same monotone axis as the data.
    """
    kn = np.asarray(clock_knots, dtype=float)
    elapsed = np.sort(np.mod(kn - start_hour, 24.0))
    if np.any(np.diff(elapsed) <= 0):
        raise KnotError("clock knots collapse onto each other after remapping")
    return elapsed


#: 9-knot clock-hour placement used for the restricted cubic spline default.
DEFAULT_SPLINE_CLOCK_KNOTS = (13.0, 15.0, 18.0, 21.0, 0.0, 3.0, 6.0, 9.0, 11.0)
