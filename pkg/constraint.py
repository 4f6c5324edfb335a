"""Inequality-constraint families and their signed distance functions.

A family is a pointwise linear operator L_x (point value or point derivative),
a polynomial bound l(x) and a sense. For a coefficient vector v the signed
distance at x is

    s(x) = lambda(x) * g(x),   lambda(x) = 1 / ||(L_x psi_j)_j||_2,

with g = L_x(u) - l for lower bounds and g = l - L_x(u) for upper bounds, so
s >= 0 exactly on the feasible side and |s| is the Euclidean distance from v
to the supporting hyperplane at x.

ConstraintView generalizes this to coefficients that are an affine image
``local = offset + basis @ z`` of some working coordinates z. The filter uses
it for equality-reduced problems and for CG fields, where the per-element
Legendre coefficients are a linear function of the global orthonormal vector.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np

import orthopoly
from errors import DegenerateNormal, DegenerateSeries, Infeasible
from orthopoly import LegendreSeries

# -------------------------
# Minimization settings
# -------------------------
# eigenvalues with a larger imaginary part are still tried as candidates;
# extra candidates cost one evaluation each and never change the minimum
CANDIDATE_IMAG_TOLERANCE = 1e-5
PINNED_TOLERANCE = 1e-16
PINNED_OFFSET = 1e-6
TIE_TOLERANCE = 1e-14


class Operator(str, Enum):
    POINT_VALUE = "point_value"
    POINT_DERIVATIVE = "point_derivative"


class Sense(str, Enum):
    LOWER = "lower"
    UPPER = "upper"

    @property
    def sign(self) -> float:
        return 1.0 if self is Sense.LOWER else -1.0


@dataclass(frozen=True)
class ConstraintFamily:
    operator: Operator
    bound: LegendreSeries
    sense: Sense
    label: str
    # multiplies L_x; carries the sqrt(2/h) and 2/h factors of mapped elements
    scale: float = 1.0

    def rows(self, x, n: int) -> np.ndarray:
        """R[i, j] = L_{x_i}(psi_j) for the first n basis functions."""
        if self.operator is Operator.POINT_VALUE:
            return self.scale * orthopoly.vandermonde(x, n)
        return self.scale * orthopoly.derivative_vandermonde(x, n)

    def apply(self, coeffs: np.ndarray) -> LegendreSeries:
        """L(u) as a polynomial series."""
        series = LegendreSeries(coeffs)
        if self.operator is Operator.POINT_DERIVATIVE:
            series = orthopoly.derivative(series)
        return series * self.scale

    def gap(self, coeffs: np.ndarray) -> LegendreSeries:
        """g with g >= 0 exactly where the constraint holds."""
        return (self.apply(coeffs) - self.bound) * self.sense.sign

    def scaled(self, factor: float, bound: Optional[LegendreSeries] = None) -> "ConstraintFamily":
        return replace(self, scale=self.scale * factor, bound=self.bound if bound is None else bound)


@dataclass(frozen=True)
class SignedDistanceSample:
    x: float
    value: float
    family_index: int = 0


# -------------------------
# Family presets
# -------------------------
def lower_bound(value: float, label: Optional[str] = None) -> ConstraintFamily:
    return ConstraintFamily(
        Operator.POINT_VALUE, LegendreSeries.constant(value), Sense.LOWER, label or f"u>={value:g}"
    )


def upper_bound(value: float, label: Optional[str] = None) -> ConstraintFamily:
    return ConstraintFamily(
        Operator.POINT_VALUE, LegendreSeries.constant(value), Sense.UPPER, label or f"u<={value:g}"
    )


def positivity() -> ConstraintFamily:
    return lower_bound(0.0, label="positivity")


def bounds(lo: float, hi: float) -> List[ConstraintFamily]:
    """A two-sided bound lo <= u <= hi, expressed as two families."""
    if lo > hi:
        raise ValueError(f"empty bounds [{lo}, {hi}]")
    return [lower_bound(lo), upper_bound(hi)]


def monotone_increasing() -> ConstraintFamily:
    return ConstraintFamily(
        Operator.POINT_DERIVATIVE, LegendreSeries.constant(0.0), Sense.LOWER, "increasing"
    )


def monotone_decreasing() -> ConstraintFamily:
    return ConstraintFamily(
        Operator.POINT_DERIVATIVE, LegendreSeries.constant(0.0), Sense.UPPER, "decreasing"
    )


@dataclass
class ConstraintView:
    """A family seen through the affine map local = offset + basis @ z.

    ``size`` is the local Legendre dimension the family acts on. With no basis
    the working coordinates are the local coefficients themselves.
    """

    family: ConstraintFamily
    size: int
    basis: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    label: str = ""
    _q: LegendreSeries = field(init=False, repr=False)
    _q_scale: float = field(init=False, repr=False)
    # accepted deficit at pinned points, added to the gap everywhere
    slack: float = field(default=0.0, init=False)

    def __post_init__(self):
        if not self.label:
            self.label = self.family.label
        q_degree = 2 * (self.size - 1)
        if self.family.operator is Operator.POINT_DERIVATIVE:
            q_degree = max(2 * (self.size - 2), 0)
        self._q = orthopoly.project(self._row_norms_squared, q_degree, nodes=q_degree + 1)
        rule = orthopoly.gauss_legendre(q_degree + 1)
        self._q_scale = float(np.max(np.abs(self._row_norms_squared(rule.nodes))))
        if self.basis is None and self._q_scale == 0.0:
            raise DegenerateNormal(
                f"{self.family.label}: operator vanishes on all {self.size} basis functions"
            )

    @property
    def dimension(self) -> int:
        return self.size if self.basis is None else self.basis.shape[1]

    def local(self, z: np.ndarray) -> np.ndarray:
        local = z if self.basis is None else self.basis @ z
        return local if self.offset is None else local + self.offset

    def rows(self, x) -> np.ndarray:
        rows = self.family.rows(x, self.size)
        return rows if self.basis is None else rows @ self.basis

    def _row_norms_squared(self, x) -> np.ndarray:
        return np.sum(self.rows(x) ** 2, axis=1)

    def signed_distance(self, z: np.ndarray, x):
        gap = orthopoly.eval(self.family.gap(self.local(z)), np.atleast_1d(x)) + self.slack
        norms = np.sqrt(self._row_norms_squared(x))
        if np.any(norms == 0.0):
            raise DegenerateNormal(f"{self.label}: zero normal at x={np.atleast_1d(x)[norms == 0.0]}")
        values = gap / norms
        return float(values[0]) if np.ndim(x) == 0 else values

    def unit_normal(self, x: float) -> np.ndarray:
        row = self.rows(x)[0]
        norm = np.linalg.norm(row)
        if norm == 0.0:
            raise DegenerateNormal(f"{self.label}: zero normal at x={x}")
        return self.family.sense.sign * row / norm

    def minimize(self, z: np.ndarray, tolerance: float = 0.0) -> SignedDistanceSample:
        """Global minimizer of s over [-1, 1].

        With s = g / sqrt(q), interior extrema solve 2 g' q - g q' = 0; its real
        roots plus both endpoints form the candidate set. Points where q
        vanishes are pinned (the constraint there does not depend on z): a
        pinned point violated by more than ``tolerance`` makes the problem
        infeasible, any other is replaced by its two neighbours at distance
        PINNED_OFFSET. A pinned deficit within ``tolerance`` does not depend on
        z and is kept as ``slack``, so the neighbours are not held to a gap
        no z can reach.
        """
        gap = self.family.gap(self.local(z))
        q = self._q
        critical = orthopoly.multiply(orthopoly.derivative(gap), q) * 2.0 - orthopoly.multiply(
            gap, orthopoly.derivative(q)
        )
        magnitude = np.linalg.norm(gap.coeffs) * np.linalg.norm(q.coeffs)
        try:
            roots = orthopoly.comrade_roots(
                critical,
                atol=1e-13 * magnitude,
                imag_tolerance=CANDIDATE_IMAG_TOLERANCE,
            )
        except DegenerateSeries:
            roots = np.empty(0)

        candidates = np.unique(np.concatenate([[-1.0, 1.0], roots]))
        q_values = self._row_norms_squared(candidates)
        pinned = q_values <= PINNED_TOLERANCE * self._q_scale
        if np.any(pinned):
            pinned_gaps = np.atleast_1d(orthopoly.eval(gap, candidates[pinned]))
            if np.min(pinned_gaps) < -tolerance * np.sqrt(self._q_scale):
                worst = candidates[pinned][np.argmin(pinned_gaps)]
                raise Infeasible(
                    f"{self.label}: constraint pinned at x={worst:.6g} with gap {np.min(pinned_gaps):.3e}"
                )
            self.slack = max(self.slack, -float(np.min(pinned_gaps)))
            neighbours = np.concatenate([candidates[pinned] - PINNED_OFFSET, candidates[pinned] + PINNED_OFFSET])
            candidates = np.unique(np.concatenate([candidates[~pinned], np.clip(neighbours, -1.0, 1.0)]))
            q_values = self._row_norms_squared(candidates)
            candidates = candidates[q_values > PINNED_TOLERANCE * self._q_scale]
            if candidates.size == 0:
                return SignedDistanceSample(x=-1.0, value=0.0)
        values = self.signed_distance(z, candidates)

        best = np.min(values)
        index = int(np.nonzero(values <= best + TIE_TOLERANCE * (1.0 + abs(best)))[0][0])
        return SignedDistanceSample(x=float(candidates[index]), value=float(values[index]))


def signed_distance(family: ConstraintFamily, coeffs: np.ndarray, x):
    coeffs = np.asarray(coeffs, dtype=float)
    return ConstraintView(family, coeffs.size).signed_distance(coeffs, x)


def unit_normal(family: ConstraintFamily, x: float, n: int) -> np.ndarray:
    return ConstraintView(family, n).unit_normal(x)


def minimize_signed_distance(family: ConstraintFamily, coeffs: np.ndarray) -> SignedDistanceSample:
    coeffs = np.asarray(coeffs, dtype=float)
    return ConstraintView(family, coeffs.size).minimize(coeffs)
