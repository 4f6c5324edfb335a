"""Orthonormal Legendre series on the reference interval [-1, 1].

Coefficient j multiplies psi_j(x) = sqrt((2j+1)/2) * P_j(x), so the L2 norm of a
series equals the Euclidean norm of its coefficients. The heavy lifting
(Clenshaw evaluation, derivative maps, Gauss rules, the scaled companion matrix)
comes from numpy.polynomial.legendre; this module only handles the change of
normalization and the filtering of eigenvalues into real roots.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import linalg

from errors import DegenerateSeries

# -------------------------
# Root-finding settings
# -------------------------
DROP_TOLERANCE = 1e-13
EDGE_TOLERANCE = 1e-10
IMAG_TOLERANCE = 1e-8
MAX_NEWTON_STEPS = 8

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class LegendreSeries:
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.atleast_1d(np.asarray(self.coeffs, dtype=float)).copy()
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise ValueError("LegendreSeries needs a non-empty 1-D coefficient vector")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __len__(self) -> int:
        return self.coeffs.size

    def __call__(self, x: ArrayLike):
        return eval(self, x)

    def __add__(self, other: "LegendreSeries") -> "LegendreSeries":
        size = max(len(self), len(other))
        return LegendreSeries(pad(self.coeffs, size) + pad(other.coeffs, size))

    def __sub__(self, other: "LegendreSeries") -> "LegendreSeries":
        size = max(len(self), len(other))
        return LegendreSeries(pad(self.coeffs, size) - pad(other.coeffs, size))

    def __mul__(self, factor: float) -> "LegendreSeries":
        return LegendreSeries(self.coeffs * float(factor))

    __rmul__ = __mul__

    def __neg__(self) -> "LegendreSeries":
        return LegendreSeries(-self.coeffs)

    @classmethod
    def constant(cls, value: float) -> "LegendreSeries":
        return cls([value * np.sqrt(2.0)])


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


def pad(coeffs: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (never truncate) a coefficient vector to ``size`` entries."""
    out = np.zeros(max(size, len(coeffs)))
    out[: len(coeffs)] = coeffs
    return out


def normalization(n: int) -> np.ndarray:
    """Factors sqrt((2j+1)/2) turning classical P_j into orthonormal psi_j."""
    j = np.arange(n)
    return np.sqrt((2.0 * j + 1.0) / 2.0)


def to_classical(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs * normalization(coeffs.size)


def from_classical(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs / normalization(coeffs.size)


@lru_cache(maxsize=64)
def _gauss(m: int):
    nodes, weights = npleg.leggauss(m)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_legendre(m: int) -> QuadratureRule:
    """m-point Gauss-Legendre rule, exact for degree <= 2m-1."""
    if m < 1:
        raise ValueError(f"Gauss rule needs at least one node, got {m}")
    nodes, weights = _gauss(m)
    return QuadratureRule(nodes=nodes, weights=weights)


def vandermonde(x: ArrayLike, n: int) -> np.ndarray:
    """V[i, j] = psi_j(x_i) for j < n."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return npleg.legvander(x, n - 1) * normalization(n)


@lru_cache(maxsize=64)
def _derivative_map(n: int) -> np.ndarray:
    # column j holds the classical coefficients of P_j'
    return npleg.legder(np.eye(n), axis=0)


def derivative_vandermonde(x: ArrayLike, n: int) -> np.ndarray:
    """D[i, j] = psi_j'(x_i) for j < n."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if n == 1:
        return np.zeros((x.size, 1))
    return npleg.legvander(x, n - 2) @ _derivative_map(n) * normalization(n)


def eval(series: LegendreSeries, x: ArrayLike):
    """Evaluate sum_j c_j psi_j(x) with Clenshaw's backward recurrence."""
    values = npleg.legval(np.asarray(x, dtype=float), to_classical(series.coeffs))
    return float(values) if np.ndim(values) == 0 else values


def derivative(series: LegendreSeries) -> LegendreSeries:
    if series.degree == 0:
        return LegendreSeries([0.0])
    return LegendreSeries(from_classical(npleg.legder(to_classical(series.coeffs))))


def eval_derivative(series: LegendreSeries, x: ArrayLike):
    return eval(derivative(series), x)


def project(f: Callable[[np.ndarray], np.ndarray], degree: int, nodes: int = 0) -> LegendreSeries:
    """L2 projection of f onto polynomials of the given degree.

    Exact when f is itself a polynomial of degree <= 2*nodes - 1 - degree.
    """
    rule = gauss_legendre(max(nodes, degree + 1))
    values = np.asarray(f(rule.nodes), dtype=float) * np.ones_like(rule.nodes)
    return LegendreSeries(vandermonde(rule.nodes, degree + 1).T @ (rule.weights * values))


def multiply(a: LegendreSeries, b: LegendreSeries) -> LegendreSeries:
    """Exact product, formed by re-projecting pointwise products at a Gauss rule."""
    degree = a.degree + b.degree
    return project(lambda x: eval(a, x) * eval(b, x), degree, nodes=degree + 1)


def integrate(series: LegendreSeries) -> float:
    """Integral over [-1, 1]; only psi_0 has a nonzero mean."""
    return float(series.coeffs[0] * np.sqrt(2.0))


def affine_restrict(series: LegendreSeries, lo: float, hi: float) -> LegendreSeries:
    """Re-express series(t) for t in [lo, hi] as a series in xi in [-1, 1]."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return project(lambda xi: eval(series, mid + half * xi), series.degree)


def trim(coeffs: np.ndarray, tolerance: float = DROP_TOLERANCE) -> np.ndarray:
    """Drop trailing coefficients with |c| <= tolerance * max|c|."""
    coeffs = np.asarray(coeffs, dtype=float)
    cutoff = tolerance * np.max(np.abs(coeffs))
    keep = np.nonzero(np.abs(coeffs) > cutoff)[0]
    if keep.size == 0:
        return coeffs[:1] * 0.0
    return coeffs[: keep[-1] + 1]


def _polish(series: LegendreSeries, roots: np.ndarray) -> np.ndarray:
    """Guarded Newton steps until no root's residual shrinks any further."""
    dseries = derivative(series)
    roots = roots.copy()
    for _ in range(MAX_NEWTON_STEPS):
        values = eval(series, roots)
        slopes = eval(dseries, roots)
        with np.errstate(divide="ignore", invalid="ignore"):
            candidates = np.clip(roots - values / slopes, -1.0, 1.0)
        better = np.isfinite(candidates) & (np.abs(eval(series, candidates)) < np.abs(values))
        if not better.any():
            break
        roots = np.where(better, candidates, roots)
    return roots


def comrade_roots(
    series: LegendreSeries,
    atol: float = 0.0,
    imag_tolerance: float = IMAG_TOLERANCE,
    polish: bool = True,
) -> np.ndarray:
    """Real roots in [-1, 1] from the eigenvalues of the comrade matrix.

    ``legcompanion`` builds the symmetrically scaled Legendre companion matrix
    from the three-term recurrence; normalization does not change its spectrum.
    Raises DegenerateSeries when every coefficient is at or below
    ``max(atol, 0)``.
    """
    coeffs = np.asarray(series.coeffs, dtype=float)
    scale = np.max(np.abs(coeffs))
    if scale <= atol or scale == 0.0:
        raise DegenerateSeries(f"series of degree {series.degree} is numerically zero")

    classical = to_classical(trim(coeffs))
    if classical.size < 2:
        return np.empty(0)

    eigenvalues = linalg.eigvals(npleg.legcompanion(classical))
    real = np.abs(eigenvalues.imag) <= imag_tolerance * (1.0 + np.abs(eigenvalues.real))
    roots = eigenvalues.real[real]
    roots = roots[np.abs(roots) <= 1.0 + EDGE_TOLERANCE]
    roots = np.clip(roots, -1.0, 1.0)
    if polish and roots.size:
        roots = _polish(LegendreSeries(from_classical(classical)), roots)
    return np.sort(roots)
