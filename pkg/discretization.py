"""Meshes and the two piecewise-polynomial field representations.

DG fields store, per element, coefficients in the L2(Omega)-orthonormal mapped
basis psi_{e,k}(x) = sqrt(2/h_e) psi_k(xi(x)); the global L2 norm is the
Euclidean norm of all blocks and constraints decouple per element.

CG fields store coefficients in the continuous hat + bubble basis. The global
mass matrix M = R^T R gives orthonormal coordinates w = R v, in which the
filter works; per-element Legendre coefficients are a linear image of w.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import linalg

import orthopoly
from constraint import ConstraintFamily, ConstraintView, Operator
from errors import DegenerateSeries, Infeasible, NotConverged, NotSPD, RankDeficient
from logs import logger
from orthopoly import LegendreSeries
from structure_filter import (
    FilterConfig,
    FilterReport,
    build_equality_set,
    greedy_project,
    project_views,
    project_with_equalities,
)

# -------------------------
# Discretization settings
# -------------------------
MONITOR_POINTS = 32


class FilterOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    preserve_boundaries: bool = False
    preserve_element_mass: bool = False
    preserve_total_mass: bool = False
    # drop trace equalities that pin an element into infeasibility; the mean is always kept
    release_infeasible_equalities: bool = True
    workers: int = 1
    config: FilterConfig = FilterConfig()


@dataclass(frozen=True)
class Mesh1D:
    breaks: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float).copy()
        if breaks.ndim != 1 or breaks.size < 2:
            raise ValueError("a mesh needs at least two break points")
        if np.any(np.diff(breaks) <= 0.0):
            raise ValueError("mesh breaks must be strictly increasing")
        breaks.setflags(write=False)
        object.__setattr__(self, "breaks", breaks)

    @classmethod
    def uniform(cls, a: float, b: float, elements: int) -> "Mesh1D":
        return cls(np.linspace(a, b, elements + 1))

    @property
    def a(self) -> float:
        return float(self.breaks[0])

    @property
    def b(self) -> float:
        return float(self.breaks[-1])

    @property
    def E(self) -> int:
        return self.breaks.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breaks)

    def element(self, e: int) -> Tuple[float, float]:
        return float(self.breaks[e]), float(self.breaks[e + 1])

    def to_reference(self, e: int, x):
        lo, hi = self.element(e)
        return (2.0 * np.asarray(x, dtype=float) - (lo + hi)) / (hi - lo)

    def to_physical(self, e: int, xi):
        lo, hi = self.element(e)
        return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.asarray(xi, dtype=float)

    def locate(self, x) -> np.ndarray:
        index = np.searchsorted(self.breaks, np.asarray(x, dtype=float), side="right") - 1
        return np.clip(index, 0, self.E - 1)


@dataclass
class DGField:
    mesh: Mesh1D
    n: int
    coeffs: np.ndarray  # (E, n)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(self.mesh.E, self.n)

    @classmethod
    def zeros(cls, mesh: Mesh1D, n: int) -> "DGField":
        return cls(mesh, n, np.zeros((mesh.E, n)))

    @property
    def degree(self) -> int:
        return self.n - 1

    def copy(self) -> "DGField":
        return DGField(self.mesh, self.n, self.coeffs.copy())

    def local_series(self, e: int) -> LegendreSeries:
        """u on element e as a series in the reference coordinate."""
        return LegendreSeries(self.coeffs[e] * np.sqrt(2.0 / self.mesh.widths[e]))

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        elements = self.mesh.locate(x)
        values = np.empty_like(x)
        for e in np.unique(elements):
            mask = elements == e
            values[mask] = orthopoly.eval(self.local_series(e), np.atleast_1d(self.mesh.to_reference(e, x[mask])))
        return values


class CGSpace:
    """Hat + bubble basis of a given degree on a mesh, with its global matrices.

    Local basis order on each element: left hat, right hat, then bubbles
    (P_k - P_{k-2}) / sqrt(2(2k-1)), k = 2..degree, which vanish at both ends.
    Vertex dofs come first (0..E), bubble dofs after them.
    """

    def __init__(self, mesh: Mesh1D, degree: int):
        if degree < 1:
            raise ValueError(f"CG degree must be >= 1, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.local_size = degree + 1
        self.size = mesh.E * degree + 1
        self.local_basis = self._local_basis(degree)
        self.dofs = self._dof_map()
        self.mass_matrix, self.stiffness_matrix = self._assemble()
        try:
            self.cholesky_factor = linalg.cholesky(self.mass_matrix, lower=False)
        except linalg.LinAlgError as exc:
            raise NotSPD(f"mass matrix of degree-{degree} space on {mesh.E} elements is not SPD") from exc
        self.inverse_factor = linalg.solve_triangular(self.cholesky_factor, np.eye(self.size))
        logger.debug("assembled CG space", extra={"elements": mesh.E, "degree": degree, "size": self.size})

    @staticmethod
    def _local_basis(degree: int) -> np.ndarray:
        """T[j, m]: local basis function j in orthonormal reference coordinates."""
        T = np.zeros((degree + 1, degree + 1))
        T[0, :2] = [np.sqrt(2.0) / 2.0, -np.sqrt(2.0 / 3.0) / 2.0]
        T[1, :2] = [np.sqrt(2.0) / 2.0, np.sqrt(2.0 / 3.0) / 2.0]
        for k in range(2, degree + 1):
            scale = 1.0 / np.sqrt(2.0 * (2 * k - 1))
            T[k, k] = np.sqrt(2.0 / (2 * k + 1)) * scale
            T[k, k - 2] = -np.sqrt(2.0 / (2 * k - 3)) * scale
        return T

    def _dof_map(self) -> np.ndarray:
        E, p = self.mesh.E, self.degree
        dofs = np.empty((E, p + 1), dtype=int)
        dofs[:, 0] = np.arange(E)
        dofs[:, 1] = np.arange(1, E + 1)
        for e in range(E):
            dofs[e, 2:] = E + 1 + e * (p - 1) + np.arange(p - 1)
        return dofs

    def _assemble(self) -> Tuple[np.ndarray, np.ndarray]:
        T = self.local_basis
        rule = orthopoly.gauss_legendre(self.local_size)
        D = orthopoly.derivative_vandermonde(rule.nodes, self.local_size)
        reference_stiffness = D.T @ (rule.weights[:, None] * D)
        M = np.zeros((self.size, self.size))
        L = np.zeros((self.size, self.size))
        for e, h in enumerate(self.mesh.widths):
            index = np.ix_(self.dofs[e], self.dofs[e])
            M[index] += 0.5 * h * T @ T.T
            L[index] += (2.0 / h) * T @ reference_stiffness @ T.T
        return M, L

    def basis_values(self, xi) -> np.ndarray:
        """phi[j, i]: local basis function j at reference point xi_i."""
        return self.local_basis @ orthopoly.vandermonde(xi, self.local_size).T

    def element_map(self, e: int) -> np.ndarray:
        """B_e with (reference Legendre coefficients on e) = B_e @ w."""
        return self.local_basis.T @ self.inverse_factor[self.dofs[e], :]

    def mass_functional(self) -> np.ndarray:
        """m with integral(u) = m . v in hat/bubble coordinates."""
        m = np.zeros(self.size)
        for e, h in enumerate(self.mesh.widths):
            m[self.dofs[e]] += 0.5 * h * np.sqrt(2.0) * self.local_basis[:, 0]
        return m

    def element_mass_functionals(self) -> np.ndarray:
        rows = np.zeros((self.mesh.E, self.size))
        for e, h in enumerate(self.mesh.widths):
            rows[e, self.dofs[e]] = 0.5 * h * np.sqrt(2.0) * self.local_basis[:, 0]
        return rows

    def boundary_dofs(self) -> np.ndarray:
        return np.array([0, self.mesh.E])


@dataclass
class CGField:
    space: CGSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(self.space.size)

    @property
    def mesh(self) -> Mesh1D:
        return self.space.mesh

    @property
    def degree(self) -> int:
        return self.space.degree

    @property
    def mass_matrix(self) -> np.ndarray:
        return self.space.mass_matrix

    @property
    def cholesky_factor(self) -> np.ndarray:
        return self.space.cholesky_factor

    def copy(self) -> "CGField":
        return CGField(self.space, self.coeffs.copy())

    def local_series(self, e: int) -> LegendreSeries:
        return LegendreSeries(self.space.local_basis.T @ self.coeffs[self.space.dofs[e]])

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        elements = self.mesh.locate(x)
        values = np.empty_like(x)
        for e in np.unique(elements):
            mask = elements == e
            values[mask] = orthopoly.eval(self.local_series(e), np.atleast_1d(self.mesh.to_reference(e, x[mask])))
        return values


Field = Union[DGField, CGField]


# -------------------------
# Projection and elementwise quantities
# -------------------------
def project_function(
    f: Callable[[np.ndarray], np.ndarray],
    target: Union[DGField, CGField, CGSpace],
    nodes: int = 0,
) -> Field:
    """L2 projection of f onto the shape of ``target``."""
    if isinstance(target, DGField):
        mesh, n = target.mesh, target.n
        rule = orthopoly.gauss_legendre(max(nodes, 2 * n + 1))
        V = orthopoly.vandermonde(rule.nodes, n)
        coeffs = np.empty((mesh.E, n))
        for e, h in enumerate(mesh.widths):
            values = np.asarray(f(mesh.to_physical(e, rule.nodes)), dtype=float) * np.ones_like(rule.nodes)
            coeffs[e] = np.sqrt(h / 2.0) * V.T @ (rule.weights * values)
        return DGField(mesh, n, coeffs)

    space = target.space if isinstance(target, CGField) else target
    return CGField(space, linalg.cho_solve((space.cholesky_factor, False), load_vector(space, f, nodes)))


def load_vector(space: CGSpace, f: Callable[[np.ndarray], np.ndarray], nodes: int = 0) -> np.ndarray:
    """b_i = integral of f * phi_i by elementwise Gauss quadrature."""
    rule = orthopoly.gauss_legendre(max(nodes, 2 * space.degree + 2))
    phi = space.basis_values(rule.nodes)
    b = np.zeros(space.size)
    for e, h in enumerate(space.mesh.widths):
        values = np.asarray(f(space.mesh.to_physical(e, rule.nodes)), dtype=float) * np.ones_like(rule.nodes)
        b[space.dofs[e]] += 0.5 * h * phi @ (rule.weights * values)
    return b


def element_boundary_values(field: DGField, e: int) -> Tuple[float, float]:
    series = field.local_series(e)
    return orthopoly.eval(series, -1.0), orthopoly.eval(series, 1.0)


def element_mass(field: DGField, e: int) -> float:
    return float(field.coeffs[e, 0] * np.sqrt(field.mesh.widths[e]))


def total_mass(field: Field) -> float:
    if isinstance(field, DGField):
        return float(np.sum(field.coeffs[:, 0] * np.sqrt(field.mesh.widths)))
    return float(field.space.mass_functional() @ field.coeffs)


def to_orthonormal(field: CGField) -> np.ndarray:
    return field.cholesky_factor @ field.coeffs


def from_orthonormal(w: np.ndarray, space: CGSpace) -> CGField:
    return CGField(space, linalg.solve_triangular(space.cholesky_factor, w))


def cg_to_dg(field: CGField) -> DGField:
    """The same function written in elementwise mapped-Legendre coordinates."""
    mesh = field.mesh
    coeffs = np.array([field.local_series(e).coeffs for e in range(mesh.E)])
    return DGField(mesh, field.space.local_size, coeffs * np.sqrt(mesh.widths / 2.0)[:, None])


def sample_minimum(field: Field, points: int = MONITOR_POINTS) -> float:
    """Minimum over a fixed per-element grid (endpoints included)."""
    xi = np.linspace(-1.0, 1.0, points)
    if isinstance(field, CGField):
        field = cg_to_dg(field)
    V = orthopoly.vandermonde(xi, field.n)
    values = (field.coeffs * np.sqrt(2.0 / field.mesh.widths)[:, None]) @ V.T
    return float(np.min(values))


# -------------------------
# Constraints on elements
# -------------------------
def element_family(family: ConstraintFamily, mesh: Mesh1D, e: int, coefficient_scale: float = 1.0) -> ConstraintFamily:
    """Restrict a field-level family to element e in reference coordinates.

    The bound is a series over the whole mesh interval; derivative operators
    pick up the chain-rule factor 2/h_e.
    """
    lo, hi = mesh.element(e)
    factor = coefficient_scale
    if family.operator is Operator.POINT_DERIVATIVE:
        factor *= 2.0 / (hi - lo)
    bound = family.bound
    if bound.degree > 0:
        t_lo = (2.0 * lo - mesh.a - mesh.b) / (mesh.b - mesh.a)
        t_hi = (2.0 * hi - mesh.a - mesh.b) / (mesh.b - mesh.a)
        bound = orthopoly.affine_restrict(bound, t_lo, t_hi)
    return family.scaled(factor, bound=bound)


def _certified(gap: LegendreSeries) -> bool:
    # g >= g_0 psi_0 - sum |g_j| max|psi_j| everywhere on [-1, 1]
    coeffs = gap.coeffs
    bound = orthopoly.normalization(coeffs.size)
    return coeffs[0] * bound[0] - np.sum(np.abs(coeffs[1:]) * bound[1:]) >= 0.0


def _violates(gap: LegendreSeries) -> bool:
    if _certified(gap):
        return False
    candidates = [-1.0, 1.0]
    try:
        candidates.extend(orthopoly.comrade_roots(orthopoly.derivative(gap)))
    except DegenerateSeries:
        pass
    return bool(np.min(orthopoly.eval(gap, np.asarray(candidates))) < 0.0)


def _element_violates(local: np.ndarray, families: Sequence[ConstraintFamily]) -> bool:
    return any(_violates(family.gap(local)) for family in families)


def flag_elements(field: Field, families: Sequence[ConstraintFamily]) -> Set[int]:
    """Elements where some family is violated at some point.

    Exact: extrema of each gap polynomial are its endpoints and the real roots
    of its derivative. A coefficient-magnitude certificate skips elements that
    are feasible everywhere without root-finding.
    """
    flagged = set()
    for e in range(field.mesh.E):
        local = [element_family(family, field.mesh, e) for family in families]
        if _element_violates(field.local_series(e).coeffs, local):
            flagged.add(e)
    return flagged


# -------------------------
# Filtering
# -------------------------
def _dg_equalities(n: int, preserve_boundaries: bool, preserve_mass: bool) -> List[np.ndarray]:
    vectors = []
    if preserve_boundaries:
        vectors.extend(orthopoly.vandermonde([-1.0, 1.0], n))
    if preserve_mass:
        vectors.append(np.eye(n)[0])
    return vectors


def _filter_dg_element(
    coeffs: np.ndarray,
    families: Sequence[ConstraintFamily],
    options: FilterOptions,
) -> Tuple[np.ndarray, FilterReport]:
    """Filter one element in reference coordinates.

    Only the two trace equalities may be released. The mean is never
    released: an element whose preserved mean is infeasible raises.
    """
    n = coeffs.size
    boundaries, mass = options.preserve_boundaries, options.preserve_element_mass
    released = 0
    while True:
        vectors = _dg_equalities(n, boundaries, mass)
        try:
            if not vectors:
                out, report = greedy_project(coeffs, families, options.config)
            else:
                out, report = project_with_equalities(coeffs, families, build_equality_set(vectors), options.config)
            report.equalities_released = released
            return out, report
        except (Infeasible, RankDeficient):
            if not (options.release_infeasible_equalities and boundaries):
                raise
            boundaries, released = False, released + 2
            logger.warning("released element traces", extra={"released": released, "mass_kept": mass})


def filter_field(
    field: Field,
    families: Sequence[ConstraintFamily],
    options: Optional[FilterOptions] = None,
    flagged: Optional[Set[int]] = None,
) -> Tuple[Field, FilterReport]:
    """Project a field onto the constraint families.

    DG: per flagged element, with optional boundary-value and element-mass
    equalities; other elements are untouched. CG: one global projection in
    orthonormal coordinates, optionally preserving total or elementwise mass.
    """
    options = options or FilterOptions()
    if isinstance(field, CGField):
        return _filter_cg(field, families, options, flagged)

    if flagged is None:
        flagged = flag_elements(field, families)
    out = field.copy()
    report = FilterReport()
    if not flagged:
        return out, report

    widths = field.mesh.widths

    def work(e: int):
        # reference coordinates, so the tolerance bounds the physical violation
        local = [element_family(family, field.mesh, e) for family in families]
        try:
            coeffs, element_report = _filter_dg_element(field.local_series(e).coeffs, local, options)
        except NotConverged as exc:
            partial = field.copy()
            partial.coeffs[e] = exc.coeffs * np.sqrt(widths[e] / 2.0)
            raise NotConverged(f"element {e}: {exc}", coeffs=partial, report=exc.report) from exc
        return e, (coeffs * np.sqrt(widths[e] / 2.0), element_report)

    elements = sorted(flagged)
    if options.workers > 1:
        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(work, elements))
    else:
        results = [work(e) for e in elements]
    for e, (coeffs, element_report) in results:
        out.coeffs[e] = coeffs
        report = report.merge(element_report)
    report.elements_filtered = len(elements)
    return out, report


def _filter_cg(
    field: CGField,
    families: Sequence[ConstraintFamily],
    options: FilterOptions,
    flagged: Optional[Set[int]],
) -> Tuple[CGField, FilterReport]:
    if options.preserve_boundaries:
        raise ValueError("element boundary value preservation only applies to DG fields")
    if flagged is None:
        flagged = flag_elements(field, families)
    if not flagged:
        return field.copy(), FilterReport()

    space = field.space
    w = to_orthonormal(field)
    vectors = []
    inverse_t = space.inverse_factor.T
    if options.preserve_total_mass:
        vectors.append(inverse_t @ space.mass_functional())
    if options.preserve_element_mass:
        vectors.extend(space.element_mass_functionals() @ space.inverse_factor)

    maps = [space.element_map(e) for e in range(space.mesh.E)]
    # distances are measured in w; divide by the largest ||B_e|| so the
    # reference-coordinate violation stays within the configured tolerance
    stretch = max(np.linalg.norm(B, 2) for B in maps)
    config = options.config.model_copy(update={"tolerance": options.config.tolerance / max(stretch, 1.0)})
    if vectors:
        equalities = build_equality_set(vectors)
        fixed, basis = equalities.fixed_part(w), equalities.P
    else:
        fixed, basis = np.zeros_like(w), np.eye(w.size)
    views = [
        ConstraintView(element_family(family, space.mesh, e), space.local_size,
                       basis=B @ basis, offset=B @ fixed, label=f"{family.label}@{e}")
        for family in families
        for e, B in enumerate(maps)
    ]
    try:
        z, report = project_views(basis.T @ w, views, config)
    except NotConverged as exc:
        raise NotConverged(str(exc), coeffs=from_orthonormal(fixed + basis @ exc.coeffs, space),
                           report=exc.report) from exc
    w_out = fixed + basis @ z
    report.elements_filtered = len({label.rsplit("@", 1)[1] for label in report.constraint_activations})
    return from_orthonormal(w_out, space), report


# -------------------------
# Snapshots
# -------------------------
def write_field_csv(field: Field, path: str) -> None:
    """Flat dump: one row per element with its breaks and Legendre coefficients."""
    dg = cg_to_dg(field) if isinstance(field, CGField) else field
    frame = pd.DataFrame(dg.coeffs, columns=[f"c{k}" for k in range(dg.n)])
    frame.insert(0, "x_right", dg.mesh.breaks[1:])
    frame.insert(0, "x_left", dg.mesh.breaks[:-1])
    frame.insert(0, "element", np.arange(dg.mesh.E))
    frame.to_csv(path, index=False, float_format="%.17g")


def read_field_csv(path: str) -> DGField:
    frame = pd.read_csv(path)
    breaks = np.append(frame["x_left"].to_numpy(), frame["x_right"].to_numpy()[-1])
    coeffs = frame[[c for c in frame.columns if c.startswith("c")]].to_numpy()
    return DGField(Mesh1D(breaks), coeffs.shape[1], coeffs)
