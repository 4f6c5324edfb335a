"""Structure-preserving filter: projection onto the feasible set by an exchange method.

Each iteration finds the most violated point constraint over all families
(global minimum of the signed distance) and adds its supporting hyperplane to
a working set. The next iterate is the exact projection of the input onto the
polyhedron cut out by the working set, a least-distance problem solved with
Lawson-Hanson NNLS. With one hyperplane this is the plain greedy hyperplane
step; with more, earlier cuts stay active, so the iterates converge to the
nearest feasible point and not just to some feasible point.

Linear equality constraints are removed up front by splitting coordinates
into a fixed part Q Q^T v and a free part P z, so the inequality problem is
solved in the (n - K)-dimensional complement and every equality holds
exactly by construction.
"""

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, optimize

from constraint import ConstraintFamily, ConstraintView, SignedDistanceSample
from errors import Infeasible, NotConverged, RankDeficient
from logs import logger

# -------------------------
# Filter settings
# -------------------------
DEFAULT_TOLERANCE = 1e-10
DEFAULT_MAX_ITERATIONS = 10000
STALL_WINDOW = 50
RANK_TOLERANCE = 1e-12
# |r_{n+1}| of the NNLS residual below this means the cuts have no common point
LEAST_DISTANCE_TOLERANCE = 1e-12


class FilterConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    tolerance: float = Field(default=DEFAULT_TOLERANCE, gt=0.0)
    max_iterations: int = Field(default=DEFAULT_MAX_ITERATIONS, ge=1)
    relaxation: float = Field(default=1.0, gt=0.0, le=2.0)
    stall_window: int = Field(default=STALL_WINDOW, ge=1)


@dataclass
class FilterReport:
    iterations: int = 0
    converged: bool = True
    final_min_distance: float = float("inf")
    wall_time: float = 0.0
    constraint_activations: Dict[str, int] = field(default_factory=dict)
    elements_filtered: int = 0
    equalities_released: int = 0

    def merge(self, other: "FilterReport") -> "FilterReport":
        activations = Counter(self.constraint_activations)
        activations.update(other.constraint_activations)
        return FilterReport(
            iterations=self.iterations + other.iterations,
            converged=self.converged and other.converged,
            final_min_distance=min(self.final_min_distance, other.final_min_distance),
            wall_time=self.wall_time + other.wall_time,
            constraint_activations=dict(activations),
            elements_filtered=self.elements_filtered + other.elements_filtered,
            equalities_released=self.equalities_released + other.equalities_released,
        )


@dataclass
class EqualityConstraintSet:
    vectors: np.ndarray  # (K, n)
    Q: np.ndarray  # (n, K), orthonormal columns spanning the vectors
    P: np.ndarray  # (n, n - K), orthonormal completion

    @property
    def count(self) -> int:
        return self.Q.shape[1]

    def fixed_part(self, coeffs: np.ndarray) -> np.ndarray:
        return self.Q @ (self.Q.T @ coeffs)


def _worst(views: Sequence[ConstraintView], z: np.ndarray, tolerance: float) -> Tuple[SignedDistanceSample, int]:
    # ties: smallest s, then lower family index, then smaller x
    best, best_index = None, -1
    for index, view in enumerate(views):
        sample = view.minimize(z, tolerance=tolerance)
        if best is None or sample.value < best.value:
            best, best_index = sample, index
    return SignedDistanceSample(best.x, best.value, best_index), best_index


def least_distance(G: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Shortest w with G w >= g.

    Lawson-Hanson: with E = [G^T; g^T] and f = e_{n+1}, the NNLS residual
    r = E u - f gives w = -r[:n] / r[n]; r[n] = 0 means no w exists.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    g = np.asarray(g, dtype=float)
    n = G.shape[1]
    E = np.vstack([G.T, g[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = optimize.nnls(E, f)
    r = E @ u - f
    if -r[-1] <= LEAST_DISTANCE_TOLERANCE:
        raise Infeasible(f"{G.shape[0]} supporting hyperplanes have no common feasible point")
    return -r[:n] / r[-1]


def project_views(
    z0: np.ndarray,
    views: Sequence[ConstraintView],
    config: Optional[FilterConfig] = None,
) -> Tuple[np.ndarray, FilterReport]:
    """Nearest point to z0 in the intersection of the views' feasible sets."""
    config = config or FilterConfig()
    start = time.perf_counter()
    z0 = np.array(z0, dtype=float)
    z = z0.copy()
    normals: List[np.ndarray] = []
    targets: List[float] = []
    activations: Counter = Counter()
    best_value, best_z, stalled = -np.inf, z.copy(), 0

    def report(iterations: int, converged: bool, value: float) -> FilterReport:
        return FilterReport(
            iterations=iterations,
            converged=converged,
            final_min_distance=value,
            wall_time=time.perf_counter() - start,
            constraint_activations=dict(activations),
        )

    for iteration in range(config.max_iterations + 1):
        sample, index = _worst(views, z, config.tolerance)
        if sample.value >= -config.tolerance:
            return z, report(iteration, True, sample.value)
        if sample.value > best_value:
            best_value, best_z, stalled = sample.value, z.copy(), 0
        else:
            stalled += 1
            if stalled >= config.stall_window:
                logger.warning(
                    "filter stalled",
                    extra={"iterations": iteration, "min_distance": sample.value},
                )
                raise Infeasible(
                    f"no progress in {stalled} iterations (min signed distance {best_value:.3e})",
                    report=report(iteration, False, sample.value),
                )
        if iteration == config.max_iterations:
            break

        view = views[index]
        normals.append(view.unit_normal(sample.x))
        # s is affine in z with gradient equal to the unit normal
        targets.append(-view.signed_distance(z0, sample.x))
        activations[view.label] += 1
        try:
            w = least_distance(np.array(normals), np.array(targets))
        except Infeasible as exc:
            logger.warning("filter cuts are inconsistent", extra={"iterations": iteration + 1, "cuts": len(normals)})
            raise Infeasible(str(exc), report=report(iteration + 1, False, sample.value)) from exc
        z = z + config.relaxation * (z0 + w - z)
        logger.debug(
            "filter step",
            extra={"iteration": iteration, "x": sample.x, "s": sample.value, "label": view.label},
        )

    logger.warning("filter hit iteration cap", extra={"max_iterations": config.max_iterations})
    raise NotConverged(
        f"filter did not converge in {config.max_iterations} iterations (min signed distance {best_value:.3e})",
        coeffs=best_z,
        report=report(config.max_iterations, False, best_value),
    )


def greedy_project(
    coeffs: np.ndarray,
    families: Sequence[ConstraintFamily],
    config: Optional[FilterConfig] = None,
) -> Tuple[np.ndarray, FilterReport]:
    if not families:
        raise ValueError("greedy_project needs at least one constraint family")
    coeffs = np.asarray(coeffs, dtype=float)
    views = [ConstraintView(family, coeffs.size) for family in families]
    return project_views(coeffs, views, config)


def build_equality_set(vectors: Sequence[np.ndarray]) -> EqualityConstraintSet:
    """Orthonormal basis Q of the equality vectors and its completion P."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    count, size = vectors.shape
    if count > size:
        raise RankDeficient(f"{count} equality vectors in dimension {size}")
    full, r = linalg.qr(vectors.T, mode="full")
    diagonal = np.abs(np.diag(r[:count, :count]))
    scale = max(np.max(np.linalg.norm(vectors, axis=1)), np.finfo(float).tiny)
    if np.any(diagonal <= RANK_TOLERANCE * scale):
        raise RankDeficient(
            f"equality vectors are dependent (smallest pivot {np.min(diagonal):.3e})"
        )
    return EqualityConstraintSet(vectors=vectors, Q=full[:, :count], P=full[:, count:])


def project_with_equalities(
    coeffs: np.ndarray,
    families: Sequence[ConstraintFamily],
    equalities: EqualityConstraintSet,
    config: Optional[FilterConfig] = None,
) -> Tuple[np.ndarray, FilterReport]:
    """Projection restricted to {v : <q_k, v> = <q_k, coeffs>}."""
    config = config or FilterConfig()
    coeffs = np.asarray(coeffs, dtype=float)
    fixed = equalities.fixed_part(coeffs)
    n = coeffs.size

    if equalities.P.shape[1] == 0:
        # the equalities determine every coefficient; only feasibility is left to check
        views = [ConstraintView(family, n) for family in families]
        sample, index = _worst(views, coeffs, config.tolerance)
        if sample.value < -config.tolerance:
            raise Infeasible(
                f"equalities pin an infeasible state ({views[index].label} at x={sample.x:.6g})",
                report=FilterReport(converged=False, final_min_distance=sample.value),
            )
        return coeffs.copy(), FilterReport(final_min_distance=sample.value)

    views = [ConstraintView(family, n, basis=equalities.P, offset=fixed) for family in families]
    try:
        z, report = project_views(equalities.P.T @ coeffs, views, config)
    except NotConverged as exc:
        raise NotConverged(str(exc), coeffs=fixed + equalities.P @ exc.coeffs, report=exc.report) from exc
    return fixed + equalities.P @ z, report
