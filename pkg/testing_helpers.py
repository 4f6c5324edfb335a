"""
Shared pieces for the test scripts: a run tracker, a runner for the
module-level test_* functions, and brute-force oracles.
"""

import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

import orthopoly
from constraint import ConstraintFamily

SEED = 20240521
GRID_POINTS = 100001
ORACLE_GRID = 2000
ORACLE_ROUNDS = 6


@dataclass
class TestRun:
    """Outcome and timing of each test in one script."""

    __test__ = False

    title: str
    outcomes: List[Tuple[str, float, Optional[str]]] = field(default_factory=list)

    def record(self, name: str, seconds: float, error: Optional[str] = None) -> None:
        self.outcomes.append((name, seconds, error))
        mark = "✅" if error is None else "❌"
        print(f"{mark} {name} ({seconds:.2f}s)")
        if error:
            print(f"   {error}")

    @property
    def failed(self) -> List[str]:
        return [name for name, _, error in self.outcomes if error is not None]

    def summary(self) -> bool:
        total = sum(seconds for _, seconds, _ in self.outcomes)
        print(f"\n{self.title}: {len(self.outcomes) - len(self.failed)}/{len(self.outcomes)} passed in {total:.1f}s")
        for name in self.failed:
            print(f"❌ {name}")
        return not self.failed


def run_module_tests(namespace: Dict, title: str) -> bool:
    """Run every callable named test_* in ``namespace`` in definition order."""
    print(f"🧪 {title}")
    run = TestRun(title)
    for name, test in list(namespace.items()):
        if not (name.startswith("test_") and callable(test)):
            continue
        start = time.perf_counter()
        try:
            test()
            run.record(name, time.perf_counter() - start)
        except Exception as e:
            run.record(name, time.perf_counter() - start, f"{type(e).__name__}: {e}")
            traceback.print_exc()
    return run.summary()


def rng(offset: int = 0) -> np.random.Generator:
    return np.random.default_rng(SEED + offset)


def grid_minimum(series: orthopoly.LegendreSeries, points: int = GRID_POINTS) -> float:
    return float(np.min(orthopoly.eval(series, np.linspace(-1.0, 1.0, points))))


def refined_minima(
    family: ConstraintFamily, coeffs: np.ndarray, points: int = GRID_POINTS, count: int = 8
) -> List[Tuple[float, float]]:
    """(x, s) at the smallest grid minima of s, each refined by bounded Brent."""
    coeffs = np.asarray(coeffs, dtype=float)
    gap = family.gap(coeffs)

    def s(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return orthopoly.eval(gap, x) / np.linalg.norm(family.rows(x, coeffs.size), axis=1)

    x = np.linspace(-1.0, 1.0, points)
    values = s(x)
    interior = np.nonzero((values[1:-1] <= values[:-2]) & (values[1:-1] <= values[2:]))[0] + 1
    candidates = np.concatenate([[0, points - 1], interior])
    minima = [(float(x[i]), float(values[i])) for i in candidates]
    for i in candidates[np.argsort(values[candidates])[:count]]:
        lo, hi = x[max(i - 1, 0)], x[min(i + 1, points - 1)]
        result = optimize.minimize_scalar(lambda t: float(s(t)[0]), bounds=(lo, hi), method="bounded",
                                          options={"xatol": 1e-14})
        minima.append((float(result.x), float(result.fun)))
    return sorted(minima, key=lambda item: item[1])[:count]


def grid_signed_distance_minimum(family: ConstraintFamily, coeffs: np.ndarray, points: int = GRID_POINTS) -> float:
    return refined_minima(family, coeffs, points)[0][1]


def brute_force_projection(
    coeffs: np.ndarray,
    families: Sequence[ConstraintFamily],
    equalities: Optional[np.ndarray] = None,
    points: int = ORACLE_GRID,
    rounds: int = ORACLE_ROUNDS,
) -> np.ndarray:
    """Nearest vector satisfying every family (SLSQP on a point set).

    The point set starts as a uniform grid; each round adds the refined
    minima of the current answer so touching points are enforced exactly.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    sites = [np.linspace(-1.0, 1.0, points) for _ in families]
    result = coeffs
    for _ in range(rounds):
        A = np.vstack([f.sense.sign * f.rows(x, coeffs.size) for f, x in zip(families, sites)])
        b = np.concatenate([f.sense.sign * orthopoly.eval(f.bound, x) for f, x in zip(families, sites)])
        constraints = [{"type": "ineq", "fun": lambda v, A=A, b=b: A @ v - b, "jac": lambda v, A=A: A}]
        if equalities is not None:
            E = np.atleast_2d(equalities)
            target = E @ coeffs
            constraints.append({"type": "eq", "fun": lambda v: E @ v - target, "jac": lambda v: E})
        result = optimize.minimize(
            lambda v: 0.5 * np.sum((v - coeffs) ** 2),
            result,
            jac=lambda v: v - coeffs,
            constraints=constraints,
            method="SLSQP",
            options={"ftol": 1e-16, "maxiter": 1000},
        ).x
        added = False
        for index, family in enumerate(families):
            new = [x for x, value in refined_minima(family, result, 20001, count=4) if value < 0.0]
            if new:
                sites[index] = np.append(sites[index], new)
                added = True
        if not added:
            break
    return result


def assert_close(actual, expected, atol: float, label: str = ""):
    actual, expected = np.asarray(actual, dtype=float), np.asarray(expected, dtype=float)
    error = float(np.max(np.abs(actual - expected))) if actual.size else 0.0
    assert error <= atol, f"{label} differs by {error:.3e} (atol {atol:.1e})"


def dense_violations(values_by_element: Callable[[int], np.ndarray], elements: int, tolerance: float = 0.0) -> set:
    return {e for e in range(elements) if np.min(values_by_element(e)) < -tolerance}
