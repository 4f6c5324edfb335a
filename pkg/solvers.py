"""1D test problems with a post-timestep filter hook.

DG advection: upwind flux, Heun (RK2) time stepping, identity mass matrix in
orthonormal coordinates. CG diffusion-reaction: Crank-Nicolson on diffusion,
second-order Adams-Bashforth on reaction + forcing (Euler on the first step),
Dirichlet data imposed strongly by lifting.
"""

import os
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from tqdm import tqdm

import orthopoly
from constraint import ConstraintFamily, positivity
from discretization import (
    CGField,
    CGSpace,
    DGField,
    Field,
    FilterOptions,
    Mesh1D,
    filter_field,
    flag_elements,
    project_function,
    sample_minimum,
    write_field_csv,
)
from errors import SingularOperator, StructFiltError
from logs import logger
from structure_filter import FilterConfig, FilterReport

# -------------------------
# Problem settings
# -------------------------
DOMAIN = (-1.0, 1.0)
SINE_OFFSET = 0.5
HAT_HALF_WIDTH = 0.5
FILTER_VARIANTS = ("off", "P", "PF", "PFI")


@dataclass(frozen=True)
class AdvectionProblem:
    speed: float
    initial: Callable[[np.ndarray], np.ndarray]
    name: str = "advection"
    domain: Tuple[float, float] = DOMAIN

    def exact(self, x, t: float) -> np.ndarray:
        lo, hi = self.domain
        shifted = lo + np.mod(np.asarray(x, dtype=float) - self.speed * t - lo, hi - lo)
        return self.initial(shifted)


@dataclass(frozen=True)
class DiffusionReactionProblem:
    gamma: float
    reaction: Callable[[np.ndarray], np.ndarray]
    exact: Callable[[np.ndarray, float], np.ndarray]
    forcing: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    dirichlet: bool = True
    name: str = "diffusion-reaction"
    domain: Tuple[float, float] = DOMAIN

    def boundary(self, t: float) -> np.ndarray:
        return np.asarray(self.exact(np.asarray(self.domain), t), dtype=float)


@dataclass
class StepReport:
    step: int
    filtered_elements: int = 0
    filter_time: float = 0.0
    solver_time: float = 0.0
    iterations: int = 0
    min_value: Optional[float] = None
    equalities_released: int = 0


def sine_advection(speed: float = 1.0, offset: float = SINE_OFFSET) -> AdvectionProblem:
    def initial(x):
        return 0.5 * np.sin(2.0 * np.pi * x - 0.5 * np.pi) + offset

    return AdvectionProblem(speed, initial, name="advection-sine")


def hat_advection(speed: float = 1.0, half_width: float = HAT_HALF_WIDTH) -> AdvectionProblem:
    """Periodic triangular hat of height 1 centred at 0, zero outside |x| < half_width."""

    def initial(x):
        return np.maximum(0.0, 1.0 - np.abs(x) / half_width)

    return AdvectionProblem(speed, initial, name="advection-hat")


def tanh_front(gamma: float = 1.0, mu: float = 1.0, eps: float = 25.0, c: float = 20.0) -> DiffusionReactionProblem:
    """u = exp(-gamma t)(tanh(eps(x + 0.4) - c t) + 1) with r(u) = mu u (1 - u^2).

    The forcing f = u_t - gamma u_xx - r(u) makes u an exact solution.
    """

    def reaction(u):
        return mu * u * (1.0 - u * u)

    def exact(x, t):
        return np.exp(-gamma * t) * (np.tanh(eps * (np.asarray(x) + 0.4) - c * t) + 1.0)

    def forcing(x, t):
        decay = np.exp(-gamma * t)
        th = np.tanh(eps * (np.asarray(x) + 0.4) - c * t)
        sech2 = 1.0 - th * th
        u = decay * (th + 1.0)
        u_t = -gamma * u - c * decay * sech2
        u_xx = -2.0 * eps * eps * decay * th * sech2
        return u_t - gamma * u_xx - reaction(u)

    return DiffusionReactionProblem(gamma, reaction, exact, forcing, name="cg-diffusion-reaction")


def heat_problem(gamma: float = 1.0) -> DiffusionReactionProblem:
    def exact(x, t):
        return np.exp(-gamma * np.pi ** 2 * t) * np.sin(np.pi * np.asarray(x))

    return DiffusionReactionProblem(gamma, np.zeros_like, exact, name="heat")


# -------------------------
# DG advection
# -------------------------
@lru_cache(maxsize=32)
def _advection_matrices(n: int):
    rule = orthopoly.gauss_legendre(n)
    V = orthopoly.vandermonde(rule.nodes, n)
    D = orthopoly.derivative_vandermonde(rule.nodes, n)
    S = V.T @ (rule.weights[:, None] * D)  # S[j, k] = int psi_j psi_k'
    left, right = orthopoly.vandermonde([-1.0, 1.0], n)
    return S, left, right


def dg_advection_rhs(coeffs: np.ndarray, widths: np.ndarray, a: float) -> np.ndarray:
    n = coeffs.shape[1]
    S, left, right = _advection_matrices(n)
    root = np.sqrt(2.0 / widths)[:, None]
    right_trace = (root * coeffs) @ right
    left_trace = (root * coeffs) @ left
    if a >= 0.0:
        flux_right = a * right_trace
        flux_left = a * np.roll(right_trace, 1)
    else:
        flux_right = a * np.roll(left_trace, -1)
        flux_left = a * left_trace
    volume = a * (2.0 / widths)[:, None] * (coeffs @ S)
    return volume - root * flux_right[:, None] * right + root * flux_left[:, None] * left


def dg_advection_step(field: DGField, a: float, dt: float) -> DGField:
    """One Heun step of the periodic upwind DG semi-discretization."""
    widths = field.mesh.widths
    k1 = dg_advection_rhs(field.coeffs, widths, a)
    k2 = dg_advection_rhs(field.coeffs + dt * k1, widths, a)
    return DGField(field.mesh, field.n, field.coeffs + 0.5 * dt * (k1 + k2))


# -------------------------
# CG diffusion-reaction
# -------------------------
@dataclass
class CNAB2Operator:
    A: np.ndarray
    B: np.ndarray
    factor: tuple
    interior: np.ndarray
    boundary: np.ndarray


def build_cnab2_operator(space: CGSpace, gamma: float, dt: float, dirichlet: bool = True) -> CNAB2Operator:
    """A = M - gamma dt L / 2 and the Cholesky factor of B = M + gamma dt L / 2."""
    A = space.mass_matrix - 0.5 * gamma * dt * space.stiffness_matrix
    B = space.mass_matrix + 0.5 * gamma * dt * space.stiffness_matrix
    boundary = space.boundary_dofs() if dirichlet else np.empty(0, dtype=int)
    interior = np.setdiff1d(np.arange(space.size), boundary)
    try:
        factor = linalg.cho_factor(B[np.ix_(interior, interior)])
    except linalg.LinAlgError as exc:
        raise SingularOperator(f"CNAB-2 operator not factorable (gamma={gamma}, dt={dt})") from exc
    return CNAB2Operator(A, B, factor, interior, boundary)


def explicit_load(
    field: CGField,
    reaction: Callable[[np.ndarray], np.ndarray],
    forcing: Optional[Callable[[np.ndarray, float], np.ndarray]],
    t: float,
) -> np.ndarray:
    """Load vector b_i = integral of (r(u) + f(., t)) phi_i."""
    space = field.space
    rule = orthopoly.gauss_legendre(2 * space.degree + 2)
    phi = space.basis_values(rule.nodes)  # (p + 1, nq)
    widths = space.mesh.widths
    u = (field.coeffs[space.dofs] @ space.local_basis) @ orthopoly.vandermonde(rule.nodes, space.local_size).T
    values = reaction(u)
    if forcing is not None:
        x = 0.5 * (space.mesh.breaks[:-1] + space.mesh.breaks[1:])[:, None] + 0.5 * widths[:, None] * rule.nodes
        values = values + forcing(x, t)
    contributions = 0.5 * widths[:, None] * ((values * rule.weights) @ phi.T)
    load = np.zeros(space.size)
    np.add.at(load, space.dofs, contributions)
    return load


def cg_cnab2_step(
    field: CGField,
    prev_load: Optional[np.ndarray],
    gamma: float,
    dt: float,
    load: np.ndarray,
    operator: Optional[CNAB2Operator] = None,
    boundary: Optional[np.ndarray] = None,
) -> CGField:
    """B v^{n+1} = A v^n + dt (3/2 N^n - 1/2 N^{n-1}); N^{-1} absent means Euler."""
    if operator is None:
        operator = build_cnab2_operator(field.space, gamma, dt, dirichlet=boundary is not None)
    explicit = load if prev_load is None else 1.5 * load - 0.5 * prev_load
    rhs = operator.A @ field.coeffs + dt * explicit
    coeffs = np.zeros_like(rhs)
    if operator.boundary.size:
        values = np.zeros(operator.boundary.size) if boundary is None else np.asarray(boundary, dtype=float)
        coeffs[operator.boundary] = values
        rhs = rhs - operator.B[:, operator.boundary] @ values
    coeffs[operator.interior] = linalg.cho_solve(operator.factor, rhs[operator.interior])
    return CGField(field.space, coeffs)


# -------------------------
# Time loop
# -------------------------
def filter_variant(name: str, config: Optional[FilterConfig] = None, workers: int = 1) -> Optional[FilterOptions]:
    """The four solution variants: off, positivity, + boundaries, + element mass."""
    if name not in FILTER_VARIANTS:
        raise ValueError(f"unknown filter variant {name!r}, expected one of {FILTER_VARIANTS}")
    if name == "off":
        return None
    return FilterOptions(
        preserve_boundaries=name in ("PF", "PFI"),
        preserve_element_mass=name == "PFI",
        workers=workers,
        config=config or FilterConfig(),
    )


def _apply_filter(field: Field, families, options: Optional[FilterOptions]) -> Tuple[Field, FilterReport, float]:
    if options is None:
        return field, FilterReport(), 0.0
    start = time.perf_counter()
    flagged = flag_elements(field, families)
    field, report = filter_field(field, families, options, flagged=flagged)
    return field, report, time.perf_counter() - start


def run_simulation(
    problem,
    mesh: Mesh1D,
    degree: int,
    dt: float,
    T: float,
    filter_options: Optional[FilterOptions] = None,
    families: Optional[Sequence[ConstraintFamily]] = None,
    monitor: bool = True,
    snapshot_dir: Optional[str] = None,
    snapshot_every: int = 0,
    progress: bool = False,
) -> Tuple[Field, List[StepReport]]:
    """Advance ``problem`` to T, filtering after every completed step.

    Step 0 reports the (filtered) projection of the initial condition.
    """
    families = list(families) if families is not None else [positivity()]
    nsteps = int(round(T / dt))
    logger.info(
        "simulation start",
        extra={"problem": problem.name, "elements": mesh.E, "degree": degree, "steps": nsteps,
               "filtered": filter_options is not None},
    )

    if isinstance(problem, AdvectionProblem):
        field = project_function(problem.initial, DGField.zeros(mesh, degree + 1))

        def advance(state, step):
            return dg_advection_step(state, problem.speed, dt)

    else:
        space = CGSpace(mesh, degree)
        field = project_function(lambda x: problem.exact(x, 0.0), space)
        if problem.dirichlet:
            field.coeffs[space.boundary_dofs()] = problem.boundary(0.0)
        operator = build_cnab2_operator(space, problem.gamma, dt, dirichlet=problem.dirichlet)
        history = {"load": None}

        def advance(state, step):
            load = explicit_load(state, problem.reaction, problem.forcing, step * dt)
            boundary = problem.boundary((step + 1) * dt) if problem.dirichlet else None
            new = cg_cnab2_step(state, history["load"], problem.gamma, dt, load, operator, boundary)
            history["load"] = load
            return new

    reports = []
    step = 0
    try:
        field, report, filter_time = _apply_filter(field, families, filter_options)
        reports.append(_step_report(0, report, filter_time, 0.0, field, monitor))
        for step in tqdm(range(1, nsteps + 1), disable=not progress, desc=problem.name):
            start = time.perf_counter()
            field = advance(field, step - 1)
            solver_time = time.perf_counter() - start
            field, report, filter_time = _apply_filter(field, families, filter_options)
            reports.append(_step_report(step, report, filter_time, solver_time, field, monitor))
            if snapshot_dir and snapshot_every and step % snapshot_every == 0:
                write_field_csv(field, os.path.join(snapshot_dir, f"{problem.name}_step{step:07d}.csv"))
    except StructFiltError as exc:
        exc.step = step
        logger.warning("simulation failed", extra={"problem": problem.name, "step": step, "error": str(exc)})
        raise

    logger.info("simulation done", extra={"problem": problem.name, "steps": nsteps})
    return field, reports


def _step_report(step: int, report: FilterReport, filter_time: float, solver_time: float, field: Field, monitor: bool) -> StepReport:
    return StepReport(
        step=step,
        filtered_elements=report.elements_filtered,
        filter_time=filter_time,
        solver_time=solver_time,
        iterations=report.iterations,
        min_value=sample_minimum(field) if monitor else None,
        equalities_released=report.equalities_released,
    )
