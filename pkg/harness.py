"""Convergence sweeps, filter cost accounting and CSV artifacts.

One sweep point = one run_simulation call at a given element count (h-sweep)
or polynomial degree (p-sweep), followed by a quadrature L2 error against the
exact solution at the final time. The property suite runs the filter alone on
seeded random inputs.
"""

import configparser
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field as PydanticField, field_validator, model_validator
from tqdm import tqdm

import orthopoly
from constraint import bounds, positivity
from discretization import CGField, Field, Mesh1D, cg_to_dg
from errors import ConfigError, StructFiltError
from logs import logger
from solvers import (
    AdvectionProblem,
    StepReport,
    filter_variant,
    hat_advection,
    heat_problem,
    run_simulation,
    sine_advection,
    tanh_front,
)
from structure_filter import FilterConfig, greedy_project

# -------------------------
# Harness settings
# -------------------------
CFL_SAFETY = 0.1
DIFFUSION_DT = 1e-4
CSV_COLUMNS = [
    "sweep_value",
    "dof",
    "l2_error",
    "observed_order",
    "avg_flagged",
    "filter_time_fraction",
    "iterations_total",
    "status",
]
PROPERTY_CASES = 100
PROPERTY_GRID = 2001
PROPERTY_SLACK = 1e-9
PROPERTY_COLUMNS = ["case", "n", "iterations", "min_gap", "distance", "norm_growth", "idempotence", "status"]

PROBLEMS: Dict[str, Callable] = {
    "advection-sine": sine_advection,
    "advection-hat": hat_advection,
    "cg-diffusion-reaction": tanh_front,
    "heat": heat_problem,
}
DG_PROBLEMS = ("advection-sine", "advection-hat")


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    problem: Literal["advection-sine", "advection-hat", "cg-diffusion-reaction", "heat"] = "advection-sine"
    sweep: Literal["h", "p"] = "h"
    values: List[int] = PydanticField(default_factory=lambda: [4, 8, 16, 32])
    degree: int = PydanticField(default=3, ge=1)
    elements: int = PydanticField(default=16, ge=1)
    dt: Optional[float] = PydanticField(default=None, gt=0.0)
    tfinal: float = PydanticField(default=1.0, gt=0.0)
    filter: Literal["off", "P", "PF", "PFI"] = "off"
    constraint: Literal["positivity", "bounds"] = "positivity"
    upper: float = 1.0
    tolerance: float = PydanticField(default=1e-10, gt=0.0)
    out: str = "results"
    seed: int = 0
    deterministic: bool = False
    workers: int = PydanticField(default=1, ge=1)

    @field_validator("values", mode="before")
    @classmethod
    def _split_values(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.replace(",", " ").split()]
        return value

    @field_validator("values")
    @classmethod
    def _increasing(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one sweep value is required")
        if any(v < 1 for v in value):
            raise ValueError(f"sweep values must be positive: {value}")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"sweep values must be strictly increasing: {value}")
        return value

    @model_validator(mode="after")
    def _filter_matches_problem(self) -> "ExperimentConfig":
        if self.filter in ("PF", "PFI") and self.problem not in DG_PROBLEMS:
            raise ValueError(f"filter variant {self.filter} only applies to DG problems, not {self.problem}")
        if self.constraint == "bounds" and self.upper <= 0.0:
            raise ValueError("bounds constraint needs upper > 0")
        return self


@dataclass
class ConvergenceRow:
    sweep_value: int
    dof: int
    l2_error: float
    observed_order: float = math.nan
    avg_flagged: float = 0.0
    filter_time_fraction: float = 0.0
    iterations_total: int = 0
    status: str = "ok"


@dataclass
class TimingSummary:
    steps: int
    solver_time: float
    filter_time: float
    filter_time_fraction: float
    avg_flagged: float
    max_flagged: int
    iterations_total: int
    equalities_released: int
    min_value: Optional[float]


def report_timing(reports: Sequence[StepReport]) -> TimingSummary:
    """Aggregate filter cost over a run; step 0 (initial projection) only counts if it is alone."""
    stepped = [r for r in reports if r.step > 0] or list(reports)
    solver_time = sum(r.solver_time for r in reports)
    filter_time = sum(r.filter_time for r in reports)
    total = solver_time + filter_time
    flagged = [r.filtered_elements for r in stepped]
    minima = [r.min_value for r in reports if r.min_value is not None]
    return TimingSummary(
        steps=len(stepped),
        solver_time=solver_time,
        filter_time=filter_time,
        filter_time_fraction=filter_time / total if total > 0.0 else 0.0,
        avg_flagged=float(np.mean(flagged)) if flagged else 0.0,
        max_flagged=max(flagged, default=0),
        iterations_total=sum(r.iterations for r in reports),
        equalities_released=sum(r.equalities_released for r in reports),
        min_value=min(minima) if minima else None,
    )


def l2_error(field: Field, exact: Callable[[np.ndarray], np.ndarray], nodes: int = 0) -> float:
    """||u_h - exact||_L2 by elementwise Gauss quadrature (at least 2 * degree + 2 nodes)."""
    dg = cg_to_dg(field) if isinstance(field, CGField) else field
    rule = orthopoly.gauss_legendre(max(nodes, 2 * dg.degree + 2))
    widths = dg.mesh.widths
    values = (dg.coeffs * np.sqrt(2.0 / widths)[:, None]) @ orthopoly.vandermonde(rule.nodes, dg.n).T
    centers = 0.5 * (dg.mesh.breaks[:-1] + dg.mesh.breaks[1:])
    x = centers[:, None] + 0.5 * widths[:, None] * rule.nodes
    diff = values - np.asarray(exact(x), dtype=float)
    return float(np.sqrt(np.sum(0.5 * widths * ((diff ** 2) @ rule.weights))))


def build_problem(config: ExperimentConfig):
    return PROBLEMS[config.problem]()


def build_families(config: ExperimentConfig):
    if config.constraint == "bounds":
        return bounds(0.0, config.upper)
    return [positivity()]


def time_step(config: ExperimentConfig, problem, h: float, degree: int) -> float:
    """Configured dt, else a CFL-limited one; always rounded so it divides tfinal."""
    if config.dt is not None:
        return config.dt
    if isinstance(problem, AdvectionProblem):
        limit = CFL_SAFETY * h / (abs(problem.speed) * (2 * degree + 1))
    else:
        limit = DIFFUSION_DT
    return config.tfinal / math.ceil(config.tfinal / limit)


def run_point(config: ExperimentConfig, value: int) -> ConvergenceRow:
    """One sweep point; simulation failures become a row status instead of an exception."""
    problem = build_problem(config)
    degree, elements = (config.degree, value) if config.sweep == "h" else (value, config.elements)
    mesh = Mesh1D.uniform(*problem.domain, elements)
    dt = time_step(config, problem, float(mesh.widths[0]), degree)
    dof = elements * (degree + 1) if isinstance(problem, AdvectionProblem) else elements * degree + 1
    options = filter_variant(config.filter, FilterConfig(tolerance=config.tolerance))
    try:
        field, reports = run_simulation(problem, mesh, degree, dt, config.tfinal, options, build_families(config))
    except StructFiltError as exc:
        logger.warning("sweep point failed", extra={"sweep_value": value, "error": str(exc)})
        return ConvergenceRow(value, dof, math.nan, status=f"error: {type(exc).__name__}: {exc}")

    t_end = round(config.tfinal / dt) * dt
    timing = report_timing(reports)
    return ConvergenceRow(
        sweep_value=value,
        dof=dof,
        l2_error=l2_error(field, lambda x: problem.exact(x, t_end)),
        avg_flagged=timing.avg_flagged,
        filter_time_fraction=0.0 if config.deterministic else timing.filter_time_fraction,
        iterations_total=timing.iterations_total,
    )


def observed_orders(rows: List[ConvergenceRow], sweep: str) -> None:
    """h-sweeps: log(e0/e1)/log(h0/h1). p-sweeps: ln(e0/e1) per unit degree step."""
    for previous, row in zip(rows, rows[1:]):
        if not (previous.l2_error > 0.0 and row.l2_error > 0.0):
            continue
        ratio = math.log(previous.l2_error / row.l2_error)
        if sweep == "h":
            ratio /= math.log(row.sweep_value / previous.sweep_value)
        else:
            ratio /= row.sweep_value - previous.sweep_value
        row.observed_order = ratio


def rows_to_frame(rows: Sequence[ConvergenceRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in rows], columns=CSV_COLUMNS)


def run_experiment(config: ExperimentConfig, progress: bool = False) -> List[ConvergenceRow]:
    """Run every sweep point and write <out>/<name>.csv plus the config as JSON."""
    logger.info("experiment start", extra={"name": config.name, "problem": config.problem, "values": config.values})
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(run_point, [config] * len(config.values), config.values))
    else:
        rows = [run_point(config, value) for value in tqdm(config.values, disable=not progress, desc=config.name)]
    observed_orders(rows, config.sweep)

    os.makedirs(config.out, exist_ok=True)
    rows_to_frame(rows).to_csv(os.path.join(config.out, f"{config.name}.csv"), index=False, float_format="%.17g")
    with open(os.path.join(config.out, f"{config.name}.json"), "w") as f:
        f.write(config.model_dump_json(indent=2))
    logger.info(
        "experiment done",
        extra={"name": config.name, "failed": sum(row.status != "ok" for row in rows)},
    )
    return rows


def _property_row(case: int, coeffs: np.ndarray, families, config: FilterConfig) -> Dict:
    row = {"case": case, "n": coeffs.size, "iterations": 0, "min_gap": math.nan, "distance": math.nan,
           "norm_growth": math.nan, "idempotence": math.nan, "status": "ok"}
    try:
        out, report = greedy_project(coeffs, families, config)
        again, _ = greedy_project(out, families, config)
    except StructFiltError as exc:
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        return row
    grid = np.linspace(-1.0, 1.0, PROPERTY_GRID)
    row.update(
        iterations=report.iterations,
        min_gap=min(float(np.min(orthopoly.eval(family.gap(out), grid))) for family in families),
        distance=float(np.linalg.norm(out - coeffs)),
        # every family here admits u = 0, so the projection cannot grow the norm
        norm_growth=float(np.linalg.norm(out) - np.linalg.norm(coeffs)),
        idempotence=float(np.linalg.norm(again - out)),
    )
    failed = [
        name
        for name, bad in (
            ("feasibility", row["min_gap"] < -PROPERTY_SLACK),
            ("contraction", row["norm_growth"] > PROPERTY_SLACK),
            ("idempotence", row["idempotence"] > PROPERTY_SLACK),
        )
        if bad
    ]
    if failed:
        row["status"] = "fail: " + ", ".join(failed)
    return row


def run_property_suite(config: ExperimentConfig, cases: int = PROPERTY_CASES) -> pd.DataFrame:
    """Seeded random filter inputs of size degree + 1, checked for feasibility,
    contraction and idempotence; written to <out>/<name>_properties.csv."""
    generator = np.random.default_rng(config.seed)
    families = build_families(config)
    filter_config = FilterConfig(tolerance=config.tolerance)
    n = config.degree + 1
    rows = [_property_row(case, generator.standard_normal(n), families, filter_config) for case in range(cases)]
    frame = pd.DataFrame(rows, columns=PROPERTY_COLUMNS)
    os.makedirs(config.out, exist_ok=True)
    frame.to_csv(os.path.join(config.out, f"{config.name}_properties.csv"), index=False, float_format="%.17g")
    logger.info(
        "property suite done",
        extra={"name": config.name, "seed": config.seed, "cases": cases, "failed": int((frame["status"] != "ok").sum())},
    )
    return frame


def load_config(path: Optional[str], section: Optional[str] = None, overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Read one INI section (DEFAULT keys shared), then apply non-None overrides.

    Raises ConfigError for a missing file or section; pydantic's ValidationError
    for bad values.
    """
    values: Dict = {}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"config file not found: {path}")
        if section is None:
            section = parser.sections()[0] if parser.sections() else None
        if section is None:
            values.update(parser.defaults())
        elif not parser.has_section(section):
            raise ConfigError(f"no section [{section}] in {path}")
        else:
            values.update(parser.items(section))
            values.setdefault("name", section)
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return ExperimentConfig(**values)
