#!/usr/bin/env python3
"""Tests for meshes, DG/CG fields, flagging and field-level filtering."""

import os
import tempfile

import numpy as np

import orthopoly
from constraint import ConstraintView, positivity
from discretization import (
    CGField,
    CGSpace,
    DGField,
    FilterOptions,
    Mesh1D,
    cg_to_dg,
    element_boundary_values,
    element_family,
    element_mass,
    filter_field,
    flag_elements,
    from_orthonormal,
    project_function,
    read_field_csv,
    sample_minimum,
    to_orthonormal,
    total_mass,
    write_field_csv,
)
from errors import Infeasible, NotConverged
from structure_filter import FilterConfig, build_equality_set, project_views
from testing_helpers import assert_close, rng, run_module_tests

UNIT = Mesh1D.uniform(-1.0, 1.0, 1)


def quadrature_norm(field, nodes: int = 12) -> float:
    rule = orthopoly.gauss_legendre(nodes)
    total = 0.0
    for e, h in enumerate(field.mesh.widths):
        values = field.evaluate(field.mesh.to_physical(e, rule.nodes))
        total += 0.5 * h * rule.integrate(values ** 2)
    return float(np.sqrt(total))


def dense_values(field: DGField, e: int, points: int = 10001) -> np.ndarray:
    xi = np.linspace(-1.0, 1.0, points)
    return orthopoly.vandermonde(xi, field.n) @ field.local_series(e).coeffs


def feasible_dg_field(mesh: Mesh1D, n: int, generator, with_mass: bool) -> DGField:
    """u = 1 plus a perturbation that keeps element traces (and means)."""
    vectors = [*orthopoly.vandermonde([-1.0, 1.0], n)] + ([np.eye(n)[0]] if with_mass else [])
    P = build_equality_set(vectors).P
    coeffs = np.zeros((mesh.E, n))
    for e, h in enumerate(mesh.widths):
        local = np.zeros(n)
        local[0] = np.sqrt(2.0)
        local += P @ (3.0 * generator.standard_normal(P.shape[1]))
        coeffs[e] = local * np.sqrt(h / 2.0)
    return DGField(mesh, n, coeffs)


def test_mesh_rejects_bad_breaks():
    for breaks in ([0.0], [0.0, 1.0, 1.0], [1.0, 0.0]):
        try:
            Mesh1D(np.array(breaks))
        except ValueError:
            continue
        raise AssertionError(f"accepted breaks {breaks}")


def test_mesh_maps_and_locate():
    mesh = Mesh1D(np.array([0.0, 0.5, 2.0]))
    assert mesh.E == 2 and mesh.a == 0.0 and mesh.b == 2.0
    assert_close(mesh.to_physical(1, [-1.0, 1.0]), [0.5, 2.0], 0.0, "to_physical")
    assert_close(mesh.to_reference(1, [0.5, 1.25, 2.0]), [-1.0, 0.0, 1.0], 1e-15, "to_reference")
    assert list(mesh.locate([0.0, 0.49, 0.5, 2.0])) == [0, 0, 1, 1]


def test_project_constant_dg():
    mesh = Mesh1D(np.array([-1.0, -0.2, 0.5, 1.0]))
    field = project_function(lambda x: np.ones_like(x), DGField.zeros(mesh, 4))
    assert_close(field.coeffs[:, 0], np.sqrt(mesh.widths / 2.0), 1e-14, "c0")
    assert_close(field.coeffs[:, 1:], np.zeros((3, 3)), 1e-14, "higher modes")
    assert abs(np.sum(field.coeffs ** 2) - 2.0) < 1e-13


def test_project_identity_dg():
    field = project_function(lambda x: x, DGField.zeros(UNIT, 2))
    assert_close(field.coeffs[0], [0.0, 0.816496580927726], 1e-14, "u = x")


def test_project_reproduces_mapped_basis():
    mesh = Mesh1D.uniform(0.0, 3.0, 3)
    h = mesh.widths[1]
    psi = lambda x: np.sqrt(2.0 / h) * orthopoly.vandermonde(mesh.to_reference(1, x), 3)[:, 1] * (mesh.locate(x) == 1)
    field = project_function(psi, DGField.zeros(mesh, 3))
    expected = np.zeros((3, 3))
    expected[1, 1] = 1.0
    assert_close(field.coeffs, expected, 1e-13, "psi_{1,1}")


def test_boundary_values_and_mass():
    assert_close(element_boundary_values(project_function(np.ones_like, DGField.zeros(UNIT, 3)), 0), [1, 1], 1e-14, "1")
    assert_close(element_boundary_values(project_function(lambda x: x, DGField.zeros(UNIT, 2)), 0), [-1, 1], 1e-14, "x")
    mesh = Mesh1D(np.array([0.0, 0.3, 1.0]))
    constant = project_function(np.ones_like, DGField.zeros(mesh, 3))
    assert abs(element_mass(constant, 1) - 0.7) < 1e-14
    odd = project_function(lambda x: x - 0.15, DGField.zeros(mesh, 3))
    assert abs(element_mass(odd, 0)) < 1e-14


def test_mass_matches_quadrature():
    generator = rng(30)
    mesh = Mesh1D(np.array([-1.0, -0.4, 0.1, 1.0]))
    field = DGField(mesh, 5, generator.standard_normal((3, 5)))
    rule = orthopoly.gauss_legendre(6)
    for e, h in enumerate(mesh.widths):
        quadrature = 0.5 * h * rule.integrate(field.evaluate(mesh.to_physical(e, rule.nodes)))
        assert abs(element_mass(field, e) - quadrature) < 1e-12
        left, right = element_boundary_values(field, e)
        assert abs(left - orthopoly.eval(field.local_series(e), -1.0)) < 1e-13
        assert abs(right - orthopoly.eval(field.local_series(e), 1.0)) < 1e-13
    assert abs(total_mass(field) - sum(element_mass(field, e) for e in range(3))) < 1e-13


def test_dg_norm_is_coefficient_norm():
    generator = rng(31)
    mesh = Mesh1D(np.array([-1.0, -0.4, 0.1, 1.0]))
    field = DGField(mesh, 4, generator.standard_normal((3, 4)))
    assert abs(quadrature_norm(field) - np.linalg.norm(field.coeffs)) < 1e-12


def test_cg_space_matrices():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 4), 3)
    assert space.size == 13
    assert_close(space.mass_matrix, space.mass_matrix.T, 1e-15, "M symmetric")
    assert_close(space.cholesky_factor.T @ space.cholesky_factor, space.mass_matrix, 1e-13, "M = R^T R")
    # constants have zero energy and unit hats sum to one
    ones = np.zeros(space.size)
    ones[: space.mesh.E + 1] = 1.0
    assert_close(space.stiffness_matrix @ ones, np.zeros(space.size), 1e-12, "L 1 = 0")
    assert abs(space.mass_functional() @ ones - 2.0) < 1e-13
    assert_close(space.element_mass_functionals() @ ones, space.mesh.widths, 1e-13, "element masses")


def test_cg_projection_is_continuous_and_exact():
    space = CGSpace(Mesh1D(np.array([-1.0, -0.3, 0.2, 1.0])), 3)
    field = project_function(lambda x: x ** 3 - 2 * x + 0.5, space)
    x = np.linspace(-1, 1, 41)
    assert_close(field.evaluate(x), x ** 3 - 2 * x + 0.5, 1e-12, "cubic reproduced")
    for e in range(space.mesh.E - 1):
        left = orthopoly.eval(field.local_series(e), 1.0)
        right = orthopoly.eval(field.local_series(e + 1), -1.0)
        assert abs(left - right) < 1e-12
    assert abs(field.coeffs[0] - (-1 + 2 + 0.5)) < 1e-12


def test_orthonormal_coordinates():
    generator = rng(32)
    space = CGSpace(Mesh1D(np.array([-1.0, -0.3, 0.2, 1.0])), 4)
    field = CGField(space, generator.standard_normal(space.size))
    w = to_orthonormal(field)
    assert abs(np.linalg.norm(w) - quadrature_norm(field)) < 1e-11
    assert_close(from_orthonormal(w, space).coeffs, field.coeffs, 1e-12, "round trip")
    assert_close(to_orthonormal(CGField(space, np.zeros(space.size))), np.zeros(space.size), 0.0, "zero")
    for e in range(space.mesh.E):
        local = space.element_map(e) @ w
        assert_close(local, field.local_series(e).coeffs, 1e-12, f"element map {e}")


def test_cg_to_dg_preserves_function():
    generator = rng(33)
    space = CGSpace(Mesh1D.uniform(0.0, 1.0, 3), 2)
    field = CGField(space, generator.standard_normal(space.size))
    dg = cg_to_dg(field)
    x = np.linspace(0.0, 1.0, 31)
    assert_close(dg.evaluate(x), field.evaluate(x), 1e-12, "values")
    assert abs(total_mass(dg) - total_mass(field)) < 1e-12


def test_flag_elements_examples():
    mesh = Mesh1D(np.array([-0.5, 0.5, 1.0, 1.5]))
    assert flag_elements(project_function(np.ones_like, DGField.zeros(mesh, 3)), [positivity()]) == set()
    assert flag_elements(project_function(lambda x: x, DGField.zeros(mesh, 2)), [positivity()]) == {0}


def test_flag_elements_match_dense_grid():
    generator = rng(34)
    mesh = Mesh1D.uniform(-1.0, 1.0, 40)
    field = DGField(mesh, 6, generator.standard_normal((40, 6)) * np.array([1.5, 1, 0.5, 0.3, 0.2, 0.1]) * 0.3)
    flagged = flag_elements(field, [positivity()])
    for e in range(mesh.E):
        minimum = float(np.min(dense_values(field, e)))
        if minimum < 0.0:
            assert e in flagged, f"element {e} violates ({minimum:.3e}) but was not flagged"
        elif e in flagged:
            assert minimum < 1e-6, f"element {e} flagged with grid minimum {minimum:.3e}"
    assert 0 < len(flagged) < mesh.E


def test_flag_elements_cg():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 4), 2)
    field = project_function(lambda x: x ** 2 - 0.05, space)
    assert flag_elements(field, [positivity()]) == {1, 2}


def test_filter_feasible_field_unchanged():
    field = project_function(lambda x: 1.0 + 0.5 * np.sin(3 * x), DGField.zeros(Mesh1D.uniform(-1.0, 1.0, 5), 4))
    out, report = filter_field(field, [positivity()])
    assert_close(out.coeffs, field.coeffs, 0.0, "unchanged")
    assert report.elements_filtered == 0 and report.iterations == 0


def test_filter_single_element_identity():
    out, report = filter_field(project_function(lambda x: x, DGField.zeros(UNIT, 2)), [positivity()])
    assert_close(out.coeffs[0], [0.3535533905932738, 0.2041241452319315], 1e-12, "(x+1)/4")
    assert report.elements_filtered == 1


def test_filter_touches_only_violating_element():
    mesh = Mesh1D(np.array([-0.5, 0.5, 1.0, 1.5]))
    field = project_function(lambda x: x, DGField.zeros(mesh, 3))
    out, report = filter_field(field, [positivity()])
    assert report.elements_filtered == 1
    assert_close(out.coeffs[1:], field.coeffs[1:], 0.0, "untouched blocks")
    assert np.min(dense_values(out, 0)) >= -1e-9


def test_dg_filter_matches_monolithic_projection():
    generator = rng(35)
    mesh = Mesh1D(np.array([-1.0, -0.2, 0.3, 1.0]))
    n = 4
    field = DGField(mesh, n, generator.standard_normal((3, n)))
    config = FilterConfig(tolerance=1e-13)
    out, _ = filter_field(field, [positivity()], FilterOptions(config=config))

    views = []
    for e, h in enumerate(mesh.widths):
        select = np.zeros((n, 3 * n))
        select[:, e * n:(e + 1) * n] = np.sqrt(2.0 / h) * np.eye(n)
        views.append(ConstraintView(element_family(positivity(), mesh, e), n, basis=select, label=f"block{e}"))
    monolithic, _ = project_views(field.coeffs.ravel(), views, config)
    assert_close(out.coeffs.ravel(), monolithic, 1e-6, "decoupled vs monolithic")


def test_filter_preserves_boundary_values():
    generator = rng(36)
    mesh = Mesh1D.uniform(-1.0, 1.0, 6)
    for case in range(20):
        n = 4 + case % 5
        field = feasible_dg_field(mesh, n, generator, with_mass=False)
        options = FilterOptions(preserve_boundaries=True, release_infeasible_equalities=False)
        out, report = filter_field(field, [positivity()], options)
        for e in range(mesh.E):
            assert_close(element_boundary_values(out, e), element_boundary_values(field, e), 1e-10, "traces")
            assert np.min(dense_values(out, e)) >= -1e-9
        assert report.equalities_released == 0


def test_filter_preserves_boundaries_and_mass():
    generator = rng(37)
    mesh = Mesh1D.uniform(0.0, 1.0, 4)
    for case in range(20):
        n = 4 + case % 5
        field = feasible_dg_field(mesh, n, generator, with_mass=True)
        options = FilterOptions(preserve_boundaries=True, preserve_element_mass=True,
                                release_infeasible_equalities=False, workers=2)
        out, _ = filter_field(field, [positivity()], options)
        for e in range(mesh.E):
            assert_close(element_boundary_values(out, e), element_boundary_values(field, e), 1e-10, "traces")
            assert abs(element_mass(out, e) - element_mass(field, e)) < 1e-10
            assert np.min(dense_values(out, e)) >= -1e-9


def test_release_policy_drops_boundaries_first():
    field = project_function(lambda x: x, DGField.zeros(UNIT, 2))
    strict = FilterOptions(preserve_boundaries=True, release_infeasible_equalities=False)
    try:
        filter_field(field, [positivity()], strict)
        raise AssertionError("negative preserved trace accepted")
    except Infeasible:
        pass

    out, report = filter_field(field, [positivity()], FilterOptions(preserve_boundaries=True))
    assert report.equalities_released == 2
    assert_close(out.coeffs[0], [0.3535533905932738, 0.2041241452319315], 1e-12, "(x+1)/4 after release")

    out, report = filter_field(field, [positivity()], FilterOptions(preserve_boundaries=True, preserve_element_mass=True))
    assert report.equalities_released == 2
    assert_close(out.coeffs[0], [0.0, 0.0], 1e-12, "mass-preserving zero")


def test_release_policy_never_drops_mass():
    field = project_function(lambda x: x - 1.5, DGField.zeros(UNIT, 2))
    for options in (FilterOptions(preserve_element_mass=True),
                    FilterOptions(preserve_boundaries=True, preserve_element_mass=True)):
        try:
            filter_field(field, [positivity()], options)
        except Infeasible:
            continue
        raise AssertionError("negative preserved mean accepted")


def test_mean_within_tolerance_is_feasible():
    field = DGField(UNIT, 2, np.array([[-1e-14, 0.3]]))
    out, report = filter_field(field, [positivity()], FilterOptions(preserve_element_mass=True))
    assert abs(element_mass(out, 0) - element_mass(field, 0)) < 1e-20
    assert abs(out.coeffs[0, 1]) < 1e-12
    assert report.equalities_released == 0


def test_dg_iteration_cap_carries_whole_field():
    mesh = Mesh1D.uniform(-1.0, 1.0, 3)
    coeffs = np.zeros((3, 6))
    coeffs[:, 0] = 1.0
    coeffs[1, 5] = 2.0
    field = DGField(mesh, 6, coeffs)
    options = FilterOptions(preserve_element_mass=True, config=FilterConfig(max_iterations=1))
    try:
        filter_field(field, [positivity()], options)
    except NotConverged as exc:
        assert isinstance(exc.coeffs, DGField)
        assert_close(exc.coeffs.coeffs[[0, 2]], coeffs[[0, 2]], 0.0, "untouched elements")
        assert abs(element_mass(exc.coeffs, 1) - element_mass(field, 1)) < 1e-12
        return
    raise AssertionError("iteration cap did not raise NotConverged")


def test_cg_iteration_cap_carries_field():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 4), 2)
    field = project_function(lambda x: x ** 2 - 0.05, space)
    options = FilterOptions(preserve_total_mass=True, config=FilterConfig(max_iterations=1))
    try:
        filter_field(field, [positivity()], options)
    except NotConverged as exc:
        assert isinstance(exc.coeffs, CGField)
        assert abs(total_mass(exc.coeffs) - total_mass(field)) < 1e-12
        return
    raise AssertionError("iteration cap did not raise NotConverged")


def test_cg_filter_total_mass():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 4), 2)
    field = project_function(lambda x: x ** 2 - 0.05, space)
    out, report = filter_field(field, [positivity()], FilterOptions(preserve_total_mass=True))
    assert abs(total_mass(out) - total_mass(field)) < 1e-10
    assert sample_minimum(out, 2001) >= -1e-9
    assert report.elements_filtered >= 1


def test_cg_filter_element_mass():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 2), 2)
    field = project_function(lambda x: x ** 2 - 0.05, space)
    out, _ = filter_field(field, [positivity()], FilterOptions(preserve_element_mass=True))
    assert_close(space.element_mass_functionals() @ out.coeffs,
                 space.element_mass_functionals() @ field.coeffs, 1e-10, "element masses")
    assert sample_minimum(out, 2001) >= -1e-9


def test_cg_filter_rejects_boundary_preservation():
    space = CGSpace(Mesh1D.uniform(-1.0, 1.0, 2), 2)
    field = project_function(lambda x: x ** 2 - 0.05, space)
    try:
        filter_field(field, [positivity()], FilterOptions(preserve_boundaries=True))
    except ValueError:
        return
    raise AssertionError("CG boundary preservation accepted")


def test_sample_minimum():
    field = project_function(lambda x: x, DGField.zeros(Mesh1D.uniform(-1.0, 1.0, 2), 2))
    assert abs(sample_minimum(field) + 1.0) < 1e-14


def test_field_csv_round_trip():
    generator = rng(38)
    field = DGField(Mesh1D(np.array([0.0, 0.25, 1.0])), 3, generator.standard_normal((2, 3)))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "field.csv")
        write_field_csv(field, path)
        loaded = read_field_csv(path)
    assert_close(loaded.mesh.breaks, field.mesh.breaks, 0.0, "breaks")
    assert_close(loaded.coeffs, field.coeffs, 0.0, "coefficients")


if __name__ == "__main__":
    import sys

    sys.exit(0 if run_module_tests(dict(globals()), "discretization tests") else 1)
