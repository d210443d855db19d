import numpy as np
import pytest

from ternarych.mesh import (
    ConfigurationError,
    build_uniform_periodic_mesh,
    p1_gradient,
    p1_gradients_all,
)

from conftest import unwrapped_vertex_coords, vertex_formula_gradient


def test_two_by_two_counts_and_areas():
    mesh = build_uniform_periodic_mesh(1.0, 2)
    assert mesh.n_nodes == 4
    assert mesh.n_elements == 8
    np.testing.assert_allclose(mesh.element_areas, 0.125)


def test_fine_mesh_spacing_and_patch_areas():
    mesh = build_uniform_periodic_mesh(1.0, 256)
    assert mesh.h == pytest.approx(1.0 / 256, rel=1e-15)
    np.testing.assert_allclose(mesh.patch_areas, 3.0 / 256**2, rtol=1e-12)


def test_large_domain_spacing():
    mesh = build_uniform_periodic_mesh(64.0, 256)
    assert mesh.h == pytest.approx(0.25, rel=1e-15)


@pytest.mark.parametrize("L,n", [(1.0, 1), (1.0, 0), (1.0, -3), (0.0, 4), (-2.0, 8)])
def test_rejects_bad_configuration(L, n):
    with pytest.raises(ConfigurationError):
        build_uniform_periodic_mesh(L, n)


@pytest.mark.parametrize("L,n", [(1.0, 2), (1.0, 7), (64.0, 12), (0.5, 9)])
def test_total_area_and_positivity(L, n):
    mesh = build_uniform_periodic_mesh(L, n)
    assert np.all(mesh.element_areas > 0)
    assert mesh.element_areas.sum() == pytest.approx(L * L, rel=1e-12)


def test_every_node_in_six_elements(mesh8):
    counts = np.bincount(mesh8.elements.ravel(), minlength=mesh8.n_nodes)
    assert np.all(counts == 6)


def test_shape_regularity_is_four(mesh8):
    assert mesh8.shape_regularity() == pytest.approx(4.0, rel=1e-12)


def test_patch_consistency(mesh8):
    assert mesh8.patch_areas.sum() == pytest.approx(
        3.0 * mesh8.element_areas.sum(), rel=1e-12
    )


def test_lumped_mass_sums_to_domain_area():
    mesh = build_uniform_periodic_mesh(3.0, 5)
    assert mesh.lumped_mass.sum() == pytest.approx(9.0, rel=1e-12)


def test_gradient_of_constant_is_zero(mesh8):
    values = np.full(mesh8.n_nodes, 3.7)
    for e in (0, 5, mesh8.n_elements - 1):
        np.testing.assert_allclose(p1_gradient(mesh8, values, e), 0.0, atol=1e-14)


def test_gradient_of_x_field_away_from_seam(mesh8):
    # The nodal x-coordinate field is affine on every element that does not
    # wrap around the periodic seam.
    values = mesh8.nodes[:, 0].copy()
    n = mesh8.n
    for cell in range(n * n):
        i, j = cell % n, cell // n
        if i == n - 1 or j == n - 1:
            continue
        for e in (cell, n * n + cell):
            np.testing.assert_allclose(
                p1_gradient(mesh8, values, e), [1.0, 0.0], atol=1e-13
            )


def test_gradient_affine_reproduction_per_element(mesh8):
    # Vertex data affine in the element's unwrapped coordinates is
    # reproduced exactly, seam elements included.
    rng = np.random.default_rng(7)
    values = np.zeros(mesh8.n_nodes)
    for e in rng.choice(mesh8.n_elements, size=20, replace=False):
        a, b, c = rng.standard_normal(3)
        coords = unwrapped_vertex_coords(mesh8, e)
        values[mesh8.elements[e]] = a + b * coords[:, 0] + c * coords[:, 1]
        np.testing.assert_allclose(p1_gradient(mesh8, values, e), [b, c], atol=1e-13)


def test_gradient_matches_vertex_formula(mesh8):
    rng = np.random.default_rng(11)
    values = rng.standard_normal(mesh8.n_nodes)
    for e in rng.choice(mesh8.n_elements, size=32, replace=False):
        coords = unwrapped_vertex_coords(mesh8, e)
        expected = vertex_formula_gradient(coords, values[mesh8.elements[e]])
        np.testing.assert_allclose(p1_gradient(mesh8, values, e), expected, atol=1e-14)


def test_gradients_translation_equivariance(mesh8):
    # Shifting the nodal field by one lattice period in x permutes the
    # per-element gradients by the same shift.
    rng = np.random.default_rng(3)
    values = rng.standard_normal(mesh8.n_nodes)
    n = mesh8.n
    shifted = values.reshape(n, n)[:, np.roll(np.arange(n), -1)].ravel()
    g = p1_gradients_all(mesh8, values)
    gs = p1_gradients_all(mesh8, shifted)
    cell = np.arange(n * n)
    i, j = cell % n, cell // n
    cell_shift = j * n + (i + 1) % n
    perm = np.concatenate([cell_shift, n * n + cell_shift])
    np.testing.assert_allclose(gs, g[perm], atol=1e-13)


def test_full_period_translation_is_identity(mesh8):
    rng = np.random.default_rng(5)
    values = rng.standard_normal(mesh8.n_nodes)
    n = mesh8.n
    rolled = values.reshape(n, n)[:, np.roll(np.arange(n), n)].ravel()
    np.testing.assert_array_equal(
        p1_gradients_all(mesh8, rolled), p1_gradients_all(mesh8, values)
    )


def test_gradient_rejects_wrong_length(mesh8):
    with pytest.raises(ValueError):
        p1_gradient(mesh8, np.zeros(mesh8.n_nodes + 1), 0)


def test_mesh_arrays_are_readonly(mesh8):
    with pytest.raises(ValueError):
        mesh8.nodes[0, 0] = 99.0
