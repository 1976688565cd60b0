import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from lbkernel.mesh import TriangleMesh, disjoint_union, topology_summary
from lbkernel.spectral import (
    AssemblyError,
    SolverError,
    assemble_cotan,
    fourier_coefficients,
    load_basis,
    reconstruction_error,
    save_basis,
    solve_eigen,
    spectral_basis,
)
from lbkernel.synthetic import icosahedron, sphere, torus, unit_sphere

from conftest import random_rotation


def _jittered_sphere(seed, level=1, amount=0.15):
    m = unit_sphere(level)
    rng = np.random.default_rng(seed)
    r = 1.0 + amount * rng.uniform(-1, 1, m.n_vertices)
    return m.transformed(m.vertices * r[:, None])


# --------------------------------------------------------------------------
# assembly

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_stiffness_symmetric_rows_sum_to_zero(seed, level):
    fem = assemble_cotan(_jittered_sphere(seed, level))
    C = fem.stiffness
    assert abs(C - C.T).max() < 1e-14
    assert np.abs(np.asarray(C.sum(axis=1))).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_lumped_mass_conserves_area(seed, scale):
    m = _jittered_sphere(seed)
    m = m.transformed(scale * m.vertices)
    a = assemble_cotan(m).mass_diagonal
    assert np.all(a > 0)
    assert a.sum() == pytest.approx(topology_summary(m).total_area, rel=1e-10)


def test_unit_edge_icosahedron_cotan_weights():
    # every face is equilateral, so both angles opposite an edge are 60 degrees:
    # C_ij = -(cot 60 + cot 60) / 2 = -1 / sqrt(3)
    m = icosahedron(edge=1.0)
    e = m.edges()
    assert np.allclose(np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1), 1.0)
    C = assemble_cotan(m).stiffness.toarray()
    w = C[e[:, 0], e[:, 1]]
    assert len(w) == 30
    np.testing.assert_allclose(w, -1 / math.sqrt(3), rtol=1e-12)
    # five neighbours each
    np.testing.assert_allclose(np.diag(C), 5 / math.sqrt(3), rtol=1e-12)


def test_obtuse_triangles_keep_negative_weights():
    # a flat rhombus split along its long diagonal: both angles opposite that
    # diagonal are obtuse, so its cotan weight flips sign
    v = [(0, 0, 0), (2, -0.3, 0), (4, 0, 0), (2, 0.3, 0)]
    C = assemble_cotan(TriangleMesh.from_arrays(v, [(0, 1, 2), (0, 2, 3)])).stiffness.toarray()
    # opposite angle at (2, -0.3): cot = dot / |cross| = (0.09 - 4) / 1.2
    cot = (0.09 - 4) / 1.2
    assert C[0, 2] == pytest.approx(-(cot + cot) / 2, rel=1e-12)
    assert C[0, 2] > 0


def test_zero_area_face_is_named():
    v = [(0, 0, 0), (1, 0, 0), (2, 0, 0), (0, 1, 0)]
    with pytest.raises(AssemblyError, match="face 1"):
        assemble_cotan(TriangleMesh.from_arrays(v, [(0, 1, 3), (1, 0, 2)]))


def test_isolated_vertex_rejected():
    v = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (5, 5, 5)]
    with pytest.raises(AssemblyError, match="vertex 3"):
        assemble_cotan(TriangleMesh.from_arrays(v, [(0, 1, 2)]))


# --------------------------------------------------------------------------
# eigenproblem

def test_sphere_level4_low_spectrum():
    b = spectral_basis(unit_sphere(4), 17)
    assert abs(b.eigenvalues[0]) < 1e-8
    exact = np.array([2] * 3 + [6] * 5 + [12] * 7, dtype=float)
    np.testing.assert_allclose(b.eigenvalues[1:16], exact, rtol=0.02)
    assert b.eigenvalues[16] == pytest.approx(20.0, rel=0.02)


def test_two_components_have_two_zero_modes(two_spheres):
    b = solve_eigen(assemble_cotan(two_spheres), 4)
    assert b.n_zero() == 2
    assert b.eigenvalues[2] > 0.1


def test_first_mode_is_constant(sphere3_basis, sphere3):
    area = topology_summary(sphere3).total_area
    np.testing.assert_allclose(sphere3_basis.eigenfunctions[:, 0], 1 / math.sqrt(area), atol=1e-6)


def test_constant_per_component(two_spheres_full, two_spheres):
    # the zero eigenspace is spanned by the component indicators
    z = two_spheres_full.eigenfunctions[:, :2]
    ind = np.column_stack([two_spheres.component_of == c for c in range(2)]).astype(float)
    coef, *_ = np.linalg.lstsq(ind, z, rcond=None)
    np.testing.assert_allclose(ind @ coef, z, atol=1e-10)


@pytest.mark.parametrize("which", ["dense", "sparse"])
def test_basis_invariants(which, sphere2_full, sphere3_basis):
    b = sphere2_full if which == "dense" else sphere3_basis
    psi, a, lam = b.eigenfunctions, b.mass, b.eigenvalues
    G = psi.T @ (a[:, None] * psi)
    np.testing.assert_allclose(G, np.eye(b.k), atol=1e-8)
    assert np.all(np.diff(lam) >= 0)
    for j in range(b.k):
        col = psi[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        assert col[nz[0]] > 0


def test_residuals_bounded(sphere3, sphere3_basis):
    fem = assemble_cotan(sphere3)
    psi, lam = sphere3_basis.eigenfunctions, sphere3_basis.eigenvalues
    a = fem.mass_diagonal
    r = np.linalg.norm(fem.stiffness @ psi - (a[:, None] * psi) * lam, axis=0)
    assert np.all(r <= 1e-8 * np.linalg.norm(a[:, None] * psi, axis=0))


def test_dense_generalized_oracle(sphere2):
    fem = assemble_cotan(sphere2)
    oracle = scipy.linalg.eigh(fem.stiffness.toarray(), fem.mass.toarray(), eigvals_only=True)
    b = solve_eigen(fem, 60)
    np.testing.assert_allclose(b.eigenvalues[1:], oracle[1:60], rtol=1e-6)
    assert abs(b.eigenvalues[0]) < 1e-10


def test_sparse_path_matches_dense_oracle(sphere3):
    fem = assemble_cotan(sphere3)
    oracle = scipy.linalg.eigh(fem.stiffness.toarray(), fem.mass.toarray(), eigvals_only=True)
    b = solve_eigen(fem, 40)   # 3k < n: Lanczos path
    np.testing.assert_allclose(b.eigenvalues[1:], oracle[1:40], rtol=1e-8)


def test_argument_errors(sphere2):
    fem = assemble_cotan(sphere2)
    for k in (0, sphere2.n_vertices + 1):
        with pytest.raises(ValueError, match="k must be"):
            solve_eigen(fem, k)
    with pytest.raises(ValueError, match="tol"):
        solve_eigen(fem, 5, tol=0.0)


def test_unreachable_tolerance_reports_residuals(sphere2):
    with pytest.raises(SolverError) as info:
        solve_eigen(assemble_cotan(sphere2), 10, tol=1e-300)
    assert info.value.residuals is not None and len(info.value.residuals) == 10


def test_lanczos_budget_exhausted(sphere3):
    with pytest.raises(SolverError, match="did not converge"):
        solve_eigen(assemble_cotan(sphere3), 60, maxiter=1)


def test_spectral_basis_caps_k(ico):
    assert spectral_basis(ico, 500).k == 12


def test_solve_is_deterministic(sphere3):
    fem = assemble_cotan(sphere3)
    b1, b2 = solve_eigen(fem, 30), solve_eigen(fem, 30)
    assert b1.eigenfunctions.tobytes() == b2.eigenfunctions.tobytes()
    assert b1.eigenvalues.tobytes() == b2.eigenvalues.tobytes()


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_eigenvalues_rigid_invariant_and_scale(seed, s):
    m = _jittered_sphere(seed, level=2, amount=0.1)
    lam = spectral_basis(m, 20).eigenvalues
    R = random_rotation(np.random.default_rng(seed))
    moved = m.transformed(m.vertices @ R.T + np.array([3.0, -1.0, 7.0]))
    np.testing.assert_allclose(spectral_basis(moved, 20).eigenvalues[1:], lam[1:], rtol=1e-6)
    scaled = m.transformed(s * m.vertices)
    np.testing.assert_allclose(spectral_basis(scaled, 20).eigenvalues[1:], lam[1:] / s**2, rtol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.floats(0.5, 3.0)), min_size=1, max_size=3))
def test_zero_multiplicity_equals_components(parts):
    m = disjoint_union(*(sphere(L, r, center=(10.0 * i, 0, 0)) for i, (L, r) in enumerate(parts)))
    b = spectral_basis(m, min(len(parts) + 3, m.n_vertices))
    assert b.n_zero() == m.n_components == len(parts)


def test_torus_single_zero_mode():
    b = spectral_basis(torus(30, 15), 10)
    assert b.n_zero() == 1


# --------------------------------------------------------------------------
# Fourier coefficients and reconstruction

def test_coefficients_of_eigenfunction(sphere3_basis):
    for m in (0, 5, 77):
        beta = fourier_coefficients(sphere3_basis.eigenfunctions[:, m], sphere3_basis)
        expect = np.zeros(sphere3_basis.k)
        expect[m] = 1.0
        np.testing.assert_allclose(beta, expect, atol=1e-8)


def test_coefficients_of_constant(sphere3_basis, sphere3):
    area = topology_summary(sphere3).total_area
    beta = fourier_coefficients(np.full(sphere3.n_vertices, 2.5), sphere3_basis)
    assert beta[0] == pytest.approx(2.5 * math.sqrt(area), rel=1e-12)
    assert np.abs(beta[1:]).max() < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_coefficients_linear_combination(sphere3_basis, a, b):
    psi = sphere3_basis.eigenfunctions
    beta = fourier_coefficients(a * psi[:, 1] + b * psi[:, 2], sphere3_basis)
    assert beta[1] == pytest.approx(a, abs=1e-8)
    assert beta[2] == pytest.approx(b, abs=1e-8)


def test_coefficients_dimension_mismatch(sphere3_basis):
    with pytest.raises(ValueError, match="shape"):
        fourier_coefficients(np.ones(5), sphere3_basis)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parseval_at_full_basis(sphere2_full, seed):
    f = np.random.default_rng(seed).standard_normal(sphere2_full.n)
    beta = fourier_coefficients(f, sphere2_full)
    assert np.sum(beta**2) == pytest.approx(f @ (sphere2_full.mass * f), rel=1e-8)


def test_full_basis_reconstruction(sphere2_full):
    f = np.random.default_rng(0).standard_normal(sphere2_full.n)
    err = reconstruction_error(f, sphere2_full)
    assert err.relative and err.error < 1e-8


def test_in_span_reconstruction(sphere3_basis):
    assert reconstruction_error(sphere3_basis.eigenfunctions[:, 0], sphere3_basis).error < 1e-8


def test_projection_error_decreases_with_k(sphere3, sphere3_basis):
    x, y, z = sphere3.vertices.T
    f = np.exp(x) + y * z
    e100 = reconstruction_error(f, sphere3_basis.truncated(100)).error
    e10 = reconstruction_error(f, sphere3_basis.truncated(10)).error
    assert e100 < e10


def test_zero_field_gives_absolute_error(sphere3_basis):
    err = reconstruction_error(np.zeros(sphere3_basis.n), sphere3_basis)
    assert err == (0.0, False)


def test_truncation_bounds(sphere3_basis):
    with pytest.raises(ValueError):
        sphere3_basis.truncated(0)
    with pytest.raises(ValueError):
        sphere3_basis.truncated(sphere3_basis.k + 1)


# --------------------------------------------------------------------------
# container

def test_basis_round_trip_is_byte_identical(tmp_path, sphere3_basis):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_basis(sphere3_basis, p1)
    back = load_basis(p1)
    save_basis(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(back.eigenfunctions, sphere3_basis.eigenfunctions)
    np.testing.assert_array_equal(back.mass, sphere3_basis.mass)
    raw = p1.read_bytes()
    assert raw[:4] == b"LBSB"
    assert len(raw) == 24 + 8 * (120 + 642 * 120 + 642)


def test_container_rejects_bad_files(tmp_path, sphere2_full):
    p = tmp_path / "b.bin"
    save_basis(sphere2_full, p)
    raw = p.read_bytes()
    for bad, msg in [(b"XXXX" + raw[4:], "not a spectral basis"),
                     (raw[:-8], "bytes, expected"),
                     (raw[:10], "too short"),
                     (raw[:4] + (2).to_bytes(4, "little") + raw[8:], "version")]:
        p.write_bytes(bad)
        with pytest.raises(ValueError, match=msg):
            load_basis(p)
