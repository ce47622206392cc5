import numpy as np
import pytest
import scipy.sparse as sp

from helmopt.geometry import EPS_AREA, Mesh, generate_rect_mesh
from helmopt.helmholtz import (
    ComplexSystem,
    DegenerateMeshError,
    Factorization,
    GaussianSource,
    HelmholtzProblem,
    OutsideDomainError,
    PressureField,
    SolverError,
    acoustic_energy,
    assemble,
    assemble_operators,
    eval_field,
    eval_source,
    export_field,
    quadrature_points,
    relative_residual,
    solve,
)

from support import convergence_slope, plane_wave, trig_poly

SRC_31 = GaussianSource((1.0, 1.0), 0.086, 1000.0)


def _room_problem(freq=100.0, beta=1.5 + 0.2j, sigma=0.25):
    return HelmholtzProblem(freq, GaussianSource((2.5, 2.5), sigma, 1000.0), beta)


def test_source_at_center():
    assert eval_source(SRC_31, (1.0, 1.0)) == 1000.0


def test_source_one_sigma_away():
    assert eval_source(SRC_31, (1.086, 1.0)) == pytest.approx(606.5306597126334, rel=1e-12)


def test_zero_amplitude_source():
    src = GaussianSource((0.0, 0.0), 1.0, 0.0)
    assert np.all(eval_source(src, np.random.default_rng(0).uniform(-3, 3, (50, 2))) == 0)


def test_problem_validation():
    with pytest.raises(ValueError):
        GaussianSource((0, 0), 0.0, 1.0)
    with pytest.raises(ValueError):
        HelmholtzProblem(0.0, SRC_31, 1.0)
    with pytest.raises(ValueError):
        HelmholtzProblem(100.0, SRC_31, 1.0, sound_speed=-1.0)
    with pytest.raises(ValueError):
        HelmholtzProblem(100.0, SRC_31, complex(np.inf, 0))


def test_wavenumber():
    k = HelmholtzProblem(1000.0, SRC_31, 1.5 + 0.3j).wavenumber
    assert k == 2 * np.pi * 1000.0 / 343.0
    assert k == pytest.approx(18.318324510727656, rel=1e-14)


def test_reference_triangle_stiffness():
    m = Mesh.from_triangles(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    S = assemble_operators(m).stiffness.toarray()
    np.testing.assert_allclose(S, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_mass_and_boundary_totals():
    m = generate_rect_mesh(2.0, 3.0, 4, 5)
    ops = assemble_operators(m)
    assert ops.mass.sum() == pytest.approx(6.0, rel=1e-13)
    assert ops.boundary_mass.sum() == pytest.approx(10.0, rel=1e-13)


def test_stiffness_annihilates_constants():
    m = generate_rect_mesh(1.0, 1.0, 6, 6)
    S = assemble_operators(m).stiffness
    np.testing.assert_allclose(S @ np.ones(len(m.vertices)), 0.0, atol=1e-12)


def test_zero_admittance_gives_real_matrix():
    m = generate_rect_mesh(2.0, 2.0, 6, 6)
    system = assemble(m, HelmholtzProblem(500.0, SRC_31, 0.0))
    assert np.all(system.matrix.imag.toarray() == 0)


def test_complex_symmetry():
    m = generate_rect_mesh(2.0, 2.0, 8, 8)
    K = assemble(m, HelmholtzProblem(1000.0, SRC_31, 1.5 + 0.3j)).matrix
    assert abs(K - K.T).max() <= 1e-14
    # complex symmetric, not Hermitian
    assert abs(K - K.conj().T).max() > 1e-3


def test_admittance_linearity():
    m = generate_rect_mesh(2.0, 2.0, 8, 8)
    p1 = HelmholtzProblem(700.0, SRC_31, 1.0 + 0.1j)
    p2 = p1.with_admittance(2.5 - 0.4j)
    ops = assemble_operators(m)
    diff = (assemble(m, p2, ops).matrix - assemble(m, p1, ops).matrix).toarray()
    expect = (1j * p1.wavenumber * (1.5 - 0.5j) * ops.boundary_mass).toarray()
    scale = np.abs(expect).max()
    assert np.abs(diff - expect).max() <= 1e-14 * scale


def test_degenerate_triangle_is_reported():
    m = generate_rect_mesh(1.0, 1.0, 2, 2)
    v = m.vertices.copy()
    centre = m.interior_vertex_ids[0]
    v[centre] = v[0]  # collapses the triangles touching vertex 0
    with pytest.raises(DegenerateMeshError) as info:
        assemble(m.with_vertices(v), HelmholtzProblem(100.0, SRC_31, 1.0))
    assert info.value.area < EPS_AREA


def test_identity_system():
    n = 5
    rhs = np.zeros(n, dtype=complex)
    rhs[0] = 1
    field = solve(ComplexSystem(sp.identity(n, format="csc", dtype=complex), rhs))
    np.testing.assert_array_equal(field.nodal, rhs)


def test_singular_matrix_raises():
    K = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex))
    with pytest.raises(SolverError):
        Factorization(K).solve(np.array([1.0, 0.0]))


@pytest.mark.parametrize(
    "problem, mesh",
    [
        (HelmholtzProblem(1000.0, SRC_31, 1.5 + 0.3j), generate_rect_mesh(2.0, 2.0, 32, 32)),
        (_room_problem(), generate_rect_mesh(4.0, 4.0, 16, 16)),
        (HelmholtzProblem(1000.0, SRC_31, -0.5 - 0.5j), generate_rect_mesh(2.0, 2.0, 12, 12)),
    ],
)
def test_residual_contract(problem, mesh):
    system = assemble(mesh, problem)
    field = solve(system)
    assert relative_residual(system, field) <= 1e-10
    assert np.isfinite(acoustic_energy(field))


def test_reciprocity():
    m = generate_rect_mesh(2.0, 2.0, 10, 10)
    K = assemble(m, HelmholtzProblem(800.0, SRC_31, 1.2 + 0.4j)).matrix
    lu = Factorization(K)
    a, b = 13, 97
    ea = np.zeros(K.shape[0], dtype=complex)
    eb = np.zeros(K.shape[0], dtype=complex)
    ea[a] = eb[b] = 1
    pab = lu.solve(eb)[a]
    pba = lu.solve(ea)[b]
    assert abs(pab - pba) <= 1e-10 * abs(pab)


def test_adjoint_solve_uses_transpose():
    m = generate_rect_mesh(1.0, 1.0, 5, 5)
    K = assemble(m, HelmholtzProblem(300.0, SRC_31, 0.7 + 0.2j)).matrix
    K = K + sp.random(K.shape[0], K.shape[0], density=0.02, random_state=0) * 0.01
    lu = Factorization(K)
    rhs = np.random.default_rng(0).standard_normal(K.shape[0]) + 0j
    x = lu.solve(rhs, trans="T")
    np.testing.assert_allclose(K.T @ x, rhs, atol=1e-10)


@pytest.mark.parametrize("name", ["plane", "trig"])
def test_manufactured_solution_convergence(name):
    k = 2 * np.pi * 200 / 343
    exact = plane_wave(k, (1.0, 0.5)) if name == "plane" else trig_poly(k)
    slope, err = convergence_slope([4, 8, 16, 32, 64], k, 1.5 + 0.3j, exact)
    assert 1.8 <= slope <= 2.2
    assert np.all(np.diff(err) < 0)


def test_quadrature_reference_triangle():
    m = Mesh.from_triangles(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    pts, w = quadrature_points(m)
    expected = {(2 / 3, 1 / 6), (1 / 6, 2 / 3), (1 / 6, 1 / 6)}
    got = {tuple(np.round(p, 12)) for p in pts}
    assert got == {tuple(np.round(p, 12)) for p in expected}
    assert w.sum() == pytest.approx(0.5)
    # exact for x, y, x^2 and xy
    assert np.sum(w * pts[:, 0]) == pytest.approx(1 / 6)
    assert np.sum(w * pts[:, 0] ** 2) == pytest.approx(1 / 12)
    assert np.sum(w * pts[:, 0] * pts[:, 1]) == pytest.approx(1 / 24)


def test_quadrature_weights_sum_to_area():
    _, w = quadrature_points(generate_rect_mesh(1.0, 1.0, 7, 3))
    assert w.sum() == pytest.approx(1.0, abs=1e-14)


def test_eval_field_interpolation():
    m = generate_rect_mesh(1.0, 1.0, 4, 4)
    rng = np.random.default_rng(1)
    nodal = rng.standard_normal(len(m.vertices)) + 1j * rng.standard_normal(len(m.vertices))
    field = PressureField(m, nodal)
    assert eval_field(field, m.vertices[7]) == pytest.approx(nodal[7], abs=1e-14)
    t = m.triangles[5]
    centroid = m.vertices[t].mean(axis=0)
    assert eval_field(field, centroid) == pytest.approx(nodal[t].mean(), abs=1e-14)
    const = PressureField(m, np.full(len(m.vertices), 2.0 - 1.0j))
    vals = eval_field(const, rng.uniform(0, 1, (20, 2)))
    np.testing.assert_allclose(vals, 2.0 - 1.0j, atol=1e-14)


def test_eval_field_outside_domain():
    m = generate_rect_mesh(1.0, 1.0, 2, 2)
    with pytest.raises(OutsideDomainError):
        eval_field(PressureField(m, np.zeros(len(m.vertices), complex)), (1.5, 0.5))


def test_energy_examples():
    m = generate_rect_mesh(1.0, 1.0, 5, 5)
    n = len(m.vertices)
    assert acoustic_energy(PressureField(m, np.ones(n, complex))) == pytest.approx(1.0, abs=1e-14)
    assert acoustic_energy(PressureField(m, np.zeros(n, complex))) == 0.0
    assert acoustic_energy(PressureField(m, m.vertices[:, 0] + 0j)) == pytest.approx(1 / 3, abs=1e-14)


def test_energy_matches_mass_form():
    m = generate_rect_mesh(2.0, 2.0, 8, 8)
    field = solve(assemble(m, HelmholtzProblem(900.0, SRC_31, 1.5 + 0.3j)))
    M = assemble_operators(m).mass
    p = field.nodal
    assert acoustic_energy(field) == pytest.approx(float(np.real(np.conj(p) @ (M @ p))), rel=1e-12)


def test_zero_source_gives_zero_energy():
    m = generate_rect_mesh(2.0, 2.0, 6, 6)
    field = solve(assemble(m, HelmholtzProblem(500.0, GaussianSource((1, 1), 0.1, 0.0), 1.0)))
    assert acoustic_energy(field) == 0.0


@pytest.mark.xfail(strict=True, reason="60 Hz sits on the (1,1) room mode at 60.6 Hz, so it is not off-modal")
def test_room_energy_higher_at_100_than_60hz():
    m = generate_rect_mesh(4.0, 4.0, 16, 16)
    e100 = acoustic_energy(solve(assemble(m, _room_problem(100.0))))
    e60 = acoustic_energy(solve(assemble(m, _room_problem(60.0))))
    assert e100 > e60


def test_near_modal_energy_exceeds_off_modal():
    # light damping so the response is dominated by the nearest mode
    m = generate_rect_mesh(4.0, 4.0, 16, 16)
    e_mode = acoustic_energy(solve(assemble(m, _room_problem(96.0, 0.02))))
    e_off = acoustic_energy(solve(assemble(m, _room_problem(110.0, 0.02))))
    assert e_mode > 5 * e_off


def test_field_csv(tmp_path):
    m = generate_rect_mesh(1.0, 1.0, 2, 2)
    field = PressureField(m, np.arange(len(m.vertices)) * (1 + 1j))
    export_field(field, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x,y,re_p,im_p,abs_p"
    assert len(lines) == 1 + len(m.vertices)
    x, y, re, im, ab = map(float, lines[3].split(","))
    assert (re, im) == (2.0, 2.0) and ab == pytest.approx(2 * np.sqrt(2))
    export_field(field, tmp_path / "q.csv", at_quadrature=True)
    assert len((tmp_path / "q.csv").read_text().splitlines()) == 1 + 3 * len(m.triangles)
