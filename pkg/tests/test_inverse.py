import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helmopt.geometry import generate_rect_mesh
from helmopt.helmholtz import GaussianSource, HelmholtzProblem, SolverError, assemble, quadrature_points, solve
from helmopt.inverse import (
    AdmittanceObjective,
    EstimationConfig,
    LossWeights,
    MeasurementError,
    MeasurementSet,
    add_noise,
    admittance_loss,
    cluster_counts,
    estimate_admittance,
    loss_gradient_beta,
    read_measurements_csv,
    sample_measurements,
    wrap_phase,
    write_measurements_csv,
)

from support import rel_inf_error

CENTERS = [(0.7, 1.7), (1.0, 1.7), (1.3, 1.7)]
BETA_TRUE = 1.5 + 0.3j


@pytest.fixture(scope="module")
def small_setup():
    mesh = generate_rect_mesh(2.0, 2.0, 24, 24)
    problem = HelmholtzProblem(1000.0, GaussianSource((1.0, 1.0), 0.086, 1000.0), BETA_TRUE)
    field = solve(assemble(mesh, problem))
    meas = sample_measurements(field, CENTERS, 0.1)
    return mesh, problem, field, meas


def test_measurement_set_validation():
    with pytest.raises(MeasurementError):
        MeasurementSet(np.zeros((3, 2)), np.zeros(2))


def test_sampling_radius_zero(small_setup):
    _, _, field, _ = small_setup
    with pytest.raises(MeasurementError):
        sample_measurements(field, CENTERS, 0.0)


def test_sampling_whole_domain(small_setup):
    mesh, _, field, _ = small_setup
    meas = sample_measurements(field, [(1.0, 1.0)], 5.0)
    pts, _ = quadrature_points(mesh)
    assert len(meas) == len(pts)


def test_cluster_counts(small_setup):
    _, _, _, meas = small_setup
    counts = cluster_counts(meas, CENTERS, 0.1)
    assert min(counts) >= 3
    d = np.linalg.norm(meas.points[:, None] - np.array(CENTERS)[None], axis=2)
    assert np.all(d.min(axis=1) <= 0.1)


def test_noise_level_zero_is_identity(small_setup):
    meas = small_setup[3]
    np.testing.assert_array_equal(add_noise(meas, 0.0, 7).values, meas.values)


def test_noise_is_seeded(small_setup):
    meas = small_setup[3]
    a, b = add_noise(meas, 0.02, 3), add_noise(meas, 0.02, 3)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, add_noise(meas, 0.02, 4).values)


def test_noise_standard_deviation():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)
    meas = MeasurementSet(np.zeros((10_000, 2)), vals)
    noisy = add_noise(meas, 0.02, 11)
    diff = noisy.values - vals
    target = 0.02 * np.sqrt(np.mean(np.abs(vals) ** 2))
    for part in (diff.real, diff.imag):
        assert abs(np.std(part) / target - 1) <= 0.05


def test_loss_zero_at_match():
    vals = np.array([1 + 2j, -0.5j, 3.0])
    assert admittance_loss(vals, vals, LossWeights()) == 0.0


def test_loss_single_point():
    assert admittance_loss(np.array([2.0 + 0j]), np.array([1.0 + 0j]), LossWeights(1, 1, 1)) == pytest.approx(2.0)


def test_loss_phase_wrap():
    meas = np.array([1.0 + 0j])
    pred = np.array([np.exp(1.5j * np.pi)])
    loss = admittance_loss(pred, meas, LossWeights(0.0, 1.0, 0.0))
    assert loss == pytest.approx((np.pi / 2) ** 2)


def test_loss_rejects_zero_measurements():
    with pytest.raises(MeasurementError):
        admittance_loss(np.ones(2), np.zeros(2), LossWeights())
    with pytest.raises(MeasurementError):
        admittance_loss(np.ones(3), np.ones(2), LossWeights())


@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_range(x):
    w = float(wrap_phase(x))
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(x), atol=1e-9) and np.isclose(np.sin(w), np.sin(x), atol=1e-9)


def test_wrap_boundary_values():
    assert wrap_phase(np.pi) == pytest.approx(np.pi)
    assert wrap_phase(-np.pi) == pytest.approx(np.pi)


@given(
    st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8),
    st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8),
)
def test_loss_non_negative(a, b):
    n = min(len(a), len(b))
    pred = np.array([complex(*x) for x in a[:n]])
    meas = np.array([complex(*x) for x in b[:n]])
    if np.linalg.norm(meas) == 0:
        return
    assert admittance_loss(pred, meas, LossWeights()) >= 0


def test_gradient_zero_weights(small_setup):
    mesh, problem, _, meas = small_setup
    g = loss_gradient_beta(mesh, problem.with_admittance(2.0 + 0.1j), meas, LossWeights(0, 0, 0))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_gradient_vanishes_at_truth(small_setup):
    mesh, problem, _, meas = small_setup
    assert np.linalg.norm(loss_gradient_beta(mesh, problem, meas, LossWeights())) <= 1e-10


@pytest.mark.parametrize("beta", [3.0 + 0.05j, 0.4 - 0.8j, 2.2 + 0.9j])
def test_adjoint_matches_fd(small_setup, beta):
    mesh, problem, _, meas = small_setup
    noisy = add_noise(meas, 0.02, 0)
    obj = AdmittanceObjective(mesh, problem, noisy, LossWeights())
    _, g = obj.value_and_gradient(beta)
    assert rel_inf_error(g, obj.fd_gradient(beta)) <= 1e-4


def test_objective_counts_solves(small_setup):
    mesh, problem, _, meas = small_setup
    obj = AdmittanceObjective(mesh, problem, meas, LossWeights())
    obj.value_and_gradient(1.0)
    obj.fd_gradient(1.0)
    assert obj.n_solves == 5


def test_one_step_from_optimum(small_setup):
    mesh, problem, _, meas = small_setup
    trace = estimate_admittance(mesh, EstimationConfig(problem, BETA_TRUE, iterations=1), meas)
    assert abs(trace.final_admittance - BETA_TRUE) <= 1e-10
    assert len(trace) == 1


def test_descent_lowers_loss(small_setup):
    mesh, problem, _, meas = small_setup
    cfg = EstimationConfig(problem, 3.0 + 0.05j, step_size=0.01, iterations=11)
    trace = estimate_admittance(mesh, cfg, meas)
    assert trace.loss[10] < trace.loss[0]
    assert len(trace) == 11


def test_estimation_is_deterministic(small_setup):
    mesh, problem, _, meas = small_setup
    noisy = add_noise(meas, 0.02, 5)
    cfg = EstimationConfig(problem, 3.0 + 0.05j, iterations=20)
    assert estimate_admittance(mesh, cfg, noisy).to_csv() == estimate_admittance(mesh, cfg, noisy).to_csv()


def test_adam_option_runs(small_setup):
    mesh, problem, _, meas = small_setup
    cfg = EstimationConfig(problem, 2.0 + 0.0j, optimizer="adam", step_size=0.05, iterations=30)
    trace = estimate_admittance(mesh, cfg, meas)
    assert trace.loss[-1] < trace.loss[0]


def test_config_validation(small_setup):
    problem = small_setup[1]
    with pytest.raises(ValueError):
        EstimationConfig(problem, iterations=0)
    with pytest.raises(ValueError):
        EstimationConfig(problem, optimizer="lbfgs")


def test_solver_failure_returns_partial_trace(small_setup, monkeypatch):
    mesh, problem, _, meas = small_setup
    calls = {"n": 0}
    original = AdmittanceObjective.value_and_gradient

    def flaky(self, beta):
        calls["n"] += 1
        if calls["n"] > 3:
            raise SolverError("singular")
        return original(self, beta)

    monkeypatch.setattr(AdmittanceObjective, "value_and_gradient", flaky)
    trace = estimate_admittance(mesh, EstimationConfig(problem, 3.0 + 0.05j, iterations=10), meas)
    assert trace.failed and "singular" in trace.failure
    assert len(trace) == 3


def test_trace_csv_header(small_setup):
    mesh, problem, _, meas = small_setup
    trace = estimate_admittance(mesh, EstimationConfig(problem, 3.0 + 0.05j, iterations=2), meas)
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iter,loss,beta_r,beta_i,grad_r,grad_i"
    assert len(lines) == 3
    assert float(lines[1].split(",")[2]) == 3.0


def test_measurement_csv_round_trip(tmp_path, small_setup):
    meas = small_setup[3]
    write_measurements_csv(meas, tmp_path / "m.csv")
    back = read_measurements_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.points, meas.points)
    np.testing.assert_array_equal(back.values, meas.values)


def test_measurement_csv_bad_columns(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(MeasurementError):
        read_measurements_csv(tmp_path / "m.csv")
