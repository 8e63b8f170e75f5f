"""
M-estimator tests for ScatterLab.

Both computation routes are checked against each other, against an independent
scalar root-finder at N = 1, and against the structural properties of the
fixed point (equivariance, start-point independence, leave-one-out forms).
"""

import logging

import numpy as np
import pytest
from scipy import optimize

from estimator import (
    EstimatorError, SingularMatrixError, _leave_one_out_forms, assemble_from_d, estimate,
    estimate_d_iteration, estimate_matrix_iteration, extract_di, interference_map,
    quadratic_forms, residual, rhs, sample_covariance, spectral_norm
)
from models import EstimatorConfig, WeightSpec
from sampling import SampleSet, ScatterModel, TauDistribution, block_scatter, sample
from weights import make_weight

STRICT = EstimatorConfig(tol=1e-12, max_iter=2000)


def weight_for(s, alpha=0.1):
    return make_weight(WeightSpec(alpha=alpha), s.c)


def relative_gap(A, B):
    return spectral_norm(A - B) / spectral_norm(A)


def test_matrix_iteration_reaches_fixed_point(small_sample):
    w = weight_for(small_sample)
    result = estimate_matrix_iteration(small_sample, w, EstimatorConfig())
    assert result.converged
    assert result.residual <= 1e-11
    assert result.iterations == len(result.residual_history)
    assert np.all(result.eigenvalues > 0)
    np.testing.assert_allclose(result.C_hat, result.C_hat.T)
    assert residual(result.C_hat, small_sample, w) <= 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_figure_scale_converges_within_200_iterations(figure_model, seed):
    s = sample(figure_model(100, 500), seed)
    cfg = EstimatorConfig(tol=1e-11, max_iter=200)
    by_matrix = estimate_matrix_iteration(s, weight_for(s), cfg)
    assert by_matrix.converged
    assert by_matrix.residual <= 1e-11
    assert estimate_d_iteration(s, weight_for(s), cfg).converged


@pytest.mark.parametrize("N, n", [(10, 50), (20, 100)])
def test_small_cells_converge_at_default_cap(figure_model, N, n):
    for seed in range(3):
        s = sample(figure_model(N, n), seed)
        assert estimate_matrix_iteration(s, weight_for(s), EstimatorConfig()).converged
        assert estimate_d_iteration(s, weight_for(s), EstimatorConfig()).converged


def test_residual_history_is_non_increasing(figure_model):
    s = sample(figure_model(40, 200), 5)
    history = estimate_matrix_iteration(s, weight_for(s), EstimatorConfig()).residual_history
    tail = np.array(history[4:])
    assert np.all(tail[1:] <= tail[:-1] * (1 + 1e-6))


def test_scaled_estimate_is_not_a_fixed_point(small_sample):
    w = weight_for(small_sample)
    C_hat = estimate_matrix_iteration(small_sample, w, EstimatorConfig()).C_hat
    assert residual(C_hat, small_sample, w) <= 1e-10
    assert residual(2.0 * C_hat, small_sample, w) > 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_routes_agree(seed, figure_model):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(5, 41))
    n = int(N * rng.uniform(2.5, 6.0))
    tau = [TauDistribution.gamma(0.5, 2.0), TauDistribution.inverse_chi_square(5.0),
           TauDistribution.constant()][seed % 3]
    s = sample(figure_model(N, n, tau), seed)
    w = weight_for(s)
    by_matrix = estimate_matrix_iteration(s, w, STRICT)
    by_d = estimate_d_iteration(s, w, STRICT)
    assert by_matrix.converged and by_d.converged
    assert relative_gap(by_matrix.C_hat, by_d.C_hat) <= 1e-6


def test_routes_agree_with_zero_textures():
    taus = TauDistribution.gamma(0.5, 2.0).draw(120, np.random.default_rng(8))
    taus[:5] = 0.0
    model = ScatterModel(N=20, n=120, C=block_scatter(20, [1.0, 3.0, 10.0], [0.25, 0.25, 0.5]),
                         tau=TauDistribution.empirical(taus))
    s = sample(model, 9)
    assert np.count_nonzero(s.taus == 0) == 5
    w = weight_for(s)
    by_matrix = estimate_matrix_iteration(s, w, STRICT)
    by_d = estimate_d_iteration(s, w, STRICT)
    assert by_matrix.converged and by_d.converged
    assert relative_gap(by_matrix.C_hat, by_d.C_hat) <= 1e-6

    d = extract_di(by_matrix.C_hat, s, w)
    zero = s.taus == 0
    # zero-texture entries come from z_i directly, not from g(q_i) / tau_i
    np.testing.assert_allclose(d[zero], quadratic_forms(by_matrix.C_hat, s.Z[:, zero]), rtol=1e-12)
    np.testing.assert_allclose(d, by_d.d, rtol=1e-7)
    np.testing.assert_allclose(interference_map(d, s, w), d, rtol=1e-8)


def scalar_oracle(x, w):
    """Root of 1 = mean(phi(x_i^2 / Z)) in Z, by Brent's method."""
    scale = np.mean(x ** 2)
    return optimize.brentq(lambda Z: np.mean(w.phi(x ** 2 / Z)) - 1.0,
                           1e-8 * scale, 1e8 * scale, xtol=1e-300, rtol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_scalar_case_matches_root_finder(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(5, 60))
    x = rng.standard_normal(n) * rng.uniform(0.1, 10.0) * np.sqrt(rng.gamma(0.5, 2.0, size=n))
    s = SampleSet.from_matrix(x[None, :])
    w = weight_for(s)
    expected = scalar_oracle(x, w)
    by_matrix = estimate_matrix_iteration(s, w, STRICT)
    by_d = estimate_d_iteration(s, w, STRICT)
    assert by_matrix.C_hat[0, 0] == pytest.approx(expected, rel=1e-9)
    assert by_d.C_hat[0, 0] == pytest.approx(expected, rel=1e-9)


def test_result_independent_of_start(small_sample):
    w = weight_for(small_sample)
    rng = np.random.default_rng(4)
    B = rng.standard_normal((small_sample.N, small_sample.N))
    starts = [
        EstimatorConfig(tol=1e-12, max_iter=2000, init='identity'),
        EstimatorConfig(tol=1e-12, max_iter=2000, init='sample-covariance'),
        EstimatorConfig(tol=1e-12, max_iter=2000, init='custom', init_matrix=B @ B.T + np.eye(small_sample.N)),
    ]
    results = [estimate_matrix_iteration(small_sample, w, cfg).C_hat for cfg in starts]
    for other in results[1:]:
        assert relative_gap(results[0], other) <= 1e-9


@pytest.mark.parametrize("d_init", [0.1, 1.0, 10.0])
def test_d_route_independent_of_start(small_sample, d_init):
    w = weight_for(small_sample)
    reference = estimate_d_iteration(small_sample, w, STRICT).d
    d = estimate_d_iteration(small_sample, w, EstimatorConfig(tol=1e-12, max_iter=2000, d_init=d_init)).d
    np.testing.assert_allclose(d, reference, rtol=1e-8)


def test_equivariance():
    """C_hat(A X) = A C_hat(X) A^T for invertible A."""
    model = ScatterModel(N=50, n=250, C=np.eye(50), tau=TauDistribution.gamma(0.5, 2.0))
    s = sample(model, 17)
    w = weight_for(s)
    base = estimate_matrix_iteration(s, w, STRICT).C_hat
    rng = np.random.default_rng(18)
    for _ in range(5):
        Q, _ = np.linalg.qr(rng.standard_normal((50, 50)))
        A = Q @ np.diag(rng.uniform(0.5, 2.0, size=50))
        moved = estimate_matrix_iteration(s.transform(A), w, STRICT).C_hat
        assert relative_gap(moved, A @ base @ A.T) <= 1e-8


def test_extracted_forms_are_fixed_point_of_interference_map(small_sample):
    w = weight_for(small_sample)
    result = estimate_matrix_iteration(small_sample, w, STRICT)
    d = result.d
    assert np.all(d > 0)
    np.testing.assert_allclose(interference_map(d, small_sample, w), d, rtol=1e-8)
    assert relative_gap(result.C_hat, assemble_from_d(d, small_sample, w)) <= 1e-9


def test_extracted_forms_match_d_route(small_sample):
    w = weight_for(small_sample)
    by_matrix = estimate_matrix_iteration(small_sample, w, STRICT)
    by_d = estimate_d_iteration(small_sample, w, STRICT)
    np.testing.assert_allclose(extract_di(by_matrix.C_hat, small_sample, w), by_d.d, rtol=1e-7)


def test_downdated_sweep_matches_explicit_map(small_sample):
    w = weight_for(small_sample)
    d = np.random.default_rng(6).uniform(0.5, 2.0, size=small_sample.n)
    np.testing.assert_allclose(_leave_one_out_forms(d, small_sample, w),
                               interference_map(d, small_sample, w), rtol=1e-10)


def test_interference_map_properties(figure_model):
    """Positivity, monotonicity and strict sub-homogeneity of h."""
    s = sample(figure_model(6, 30), 2)
    w = weight_for(s)
    rng = np.random.default_rng(7)
    for _ in range(5):
        d = rng.uniform(0.2, 3.0, size=s.n)
        bump = d + rng.uniform(0.0, 1.0, size=s.n)
        h = interference_map(d, s, w)
        assert np.all(h > 0)
        assert np.all(interference_map(bump, s, w) >= h - 1e-12)
        for scale in (1.5, 3.0):
            assert np.all(scale * h > interference_map(scale * d, s, w))


def test_leave_one_out_spread_shrinks_with_dimension(figure_model):
    spreads = []
    for N in (50, 100, 200):
        values = []
        for seed in range(3):
            s = sample(figure_model(N, 5 * N), seed)
            d = estimate_matrix_iteration(s, weight_for(s), EstimatorConfig()).d
            values.append((d.max() - d.min()) / d.mean())
        spreads.append(np.mean(values))
    assert spreads[0] > spreads[1] > spreads[2]


def test_non_convergence_is_reported(small_sample, caplog):
    w = weight_for(small_sample)
    with caplog.at_level(logging.WARNING):
        result = estimate_matrix_iteration(small_sample, w, EstimatorConfig(max_iter=2))
    assert not result.converged
    assert result.iterations == 2
    assert result.residual > 1e-11
    assert any('stopped after 2 steps' in message for message in caplog.messages)

    result = estimate_d_iteration(small_sample, w, EstimatorConfig(max_iter=2))
    assert not result.converged


def test_too_few_nonzero_samples():
    X = np.zeros((5, 12))
    X[:, :5] = np.random.default_rng(0).standard_normal((5, 5))
    s = SampleSet.from_matrix(X)
    with pytest.raises(EstimatorError):
        estimate_matrix_iteration(s, weight_for(s), EstimatorConfig())


def test_singular_matrix_detected(small_sample):
    w = weight_for(small_sample)
    with pytest.raises(SingularMatrixError):
        rhs(np.zeros((small_sample.N, small_sample.N)), small_sample, w, step=3)
    with pytest.raises(SingularMatrixError, match="iteration 3"):
        quadratic_forms(np.diag([1.0, -1.0]), np.ones((2, 1)), step=3)


def test_quadratic_forms():
    Z = np.diag([2.0, 4.0])
    V = np.array([[2.0, 0.0], [0.0, 4.0]])
    np.testing.assert_allclose(quadratic_forms(Z, V), [1.0, 2.0])


def test_dispatcher_records_route_gap(small_sample):
    w = weight_for(small_sample)
    result = estimate(small_sample, w, EstimatorConfig(tol=1e-12, max_iter=2000, route='both'))
    assert result.route == 'both'
    assert result.route_gap is not None and result.route_gap <= 1e-6
    assert estimate(small_sample, w, EstimatorConfig(route='d-vector')).route == 'd-vector'
    assert estimate(small_sample, w, EstimatorConfig()).route_gap is None


def test_sample_covariance(small_sample):
    expected = sum(np.outer(x, x) for x in small_sample.X.T) / small_sample.n
    np.testing.assert_allclose(sample_covariance(small_sample), expected, rtol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {'tol': 0.0}, {'max_iter': 0}, {'init': 'zeros'}, {'route': 'fast'},
    {'init': 'custom'}, {'init': 'custom', 'init_matrix': -np.eye(2)}, {'d_init': 0.0},
])
def test_estimator_config_validation(kwargs):
    with pytest.raises(ValueError):
        EstimatorConfig(**kwargs)
