"""
Sampling tests for ScatterLab.

Covers the texture laws, the square-root factor, direction draws, determinism of
generated samples and the advisory assumption report.
"""

import numpy as np
import pytest
from scipy import stats

from models import WeightSpec
from sampling import (
    ModelError, SampleSet, ScatterModel, TauDistribution, block_scatter, check_assumptions,
    draw_direction, draw_directions, hill_tail_index, sample, sqrt_factor
)
from weights import WeightFunction, make_weight


# Texture laws

def test_gamma_texture_rescaled_to_unit_mean():
    tau = TauDistribution.gamma(0.5, 2.0)
    assert tau.params['shape'] == 0.5
    assert tau.params['scale'] == pytest.approx(2.0)
    assert tau.law().mean() == pytest.approx(1.0)

    tau = TauDistribution.gamma(3.0, 7.0)
    assert tau.law().mean() == pytest.approx(1.0)


def test_gamma_texture_sample_mean():
    draws = TauDistribution.gamma(0.5, 2.0).draw(100_000, np.random.default_rng(5))
    assert abs(draws.mean() - 1.0) < 0.03
    assert np.all(draws > 0)


@pytest.mark.parametrize("dof", [2.5, 5.0, 30.0])
def test_inverse_chi_square_texture_has_unit_mean(dof):
    tau = TauDistribution.inverse_chi_square(dof)
    assert tau.law().mean() == pytest.approx(1.0)


def test_inverse_chi_square_draws_match_law():
    tau = TauDistribution.inverse_chi_square(6.0)
    draws = tau.draw(20_000, np.random.default_rng(8))
    assert stats.kstest(draws, tau.law().cdf).statistic < 0.02


def test_empirical_texture():
    tau = TauDistribution.empirical([1.0, 2.0, 3.0])
    assert tau.values == pytest.approx((0.5, 1.0, 1.5))
    assert tau.mean == pytest.approx(1.0)
    # matching length is used verbatim, other lengths are resampled
    assert tau.draw(3, np.random.default_rng(0)).tolist() == pytest.approx([0.5, 1.0, 1.5])
    assert set(tau.draw(50, np.random.default_rng(0)).tolist()) <= {0.5, 1.0, 1.5}


def test_constant_texture():
    tau = TauDistribution.constant(4.0)
    assert tau.draw(5, np.random.default_rng(0)).tolist() == [1.0] * 5
    assert tau.law() is None


@pytest.mark.parametrize("build", [
    lambda: TauDistribution.constant(0.0),
    lambda: TauDistribution.gamma(-1.0, 2.0),
    lambda: TauDistribution.inverse_chi_square(2.0),
    lambda: TauDistribution.empirical([]),
    lambda: TauDistribution.empirical([0.0, 0.0]),
    lambda: TauDistribution.empirical([1.0, -1.0]),
])
def test_invalid_textures(build):
    with pytest.raises(ModelError):
        build()


# Population model

def test_model_rejects_bad_dimensions():
    tau = TauDistribution.constant()
    with pytest.raises(ModelError):
        ScatterModel(N=10, n=10, C=np.eye(10), tau=tau)
    with pytest.raises(ModelError):
        ScatterModel(N=10, n=50, C=np.eye(10), tau=tau, N_bar=5)
    with pytest.raises(ModelError):
        ScatterModel(N=10, n=50, C=np.eye(9), tau=tau)


def test_model_rejects_non_spd_scatter():
    tau = TauDistribution.constant()
    with pytest.raises(ModelError):
        ScatterModel(N=2, n=10, C=np.array([[1.0, 2.0], [2.0, 1.0]]), tau=tau)
    with pytest.raises(ModelError):
        ScatterModel(N=2, n=10, C=np.array([[1.0, 0.5], [0.0, 1.0]]), tau=tau)


def test_model_properties(figure_model):
    model = figure_model(100, 500)
    assert model.c == pytest.approx(0.2)
    assert model.c_bar == 1.0
    assert model.C_norm == pytest.approx(10.0)
    assert model.to_dict()['tau']['kind'] == 'gamma'


def test_block_scatter_multiplicities():
    C = block_scatter(500, [1.0, 3.0, 10.0], [0.25, 0.25, 0.5])
    diag = np.diag(C)
    assert [np.sum(diag == v) for v in (1.0, 3.0, 10.0)] == [125, 125, 250]


# Square-root factor and directions

def test_sqrt_factor_examples():
    np.testing.assert_allclose(sqrt_factor(np.eye(3)), np.eye(3), atol=1e-15)
    assert sqrt_factor(np.array([[4.0]]))[0, 0] == pytest.approx(2.0)
    C = block_scatter(8, [1.0, 3.0, 10.0], [0.25, 0.25, 0.5])
    A = sqrt_factor(C)
    np.testing.assert_allclose(np.diag(A), np.sqrt(np.diag(C)), rtol=1e-12)
    assert np.linalg.norm(A @ A.T - C, 2) / np.linalg.norm(C, 2) <= 1e-12


def test_sqrt_factor_general_spd_and_padding():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((6, 6))
    C = B @ B.T + 6 * np.eye(6)
    A = sqrt_factor(C, N_bar=9)
    assert A.shape == (6, 9)
    np.testing.assert_array_equal(A[:, 6:], 0.0)
    assert np.linalg.norm(A @ A.T - C, 2) / np.linalg.norm(C, 2) <= 1e-12


def test_sqrt_factor_rejects_non_spd():
    with pytest.raises(ModelError):
        sqrt_factor(np.diag([1.0, 0.0]))


def test_direction_norms():
    rng = np.random.default_rng(2)
    assert abs(draw_direction(1, rng)[0]) == pytest.approx(1.0)
    y = draw_direction(100, rng)
    assert abs(y @ y - 100) <= 1e-10
    Y = draw_directions(30, 200, rng)
    np.testing.assert_allclose(np.sum(Y * Y, axis=0), 30.0, rtol=1e-12)


def test_directions_have_zero_mean():
    Y = draw_directions(20, 10_000, np.random.default_rng(3))
    assert np.linalg.norm(Y.mean(axis=1)) <= 0.05 * np.sqrt(20)


# Samples

def test_constant_texture_sample_norms():
    model = ScatterModel(N=2, n=4, C=np.eye(2), tau=TauDistribution.constant())
    s = sample(model, 7)
    np.testing.assert_allclose(np.sum(s.X ** 2, axis=0), 2.0, rtol=1e-12)


def test_sample_structure(figure_model):
    model = figure_model(20, 100)
    s = sample(model, 4)
    A = sqrt_factor(model.C)
    Y = np.linalg.solve(A, s.Z)
    np.testing.assert_allclose(np.sum(Y * Y, axis=0), model.N_bar, rtol=1e-12)
    np.testing.assert_allclose(s.X, s.Z * np.sqrt(s.taus), rtol=1e-15)
    assert (s.N, s.n) == (20, 100)
    assert s.c == pytest.approx(0.2)


def test_sample_is_deterministic(figure_model):
    model = figure_model(20, 100)
    first, second = sample(model, 9), sample(model, 9)
    np.testing.assert_array_equal(first.X, second.X)
    np.testing.assert_array_equal(first.taus, second.taus)
    assert not np.array_equal(first.X, sample(model, 10).X)


def test_sample_with_inner_dimension():
    model = ScatterModel(N=5, n=40, C=np.eye(5), tau=TauDistribution.constant(), N_bar=12)
    s = sample(model, 0)
    assert s.X.shape == (5, 40)
    # z_i is the projection of a radius sqrt(12) direction
    assert np.all(np.sum(s.Z ** 2, axis=0) <= 12.0 + 1e-9)


def test_orthogonal_invariance():
    """||A Q y||^2 and ||A y||^2 share a distribution for a fixed rotation Q."""
    rng = np.random.default_rng(12)
    A = sqrt_factor(block_scatter(8, [1.0, 3.0, 10.0], [0.25, 0.25, 0.5]))
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    plain = np.sum((A @ draw_directions(8, 10_000, rng)) ** 2, axis=0)
    rotated = np.sum((A @ Q @ draw_directions(8, 10_000, rng)) ** 2, axis=0)
    assert stats.ks_2samp(plain, rotated).statistic < 0.03


def test_zero_texture_keeps_direction():
    model = ScatterModel(N=3, n=6, C=np.eye(3), tau=TauDistribution.empirical([0, 1, 1, 1, 1, 1]))
    s = sample(model, 1)
    np.testing.assert_array_equal(s.X[:, 0], 0.0)
    assert np.linalg.norm(s.Z[:, 0]) == pytest.approx(np.sqrt(3.0))


def test_from_matrix_and_transform():
    X = np.random.default_rng(0).standard_normal((3, 10))
    s = SampleSet.from_matrix(X)
    np.testing.assert_array_equal(s.Z, X)
    np.testing.assert_array_equal(s.taus, np.ones(10))
    A = np.diag([1.0, 2.0, 3.0])
    moved = s.transform(A)
    np.testing.assert_allclose(moved.X, A @ X)
    np.testing.assert_allclose(moved.model.C, A @ A.T)


# Assumption report

def test_assumptions_pass_for_figure_configuration(figure_model, student_weight):
    model = figure_model(100, 500)
    report = check_assumptions(model, student_weight, sample(model, 0))
    assert report.checks['aspect_ratio'] == 'pass'
    assert report.checks['mass_near_zero'] == 'pass'
    assert report.checks['texture_tail'] == 'pass'
    assert report.status == 'pass'
    assert any('asymptotic' in note for note in report.notes)


def test_assumptions_warn_on_mass_near_zero(student_weight):
    taus = [0.0] * 95 + [1.0] * 5
    model = ScatterModel(N=20, n=100, C=np.eye(20), tau=TauDistribution.empirical(taus))
    report = check_assumptions(model, student_weight, sample(model, 0))
    assert report.checks['mass_near_zero'] == 'warn'
    assert '0.95' in report.details['mass_near_zero']
    assert report.status == 'warn'


def test_assumptions_fail_on_aspect_ratio():
    model = ScatterModel(N=19, n=20, C=np.eye(19), tau=TauDistribution.constant())
    w = WeightFunction(WeightSpec(alpha=0.1), c=0.2, phi_inf=1.1)
    report = check_assumptions(model, w, sample(model, 0))
    assert report.checks['aspect_ratio'] == 'fail'
    assert report.status == 'fail'


def test_custom_weight_skips_tail_check():
    spec = WeightSpec(family='custom', custom_u=lambda t: 1.1 / (0.1 + t),
                      declared_phi_inf=1.1, attested_increasing=True)
    model = ScatterModel(N=10, n=50, C=np.eye(10), tau=TauDistribution.gamma(0.5, 2.0))
    report = check_assumptions(model, make_weight(spec, 0.2), sample(model, 0))
    assert 'texture_tail' not in report.checks
    assert any('skipped' in note for note in report.notes)


def test_hill_tail_index_on_pareto():
    draws = np.random.default_rng(21).pareto(2.0, size=20_000) + 1.0
    assert hill_tail_index(draws) == pytest.approx(2.0, abs=0.6)
    assert hill_tail_index(np.array([1.0, 2.0])) == float('inf')
