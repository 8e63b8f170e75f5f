"""
Full-scale reproductions of the reference figures and the convergence trend.

These take minutes; run them with `pytest -m slow`.
"""

import numpy as np
import pytest

from cli import figure_config, reproduce_figure, run_convergence_experiment

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("which", [1, 2])
def test_figure_matches_equivalent_density(which, output_dir):
    summary = reproduce_figure(which, seed=0, output_dir=output_dir)
    assert summary['converged']
    assert summary['support_count'] == 3
    assert 0.97 <= summary['mass'] <= 1.03
    assert summary['ks'] < 0.05
    # no eigenvalue escapes the predicted support
    assert summary['lambda_max'] <= summary['support'][-1][1] + 0.05


def test_sample_covariance_spreads_far_beyond_estimator(output_dir):
    robust = reproduce_figure(1, seed=0, output_dir=output_dir)
    plain = reproduce_figure(3, seed=0, output_dir=output_dir)
    assert plain['lambda_max'] > 3 * robust['lambda_max']


def test_gap_to_equivalent_shrinks_with_dimension():
    cfg = figure_config(1)
    _, summary = run_convergence_experiment(cfg, sizes=[[50, 250], [100, 500], [200, 1000], [400, 2000]],
                                            reps=10, workers=1)
    medians = [cell['median'] for cell in summary]
    assert all(cell['converged'] == 10 for cell in summary)
    assert medians == sorted(medians, reverse=True)
    assert medians[-1] < 0.5 * medians[0]
    assert np.all(np.isfinite(medians))
