import json

import numpy as np
import pytest

from synthdesign.panel import PanelError, PotentialPanel
from synthdesign.randlab import (ExperimentReport, ExperimentRow, adversarial_bias_panel, report_summary,
                                 run_propensity_monte_carlo, run_subset_randomization, run_time_randomization,
                                 run_unit_randomization, stationary_synthetic_panel, unit_covariance)
from synthdesign.weights import solve_weights


def test_row_algebra(rng):
    pp = PotentialPanel(rng.normal(size=(5, 6)), rng.normal(size=(5, 6)))
    rep = run_unit_randomization(pp, ["dim", "sc", "musc"])
    for row in rep.rows:
        assert row.error is None
        assert row.rmse ** 2 == pytest.approx(row.bias ** 2 + row.variance, rel=1e-12, abs=1e-15)
    assert rep.enumerated and rep.seed is None and rep.n_assignments == 5
    json.dumps(rep.to_json())
    assert "Average standard error" in rep.to_table()
    assert report_summary(rep).count("\n") == 3


def test_enumerated_report_takes_no_seed():
    with pytest.raises(ValueError):
        ExperimentReport("uniform-unit", (ExperimentRow("dim"),), True, 3, seed=1)


def test_zero_effect_unbiased_families(rng):
    pp = PotentialPanel.zero_effect(rng.normal(size=(6, 7)))
    rep = run_unit_randomization(pp, ["dim", "did", "usc", "musc", "sc"])
    for fam in ("dim", "did", "usc", "musc"):
        assert abs(rep.row(fam).bias) <= 1e-9
    sc = rep.row("sc")
    assert sc.bias == pytest.approx(sc.extra["weight_bias"], abs=1e-12)
    for row in rep.rows:
        assert row.extra["mean_variance_estimate"] == pytest.approx(row.exact_variance_mean, abs=1e-9)


@pytest.mark.parametrize("n", [4, 5, 6, 8])
def test_adversarial_panel_bias(n):
    rep = run_unit_randomization(adversarial_bias_panel(n), ["sc"], with_variance=False)
    assert rep.row("sc").bias == pytest.approx((n - 2) / n, abs=1e-6)


def test_time_randomization_hand_oracle():
    y = np.array([[1.0, 4.0, 2.0], [0.0, 1.0, 3.0], [2.0, 3.0, 1.0]])
    rep = run_time_randomization(PotentialPanel.zero_effect(y), ["dim"], treated_unit=0)
    errs = y[0] - y[1:].mean(axis=0)
    row = rep.row("dim")
    assert row.bias == pytest.approx(errs.mean())
    assert row.extra["mse"] == pytest.approx(np.mean(errs ** 2))


def test_constant_panel_has_zero_error():
    pp = PotentialPanel.zero_effect(np.full((4, 5), 3.0))
    rep = run_time_randomization(pp, ["dim", "musc"])
    for row in rep.rows:
        assert row.extra["mse"] == pytest.approx(0.0, abs=1e-12)


def test_monte_carlo_agrees_with_exact(three_states):
    pp = PotentialPanel.zero_effect(three_states.y)
    tensor = solve_weights(three_states, "sc")
    p = np.array([0.2, 0.3, 0.5])
    rep = run_propensity_monte_carlo(pp, "sc", 4000, seed=3, tensor=tensor, propensity=p)
    row = rep.row("sc")
    assert abs(row.extra["mc_bias"] - row.bias) <= 3 * row.extra["mc_bias_standard_error"]
    again = run_propensity_monte_carlo(pp, "sc", 4000, seed=3, tensor=tensor, propensity=p)
    assert again.to_json() == rep.to_json()
    fair = run_propensity_monte_carlo(pp, "sc", 10, seed=0, tensor=tensor, propensity=[0.25, 0.5, 0.25])
    assert abs(fair.row("sc").bias) < 1e-12


def test_monte_carlo_needs_propensity(three_states):
    with pytest.raises(PanelError):
        run_propensity_monte_carlo(PotentialPanel.zero_effect(three_states.y), "sc", 10, seed=0)


def test_subset_randomization(rng):
    pp = PotentialPanel.zero_effect(rng.normal(size=(6, 5)))
    row = run_subset_randomization(pp, 2).row("musc")
    assert abs(row.bias) < 1e-9
    assert row.extra["mean_variance_estimate"] == pytest.approx(row.exact_variance_mean, abs=1e-9)


def test_synthetic_panel_moments():
    pp = stationary_synthetic_panel(4, 2000, correlation=0.6, ar=0.5, seed=11)
    y = pp.y0
    assert np.allclose(np.cov(y), unit_covariance(4, 0.6), atol=0.12)
    lag = np.mean([np.corrcoef(y[i, 1:], y[i, :-1])[0, 1] for i in range(4)])
    assert lag == pytest.approx(0.5, abs=0.06)
    same = stationary_synthetic_panel(4, 20, seed=11)
    assert np.array_equal(same.y0, stationary_synthetic_panel(4, 20, seed=11).y0)
    with pytest.raises(PanelError):
        stationary_synthetic_panel(3, 5, cov=np.array([[1, 2, 0], [2, 1, 0], [0, 0, 1]]))
    with pytest.raises(PanelError):
        stationary_synthetic_panel(3, 5, ar=1.0)


def test_strong_correlation_favours_musc():
    pp = stationary_synthetic_panel(6, 60, correlation=0.9, seed=2)
    rep = run_time_randomization(pp, ["dim", "musc"])
    assert rep.row("musc").rmse < rep.row("dim").rmse


def test_failures_become_rows(rng):
    pp = PotentialPanel.zero_effect(rng.normal(size=(2, 4)))
    rep = run_unit_randomization(pp, ["dim", "usc"])
    assert rep.row("dim").error is None
    assert rep.row("usc").error is not None
