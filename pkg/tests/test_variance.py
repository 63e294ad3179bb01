import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthdesign.panel import Assignment, Panel, PotentialPanel
from synthdesign.randlab import placebo_example_panels
from synthdesign.variance import (UnsupportedSizeError, exact_variance, placebo_effects, placebo_variance_estimate,
                                  placebo_variances, unbiased_variance_estimate, variance_report)
from synthdesign.weights import WeightSetSpec, solve_weights, tensor_from_matrix


def enumerate_estimates(pp, tensor, t):
    out = []
    for i in range(pp.n):
        a = Assignment(i, t)
        out.append(unbiased_variance_estimate(pp.observe(a), tensor, a))
    return np.array(out)


@pytest.mark.parametrize("family", ["dim", "did", "sc", "msc", "usc", "musc"])
def test_unbiased_by_enumeration(rng, family):
    for _ in range(3):
        n, tt = int(rng.integers(4, 8)), int(rng.integers(4, 9))
        pp = PotentialPanel.zero_effect(rng.normal(size=(n, tt)))
        tensor = solve_weights(pp.control_panel(), family)
        est = enumerate_estimates(pp, tensor, tt - 1)
        assert est.mean() == pytest.approx(exact_variance(pp.y0, tensor, tt - 1), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 9), st.integers(0, 2 ** 32 - 1))
def test_dim_estimate_is_scaled_sample_variance(n, seed):
    y = np.random.default_rng(seed).normal(size=(n, 2))
    panel = Panel.from_array(y)
    tensor = solve_weights(panel, "dim")
    a = Assignment(0, 1)
    controls = y[1:, 1]
    expected = (1 + 1 / (n - 1)) * controls.var(ddof=1)
    got = unbiased_variance_estimate(panel, tensor, a)
    assert got == pytest.approx(expected, rel=1e-10, abs=1e-12)
    assert got >= 0


def test_pairing_weights_hand_evaluation():
    # units paired (0,1) and (2,3): each predicted by its partner
    m = np.array([[1, -1, 0, 0], [-1, 1, 0, 0], [0, 0, 1, -1], [0, 0, -1, 1]], dtype=float)
    tensor = tensor_from_matrix(m, "usc", 1, 2)
    y = np.array([[9.0, 0.0], [9.0, 1.0], [9.0, 3.0], [9.0, 7.0]])
    panel = Panel.from_array(y)
    # treated unit 0; control contrasts are 0 (partner treated), 4 and -4
    # squares 32 over N-3 = 1, minus squared pair terms 32 over (N-2)(N-3) = 2
    assert unbiased_variance_estimate(panel, tensor, Assignment(0, 1)) == pytest.approx(16.0)
    # exact variance is the mean squared pair difference (1 + 1 + 16 + 16) / 4
    assert exact_variance(y, tensor, 1) == pytest.approx(8.5)
    mean = np.mean([unbiased_variance_estimate(panel, tensor, Assignment(i, 1)) for i in range(4)])
    assert mean == pytest.approx(8.5)


def test_small_panels_rejected():
    panel = Panel.from_array(np.arange(9.0).reshape(3, 3))
    tensor = solve_weights(panel, "dim")
    with pytest.raises(UnsupportedSizeError, match="N >= 4"):
        unbiased_variance_estimate(panel, tensor, Assignment(0, 2))


def test_placebo_dim_direct_loop(rng):
    y = rng.normal(size=(5, 4))
    panel = Panel.from_array(y)
    a = Assignment(1, 3)
    controls = [0, 2, 3, 4]
    direct = []
    for k in controls:
        rest = [j for j in controls if j != k]
        direct.append(y[k, 3] - y[rest, 3].mean())
    assert np.allclose(placebo_effects(panel, "dim", a), direct)
    assert placebo_variance_estimate(panel, "dim", a) == pytest.approx(np.mean(np.square(direct)))


def test_placebo_musc_p_renormalises(rng):
    panel = Panel.from_array(rng.normal(size=(5, 6)))
    spec = WeightSetSpec.of("musc_p", [0.1, 0.2, 0.3, 0.2, 0.2])
    v = placebo_variance_estimate(panel, spec, Assignment(2, 5))
    assert np.isfinite(v) and v >= 0


def test_placebo_examples_bias_direction():
    panels = placebo_example_panels()
    under, over = panels["understated"], panels["overstated"]
    for pp, cmp in ((under, np.less), (over, np.greater)):
        t = pp.t - 1
        tensor = solve_weights(pp.control_panel(), "musc")
        exact = exact_variance(pp.y0, tensor, t)
        plac = np.mean([placebo_variance_estimate(pp.observe(Assignment(i, t)), "musc", Assignment(i, t))
                        for i in range(pp.n)])
        assert cmp(plac, exact)
    t = under.t - 1
    assert exact_variance(under.y0, solve_weights(under.control_panel(), "musc"), t) == pytest.approx(1.0, abs=1e-9)


def test_report_and_parallel(rng):
    pp = PotentialPanel.zero_effect(rng.normal(size=(5, 6)))
    tensor = solve_weights(pp.control_panel(), "sc")
    a = Assignment(0, 5)
    rep = variance_report(pp.observe(a), tensor, a, y0=pp.y0, with_placebo=True)
    assert rep.exact == pytest.approx(exact_variance(pp.y0, tensor, 5))
    assert set(rep.to_json()) >= {"unbiased_estimate", "exact", "placebo_standard_error"}
    assigns = [Assignment(i, 5) for i in range(5)]
    serial = placebo_variances(pp.control_panel(), "sc", assigns, workers=1)
    pooled = placebo_variances(pp.control_panel(), "sc", assigns, workers=2)
    assert np.allclose(serial, pooled)


def test_dim_estimate_nonnegative_over_many_panels(rng):
    for n, seed in itertools.product(range(4, 8), range(5)):
        y = np.random.default_rng(seed).normal(size=(n, 3))
        panel = Panel.from_array(y)
        assert unbiased_variance_estimate(panel, solve_weights(panel, "dim"), Assignment(0, 2)) >= 0
