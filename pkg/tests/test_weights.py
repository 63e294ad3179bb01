import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthdesign.panel import Panel
from synthdesign.weights import (Family, WeightError, WeightSetSpec, assert_member, closed_form_weights,
                                 family_objective, kkt_residual, membership_violations, objective, solve_weights,
                                 tensor_from_matrix)

SOLVED = ["sc", "msc", "usc", "musc"]
ALL = ["dim", "did", *SOLVED]


def naive_objective(y, c, m, t):
    """Plain loop over units and periods."""
    n, tt = y.shape
    total = 0.0
    for i in range(n):
        for s in range(tt):
            if s == t:
                continue
            r = c[i] + sum(m[i, j] * y[j, s] for j in range(n))
            total += r * r
    return total


def cvxpy_objective(y, t, family, p=None):
    cp = pytest.importorskip("cvxpy")
    n = y.shape[0]
    others = np.delete(y, t, axis=1)
    m = cp.Variable((n, n))
    c = cp.Variable(n)
    resid = m @ others + cp.reshape(c, (n, 1), order="C") @ np.ones((1, others.shape[1]))
    weights = np.ones(n) if p is None else p
    cons = [cp.diag(m) == 1, cp.sum(m, axis=1) == 0, m - cp.diag(cp.diag(m)) <= 0]
    fam = Family.parse(family)
    if not fam.has_intercept:
        cons.append(c == 0)
    if fam in (Family.USC, Family.MUSC):
        cons.append(cp.sum(m, axis=0) == 0)
    if fam is Family.MUSC_P:
        cons.append(p @ m == 0)
    prob = cp.Problem(cp.Minimize(cp.sum(cp.multiply(weights[:, None], cp.square(resid)))), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@pytest.mark.parametrize("family", SOLVED)
def test_matches_cvxpy(rng, family):
    for _ in range(5):
        n, tt = int(rng.integers(3, 7)), int(rng.integers(3, 10))
        panel = Panel.from_array(rng.normal(size=(n, tt)))
        tensor = solve_weights(panel, family)
        ref = cvxpy_objective(panel.y, tt - 1, family)
        assert tensor.objective_value <= ref + 1e-6 * max(1.0, ref)
        assert tensor.objective_value >= ref - 1e-6 * max(1.0, ref)
        assert tensor.kkt_residual <= 1e-8
        assert kkt_residual(panel, tensor) <= 1e-8
        assert_member(tensor)


def test_musc_p_matches_cvxpy(rng):
    n, tt = 5, 8
    panel = Panel.from_array(rng.normal(size=(n, tt)))
    p = np.array([0.1, 0.3, 0.2, 0.25, 0.15])
    tensor = solve_weights(panel, WeightSetSpec.of("musc_p", p))
    ref = cvxpy_objective(panel.y, tt - 1, "musc_p", p)
    assert tensor.objective_value == pytest.approx(ref, rel=1e-6, abs=1e-8)
    assert tensor.kkt_residual <= 1e-8
    assert not membership_violations(tensor)


def test_uniform_musc_p_equals_musc(rng):
    panel = Panel.from_array(rng.normal(size=(6, 9)))
    a = solve_weights(panel, "musc")
    b = solve_weights(panel, WeightSetSpec.of("musc_p", np.full(6, 1 / 6)))
    assert np.allclose(a.w[:, :, -1], b.w[:, :, -1], atol=1e-7)


def grid_sc_objective(y, t, step=1e-4):
    """Per treated unit, scan the weight split between the two controls."""
    others = np.delete(y, t, axis=1)
    grid = np.arange(0.0, 1.0 + step / 2, step)
    total = 0.0
    for i in range(3):
        j, k = [u for u in range(3) if u != i]
        r = others[i][None, :] - grid[:, None] * others[j][None, :] - (1 - grid)[:, None] * others[k][None, :]
        total += float((r ** 2).sum(axis=1).min())
    return total


def test_sc_three_units_grid_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        panel = Panel.from_array(rng.normal(size=(3, int(rng.integers(3, 12)))))
        tensor = solve_weights(panel, "sc")
        ref = grid_sc_objective(panel.y, panel.t - 1)
        assert tensor.objective_value <= ref + 1e-10
        assert ref - tensor.objective_value <= 1e-4
        assert tensor.kkt_residual <= 1e-8


@pytest.mark.parametrize("family", ALL)
def test_objective_matches_naive_loop(rng, family):
    panel = Panel.from_array(rng.normal(size=(5, 7)))
    tensor = solve_weights(panel, family, "all")
    naive = sum(naive_objective(panel.y, *tensor.slice(t), t) for t in range(panel.t))
    assert objective(panel, tensor) == pytest.approx(naive, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 7), st.integers(3, 10), st.integers(0, 2 ** 32 - 1))
def test_objective_nesting(n, tt, seed):
    panel = Panel.from_array(np.random.default_rng(seed).normal(size=(n, tt)))
    obj = {f: solve_weights(panel, f).objective_value for f in ALL}
    slack = 1e-8 * max(1.0, obj["dim"])
    assert obj["msc"] <= obj["musc"] + slack
    assert obj["musc"] <= obj["usc"] + slack
    assert obj["usc"] <= obj["dim"] + slack
    assert obj["msc"] <= obj["sc"] + slack
    assert obj["sc"] <= obj["usc"] + slack
    assert obj["musc"] <= obj["did"] + slack


@pytest.mark.parametrize("family", ALL)
def test_treated_cell_does_not_move_weights(rng, family):
    y = rng.normal(size=(6, 8))
    t = 5
    base = solve_weights(Panel.from_array(y), family, t)
    y2 = y.copy()
    y2[2, t] += 1e3
    bumped = solve_weights(Panel.from_array(y2), family, t)
    assert np.array_equal(base.w[:, :, t], bumped.w[:, :, t])
    assert np.array_equal(base.intercept[:, t], bumped.intercept[:, t])


@pytest.mark.parametrize("family", ALL)
def test_scale_and_shift(rng, family):
    y = rng.normal(size=(5, 8))
    a = solve_weights(Panel.from_array(y), family)
    b = solve_weights(Panel.from_array(3.0 * y), family)
    assert np.allclose(a.w[:, :, -1], b.w[:, :, -1], atol=1e-6)
    assert np.allclose(3.0 * a.intercept[:, -1], b.intercept[:, -1], atol=1e-6)


def test_did_intercept_matches_line_search(rng):
    y = rng.normal(size=(4, 6))
    tensor = closed_form_weights(Panel.from_array(y), "did", 5)
    c, m = tensor.slice(5)
    others = y[:, :5]
    for i in range(4):
        fit = m[i] @ others
        grid = np.linspace(-5, 5, 200001)
        best = grid[np.argmin(((grid[:, None] + fit[None, :]) ** 2).sum(axis=1))]
        assert abs(best - c[i]) < 1e-4


def test_dim_closed_form():
    panel = Panel.from_array(np.arange(12.0).reshape(4, 3))
    c, m = solve_weights(panel, "dim").slice(2)
    assert np.all(c == 0)
    assert np.allclose(m, np.eye(4) * (1 + 1 / 3) - 1 / 3)


def test_two_units(rng):
    panel = Panel.from_array(rng.normal(size=(2, 5)))
    for family in ("dim", "did", "sc", "msc"):
        _, m = solve_weights(panel, family).slice(4)
        assert np.allclose(m, [[1, -1], [-1, 1]])
    with pytest.raises(WeightError):
        solve_weights(panel, "usc")


def test_three_state_sc_weights(three_states):
    tensor = solve_weights(three_states, "sc")
    _, m = tensor.slice(2)
    assert np.allclose(m, [[1, -1, 0], [-0.5, 1, -0.5], [0, -1, 1]], atol=1e-9)
    usc = solve_weights(three_states, "usc")
    assert np.allclose(usc.slice(2)[1], closed_form_weights(three_states, "dim", 2).slice(2)[1], atol=1e-9)


def test_perturbed_optimum_fails_kkt(rng):
    panel = Panel.from_array(rng.normal(size=(5, 8)))
    tensor = solve_weights(panel, "usc")
    c, m = tensor.slice(7)
    bent = m.copy()
    # move mass along a cycle: keeps row and column sums, leaves the optimum
    bent[0, 1] -= 0.05
    bent[0, 2] += 0.05
    bent[3, 2] -= 0.05
    bent[3, 1] += 0.05
    if (bent[~np.eye(5, dtype=bool)] > 0).any():
        bent = 0.5 * (m + closed_form_weights(panel, "dim", 7).slice(7)[1])
    other = tensor_from_matrix(bent, "usc", 7, 8)
    assert not membership_violations(other)
    assert kkt_residual(panel, other) > 1e-8


def test_membership_reports():
    m = np.array([[1.0, -1.2, 0.2], [-0.5, 1, -0.5], [0, -1, 1]])
    bad = membership_violations(tensor_from_matrix(m, "sc", 0, 2))
    assert any("positive control weight" in b for b in bad)
    with pytest.raises(WeightError):
        assert_member(tensor_from_matrix(m, "sc", 0, 2))


def test_family_parse():
    assert Family.parse("MUSC-P") is Family.MUSC_P
    with pytest.raises(ValueError, match="valid families"):
        Family.parse("nope")
    with pytest.raises(WeightError):
        WeightSetSpec(Family.MUSC_P)


def test_parallel_matches_serial(rng):
    panel = Panel.from_array(rng.normal(size=(5, 6)))
    a = solve_weights(panel, "musc", "all", workers=1)
    b = solve_weights(panel, "musc", "all", workers=2, warm_start=False)
    assert np.allclose(a.w, b.w, atol=1e-8, equal_nan=True)
    assert family_objective(panel, a) == pytest.approx(family_objective(panel, b), rel=1e-9)
