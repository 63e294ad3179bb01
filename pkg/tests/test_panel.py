import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthdesign.panel import (Assignment, AssignmentDesign, DesignKind, Panel, PanelError, PotentialPanel,
                               dump_json, load_panel, validate_design, write_panel)


def test_load_small_csv(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("unit,1988,1989\nAZ,1,1.5\nCA,2,2.5\nNY,3,3.5\n")
    panel = load_panel(path)
    assert panel.units == ("AZ", "CA", "NY")
    assert panel.periods == ("1988", "1989")
    assert panel.y[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_missing_cell_is_named(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("unit,1988,1989\nAZ,1,1.5\nCA,,2.5\nNY,3,3.5\n")
    with pytest.raises(PanelError, match=r"'CA'.*line 3.*'1988'.*missing"):
        load_panel(path)


@pytest.mark.parametrize("body, message", [
    ("unit,a,b\nX,1,zz\nY,1,2\n", "non-numeric"),
    ("unit,a,b\nX,1,2\nX,1,2\n", "duplicate unit"),
    ("unit,a,a\nX,1,2\nY,1,2\n", "duplicate period"),
    ("unit,a,b\nX,1,2\n", "N >= 2"),
    ("unit,a\nX,1\nY,2\n", "T >= 2"),
    ("unit,a,b\nX,1,2,3\nY,1,2\n", "line 2 has 4 cells"),
    ("unit,a,b\nX,1,inf\nY,1,2\n", "non-finite"),
])
def test_malformed_csv(tmp_path, body, message):
    path = tmp_path / "p.csv"
    path.write_text(body)
    with pytest.raises(PanelError, match=message):
        load_panel(path)


def test_large_round_trip(tmp_path, rng):
    panel = Panel.from_array(rng.normal(size=(50, 40)) * 1e3,
                             units=[f"state{i}" for i in range(50)], periods=[str(1970 + t) for t in range(40)])
    path = tmp_path / "cps.csv"
    write_panel(panel, path)
    back = load_panel(path)
    assert (back.n, back.t) == (50, 40)
    assert back.units == panel.units and back.periods == panel.periods
    assert np.array_equal(back.y, panel.y)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e300, max_value=1e300)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(2, 5)), elements=finite))
def test_round_trip_is_exact(tmp_path_factory, y):
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    panel = Panel.from_array(y)
    write_panel(panel, path)
    once = load_panel(path)
    write_panel(once, path)
    twice = load_panel(path)
    assert np.array_equal(once.y, panel.y) and np.array_equal(twice.y, once.y)
    assert twice.units == panel.units and twice.periods == panel.periods


def test_json_round_trip(rng):
    panel = Panel.from_array(rng.normal(size=(3, 4)))
    doc = json.loads(dump_json(panel.to_json()))
    assert np.array_equal(Panel.from_json(doc).y, panel.y)


def test_dump_json_is_sorted_and_full_precision():
    text = dump_json({"b": 0.1, "a": [1, 2.5], "c": None})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert "0.10000000000000001" in text


def test_design_checks():
    panel = Panel.from_array(np.zeros((10, 3)))
    uniform = AssignmentDesign(DesignKind.UNIFORM_UNIT)
    assert validate_design(uniform, panel) is uniform
    assert validate_design(validate_design(uniform, panel), panel) is uniform
    three = Panel.from_array(np.zeros((3, 3)))
    fig3 = AssignmentDesign(DesignKind.PROPENSITY, propensity=[0.25, 0.5, 0.25])
    assert validate_design(fig3, three) is fig3
    with pytest.raises(PanelError, match="must lie in"):
        validate_design(AssignmentDesign(DesignKind.PROPENSITY, propensity=[0.5, 0.6, -0.1]), three)
    with pytest.raises(PanelError, match="sum to"):
        validate_design(AssignmentDesign(DesignKind.PROPENSITY, propensity=[0.5, 0.5, 1e-9]), three)
    with pytest.raises(PanelError, match="N_T"):
        validate_design(AssignmentDesign(DesignKind.UNIFORM_SUBSET, n_treated=3), three)


def test_design_support_probabilities():
    for kind in DesignKind:
        design = AssignmentDesign(kind, propensity=[0.2, 0.3, 0.5] if kind is DesignKind.PROPENSITY else None,
                                  n_treated=2 if kind is DesignKind.UNIFORM_SUBSET else 1)
        support = design.support(3, 4)
        assert sum(p for _, p in support) == pytest.approx(1.0, abs=1e-15)


def test_assignment_and_observe():
    pp = PotentialPanel(np.zeros((3, 2)), np.ones((3, 2)))
    a = Assignment(2, 1)
    obs = pp.observe(a)
    assert obs.y.tolist() == [[0, 0], [0, 0], [0, 1]]
    with pytest.raises(PanelError):
        Assignment((0, 1, 2), 0).check(3, 2)
    with pytest.raises(PanelError):
        Assignment(5, 0).check(3, 2)
