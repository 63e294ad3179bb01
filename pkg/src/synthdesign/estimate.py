"""Point estimates, true estimands and the exact conditional bias."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _qp
from .panel import Assignment, Panel, PotentialPanel
from .weights import (Family, WeightError, WeightSetSpec, WeightTensor, build_problem,
                      make_tensor, solve_problem)


class Estimand(str, Enum):
    TREATED = "tau"
    VERTICAL = "tau_v"
    HORIZONTAL = "tau_h"
    POPULATION = "tau_pop"


@dataclass(frozen=True)
class Estimate:
    value: float
    family: WeightSetSpec
    assignment: Assignment
    target: Estimand = Estimand.TREATED

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite estimate {self.value}")

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "family": self.family.to_json(),
            "treated_units": list(self.assignment.treated_units),
            "treated_period": self.assignment.treated_period,
            "target": self.target.value,
        }


def gsc_value(y_col: np.ndarray, intercept: np.ndarray, m: np.ndarray, i: int) -> float:
    return float(intercept[i] + m[i] @ y_col)


def gsc_estimate(panel: Panel, tensor: WeightTensor, a: Assignment,
                 target: Estimand = Estimand.TREATED) -> Estimate:
    """M[i,0,t] + sum_j M[i,j,t] Y[j,t] for the treated unit i and period t."""
    if a.n_treated != 1:
        raise WeightError("multi-unit assignment: use multitreat.multi_gsc_estimate")
    a.check(panel.n, panel.t)
    if tensor.n != panel.n:
        raise WeightError(f"tensor has {tensor.n} units, panel has {panel.n}")
    c, m = tensor.slice(a.treated_period)
    return Estimate(gsc_value(panel.y[:, a.treated_period], c, m, a.unit), tensor.spec, a, target)


def true_estimands(pp: PotentialPanel, a: Assignment) -> dict[Estimand, float]:
    effect = pp.y1 - pp.y0
    t = a.treated_period
    units = list(a.treated_units)
    return {
        Estimand.TREATED: float(effect[units, t].mean()),
        Estimand.VERTICAL: float(effect[:, t].mean()),
        Estimand.HORIZONTAL: float(effect[units].mean()),
        Estimand.POPULATION: float(effect.mean()),
    }


def exact_sc_bias(y0, tensor: WeightTensor, treated_period: int) -> float:
    """Bias of the estimator under uniform unit assignment at a fixed period.

    (1/N) sum_j Y[j,t](0) sum_i M[i,j,t] plus (1/N) sum_i M[i,0,t]; the
    second term vanishes for families without an intercept.
    """
    y0 = np.asarray(y0, dtype=float)
    c, m = tensor.slice(treated_period)
    n = m.shape[0]
    return float(y0[:, treated_period] @ m.sum(axis=0) / n + c.sum() / n)


# -- vertical estimand, uncorrelated potential outcomes ----------------------

def vertical_objective(panel: Panel, tensor: WeightTensor, t: int) -> float:
    """Out-of-period fit of the vertical-effect loss under uncorrelated outcomes.

    For each candidate treated unit i the residual at period s is
    M[i,0] + mean_j Y[j,s] + sum_{j != i} M[i,j] Y[j,s].
    """
    c, m = tensor.slice(t)
    y = np.delete(panel.y, t, axis=1)
    n = panel.n
    shrunk = m - np.eye(n) + 1.0 / n
    return float(np.sum((c[:, None] + shrunk @ y) ** 2))


def vertical_weights_uncorrelated(panel: Panel, a: Assignment) -> WeightTensor:
    """MUSC-set weights minimising the vertical-effect loss for uncorrelated outcomes.

    The loss averages over which unit is treated, so the treated unit's own
    weight drops out of its residual and every other weight is shifted by
    1/N.  The result shrinks MUSC weights towards difference-in-means.
    """
    n, t = panel.n, a.treated_period
    a.check(n, panel.t)
    if n < 3:
        raise WeightError(f"musc needs N >= 3, got N={n}")
    y = np.array(panel.y)
    others = np.delete(y, t, axis=1)
    bases = [np.full(n, 1.0 / n) for _ in range(n)]
    cols = [np.array([j for j in range(n) if j != i]) for i in range(n)]
    masks = [np.ones(n - 1) for _ in range(n)]
    prob = build_problem(others, bases, cols, masks, np.ones(n), True, np.ones(n), np.ones(n))
    res = solve_problem(prob)
    m = np.eye(n)
    for i, (col, x) in enumerate(zip(cols, res.x)):
        m[i, col] = -x
    shrunk = m - np.eye(n) + 1.0 / n
    c = -(shrunk @ others).mean(axis=1)
    tensor = make_tensor(WeightSetSpec(Family.MUSC), n, panel.t, {t: (c, m)}, kkt=res.kkt)
    return WeightTensor(tensor.intercept, tensor.w, tensor.spec, tensor.periods,
                        vertical_objective(panel, tensor, t), res.kkt)


def kkt_vertical(panel: Panel, tensor: WeightTensor, t: int) -> float:
    n = panel.n
    others = np.delete(panel.y, t, axis=1)
    cols = [np.array([j for j in range(n) if j != i]) for i in range(n)]
    prob = build_problem(others, [np.full(n, 1.0 / n)] * n, cols, [np.ones(n - 1)] * n,
                         np.ones(n), True, np.ones(n), np.ones(n))
    _, m = tensor.slice(t)
    return _qp.kkt_residual(prob.qp, [-m[i, col] for i, col in enumerate(cols)])
