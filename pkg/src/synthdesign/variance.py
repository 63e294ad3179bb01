"""Exact randomization variance, its unbiased estimate, and the placebo variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._parallel import map_ordered
from .panel import Assignment, Panel
from .weights import Family, WeightError, WeightSetSpec, WeightTensor, solve_weights


class UnsupportedSizeError(WeightError):
    pass


@dataclass(frozen=True)
class VarianceReport:
    unbiased_estimate: float
    n_units: int
    treated_period: int
    family: str
    exact: float | None = None
    placebo_estimate: float | None = None

    @property
    def negative(self) -> bool:
        return self.unbiased_estimate < 0

    @property
    def standard_error(self) -> float:
        return standard_error(self.unbiased_estimate)

    def to_json(self) -> dict:
        doc = {
            "unbiased_estimate": self.unbiased_estimate,
            "standard_error": self.standard_error,
            "negative_estimate": self.negative,
            "n_units": self.n_units,
            "treated_period": self.treated_period,
            "family": self.family,
            "exact": self.exact,
            "placebo_estimate": self.placebo_estimate,
        }
        if self.placebo_estimate is not None:
            doc["placebo_standard_error"] = standard_error(self.placebo_estimate)
        return doc


def standard_error(v: float) -> float:
    return float(np.sqrt(max(v, 0.0)))


def exact_variance(y0, tensor: WeightTensor, treated_period: int) -> float:
    """Mean over treated units of the squared error under zero effects."""
    y0 = np.asarray(y0, dtype=float)
    c, m = tensor.slice(treated_period)
    return float(np.mean((c + m @ y0[:, treated_period]) ** 2))


def unbiased_variance_estimate(panel: Panel, tensor: WeightTensor, a: Assignment) -> float:
    """Design-unbiased estimate of the exact variance from the realised assignment.

    Uses only control outcomes at the treated period.  Needs N >= 4.  The
    value can be negative for families other than difference-in-means.
    """
    n = panel.n
    if n < 4:
        raise UnsupportedSizeError(f"unbiased variance estimate needs N >= 4 (denominators N-3, N-2); got N={n}")
    i, t = a.unit, a.treated_period
    c, m = tensor.slice(t)
    keep = np.array([k for k in range(n) if k != i])
    y = panel.y[keep, t]
    mk = m[np.ix_(keep, keep)]
    diff = y[:, None] - y[None, :]          # Y_k - Y_j
    contrast = (mk * diff).sum(axis=1)
    ck = c[keep]
    return float(
        (contrast ** 2).sum() / (n - 3)
        - (mk ** 2 * diff ** 2).sum() / ((n - 2) * (n - 3))
        - 2.0 * (ck * contrast).sum() / (n - 2)
        + (c ** 2).sum() / n
    )


def _placebo_weights(panel: Panel, spec: WeightSetSpec, i: int, t: int) -> WeightTensor:
    keep = [k for k in range(panel.n) if k != i]
    sub = panel.subset_units(keep)
    if spec.family is Family.MUSC_P:
        p = np.delete(spec.propensity, i)
        if p.sum() <= 0:
            raise WeightError("propensity of the controls sums to zero")
        spec = WeightSetSpec(Family.MUSC_P, p / p.sum())
    return solve_weights(sub, spec, t)


def placebo_effects(panel: Panel, spec, a: Assignment) -> np.ndarray:
    """Pseudo-effects of each control after dropping the treated unit and refitting."""
    spec = WeightSetSpec.of(spec)
    n, i, t = panel.n, a.unit, a.treated_period
    if n < 3:
        raise UnsupportedSizeError(f"placebo variance needs N >= 3; got N={n}")
    if spec.family.balanced and n - 1 < 3:
        raise UnsupportedSizeError(
            f"placebo refit for {spec.name} has N-1={n - 1} units; the family needs at least 3")
    tensor = _placebo_weights(panel, spec, i, t)
    c, m = tensor.slice(t)
    y = np.delete(panel.y[:, t], i)
    return c + m @ y


def placebo_variance_estimate(panel: Panel, spec, a: Assignment) -> float:
    return float(np.mean(placebo_effects(panel, spec, a) ** 2))


def variance_report(panel: Panel, tensor: WeightTensor, a: Assignment, y0=None,
                    with_placebo: bool = False) -> VarianceReport:
    v = unbiased_variance_estimate(panel, tensor, a)
    if v < 0:
        warnings.warn(f"negative unbiased variance estimate {v:.6g} for {tensor.spec.name}", stacklevel=2)
    exact = exact_variance(y0, tensor, a.treated_period) if y0 is not None else None
    plac = placebo_variance_estimate(panel, tensor.spec, a) if with_placebo else None
    return VarianceReport(v, panel.n, a.treated_period, tensor.spec.name, exact, plac)


def placebo_variances(panel: Panel, spec, assignments, workers: int | None = None) -> list[float]:
    """Placebo variance for several assignments, computed over the worker pool."""
    spec = WeightSetSpec.of(spec)
    return map_ordered(_placebo_task, [(panel, spec, a) for a in assignments], workers)


def _placebo_task(args):
    panel, spec, a = args
    return placebo_variance_estimate(panel, spec, a)
