"""Randomization laboratory: exact enumeration and Monte Carlo over assignment designs.

Weights for a treated period never look at that period's outcomes, so one
fit on the control outcomes serves every assignment that shares the treated
period.  Enumerations therefore fit once per (family, period) and evaluate
estimates per assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_ordered
from .estimate import Estimand, exact_sc_bias, gsc_value, true_estimands
from .panel import Assignment, PanelError, PotentialPanel, check_propensity, fmt
from .variance import exact_variance, placebo_variance_estimate, unbiased_variance_estimate
from .weights import WeightSetSpec, WeightTensor, solve_weights

ENUMERATION_LIMIT = 10_000


@dataclass(frozen=True)
class ExperimentRow:
    family: str
    bias: float | None = None
    rmse: float | None = None
    variance: float | None = None
    avg_standard_error: float | None = None
    exact_variance_mean: float | None = None
    extra: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        doc = {
            "family": self.family,
            "bias": self.bias,
            "rmse": self.rmse,
            "variance": self.variance,
            "avg_standard_error": self.avg_standard_error,
            "exact_variance_mean": self.exact_variance_mean,
            "error": self.error,
        }
        doc.update(self.extra)
        return doc


@dataclass(frozen=True)
class ExperimentReport:
    design: str
    rows: tuple[ExperimentRow, ...]
    enumerated: bool
    n_assignments: int
    seed: int | None = None
    draws: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.enumerated and self.seed is not None:
            raise ValueError("enumerated runs carry no seed")

    def row(self, family: str) -> ExperimentRow:
        for r in self.rows:
            if r.family == family:
                return r
        raise KeyError(family)

    def to_json(self) -> dict:
        return {
            "design": self.design,
            "enumerated": self.enumerated,
            "n_assignments": self.n_assignments,
            "seed": self.seed,
            "draws": self.draws,
            "meta": self.meta,
            "rows": [r.to_json() for r in self.rows],
        }

    def to_table(self, width: int = 12) -> str:
        """Fixed-width table: one column per family, rows Bias / RMSE / Average standard error."""
        names = [r.family for r in self.rows]
        head = " " * 24 + "".join(f"{n:>{width}}" for n in names)
        lines = [head]
        for label, attr in (("Bias", "bias"), ("RMSE", "rmse"), ("Average standard error", "avg_standard_error")):
            cells = []
            for r in self.rows:
                v = getattr(r, attr)
                cells.append(f"{'-' if v is None else f'{v:.4f}':>{width}}")
            lines.append(f"{label:<24}" + "".join(cells))
        return "\n".join(lines) + "\n"


def _summarise(family: str, errors: np.ndarray, probs: np.ndarray | None = None, **kw) -> ExperimentRow:
    w = np.full(len(errors), 1.0 / len(errors)) if probs is None else probs
    bias = float(w @ errors)
    mse = float(w @ errors ** 2)
    var = float(w @ (errors - bias) ** 2)
    return ExperimentRow(family, bias, math.sqrt(mse), var, **kw)


def _fit(pp: PotentialPanel, spec: WeightSetSpec, scope) -> WeightTensor:
    return solve_weights(pp.control_panel(), spec, scope)


def _resolve_period(pp: PotentialPanel, t) -> int:
    if t is None or t == "last":
        return pp.t - 1
    t = int(t)
    if not 0 <= t < pp.t:
        raise PanelError(f"treated period {t} out of range for T={pp.t}")
    return t


# -- unit randomization ------------------------------------------------------

def _unit_row(args) -> ExperimentRow:
    pp, spec, t, with_variance, with_placebo = args
    try:
        tensor = _fit(pp, spec, t)
        c, m = tensor.slice(t)
        errors, v_hats, placebos = [], [], []
        for i in range(pp.n):
            a = Assignment((i,), t)
            obs = pp.observe(a)
            errors.append(gsc_value(obs.y[:, t], c, m, i) - true_estimands(pp, a)[Estimand.TREATED])
            if with_variance:
                v_hats.append(unbiased_variance_estimate(obs, tensor, a))
            if with_placebo:
                placebos.append(placebo_variance_estimate(obs, spec, a))
        extra = {"weight_bias": exact_sc_bias(pp.y0, tensor, t), "kkt_residual": tensor.kkt_residual}
        se = None
        if with_variance:
            mean_v = float(np.mean(v_hats))
            extra["mean_variance_estimate"] = mean_v
            se = math.sqrt(max(mean_v, 0.0))
        if with_placebo:
            extra["mean_placebo_variance"] = float(np.mean(placebos))
        return _summarise(spec.name, np.array(errors), avg_standard_error=se,
                          exact_variance_mean=exact_variance(pp.y0, tensor, t), extra=extra)
    except (ValueError, RuntimeError) as exc:
        return ExperimentRow(spec.name, error=f"{type(exc).__name__}: {exc}")


def run_unit_randomization(pp: PotentialPanel, families, treated_period=None, with_variance: bool | None = None,
                           with_placebo: bool = False, workers: int | None = None) -> ExperimentReport:
    """Treat each unit in turn at the treated period and summarise the errors exactly."""
    t = _resolve_period(pp, treated_period)
    if with_variance is None:
        with_variance = pp.n >= 4
    specs = [WeightSetSpec.of(f) for f in families]
    rows = map_ordered(_unit_row, [(pp, s, t, with_variance, with_placebo) for s in specs], workers)
    return ExperimentReport("uniform-unit", tuple(rows), True, pp.n, meta={"treated_period": t})


# -- time randomization ------------------------------------------------------

def _time_row(args) -> ExperimentRow:
    pp, spec, i = args
    try:
        tensor = _fit(pp, spec, "all")
        errors = []
        for t in range(pp.t):
            a = Assignment((i,), t)
            c, m = tensor.slice(t)
            obs = pp.observe(a)
            errors.append(gsc_value(obs.y[:, t], c, m, i) - true_estimands(pp, a)[Estimand.TREATED])
        row = _summarise(spec.name, np.array(errors), extra={"kkt_residual": tensor.kkt_residual})
        return ExperimentRow(row.family, row.bias, row.rmse, row.variance,
                             extra={**row.extra, "mse": row.rmse ** 2})
    except (ValueError, RuntimeError) as exc:
        return ExperimentRow(spec.name, error=f"{type(exc).__name__}: {exc}")


def run_time_randomization(pp: PotentialPanel, families, treated_unit: int = 0,
                           workers: int | None = None) -> ExperimentReport:
    """Treat a fixed unit in each period in turn; weights refit leaving that period out."""
    if pp.t < 3:
        raise PanelError(f"time randomization needs T >= 3, got T={pp.t}")
    if not 0 <= treated_unit < pp.n:
        raise PanelError(f"treated unit {treated_unit} out of range for N={pp.n}")
    specs = [WeightSetSpec.of(f) for f in families]
    rows = map_ordered(_time_row, [(pp, s, treated_unit) for s in specs], workers)
    return ExperimentReport("uniform-time", tuple(rows), True, pp.t, meta={"treated_unit": treated_unit})


# -- treated subsets ---------------------------------------------------------

def run_subset_randomization(pp: PotentialPanel, n_t: int, treated_period=None, k_max: int | None = None,
                             with_variance: bool = True) -> ExperimentReport:
    """Enumerate every treated subset of size n_t with balanced subset weights."""
    from . import multitreat as mt_mod

    t = _resolve_period(pp, treated_period)
    k_max = mt_mod.K_MAX if k_max is None else k_max
    k = math.comb(pp.n, n_t)
    if k > min(k_max, ENUMERATION_LIMIT):
        raise mt_mod.SubsetSizeError(f"K = C({pp.n},{n_t}) = {k} exceeds the limit {min(k_max, ENUMERATION_LIMIT)}")
    mt = mt_mod.solve_multi_weights(pp.control_panel(), n_t, t, k_max)
    errors, v_hats = [], []
    can_estimate = with_variance and pp.n - n_t >= n_t + 2
    for s in mt.index.subsets:
        a = Assignment(s, t)
        obs = pp.observe(a)
        errors.append(mt_mod.multi_gsc_estimate(obs, mt, a).value - true_estimands(pp, a)[Estimand.TREATED])
        if can_estimate:
            v_hats.append(mt_mod.multi_unbiased_variance_estimate(obs, mt, a))
    extra = {"kkt_residual": mt.kkt_residual, "n_treated": n_t}
    se = None
    if can_estimate:
        extra["mean_variance_estimate"] = float(np.mean(v_hats))
        se = math.sqrt(max(extra["mean_variance_estimate"], 0.0))
    row = _summarise("musc", np.array(errors), avg_standard_error=se,
                     exact_variance_mean=mt_mod.multi_exact_variance(pp.y0, mt, t), extra=extra)
    return ExperimentReport("uniform-subset", (row,), True, mt.index.k, meta={"treated_period": t})


# -- non-uniform propensities ------------------------------------------------

def run_propensity_monte_carlo(pp: PotentialPanel, spec, draws: int, seed: int, treated_period=None,
                               tensor: WeightTensor | None = None, propensity=None) -> ExperimentReport:
    """Exact propensity-weighted bias alongside a seeded Monte Carlo estimate.

    ``tensor`` overrides the fitted weights (for instance hand-built SC
    weights); ``propensity`` overrides the assignment probabilities, which
    otherwise come from the weight set.
    """
    spec = WeightSetSpec.of(spec)
    p = propensity if propensity is not None else spec.propensity
    if p is None:
        raise PanelError("a propensity vector is required")
    p = check_propensity(p, pp.n)
    if draws < 1:
        raise PanelError("draws must be at least 1")
    t = _resolve_period(pp, treated_period)
    tensor = _fit(pp, spec, t) if tensor is None else tensor
    c, m = tensor.slice(t)
    errors = np.array([
        gsc_value(pp.observe(Assignment((i,), t)).y[:, t], c, m, i)
        - true_estimands(pp, Assignment((i,), t))[Estimand.TREATED]
        for i in range(pp.n)
    ])
    rng = np.random.default_rng(seed)
    picks = rng.choice(pp.n, size=draws, p=p)
    sample = errors[picks]
    mc_bias = float(sample.mean())
    mc_se = float(sample.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan")
    row = _summarise(tensor.spec.name, errors, p, extra={
        "mc_bias": mc_bias, "mc_bias_standard_error": mc_se,
        "mc_rmse": float(math.sqrt(np.mean(sample ** 2))),
    })
    return ExperimentReport("propensity", (row,), False, pp.n, seed=seed, draws=draws,
                            meta={"treated_period": t, "propensity": p.tolist()})


# -- constructors ------------------------------------------------------------

def adversarial_bias_panel(n: int) -> PotentialPanel:
    """Binary panel (T = N, zero effects) on which synthetic control has bias (N-2)/N.

    Unit 0 is zero throughout.  Unit u >= 1 is one in period u-1 and in the
    last period.  Synthetic control matches unit 0 evenly to all others and
    every other unit fully to unit 0.
    """
    if n < 4:
        raise PanelError(f"adversarial panel needs n >= 4, got {n}")
    y = np.zeros((n, n))
    for u in range(1, n):
        y[u, u - 1] = 1.0
        y[u, n - 1] = 1.0
    return PotentialPanel.zero_effect(y)


def placebo_example_panels(a: float = 0.0, b: float = 1.0, c: float = 1.0, d: float = 0.0) -> dict[str, PotentialPanel]:
    """Two 4 x 3 zero-effect panels where units match in pairs.

    In "understated" the pair partners differ by one at the treated period,
    so the true variance is one and the placebo variance falls short of it.
    In "overstated" the partners agree exactly, the true variance is zero and
    the placebo variance exceeds it.  Pairing needs a - b != c - d.  The
    placebo refits carry intercepts of order (a + b) - (c + d), so the
    understated direction only holds when that gap is small; the defaults
    make it zero.
    """
    if a - b == c - d:
        raise PanelError("a - b must differ from c - d, otherwise all units share one trend and do not pair up")
    under = np.array([[a, b, 0.0], [a, b, 1.0], [c, d, 0.0], [c, d, 1.0]])
    over = np.array([[a, b, 1.0], [a, b, 1.0], [c, d, 0.0], [c, d, 0.0]])
    return {"understated": PotentialPanel.zero_effect(under), "overstated": PotentialPanel.zero_effect(over)}


def unit_covariance(n: int, correlation: float, structure: str = "toeplitz") -> np.ndarray:
    """Cross-unit covariance: rho^|i-j| (units on a line) or equicorrelation."""
    idx = np.arange(n)
    if structure == "toeplitz":
        cov = correlation ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    elif structure == "equicorrelated":
        cov = np.full((n, n), float(correlation))
        np.fill_diagonal(cov, 1.0)
    else:
        raise PanelError(f"unknown covariance structure {structure!r}; use toeplitz or equicorrelated")
    return cov


def stationary_synthetic_panel(n: int, t: int, correlation: float = 0.7, ar: float = 0.5, seed: int = 0,
                               structure: str = "toeplitz", cov=None, effect: float = 0.0) -> PotentialPanel:
    """Stationary Gaussian panel with cross-unit covariance and AR(1) dynamics.

    Each period's vector is ar * previous + sqrt(1 - ar^2) * N(0, cov), started
    from the stationary law, so every period has covariance ``cov``.
    """
    if not abs(ar) < 1:
        raise PanelError(f"AR coefficient must satisfy |ar| < 1, got {ar}")
    cov = unit_covariance(n, correlation, structure) if cov is None else np.asarray(cov, dtype=float)
    if cov.shape != (n, n) or not np.allclose(cov, cov.T):
        raise PanelError("covariance must be a symmetric n x n matrix")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise PanelError("cross-unit covariance is not positive definite") from None
    rng = np.random.default_rng(seed)
    shocks = chol @ rng.standard_normal((n, t))
    y = np.empty((n, t))
    y[:, 0] = shocks[:, 0]
    scale = math.sqrt(1.0 - ar * ar)
    for s in range(1, t):
        y[:, s] = ar * y[:, s - 1] + scale * shocks[:, s]
    return PotentialPanel(y, y + effect)


def report_summary(report: ExperimentReport) -> str:
    """One line per family with bias and RMSE at full precision."""
    return "\n".join(f"{r.family}: bias={fmt(r.bias)} rmse={fmt(r.rmse)}" if r.error is None
                     else f"{r.family}: {r.error}" for r in report.rows) + "\n"
