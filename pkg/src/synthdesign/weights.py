"""Weight-set families and the constrained least-squares fit of GSC weights.

A weight tensor holds, for every candidate treated unit ``i`` and period
``t``, an intercept ``M[i, 0, t]`` (``intercept[i, t]``) and unit weights
``M[i, j, t]`` (``w[i, j, t]``).  All families live inside the base set:
unit weight one on the treated unit, nonpositive weights elsewhere, and rows
summing to zero.

The objective for period ``t`` is the out-of-period fit::

    sum_i sum_{s != t} (M[i,0,t] + sum_j M[i,j,t] Y[j,s])^2

Families with an intercept use its exact partial minimiser, which reduces the
problem to the same quadratic in period-demeaned outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _qp
from ._parallel import map_ordered
from .panel import Panel, check_propensity, fmt

TOL_FEAS = 1e-9
TOL_KKT = 1e-8
RIDGE = 1e-10
MAX_ITER = 100_000


class Family(str, Enum):
    DIM = "dim"
    DID = "did"
    SC = "sc"
    MSC = "msc"
    USC = "usc"
    MUSC = "musc"
    MUSC_P = "musc_p"

    @property
    def has_intercept(self) -> bool:
        return self in (Family.DID, Family.MSC, Family.MUSC, Family.MUSC_P)

    @property
    def balanced(self) -> bool:
        """Column-sum (flow balance) constraint imposed."""
        return self in (Family.USC, Family.MUSC, Family.MUSC_P)

    @property
    def closed_form(self) -> bool:
        return self in (Family.DIM, Family.DID)

    @classmethod
    def parse(cls, name: str) -> "Family":
        key = str(name).strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ValueError(f"unknown family {name!r}; valid families: {valid}") from None


class WeightError(ValueError):
    pass


class SolverError(_qp.SolverError):
    pass


@dataclass(frozen=True, eq=False)
class WeightSetSpec:
    family: Family
    propensity: np.ndarray | None = None

    def __post_init__(self):
        fam = Family.parse(self.family) if not isinstance(self.family, Family) else self.family
        object.__setattr__(self, "family", fam)
        if (fam is Family.MUSC_P) != (self.propensity is not None):
            raise WeightError("a propensity vector is required for musc_p and only for musc_p")
        if self.propensity is not None:
            p = check_propensity(self.propensity).copy()
            p.setflags(write=False)
            object.__setattr__(self, "propensity", p)

    @classmethod
    def of(cls, family, propensity=None) -> "WeightSetSpec":
        if isinstance(family, WeightSetSpec):
            return family
        return cls(Family.parse(family) if isinstance(family, str) else family, propensity)

    @property
    def name(self) -> str:
        return self.family.value

    def to_json(self) -> dict:
        doc = {"family": self.family.value}
        if self.propensity is not None:
            doc["propensity"] = self.propensity.tolist()
        return doc


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Intercepts (N x T) and weights (N x N x T); NaN outside ``periods``."""

    intercept: np.ndarray
    w: np.ndarray
    spec: WeightSetSpec
    periods: tuple[int, ...]
    objective_value: float
    kkt_residual: float

    @property
    def family(self) -> Family:
        return self.spec.family

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def require(self, t: int) -> None:
        if t not in self.periods:
            raise WeightError(f"tensor has no weights for period {t}; fitted periods {list(self.periods)}")

    def slice(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(intercepts, N x N weight matrix) for period t."""
        self.require(t)
        return self.intercept[:, t], self.w[:, :, t]

    def to_json(self) -> dict:
        return {
            "family": self.spec.to_json(),
            "periods": list(self.periods),
            "intercept": np.where(np.isnan(self.intercept), None, self.intercept).tolist(),
            "w": np.where(np.isnan(self.w), None, self.w).tolist(),
            "objective_value": self.objective_value,
            "kkt_residual": self.kkt_residual,
        }

    def slice_csv(self, t: int, units: Sequence[str] | None = None) -> str:
        """Treated-period slice as CSV: rows = treated unit, columns = intercept + units."""
        icpt, w = self.slice(t)
        units = list(units) if units is not None else [str(i) for i in range(self.n)]
        lines = [",".join(["treated", "intercept", *units])]
        for i, lab in enumerate(units):
            lines.append(",".join([lab, fmt(icpt[i]), *(fmt(v) for v in w[i])]))
        return "\n".join(lines) + "\n"


def make_tensor(spec: WeightSetSpec, n: int, t_total: int, slices: dict[int, tuple[np.ndarray, np.ndarray]],
                objective_value: float = float("nan"), kkt: float = 0.0) -> WeightTensor:
    """Assemble a tensor from per-period (intercept, weight-matrix) slices."""
    icpt = np.full((n, t_total), np.nan)
    w = np.full((n, n, t_total), np.nan)
    for t, (c, m) in slices.items():
        icpt[:, t] = c
        w[:, :, t] = m
    icpt.setflags(write=False)
    w.setflags(write=False)
    return WeightTensor(icpt, w, spec, tuple(sorted(slices)), float(objective_value), float(kkt))


def _resolve_periods(panel_t: int, period_scope) -> list[int]:
    if period_scope is None:
        return [panel_t - 1]
    if isinstance(period_scope, str):
        if period_scope == "all":
            return list(range(panel_t))
        if period_scope == "last":
            return [panel_t - 1]
        raise WeightError(f"unknown period scope {period_scope!r}")
    if isinstance(period_scope, (int, np.integer)):
        ts = [int(period_scope)]
    else:
        ts = sorted({int(t) for t in period_scope})
    for t in ts:
        if not 0 <= t < panel_t:
            raise WeightError(f"period {t} out of range for T={panel_t}")
    return ts


# -- objective -------------------------------------------------------------

def residuals(y: np.ndarray, intercept: np.ndarray, m: np.ndarray, t: int) -> np.ndarray:
    """Fit residuals M0 + M Y_s for every s != t; shape (N, T-1)."""
    others = np.delete(y, t, axis=1)
    return intercept[:, None] + m @ others


def objective(panel: Panel, tensor: WeightTensor, period_scope="all") -> float:
    """Out-of-period squared fit summed over units and the requested periods."""
    if tensor.w.shape[:2] != (panel.n, panel.n) or tensor.w.shape[2] != panel.t:
        raise WeightError(f"tensor shape {tensor.w.shape} does not match panel {panel.n}x{panel.t}")
    ts = tensor.periods if period_scope == "all" else _resolve_periods(panel.t, period_scope)
    total = 0.0
    for t in ts:
        c, m = tensor.slice(t)
        total += float(np.sum(residuals(panel.y, c, m, t) ** 2))
    return total


def partial_intercepts(y: np.ndarray, m: np.ndarray, t: int) -> np.ndarray:
    """Intercepts minimising the period-t objective for fixed weights."""
    others = np.delete(y, t, axis=1)
    return -(m @ others).mean(axis=1)


# -- closed forms ------------------------------------------------------------

def dim_matrix(n: int) -> np.ndarray:
    m = np.full((n, n), -1.0 / (n - 1))
    np.fill_diagonal(m, 1.0)
    return m


def closed_form_weights(panel: Panel, family, period_scope="all") -> WeightTensor:
    """Difference-in-means or difference-in-differences weights."""
    spec = WeightSetSpec.of(family)
    if not spec.family.closed_form:
        raise WeightError(f"{spec.name} has no closed form; use solve_weights")
    n = panel.n
    m = dim_matrix(n)
    slices = {}
    for t in _resolve_periods(panel.t, period_scope):
        c = partial_intercepts(panel.y, m, t) if spec.family is Family.DID else np.zeros(n)
        slices[t] = (c, m.copy())
    tensor = make_tensor(spec, n, panel.t, slices)
    return _finish(panel, tensor)


def _finish(panel: Panel, tensor: WeightTensor, kkt: float | None = None) -> WeightTensor:
    obj = family_objective(panel, tensor)
    if kkt is None:
        kkt = kkt_residual(panel, tensor)
    return WeightTensor(tensor.intercept, tensor.w, tensor.spec, tensor.periods, obj, kkt)


def family_objective(panel: Panel, tensor: WeightTensor) -> float:
    """The objective the family minimises (propensity-weighted for musc_p)."""
    if tensor.family is not Family.MUSC_P:
        return objective(panel, tensor)
    p = tensor.spec.propensity
    total = 0.0
    for t in tensor.periods:
        c, m = tensor.slice(t)
        total += float(np.sum(p[:, None] * residuals(panel.y, c, m, t) ** 2))
    return total


# -- QP assembly -------------------------------------------------------------

@dataclass
class PeriodProblem:
    """The QP for one period plus what is needed to map x back to weights."""

    qp: _qp.BlockQP
    base: list[np.ndarray]       # coefficient vector at x = 0, per block
    objective_mask: list[np.ndarray]
    others: np.ndarray           # outcomes for s != t (units x periods)
    intercept: bool


def second_moment(others: np.ndarray, intercept: bool) -> np.ndarray:
    z = others - others.mean(axis=1, keepdims=True) if intercept else others
    return z @ z.T


def ridge_for(c: np.ndarray, n_periods: int) -> float:
    """Tie-break ridge relative to the mean per-period second moment."""
    level = float(np.trace(c)) / (c.shape[0] * max(n_periods, 1))
    return RIDGE * level if level > 0 else RIDGE


def build_problem(others: np.ndarray, bases: list[np.ndarray], cols: list[np.ndarray],
                  masks: list[np.ndarray], block_weights: np.ndarray, intercept: bool,
                  coupling: np.ndarray | None, target: np.ndarray | None) -> PeriodProblem:
    """Quadratic in x for residual coefficients ``base_r - sum_k x_rk e_{cols_rk} mask_rk``."""
    c = second_moment(others, intercept)
    lam = ridge_for(c, others.shape[1])
    hs, gs = [], []
    for base, col, mask, wt in zip(bases, cols, masks, block_weights):
        sub = c[np.ix_(col, col)] * np.outer(mask, mask)
        hs.append(2.0 * wt * sub)
        gs.append(-2.0 * wt * mask * (c[col] @ base))
    qp = _qp.BlockQP(hs, gs, cols, others.shape[0], ridge=2.0 * lam * float(np.mean(block_weights)),
                     coupling=coupling, coupling_target=target)
    return PeriodProblem(qp, bases, masks, others, intercept)


def unit_problem(y: np.ndarray, t: int, spec: WeightSetSpec, rows: Sequence[int] | None = None) -> PeriodProblem:
    """Standard GSC problem at period t for single treated units."""
    n = y.shape[0]
    others = np.delete(y, t, axis=1)
    rows = list(range(n)) if rows is None else list(rows)
    bases = [np.eye(n)[i] for i in rows]
    cols = [np.array([j for j in range(n) if j != i]) for i in rows]
    masks = [np.ones(n - 1) for _ in rows]
    if spec.family is Family.MUSC_P:
        wts = spec.propensity[rows]
    else:
        wts = np.ones(len(rows))
    coupling = target = None
    if spec.family.balanced:
        if spec.family is Family.MUSC_P:
            coupling, target = spec.propensity.copy(), spec.propensity.copy()
        else:
            coupling, target = np.ones(n), np.ones(n)
    return build_problem(others, bases, cols, masks, wts, spec.family.has_intercept, coupling, target)


def weights_from_x(prob: PeriodProblem, xs: list[np.ndarray], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of M (treated coefficient vectors) and intercepts from solver output."""
    rows = []
    for base, col, x in zip(prob.base, prob.qp.cols, xs):
        m = np.array(base, dtype=float)
        m[col] -= x
        rows.append(m)
    m = np.array(rows)
    if prob.intercept:
        icpt = -(m @ prob.others).mean(axis=1)
    else:
        icpt = np.zeros(len(rows))
    return icpt, m


def solve_problem(prob: PeriodProblem, warm=None) -> _qp.QPResult:
    try:
        return _qp.solve(prob.qp, warm_fixed=warm, max_iter=MAX_ITER)
    except _qp.SolverError as exc:
        raise SolverError(str(exc), exc.residual) from None


def _check_sizes(n: int, t: int, family: Family) -> None:
    if n < 2 or t < 2:
        raise WeightError(f"need N >= 2 and T >= 2, got N={n}, T={t}")
    if family.balanced and n < 3:
        raise WeightError(f"{family.value} needs N >= 3 (column constraints degenerate for N=2)")


def _solve_period(args):
    y, t, spec, warm = args
    n = y.shape[0]
    fam = spec.family
    if fam.balanced:
        prob = unit_problem(y, t, spec)
        res = solve_problem(prob, warm)
        c, m = weights_from_x(prob, res.x, n)
        return c, m, res.kkt, res.fixed
    # decoupled: one QP per treated unit
    cs, ms, kkt = [], [], 0.0
    for i in range(n):
        prob = unit_problem(y, t, spec, rows=[i])
        res = solve_problem(prob)
        c, m = weights_from_x(prob, res.x, n)
        cs.append(c[0])
        ms.append(m[0])
        kkt = max(kkt, res.kkt)
    return np.array(cs), np.array(ms), kkt, None


def solve_weights(panel: Panel, spec, period_scope=None, workers: int | None = None,
                  warm_start: bool = True) -> WeightTensor:
    """Minimise the out-of-period objective over a weight family.

    Parameters
    ----------
    panel : Panel
    spec : WeightSetSpec or family name
    period_scope : int, sequence of ints, "last" or "all"
        Periods for which weights are fitted; defaults to the last period.
    workers : int, optional
        Process pool size for fitting several periods at once.
    warm_start : bool
        Reuse the active set of the previous period (serial runs only).
    """
    spec = WeightSetSpec.of(spec)
    if spec.propensity is not None and spec.propensity.shape[0] != panel.n:
        raise WeightError(f"propensity length {spec.propensity.shape[0]} != N={panel.n}")
    if spec.family.closed_form:
        return closed_form_weights(panel, spec, period_scope if period_scope is not None else "last")
    _check_sizes(panel.n, panel.t, spec.family)
    ts = _resolve_periods(panel.t, period_scope)
    y = np.array(panel.y)
    slices, kkt = {}, 0.0
    if workers not in (None, 1) and len(ts) > 1:
        outs = map_ordered(_solve_period, [(y, t, spec, None) for t in ts], workers)
    else:
        outs, warm = [], None
        for t in ts:
            out = _solve_period((y, t, spec, warm if warm_start else None))
            warm = out[3]
            outs.append(out)
    for t, (c, m, k, _) in zip(ts, outs):
        slices[t] = (c, m)
        kkt = max(kkt, k)
    tensor = make_tensor(spec, panel.n, panel.t, slices)
    return _finish(panel, tensor, kkt)


# -- diagnostics -------------------------------------------------------------

def problem_x(tensor_rows: np.ndarray, prob: PeriodProblem) -> list[np.ndarray]:
    return [-(row[col] - base[col]) for row, base, col in zip(tensor_rows, prob.base, prob.qp.cols)]


def kkt_residual(panel: Panel, tensor: WeightTensor, spec=None) -> float:
    """Largest scaled violation of the optimality system for the family's QP.

    Zero for an exact optimum.  For the closed-form families only
    feasibility and intercept stationarity are checked.
    """
    spec = tensor.spec if spec is None else WeightSetSpec.of(spec)
    y = np.array(panel.y)
    worst = 0.0
    for t in tensor.periods:
        c, m = tensor.slice(t)
        worst = max(worst, _intercept_stationarity(y, c, m, t, spec.family))
        if spec.family.closed_form:
            worst = max(worst, float(np.abs(m - dim_matrix(panel.n)).max()))
            continue
        prob = unit_problem(y, t, spec)
        xs = problem_x(m, prob)
        if spec.family.balanced:
            worst = max(worst, _qp.kkt_residual(prob.qp, xs))
        else:
            for i in range(panel.n):
                sub = unit_problem(y, t, spec, rows=[i])
                worst = max(worst, _qp.kkt_residual(sub.qp, [xs[i]]))
    return worst


def _intercept_stationarity(y, c, m, t, family: Family) -> float:
    if not family.has_intercept:
        return float(np.abs(c).max())
    res = residuals(y, c, m, t)
    scale = max(1.0, float(np.abs(np.delete(y, t, axis=1)).max()))
    return float(np.abs(res.mean(axis=1)).max()) / scale


def membership_violations(tensor: WeightTensor, tol: float = TOL_FEAS) -> list[str]:
    """Describe every broken membership constraint (empty list when valid)."""
    out = []
    fam = tensor.family
    n = tensor.n
    for t in tensor.periods:
        c, m = tensor.slice(t)
        if np.abs(np.diag(m) - 1.0).max() > tol:
            out.append(f"t={t}: treated weight differs from 1")
        off = m[~np.eye(n, dtype=bool)]
        if off.max() > tol:
            out.append(f"t={t}: positive control weight {off.max():.3g}")
        if np.abs(m.sum(axis=1)).max() > tol:
            out.append(f"t={t}: row sums not zero (max {np.abs(m.sum(axis=1)).max():.3g})")
        if not fam.has_intercept and np.abs(c).max() > tol:
            out.append(f"t={t}: nonzero intercept for {fam.value}")
        if fam.closed_form and np.abs(off + 1.0 / (n - 1)).max() > tol:
            out.append(f"t={t}: weights differ from -1/(N-1)")
        if fam in (Family.USC, Family.MUSC) and np.abs(m.sum(axis=0)).max() > tol:
            out.append(f"t={t}: column sums not zero (max {np.abs(m.sum(axis=0)).max():.3g})")
        if fam is Family.MUSC_P:
            bal = tensor.spec.propensity @ m
            if np.abs(bal).max() > tol:
                out.append(f"t={t}: propensity-weighted column sums not zero (max {np.abs(bal).max():.3g})")
    return out


def assert_member(tensor: WeightTensor, tol: float = TOL_FEAS) -> None:
    bad = membership_violations(tensor, tol)
    if bad:
        raise WeightError("; ".join(bad))


def tensor_from_matrix(m, spec, t: int, t_total: int, intercept=None) -> WeightTensor:
    """Wrap a hand-built N x N weight matrix (and optional intercepts) at period t."""
    m = np.asarray(m, dtype=float)
    c = np.zeros(m.shape[0]) if intercept is None else np.asarray(intercept, dtype=float)
    return make_tensor(WeightSetSpec.of(spec), m.shape[0], t_total, {t: (c, m)})


def iter_rows(tensor: WeightTensor, t: int) -> Iterable[tuple[float, np.ndarray]]:
    c, m = tensor.slice(t)
    return zip(c, m)
