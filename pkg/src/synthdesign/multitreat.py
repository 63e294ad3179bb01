"""Several treated units: subset-indexed balanced weights and their variance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .estimate import Estimand, Estimate
from .panel import Assignment, Panel
from .weights import (Family, WeightError, WeightSetSpec, _resolve_periods, build_problem,
                      residuals, solve_problem)

K_MAX = 5000


class SubsetSizeError(WeightError):
    pass


@dataclass(frozen=True)
class SubsetIndex:
    n: int
    n_t: int
    subsets: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.subsets)

    @property
    def n_c(self) -> int:
        return self.n - self.n_t

    def position(self, units) -> int:
        key = tuple(sorted(int(u) for u in units))
        try:
            return self._lookup[key]
        except KeyError:
            raise WeightError(f"subset {list(key)} not in the index (N={self.n}, N_T={self.n_t})") from None

    @property
    def _lookup(self) -> dict:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {s: r for r, s in enumerate(self.subsets)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def membership(self) -> np.ndarray:
        """K x N indicator matrix."""
        out = np.zeros((self.k, self.n), dtype=bool)
        for r, s in enumerate(self.subsets):
            out[r, list(s)] = True
        return out


def enumerate_subsets(n: int, n_t: int, k_max: int = K_MAX) -> SubsetIndex:
    """All size-n_t subsets of range(n) in lexicographic order."""
    if not 1 <= n_t <= n - 1:
        raise SubsetSizeError(f"need 1 <= N_T <= N-1, got N_T={n_t}, N={n}")
    k = math.comb(n, n_t)
    if k > k_max:
        raise SubsetSizeError(f"K = C({n},{n_t}) = {k} exceeds the limit {k_max}")
    return SubsetIndex(n, n_t, tuple(combinations(range(n), n_t)))


@dataclass(frozen=True, eq=False)
class MultiWeightTensor:
    """Intercepts (K x T) and weights (K x N x T) for every treated subset."""

    index: SubsetIndex
    intercept: np.ndarray
    w: np.ndarray
    periods: tuple[int, ...]
    objective_value: float
    kkt_residual: float

    def slice(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if t not in self.periods:
            raise WeightError(f"tensor has no weights for period {t}; fitted periods {list(self.periods)}")
        return self.intercept[:, t], self.w[:, :, t]

    def to_json(self, units=None) -> dict:
        labels = list(units) if units is not None else list(range(self.index.n))
        return {
            "family": "musc",
            "n_treated": self.index.n_t,
            "subsets": [sorted(labels[u] for u in s) for s in self.index.subsets],
            "periods": list(self.periods),
            "intercept": np.where(np.isnan(self.intercept), None, self.intercept).tolist(),
            "w": np.where(np.isnan(self.w), None, self.w).tolist(),
            "objective_value": self.objective_value,
            "kkt_residual": self.kkt_residual,
        }


def _subset_problem(y: np.ndarray, t: int, index: SubsetIndex):
    n, n_t = index.n, index.n_t
    others = np.delete(y, t, axis=1)
    bases, cols = [], []
    for s in index.subsets:
        base = np.zeros(n)
        base[list(s)] = 1.0 / n_t
        bases.append(base)
        cols.append(np.array([j for j in range(n) if j not in s]))
    masks = [np.ones(len(c)) for c in cols]
    # each unit is a control in C(N-1, N_T) subsets and treated, with weight 1/N_T, in K N_T/N
    target = np.full(n, index.k / n)
    return build_problem(others, bases, cols, masks, np.ones(index.k), True, np.ones(index.k), target), others


def solve_multi_weights(panel: Panel, n_t: int, period_scope=None, k_max: int = K_MAX) -> MultiWeightTensor:
    """Balanced weights with an intercept for every treated subset of size n_t."""
    index = enumerate_subsets(panel.n, n_t, k_max)
    if index.n_c < 2:
        raise SubsetSizeError(f"need at least two controls, got N_C={index.n_c}")
    if panel.n < 3:
        raise SubsetSizeError("balanced weights need N >= 3")
    y = np.array(panel.y)
    ts = _resolve_periods(panel.t, period_scope)
    icpt = np.full((index.k, panel.t), np.nan)
    w = np.full((index.k, panel.n, panel.t), np.nan)
    obj = kkt = 0.0
    warm = None
    for t in ts:
        prob, others = _subset_problem(y, t, index)
        res = solve_problem(prob, warm)
        warm = res.fixed
        m = np.array(prob.base)
        for r, (col, x) in enumerate(zip(prob.qp.cols, res.x)):
            m[r, col] = -x
        c = -(m @ others).mean(axis=1)
        icpt[:, t] = c
        w[:, :, t] = m
        obj += float(np.sum(residuals(y, c, m, t) ** 2))
        kkt = max(kkt, res.kkt)
    icpt.setflags(write=False)
    w.setflags(write=False)
    return MultiWeightTensor(index, icpt, w, tuple(ts), obj, kkt)


def multi_tensor_from_matrix(index: SubsetIndex, m, intercept, t: int, t_total: int) -> MultiWeightTensor:
    icpt = np.full((index.k, t_total), np.nan)
    w = np.full((index.k, index.n, t_total), np.nan)
    icpt[:, t] = intercept
    w[:, :, t] = m
    return MultiWeightTensor(index, icpt, w, (t,), float("nan"), float("nan"))


def balance_violation(mt: MultiWeightTensor) -> float:
    """Largest column sum over fitted periods (zero for balanced weights)."""
    return max(float(np.abs(mt.slice(t)[1].sum(axis=0)).max()) for t in mt.periods)


def multi_gsc_estimate(panel: Panel, mt: MultiWeightTensor, a: Assignment) -> Estimate:
    a.check(panel.n, panel.t)
    k = mt.index.position(a.treated_units)
    c, m = mt.slice(a.treated_period)
    value = float(c[k] + m[k] @ panel.y[:, a.treated_period])
    return Estimate(value, WeightSetSpec(Family.MUSC), a, Estimand.TREATED)


def multi_exact_variance(y0, mt: MultiWeightTensor, t: int) -> float:
    y0 = np.asarray(y0, dtype=float)
    c, m = mt.slice(t)
    return float(np.mean((c + m @ y0[:, t]) ** 2))


def multi_unbiased_variance_estimate(panel: Panel, mt: MultiWeightTensor, a: Assignment,
                                     leave_fold_out: bool = False) -> float:
    """Design-unbiased variance estimate from the realised treated subset.

    Sums corrections over the subsets disjoint from the treated one, using
    only control outcomes.  With ``leave_fold_out`` the intercept term is
    averaged over those disjoint subsets instead of all subsets.
    """
    index = mt.index
    n_t, n_c = index.n_t, index.n_c
    if n_c < n_t + 2:
        raise SubsetSizeError(
            f"need N_C >= N_T + 2 so that C(N_C-2, N_T) > 0; got N_C={n_c}, N_T={n_t}")
    treated = set(a.treated_units)
    if len(treated) != n_t:
        raise WeightError(f"assignment treats {len(treated)} units, tensor is for N_T={n_t}")
    t = a.treated_period
    c, m = mt.slice(t)
    y = panel.y[:, t]
    c2 = math.comb(n_c - 2, n_t)
    c1 = math.comb(n_c - 1, n_t)
    lin = diag = cross = own = 0.0
    for r, s in enumerate(index.subsets):
        if treated.intersection(s):
            continue
        rest = [j for j in range(index.n) if j not in treated and j not in s]
        b = m[r, rest] * (y[rest] - y[list(s)].mean())
        lin += b.sum() ** 2
        diag += (b ** 2).sum()
        cross += c[r] * b.sum()
        own += c[r] ** 2
    if leave_fold_out:
        icpt = own / math.comb(n_c, n_t)
    else:
        icpt = float(np.mean(c ** 2))
    return lin / c2 - n_t * diag / ((n_c - 1) * c2) + 2.0 * cross / c1 + icpt


def counting_identity(n: int, n_t: int, a: np.ndarray) -> tuple[float, float]:
    """Both sides of the subset counting identity for a tensor a[k, j, j'].

    ``j`` and ``j'`` run over 0 (the intercept) and units 1..N.  The identity
    holds when a[k, j, j'] vanishes whenever j or j' is a member of subset k.
    Needs N_C >= N_T + 2 so every pair of controls lies outside some subset.
    Returns (left, right).
    """
    index = enumerate_subsets(n, n_t, k_max=10 ** 9)
    member = index.membership()
    n_c = n - n_t
    if n_c < n_t + 2:
        raise SubsetSizeError(f"counting identity needs N_C >= N_T + 2; got N_C={n_c}, N_T={n_t}")
    left = 0.0
    for kk, _ in enumerate(index.subsets):
        outside = [0] + [j + 1 for j in range(n) if not member[kk, j]]
        for ii, s in enumerate(index.subsets):
            if member[kk, list(s)].any():
                continue
            # entries on members of subset ii vanish; skipping them avoids 0/0 counts
            free = [j for j in outside if j == 0 or not member[ii, j - 1]]
            for j in free:
                for jp in free:
                    real = {u for u in (j, jp) if u > 0}
                    left += a[ii, j, jp] / math.comb(n_c - len(real), n_t)
    return left, float(a.sum())
