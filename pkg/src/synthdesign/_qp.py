"""Primal active-set solver for block-structured convex QPs.

Problem form::

    min   sum_r  1/2 x_r' (H_r + ridge I) x_r + g_r' x_r
    s.t.  sum_j x_rj = 1                          for every block r
          sum_r q_r x_r[cols_r == j] = b_j          for every unit j   (optional)
          x >= 0

Each block r is the vector of (negated) control weights for one candidate
treated unit or subset; ``cols_r`` maps its entries to unit indices.  The
equality system is solved by eliminating the row constraints block by block
and then the column constraints through an ``n_units x n_units`` Schur
complement, so an iteration costs O(sum_r n_r^2 + n_units^3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EIG_CLIP = 1e-12
STEP_TOL = 1e-14


class SolverError(RuntimeError):
    """Raised when the active-set iteration fails to converge."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class InfeasibleError(ValueError):
    pass


@dataclass
class BlockQP:
    hessians: list[np.ndarray]
    linears: list[np.ndarray]
    cols: list[np.ndarray]
    n_units: int
    ridge: float = 0.0
    coupling: np.ndarray | None = None
    coupling_target: np.ndarray | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.hessians)

    @property
    def coupled(self) -> bool:
        return self.coupling is not None

    def scale(self) -> float:
        hmax = max((float(np.abs(h).max()) if h.size else 0.0) for h in self.hessians)
        gmax = max((float(np.abs(g).max()) if g.size else 0.0) for g in self.linears)
        return max(1.0, hmax, gmax)


@dataclass
class QPResult:
    x: list[np.ndarray]
    row_mult: np.ndarray
    col_mult: np.ndarray | None
    iterations: int
    kkt: float
    fixed: list[np.ndarray] = field(repr=False, default_factory=list)


def _block_inverse(h: np.ndarray, ridge: float) -> np.ndarray:
    if h.shape[0] == 0:
        return h.copy()
    vals, vecs = np.linalg.eigh(h)
    top = max(float(vals[-1]), 0.0)
    vals = np.where(vals < EIG_CLIP * top, 0.0, vals) + ridge
    if np.any(vals <= 0):
        raise SolverError("singular block Hessian (zero ridge and flat data)")
    return (vecs / vals) @ vecs.T


class _ActiveSet:
    def __init__(self, qp: BlockQP, fixed: list[np.ndarray]):
        self.qp = qp
        self.fixed = [f.copy() for f in fixed]
        self._inv: list[np.ndarray | None] = [None] * qp.n_blocks

    def invalidate(self, r: int) -> None:
        self._inv[r] = None

    def inv(self, r: int) -> np.ndarray:
        if self._inv[r] is None:
            free = ~self.fixed[r]
            h = self.qp.hessians[r][np.ix_(free, free)]
            self._inv[r] = _block_inverse(h, self.qp.ridge)
        return self._inv[r]

    def solve(self, g, row_rhs, col_rhs):
        """Solve H x + g = alpha 1 + q beta on free variables, A x = rhs."""
        qp = self.qp
        n = qp.n_units
        bases, projs, alphas_parts = [], [], []
        for r in range(qp.n_blocks):
            free = ~self.fixed[r]
            ginv = self.inv(r)
            gf = g[r][free]
            a = ginv.sum(axis=1)
            s = a.sum()
            v = ginv @ gf
            h = a @ gf
            base = -v + a * (row_rhs[r] + h) / s
            bases.append(base)
            projs.append((ginv, a, s))
            alphas_parts.append((row_rhs[r] + h) / s)
        beta = None
        if qp.coupled:
            q = qp.coupling
            S = np.zeros((n, n))
            rhs = np.array(col_rhs, dtype=float)
            for r in range(qp.n_blocks):
                free = ~self.fixed[r]
                cf = qp.cols[r][free]
                ginv, a, s = projs[r]
                K = ginv - np.outer(a, a) / s
                S[np.ix_(cf, cf)] += q[r] ** 2 * K
                np.subtract.at(rhs, cf, q[r] * bases[r])
            beta = np.linalg.lstsq(S, rhs, rcond=1e-13)[0]
        xs, alphas = [], np.empty(qp.n_blocks)
        for r in range(qp.n_blocks):
            free = ~self.fixed[r]
            x = np.zeros(len(self.fixed[r]))
            ginv, a, s = projs[r]
            xf = bases[r]
            alpha = alphas_parts[r]
            if beta is not None:
                bf = beta[qp.cols[r][free]]
                qr = qp.coupling[r]
                xf = xf + qr * (ginv @ bf - a * (a @ bf) / s)
                alpha = alpha - qr * (a @ bf) / s
            x[free] = xf
            xs.append(x)
            alphas[r] = alpha
        return xs, alphas, beta

    def residuals(self, xs, alphas, beta):
        qp = self.qp
        e1 = []
        for r in range(qp.n_blocks):
            grad = qp.hessians[r] @ xs[r] + qp.ridge * xs[r] + qp.linears[r]
            mult = alphas[r] + (qp.coupling[r] * beta[qp.cols[r]] if beta is not None else 0.0)
            e = grad - mult
            e[self.fixed[r]] = 0.0
            e1.append(e)
        e2 = np.array([1.0 - x.sum() for x in xs])
        e3 = None
        if qp.coupled:
            e3 = qp.coupling_target - column_sums(qp, xs)
        return e1, e2, e3

    def eqp(self, refine: int = 3):
        qp = self.qp
        zeros = np.zeros(qp.n_units)
        xs, alphas, beta = self.solve(qp.linears, np.ones(qp.n_blocks),
                                      qp.coupling_target if qp.coupled else zeros)
        tol = 1e-15 * self.qp.scale()
        for _ in range(refine):
            e1, e2, e3 = self.residuals(xs, alphas, beta)
            worst = max(max(float(np.abs(e).max()) if e.size else 0.0 for e in e1), float(np.abs(e2).max()))
            if e3 is not None:
                worst = max(worst, float(np.abs(e3).max()))
            if worst <= tol:
                break
            dx, da, db = self.solve(e1, e2, e3 if e3 is not None else zeros)
            xs = [x + d for x, d in zip(xs, dx)]
            alphas = alphas + da
            if beta is not None:
                beta = beta + db
        return xs, alphas, beta


def column_sums(qp: BlockQP, xs: list[np.ndarray]) -> np.ndarray:
    out = np.zeros(qp.n_units)
    for r, x in enumerate(xs):
        np.add.at(out, qp.cols[r], qp.coupling[r] * x)
    return out


def reduced_costs(qp: BlockQP, xs, alphas, beta) -> list[np.ndarray]:
    out = []
    for r in range(qp.n_blocks):
        grad = qp.hessians[r] @ xs[r] + qp.ridge * xs[r] + qp.linears[r]
        mult = alphas[r] + (qp.coupling[r] * beta[qp.cols[r]] if beta is not None else 0.0)
        out.append(grad - mult)
    return out


def kkt_residual(qp: BlockQP, xs: list[np.ndarray], free_tol: float = 1e-12) -> float:
    """Scaled KKT violation of ``xs`` for ``qp``.

    Multipliers are fitted by least squares on the free variables; when the
    free set does not pin them down and the fit leaves dual violations, the
    multipliers minimising the worst violation are found by a small LP.
    """
    scale = qp.scale()
    feas = max(abs(1.0 - x.sum()) for x in xs)
    feas = max(feas, max(float(np.maximum(-x, 0).max()) if x.size else 0.0 for x in xs))
    if qp.coupled:
        feas = max(feas, float(np.abs(qp.coupling_target - column_sums(qp, xs)).max()))
    grads = np.concatenate([qp.hessians[r] @ xs[r] + qp.ridge * xs[r] + qp.linears[r]
                            for r in range(qp.n_blocks)])
    x = np.concatenate(xs)
    a = _multiplier_map(qp)
    free = x > free_tol
    y = np.linalg.lstsq(a[free], grads[free], rcond=1e-13)[0]
    viol = _dual_violation(grads - a @ y, x, free)
    if viol > 1e-12 * scale:
        viol = min(viol, _minimax_violation(a, grads, free))
    return max(feas, viol / scale)


def _multiplier_map(qp: BlockQP) -> np.ndarray:
    n_r, n = qp.n_blocks, qp.n_units
    a = np.zeros((sum(len(c) for c in qp.cols), n_r + (n if qp.coupled else 0)))
    off = 0
    for r, col in enumerate(qp.cols):
        idx = off + np.arange(len(col))
        a[idx, r] = 1.0
        if qp.coupled:
            a[idx, n_r + col] = qp.coupling[r]
        off += len(col)
    return a


def _dual_violation(z: np.ndarray, x: np.ndarray, free: np.ndarray) -> float:
    stat = float(np.abs(z[free]).max()) if free.any() else 0.0
    dual = float(np.maximum(-z[~free], 0).max()) if (~free).any() else 0.0
    comp = float(np.abs(z[~free] * x[~free]).max()) if (~free).any() else 0.0
    return max(stat, dual, comp)


def _minimax_violation(a: np.ndarray, grads: np.ndarray, free: np.ndarray) -> float:
    from scipy.optimize import linprog

    m, k = a.shape
    c = np.zeros(k + 1)
    c[-1] = 1.0
    # z = g - a y;  |z| <= s on free entries,  -z <= s on fixed entries
    ones = np.ones((m, 1))
    rows = [np.hstack([-a[free], -ones[free]]), np.hstack([a, -ones])]
    rhs = [-grads[free], grads]
    res = linprog(c, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs),
                  bounds=[(None, None)] * k + [(0, None)], method="highs")
    return float(res.x[-1]) if res.status == 0 else float("inf")


def _feasible_start(qp: BlockQP) -> list[np.ndarray]:
    if not qp.coupled or _uniform_start_ok(qp):
        return [np.full(len(c), 1.0 / len(c)) for c in qp.cols]
    from scipy.optimize import linprog

    sizes = [len(c) for c in qp.cols]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    nv = int(offsets[-1])
    a_eq = np.zeros((qp.n_blocks + qp.n_units, nv))
    for r in range(qp.n_blocks):
        a_eq[r, offsets[r]:offsets[r + 1]] = 1.0
        a_eq[qp.n_blocks + qp.cols[r], offsets[r] + np.arange(sizes[r])] = qp.coupling[r]
    b_eq = np.concatenate([np.ones(qp.n_blocks), qp.coupling_target])
    # maximise the smallest entry so the start is as interior as the polytope allows
    c = np.zeros(nv + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-np.eye(nv), np.ones((nv, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(nv),
                  A_eq=np.hstack([a_eq, np.zeros((a_eq.shape[0], 1))]), b_eq=b_eq,
                  bounds=[(0, None)] * nv + [(0, 1)], method="highs")
    if res.status != 0:
        raise InfeasibleError("weight set is empty for this propensity vector")
    x = np.maximum(res.x[:nv], 0.0)
    return [x[offsets[r]:offsets[r + 1]].copy() for r in range(qp.n_blocks)]


def _uniform_start_ok(qp: BlockQP) -> bool:
    xs = [np.full(len(c), 1.0 / len(c)) for c in qp.cols]
    return bool(np.abs(column_sums(qp, xs) - qp.coupling_target).max() < 1e-12)


def solve(qp: BlockQP, warm_fixed: list[np.ndarray] | None = None,
          max_iter: int = 100_000) -> QPResult:
    """Run the primal active-set method to optimality."""
    scale = qp.scale()
    dual_tol = 1e-11 * scale

    state = None
    if warm_fixed is not None:
        trial = _ActiveSet(qp, warm_fixed)
        if all((~f).any() for f in warm_fixed):
            xs, _, _ = trial.eqp()
            ok = all(x.min() >= -STEP_TOL for x in xs)
            if ok and qp.coupled:
                ok = np.abs(column_sums(qp, xs) - qp.coupling_target).max() < 1e-10
            if ok:
                state, x = trial, [np.maximum(v, 0.0) for v in xs]
    if state is None:
        x = _feasible_start(qp)
        state = _ActiveSet(qp, [v <= 0.0 for v in x])

    for it in range(1, max_iter + 1):
        xs, alphas, beta = state.eqp()
        step, block = 1.0, None
        for r in range(qp.n_blocks):
            free = ~state.fixed[r]
            d = xs[r] - x[r]
            cand = free & (d < -STEP_TOL)
            for k in np.flatnonzero(cand):
                ratio = x[r][k] / (x[r][k] - xs[r][k])
                if ratio < step:
                    step, block = ratio, (r, k)
        if block is not None:
            x = [xi + step * (xn - xi) for xi, xn in zip(x, xs)]
            r, k = block
            x[r][k] = 0.0
            x[r] = np.maximum(x[r], 0.0)
            state.fixed[r][k] = True
            state.invalidate(r)
            continue
        x = [np.maximum(v, 0.0) for v in xs]
        z = reduced_costs(qp, x, alphas, beta)
        worst, release = -dual_tol, None
        for r in range(qp.n_blocks):
            fixed = state.fixed[r]
            if fixed.any():
                zr = np.where(fixed, z[r], np.inf)
                k = int(np.argmin(zr))
                if zr[k] < worst:
                    worst, release = zr[k], (r, k)
        if release is None:
            return QPResult(x, alphas, beta, it, kkt_residual(qp, x), state.fixed)
        r, k = release
        state.fixed[r][k] = False
        state.invalidate(r)
    raise SolverError(f"active-set iteration limit {max_iter} reached", kkt_residual(qp, x))
