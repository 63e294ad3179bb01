"""Flow-network view of a no-intercept weight slice.

Edge i -> j carries w[i, j] = -M[j, i, t]: how much control i contributes
when j is treated.  Every vertex then has inflow one, and flow balance
(outflow equal to inflow) is the column-sum constraint of the unbiased
families.  Propensities that make the slice unbiased are the stationary
vector of W, which is its eigenvector centrality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .weights import TOL_FEAS, WeightTensor

NULL_TOL = 1e-10
GRAY_ZONE = 1e-6
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


class NetworkError(ValueError):
    pass


class MultiplePropensityWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    w: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise NetworkError(f"flow matrix must be square, got {w.shape}")
        np.fill_diagonal(w, 0.0)
        if (w < -TOL_FEAS).any():
            raise NetworkError("negative flow")
        w = np.maximum(w, 0.0)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(w.shape[0])))

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def inflow(self) -> np.ndarray:
        return self.w.sum(axis=0)

    def outflow(self) -> np.ndarray:
        return self.w.sum(axis=1)

    def to_matrix(self) -> np.ndarray:
        """Weight slice the network came from: unit diagonal, M[j, i] = -w[i, j]."""
        m = -self.w.T.copy()
        np.fill_diagonal(m, 1.0)
        return m

    def to_dot(self) -> str:
        lines = ["digraph flows {"]
        for lab in self.labels:
            lines.append(f'  "{lab}";')
        for i, j in zip(*np.nonzero(self.w > TOL_FEAS)):
            lines.append(f'  "{self.labels[i]}" -> "{self.labels[j]}" [label="{self.w[i, j]:.3f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        edges = [{"from": self.labels[i], "to": self.labels[j], "flow": float(self.w[i, j])}
                 for i, j in zip(*np.nonzero(self.w > TOL_FEAS))]
        return {"vertices": list(self.labels), "edges": edges}


def weights_to_network(tensor: WeightTensor, t: int, labels=()) -> FlowNetwork:
    c, m = tensor.slice(t)
    if np.abs(c).max() > TOL_FEAS:
        raise NetworkError("network view needs zero intercepts; use the sc or usc families")
    off = m[~np.eye(m.shape[0], dtype=bool)]
    if off.size and off.max() > TOL_FEAS:
        raise NetworkError("positive control weight; slice is not in the base weight set")
    return FlowNetwork(-m.T, tuple(labels))


def flow_balance(net: FlowNetwork) -> np.ndarray:
    """Outflow minus inflow at every vertex."""
    return net.outflow() - net.inflow()


@dataclass(frozen=True)
class Components:
    strongly_connected: bool
    labels: np.ndarray
    count: int

    def closed(self, net: FlowNetwork) -> list[int]:
        """Components with no flow arriving from outside."""
        out = []
        for comp in range(self.count):
            inside = self.labels == comp
            if not (net.w[np.ix_(~inside, inside)] > TOL_FEAS).any():
                out.append(comp)
        return out


def is_strongly_connected(net: FlowNetwork) -> Components:
    adj = csr_matrix(net.w > TOL_FEAS)
    count, labels = connected_components(adj, directed=True, connection="strong")
    return Components(count == 1, labels, int(count))


@dataclass(frozen=True)
class Centrality:
    p: np.ndarray
    iterations: int
    shifted: bool
    residual: float


def eigenvector_centrality(net: FlowNetwork) -> Centrality:
    """Nonnegative fixed point W p = p with sum(p) = 1, by power iteration.

    Periodic networks do not converge under plain iteration; the lazy walk
    (W + I)/2 has the same fixed point and is used as a fallback.
    """
    if not is_strongly_connected(net).strongly_connected:
        raise NetworkError("network is not strongly connected; decompose into components first")
    w = net.w
    p, it, res = _power(w)
    shifted = False
    if res > POWER_TOL:
        p, it2, res = _power(0.5 * (w + np.eye(net.n)))
        it += it2
        shifted = True
        if res > POWER_TOL:
            raise NetworkError(f"power iteration did not converge (residual {res:.3g})")
    return Centrality(p, it, shifted, float(np.abs(w @ p - p).max()))


def _power(a: np.ndarray) -> tuple[np.ndarray, int, float]:
    n = a.shape[0]
    p = np.full(n, 1.0 / n)
    res = np.inf
    for it in range(1, POWER_MAX_ITER + 1):
        q = a @ p
        q /= q.sum()
        res = float(np.abs(a @ q - q).max())
        p = q
        if res <= POWER_TOL:
            return p, it, res
    return p, POWER_MAX_ITER, res


def unbiased_propensities(tensor: WeightTensor, t: int) -> np.ndarray:
    """Propensities p on the simplex with M' p = 0, making the slice unbiased.

    When the network splits into several closed components each carries its
    own solution; their equal mixture is returned with a warning.
    """
    net = weights_to_network(tensor, t)
    m = net.to_matrix()
    comps = is_strongly_connected(net)
    if comps.strongly_connected:
        return _null_simplex(m.T)
    closed = comps.closed(net)
    if len(closed) > 1:
        warnings.warn(f"{len(closed)} closed components; propensity vector not unique",
                      MultiplePropensityWarning, stacklevel=2)
    p = np.zeros(net.n)
    for comp in closed:
        idx = np.flatnonzero(comps.labels == comp)
        p[idx] += _null_simplex(m[np.ix_(idx, idx)].T) / len(closed)
    return p


def _null_simplex(a: np.ndarray) -> np.ndarray:
    if a.shape[0] == 1:
        return np.ones(1)
    _, s, vt = np.linalg.svd(a)
    top = s[0] if s[0] > 0 else 1.0
    small = s <= NULL_TOL * top
    ambiguous = (s > NULL_TOL * top) & (s <= GRAY_ZONE * top)
    if small.sum() != 1 or ambiguous.any():
        raise NetworkError(f"null space not one-dimensional; singular values {s.tolist()}")
    q = vt[-1]
    return np.abs(q) / np.abs(q).sum()
