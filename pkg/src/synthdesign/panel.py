"""Panels, potential outcomes, assignments and assignment designs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

PROPENSITY_TOL = 1e-12


class PanelError(ValueError):
    """Malformed panel input or an incompatible design."""


def fmt(x: float) -> str:
    """17 significant digits: round-trips every double exactly."""
    return format(float(x), ".17g")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Panel:
    """Observed N x T outcome matrix with unit and period labels."""

    units: tuple[str, ...]
    periods: tuple[str, ...]
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "periods", tuple(str(p) for p in self.periods))
        object.__setattr__(self, "y", _frozen(self.y))
        n, t = len(self.units), len(self.periods)
        if self.y.shape != (n, t):
            raise PanelError(f"outcome matrix has shape {self.y.shape}, labels imply {(n, t)}")
        if n < 2 or t < 2:
            raise PanelError(f"panel needs N >= 2 and T >= 2, got N={n}, T={t}")
        if not np.all(np.isfinite(self.y)):
            i, j = np.argwhere(~np.isfinite(self.y))[0]
            raise PanelError(f"non-finite outcome for unit {self.units[i]!r}, period {self.periods[j]!r}")
        for kind, labels in (("unit", self.units), ("period", self.periods)):
            seen = set()
            for lab in labels:
                if lab in seen:
                    raise PanelError(f"duplicate {kind} label {lab!r}")
                seen.add(lab)

    @property
    def n(self) -> int:
        return len(self.units)

    @property
    def t(self) -> int:
        return len(self.periods)

    @classmethod
    def from_array(cls, y, units: Sequence | None = None, periods: Sequence | None = None) -> "Panel":
        y = np.asarray(y, dtype=float)
        units = units if units is not None else [f"u{i}" for i in range(y.shape[0])]
        periods = periods if periods is not None else [str(t) for t in range(y.shape[1])]
        return cls(tuple(units), tuple(periods), y)

    def unit_index(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.n:
                raise PanelError(f"unit index {label} out of range")
            return int(label)
        try:
            return self.units.index(str(label))
        except ValueError:
            raise PanelError(f"unknown unit {label!r}") from None

    def period_index(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.t:
                raise PanelError(f"period index {label} out of range")
            return int(label)
        if str(label) == "last":
            return self.t - 1
        try:
            return self.periods.index(str(label))
        except ValueError:
            raise PanelError(f"unknown period {label!r}") from None

    def with_column(self, t: int, column) -> "Panel":
        y = np.array(self.y)
        y[:, t] = column
        return Panel(self.units, self.periods, y)

    def subset_units(self, keep: Sequence[int]) -> "Panel":
        keep = list(keep)
        return Panel(tuple(self.units[i] for i in keep), self.periods, self.y[keep])

    def to_json(self) -> dict:
        return {"units": list(self.units), "periods": list(self.periods),
                "y": [[float(v) for v in row] for row in self.y]}

    @classmethod
    def from_json(cls, doc: dict) -> "Panel":
        return cls(tuple(doc["units"]), tuple(doc["periods"]), np.array(doc["y"], dtype=float))


@dataclass(frozen=True, eq=False)
class PotentialPanel:
    """Both potential-outcome matrices; only the randomization lab posits Y(1)."""

    y0: np.ndarray
    y1: np.ndarray
    units: tuple[str, ...] = ()
    periods: tuple[str, ...] = ()

    def __post_init__(self):
        y0, y1 = _frozen(self.y0), _frozen(self.y1)
        if y0.ndim != 2 or y0.shape != y1.shape:
            raise PanelError(f"potential outcome shapes differ: {y0.shape} vs {y1.shape}")
        if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(y1))):
            raise PanelError("potential outcomes must be finite")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y1", y1)
        n, t = y0.shape
        if not self.units:
            object.__setattr__(self, "units", tuple(f"u{i}" for i in range(n)))
        if not self.periods:
            object.__setattr__(self, "periods", tuple(str(s) for s in range(t)))

    @classmethod
    def zero_effect(cls, y0, **labels) -> "PotentialPanel":
        y0 = np.asarray(y0, dtype=float)
        return cls(y0, y0.copy(), **labels)

    @property
    def n(self) -> int:
        return self.y0.shape[0]

    @property
    def t(self) -> int:
        return self.y0.shape[1]

    def control_panel(self) -> Panel:
        return Panel(self.units, self.periods, self.y0)

    def observe(self, a: "Assignment") -> Panel:
        """Realised outcomes under W = U V'."""
        y = np.array(self.y0)
        cells = list(a.treated_units)
        y[cells, a.treated_period] = self.y1[cells, a.treated_period]
        return Panel(self.units, self.periods, y)


@dataclass(frozen=True)
class Assignment:
    treated_units: tuple[int, ...]
    treated_period: int

    def __post_init__(self):
        units = self.treated_units
        if isinstance(units, (int, np.integer)):
            units = (int(units),)
        units = tuple(sorted(int(u) for u in units))
        if not units:
            raise PanelError("assignment needs at least one treated unit")
        if len(set(units)) != len(units):
            raise PanelError("treated units repeated")
        object.__setattr__(self, "treated_units", units)
        object.__setattr__(self, "treated_period", int(self.treated_period))

    @property
    def unit(self) -> int:
        if len(self.treated_units) != 1:
            raise PanelError("assignment treats several units; use the multi-unit routines")
        return self.treated_units[0]

    @property
    def n_treated(self) -> int:
        return len(self.treated_units)

    def check(self, n: int, t: int) -> "Assignment":
        if not all(0 <= u < n for u in self.treated_units):
            raise PanelError(f"treated unit index out of range for N={n}")
        if not 0 <= self.treated_period < t:
            raise PanelError(f"treated period index out of range for T={t}")
        if self.n_treated > n - 1:
            raise PanelError(f"N_T={self.n_treated} leaves no control units (N={n})")
        return self


class DesignKind(str, Enum):
    UNIFORM_UNIT = "uniform-unit"
    UNIFORM_TIME = "uniform-time"
    UNIFORM_UNIT_TIME = "uniform-unit-and-time"
    PROPENSITY = "propensity"
    UNIFORM_SUBSET = "uniform-subset"


@dataclass(frozen=True, eq=False)
class AssignmentDesign:
    kind: DesignKind
    propensity: np.ndarray | None = None
    n_treated: int = 1
    treated_period: int | None = None
    treated_unit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DesignKind(self.kind))
        if self.propensity is not None:
            object.__setattr__(self, "propensity", _frozen(self.propensity))

    def support(self, n: int, t: int) -> list[tuple[Assignment, float]]:
        """Every assignment with positive probability, in a fixed order."""
        from itertools import combinations

        kind = self.kind
        tp = t - 1 if self.treated_period is None else self.treated_period
        if kind is DesignKind.UNIFORM_UNIT:
            return [(Assignment((i,), tp), 1.0 / n) for i in range(n)]
        if kind is DesignKind.UNIFORM_TIME:
            i = 0 if self.treated_unit is None else self.treated_unit
            return [(Assignment((i,), s), 1.0 / t) for s in range(t)]
        if kind is DesignKind.UNIFORM_UNIT_TIME:
            return [(Assignment((i,), s), 1.0 / (n * t)) for s in range(t) for i in range(n)]
        if kind is DesignKind.PROPENSITY:
            return [(Assignment((i,), tp), float(p)) for i, p in enumerate(self.propensity) if p > 0]
        k = math.comb(n, self.n_treated)
        return [(Assignment(c, tp), 1.0 / k) for c in combinations(range(n), self.n_treated)]


def validate_design(design: AssignmentDesign, panel: Panel | PotentialPanel) -> AssignmentDesign:
    """Check a design against panel dimensions; returns the design unchanged."""
    n, t = panel.n, panel.t
    if design.kind is DesignKind.PROPENSITY:
        p = design.propensity
        if p is None:
            raise PanelError("propensity design needs a propensity vector")
        check_propensity(p, n)
    if design.kind is DesignKind.UNIFORM_SUBSET:
        if not 1 <= design.n_treated <= n - 1:
            raise PanelError(f"N_T={design.n_treated} must lie in [1, N-1] = [1, {n - 1}]")
    if design.treated_period is not None and not 0 <= design.treated_period < t:
        raise PanelError(f"treated period {design.treated_period} out of range for T={t}")
    if design.treated_unit is not None and not 0 <= design.treated_unit < n:
        raise PanelError(f"treated unit {design.treated_unit} out of range for N={n}")
    return design


def check_propensity(p, n: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or (n is not None and p.shape[0] != n):
        raise PanelError(f"propensity vector must have length {n}, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise PanelError("propensity entries must be finite")
    if np.any(p < 0) or np.any(p > 1):
        raise PanelError(f"propensity entries must lie in [0, 1]: {p.tolist()}")
    if abs(p.sum() - 1.0) > PROPENSITY_TOL:
        raise PanelError(f"propensities sum to {p.sum()!r}, not 1")
    return p


# -- CSV / JSON --------------------------------------------------------------

def load_panel(path: str | Path, delimiter: str = ",") -> Panel:
    """Read a CSV with period labels in the header and unit labels in column one."""
    path = Path(path)
    if not path.exists():
        raise PanelError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise PanelError(f"{path}: empty file")
    header = rows[0]
    periods = [c.strip() for c in header[1:]]
    if any(not p for p in periods):
        raise PanelError(f"{path}: blank period label in header")
    units, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise PanelError(f"{path}: line {lineno} has {len(row)} cells, header has {len(header)}")
        label = row[0].strip()
        if not label:
            raise PanelError(f"{path}: line {lineno} has a blank unit label")
        vals = []
        for col, cell in enumerate(row[1:]):
            cell = cell.strip()
            where = f"{path}: unit {label!r} (line {lineno}), period {periods[col]!r}"
            if cell == "":
                raise PanelError(f"{where}: missing value")
            try:
                v = float(cell)
            except ValueError:
                raise PanelError(f"{where}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise PanelError(f"{where}: non-finite value {cell!r}")
            vals.append(v)
        units.append(label)
        values.append(vals)
    if not values:
        raise PanelError(f"{path}: no unit rows")
    try:
        return Panel(tuple(units), tuple(periods), np.array(values))
    except PanelError as exc:
        raise PanelError(f"{path}: {exc}") from None


def write_panel(panel: Panel, path: str | Path, delimiter: str = ",") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["unit", *panel.periods])
        for label, row in zip(panel.units, panel.y):
            w.writerow([label, *(fmt(v) for v in row)])


def dump_json(doc, fh=None) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    text = _encode(doc, 0)
    if fh is not None:
        fh.write(text + "\n")
    return text


def _encode(obj, depth: int) -> str:
    pad, inner = "  " * depth, "  " * (depth + 1)
    if isinstance(obj, Enum):
        obj = obj.value
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "NaN"
        if math.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        return fmt(v)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{inner}{json.dumps(k)}: {_encode(v, depth + 1)}" for k, v in items)
        return "{\n" + body + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, depth + 1) for v in obj) + "]"
        body = ",\n".join(inner + _encode(v, depth + 1) for v in obj)
        return "[\n" + body + "\n" + pad + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")
