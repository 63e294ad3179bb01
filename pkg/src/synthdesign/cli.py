"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
long option names with dashes replaced by underscores.  Command-line flags
override config values.  Exit status is 2 for invalid input and 3 when the
solver fails to converge.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import network as net_mod
from . import randlab, weights
from .estimate import gsc_estimate
from .multitreat import K_MAX, multi_gsc_estimate, multi_unbiased_variance_estimate, solve_multi_weights
from .panel import Assignment, Panel, PotentialPanel, dump_json, load_panel
from .variance import (placebo_effects, placebo_variance_estimate, standard_error,
                       unbiased_variance_estimate)
from .weights import Family, SolverError, WeightSetSpec

EXIT_INVALID = 2
EXIT_SOLVER = 3

TOLERANCE_RANGES = {
    "tol_feas": (1e-15, 1e-3),
    "tol_kkt": (1e-15, 1e-3),
    "max_iter": (1, 10_000_000),
    "k_max": (1, 1_000_000),
}


class ConfigError(ValueError):
    pass


# -- parsing -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default option values")
    p.add_argument("--panel", help="CSV panel: header of period labels, first column unit labels")
    p.add_argument("--output", help="write the report here instead of stdout")
    p.add_argument("--emit", choices=["json", "table", "dot"], help="output format (default json)")
    p.add_argument("--tol-feas", type=float)
    p.add_argument("--tol-kkt", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default from SYNTHDESIGN_WORKERS)")


def _treatment(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", help="dim, did, sc, msc, usc, musc or musc_p")
    p.add_argument("--propensity", help="comma-separated propensities (musc_p)")
    p.add_argument("--treated-unit", help="unit label")
    p.add_argument("--treated-period", help="period label or 'last'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthdesign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit weights, estimate the effect and its variance")
    _common(fit)
    _treatment(fit)
    fit.add_argument("--variance", action=argparse.BooleanOptionalAction, default=None,
                     help="report the unbiased variance estimate (needs N >= 4)")
    fit.add_argument("--full-period-scope", action="store_true", default=None,
                     help="fit weights for every period, not just the treated one")
    fit.add_argument("--truncate-negative-variance", action="store_true", default=None)

    var = sub.add_parser("variance", help="unbiased variance estimate for a realised assignment")
    _common(var)
    _treatment(var)
    var.add_argument("--truncate-negative-variance", action="store_true", default=None)

    plac = sub.add_parser("placebo", help="placebo variance from refits without the treated unit")
    _common(plac)
    _treatment(plac)

    net = sub.add_parser("network", help="flow network, centrality and unbiased propensities")
    _common(net)
    net.add_argument("--family", help="a family without intercept: dim, sc or usc")
    net.add_argument("--treated-period", help="period label or 'last'")

    sim = sub.add_parser("simulate", help="exact randomization experiment on a panel")
    _common(sim)
    sim.add_argument("--design", help="uniform-unit, uniform-time, propensity or subset")
    sim.add_argument("--families", help="comma-separated family list")
    sim.add_argument("--treated-panel", help="CSV of treated potential outcomes (default: zero effects)")
    sim.add_argument("--treated-unit", help="unit label (uniform-time)")
    sim.add_argument("--treated-period", help="period label or 'last'")
    sim.add_argument("--propensity", help="comma-separated propensities")
    sim.add_argument("--draws", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--nt", type=int, help="treated subset size (subset design)")
    sim.add_argument("--k-max", type=int)
    sim.add_argument("--synthetic", help="N,T of a stationary synthetic panel instead of --panel")
    sim.add_argument("--correlation", type=float)
    sim.add_argument("--ar", type=float)

    multi = sub.add_parser("multi", help="several treated units with balanced subset weights")
    _common(multi)
    multi.add_argument("--treated-units", help="comma-separated unit labels")
    multi.add_argument("--treated-period", help="period label or 'last'")
    multi.add_argument("--k-max", type=int)
    multi.add_argument("--leave-fold-out", action="store_true", default=None)
    return parser


def resolve_options(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse flags, then fill unset options from the config file."""
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        known = set(vars(args)) - {"command", "config"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}; valid keys {sorted(known)}")
        for key, value in doc.items():
            if getattr(args, key) is None:
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                setattr(args, key, value)
    for key, (lo, hi) in TOLERANCE_RANGES.items():
        value = getattr(args, key, None)
        if value is not None and not lo <= value <= hi:
            raise ConfigError(f"{key.replace('_', '-')}={value} outside [{lo:g}, {hi:g}]")
    return args


# -- helpers -------------------------------------------------------------------

def _panel(args) -> Panel:
    if not args.panel:
        raise ConfigError("--panel is required")
    return load_panel(args.panel)


def _spec(args, n: int) -> WeightSetSpec:
    if not args.family:
        raise ConfigError("--family is required")
    family = Family.parse(args.family)
    p = _floats(args.propensity) if getattr(args, "propensity", None) else None
    if family is Family.MUSC_P and p is None:
        raise ConfigError("musc_p needs --propensity")
    if p is not None and len(p) != n:
        raise ConfigError(f"--propensity has {len(p)} entries, panel has N={n}")
    return WeightSetSpec(family, p if family is Family.MUSC_P else None)


def _floats(text) -> np.ndarray:
    try:
        return np.array([float(v) for v in str(text).split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


def _period(panel, label) -> int:
    return panel.period_index("last" if label is None else label)


def _assignment(args, panel: Panel) -> Assignment:
    if args.treated_unit is None:
        raise ConfigError("--treated-unit is required")
    return Assignment((panel.unit_index(args.treated_unit),), _period(panel, args.treated_period))


def _apply_tolerances(args) -> None:
    if args.tol_feas is not None:
        weights.TOL_FEAS = args.tol_feas
    if args.tol_kkt is not None:
        weights.TOL_KKT = args.tol_kkt
    if args.max_iter is not None:
        weights.MAX_ITER = args.max_iter


def _check_kkt(tensor) -> None:
    if tensor.kkt_residual > weights.TOL_KKT:
        raise SolverError(f"KKT residual {tensor.kkt_residual:.3g} exceeds {weights.TOL_KKT:g}",
                          tensor.kkt_residual)


def _fit(panel: Panel, spec: WeightSetSpec, scope, workers=None):
    tensor = weights.solve_weights(panel, spec, scope, workers=workers)
    _check_kkt(tensor)
    bad = weights.membership_violations(tensor, weights.TOL_FEAS)
    if bad:
        raise SolverError("solution violates " + "; ".join(bad))
    return tensor


def _variance_block(panel, tensor, a, truncate: bool) -> dict:
    v = unbiased_variance_estimate(panel, tensor, a)
    reported = max(v, 0.0) if truncate else v
    return {
        "unbiased_estimate": reported,
        "raw_estimate": v,
        "negative_estimate": v < 0,
        "truncated": bool(truncate and v < 0),
        "standard_error": standard_error(v),
    }


# -- commands ------------------------------------------------------------------

def cmd_fit(args) -> tuple[dict, str]:
    panel = _panel(args)
    spec = _spec(args, panel.n)
    a = _assignment(args, panel)
    want_var = args.variance if args.variance is not None else panel.n >= 4
    if want_var and panel.n < 4:
        raise ConfigError(f"variance estimate needs N >= 4 (denominators N-3 and N-2); panel has N={panel.n}")
    scope = "all" if args.full_period_scope else a.treated_period
    tensor = _fit(panel, spec, scope, args.workers)
    est = gsc_estimate(panel, tensor, a)
    t = a.treated_period
    c, m = tensor.slice(t)
    doc = {
        "family": spec.to_json(),
        "treated_unit": panel.units[a.unit],
        "treated_period": panel.periods[t],
        "estimate": est.value,
        "objective_value": tensor.objective_value,
        "kkt_residual": tensor.kkt_residual,
        "weights": {
            "units": list(panel.units),
            "intercept": c.tolist(),
            "w": m.tolist(),
        },
    }
    if want_var:
        doc["variance"] = _variance_block(panel, tensor, a, bool(args.truncate_negative_variance))
    table = f"estimate {est.value:.4f}"
    if want_var:
        table += f"  standard error {doc['variance']['standard_error']:.4f}"
    return doc, table + "\n"


def cmd_variance(args) -> tuple[dict, str]:
    panel = _panel(args)
    spec = _spec(args, panel.n)
    a = _assignment(args, panel)
    if panel.n < 4:
        raise ConfigError(f"variance estimate needs N >= 4 (denominators N-3 and N-2); panel has N={panel.n}")
    tensor = _fit(panel, spec, a.treated_period, args.workers)
    doc = _variance_block(panel, tensor, a, bool(args.truncate_negative_variance))
    doc.update(family=spec.name, treated_unit=panel.units[a.unit], treated_period=panel.periods[a.treated_period])
    return doc, f"standard error {doc['standard_error']:.4f}\n"


def cmd_placebo(args) -> tuple[dict, str]:
    panel = _panel(args)
    spec = _spec(args, panel.n)
    a = _assignment(args, panel)
    effects = placebo_effects(panel, spec, a)
    v = placebo_variance_estimate(panel, spec, a)
    controls = [u for k, u in enumerate(panel.units) if k != a.unit]
    doc = {
        "family": spec.name,
        "treated_unit": panel.units[a.unit],
        "treated_period": panel.periods[a.treated_period],
        "placebo_variance": v,
        "standard_error": standard_error(v),
        "pseudo_effects": dict(zip(controls, effects.tolist())),
    }
    return doc, f"placebo standard error {doc['standard_error']:.4f}\n"


def cmd_network(args) -> tuple[dict, str]:
    panel = _panel(args)
    spec = _spec(args, panel.n)
    if spec.family.has_intercept:
        raise ConfigError(f"network view needs a family without intercept (dim, sc, usc); got {spec.name}")
    t = _period(panel, args.treated_period)
    tensor = _fit(panel, spec, t)
    net = net_mod.weights_to_network(tensor, t, panel.units)
    comps = net_mod.is_strongly_connected(net)
    doc = {
        "family": spec.name,
        "treated_period": panel.periods[t],
        "network": net.to_json(),
        "flow_balance": dict(zip(panel.units, net_mod.flow_balance(net).tolist())),
        "strongly_connected": comps.strongly_connected,
        "components": dict(zip(panel.units, comps.labels.tolist())),
        "unbiased_propensities": dict(zip(panel.units, net_mod.unbiased_propensities(tensor, t).tolist())),
    }
    if comps.strongly_connected:
        cen = net_mod.eigenvector_centrality(net)
        doc["eigenvector_centrality"] = dict(zip(panel.units, cen.p.tolist()))
        doc["centrality_shifted_iteration"] = cen.shifted
    lines = [f"{u:<12}{p:>10.4f}" for u, p in doc["unbiased_propensities"].items()]
    return doc, net.to_dot() if args.emit == "dot" else "\n".join(lines) + "\n"


def _potential(args) -> PotentialPanel:
    if args.synthetic:
        try:
            n, t = (int(v) for v in str(args.synthetic).split(","))
        except ValueError:
            raise ConfigError(f"--synthetic expects N,T, got {args.synthetic!r}") from None
        return randlab.stationary_synthetic_panel(
            n, t, 0.7 if args.correlation is None else args.correlation,
            0.5 if args.ar is None else args.ar, 0 if args.seed is None else args.seed)
    panel = _panel(args)
    if not args.treated_panel:
        return PotentialPanel.zero_effect(panel.y, units=panel.units, periods=panel.periods)
    treated = load_panel(args.treated_panel)
    if treated.units != panel.units or treated.periods != panel.periods:
        raise ConfigError("--treated-panel labels differ from --panel")
    return PotentialPanel(panel.y, treated.y, units=panel.units, periods=panel.periods)


def cmd_simulate(args) -> tuple[dict, str]:
    pp = _potential(args)
    design = args.design or "uniform-unit"
    families = [f.strip() for f in (args.families or "dim,did,sc,musc").split(",") if f.strip()]
    for f in families:
        Family.parse(f)
    labels = Panel(pp.units, pp.periods, pp.y0)
    t = _period(labels, args.treated_period)
    if design == "uniform-unit":
        report = randlab.run_unit_randomization(pp, families, t, workers=args.workers)
    elif design == "uniform-time":
        unit = 0 if args.treated_unit is None else labels.unit_index(args.treated_unit)
        report = randlab.run_time_randomization(pp, families, unit, workers=args.workers)
    elif design == "propensity":
        if not args.propensity:
            raise ConfigError("propensity design needs --propensity")
        p = _floats(args.propensity)
        spec = WeightSetSpec(Family.MUSC_P, p)
        report = randlab.run_propensity_monte_carlo(pp, spec, args.draws or 10_000,
                                                    0 if args.seed is None else args.seed, t)
    elif design in ("subset", "uniform-subset"):
        if not args.nt:
            raise ConfigError("subset design needs --nt")
        report = randlab.run_subset_randomization(pp, args.nt, t, args.k_max or K_MAX)
    else:
        raise ConfigError(f"unknown design {design!r}; use uniform-unit, uniform-time, propensity or subset")
    for row in report.rows:
        if row.error and row.error.startswith("SolverError"):
            raise SolverError(f"{row.family}: {row.error}")
    return report.to_json(), report.to_table()


def cmd_multi(args) -> tuple[dict, str]:
    panel = _panel(args)
    if not args.treated_units:
        raise ConfigError("--treated-units is required")
    units = tuple(panel.unit_index(u.strip()) for u in str(args.treated_units).split(","))
    t = _period(panel, args.treated_period)
    a = Assignment(units, t)
    a.check(panel.n, panel.t)
    mt = solve_multi_weights(panel, a.n_treated, t, args.k_max or K_MAX)
    if mt.kkt_residual > weights.TOL_KKT:
        raise SolverError(f"KKT residual {mt.kkt_residual:.3g} exceeds {weights.TOL_KKT:g}", mt.kkt_residual)
    est = multi_gsc_estimate(panel, mt, a)
    k = mt.index.position(a.treated_units)
    c, m = mt.slice(t)
    doc = {
        "treated_units": sorted(panel.units[u] for u in a.treated_units),
        "treated_period": panel.periods[t],
        "n_subsets": mt.index.k,
        "estimate": est.value,
        "kkt_residual": mt.kkt_residual,
        "weights": {"units": list(panel.units), "intercept": float(c[k]), "w": m[k].tolist()},
    }
    if panel.n - a.n_treated >= a.n_treated + 2:
        v = multi_unbiased_variance_estimate(panel, mt, a, bool(args.leave_fold_out))
        doc["variance"] = {"unbiased_estimate": v, "standard_error": standard_error(v), "negative_estimate": v < 0}
    return doc, f"estimate {est.value:.4f}\n"


COMMANDS = {
    "fit": cmd_fit,
    "variance": cmd_variance,
    "placebo": cmd_placebo,
    "network": cmd_network,
    "simulate": cmd_simulate,
    "multi": cmd_multi,
}


def main(argv=None) -> int:
    parser = build_parser()
    saved = (weights.TOL_FEAS, weights.TOL_KKT, weights.MAX_ITER)
    try:
        args = resolve_options(parser, argv)
        _apply_tolerances(args)
        doc, table = COMMANDS[args.command](args)
    except SolverError as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        weights.TOL_FEAS, weights.TOL_KKT, weights.MAX_ITER = saved
    emit = args.emit or "json"
    if emit == "dot" and args.command != "network":
        print("error: --emit dot is only available for the network command", file=sys.stderr)
        return EXIT_INVALID
    text = dump_json(doc) + "\n" if emit == "json" else table
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
