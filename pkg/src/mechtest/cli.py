"""Command-line interface.

Subcommands: ``bounds`` (identification report + per-cell plot data),
``test`` (finite-sample test), ``robustness`` (pooled bound vs defier
budget plus the breakdown point), ``ade`` (average-effect intervals),
``simulate`` (Monte Carlo harness on the synthetic designs), ``diagnose``
(cell counts and feasibility).  Options may come from flags or from a
``key = value`` config file; flags win.  Every run writes a manifest with
the resolved config, seed, package version, and input hash, so outputs are
reproducible bit for bit.

Exit codes: 0 ok, 2 input error, 3 identification error (including an
empty identified set), 4 solver failure.  Failures print one JSON object
describing the error.
"""

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__, bounds as bounds_mod, ident, inference, mc
from .errors import MechtestError, StructuralError, UnsupportedCaseError
from .probtab import (
    DistTable,
    discretize_outcome,
    quantile_cutpoints,
    read_csv,
)
from .typeshares import RestrictionSet, build_identified_set, min_defier_budget

DEFAULTS = {
    "strategy": "randomized",
    "restriction": "monotone",
    "bins": "none",
    "alpha": 0.05,
    "method": "lf-boot",
    "boot": 999,
    "seed": 0,
    "auto_relax": False,
    "ade": False,
    "t": 1.0,
    "nsims": 100,
    "clusters": 0,
    "n": 2000,
    "design": "binary",
    "dbar_max": 0.5,
    "dbar_steps": 26,
    "eta": 0.01,
}


@dataclass
class RunConfig:
    command: str
    input: str = None
    out: str = None
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = object.__getattribute__(self, "values")
        if name in values:
            return values[name]
        raise AttributeError(name)


def _read_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise StructuralError(f"{path}: line {ln}: expected key = value")
            key, _, val = line.partition("=")
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _coerce(key, val):
    if isinstance(val, str):
        if key in ("alpha", "t", "dbar_max", "eta"):
            return float(val)
        if key in ("boot", "seed", "nsims", "clusters", "n", "dbar_steps"):
            return int(val)
        if key in ("auto_relax", "ade"):
            return val.lower() in ("1", "true", "yes", "on")
    return val


def resolve_config(args) -> RunConfig:
    """Layer defaults < config file < explicit flags."""
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, val in _read_config_file(args.config).items():
            if key not in DEFAULTS and key not in ("input", "out"):
                raise StructuralError(f"unknown config key '{key}'")
            values[key] = val
    for key in list(DEFAULTS) + ["input", "out"]:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    values = {k: _coerce(k, v) for k, v in values.items()}
    cfg = RunConfig(
        command=args.command,
        input=values.pop("input", None),
        out=values.pop("out", None),
        values=values,
    )
    if not 0.0 < cfg.alpha < 1.0:
        raise StructuralError("alpha must lie in (0, 1)")
    return cfg


def parse_restriction(spec_str: str, support) -> RestrictionSet:
    name, _, arg = spec_str.partition(":")
    name = name.strip().lower()
    if name == "monotone":
        return RestrictionSet.monotone(support)
    if name == "defier_budget":
        return RestrictionSet.defier_budget(support, float(arg))
    if name == "elementwise":
        return RestrictionSet.elementwise_monotone(support)
    if name == "elementwise_defier_budget":
        return RestrictionSet.elementwise_defier_budget(support, float(arg))
    if name == "bounded":
        kappa, _, dbar = arg.partition(",")
        return RestrictionSet.bounded_effect(support, float(kappa), float(dbar))
    if name == "none":
        return RestrictionSet.unrestricted(support)
    if name == "custom":
        rows = np.loadtxt(arg, delimiter=",", ndmin=2)
        return RestrictionSet.custom(support, rows[:, :-1], rows[:, -1])
    raise StructuralError(f"unknown restriction '{spec_str}'")


def parse_strategy(spec_str: str) -> ident.StrategyTag:
    name, _, arg = spec_str.partition(":")
    name = name.strip().lower()
    if name in (ident.RANDOMIZED, ident.IV, ident.IPW):
        return ident.StrategyTag(kind=name)
    if name == ident.MEASUREMENT_ERROR:
        return ident.StrategyTag(kind=name, l_matrix=np.loadtxt(arg, delimiter=",", ndmin=2))
    raise StructuralError(f"unknown strategy '{spec_str}'")


def parse_bins(spec_str):
    if spec_str in (None, "", "none"):
        return None
    text = str(spec_str)
    if "," in text:
        return tuple(float(c) for c in text.split(","))
    return int(text)


def _hash_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(cfg: RunConfig, outputs):
    manifest = {
        "command": cfg.command,
        "config": {k: cfg.values[k] for k in sorted(cfg.values)},
        "input": cfg.input,
        "input_sha256": _hash_file(cfg.input) if cfg.input else None,
        "outputs": outputs,
        "version": __version__,
    }
    path = (cfg.out or f"mechtest_{cfg.command}") + ".manifest.json"
    _write_json(path, manifest)
    return path


def _load_table(cfg: RunConfig):
    records = read_csv(cfg.input)
    table = ident.apply_strategy(records, parse_strategy(cfg.strategy))
    bins = parse_bins(cfg.bins)
    if bins is not None:
        if isinstance(bins, int):
            cuts = quantile_cutpoints(records.y, bins)
        else:
            cuts = bins
        table = discretize_outcome(table, cuts)
    return records, table


def _cells_csv(path, table: DistTable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "y", "p_treated", "p_control", "delta"])
        for k, point in enumerate(table.support.points):
            m_label = point[0] if len(point) == 1 else "|".join(str(v) for v in point)
            for q, y in enumerate(table.outcome_levels):
                p1 = table.mass[1, k, q]
                p0 = table.mass[0, k, q]
                writer.writerow([m_label, y, f"{p1:.10g}", f"{p0:.10g}", f"{p1 - p0:.10g}"])


def cmd_bounds(cfg: RunConfig):
    _, table = _load_table(cfg)
    r = parse_restriction(cfg.restriction, table.support)
    report = bounds_mod.bounds_report(
        table, r, auto_relax=cfg.auto_relax, with_ade=cfg.ade
    )
    out = cfg.out or "bounds.json"
    _write_json(out, report.to_json_dict())
    cells = out.rsplit(".", 1)[0] + "_cells.csv"
    _cells_csv(cells, table)
    manifest = _write_manifest(cfg, [out, cells])
    print(json.dumps({"ok": True, "outputs": [out, cells, manifest]}))
    return 0


def cmd_test(cfg: RunConfig):
    if cfg.strategy != "randomized":
        raise UnsupportedCaseError(
            "finite-sample tests are implemented for the randomized design; "
            "use bounds/robustness for other identification strategies"
        )
    records = read_csv(cfg.input)
    from .probtab import support_from_values

    support = support_from_values(records.m)
    r = parse_restriction(cfg.restriction, support)
    system = inference.build_moment_system(records, r, bins=parse_bins(cfg.bins))
    if cfg.method == inference.LF_BOOT:
        result = inference.test_least_favorable_bootstrap(
            system, alpha=cfg.alpha, b_draws=cfg.boot, seed=cfg.seed
        )
    elif cfg.method == inference.COND_CHISQ:
        result = inference.test_conditional_chisq(system, alpha=cfg.alpha)
    else:
        raise StructuralError(f"unknown test method '{cfg.method}'")
    out = cfg.out or "test.json"
    _write_json(out, result.to_json_dict())
    manifest = _write_manifest(cfg, [out])
    print(json.dumps({"ok": True, "outputs": [out, manifest], "reject": result.reject}))
    return 0


def cmd_robustness(cfg: RunConfig):
    _, table = _load_table(cfg)
    if not table.support.totally_ordered:
        raise UnsupportedCaseError("robustness curves need a scalar ordered mediator")
    out = cfg.out or "robustness.csv"
    grid = np.linspace(0.0, cfg.dbar_max, cfg.dbar_steps)
    rows = []
    for dbar in grid:
        r = RestrictionSet.defier_budget(table.support, float(dbar))
        spec = build_identified_set(table, r)
        if not spec.feasible:
            rows.append((float(dbar), "", "infeasible"))
            continue
        value = bounds_mod.nu_pooled_lower_bound(table, r)
        rows.append((float(dbar), f"{value:.10g}", "ok"))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dbar", "nu_pooled_lb", "status"])
        writer.writerows(rows)
    breakdown = bounds_mod.breakdown_defier_budget(table)
    summary = cfg.out.rsplit(".", 1)[0] + "_breakdown.json" if cfg.out else "robustness_breakdown.json"
    _write_json(summary, {"breakdown_dbar": breakdown})
    manifest = _write_manifest(cfg, [out, summary])
    print(json.dumps({"ok": True, "outputs": [out, summary, manifest],
                      "breakdown_dbar": breakdown}))
    return 0


def cmd_ade(cfg: RunConfig):
    _, table = _load_table(cfg)
    r = parse_restriction(cfg.restriction, table.support)
    intervals = {}
    for k in range(table.n_mediators):
        lb, ub = bounds_mod.ade_bounds(table, r, k, auto_relax=cfg.auto_relax)
        intervals[str(k)] = [lb, ub]
    out = cfg.out or "ade.json"
    _write_json(out, {"ade": intervals, "mediators": [list(p) for p in table.support.points]})
    manifest = _write_manifest(cfg, [out])
    print(json.dumps({"ok": True, "outputs": [out, manifest]}))
    return 0


def _simulate_design(cfg: RunConfig):
    if cfg.design == "binary":
        cp, tp = mc.binary_pools()
    elif cfg.design == "cluster":
        cp, tp = mc.cluster_pools(n_clusters=max(cfg.clusters, 20) or 20)
    elif cfg.design == "ordered":
        cp, tp = mc.ordered_pools()
    else:
        raise StructuralError(f"unknown simulation design '{cfg.design}'")
    if cfg.clusters:
        if cp.cluster is None:
            raise StructuralError("requested clusters on a design without them")
        return mc.MixtureDgp(
            control_pool=cp, treated_pool=tp, t=cfg.t,
            cluster_mode=True, clusters_per_arm=cfg.clusters,
        )
    half = max(cfg.n // 2, 1)
    return mc.MixtureDgp(
        control_pool=cp, treated_pool=tp, t=cfg.t,
        n_control=half, n_treated=cfg.n - half,
    )


def cmd_simulate(cfg: RunConfig):
    dgp = _simulate_design(cfg)
    bins = parse_bins(cfg.bins)
    out = cfg.out or "simulate.csv"
    rows = []
    rejections = 0
    errors = 0
    for sim in range(cfg.nsims):
        records = mc.draw_sample(dgp, mc._derive(cfg.seed, sim))
        from .probtab import support_from_values, from_records

        support = support_from_values(records.m)
        r = parse_restriction(cfg.restriction, support)
        try:
            system = inference.build_moment_system(records, r, bins=bins, min_cell=0)
            if cfg.method == inference.LF_BOOT:
                result = inference.test_least_favorable_bootstrap(
                    system, alpha=cfg.alpha, b_draws=cfg.boot,
                    seed=mc._derive(cfg.seed, sim, 1),
                )
            else:
                result = inference.test_conditional_chisq(system, alpha=cfg.alpha)
            table = from_records(records)
            if bins is not None:
                cuts = quantile_cutpoints(records.y, bins) if isinstance(bins, int) else bins
                table = discretize_outcome(table, cuts)
            pooled = bounds_mod.nu_pooled_lower_bound(table, r, auto_relax=True)
            med = mc.median_cell_count(records, bins=bins)
        except MechtestError as exc:
            errors += 1
            rows.append([sim, "error", "", "", "", type(exc).__name__])
            continue
        rejections += bool(result.reject)
        rows.append([
            sim,
            f"{result.statistic:.10g}",
            f"{result.p_value:.10g}",
            int(result.reject),
            f"{pooled:.10g}",
            f"{med:.10g}",
        ])
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sim_id", "statistic", "p_value", "reject",
                         "nu_pooled_lb", "median_cell_count"])
        writer.writerows(rows)
    manifest = _write_manifest(cfg, [out])
    ok = cfg.nsims - errors
    print(json.dumps({
        "ok": True, "outputs": [out, manifest],
        "rejection_rate": rejections / ok if ok else None,
        "errors": errors,
    }))
    return 0


def cmd_diagnose(cfg: RunConfig):
    records, table = _load_table(cfg)
    r = parse_restriction(cfg.restriction, table.support)
    spec = build_identified_set(table, r)
    counts = {}
    for nb in (2, 5, 10):
        try:
            counts[str(nb)] = mc.median_cell_count(records, bins=nb)
        except MechtestError:
            counts[str(nb)] = None
    requested = parse_bins(cfg.bins)
    if requested is not None:
        counts["requested"] = mc.median_cell_count(records, bins=requested)
    marg = {d: table.marginal_m(d) for d in (0, 1)}
    payload = {
        "median_cell_counts": counts,
        "identified_set_feasible": spec.feasible,
        "min_defier_budget": None if spec.feasible else min_defier_budget(spec),
        "n_units": list(table.n_units) if table.n_units else None,
        "n_clusters": list(table.n_clusters) if table.n_clusters else None,
        # mediator values seen in only one arm are still registered in the
        # common (sorted) support; surface which arm carries each point
        "mediator_support": [
            {
                "point": list(p),
                "seen_in_control": bool(marg[0][k] > 0),
                "seen_in_treated": bool(marg[1][k] > 0),
            }
            for k, p in enumerate(table.support.points)
        ],
    }
    if spec.feasible:
        payload["sharp_null_slack"] = bounds_mod.sharp_null_slack(table, r)
    out = cfg.out or "diagnose.json"
    _write_json(out, payload)
    manifest = _write_manifest(cfg, [out])
    print(json.dumps({"ok": True, "outputs": [out, manifest]}))
    return 0


COMMANDS = {
    "bounds": cmd_bounds,
    "test": cmd_test,
    "robustness": cmd_robustness,
    "ade": cmd_ade,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mechtest",
        description="Test whether a treatment effect runs entirely through a mediator, "
        "and bound the violations when it does not.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", help="output path")
        if name != "simulate":
            p.add_argument("--input", help="input CSV (columns y, d, m1..mp, ...)")
        p.add_argument("--restriction", help="monotone | defier_budget:<d> | elementwise | "
                       "elementwise_defier_budget:<d> | bounded:<kappa>,<d> | none | custom:<csv>")
        p.add_argument("--bins", help="outcome bins: int, comma cutpoints, or 'none'")
        p.add_argument("--seed", type=int)
        if name in ("bounds", "ade", "robustness", "diagnose"):
            p.add_argument("--strategy", help="randomized | iv | ipw | me:<L.csv>")
        if name in ("bounds", "ade"):
            p.add_argument("--auto-relax", dest="auto_relax", action="store_const", const=True)
        if name == "bounds":
            p.add_argument("--ade", action="store_const", const=True)
        if name in ("test", "simulate"):
            p.add_argument("--alpha", type=float)
            p.add_argument("--method", choices=["lf-boot", "cond-chisq"])
            p.add_argument("--boot", type=int)
        if name == "test":
            p.add_argument("--strategy")
        if name == "robustness":
            p.add_argument("--dbar-max", dest="dbar_max", type=float)
            p.add_argument("--dbar-steps", dest="dbar_steps", type=int)
        if name == "simulate":
            p.add_argument("--t", type=float)
            p.add_argument("--nsims", type=int)
            p.add_argument("--clusters", type=int)
            p.add_argument("--n", type=int)
            p.add_argument("--design", choices=["binary", "cluster", "ordered"])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command != "simulate" and not cfg.input:
            raise StructuralError("--input is required")
        return COMMANDS[args.command](cfg)
    except MechtestError as exc:
        print(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }))
        return exc.exit_code
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc), "exit_code": 2}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
