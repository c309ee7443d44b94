"""Command-line front end: ``evcharge <command> [options]``.

Every command that writes files also writes ``manifest.json`` into the
output directory with a SHA-256 digest per output file. Set
``SOURCE_DATE_EPOCH`` to pin the manifest timestamps.

Exit codes: 0 success, 1 bad input, 2 usage error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derive_seed, substream
from .baseline import (
    LoadProfile,
    capacity_margin,
    estimate_group_baseline,
    high_x_of_y,
    read_daily_profiles_csv,
    read_margin_csv,
    slots_per_day,
    total_baseline,
    write_margin_csv,
    write_profile_csv,
)
from .behavior import CRITERIA, fit_selected, load_model, read_records, sample_lhs, save_model
from .dispatch import (
    DEFAULT_NS,
    ChargeProbability,
    DemandRequest,
    build_gamma,
    charging_probability,
    plan_command,
    read_broadcast,
    write_broadcast,
)
from .errors import DimensionMismatch, EmptyDataset, EvChargeError, MixedResolution, ParseError, SolverFailure
from .fleet import (
    LEVEL_LOAD_RATE,
    MODES,
    ScenarioConfig,
    coerce_param,
    load_config,
    max_acceptable_capacity,
    residential_profile,
    run_trials,
    summarize,
    sweep,
)
from .qp import QpProblem, build_qp, solve_pdipm, verify_psd

log = logging.getLogger("evcharge")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 3
MIN_FIT_RECORDS = 10
MANIFEST_NAME = "manifest.json"


# --- run manifest ------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_doc(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    started: str
    finished: str
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def verify_manifest(path):
    """List of problems (missing or changed files); empty when intact."""
    path = Path(path)
    manifest = RunManifest.load(path)
    problems = []
    for name, digest in sorted(manifest.outputs.items()):
        target = path.parent / name
        if not target.exists():
            problems.append(f"{name}: missing")
        elif sha256_file(target) != digest:
            problems.append(f"{name}: digest mismatch")
    return problems


class _Run:
    """Collects the outputs of one command and writes its manifest."""

    def __init__(self, args, inputs=()):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.started = _timestamp()
        self.outputs = []
        doc = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir", "verbose")}
        doc["inputs"] = {str(p): sha256_file(p) for p in inputs if p is not None}
        self.config_digest = _digest_doc(doc)

    def path(self, name):
        self.outputs.append(name)
        return self.out_dir / name

    def finish(self):
        manifest = RunManifest(
            command=self.args.command,
            config_digest=self.config_digest,
            seed=int(self.args.seed),
            started=self.started,
            finished=_timestamp(),
            outputs={name: sha256_file(self.out_dir / name) for name in sorted(self.outputs)},
        )
        manifest.write(self.out_dir)
        return manifest


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _write_rows(path, rows, columns):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# --- commands ----------------------------------------------------------------


def cmd_fit(args):
    run = _Run(args, [args.dataset])
    records = read_records(args.dataset)
    if len(records) < MIN_FIT_RECORDS:
        raise EmptyDataset(f"{args.dataset}: {len(records)} records, at least {MIN_FIT_RECORDS} needed")
    seed = derive_seed(args.seed, "fit")
    result, selection = fit_selected(records, args.criterion, args.max_k, seed=seed)
    save_model(
        run.path("model.json"),
        result.model,
        criterion=selection.criterion,
        per_dimension_counts=list(selection.per_dimension_counts),
        n_records=len(records),
        converged=bool(result.converged),
        n_iter=int(result.n_iter),
        log_likelihood=float(result.log_likelihoods[-1]),
        seed=int(args.seed),
    )
    report = {
        "criterion": selection.criterion,
        "max_k": args.max_k,
        "per_dimension_counts": list(selection.per_dimension_counts),
        "selected_total": selection.total,
        "fitted_components": result.model.component_count,
        "scores": {
            str(dim): {str(k): _finite(v) for k, v in scores.items()} for dim, scores in selection.scores.items()
        },
    }
    _write_json(run.path("selection.json"), report)
    run.finish()
    print(
        f"fitted K={result.model.component_count} "
        f"(per-dimension {'x'.join(map(str, selection.per_dimension_counts))}, {selection.criterion}) "
        f"on {len(records)} records -> {run.out_dir / 'model.json'}"
    )
    return EXIT_OK


def _slot_minutes(args, default=15):
    return args.slot_minutes if args.slot_minutes is not None else default


def cmd_margin(args):
    slot = _slot_minutes(args)
    horizon = slots_per_day(slot)
    run = _Run(args, [args.model, args.residential])
    if args.residential:
        days = read_daily_profiles_csv(args.residential, slot)
        residential = days[0] if len(days) == 1 else high_x_of_y(days, min(args.x_days, len(days)))
    else:
        residential = residential_profile(args.level, args.transformer_kva, slot)
    if args.ev_count > 0:
        if not args.model:
            raise EvChargeError("--model is required when --ev-count is positive")
        model, _ = load_model(args.model)
        daily = [
            estimate_group_baseline(
                sample_lhs(model, args.ev_count, seed=derive_seed(args.seed, "margin", day), horizon=horizon),
                slot,
                horizon,
            )
            for day in range(args.y_days)
        ]
        ev = high_x_of_y(daily, args.x_days)
    else:
        ev = LoadProfile(slot, np.zeros(horizon))
    baseline = total_baseline(residential, ev)
    margin = capacity_margin(baseline, args.transformer_kva)
    write_profile_csv(run.path("baseline.csv"), baseline)
    write_margin_csv(run.path("margin.csv"), margin)
    write_broadcast(run.path("broadcast.json"), margin)
    run.finish()
    print(
        f"margin min {margin.zeta_kw.min():.2f} kW, max {margin.zeta_kw.max():.2f} kW; "
        f"{len(margin.clamped_slots)} clamped slot(s) -> {run.out_dir / 'broadcast.json'}"
    )
    return EXIT_OK


def cmd_plan(args):
    if args.broadcast:
        margin, probability = read_broadcast(args.broadcast)
    else:
        margin = read_margin_csv(args.margin, args.transformer_kva, _slot_minutes(args))
        probability = charging_probability(margin)
    if args.slot_minutes is not None and args.slot_minutes != margin.slot_minutes:
        raise MixedResolution(
            f"broadcast uses {margin.slot_minutes}-minute slots, --slot-minutes is {args.slot_minutes}"
        )
    demand = DemandRequest(args.arrival, args.departure, args.energy_kwh, args.rated_kw)
    command = plan_command(demand, probability, args.n_s, substream(args.seed, "plan"), margin.slot_minutes)
    print(command.as_csv())
    return EXIT_OK


def _read_pcha_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "p_cha" not in [f.strip() for f in reader.fieldnames]:
            raise ParseError("expected columns slot,p_cha", path, 1)
        reader.fieldnames = [f.strip() for f in reader.fieldnames]
        values = []
        for row in reader:
            try:
                values.append(float(row["p_cha"]))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad value: {exc}", path, reader.line_num) from None
    if not values:
        raise ParseError("no data rows", path)
    return ChargeProbability(values)


def _solve_problem_file(args, run):
    doc = json.loads(Path(args.problem).read_text(encoding="utf-8"))
    quadratic = np.array(doc["quadratic"], dtype=float)
    verify_psd(quadratic)
    problem = QpProblem(
        quadratic,
        doc["linear"],
        upper=doc.get("upper"),
        eq_matrix=doc.get("eq_matrix"),
        eq_rhs=doc.get("eq_rhs"),
        offset=float(doc.get("offset", 0.0)),
    )
    sol = solve_pdipm(problem, tol=args.tol, max_iter=args.max_iter)
    if not sol.converged:
        raise SolverFailure(f"{sol.status} after {sol.iterations} iterations (KKT residual {sol.kkt_residual:.3g})")
    _write_json(
        run.path("qp_solution.json"),
        {
            "x": sol.x.tolist(),
            "objective": float(sol.objective),
            "iterations": int(sol.iterations),
            "kkt_residual": float(sol.kkt_residual),
            "status": sol.status,
        },
    )
    return sol


def cmd_solve_qp(args):
    run = _Run(args, [args.broadcast, args.problem, args.pcha])
    if args.problem:
        sol = _solve_problem_file(args, run)
    else:
        if args.pcha:
            probability = _read_pcha_csv(args.pcha)
        elif args.broadcast:
            _, probability = read_broadcast(args.broadcast)
        else:
            raise EvChargeError("give --problem, --pcha or --broadcast")
        if args.beta is None:
            raise EvChargeError("--beta is required with --pcha or --broadcast")
        if args.gamma_h is not None and args.gamma_h != probability.horizon:
            raise DimensionMismatch(f"--gamma-h {args.gamma_h} but P^cha has {probability.horizon} entries")
        gamma = build_gamma(probability.horizon, args.beta)
        sol = solve_pdipm(build_qp(gamma, probability.p_cha), tol=args.tol, max_iter=args.max_iter)
        if not sol.converged:
            raise SolverFailure(
                f"{sol.status} after {sol.iterations} iterations (KKT residual {sol.kkt_residual:.3g})"
            )
        resid = gamma @ sol.x - probability.p_cha
        _write_rows(
            run.path("p_st.csv"),
            [{"slot": i, "p_st": float(v)} for i, v in enumerate(sol.x, start=1)],
            ["slot", "p_st"],
        )
        _write_json(
            run.path("qp_report.json"),
            {
                "horizon": probability.horizon,
                "beta": args.beta,
                "residual": float(resid @ resid),
                "objective": float(sol.objective),
                "iterations": int(sol.iterations),
                "kkt_residual": float(sol.kkt_residual),
                "primal_residual": float(sol.primal_residual),
                "dual_residual": float(sol.dual_residual),
                "gap": float(sol.gap),
            },
        )
    run.finish()
    print("x = " + " ".join(f"{v:.6g}" for v in sol.x))
    print(
        f"objective {sol.objective!r}; {sol.iterations} iterations; KKT residual {sol.kkt_residual:.3g} "
        f"(primal {sol.primal_residual:.3g}, dual {sol.dual_residual:.3g}, gap {sol.gap:.3g})"
    )
    return EXIT_OK


def _config_from(args):
    config = load_config(args.config) if args.config else ScenarioConfig()
    changes = {"seed": int(args.seed)}
    if args.slot_minutes is not None:
        changes["slot_minutes"] = args.slot_minutes
    for name in ("disordered_mode", "tou_fraction", "residential_level", "demand_type", "controllable_fraction",
                 "disconnection_fraction", "transformer_kva", "ev_count"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    return config.replace(**changes)


def _parse_modes(text):
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise EvChargeError(f"unknown mode(s) {bad}; choose from {','.join(MODES)}")
    return modes


TRIAL_COLUMNS = ["trial", "seed", "mode", "peak_kw", "pvd_kw", "overloaded", "fallbacks"]
SUMMARY_COLUMNS = ["mode", "trials", "peak_kw", "delta_peak_pct", "pvd_kw", "delta_pvd_pct", "overload_ratio"]


def _print_summary(summary):
    print(f"{'mode':<12} {'peak kW':>10} {'dPeak%':>8} {'PVD kW':>10} {'dPVD%':>8} {'overload':>9}")
    for mode, s in summary.items():
        dp = "" if s["delta_peak_pct"] is None else f"{s['delta_peak_pct']:.1f}"
        dv = "" if s["delta_pvd_pct"] is None else f"{s['delta_pvd_pct']:.1f}"
        print(f"{mode:<12} {s['peak_kw']:>10.2f} {dp:>8} {s['pvd_kw']:>10.2f} {dv:>8} {s['overload_ratio']:>9.3f}")


def cmd_simulate(args):
    config = _config_from(args)
    modes = _parse_modes(args.modes)
    run = _Run(args, [args.config])
    rows, kept = run_trials(config, args.trials, modes, keep=1)
    _write_rows(run.path("trials.csv"), rows, TRIAL_COLUMNS)
    first = kept[0]
    for mode in modes:
        res = first[mode]
        load_rows = [
            {"slot": i, "residential_kw": r, "ev_kw": e, "total_kw": t}
            for i, (r, e, t) in enumerate(
                zip(res.residential.values_kw, res.ev_load.values_kw, res.total_load.values_kw), start=1
            )
        ]
        _write_rows(run.path(f"load_{mode}.csv"), load_rows, ["slot", "residential_kw", "ev_kw", "total_kw"])
        ev_rows = []
        for i, (cmd, energy) in enumerate(zip(res.per_ev_commands, res.per_ev_energy_kwh)):
            row = {"ev": i, "energy_kwh": float(energy)}
            if cmd is not None:
                row.update(start_slot=cmd.start_slot, duration_slots=cmd.duration_slots, power_kw=cmd.power_kw)
            ev_rows.append(row)
        _write_rows(
            run.path(f"per_ev_{mode}.csv"), ev_rows, ["ev", "start_slot", "duration_slots", "power_kw", "energy_kwh"]
        )
    summary = summarize(rows, modes)
    _write_json(run.path("summary.json"), {"config": config.to_dict(), "trials": args.trials, "modes": summary})
    run.finish()
    _print_summary(summary)
    return EXIT_OK


def cmd_mac(args):
    config = _config_from(args)
    run = _Run(args, [args.config])
    res = max_acceptable_capacity(config, args.tolerance, n_trials=args.trials, cap=args.cap)
    _write_json(
        run.path("mac.json"),
        {
            "mac": res.value,
            "unbounded_at_cap": res.at_cap,
            "cap": res.cap,
            "tolerance": args.tolerance,
            "trials": args.trials,
            "overload_ratio_by_ev_count": {str(m): r for m, r in sorted(res.evaluations.items())},
            "config": config.to_dict(),
        },
    )
    run.finish()
    print(f"MAC = {res.value}" + (" (unbounded at cap)" if res.at_cap else ""))
    return EXIT_OK


def cmd_sweep(args):
    config = _config_from(args)
    modes = _parse_modes(args.modes)
    values = [coerce_param(args.param, v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise EvChargeError("--values is empty")
    run = _Run(args, [args.config])
    rows = sweep(config, args.param, values, args.trials, modes, args.mac, args.mac_trials, args.tolerance)
    columns = ["param", "value"] + SUMMARY_COLUMNS + (["mac", "mac_at_cap"] if args.mac else [])
    _write_rows(run.path("sweep.csv"), rows, columns)
    run.finish()
    header = f"{args.param:>24} {'mode':<12} {'peak kW':>10} {'PVD kW':>10} {'overload':>9}" + (" MAC" if args.mac else "")
    print(header)
    for r in rows:
        line = f"{r['value']!s:>24} {r['mode']:<12} {r['peak_kw']:>10.2f} {r['pvd_kw']:>10.2f} {r['overload_ratio']:>9.3f}"
        if args.mac:
            line += f" {r['mac']}" + ("+" if r["mac_at_cap"] else "")
        print(line)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_scenario_flags(p):
    p.add_argument("--config", help="scenario JSON (keys of ScenarioConfig)")
    p.add_argument("--disordered-mode", choices=("arrival", "tou"), default=None)
    p.add_argument("--tou-fraction", type=float, default=None, help="share of drivers deferring to 22:00")
    p.add_argument("--residential-level", choices=tuple(LEVEL_LOAD_RATE), default=None)
    p.add_argument("--demand-type", choices=("homogeneous", "non_homogeneous"), default=None)
    p.add_argument("--controllable-fraction", type=float, default=None)
    p.add_argument("--disconnection-fraction", type=float, default=None)
    p.add_argument("--transformer-kva", type=float, default=None)
    p.add_argument("--ev-count", type=int, default=None, help="override the EV count from penetration")


def _common_flags(suppress):
    """Global flags. Subcommands repeat them with suppressed defaults so a
    value given before the subcommand is not overwritten."""
    p = argparse.ArgumentParser(add_help=False)

    def default(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--seed", type=int, default=default(0), help="root seed (default: 0)")
    p.add_argument("--slot-minutes", type=int, default=default(None), help="slot length in minutes (default: 15)")
    p.add_argument("--out-dir", default=default("out"), help="directory for output files (default: out)")
    p.add_argument("-v", "--verbose", action="count", default=default(0))
    return p


def build_parser():
    top = _common_flags(suppress=False)
    common = _common_flags(suppress=True)

    parser = argparse.ArgumentParser(
        prog="evcharge",
        description="Distributed EV charging under communication failure: fit, plan, simulate.",
        parents=[top],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the charging-behavior mixture to a session CSV")
    p.add_argument("dataset", help="CSV with start_slot,duration_slots,energy_kwh")
    p.add_argument("--criterion", type=str.upper, choices=CRITERIA, default="BIC")
    p.add_argument("--max-k", type=int, default=4)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("margin", parents=[common], help="baseline, capacity margin and broadcast file")
    p.add_argument("--model", help="model JSON written by 'fit'")
    p.add_argument("--residential", help="residential CSV ([day,]slot,kw); default: synthetic template")
    p.add_argument("--level", choices=tuple(LEVEL_LOAD_RATE), default="medium", help="template level")
    p.add_argument("--ev-count", type=int, default=30, help="uncontrollable EVs per day (default: 30)")
    p.add_argument("--x-days", type=int, default=5, help="X of HighXofY (default: 5)")
    p.add_argument("--y-days", type=int, default=10, help="Y of HighXofY for sampled EV days (default: 10)")
    p.add_argument("--transformer-kva", type=float, default=600.0)
    p.set_defaults(func=cmd_margin)

    p = sub.add_parser("plan", parents=[common], help="sample one EV's charging command from a broadcast")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--broadcast", help="broadcast JSON written by 'margin'")
    src.add_argument("--margin", help="margin CSV (slot,zeta_kw)")
    p.add_argument("--transformer-kva", type=float, default=600.0, help="used with --margin (default: 600)")
    p.add_argument("--arrival", type=int, required=True, help="arrival slot (1-based)")
    p.add_argument("--departure", type=int, required=True, help="departure slot (1-based, may wrap)")
    p.add_argument("--energy-kwh", type=float, required=True)
    p.add_argument("--rated-kw", type=float, default=7.0)
    p.add_argument("--n-s", type=int, default=DEFAULT_NS, help="accepted candidates per draw (default: 1000)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("solve-qp", parents=[common], help="interior-point solve of a QP or a start distribution")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--problem", help="JSON with quadratic, linear and optional upper/eq_matrix/eq_rhs/offset")
    src.add_argument("--pcha", help="CSV slot,p_cha; solves the start distribution for --beta")
    src.add_argument("--broadcast", help="broadcast JSON; solves the start distribution for --beta")
    p.add_argument("--beta", "--duration-slots", dest="beta", type=int, help="session length in slots")
    p.add_argument("--gamma-h", type=int, help="expected horizon H (checked against P^cha)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_solve_qp)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo fleet runs")
    _add_scenario_flags(p)
    p.add_argument("--modes", default=",".join(MODES), help="comma list of modes (default: all)")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mac", parents=[common], help="maximum acceptable EV count")
    _add_scenario_flags(p)
    p.add_argument("--tolerance", type=float, default=0.0, help="allowed overload probability (default: 0)")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--cap", type=int, default=None, help="search bound (default: 10 x user count)")
    p.set_defaults(func=cmd_mac)

    p = sub.add_parser("sweep", parents=[common], help="summaries over values of one scenario parameter")
    _add_scenario_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--mac", action="store_true", help="also compute MAC for each value")
    p.add_argument("--mac-trials", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=0.0)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (EvChargeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
