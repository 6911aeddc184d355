"""Command-line front end.

Subcommands: ``compile``, ``solve``, ``sweep``, ``error-stats``, ``report``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags; later sources win.  The effective
settings are printed and written to ``config.json`` in the output directory.

Exit codes: 0 success (and a feasible sample when solving), 2 usage or
configuration error, 3 the run finished without a feasible sample.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .analysis import error_stats_monte_carlo, error_stats_theory, summarize
from .compiler import (
    H4Mode,
    UnsupportedModeError,
    assemble,
    build_constrained,
    default_penalty_weights,
    export_qubo,
)
from .encoding import EncodingError, build_layout, granularity, max_effective_granularity
from .model import ProblemError, generate_instance, load_problem
from .solvers import (
    BRUTE_FORCE_MAX_BITS,
    Sample,
    SampleSet,
    SamplerConfig,
    SamplerConfigError,
    brute_force,
    derive_seed,
    simulated_anneal,
    solve_constrained,
    tabu_search,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3

SOLVERS = ("brute", "sa", "tabu", "constrained")

DEFAULTS = {
    "problem": None,
    "generate": None,
    "bits": 10,
    "solver": "sa",
    "h4_mode": H4Mode.EQUALITY_TO_ZERO.value,
    "seed": 0,
    "reads": 10,
    "sweeps": 1000,
    "temperature_initial": None,
    "temperature_final": None,
    "tabu_tenure": None,
    "time_limit": None,
    "eta": 2.0,
    "max_rounds": 20,
    "lambda1": None,
    "lambda2": None,
    "lambda3": None,
    "lambda4": None,
    "out": "out",
}

# flag name -> config key, for options that can also come from the config file
_FLAG_KEYS = {
    "problem": "problem",
    "bits": "bits",
    "solver": "solver",
    "h4_mode": "h4_mode",
    "seed": "seed",
    "reads": "reads",
    "sweeps": "sweeps",
    "tabu_tenure": "tabu_tenure",
    "time_limit": "time_limit",
    "eta": "eta",
    "max_rounds": "max_rounds",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "lambda4": "lambda4",
    "out": "out",
}


class UsageError(Exception):
    pass


# --- configuration ---------------------------------------------------------

def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return data


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_load_config_file(args.config))
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "generate", None) is not None:
        cfg["generate"] = {
            "n_assets": args.generate,
            "n_factors": args.factors,
            "seed": args.instance_seed,
            "class_constraints": bool(args.class_constraints),
        }
    _check_config(cfg)
    return cfg


def _check_config(cfg: dict) -> None:
    if cfg["problem"] is None and cfg["generate"] is None:
        raise UsageError("need --problem or --generate")
    if cfg["solver"] not in SOLVERS:
        raise UsageError(f"unknown solver {cfg['solver']!r}")
    try:
        H4Mode(cfg["h4_mode"])
    except ValueError:
        raise UsageError(f"unknown h4 mode {cfg['h4_mode']!r}") from None
    if not isinstance(cfg["bits"], int) or cfg["bits"] < 1:
        raise UsageError("bits must be a positive integer")


def _parse_lambda3(value):
    if value is None or isinstance(value, (list, tuple, int, float)):
        return value
    try:
        parts = [float(v) for v in str(value).split(",")]
    except ValueError:
        raise UsageError(f"bad --lambda3 value {value!r}") from None
    return parts[0] if len(parts) == 1 else parts


def _problem_from_config(cfg: dict):
    if cfg["problem"] is not None:
        path = Path(cfg["problem"])
        if not path.is_file():
            raise UsageError(f"problem file not found: {path}")
        return load_problem(path)
    gen = dict(cfg["generate"])
    n = int(gen["n_assets"])
    return generate_instance(
        n,
        min(int(gen.get("n_factors") or 3), n),
        int(gen.get("seed") or 0),
        class_constraints=bool(gen.get("class_constraints", False)),
    )


def _penalty_weights(problem, cfg: dict):
    weights = default_penalty_weights(problem, cfg["bits"])
    changes = {}
    for key in ("lambda1", "lambda2", "lambda4"):
        if cfg[key] is not None:
            changes[key] = float(cfg[key])
    lam3 = _parse_lambda3(cfg["lambda3"])
    if lam3 is not None:
        m = len(problem.multi_constraints)
        if isinstance(lam3, (int, float)):
            lam3 = [float(lam3)] * m
        if len(lam3) != m:
            raise UsageError(f"lambda3 needs {m} values, got {len(lam3)}")
        changes["lambda3"] = tuple(lam3)
    try:
        return weights.replace(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _sampler_config(cfg: dict, seed: Optional[int] = None) -> SamplerConfig:
    return SamplerConfig(
        seed=int(cfg["seed"] if seed is None else seed),
        num_reads=int(cfg["reads"]),
        sweeps=int(cfg["sweeps"]),
        temperature_initial=cfg["temperature_initial"],
        temperature_final=cfg["temperature_final"],
        tabu_tenure=cfg["tabu_tenure"],
        time_limit=cfg["time_limit"],
    )


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _announce(cfg: dict, out: Path) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print("effective config:")
    print(text)
    _write_json(out / "config.json", cfg)


# --- runs ------------------------------------------------------------------

def run_experiment(problem, cfg: dict, out: Path, seed: Optional[int] = None):
    """Compile, sample and summarize one configuration; returns the record."""
    K = cfg["bits"]
    solver = cfg["solver"]
    sampler = _sampler_config(cfg, seed)
    if solver == "constrained":
        layout = build_layout(problem, K, with_slack=False)
        cmodel = build_constrained(problem, layout)
        result = solve_constrained(cmodel, sampler, eta=float(cfg["eta"]), max_rounds=int(cfg["max_rounds"]))
        sample_set = result.sample_set
        meta_extra = {
            "rounds": result.rounds,
            "lambda_history": [list(h) for h in result.lambda_history],
            "incumbent_bits": None if result.incumbent is None else result.incumbent.bit_string,
        }
    else:
        layout = build_layout(problem, K)
        weights = _penalty_weights(problem, cfg)
        model = assemble(problem, layout, weights, H4Mode(cfg["h4_mode"]))
        meta_extra = {"penalty_weights": weights.to_dict()}
        if solver == "brute":
            if layout.total_bits > BRUTE_FORCE_MAX_BITS:
                raise UsageError(
                    f"brute force needs total_bits <= {BRUTE_FORCE_MAX_BITS}, layout has {layout.total_bits}"
                )
            bits, energy = brute_force(model)
            sample_set = SampleSet([Sample(bits, energy, 0)], {"solver": "brute"})
        elif solver == "sa":
            p_eff = max_effective_granularity(problem, K) or granularity(K)
            sample_set = simulated_anneal(model, sampler, p_eff)
        else:
            sample_set = tabu_search(model, sampler)
    meta = {
        "solver": solver,
        "bits": K,
        "seed": sampler.seed,
        "total_bits": layout.total_bits,
        "sampler": sampler.to_dict(),
        "solver_info": sample_set.info,
        **meta_extra,
    }
    record = summarize(sample_set, problem, layout, meta=meta)
    for sample, row in zip(sample_set, record.rows):
        sample.feasible = row.feasible
    out.mkdir(parents=True, exist_ok=True)
    sample_set.to_csv(out / "samples.csv")
    record.write_json(out / "record.json")
    record.write_csv(out / "record.csv")
    record.write_violations_csv(out / "violations.csv")
    _write_json(out / "layout.json", layout.to_dict())
    return record


def _print_record(record) -> None:
    print(f"samples: {len(record.rows)}")
    print(f"success probability: {record.success_probability:.4f}")
    best = record.best
    if best is None:
        print("best feasible: none")
    else:
        sharpe = "n/a" if best.kpis.sharpe is None else f"{best.kpis.sharpe:.6g}"
        print(
            f"best feasible: return {best.kpis.expected_return:.6g}, "
            f"volatility {best.kpis.volatility:.6g}, sharpe {sharpe}"
        )


def cmd_compile(args) -> int:
    cfg = effective_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    problem = _problem_from_config(cfg)
    layout = build_layout(problem, cfg["bits"])
    weights = _penalty_weights(problem, cfg)
    model = assemble(problem, layout, weights, H4Mode(cfg["h4_mode"]))
    _write_json(out / "layout.json", {**layout.to_dict(), "penalty_weights": weights.to_dict()})
    export_qubo(model, out / "model.qubo")
    print(f"total_bits: {layout.total_bits}")
    print(f"density: {model.density:.6f}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = effective_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    problem = _problem_from_config(cfg)
    record = run_experiment(problem, cfg, out)
    _print_record(record)
    return EXIT_OK if record.has_feasible else EXIT_INFEASIBLE


def _sweep_values(axis: str, raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"sweep values must be integers: {raw!r}") from None
    if not values:
        raise UsageError("sweep needs at least one value")
    if any(v < 1 for v in values):
        raise UsageError("sweep values must be positive")
    return values


SUMMARY_COLUMNS = [
    "axis",
    "value",
    "seed",
    "status",
    "total_bits",
    "n_samples",
    "success_probability",
    "best_return",
    "best_volatility",
    "best_sharpe",
    "median_energy",
    "median_abs_budget_error",
    "feasible_median_abs_budget_error",
]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_sweep(args) -> int:
    if args.axis != "assets" and args.problem is None and args.generate is None and not args.config:
        raise UsageError("need --problem or --generate")
    values = _sweep_values(args.axis, args.values)
    if args.axis == "assets":
        # each point builds its own synthetic instance
        args.problem = None
        args.generate = values[0]
    cfg = effective_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg["sweep"] = {"axis": args.axis, "values": values}
    _announce(cfg, out)
    base = None if args.axis == "assets" else _problem_from_config(cfg)

    rows = []
    any_feasible = False
    all_ok = True
    for index, value in enumerate(values):
        seed = derive_seed(int(cfg["seed"]), index)
        point_cfg = dict(cfg)
        problem = base
        row = {"axis": args.axis, "value": value, "seed": seed}
        try:
            if args.axis == "K":
                point_cfg["bits"] = value
            elif args.axis == "reads":
                point_cfg["reads"] = value
            else:
                gen = dict(cfg["generate"] or {})
                point_cfg["generate"] = {**gen, "n_assets": value}
                point_cfg["problem"] = None
                problem = _problem_from_config(point_cfg)
            record = run_experiment(problem, point_cfg, out / f"{args.axis}={value}", seed=seed)
        except (UsageError, ProblemError, EncodingError, SamplerConfigError, ValueError) as exc:
            all_ok = False
            row.update(status=f"error: {exc}")
            print(f"{args.axis}={value}: error: {exc}", file=sys.stderr)
            rows.append(row)
            continue
        best = record.best
        any_feasible |= best is not None
        row.update(
            status="ok" if best is not None else "infeasible",
            total_bits=record.meta["total_bits"],
            n_samples=len(record.rows),
            success_probability=_fmt(record.success_probability),
            best_return=_fmt(None if best is None else best.kpis.expected_return),
            best_volatility=_fmt(None if best is None else best.kpis.volatility),
            best_sharpe=_fmt(None if best is None else best.kpis.sharpe),
            median_energy=_fmt(record.medians["energy"]),
            median_abs_budget_error=_fmt(record.medians["abs_budget_error"]),
            feasible_median_abs_budget_error=_fmt(record.medians["feasible_abs_budget_error"]),
        )
        print(f"{args.axis}={value}: {row['status']}, success {record.success_probability:.4f}")
        rows.append(row)

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n", restval="")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK if all_ok and any_feasible else EXIT_INFEASIBLE


def cmd_error_stats(args) -> int:
    if (args.bits is None) == (args.p is None):
        raise UsageError("give exactly one of --bits and --p")
    try:
        p = granularity(args.bits) if args.bits is not None else float(args.p)
        theory = error_stats_theory(p)
        mc = error_stats_monte_carlo(p, args.samples, args.seed)
    except (EncodingError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"p = {p!r}")
    print(f"{'':10s} {'theory':>12s} {'monte carlo':>12s} {'std err':>12s}")
    print(f"{'mean':10s} {theory.mean:12.2e} {mc.mean:12.2e} {mc.mean_se:12.2e}")
    print(f"{'variance':10s} {theory.variance:12.2e} {mc.variance:12.2e} {mc.variance_se:12.2e}")
    print(f"{'skewness':10s} {theory.skewness:12.3f} {mc.skewness:12.3f} {'':>12s}")
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["statistic", "theory", "monte_carlo", "std_err"])
            writer.writerow(["mean", repr(theory.mean), repr(mc.mean), repr(mc.mean_se)])
            writer.writerow(["variance", repr(theory.variance), repr(mc.variance), repr(mc.variance_se)])
            writer.writerow(["skewness", repr(theory.skewness), repr(mc.skewness), ""])
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = effective_config(args)
    problem = _problem_from_config(cfg)
    samples_path = Path(args.samples)
    if not samples_path.is_file():
        raise UsageError(f"samples file not found: {samples_path}")
    sample_set = SampleSet.from_csv(samples_path)
    if len(sample_set) == 0:
        raise UsageError(f"{samples_path}: no samples")
    n_bits = len(sample_set.first.bits)
    K = cfg["bits"]
    with_slack = cfg["solver"] != "constrained"
    saved = samples_path.parent / "layout.json"
    if saved.is_file():
        # the run directory records which layout produced the samples
        info = json.loads(saved.read_text(encoding="utf-8"))
        if info.get("bits_per_asset") != K:
            raise UsageError(f"{saved}: samples were drawn with K={info.get('bits_per_asset')}, not K={K}")
        with_slack = bool(info.get("slack_blocks")) or info.get("vola_slack_block") is not None
    layout = build_layout(problem, K, with_slack=with_slack)
    if n_bits != layout.total_bits:
        raise UsageError(f"{samples_path}: {n_bits}-bit samples do not fit the problem at K={K}")
    record = summarize(sample_set, problem, layout, meta={"source": samples_path.name, "bits": K})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    record.write_json(out / "record.json")
    record.write_csv(out / "record.csv")
    record.write_violations_csv(out / "violations.csv")
    _print_record(record)
    return EXIT_OK if record.has_feasible else EXIT_INFEASIBLE


# --- argument parsing ------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, solver_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON file with run settings")
    p.add_argument("--problem", help="problem JSON file")
    p.add_argument("--generate", type=int, metavar="N", help="use a synthetic instance with N assets")
    p.add_argument("--factors", type=int, default=3, help="factors of the synthetic instance")
    p.add_argument("--instance-seed", type=int, default=0, help="seed of the synthetic instance")
    p.add_argument("--class-constraints", action="store_true", help="add asset-class limits to the synthetic instance")
    p.add_argument("--bits", "-K", type=int, help="bits per asset (K)")
    p.add_argument("--h4-mode", dest="h4_mode", choices=[m.value for m in H4Mode if m is not H4Mode.SLACK_CONSTRAINT])
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", help="one value or a comma-separated list")
    p.add_argument("--lambda4", type=float)
    p.add_argument("--out", help="output directory")
    if solver_flags:
        p.add_argument("--solver", choices=SOLVERS)
        p.add_argument("--seed", type=int)
        p.add_argument("--reads", type=int)
        p.add_argument("--sweeps", type=int)
        p.add_argument("--tabu-tenure", dest="tabu_tenure", type=int)
        p.add_argument("--time-limit", dest="time_limit", type=float)
        p.add_argument("--eta", type=float, help="multiplier growth of the constrained solver")
        p.add_argument("--max-rounds", dest="max_rounds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qubo-portfolio", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="build the QUBO and export it")
    _add_common(p, solver_flags=False)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("solve", help="run one experiment")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_common(p)
    p.add_argument("--axis", choices=("K", "assets", "reads"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("error-stats", help="rounding-error moments, theory against Monte Carlo")
    p.add_argument("--bits", "-K", type=int)
    p.add_argument("--p", type=float, help="granularity instead of --bits")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV file")
    p.set_defaults(func=cmd_error_stats)

    p = sub.add_parser("report", help="summarize an existing samples CSV")
    _add_common(p, solver_flags=False)
    p.add_argument("--samples", required=True, help="samples CSV written by solve")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (ProblemError, EncodingError, SamplerConfigError, UnsupportedModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
