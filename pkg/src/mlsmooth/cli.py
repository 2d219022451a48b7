"""Command-line entry point: ``mlsmooth {simulate,schedule,run,study,fit-cost}``.

Results go to stdout (JSON) or to the ``--output`` file (CSV).  On failure a
single JSON object ``{"error": ..., "message": ...}`` is written to stderr and
the exit code is 2 for bad input and 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

from mlsmooth.bench import (
    METHODS,
    ExperimentConfig,
    build_model,
    fit_cost,
    loglog_slope,
    read_csv,
    run_study,
    summarize,
    write_csv,
)
from mlsmooth.mlmc import make_schedule
from mlsmooth.models import simulate


class UsageError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _config(args, **overrides) -> ExperimentConfig:
    d = _load_config(args.config)
    for key in ("seed", "data_seed", "replicates", "workers", "output"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "deterministic", False):
        d["deterministic"] = True
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, allow_nan=False, default=str)
    sys.stdout.write("\n")


def _clean(x):
    """NaN to None so the JSON stays standard."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    return x


def cmd_simulate(args) -> None:
    cfg = _config(args, model=args.model)
    horizon = cfg.n_cap + 1 if args.horizon is None else args.horizon
    traj, obs = simulate(build_model(cfg), horizon, cfg.data_seed)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("t", "x", "y"))
        for t, (x, y) in enumerate(zip(traj.values, obs.values)):
            w.writerow((t, repr(float(x)), repr(float(y))))
    finally:
        if args.output:
            out.close()


def cmd_schedule(args) -> None:
    s = make_schedule(args.epsilon, args.rho, args.delta, args.n_cap)
    d = s.to_dict()
    d["cost_units"] = s.cost_units
    _dump(d)


def _report(records, output) -> None:
    summary = summarize(records)
    if not output:
        sys.stdout.write(write_csv(records))
        sys.stdout.flush()
        return
    _dump(_clean({"output": output, "rows": len(records), "summary": summary}))


def cmd_run(args) -> None:
    over = {"methods": [args.method]}
    if args.epsilon is not None:
        over["epsilons"] = [args.epsilon]
    if args.particles is not None:
        over["particles"] = [args.particles]
    if args.model is not None:
        over["model"] = args.model
    cfg = _config(args, **over)
    _report(run_study(cfg), cfg.output)


def cmd_study(args) -> None:
    cfg = _config(args, model=args.model)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    _report(run_study(cfg, progress), cfg.output)


def cmd_fit_cost(args) -> None:
    rows = [r for r in read_csv(args.input) if not math.isnan(r.epsilon)]
    if args.method:
        rows = [r for r in rows if r.method == args.method]
    summary = summarize(rows)
    by_method: dict = {}
    for s in summary:
        by_method.setdefault(s["method"], []).append(s)
    result = {}
    for method, ss in by_method.items():
        if len(ss) < 2:
            continue
        eps = [s["epsilon"] for s in ss]
        cost = [s["cost_ops"] for s in ss]
        entry = {"cost_fit": fit_cost(eps, cost), "cost_slope": loglog_slope(eps, cost)}
        mse = [s["mse"] for s in ss]
        if all(m > 0 for m in mse):
            entry["mse_slope"] = loglog_slope(eps, mse)
        result[method] = entry
    if not result:
        raise UsageError("need at least two epsilon settings of one method")
    _dump(result)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlsmooth", description="Multilevel fixed-point smoothing experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output_help="CSV output path"):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed for the Monte Carlo streams")
        sp.add_argument("--data-seed", dest="data_seed", type=int, help="seed of the observation record")
        sp.add_argument("--output", "-o", help=output_help)

    sp = sub.add_parser("simulate", help="simulate a state and observation record")
    common(sp, "CSV output path (default stdout)")
    sp.add_argument("--model", choices=("linear-gaussian", "stoch-vol"))
    sp.add_argument("--horizon", type=int, help="last time index (default n_cap + 1)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("schedule", help="print the level schedule for an accuracy")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--rho", type=float, default=0.8)
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--n-cap", dest="n_cap", type=int, default=25)
    sp.set_defaults(func=cmd_schedule)

    for name, helptext in (("run", "run one method at one setting"), ("study", "run every setting of a config")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--model", choices=("linear-gaussian", "stoch-vol"))
        sp.add_argument("--replicates", "-M", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--deterministic", action="store_true", help="write zero wall times for byte-stable CSV")
        if name == "run":
            sp.add_argument("--method", choices=METHODS, required=True)
            sp.add_argument("--epsilon", type=float)
            sp.add_argument("--particles", "-N", type=int)
            sp.set_defaults(func=cmd_run)
        else:
            sp.add_argument("--verbose", "-v", action="store_true")
            sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("fit-cost", help="fit cost and MSE trends from a study CSV")
    sp.add_argument("input", help="study CSV")
    sp.add_argument("--method", choices=METHODS)
    sp.set_defaults(func=cmd_fit_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(json.dumps({"error": "UsageError", "message": "invalid command line"}), file=sys.stderr)
        return int(exc.code or 0)
    try:
        args.func(args)
    except (UsageError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
