"""Command line entry point: ``chirp run | plan-debug | list-options | emit-curve``.

Config files hold ``key=value`` lines; ``#`` starts a comment.  Keys are the
long flag names of ``run`` (``domain``, ``method``, ``tasks``, ``trials``,
``seed``, ``budget``, ``out``, ``size``, ``map_file``) and ``hyper.<name>`` for
any hyperparameter, e.g. ``hyper.k_cap=3``.  Values from the config file take
precedence over flags given on the command line.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error; in
both failure cases a one-line message goes to stderr.
"""

from __future__ import annotations

import argparse
import ast
import sys
from pathlib import Path

from .agent import METHODS, load_model
from .domains import DOMAIN_IDS
from .harness import ExperimentConfig, config_from_text, emit_curve, run_experiment
from .planner import PlanInvalid, compute_option_plan, validate_plan

_RUN_KEYS = {"domain": str, "method": str, "tasks": int, "trials": int, "seed": int, "budget": int, "out": str,
             "size": str, "map_file": str}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chirp", description="Continual hierarchical RL with invented options.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run trials of a task stream and write metrics CSVs")
    r.add_argument("--domain", choices=DOMAIN_IDS)
    r.add_argument("--method", choices=METHODS, default="chirp")
    r.add_argument("--tasks", type=int, default=20)
    r.add_argument("--trials", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--budget", type=int, default=None, help="per-task step budget H (default: domain table)")
    r.add_argument("--out", default="runs")
    r.add_argument("--size", default="full", help="full, desk or WxH")
    r.add_argument("--map-file", dest="map_file", default=None)
    r.add_argument("--config", default=None, help="key=value file; overrides flags")
    r.add_argument("--set", dest="sets", action="append", default=[], metavar="NAME=VALUE",
                   help="hyperparameter override (repeatable)")
    r.add_argument("--checkpoints", action="store_true", help="save a checkpoint after every task")
    r.add_argument("--quiet", action="store_true")

    d = sub.add_parser("plan-debug", help="plan from a start state to a goal with a checkpoint's model")
    d.add_argument("checkpoint")
    d.add_argument("--start", required=True, help="comma separated state values, e.g. 3.5,2.5")
    d.add_argument("--goal", required=True, help="goal text, e.g. 'x=[4.0,5.0);y=[1.0,2.0)'")
    d.add_argument("--learned-only", action="store_true")

    lo = sub.add_parser("list-options", help="describe the options stored in a checkpoint")
    lo.add_argument("checkpoint")

    c = sub.add_parser("emit-curve", help="combine metrics CSVs into a step/mean/std curve file")
    c.add_argument("metrics", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--every", type=int, default=10_000)
    return p


def _run(args) -> int:
    settings = {k: getattr(args, k) for k in _RUN_KEYS}
    overrides = {}
    for item in args.sets:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects NAME=VALUE, got {item!r}")
        overrides[name.strip()] = value.strip()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from e
        parsed = config_from_text(text)
        overrides.update(parsed.pop("overrides"))
        for key, value in parsed.items():
            if key not in _RUN_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            settings[key] = _RUN_KEYS[key](value)
    if settings["domain"] is None:
        raise UsageError("--domain is required (flag or config file)")
    config = ExperimentConfig(
        domain_id=settings["domain"], method=settings["method"], n_tasks=settings["tasks"],
        n_trials=settings["trials"], seed=settings["seed"], out_dir=settings["out"], size=settings["size"],
        budget=settings["budget"], map_file=settings["map_file"], overrides=overrides,
        checkpoints=args.checkpoints,
    )
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    out = run_experiment(config, log=log)
    for path in out["metrics"]:
        print(f"wrote {path}")
    print(f"wrote {out['summary']}")
    return 0


def _parse_state(text: str, schema):
    try:
        values = ast.literal_eval(f"({text},)")
    except (ValueError, SyntaxError) as e:
        raise UsageError(f"bad state {text!r}") from e
    return schema.state(*values)


def _plan_debug(args) -> int:
    from .core import _parse_goal

    cat, model, _ = load_model(args.checkpoint)
    start = _parse_state(args.start, cat.schema)
    goal = _parse_goal(args.goal)
    goal.bind(cat.schema)
    leaf = cat.lookup(start)
    plan = compute_option_plan(model, cat, leaf, goal, learned_only=args.learned_only)
    print(f"start {leaf.id}<{cat.describe(leaf.id)}>")
    if plan is None:
        print("no plan")
        return 1
    print(f"plan cost {plan.cost:g}, {len(plan)} step(s), {'all learned' if plan.learned else 'needs learning'}")
    for k, line in enumerate(plan.describe(cat)):
        print(f"  {k}: {line}")
    try:
        validate_plan(plan, cat, model)
        print("valid")
    except PlanInvalid as e:
        print(f"invalid: {e}")
        return 1
    return 0


def _list_options(args) -> int:
    cat, model, data = load_model(args.checkpoint)
    print(f"{len(model)} option(s) in {data['domain_id']} checkpoint after {data['tasks_done']} task(s)")
    for o in model:
        print(o.describe(cat))
        print(f"    success_rate={o.success_rate:.2f} episodes={o.episodes} provenance={o.provenance}")
    return 0


def _emit_curve(args) -> int:
    path = emit_curve(args.metrics, args.out, every=args.every)
    print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    handlers = {"run": _run, "plan-debug": _plan_debug, "list-options": _list_options, "emit-curve": _emit_curve}
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"chirp {args.command}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"chirp {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
