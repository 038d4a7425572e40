"""``mabtestbed`` command line: simulate, evaluate, analyze, serve, scenarios.

Exit codes: 0 success, 2 usage error, 3 input parse error, 4 runtime error.
Precedence for settings is flag > environment (``MABTESTBED_SEED``,
``MABTESTBED_DATA_DIR``) > config file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import socket
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .analytics import (
    SummaryTable,
    allocation_dynamics,
    engagement_summary,
    response_rate_table,
    reward_summary_table,
    subgroup_reward,
)
from .bandit import EncodingError, NoiseParams, ParameterError, PolicyTag
from .config import ConfigError, ServiceConfig, load_file, trial_config_from_dict
from .evaluation import SCENARIO_EFFECTS, evaluate_scenario, reward_report
from .logs import LogParseError, read_log, write_csv
from .simulation import (
    _SCENARIOS,
    TABLE_NOISE,
    as_noise,
    run_replications,
    scenario_config,
    scenario_description,
)

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_RUNTIME = 0, 2, 3, 4

POLICY_ALIASES = {
    "ts": PolicyTag.CONTEXTUAL_TS,
    "contextualts": PolicyTag.CONTEXTUAL_TS,
    "ur": PolicyTag.UNIFORM_RANDOM,
    "uniformrandom": PolicyTag.UNIFORM_RANDOM,
}


class UsageError(Exception):
    pass


def parse_policy(text: str) -> PolicyTag | float:
    key = text.lower()
    if key in POLICY_ALIASES:
        return POLICY_ALIASES[key]
    try:
        p = float(text)
    except ValueError:
        raise UsageError(f"unknown policy {text!r}; use ts, ur, both or a mixture probability") from None
    if not 0 <= p <= 1:
        raise UsageError("mixture probability must lie in [0, 1]")
    return p


def _policy_name(policy: PolicyTag | float) -> str:
    return policy.value if isinstance(policy, PolicyTag) else f"mixture:{policy:g}"


def env_seed(default: int = 0) -> int:
    raw = os.environ.get("MABTESTBED_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MABTESTBED_SEED must be an integer, got {raw!r}") from None


def _write_rows(rows: list[dict], stem: Path) -> list[str]:
    """``stem``.csv and ``stem``.json; returns the paths."""
    columns = list(rows[0]) if rows else []
    with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else row[k] for k in columns})
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    return [str(stem.with_suffix(".csv")), str(stem.with_suffix(".json"))]


def write_manifest(out: Path, command: str, argv, config: dict, seed, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": outputs,
        "duration_seconds": round(time.perf_counter() - started, 6),
    }
    path = out / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _noise_arg(v: float | None) -> NoiseParams:
    return TABLE_NOISE if v is None else as_noise(v)


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args, argv) -> int:
    started = time.perf_counter()
    seed = env_seed() if args.seed is None else args.seed
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if (args.scenario is None) == (args.config is None):
        raise UsageError("give exactly one of --scenario or --config")
    policies = (
        [PolicyTag.CONTEXTUAL_TS, PolicyTag.UNIFORM_RANDOM]
        if args.policy == "both"
        else [parse_policy(args.policy)]
    )

    if args.config:
        doc = load_file(args.config)
        if args.n is not None:
            doc["n"] = args.n
        if args.v is not None:
            doc.pop("noise", None)
            doc["v"] = args.v
        base = trial_config_from_dict(doc)
        resolved = {"config_file": str(args.config), "trial": doc}
    else:
        n = 1000 if args.n is None else args.n
        base = scenario_config(args.scenario, n, noise=_noise_arg(args.v))
        resolved = {"scenario": args.scenario, "n": n, "v": base.v}
    if args.update_every is not None:
        base = replace(base, update_every=args.update_every)
    resolved.update(
        {
            "policies": [_policy_name(p) for p in policies],
            "reps": args.reps,
            "update_every": base.update_every,
            "save_logs": args.save_logs,
        }
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    rsets = []
    for policy in policies:
        rset = run_replications(base.with_policy(policy), args.reps, seed, args.workers)
        rsets.append(rset)
        if args.save_logs:
            log_dir = out / "logs" / _policy_name(policy).replace(":", "_")
            log_dir.mkdir(parents=True, exist_ok=True)
            for i, log in enumerate(rset.logs[: args.save_logs]):
                path = log_dir / f"rep{i:04d}.csv"
                write_csv(log, path)
                outputs.append(str(path))
    subgroups = {
        f"{var.name}={value:g}": {var.name: value}
        for var in base.schema.variables
        for value in var.values
    }
    rows = reward_report(rsets, subgroups)
    outputs += _write_rows(rows, out / "reward_report")
    write_manifest(out, "simulate", argv, resolved, seed, outputs, started)
    for row in rows:
        if row["subgroup"] == "overall":
            mean = row["mean_reward"]
            shown = "n/a" if mean is None else f"{mean:.4f}"
            print(f"{row['policy']:>14}  N={row['N']}  mean reward {shown}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args, argv) -> int:
    started = time.perf_counter()
    seed = env_seed() if args.seed is None else args.seed
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if any(n < 1 for n in args.n):
        raise UsageError("every --n must be >= 1")
    policies = [parse_policy(p) for p in args.policies]
    if not all(isinstance(p, PolicyTag) for p in policies):
        raise UsageError("evaluate compares pure policies: use ts and/or ur")
    effects = args.effects or list(SCENARIO_EFFECTS[args.scenario])
    enc = scenario_config(args.scenario, 1).encoding
    for e in effects:
        if e not in enc.term_names:
            raise UsageError(
                f"effect {e!r} is not a term of scenario {args.scenario} "
                f"(terms: {', '.join(enc.term_names)})"
            )
    rows = evaluate_scenario(
        args.scenario,
        ns=args.n,
        policies=policies,
        effects=effects,
        reps=args.reps,
        seed=seed,
        noise=_noise_arg(args.v),
        analysis_noise=None if args.analysis_v is None else args.analysis_v,
        draws=args.draws,
        workers=args.workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = _write_rows(rows, out / "fpr_power")
    resolved = {
        "scenario": args.scenario,
        "n": args.n,
        "policies": [p.value for p in policies],
        "effects": effects,
        "reps": args.reps,
        "v": args.v,
        "analysis_v": args.analysis_v,
        "draws": args.draws,
    }
    write_manifest(out, "evaluate", argv, resolved, seed, outputs, started)
    for row in rows:
        print(
            f"{row['policy']:>14}  N={row['N']:<5} {row['effect']:<15} "
            f"{row['rate']:.3f} (se {row['mc_stderr']:.3f})"
        )
    return EXIT_OK


# -- analyze ----------------------------------------------------------------


def _save_table(table: SummaryTable, path: Path) -> str:
    table.to_csv(path)
    return str(path)


def cmd_analyze(args, argv) -> int:
    started = time.perf_counter()
    if args.periods < 1:
        raise UsageError("--periods must be >= 1")
    log = read_log(args.log)
    if not len(log):
        raise LogParseError(f"{args.log}: log has no records")
    factors = args.factor or sorted({str(x) for x in log.decision_point})
    contexts = args.context or list(log.context_names)
    for c in contexts:
        if c not in log.context_names:
            raise UsageError(f"log has no context column {c!r}")
    for f in factors:
        if f not in set(log.decision_point.tolist()):
            raise UsageError(f"log has no decision point {f!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    engagement = engagement_summary(log)
    with open(out / "engagement.json", "w", encoding="utf-8") as fh:
        json.dump(engagement, fh, indent=2)
    outputs.append(str(out / "engagement.json"))
    for f in factors:
        outputs.append(_save_table(response_rate_table(log, f), out / f"response_rate_{f}.csv"))
        outputs.append(_save_table(reward_summary_table(log, f), out / f"reward_summary_{f}.csv"))
        for c in contexts:
            outputs.append(_save_table(subgroup_reward(log, c, f), out / f"subgroup_{f}_{c}.csv"))
        dyn = allocation_dynamics(log.for_decision_point(f), args.periods, equal_count=args.equal_count)
        outputs.append(_save_table(dyn, out / f"allocation_{f}.csv"))
    resolved = {
        "log": str(args.log),
        "factors": factors,
        "contexts": contexts,
        "periods": args.periods,
        "equal_count": args.equal_count,
    }
    write_manifest(out, "analyze", argv, resolved, None, outputs, started)
    rate = engagement["rate"]
    print(
        f"{engagement['assignments']} assignments, {engagement['rated']} rated"
        + (f" ({100 * rate:.2f}%)" if rate is not None else "")
    )
    return EXIT_OK


# -- serve / scenarios ------------------------------------------------------


def _check_bind(host: str, port: int) -> None:
    with socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((host, port))
        except OSError as exc:
            raise RuntimeError(f"cannot bind {host}:{port}: {exc}") from None


def cmd_serve(args, argv) -> int:
    import uvicorn

    from .app import create_app

    config = ServiceConfig.load(args.config)
    overrides = {
        k: v
        for k, v in (("host", args.host), ("port", args.port), ("data_dir", args.data_dir))
        if v is not None
    }
    if overrides:
        config = ServiceConfig(**{**config.__dict__, **overrides})
    _check_bind(config.host, config.port)
    app = create_app(config)
    print(f"serving on http://{config.host}:{config.port} (data in {config.data_dir})", flush=True)
    # uvicorn re-raises SIGTERM after its own graceful shutdown; treat that as a clean exit
    signal.signal(signal.SIGTERM, lambda *_: None)
    uvicorn.run(app, host=config.host, port=config.port, log_level=args.log_level)
    return EXIT_OK


def cmd_scenarios(args, argv) -> int:
    docs = []
    for sid, (title, coefs) in _SCENARIOS.items():
        cfg = scenario_config(sid, 1)
        docs.append(
            {
                "scenario": sid,
                "description": scenario_description(sid),
                "coefficients": coefs,
                "terms": list(cfg.encoding.term_names),
                "context": {v.name: list(v.values) for v in cfg.schema.variables},
                "noise_sd": cfg.reward_model.noise_sd,
                "v": cfg.v,
                "effects": list(SCENARIO_EFFECTS[sid]),
            }
        )
    if args.json:
        print(json.dumps(docs, indent=2))
        return EXIT_OK
    for d in docs:
        terms = ""
        for t, c in d["coefficients"].items():
            part = f"{abs(c):g}" if t == "intercept" else f"{abs(c):g}*{t}"
            terms += (f"-{part}" if c < 0 else part) if not terms else (f" - {part}" if c < 0 else f" + {part}")
        print(f"Scenario {d['scenario']}: {d['description']}")
        print(f"  E[reward] = {terms}")
        print(f"  noise sd {d['noise_sd']:.4f}, grid 0..1 step 0.25, default v {d['v']:.4f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mabtestbed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run replicated trials and write logs and a reward report")
    s.add_argument("--scenario", type=int, choices=sorted(_SCENARIOS))
    s.add_argument("--config", help="YAML/JSON trial config instead of a built-in scenario")
    s.add_argument("--n", type=int, help="participants per trial (default 1000)")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--policy", default="both", help="ts, ur, both, or a mixture probability")
    s.add_argument("--v", type=float, help="posterior scale v (default: calibrated preset)")
    s.add_argument("--update-every", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--save-logs", type=int, default=10, metavar="K", help="write the first K logs")
    s.add_argument("--out", default="out/simulate")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="FPR / power tables for a built-in scenario")
    e.add_argument("--scenario", type=int, choices=sorted(_SCENARIOS), required=True)
    e.add_argument("--n", type=int, nargs="+", default=[100, 1000])
    e.add_argument("--reps", type=int, default=1000)
    e.add_argument("--policies", nargs="+", default=["ts", "ur"])
    e.add_argument("--effects", nargs="+")
    e.add_argument("--v", type=float, help="bandit scale v (default: calibrated preset)")
    e.add_argument("--analysis-v", type=float, help="analysis scale (default: same as bandit)")
    e.add_argument("--draws", type=int, default=10_000)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--out", default="out/evaluate")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="deployment-style tables from a log file")
    a.add_argument("log")
    a.add_argument("--factor", action="append", help="decision point (repeatable; default all)")
    a.add_argument("--context", action="append", help="context column (repeatable; default all)")
    a.add_argument("--periods", type=int, default=4)
    a.add_argument("--equal-count", action="store_true", help="equal-count instead of equal-time periods")
    a.add_argument("--out", default="out/analyze")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("serve", help="run the personalization service")
    v.add_argument("--config", help="service config file")
    v.add_argument("--host")
    v.add_argument("--port", type=int)
    v.add_argument("--data-dir")
    v.add_argument("--log-level", default="info")
    v.set_defaults(func=cmd_serve)

    c = sub.add_parser("scenarios", help="print the built-in scenario definitions")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_scenarios)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args, argv)
    except (UsageError, ParameterError, EncodingError) as exc:
        print(f"mabtestbed {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LogParseError, ConfigError) as exc:
        print(f"mabtestbed {args.command}: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (OSError, RuntimeError) as exc:
        print(f"mabtestbed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
