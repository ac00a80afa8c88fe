"""Command-line front end: single runs, method comparisons, audits, selftest.

Config files are flat ``key=value`` text mirroring the flag names (without
leading dashes); command-line flags override file entries.  Every run echoes
its fully-resolved configuration to stdout and next to the output file, and
re-feeding that echo reproduces the run bit for bit.

Exit codes: 0 success, 2 usage or I/O error, 3 numerical failure (the
diagnostic carries the iteration index), 1 failed audit/selftest.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness, schedules
from .compressors import spec_from_fraction
from .core import client_oracle_streams, derive_stream
from .engine import (
    ConfigError,
    NumericalFailureError,
    ProblemConfig,
    RunConfig,
    Simulation,
    make_problem,
    write_csv,
    write_jsonl,
)
from .momentum import MomentumState, update_momentum
from .reference import run_centralized_reference

_BOOL = {"true": True, "false": False}

# key, parser, default; keys mirror the CLI flag names
_RUN_KEYS = [
    ("method", str, None),
    ("normalized", "bool", "true"),
    ("clients", int, "1"),
    ("dim", int, "10"),
    ("iters", int, "1000"),
    ("gamma0", float, "1.0"),
    ("schedule", str, "decreasing"),
    ("eta", float, None),
    ("gamma", float, None),
    ("granularity", str, "iter"),
    ("compressor", str, "identity"),
    ("problem", str, "quadratic"),
    ("heterogeneity", float, "1.0"),
    ("condition", float, "10.0"),
    ("quad-structure", str, "rotated"),
    ("samples-per-client", int, "50"),
    ("sorted-fraction", float, "0.5"),
    ("ridge", float, "0.1"),
    ("separation", float, "3.0"),
    ("sigma-g", float, "0.0"),
    ("sigma-h", float, "0.0"),
    ("seed", int, "0"),
    ("problem-seed", int, "0"),
    ("record-stride", int, "1"),
    ("rhm-independent-batch", "bool", "false"),
    ("parallel-clients", "bool", "false"),
    ("x0-scale", float, "1.0"),
    ("out", str, None),
    ("trace-out", str, None),
]


class UsageError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL[raw.lower()]
    except KeyError:
        raise UsageError(f"expected true or false, got {raw!r}") from None


def _parse_value(key: str, parser, raw: str):
    if raw is None:
        return None
    if parser == "bool":
        return _parse_bool(raw)
    try:
        return parser(raw)
    except ValueError:
        raise UsageError(f"malformed value for {key}: {raw!r}") from None


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def resolve_values(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and explicit flags into typed values."""
    raw = {key: default for key, _, default in _RUN_KEYS}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        known = {key for key, _, _ in _RUN_KEYS}
        for key in file_values:
            if key not in known:
                raise UsageError(f"unknown config key {key!r}")
        raw.update(file_values)
    for key, _, _ in _RUN_KEYS:
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            raw[key] = flag_value
    return {key: _parse_value(key, parser, raw[key]) for key, parser, _ in _RUN_KEYS}


def build_run_config(values: dict) -> RunConfig:
    """Turn resolved CLI values into a validated RunConfig."""
    method = values["method"]
    if method is None:
        raise UsageError("missing required field: method")
    if method not in schedules.KINDS:
        raise UsageError(
            f"unknown method {method!r}; valid methods: {', '.join(schedules.KINDS)}"
        )

    granularity = values["granularity"]
    epoch_length = None
    if granularity != "iter":
        if not granularity.startswith("epoch:"):
            raise UsageError(f"granularity must be 'iter' or 'epoch:L', got {granularity!r}")
        epoch_length = _parse_value("granularity", int, granularity.split(":", 1)[1])

    if values["schedule"] == "decreasing":
        schedule = schedules.for_kind(method, gamma0=values["gamma0"], epoch_length=epoch_length)
    elif values["schedule"] == "constant":
        if values["gamma"] is None or values["eta"] is None:
            raise UsageError("constant schedule needs --gamma and --eta")
        schedule = schedules.Schedule(
            mode="constant", gamma_const=values["gamma"], eta_const=values["eta"],
            epoch_length=epoch_length,
        )
    else:
        raise UsageError(f"unknown schedule {values['schedule']!r}")

    comp = values["compressor"]
    kind, _, frac = comp.partition(":")
    if kind not in ("identity", "topk", "randk"):
        raise UsageError(f"compressor must be identity, topk:<frac> or randk:<frac>, got {comp!r}")
    fraction = _parse_value("compressor", float, frac) if frac else None
    try:
        compressor = spec_from_fraction(kind, values["dim"], fraction)
    except ValueError as exc:
        raise UsageError(f"compressor: {exc}") from None

    problem = ProblemConfig(
        family=values["problem"],
        n=values["clients"],
        d=values["dim"],
        seed=values["problem-seed"],
        sigma_g=values["sigma-g"],
        sigma_h=values["sigma-h"],
        heterogeneity=values["heterogeneity"],
        condition=values["condition"],
        structure=values["quad-structure"],
        samples_per_client=values["samples-per-client"],
        sorted_fraction=values["sorted-fraction"],
        ridge=values["ridge"],
        separation=values["separation"],
    )
    config = RunConfig(
        kind=method,
        schedule=schedule,
        compressor=compressor,
        problem=problem,
        iterations=values["iters"],
        master_seed=values["seed"],
        normalized=values["normalized"],
        rhm_independent_batch=values["rhm-independent-batch"],
        record_stride=values["record-stride"],
        parallel_clients=values["parallel-clients"],
        trace_level=1 if values["trace-out"] else 0,
        x0_scale=values["x0-scale"],
    )
    config.validate()
    return config


def _echo_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_resolved(values: dict) -> str:
    lines = []
    for key, _, _ in _RUN_KEYS:
        if values[key] is None:
            continue
        lines.append(f"{key}={_echo_value(values[key])}")
    return "\n".join(lines) + "\n"


def _write_outputs(result, values) -> None:
    out = values["out"]
    if out:
        if out.endswith(".jsonl"):
            write_jsonl(result.records, out)
        else:
            write_csv(result.records, out)
        with open(out + ".config", "w") as fh:
            fh.write(format_resolved(values))
    trace_out = values["trace-out"]
    if trace_out and result.trace is not None:
        with open(trace_out, "wb") as fh:
            fh.write(result.trace)


def cmd_run(args) -> int:
    values = resolve_values(args)
    config = build_run_config(values)
    sys.stdout.write(format_resolved(values))
    result = Simulation(config).run()
    _write_outputs(result, values)
    final = result.records[-1]
    print(
        f"done: T={config.iterations} grad_norm={final.grad_norm:.6g} "
        f"f={final.f_value:.6g} output_index={result.output_index} "
        f"bits={result.total_bits}"
    )
    return 0


def cmd_compare(args) -> int:
    values = resolve_values(args)
    if values["method"] is None:
        values["method"] = "sgdm"  # base config placeholder; overridden per kind
    base = build_run_config(values)
    kinds = [k.strip() for k in args.methods.split(",") if k.strip()]
    for kind in kinds:
        if kind not in schedules.KINDS:
            raise UsageError(f"unknown method {kind!r} in --methods")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not kinds or not seeds:
        raise UsageError("--methods and --seeds must be non-empty")
    report = harness.compare_methods(base, kinds, seeds, epsilon=args.eps,
                                     workers=args.workers)
    print(report.format_table())
    if values["out"]:
        report.to_csv(values["out"])
        with open(values["out"] + ".config", "w") as fh:
            fh.write(format_resolved(values))
            fh.write(f"# methods={','.join(kinds)} seeds={','.join(map(str, seeds))}\n")
    return 0


def cmd_audit(args) -> int:
    values = resolve_values(args)
    if values["sigma-g"] > 0 or values["sigma-h"] > 0:
        raise UsageError("the descent audit needs a deterministic run (sigma-g=0, sigma-h=0)")
    values["record-stride"] = 1
    config = build_run_config(values)
    result = Simulation(config).run()
    _write_outputs(result, values)
    violations = harness.audit_descent(result)
    steps = len(result.records) - 1
    print(f"descent audit: {violations} violations over {steps} steps")
    return 0 if violations == 0 else 1


def _selftest_checks():
    problem_cfg = ProblemConfig(family="quadratic", n=3, d=12, seed=7,
                                sigma_g=0.1, heterogeneity=0.5, condition=5.0)
    problem = make_problem(problem_cfg)

    def eta_one_collapse():
        x_prev = derive_stream(1, ("check", "xp")).normal(12)
        x_next = derive_stream(1, ("check", "xn")).normal(12)
        v0 = derive_stream(1, ("check", "v")).normal(12)
        for kind in schedules.KINDS:
            rng = client_oracle_streams(123, 0, t=4)
            new = update_momentum(kind, MomentumState(v0.copy()), problem, 0,
                                  x_prev, x_next, 1.0, rng)
            rng2 = client_oracle_streams(123, 0, t=4)
            expected = problem.stoch_grad(0, x_next, rng2.grad())
            if not np.allclose(new.v, expected, rtol=0, atol=0):
                return False
        return True

    def identity_collapse():
        cfg = RunConfig(
            kind="sgdm", schedule=schedules.for_kind("sgdm"),
            compressor=spec_from_fraction("identity", 12),
            problem=problem_cfg, iterations=30, master_seed=5,
        )
        sim = Simulation(cfg)
        return all(sim.step().V_t == 0.0 for _ in range(30))

    def centralized_equivalence():
        for kind in schedules.KINDS:
            cfg = RunConfig(
                kind=kind, schedule=schedules.for_kind(kind),
                compressor=spec_from_fraction("identity", 12),
                problem=ProblemConfig(family="quadratic", n=1, d=12, seed=3,
                                      sigma_g=0.1, condition=5.0),
                iterations=40, master_seed=11,
            )
            sim = Simulation(cfg)
            xs = [sim.server.x.copy()]
            for _ in range(40):
                sim.step()
                xs.append(sim.server.x.copy())
            ref = run_centralized_reference(cfg)
            if np.abs(np.array(xs) - ref).max() > 1e-12:
                return False
        return True

    return [
        ("eta=1 collapse", eta_one_collapse),
        ("identity-compressor collapse", identity_collapse),
        ("centralized equivalence", centralized_equivalence),
    ]


def cmd_selftest(args) -> int:
    ok = True
    for name, check in _selftest_checks():
        passed = check()
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    print("all checks passed" if ok else "selftest FAILED")
    return 0 if ok else 1


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for key, _, _ in _RUN_KEYS:
        parser.add_argument(f"--{key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efmom",
        description="normalized error-feedback optimization lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment, export metrics")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods on shared instances")
    _add_run_flags(p_cmp)
    p_cmp.add_argument("--methods", required=True, help="comma-separated momentum kinds")
    p_cmp.add_argument("--seeds", required=True, help="comma-separated run seeds")
    p_cmp.add_argument("--eps", type=float, default=None,
                       help="threshold for iteration/bit accounting")
    p_cmp.add_argument("--workers", type=int, default=1)
    p_cmp.set_defaults(func=cmd_compare)

    p_audit = sub.add_parser("audit", help="run deterministically and audit descent")
    _add_run_flags(p_audit)
    p_audit.set_defaults(func=cmd_audit)

    p_self = sub.add_parser("selftest", help="run built-in consistency checks")
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
