"""Command-line entry point: ``mpsim gen-trace | run | compare | report``.

Exit codes: 0 ok, 2 bad flags or configuration, 3 I/O failure, 4 trace too
short for the warm-up + measurement windows, 5 internal simulator fault.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import __version__
from .fetch import CLI_NAMES, PERFECT_SINGLE, policy_name
from .metrics import NA, emit_report, recovery_percentage, report_row
from .pipeline import ConfigError, MachineConfig, RunStats, SimulatorFault, compute_ipc, run
from .trace import (DEFAULT_MIX, TraceFormatError, TraceSpec, TraceValidationError,
                    capture_branch_oracle, generate_synthetic_trace, read_trace, write_trace)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SHORT = 4
EXIT_FAULT = 5

MIX_PREFIX = "mix_"

# flag dest -> config key
MACHINE_FLAGS = {
    "width": "fetch_width",
    "levels": "max_branch_levels",
    "warmup": "warmup_instructions",
    "measure": "measure_instructions",
    "target_ipc": "target_ipc",
}
TRACE_FLAGS = {
    "insts": ("instruction_count", "--insts"),
    "branch_frac": ("branch_fraction", "--branch-frac"),
    "hard_frac": ("hard_branch_fraction", "--hard-frac"),
    "bias": ("biased_taken_probability", "--bias"),
    "static_branches": ("static_branch_count", "--static-branches"),
    "seed": ("seed", "--seed"),
    "locality": ("dependency_locality", "--locality"),
}

POLICY_HELP = ("fetch policy: perfect (oracle single path), gshare (gshare single path), "
               "divided (divided eager), dee, selective-dee, dynamic-dee")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- config file
def _machine_keys() -> dict:
    return {f.name: f.type for f in fields(MachineConfig)}


def _trace_keys() -> dict:
    keys = {f.name: f.type for f in fields(TraceSpec) if f.name != "op_class_mix"}
    for op in DEFAULT_MIX:
        keys[MIX_PREFIX + op] = "float"
    return keys


def config_keys() -> dict:
    keys = _machine_keys()
    keys.update(_trace_keys())
    return keys


def _convert(key: str, typ, raw: str):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if key == "policy":
            return policy_name(raw)
        if typ == "int":
            return int(raw, 0)
        if typ == "float":
            return float(raw)
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"config key {key!r}: {e}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    keys = config_keys()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_USAGE, f"{origin}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise CliError(EXIT_USAGE, f"{origin}:{n}: unknown config key {key!r}")
        out[key] = _convert(key, keys[key], raw)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config {path}: {e.strerror or e}") from None
    return parse_config_text(text, path)


def machine_config(conf: dict, args) -> MachineConfig:
    mk = _machine_keys()
    vals = {k: v for k, v in conf.items() if k in mk}
    for dest, key in MACHINE_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            vals[key] = v
    if getattr(args, "policy", None):
        vals["policy"] = policy_name(args.policy)
    cfg = MachineConfig(**vals)
    try:
        cfg.validate()
    except ConfigError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    return cfg


def trace_spec(conf: dict, args) -> TraceSpec:
    vals = {k: v for k, v in conf.items() if k in _trace_keys() and not k.startswith(MIX_PREFIX)}
    mix = dict(DEFAULT_MIX)
    for k, v in conf.items():
        if k.startswith(MIX_PREFIX):
            mix[k[len(MIX_PREFIX):]] = v
    vals["op_class_mix"] = mix
    flag_of = {}
    for dest, (key, flag) in TRACE_FLAGS.items():
        flag_of[key] = flag
        v = getattr(args, dest, None)
        if v is not None:
            vals[key] = v
    spec = TraceSpec(**vals)
    try:
        spec.validate()
    except ValueError as e:
        msg = str(e)
        name = msg.split(" ", 1)[0].rstrip(":")
        if name in flag_of:
            msg = f"{flag_of[name]}: {msg}"
        raise CliError(EXIT_USAGE, msg) from None
    return spec


# ------------------------------------------------------------------ helpers
def _load_trace(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            return read_trace(f)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read trace {path}: {e.strerror or e}") from None
    except (TraceFormatError, TraceValidationError) as e:
        raise CliError(EXIT_IO, f"{path}: {e}") from None


def _write(path: str | None, data: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
        return
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e.strerror or e}") from None


def _label(args) -> str:
    return args.tag if args.tag else Path(args.trace).stem


def _simulate(trace, cfg: MachineConfig, label: str) -> RunStats:
    oracle = capture_branch_oracle(trace) if cfg.policy == PERFECT_SINGLE else None
    try:
        return run(trace, oracle, cfg, label=label)
    except ConfigError as e:
        raise CliError(EXIT_SHORT, str(e)) from None
    except SimulatorFault as e:
        raise CliError(EXIT_FAULT, f"simulator fault: {e}") from None
    except Exception as e:  # any other escape is an internal bug
        raise CliError(EXIT_FAULT, f"internal error: {type(e).__name__}: {e}") from None


def _fmt(v) -> str:
    return NA if v is None else f"{float(v):.4f}"


# ----------------------------------------------------------------- commands
def cmd_gen_trace(args) -> int:
    spec = trace_spec(load_config(args.config), args)
    records = generate_synthetic_trace(spec)
    _write(args.out, write_trace(records).encode())
    cond = sum(1 for r in records if r.op == "branch_cond")
    print(f"wrote {len(records)} instructions ({cond} conditional branches, seed {spec.seed}) to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    conf = load_config(args.config)
    cfg = machine_config(conf, args)
    trace = _load_trace(args.trace)
    stats = _simulate(trace, cfg, _label(args))
    if args.out:
        _write(args.out, stats.to_json().encode())
    print(f"{stats.label} policy={args.policy} ipc={compute_ipc(stats):.4f} "
          f"cycles={stats.cycles} committed={stats.committed_instructions} "
          f"recoveries={stats.recoveries} recovery_pct={_fmt(recovery_percentage(stats))}")
    return EXIT_OK


def _compare_one(job):
    trace_path, cfg, label = job
    try:
        trace = _load_trace(trace_path)
        return _simulate(trace, cfg, label), None
    except CliError as e:
        return None, str(e)


def cmd_compare(args) -> int:
    conf = load_config(args.config)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not names:
        raise CliError(EXIT_USAGE, "--policies: empty policy list")
    cfgs = []
    for name in names:
        try:
            policy_name(name)
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"--policies: {e}") from None
        args.policy = name
        cfgs.append(machine_config(conf, args))
    _load_trace(args.trace)  # surface I/O and format errors before forking work
    label = _label(args)
    jobs = [(args.trace, cfg, label) for cfg in cfgs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_compare_one, jobs))
    else:
        results = [_compare_one(j) for j in jobs]
    rows = [report_row(label, stats, err) for stats, err in results]
    _write(args.out, emit_report(rows, args.format))
    failed = sum(1 for s, _ in results if s is None)
    if failed:
        print(f"{failed} of {len(results)} policy runs failed", file=sys.stderr)
    return EXIT_OK


REPORT_KINDS = {
    "fig1-buckets": ("label", "policy", "fraction_le_03", "fraction_gt_03",
                     "fraction_03_to_07", "fraction_gt_07", "mispredictions"),
    "fig4-recoveries": ("label", "policy", "fetch_width", "max_levels", "cond_branches",
                        "recoveries", "recovery_pct"),
    "fig5-confidence": ("label", "policy", "pvn", "pvp", "sensitivity", "specificity"),
}


def _report_fields(kind: str, stats: RunStats) -> dict:
    row = report_row(stats.label, stats)
    row["cond_branches"] = stats.cond_branches
    row["recoveries"] = stats.recoveries
    row["mispredictions"] = stats.cond_mispredictions
    if kind == "fig5-confidence" and not stats.confusion_matrix.total:
        for k in ("pvn", "pvp", "sensitivity", "specificity"):
            row[k] = None
    return row


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot read stats {path}: {e.strerror or e}") from None
        try:
            stats = RunStats.from_json(text)
        except (ValueError, TypeError) as e:
            raise CliError(EXIT_IO, f"{path}: not a stats file ({e})") from None
        rows.append(_report_fields(args.kind, stats))
    header = []
    if args.kind == "fig1-buckets":
        # bands are shares of dynamic mispredictions, by the static branch's error rate
        header = [b"# fractions of dynamic mispredictions; bands (0,0.3] (0.3,0.7] (0.7,1]\r\n"]
    body = emit_report(rows, "csv", columns=REPORT_KINDS[args.kind])
    _write(args.out, b"".join(header) + body)
    return EXIT_OK


# ------------------------------------------------------------------- parser
def _add_machine_flags(p) -> None:
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    p.add_argument("--width", type=int, help="fetch width (default 32)")
    p.add_argument("--levels", type=int, help="maximum unresolved branch levels (default 25)")
    p.add_argument("--target-ipc", dest="target_ipc", type=int,
                   help="selective-dee slice size (default 8)")
    p.add_argument("--warmup", type=int, help="warm-up instructions (default 0)")
    p.add_argument("--measure", type=int,
                   help="measured instructions after warm-up (default: rest of the trace)")
    p.add_argument("--tag", help="run label recorded in outputs (default: trace file name)")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mpsim", description="Multi-path eager execution simulator.",
                 epilog="Policy names: " + ", ".join(f"{k} = {v}" for k, v in CLI_NAMES.items()))
    ap.add_argument("--version", action="version", version=f"mpsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-trace", help="write a synthetic trace")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--insts", type=int)
    g.add_argument("--branch-frac", dest="branch_frac", type=float)
    g.add_argument("--hard-frac", dest="hard_frac", type=float)
    g.add_argument("--bias", type=float, help="taken probability of easy branches")
    g.add_argument("--static-branches", dest="static_branches", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--locality", type=float, help="chance a source reads a recent result")
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="simulate one policy")
    r.add_argument("--trace", required=True)
    r.add_argument("--policy", required=True, help=POLICY_HELP)
    r.add_argument("--out", help="stats JSON path")
    _add_machine_flags(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="simulate several policies on one trace")
    c.add_argument("--trace", required=True)
    c.add_argument("--policies", required=True, help="comma list; " + POLICY_HELP)
    c.add_argument("--out", help="report path (default stdout)")
    c.add_argument("--format", choices=("csv", "json"), default="csv")
    c.add_argument("--jobs", type=int, default=1, help="parallel simulations")
    _add_machine_flags(c)
    c.set_defaults(func=cmd_compare, policy=None)

    p = sub.add_parser("report", help="derived tables from stats JSON files")
    p.add_argument("kind", choices=sorted(REPORT_KINDS))
    p.add_argument("inputs", nargs="+", help="stats JSON files")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "policy", None):
        try:
            policy_name(args.policy)
        except ValueError as e:
            print(f"mpsim: error: --policy: {e}", file=sys.stderr)
            return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("mpsim: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as e:
        print(f"mpsim: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
