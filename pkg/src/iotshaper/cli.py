"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 some grid point (or audit) failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

from . import io
from .core import PacketAlphabet, PrivacyBudget, ShaperError, parse_eps
from .experiments import TRADEOFF_COLUMNS, compare_iid_bursty, run_point, tradeoff_sweep
from .optimizer import SWEEP_COLUMNS
from .privacy import AdjacencyKind, audit_stream_dp, ldp_level
from .shaping import MechanismKind, shape_stream
from .traces import DEVICE_PMFS, discretize, estimate_pmf, merge_pmfs, synthesize_bursty_stream, \
    synthesize_stream, zipf_pmf

EXIT_OK, EXIT_USAGE, EXIT_FAILURES = 0, 1, 2
VARIANTS = [k.value for k in MechanismKind]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> List[float]:
    try:
        return [parse_eps(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def load_pmf(spec: str):
    """PMF from a JSON path, ``zipf:S:SIZES`` or ``device:NAME[+NAME...]``."""
    if spec.startswith("zipf:"):
        try:
            _, s, sizes = spec.split(":", 2)
            return zipf_pmf(PacketAlphabet(_ints(sizes)), float(s))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad zipf spec {spec!r} (want zipf:S:0,32,64): {exc}")
    if spec.startswith("device:"):
        names = spec[len("device:"):].split("+")
        unknown = [n for n in names if n not in DEVICE_PMFS]
        if unknown:
            raise UsageError(f"unknown device(s) {unknown}; known: {sorted(DEVICE_PMFS)}")
        return DEVICE_PMFS.merged(names)
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"PMF file {spec} not found")
    return io.read_pmf(path)


def _budget(args) -> List[tuple]:
    """Budget grid: ``--eps`` couples both budgets, otherwise size x timing."""
    if args.eps:
        return [(e, e) for e in args.eps]
    sizes = args.eps_size or [math.inf]
    timings = args.eps_timing or [math.inf]
    return [(s, t) for s in sizes for t in timings]


def _fmt(x) -> str:
    if x is None or x == "":
        return "none"
    if isinstance(x, str):
        return x
    return "inf" if math.isinf(x) else f"{x:g}"


def _point_name(variant, rho, eps_s, eps_t, flow="") -> str:
    prefix = f"{flow}_" if flow else ""
    return f"{prefix}{variant}_rho{_fmt(rho)}_es{_fmt(eps_s)}_et{_fmt(eps_t)}.json"


def _echo_config(out: Path, args, extra: Optional[dict] = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        cfg.update(extra)
    io.write_json(out / "config.json", cfg)


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def cmd_estimate_pmf(args) -> int:
    if args.trace:
        trace = io.read_raw_trace(args.trace)
        alphabet = PacketAlphabet(args.alphabet) if args.alphabet else None
        stream = discretize(trace, args.slot_seconds, whitelist=args.whitelist, alphabet=alphabet)
    else:
        stream = io.read_stream(args.stream)
    pmf = estimate_pmf(stream, PacketAlphabet(args.alphabet) if args.alphabet and not args.trace else None)
    _emit(args.out, pmf.to_dict())
    if args.stream_out:
        io.write_stream(args.stream_out, stream)
    return EXIT_OK


def cmd_zipf(args) -> int:
    _emit(args.out, zipf_pmf(PacketAlphabet(args.sizes), args.s).to_dict())
    return EXIT_OK


def cmd_merge_pmf(args) -> int:
    pmfs = [load_pmf(p) for p in args.pmfs]
    _emit(args.out, merge_pmfs(pmfs).to_dict())
    return EXIT_OK


def _emit(path, data) -> None:
    if path:
        io.write_json(path, data)
    else:
        print(json.dumps(io._sanitize(data), indent=2))


def cmd_optimize(args) -> int:
    lam = load_pmf(args.pmf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    output_alphabet = PacketAlphabet(args.output_sizes) if args.output_sizes else None
    outcomes = tradeoff_sweep(lam, [args.variant], args.rho or [None], _budget(args), jobs=args.jobs,
                              output_alphabet=output_alphabet) \
        if not args.pad_only else [
            run_point(lam, args.variant, r, PrivacyBudget(es, et), output_alphabet=output_alphabet, pad_only=True)
            for r in (args.rho or [None]) for es, et in _budget(args)]
    failures = _write_points(out, outcomes, SWEEP_COLUMNS, "results.csv")
    _echo_config(out, args, {"pmf_resolved": lam.to_dict()})
    return EXIT_FAILURES if failures else EXIT_OK


def _write_points(out: Path, outcomes, columns, name: str) -> int:
    failures = 0
    rows = []
    for o in outcomes:
        row = dict(o.row)
        row.setdefault("status", "ok")
        if o.mechanism is None:
            failures += 1
        else:
            side = _point_name(row["variant"], row.get("rho_target"), row["eps_size"], row["eps_timing"],
                               row.get("flow", ""))
            io.write_channel(out / "points" / side, o.mechanism.effective_channel())
            io.write_mechanism(out / "points" / side.replace(".json", ".mechanism.json"), o.mechanism)
            row["channel_file"] = f"points/{side}"
        rows.append(row)
    io.write_rows(out / name, list(columns) + ["channel_file"], rows)
    return failures


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lam = load_pmf(args.pmf) if args.pmf else None
    if args.mechanism:
        mech = io.read_mechanism(args.mechanism)
    elif lam is not None and args.variant:
        budget = _budget(args)[0]
        outcome = run_point(lam, args.variant, args.rho[0] if args.rho else None, PrivacyBudget(*budget),
                            pad_only=args.pad_only)
        if outcome.mechanism is None:
            print(outcome.row["status"], file=sys.stderr)
            return EXIT_FAILURES
        mech = outcome.mechanism
    else:
        raise UsageError("simulate needs --mechanism, or --pmf with --variant")
    mech = mech.with_seed(args.seed)

    if args.stream:
        stream = io.read_stream(args.stream)
    elif lam is not None:
        if args.bursty is not None:
            stream = synthesize_bursty_stream(lam, args.horizon, args.seed, args.bursty)
        else:
            stream = synthesize_stream(lam, args.horizon, args.seed)
        io.write_stream(out / "input.csv", stream)
    else:
        raise UsageError("simulate needs --stream or --pmf to synthesize input")

    if len(stream) and not set(stream.slots.tolist()) <= set(mech.input_alphabet.sizes.tolist()):
        raise UsageError("input stream contains sizes outside the mechanism's input alphabet")
    shaped, report = shape_stream(stream, mech, lam=lam)
    io.write_stream(out / "shaped.csv", shaped)
    io.write_report(out / "report.json", report)
    io.write_mechanism(out / "mechanism.json", mech)
    _echo_config(out, args)
    print(json.dumps(io._sanitize(report.to_dict()), indent=2))
    return EXIT_OK


def cmd_audit(args) -> int:
    channel = io.read_mechanism(args.channel).effective_channel()
    eps_s, eps_t = _budget(args)[0]
    budget = PrivacyBudget(eps_s, eps_t)
    audit = ldp_level(channel)
    report = audit.to_dict(budget, channel)
    if args.horizon:
        report["stream_audits"] = [audit_stream_dp(channel, args.horizon, kind).to_dict() for kind in AdjacencyKind]
    _emit(args.out, report)
    return EXIT_OK if report["pass"] else EXIT_FAILURES


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = args.variants or ["dps"]
    output_alphabet = PacketAlphabet(args.output_sizes) if args.output_sizes else None
    outcomes = []
    flows = {}
    for spec in args.pmf:
        lam = load_pmf(spec)
        flow = spec.split("/")[-1].removesuffix(".json").replace(":", "-").replace("+", "_")
        flows[flow] = lam.to_dict()
        outcomes.extend(tradeoff_sweep(lam, variants, args.rho, _budget(args), horizon=args.horizon,
                                       seeds=args.seeds, flow=flow, jobs=args.jobs,
                                       output_alphabet=output_alphabet))
    failures = _write_points(out, outcomes, TRADEOFF_COLUMNS, "tradeoff.csv")
    io.write_rows(out / "results.csv", SWEEP_COLUMNS, [o.row for o in outcomes])
    _echo_config(out, args, {"flows": flows})
    return EXIT_FAILURES if failures else EXIT_OK


def cmd_compare_bursty(args) -> int:
    lam = load_pmf(args.pmf)
    outcome = run_point(lam, args.variant, args.rho[0], PrivacyBudget(*_budget(args)[0]))
    if outcome.mechanism is None:
        print(outcome.row["status"], file=sys.stderr)
        return EXIT_FAILURES
    res = compare_iid_bursty(lam, outcome.mechanism, args.horizon, args.seed, args.stickiness)
    data = {"analytic_EQ_bytes": res["analytic_EQ_bytes"], "iid": res["iid"].to_dict(),
            "bursty": res["bursty"].to_dict()}
    _emit(args.out, data)
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def _add_budget(p):
    p.add_argument("--eps", type=_floats, help="set both budgets (comma list gives a coupled grid)")
    p.add_argument("--eps-size", type=_floats, help="size budget(s); 'inf' for none")
    p.add_argument("--eps-timing", type=_floats, help="timing budget(s); 'inf' for none")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotshaper", description="Differentially private traffic shaping for IoT streams")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate-pmf", help="estimate a packet-size PMF from a trace or stream")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="raw trace CSV (timestamp_s,size_bytes)")
    src.add_argument("--stream", help="slotted stream CSV (slot,bytes)")
    p.add_argument("--slot-seconds", type=float, default=1.0)
    p.add_argument("--whitelist", type=_ints, help="event packet sizes to keep")
    p.add_argument("--alphabet", type=_ints, help="declared alphabet, e.g. 0,142,270")
    p.add_argument("--stream-out", help="also write the discretized stream CSV")
    p.add_argument("--out", help="output PMF JSON (stdout if omitted)")
    p.set_defaults(func=cmd_estimate_pmf)

    p = sub.add_parser("zipf", help="Zipf PMF over an alphabet")
    p.add_argument("--sizes", type=_ints, required=True)
    p.add_argument("--s", type=float, required=True, help="Zipf exponent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_zipf)

    p = sub.add_parser("merge-pmf", help="merge device PMFs into one aggregate PMF")
    p.add_argument("pmfs", nargs="+", help="PMF JSON files or device:NAME")
    p.add_argument("--out")
    p.set_defaults(func=cmd_merge_pmf)

    p = sub.add_parser("optimize", help="design minimum-backlog shapers over a (rho, eps) grid")
    p.add_argument("--pmf", required=True, help="PMF JSON, zipf:S:SIZES or device:NAME[+NAME]")
    p.add_argument("--variant", choices=VARIANTS, default="dps")
    p.add_argument("--rho", type=_floats)
    _add_budget(p)
    p.add_argument("--pad-only", action="store_true")
    p.add_argument("--output-sizes", type=_ints, help="output alphabet (defaults to the input alphabet)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="shape a stream and report overheads")
    p.add_argument("--mechanism", help="mechanism or channel JSON")
    p.add_argument("--stream", help="input stream CSV")
    p.add_argument("--pmf", help="PMF used to synthesize input and/or design the shaper")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--rho", type=_floats)
    _add_budget(p)
    p.add_argument("--pad-only", action="store_true")
    p.add_argument("--horizon", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bursty", type=float, metavar="STICKINESS", help="synthesize a bursty stream instead of i.i.d.")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", help="check a channel against a privacy budget")
    p.add_argument("--channel", required=True, help="channel or mechanism JSON")
    _add_budget(p)
    p.add_argument("--horizon", type=int, default=0, help="also run exhaustive stream audits up to this T")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sweep", help="optimize and simulate over flows x variants x rho x eps")
    p.add_argument("--pmf", action="append", required=True, help="repeat for several flows")
    p.add_argument("--variant", dest="variants", action="append", choices=VARIANTS)
    p.add_argument("--rho", type=_floats, required=True)
    _add_budget(p)
    p.add_argument("--output-sizes", type=_ints)
    p.add_argument("--horizon", type=int, default=0, help="simulation length per point (0 = analysis only)")
    p.add_argument("--seed", dest="seeds", type=_ints, default=[0], help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-bursty", help="same shaper on i.i.d. vs bursty input")
    p.add_argument("--pmf", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="dps")
    p.add_argument("--rho", type=_floats, required=True)
    _add_budget(p)
    p.add_argument("--horizon", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stickiness", type=float, default=0.9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare_bursty)
    return parser


def _validate(args) -> None:
    if getattr(args, "horizon", 1) is not None and getattr(args, "horizon", 1) < 0:
        raise UsageError("--horizon must be >= 0")
    seeds = getattr(args, "seeds", None)
    if seeds is not None and len(set(seeds)) != len(seeds):
        raise UsageError("seeds must be distinct")
    for name in ("rho", "eps", "eps_size", "eps_timing"):
        value = getattr(args, name, None)
        if value is not None and not value:
            raise UsageError(f"--{name.replace('_', '-')} grid is empty")
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be >= 1")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _validate(args)
        return args.func(args)
    except UsageError as exc:
        print(f"iotshaper: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShaperError, ValueError, KeyError, json.JSONDecodeError, OSError) as exc:
        print(f"iotshaper: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
