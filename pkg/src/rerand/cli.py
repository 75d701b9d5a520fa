"""Command-line harness.

Subcommands::

    rerand bench    --module M --duration S --workers N --rand-period 1,5,20
    rerand attack   --addr-bits 20 --trials N --ages 0,1,2,3 --out report.json
    rerand scan     --module M --out gadgets.json
    rerand metrics  --module M --rand-period 20 --duration S --interval S
    rerand run      --module M --rand-period 20 [--duration S]
    rerand run      module_names=null,arith rand_period=20
    rerand emit-sample NAME OUT
    rerand asm      SOURCE OUT

A module argument is a serialized module file, an assembly source
(``.s``/``.asm``) or ``sample:NAME`` (null, arith, driver, paged4, ...).
Runs are reproducible for a fixed ``--seed`` in manual-tick commands
(attack, scan); timed commands also depend on thread scheduling.

Exit codes: 0 success, 1 runtime fault, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from pathlib import Path

from . import analysis, samples
from .asm import AsmError, assemble
from .loader import LoadError
from .modfmt import MalformedImage, ModuleImage, ValidationError, parse, serialize
from .randomizer import RandomizerError, Runtime
from .smr import SmrError
from .stackpool import StackError
from .vm import ExecFault
from .vmem import AccessFault, VmemError

BENCH_COLUMNS = ["config", "ops_per_sec", "rerandomized", "smr_delta_final", "stack_delta_final"]
DEFAULT_PERIODS = (0, 1, 5, 20)


class UsageError(Exception):
    pass


RUNTIME_ERRORS = (ExecFault, AccessFault, LoadError, RandomizerError, SmrError, StackError,
                  VmemError)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on", "y"):
        return True
    if t in ("0", "false", "no", "off", "n"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_periods(text: str) -> list[float]:
    try:
        periods = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad period list {text!r}") from None
    if any(p < 0 for p in periods):
        raise argparse.ArgumentTypeError("periods must be >= 0")
    return periods


def positive_float(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def load_image(arg: str) -> ModuleImage:
    """Resolve a module argument; bad paths and bad contents are usage errors."""
    try:
        if arg.startswith("sample:"):
            return samples.sample(arg[len("sample:"):])
        path = Path(arg)
        if not path.is_file():
            if arg in samples.SOURCES or arg.startswith("paged"):
                return samples.sample(arg)
            raise UsageError(f"module not found: {arg}")
        if path.suffix in (".s", ".asm"):
            return assemble(path.read_text(), path.stem)
        return parse(path.read_bytes())
    except (KeyError, ValueError, AsmError, MalformedImage, ValidationError, OSError) as exc:
        raise UsageError(f"cannot load module {arg}: {exc}") from exc


def make_runtime(args, **over) -> Runtime:
    kw = dict(addr_bits=args.addr_bits, seed=args.seed, retpoline=args.retpoline,
              stack_rerand=args.stack_rerand)
    kw.update(over)
    return Runtime(**kw)


def _out(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


# -- bench ---------------------------------------------------------------------

def _bench_one(args, image: ModuleImage, label: str, *, wrapped: bool, stack_rerand: bool,
               period: float) -> dict:
    rt = make_runtime(args, stack_rerand=stack_rerand)
    mod = rt.load(image)
    export = args.export or image.exports[0]
    for w in range(args.workers):
        rt.register_worker(w)
    counts = [0] * args.workers
    stop = threading.Event()
    errors: list[BaseException] = []

    def worker(w: int) -> None:
        try:
            while not stop.is_set():
                entry = mod.wrappers[export] if wrapped else mod.symbol_address(export)
                r = rt.run(entry, (w,), worker=w)
                if isinstance(r, BaseException):
                    raise r
                counts[w] += 1
        except BaseException as exc:
            errors.append(exc)
            stop.set()

    if period > 0:
        rt.start(period)
    threads = [threading.Thread(target=worker, args=(w,)) for w in range(args.workers)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    stop.wait(args.duration)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    if rt.running:
        m = rt.stop()
    else:
        rt.quiesce()
        m = rt.metrics()
    if errors:
        raise errors[0]
    return {"config": label, "ops_per_sec": round(sum(counts) / elapsed, 1),
            "rerandomized": m.rerandomized, "smr_delta_final": m.smr_delta,
            "stack_delta_final": m.stack_delta}


def cmd_bench(args) -> int:
    image = load_image(args.module[0] if args.module else "sample:null")
    rows = [
        _bench_one(args, image, "baseline", wrapped=False, stack_rerand=False, period=0),
        _bench_one(args, image, "wrappers", wrapped=True, stack_rerand=False, period=0),
        _bench_one(args, image, "wrappers+stack", wrapped=True, stack_rerand=True, period=0),
    ]
    for p in args.rand_period:
        if p > 0:
            rows.append(_bench_one(args, image, f"period={p:g}ms", wrapped=True,
                                   stack_rerand=args.stack_rerand, period=p))
    _out(args, analysis.rows_to_csv(rows, BENCH_COLUMNS))
    return 0


# -- attack ----------------------------------------------------------------------

def cmd_attack(args) -> int:
    image = load_image(args.module[0] if args.module else "sample:paged4")
    rt = make_runtime(args)
    rt.load(image)
    model = analysis.EntropyModel(args.addr_bits, args.align_bits)
    bf = analysis.simulate_brute_force(rt, model, args.trials, args.seed, args.tick_every)
    leak_rt = make_runtime(args)
    leak_rt.load(image)
    sweep = analysis.leak_sweep(leak_rt, args.ages, args.leak_trials)
    report = {
        "model": {"addr_bits": model.addr_bits, "align_bits": model.align_bits},
        "guess_probability": float(analysis.guess_probability(model)),
        "attempts_bound": analysis.brute_force_attempts_bound(model),
        "brute_force": analysis.brute_force_row(bf),
        "leak_replay": sweep,
    }
    _out(args, json.dumps(report, indent=2, sort_keys=True))
    return 0


# -- scan ------------------------------------------------------------------------

def cmd_scan(args) -> int:
    module_args = args.module or ["sample:driver"]
    rt = make_runtime(args)
    report = analysis.GadgetReport()
    for arg in module_args:
        mod = rt.load(load_image(arg))
        report = report.merge(analysis.scan_module(rt, mod.name, args.max_depth))
    _out(args, json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


# -- metrics / run ------------------------------------------------------------------

def _load_all(rt: Runtime, module_args: list[str]) -> None:
    for arg in module_args or ["sample:null"]:
        rt.load(load_image(arg))


def _exercise(rt: Runtime, stop: threading.Event, errors: list) -> None:
    """Keep one worker calling every export so the counters move."""
    calls = [(name, m.name) for m in rt.modules.values() for name in m.image.exports]
    i = 0
    try:
        while not stop.is_set():
            export, module = calls[i % len(calls)]
            rt.host_call(export, (i & 0xFF, 1), worker="cli", module=module)
            i += 1
            time.sleep(0)
    except BaseException as exc:
        errors.append(exc)


def _timed(args, emit) -> int:
    rt = make_runtime(args)
    _load_all(rt, args.module)
    rt.log_sink = emit
    stop = threading.Event()
    errors: list[BaseException] = []
    load = threading.Thread(target=_exercise, args=(rt, stop, errors), daemon=True)
    period = args.rand_period[0] if args.rand_period else 20.0
    if period <= 0:
        raise UsageError("--rand-period must be > 0")
    rt.start(period)
    load.start()
    t_end = None if args.duration is None else time.monotonic() + args.duration
    next_report = time.monotonic() + args.interval if args.interval else None
    try:
        while t_end is None or time.monotonic() < t_end:
            time.sleep(0.01)
            if errors:
                break
            if next_report is not None and time.monotonic() >= next_report:
                for line in rt.log_block():
                    emit(line)
                next_report += args.interval
    except KeyboardInterrupt:
        pass
    stop.set()
    load.join()
    rt.stop()
    for line in rt.log_block():
        emit(line)
    if errors:
        raise errors[0]
    m = rt.metrics()
    return 0 if m.smr_delta == 0 and m.stack_delta == 0 else 1


def cmd_metrics(args) -> int:
    lines: list[str] = []

    def emit(line: str) -> None:
        lines.append(line)
        if not args.json:
            print(line, flush=True)

    code = _timed(args, emit)
    if args.json:
        _out(args, json.dumps({"log": lines}, indent=2))
    elif args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return code


def cmd_run(args) -> int:
    for kv in args.params:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {kv!r}")
        if key == "module_names":
            args.module = (args.module or []) + [v for v in value.split(",") if v]
        elif key == "rand_period":
            args.rand_period = parse_periods(value)
        else:
            raise UsageError(f"unknown parameter {key!r}")
    return _timed(args, lambda line: print(line, flush=True))


# -- tools ------------------------------------------------------------------------

def cmd_emit_sample(args) -> int:
    try:
        image = samples.sample(args.name)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown sample {args.name!r}") from exc
    Path(args.path).write_bytes(serialize(image))
    return 0


def cmd_asm(args) -> int:
    src = Path(args.source)
    if not src.is_file():
        raise UsageError(f"no such file: {src}")
    try:
        image = assemble(src.read_text(), src.stem)
    except (AsmError, ValidationError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    Path(args.path).write_bytes(serialize(image))
    return 0


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, addr_bits: int = 48) -> None:
    p.add_argument("--module", action="append", metavar="PATH",
                   help="module file, .s source or sample:NAME (repeatable)")
    p.add_argument("--rand-period", type=parse_periods, default=None, metavar="MS[,MS...]")
    p.add_argument("--stack-rerand", type=parse_bool, default=True, metavar="BOOL")
    p.add_argument("--retpoline", type=parse_bool, default=False, metavar="BOOL")
    p.add_argument("--addr-bits", type=int, default=addr_bits)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, metavar="PATH")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rerand", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("bench", help="null-call throughput per configuration (CSV)")
    _common(p)
    p.add_argument("--duration", type=positive_float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--export", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("attack", help="brute-force and leak-replay simulations (JSON)")
    _common(p, addr_bits=20)
    p.add_argument("--align-bits", type=int, default=12)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--tick-every", type=int, default=1000)
    p.add_argument("--ages", type=lambda s: [int(x) for x in s.split(",")], default=[0, 1, 2, 3])
    p.add_argument("--leak-trials", type=int, default=10)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("scan", help="gadget report for loaded modules (JSON)")
    _common(p)
    p.add_argument("--max-depth", type=int, default=10)
    p.set_defaults(fn=cmd_scan)

    for name, fn, hlp in (("metrics", cmd_metrics, "stream counter log lines"),
                          ("run", cmd_run, "load modules and re-randomize until interrupted")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--duration", type=positive_float, default=2.0 if name == "metrics" else None)
        p.add_argument("--interval", type=positive_float, default=1.0 if name == "metrics" else None)
        if name == "metrics":
            p.add_argument("--json", action="store_true")
        else:
            p.add_argument("params", nargs="*", metavar="KEY=VALUE",
                           help="module_names=a,b rand_period=MS")
        p.set_defaults(fn=fn)

    p = sub.add_parser("emit-sample", help="write a sample module file")
    p.add_argument("name")
    p.add_argument("path")
    p.set_defaults(fn=cmd_emit_sample)

    p = sub.add_parser("asm", help="assemble a source file into a module file")
    p.add_argument("source")
    p.add_argument("path")
    p.set_defaults(fn=cmd_asm)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "rand_period", None) is None and args.cmd == "bench":
        args.rand_period = list(DEFAULT_PERIODS)
    if getattr(args, "workers", 1) < 1:
        ap.error("--workers must be >= 1")
    if hasattr(args, "addr_bits") and not 16 <= args.addr_bits <= 64:
        ap.error("--addr-bits must be in [16, 64]")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"rerand: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"rerand: fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
