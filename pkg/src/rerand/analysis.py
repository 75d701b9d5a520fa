"""Security analysis: guess probabilities, attack simulations, gadget scans.

Attackers are modeled with perfect information about the current layout
at the moment of a leak; the defense is credited only with what moving
the code actually buys.

Report schemas
--------------
Gadget report (JSON)::

    {"counts": {PART: {KIND: n}}, "gadgets": [{"part", "kind", "offset"}]}

Attack outcome (JSON): ``attempts, successes, rate, generations,
histogram, expected``.  Brute-force CSV rows: ``trials, successes,
empirical_rate, expected_rate, sigma, within_3sigma``.  Leak-replay CSV
rows: ``age, trials, successes, rate``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable

from . import isa
from .vm import Cpu
from .vmem import PAGE_SHIFT, Access, AccessFault

PROLOGUE_LEN = isa.LENGTH[isa.LD_GOT] + isa.LENGTH[isa.XSP] + isa.LENGTH[isa.XOR]


class InvalidModel(ValueError):
    pass


@dataclass(frozen=True)
class EntropyModel:
    addr_bits: int
    align_bits: int = 12

    def __post_init__(self) -> None:
        if not 0 <= self.align_bits <= self.addr_bits <= 64:
            raise InvalidModel(f"need 0 <= align_bits <= addr_bits <= 64, got "
                               f"({self.addr_bits}, {self.align_bits})")

    @property
    def slots(self) -> int:
        return 1 << (self.addr_bits - self.align_bits)


def _model(model: EntropyModel | tuple[int, int]) -> EntropyModel:
    return model if isinstance(model, EntropyModel) else EntropyModel(*model)


def guess_probability(model: EntropyModel | tuple[int, int]) -> Fraction:
    """Chance that one guess hits a single-base layout: 2^-(addr - align)."""
    return Fraction(1, _model(model).slots)


def brute_force_attempts_bound(model: EntropyModel | tuple[int, int]) -> int:
    return _model(model).slots


@dataclass
class AttackOutcome:
    attempts: int = 0
    successes: int = 0
    generations: int = 0
    histogram: Counter = field(default_factory=Counter)
    expected: float | None = None

    def __post_init__(self) -> None:
        if self.successes > self.attempts:
            raise ValueError("successes exceed attempts")

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0

    def sigma(self, p: float | None = None) -> float:
        p = self.expected if p is None else p
        return math.sqrt(p * (1 - p) / self.attempts) if self.attempts else 0.0

    def within(self, p: float | None = None, sigmas: float = 3.0) -> bool:
        """Binomial agreement of the empirical rate with ``p``."""
        p = self.expected if p is None else p
        return abs(self.rate - p) <= sigmas * self.sigma(p) + 1e-12

    def as_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = {str(k): v for k, v in sorted(self.histogram.items())}
        d["rate"] = self.rate
        return d


# -- brute force -----------------------------------------------------------

def live_text_pages(runtime) -> set[int]:
    """Page numbers currently holding movable module code."""
    pages = set()
    for m in list(runtime.modules.values()):
        r = m.text_range()
        pages.update(range(r.start >> PAGE_SHIFT, r.stop >> PAGE_SHIFT))
    return pages


def expected_brute_force_rate(runtime, model: EntropyModel | None = None) -> float:
    model = model or EntropyModel(runtime.space.addr_bits)
    return len(live_text_pages(runtime)) / model.slots


def simulate_brute_force(runtime, model: EntropyModel | None = None, trials: int = 100_000,
                         seed: int | None = None, tick_every: int = 0) -> AttackOutcome:
    """Fetch at uniformly random aligned addresses; count hits on live module text.

    With ``tick_every`` > 0 the runtime is re-randomized after that many
    guesses, so the target keeps moving under the attacker.
    """
    model = model or EntropyModel(runtime.space.addr_bits)
    if model.addr_bits != runtime.space.addr_bits:
        raise InvalidModel("model and runtime disagree on addr_bits")
    rng = random.Random(seed)
    out = AttackOutcome(expected=expected_brute_force_rate(runtime, model))
    pages = runtime.space.pages
    shift = model.align_bits
    targets = live_text_pages(runtime)
    for i in range(trials):
        if tick_every and i and i % tick_every == 0:
            runtime.tick()
            out.generations += 1
            targets = live_text_pages(runtime)
        addr = rng.randrange(model.slots) << shift
        vpn = addr >> PAGE_SHIFT
        ent = pages.get(vpn)
        if ent is not None and ent[1] & 1 and vpn in targets:
            out.successes += 1
            out.histogram[out.generations] += 1
        out.attempts += 1
    return out


# -- leak replay -------------------------------------------------------------

def _pick_export(runtime, module: str | None, export: str | None):
    mod = runtime.module(module) if module or len(runtime.modules) == 1 else next(
        iter(runtime.modules.values()))
    if export is None:
        export = mod.image.exports[0]
    return mod, export


def simulate_leak_replay(runtime, leak_age: int, trials: int = 1, *, module: str | None = None,
                         export: str | None = None, args=(7,), worker="attacker") -> AttackOutcome:
    """Leak a movable code address, let ``leak_age`` generations pass, call it.

    Each generation is followed by a collect, so old aliases are gone
    unless some call is still pinning them.  Success means the call
    returned what the export returns through its wrapper.
    """
    if leak_age < 0:
        raise ValueError("leak_age must be >= 0")
    mod, export = _pick_export(runtime, module, export)
    out = AttackOutcome()
    for _ in range(trials):
        expected = runtime.host_call(export, args, module=mod.name)
        leaked = mod.symbol_address(export)
        for _ in range(leak_age):
            runtime.tick()
            out.generations += 1
        result = runtime.run(leaked, args, worker=worker)
        if not isinstance(result, BaseException) and result == expected:
            out.successes += 1
            out.histogram[leak_age] += 1
        out.attempts += 1
    return out


def leak_sweep(runtime, ages: Iterable[int] = range(4), trials: int = 10, **kw) -> list[dict]:
    rows = []
    for age in ages:
        o = simulate_leak_replay(runtime, age, trials, **kw)
        rows.append({"age": age, "trials": o.attempts, "successes": o.successes, "rate": o.rate})
    return rows


# -- return-address encryption -----------------------------------------------

_KEY_SEQ = {
    bytes((isa.LD_GOT, isa.SCRATCH)),
    bytes((isa.XSP, isa.SCRATCH)),
    bytes((isa.XOR, isa.SCRATCH << 4 | isa.SCRATCH)),
}


def _in_key_sequence(cpu: Cpu) -> bool:
    """True while the slot at sp is legitimately plaintext: between a call and
    the prologue's XSP, and between the epilogue's XSP and its RET."""
    try:
        head = cpu.space.fetch(cpu.pc, 2)
    except AccessFault:
        return False
    return head[0] == isa.RET or head in _KEY_SEQ


def stack_scan(runtime, calls: int = 200, *, tick_every: int = 50, seed: int | None = None,
               exports: list[tuple[str, tuple]] | None = None, worker=0) -> dict:
    """Call exports and scan the live stack before every instruction of module code.

    Reports how many scans found a plaintext return address into module
    text (any generation).  The slot at sp is skipped only inside the
    key sequences, where a plaintext return address is architectural.
    """
    rng = random.Random(seed)
    if exports is None:
        exports = [(e, (rng.randrange(1, 100), rng.randrange(1, 100)))
                   for m in runtime.modules.values() for e in m.image.exports]
    ranges: set[tuple[int, int]] = set()

    def remember() -> None:
        for m in runtime.modules.values():
            r = m.text_range()
            ranges.add((r.start, r.stop))

    def is_code(value: int) -> bool:
        return any(lo <= value < hi for lo, hi in ranges)

    stats = {"scans": 0, "words": 0, "violations": 0, "calls": 0}

    def hook(cpu: Cpu) -> None:
        if not is_code(cpu.pc):
            return
        skip_top = _in_key_sequence(cpu)
        words = cpu.stack_words()
        if skip_top:
            words = words[1:]
        stats["scans"] += 1
        stats["words"] += len(words)
        stats["violations"] += sum(1 for w in words if is_code(w))

    remember()
    for i in range(calls):
        if tick_every and i and i % tick_every == 0:
            runtime.tick()
            remember()
        name, args = exports[i % len(exports)]
        result = runtime.run(runtime.export_address(name), args, worker=worker, hook=hook)
        if isinstance(result, BaseException):
            raise result
        stats["calls"] += 1
    return stats


def simulate_stale_return(runtime, trials: int = 1000, *, module: str | None = None,
                          export: str | None = None, epilogue_offset: int = PROLOGUE_LEN,
                          planted: int | None = None, worker="attacker") -> AttackOutcome:
    """Replay an encrypted return address captured in one generation into the next.

    The captured word is planted where the next generation's epilogue
    expects its own, so the RET lands on ``word ^ old_key ^ new_key``,
    masked to the address width.  With ``planted`` set, that plaintext
    address is written instead (a hijack attempt that ignores the key).
    The attack is defeated when the first fetch after RET faults.
    ``expected`` is the mean of 1 - live_exec_pages/slots.
    """
    mod, export = _pick_export(runtime, module, export)
    space = runtime.space
    slots = space.limit >> PAGE_SHIFT
    out = AttackOutcome()
    expected_sum = 0.0
    for _ in range(trials):
        entry = mod.symbol_address(export)
        seen: dict[str, int] = {}

        def grab(cpu: Cpu, at=entry + PROLOGUE_LEN) -> None:
            if cpu.pc == at and "word" not in seen:
                seen["word"] = space.read_u64(cpu.sp)

        runtime.run(mod.wrappers[export], (1,), worker=worker, hook=grab)
        runtime.tick()
        out.generations += 1
        expected_sum += 1 - runtime.live_executable_pages() / slots
        epilogue = mod.symbol_address(export) + epilogue_offset
        done = []

        def plant(cpu: Cpu) -> None:
            if not done and cpu.pc == epilogue:
                space.write_u64(cpu.sp, seen["word"] if planted is None else planted)
                done.append(True)

        result = runtime.run(epilogue, (), worker=worker, fuel=5, hook=plant)
        defeated = (isinstance(result, AccessFault) and result.kind is Access.FETCH
                    and not runtime.cpu(worker).can_fetch(result.vaddr))
        if defeated:
            out.successes += 1
        out.attempts += 1
    out.expected = expected_sum / trials if trials else None
    return out


# -- gadgets ------------------------------------------------------------------

@dataclass(frozen=True)
class Gadget:
    part: str
    kind: str
    offset: int


@dataclass
class GadgetReport:
    gadgets: list[Gadget] = field(default_factory=list)

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for g in self.gadgets:
            out.setdefault(g.part, {k.value: 0 for k in isa.Terminal})[g.kind] += 1
        return out

    def total(self, part: str | None = None) -> int:
        return sum(1 for g in self.gadgets if part is None or g.part == part)

    def offsets(self, part: str) -> list[int]:
        return sorted(g.offset for g in self.gadgets if g.part == part)

    def merge(self, other: "GadgetReport") -> "GadgetReport":
        return GadgetReport(self.gadgets + other.gadgets)

    def as_dict(self) -> dict:
        return {"counts": self.counts(), "gadgets": [asdict(g) for g in self.gadgets]}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _chain_ends_at(code: bytes, start: int, end: int) -> bool:
    pos = start
    while pos < end:
        try:
            insn = isa.decode(code, pos)
        except isa.DecodeError:
            return False
        if isa.is_control(insn):
            return False
        pos += insn.length
    return pos == end


def scan_gadgets(code: bytes, max_depth: int = 10, part: str = "movable") -> GadgetReport:
    """Every start within ``max_depth`` bytes of a terminal that decodes onto it.

    Starts are tried at every byte, so unintended decodings of the
    variable-length encoding are counted too.
    """
    code = bytes(code)
    report = GadgetReport()
    for pos in range(len(code)):
        kind = isa.terminal_kind(code, pos)
        if kind is None:
            continue
        try:
            isa.decode(code, pos)
        except isa.DecodeError:
            continue
        for start in range(max(0, pos - max_depth), pos + 1):
            if _chain_ends_at(code, start, pos):
                report.gadgets.append(Gadget(part, kind.value, start))
    return report


def scan_module(runtime, module: str | None = None, max_depth: int = 10) -> GadgetReport:
    """Scan the mapped code of one module; offsets are relative to each region."""
    mod = runtime.module(module)
    space = runtime.space
    report = GadgetReport()
    for region, part in (("text", "movable"), ("fixed_text", "immovable")):
        r = mod.regions[region]
        report = report.merge(scan_gadgets(space.read(r.base, r.len), max_depth, part))
    return report


# -- validity window ------------------------------------------------------------

def window_report(runtime, period_ms: float, threshold_ms: float = 1000.0) -> dict:
    """Longest time any movable address stayed valid, against an attack budget.

    A generation's addresses become valid when it is committed and stop
    being valid when its alias is unmapped.  Generations not yet unmapped
    are measured up to now.
    """
    now = runtime.clock()
    windows = []
    pending = 0
    for m in list(runtime.modules.values()):
        starts = [m.loaded_at] + [rec.start for rec in m.history]
        for begin, rec in zip(starts, m.history):
            end = rec.unmapped
            if end is None:
                pending += 1
                end = now
            windows.append(end - begin)
    max_ms = max(windows, default=0.0) * 1000.0
    overdue = runtime.domain.overdue()
    return {
        "period_ms": period_ms,
        "generations": len(windows),
        "max_window_ms": max_ms,
        "mean_window_ms": (sum(windows) / len(windows) * 1000.0) if windows else 0.0,
        "pending": pending,
        "threshold_ms": threshold_ms,
        "watchdog_breach": bool(overdue),
        "passed": max_ms < threshold_ms and not overdue,
    }


# -- emission -------------------------------------------------------------------

def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({c: row.get(c, "") for c in columns})
    return buf.getvalue()


def brute_force_row(outcome: AttackOutcome) -> dict:
    return {
        "trials": outcome.attempts,
        "successes": outcome.successes,
        "empirical_rate": outcome.rate,
        "expected_rate": outcome.expected,
        "sigma": outcome.sigma(),
        "within_3sigma": outcome.within(),
    }
