"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

Criterion 10 (absolute performance figures and gadget censuses of a full
distribution) is declared not reproducible here and is not asserted.
"""

import functools
import random
import re
import struct
import threading
import time
from fractions import Fraction

from hypothesis import HealthCheck, given, settings, strategies as st

from rerand import Runtime, isa
from rerand.analysis import (
    EntropyModel, brute_force_attempts_bound, guess_probability, simulate_brute_force,
    simulate_leak_replay, simulate_stale_return, stack_scan,
)
from rerand.modfmt import Kind, RelocKind
from rerand.samples import arith_module, driver_module, null_module, paged_module, random_source
from rerand.asm import assemble

from test_smr import events, run_script

RESULTS: list[str] = []
LOG_LINE = re.compile(
    r"^\[ *\d+\.\d{6}\] (?:-----|Randomize: kthread started|Randomized \d+ times"
    r"|SMR (?:Retire|Free|Delta): \d+|Stack (?:Alloc|Free|Delta): \d+)$")


def criterion(number, title, limit_s=None):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            t0 = time.perf_counter()
            status, note = "PASS", ""
            try:
                fn(*a, **kw)
                elapsed = time.perf_counter() - t0
                if limit_s is not None and elapsed >= limit_s:
                    status, note = "FAIL", f" (over {limit_s}s limit)"
                    raise AssertionError(f"took {elapsed:.1f}s, limit {limit_s}s")
            except BaseException:
                status = "FAIL"
                raise
            finally:
                elapsed = time.perf_counter() - t0
                line = f"criterion {number:>2} {status}  {title}  [{elapsed:.2f}s]{note}"
                RESULTS.append(line)
                print("\n" + line)
        return run
    return wrap


# 1 -----------------------------------------------------------------------------

@criterion(1, "entropy math", limit_s=1)
def test_c1_entropy_math():
    assert guess_probability((56, 0)) == Fraction(1, 2 ** 56)
    assert guess_probability((56, 12)) == Fraction(1, 2 ** 44)
    assert guess_probability((31, 12)) == Fraction(1, 2 ** 19)
    assert brute_force_attempts_bound((31, 12)) == 524_288


# 2 -----------------------------------------------------------------------------

def enumerated_rate(rt, addr_bits, align_bits=12):
    slots = 1 << (addr_bits - align_bits)
    spans = [(m.regions["text"].base, m.regions["text"].base + m.regions["text"].len)
             for m in rt.modules.values()]
    return Fraction(sum(1 for s in range(slots)
                        if any(lo <= s << align_bits < hi for lo, hi in spans)), slots)


@criterion(2, "brute-force Monte Carlo vs enumeration", limit_s=30)
def test_c2_brute_force():
    rt = Runtime(addr_bits=20, seed=2024)
    rt.load(paged_module(4))
    exact = enumerated_rate(rt, 20)
    assert exact == Fraction(4, 256)
    out = simulate_brute_force(rt, EntropyModel(20, 12), trials=100_000, seed=99)
    sigma = (float(exact) * (1 - float(exact)) / out.attempts) ** 0.5
    assert out.attempts == 100_000
    assert abs(out.rate - float(exact)) <= 3 * sigma, (out.rate, float(exact), sigma)


# 3 -----------------------------------------------------------------------------

@criterion(3, "leak replay defeated after one generation", limit_s=60)
def test_c3_leak_replay():
    for seed in range(100):
        rt = Runtime(seed=seed)
        rt.load(driver_module())
        assert simulate_leak_replay(rt, 0, 1, export="twice").rate == 1.0
        for age in (1, 2, 3):
            assert simulate_leak_replay(rt, age, 1, export="twice").rate == 0.0, (seed, age)
        assert rt.metrics().smr_delta == 0


# 4 -----------------------------------------------------------------------------

def _scenario(period, workers, stack_rerand, modules, seconds=0.25):
    rt = Runtime(seed=period * 10 + workers, stack_rerand=stack_rerand)
    lines = []
    rt.log_sink = lines.append
    for m in modules:
        rt.load(m)
    stop = threading.Event()
    errors = []

    def work(w):
        try:
            while not stop.is_set():
                rt.host_call("null_ioctl", (w,), worker=w, module="null")
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
    rt.start(period)
    for t in threads:
        t.start()
    time.sleep(seconds)
    stop.set()
    for t in threads:
        t.join()
    m = rt.stop()
    lines += rt.log_block()
    assert not errors
    return m, lines


@criterion(4, "counter quiescence and log grammar", limit_s=10)
def test_c4_quiescence():
    for period, workers, stack in ((20, 1, True), (5, 4, True), (1, 2, True), (5, 2, False)):
        m, lines = _scenario(period, workers, stack, [null_module(), arith_module()])
        assert m.rerandomized > 0
        assert m.smr_delta == 0 and m.stack_delta == 0
        assert all(LOG_LINE.match(line) for line in lines), lines
        assert lines[-4].endswith("] SMR Delta: 0")
        assert lines[-1].endswith("] Stack Delta: 0")


# 5 -----------------------------------------------------------------------------

@criterion(5, "zero-copy re-randomization", limit_s=10)
def test_c5_zero_copy():
    rt = Runtime(seed=5, stack_rerand=False)
    m = rt.load(paged_module(64))
    assert m.regions["text"].len == 64 * 4096
    phys = rt.space.phys
    module_frames = phys.by_tag["module"]
    got_pages = len(m.regions["local_got"].frames) + len(m.regions["imm_local_got"].frames)
    got_before = phys.by_tag["got"]
    code_frames = set(m.regions["text"].frames) | set(m.regions["data"].frames)
    live = phys.live()
    for i in range(100):
        rt.tick()
        assert phys.by_tag["module"] == module_frames
        assert phys.by_tag["got"] == got_before + (i + 1) * got_pages
        assert set(m.regions["text"].frames) | set(m.regions["data"].frames) == code_frames
        assert phys.live() == live
    assert set(phys.by_tag) <= {"module", "got", "host"}


# 6 -----------------------------------------------------------------------------

def _expected(export, a, b):
    kmix = (a * 31 + 7) & (2 ** 64 - 1)
    return {
        "twice": 2 * a,
        "sum_to": a * (a + 1) // 2,
        "add": a + b,
        "sub": (a - b) & (2 ** 64 - 1),
        "mix_add": kmix + b,
        "mix_twice": 2 * kmix,
        "null_ioctl": a,
    }[export]


@criterion(6, "mixed-generation stress: 8 workers, 10^5 calls", limit_s=120)
def test_c6_mixed_generations():
    rt = Runtime(seed=6)
    for img in (null_module(), arith_module(), driver_module()):
        rt.load(img)
    ran = {}
    real_retire = rt.domain.mr_retire

    def counting_retire(cb):
        key = len(ran)
        ran[key] = 0

        def wrapped():
            ran[key] += 1
            cb()
        return real_retire(wrapped)

    rt.domain.mr_retire = counting_retire
    exports = ["twice", "sum_to", "add", "sub", "mix_add", "mix_twice", "null_ioctl"]
    total, workers, every = 100_000, 8, 1000
    lock = threading.Lock()
    issued = [0]
    done = [0]
    faults, wrong, ticks = [], [], [0]

    def work(w):
        rng = random.Random(w)
        while True:
            with lock:
                if issued[0] >= total:
                    return
                issued[0] += 1
            name = exports[rng.randrange(len(exports))]
            a, b = rng.randrange(0, 500), rng.randrange(0, 500)
            r = rt.run(rt.export_address(name), (a, b), worker=w)
            if isinstance(r, BaseException):
                faults.append(r)
            elif r != _expected(name, a, b):
                wrong.append((name, a, b, r))
            with lock:
                done[0] += 1
                due = done[0] % every == 0
            if due:
                rt.tick()
                ticks[0] += 1

    threads = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert rt.quiesce()
    assert done[0] == total and ticks[0] == total // every
    assert not faults, faults[:3]
    assert not wrong, wrong[:3]
    assert ran and all(n == 1 for n in ran.values())
    m = rt.metrics()
    assert m.smr_delta == 0 and m.stack_delta == 0


# 7 -----------------------------------------------------------------------------

@criterion(7, "reclamation matches sequential oracle (10^4 schedules)")
def test_c7_smr_oracle():
    checked = [0]

    @settings(max_examples=10_000, deadline=None, database=None,
              suppress_health_check=list(HealthCheck))
    @given(events, st.integers(1, 6))
    def prop(script, nworkers):
        dom, ora, ran, n = run_script(script, nworkers)
        assert sorted(ran) == sorted(ora.ran) == list(range(n))
        assert dom.counters().delta == 0
        checked[0] += 1

    prop()
    assert checked[0] >= 10_000


# 8 -----------------------------------------------------------------------------

def _site_addr(m, reloc):
    sec = m.image.sections[reloc.section]
    region = "text" if sec.kind is Kind.TEXT else "fixed_text"
    return m.part_base(sec.part) + m.offsets[region] + m.section_offsets[reloc.section] \
        + reloc.offset - 2


def _got_symbol(m, slot_addr):
    for got in m.gots.values():
        if got.base <= slot_addr < got.base + 8 * len(got.slots):
            return got, got.slots[(slot_addr - got.base) // 8][0]
    return None, None


def check_patch_shapes(rt, m):
    space = rt.space
    local = external = 0
    for r in m.image.relocations:
        if r.kind not in (RelocKind.GOT_LOCAL, RelocKind.GOT_FIXED):
            continue
        site = _site_addr(m, r)
        sym = m.image.symbols[r.target]
        raw = space.fetch(site, 6)
        same_part = sym.defined and m.image.sections[sym.section].part is \
            m.image.sections[r.section].part
        if raw[0] == isa.IND or (raw[0] == isa.NOP and raw[1] in (isa.CALL, isa.JMP)):
            if same_part:
                assert raw[0] == isa.NOP and raw[1] in (isa.CALL, isa.JMP), (sym.name, raw)
                disp = struct.unpack("<i", raw[2:6])[0]
                assert site + 6 + disp == m.symbol_address(sym.name)
                local += 1
            else:
                assert raw[0] == isa.IND, (sym.name, raw)
                disp = struct.unpack("<i", raw[2:6])[0]
                got, name = _got_symbol(m, site + 6 + disp)
                assert name == sym.name
                external += 1
        elif raw[0] == isa.LEA:
            assert same_part
        else:
            assert raw[0] == isa.LD_GOT and not same_part
    return local, external


@criterion(8, "patch optimizer: shapes and differential execution", limit_s=30)
def test_c8_patch_optimizer():
    local_total = external_total = 0
    for seed in range(25):
        src = random_source(random.Random(seed), nfuncs=8, name=f"gen{seed}")
        img = assemble(src)
        patched = Runtime(seed=seed)
        plain = Runtime(seed=seed, optimize=False)
        retpo = Runtime(seed=seed, retpoline=True)
        mods = [rt.load(img) for rt in (patched, plain, retpo)]
        local, external = check_patch_shapes(patched, mods[0])
        local_total += local
        external_total += external
        assert mods[1].patch_stats.total == 0
        assert mods[0].patch_stats.direct_calls == local
        rng = random.Random(seed)
        for step in range(3):
            for fn in img.exports:
                x = rng.randrange(1 << 16)
                results = [rt.host_call(fn, (x,)) for rt in (patched, plain, retpo)]
                assert results[0] == results[1] == results[2], (seed, fn, x, results)
            for rt in (patched, plain, retpo):
                rt.tick()
    assert local_total > 50 and external_total > 50


# 9 -----------------------------------------------------------------------------

@criterion(9, "return-address encryption", limit_s=60)
def test_c9_return_encryption():
    rt = Runtime(seed=9)
    for img in (null_module(), arith_module(), driver_module()):
        rt.load(img)
    rng = random.Random(0)
    src = random_source(rng, nfuncs=8, name="gen")
    rt.load(assemble(src))
    stats = stack_scan(rt, calls=400, tick_every=25, seed=3)
    assert stats["scans"] > 5000 and stats["violations"] == 0

    small = Runtime(addr_bits=20, seed=90)
    small.load(null_module())
    out = simulate_stale_return(small, trials=3000)
    expected = 1 - small.live_executable_pages() * 2 ** -8
    assert abs(out.expected - expected) < 0.01
    assert out.within(sigmas=3), (out.rate, out.expected, out.sigma())


def test_c10_declared_not_reproducible():
    RESULTS.append("criterion 10 N/A   absolute performance figures and gadget censuses "
                   "(declared not reproducible)")
    print("\n" + RESULTS[-1])
