"""Continuous re-randomization of loaded modules.

``Runtime`` owns the address space, the host, the reclamation domain and
the stack pools.  It can be driven by hand (``tick``) or by a background
thread (``start``/``stop``) that re-randomizes every module once per
period.  One thread services all modules.
"""

from __future__ import annotations

import heapq
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

from . import isa
from .host import Host, default_host
from .loader import (KEY_NAME, KEY_SLOT, LoadConfig, LoadedModule, Locality, draw_key,
                     load)
from .modfmt import ModuleImage, Part, parse
from .smr import ReclamationDomain
from .stackpool import StackError, StackPool
from .vm import DEFAULT_FUEL, Cpu, IllegalInstruction, WrapperReentryOverflow, run
from .vmem import PAGE_SIZE, RO, RW, AddressSpace

HOST_STACK_PAGES = 4


class RandomizerError(Exception):
    pass


class AlreadyRunning(RandomizerError):
    pass


class NotRunning(RandomizerError):
    pass


@dataclass
class GenerationRecord:
    module: str
    generation: int
    old_base: int
    new_base: int
    key_fingerprint: str
    start: float
    retire: float = 0.0
    unmapped: float | None = None


@dataclass(frozen=True)
class MetricsSnapshot:
    rerandomized: int = 0
    smr_retire: int = 0
    smr_free: int = 0
    stack_alloc: int = 0
    stack_free: int = 0

    @property
    def smr_delta(self) -> int:
        return self.smr_retire - self.smr_free

    @property
    def stack_delta(self) -> int:
        return self.stack_alloc - self.stack_free

    def as_dict(self) -> dict:
        return {
            "rerandomized": self.rerandomized,
            "smr_retire": self.smr_retire,
            "smr_free": self.smr_free,
            "smr_delta": self.smr_delta,
            "stack_alloc": self.stack_alloc,
            "stack_free": self.stack_free,
            "stack_delta": self.stack_delta,
        }

    def log_lines(self) -> list[str]:
        return [
            f"Randomized {self.rerandomized} times",
            f"SMR Retire: {self.smr_retire}",
            f"SMR Free: {self.smr_free}",
            f"SMR Delta: {self.smr_delta}",
            f"Stack Alloc: {self.stack_alloc}",
            f"Stack Free: {self.stack_free}",
            f"Stack Delta: {self.stack_delta}",
        ]


def dmesg(timestamp: float, text: str) -> str:
    return f"[{timestamp:12.6f}] {text}"


def _write_frames(space: AddressSpace, frames, content: bytes) -> None:
    for i, fid in enumerate(frames):
        space.phys.buffer(fid)[:] = content[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]


def rebuilt_got(got, delta: int, key: int | None = None) -> list[int]:
    """Entries of a local GOT moved by ``delta``; the key slot gets ``key``."""
    values = []
    for slot, ((name, _), value) in enumerate(zip(got.slots, got.values)):
        if key is not None and slot == KEY_SLOT and name == KEY_NAME:
            values.append(key)
        else:
            values.append((value + delta) & isa.U64)
    return values


def rotate_key(module: LoadedModule, rng: random.Random) -> int:
    """Fresh uniform nonzero 64-bit key, distinct from the current one."""
    return draw_key(rng, module._key)


def rerandomize_once(module: LoadedModule, space: AddressSpace, domain: ReclamationDomain,
                     pools: StackPool | None, rng: random.Random, *, stack_rerand: bool = False,
                     run_hook=None, clock=time.monotonic) -> GenerationRecord:
    """Move ``module``'s movable part to a fresh random base.

    Code and data frames are aliased, never copied.  Only the local GOTs
    get new frames; the old alias stays mapped until every call that was
    in flight when it was retired has finished.
    """
    start = clock()
    npages = module.movable_pages
    with space._lock:
        new_base = space.random_base(npages, rng)
        old_base = module.movable_base
        delta = new_base - old_base
        old = {name: module.regions[name] for name in ("text", "data", "fixed_got", "local_got")}
        new = {}
        # (1) new alias over the same frames
        for name in ("text", "data", "fixed_got"):
            new[name] = space.remap_alias(old[name], new_base + module.offsets[name])
        # (2)-(4) new local GOTs, key written before the pages become visible
        key = rotate_key(module, rng)
        mgot = module.gots[(Part.MOVABLE, Locality.LOCAL)]
        mvals = rebuilt_got(mgot, delta, key)
        frames = space.phys.alloc(old["local_got"].len // PAGE_SIZE, tag="got")
        mgot.values = mvals
        _write_frames(space, frames, mgot.image())
        new["local_got"] = space.map_region(new_base + module.offsets["local_got"], frames, RO)
        igot = module.gots[(Part.IMMOVABLE, Locality.LOCAL)]
        ivals = rebuilt_got(igot, delta)
        iregion = module.regions["imm_local_got"]
        iframes = space.phys.alloc(len(iregion.frames), tag="got")
        igot.values = ivals
        _write_frames(space, iframes, igot.image())
        # commit: new wrapper-mediated calls now land in the new alias
        module.regions.update(new)
        module.movable_base = new_base
        module._key = key
        mgot.base = new["local_got"].base
        mgot.region = new["local_got"]
        fgot = module.gots[(Part.MOVABLE, Locality.FIXED)]
        fgot.base, fgot.region = new["fixed_got"].base, new["fixed_got"]
        for stub in module.plt[Part.MOVABLE]:
            stub.addr += delta
        module.generation += 1
        module.regions["imm_local_got"] = space.replace_frames(iregion, iframes)
        igot.region = module.regions["imm_local_got"]
        for off in module.rebase_sites:
            addr = new["data"].base + off
            space.write_u64(addr, space.read_u64(addr) + delta)
    record = GenerationRecord(module.name, module.generation, old_base, new_base,
                              module.key_fingerprint(), start)
    # (5) let the module fix up run-time pointers
    if module.image.update_hook is not None and run_hook is not None:
        run_hook(module, old_base, new_base)

    # (6) unmap the old alias once pending calls drain
    def unmap_old() -> None:
        for region in old.values():
            space.unmap_region(region)
        record.unmapped = clock()

    record.retire = clock()
    domain.mr_retire(unmap_old)
    if stack_rerand and pools is not None:
        pools.regenerate(domain)
    module.history.append(record)
    return record


class Runtime:
    """A host, its loaded modules and the machinery that keeps them moving."""

    def __init__(self, addr_bits: int = 48, seed: int | None = None, *,
                 retpoline: bool = False, optimize: bool = True, stack_rerand: bool = True,
                 stack_size: int = 16 * 1024, prepopulate: int = 2, regen_prepopulate: int = 0,
                 watchdog_s: float = 1.0, host: Host | None = None):
        self.rng = random.Random(seed)
        self.space = AddressSpace(addr_bits)
        self.host = host if host is not None else default_host(self.space, self.rng)
        self.exit_addr = self.host.exit_addr
        self.domain = ReclamationDomain(watchdog_s=watchdog_s)
        self.pools = StackPool(self.space, self.rng, stack_size, prepopulate, regen_prepopulate)
        self.retpoline = retpoline
        self.optimize = optimize
        self.stack_rerand = stack_rerand
        self.modules: dict[str, LoadedModule] = {}
        self.records: list[GenerationRecord] = []
        self.rerandomized = 0
        self._cpus: dict[Hashable, Cpu] = {}
        self._lock = threading.RLock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.errors: list[BaseException] = []
        self.clock = time.monotonic
        self.t0 = self.clock()
        self._hook_cpu: Cpu | None = None

    # -- workers ---------------------------------------------------------

    def register_worker(self, worker: Hashable) -> Cpu:
        with self._lock:
            if worker in self._cpus:
                return self._cpus[worker]
            self.domain.register(worker)
            if self.stack_rerand:
                self.pools.register(worker)
            cpu = Cpu(self.space, self, worker, self._host_stack())
            self._cpus[worker] = cpu
            return cpu

    def _host_stack(self):
        with self.space._lock:
            base = self.space.random_base(HOST_STACK_PAGES, self.rng)
            return self.space.map_new(base, HOST_STACK_PAGES, RW, tag="hoststack")

    def cpu(self, worker: Hashable = 0) -> Cpu:
        cpu = self._cpus.get(worker)
        return cpu if cpu is not None else self.register_worker(worker)

    # -- modules -----------------------------------------------------------

    def load(self, image: ModuleImage | bytes | str | Path) -> LoadedModule:
        if isinstance(image, (str, Path)):
            image = Path(image).read_bytes()
        if isinstance(image, (bytes, bytearray)):
            image = parse(image)
        with self._lock:
            if image.name in self.modules:
                raise ValueError(f"module {image.name} already loaded")
            loaded = load(self.space, image, self.host,
                          LoadConfig(retpoline=self.retpoline, optimize=self.optimize),
                          self.rng)
            loaded.loaded_at = self.clock()
            self.modules[image.name] = loaded
        return loaded

    def module(self, name: str | None = None) -> LoadedModule:
        if name is None:
            if len(self.modules) != 1:
                raise KeyError("module name required")
            return next(iter(self.modules.values()))
        return self.modules[name]

    def export_address(self, export: str, module: str | None = None) -> int:
        if module is not None:
            return self.modules[module].wrappers[export]
        for m in list(self.modules.values()):
            if export in m.wrappers:
                return m.wrappers[export]
        raise KeyError(f"no loaded module exports {export!r}")

    # -- execution ------------------------------------------------------

    def run(self, entry: int, args=(), worker: Hashable = 0, fuel: int = DEFAULT_FUEL,
            hook=None):
        return run(self.cpu(worker), entry, args, fuel, hook)

    def host_call(self, export: str, args=(), worker: Hashable = 0, module: str | None = None,
                  fuel: int = DEFAULT_FUEL) -> int:
        """Call an export through its wrapper; faults are raised."""
        result = self.run(self.export_address(export, module), args, worker, fuel)
        if isinstance(result, BaseException):
            raise result
        return result

    def service(self, cpu: Cpu, number: int) -> int | None:
        if number == isa.SVC_MR_START:
            cpu.frames.append(("guard", self.domain.mr_start(cpu.worker)))
        elif number == isa.SVC_STACK_GET:
            if self.stack_rerand:
                try:
                    stack = self.pools.get_new_stack(cpu.worker)
                except StackError as exc:
                    raise WrapperReentryOverflow(str(exc)) from exc
                old = cpu.switch_stack(stack.base, stack.top, stack.top)
                cpu.frames.append(("stack", stack, old))
            else:
                cpu.frames.append(("stack", None, None))
        elif number == isa.SVC_STACK_PUT:
            if not cpu.frames or cpu.frames[-1][0] != "stack":
                raise IllegalInstruction(cpu.pc, "stack return without a wrapper frame")
            _, stack, old = cpu.frames.pop()
            if stack is not None:
                cpu.switch_stack(*old)
                self.pools.return_old_stack(cpu.worker, stack)
        elif number == isa.SVC_MR_FINISH:
            if not cpu.frames or cpu.frames[-1][0] != "guard":
                raise IllegalInstruction(cpu.pc, "mr_finish without a wrapper frame")
            _, guard = cpu.frames.pop()
            self.domain.mr_finish(guard, cpu.worker)
        else:
            fn = self.host.services.get(number)
            if fn is None:
                raise IllegalInstruction(cpu.pc, f"unknown service {number}")
            return fn(cpu, *cpu.regs[:isa.ARG_REGS])
        return None

    def unwind(self, cpu: Cpu, mark: int) -> None:
        """Release wrapper frames abandoned by a fault."""
        while len(cpu.frames) > mark:
            kind, *rest = cpu.frames.pop()
            if kind == "guard":
                self.domain.mr_finish(rest[0], cpu.worker)
            elif rest[0] is not None:
                self.pools.return_old_stack(cpu.worker, rest[0])

    def generation_at(self, pc: int) -> int | None:
        for m in list(self.modules.values()):
            if pc in m.movable_range():
                return m.generation
            for rec in reversed(m.history):
                if rec.unmapped is None and rec.old_base <= pc < rec.old_base + m.movable_pages * PAGE_SIZE:
                    return rec.generation - 1
        return None

    # -- re-randomization ----------------------------------------------

    def _run_hook(self, module: LoadedModule, old_base: int, new_base: int) -> None:
        if self._hook_cpu is None:
            self._hook_cpu = Cpu(self.space, self, "randomizer", self._host_stack())
        entry = module.symbol_address(module.image.update_hook)
        result = run(self._hook_cpu, entry, (old_base, new_base))
        if isinstance(result, BaseException):
            raise result

    def rerandomize_once(self, name: str | None = None) -> GenerationRecord:
        with self._lock:
            module = self.module(name)
            record = rerandomize_once(module, self.space, self.domain, self.pools, self.rng,
                                      stack_rerand=self.stack_rerand, run_hook=self._run_hook,
                                      clock=self.clock)
            self.records.append(record)
            self.rerandomized += 1
        return record

    def tick(self) -> list[GenerationRecord]:
        """Manual mode: one cycle over every module, then collect."""
        records = [self.rerandomize_once(name) for name in list(self.modules)]
        self.domain.collect()
        return records

    def collect(self) -> int:
        return self.domain.collect()

    def quiesce(self, timeout_s: float = 5.0) -> bool:
        """Retire pooled stacks and drain the domain; True when deltas hit zero."""
        with self._lock:
            if self.pools.workers():
                self.pools.release_all(self.domain)
        ok = self.domain.drain(timeout_s)
        m = self.metrics()
        return ok and m.smr_delta == 0 and m.stack_delta == 0

    @property
    def running(self) -> bool:
        return self._thread is not None

    def start(self, period_ms: float = 20.0, periods: dict[str, float] | None = None) -> None:
        if self._thread is not None:
            raise AlreadyRunning("randomizer already running")
        if period_ms <= 0:
            raise ValueError("period must be positive")
        if not self.modules:
            raise RandomizerError("no modules loaded")
        periods = {name: (periods or {}).get(name, period_ms) / 1000.0 for name in self.modules}
        self._stop.clear()
        self.log(dmesg(self.clock() - self.t0, "Randomize: kthread started"))
        self._thread = threading.Thread(target=self._loop, args=(periods,),
                                        name="rerandomizer", daemon=True)
        self._thread.start()

    def _loop(self, periods: dict[str, float]) -> None:
        now = self.clock()
        due = [(now, name) for name in periods]
        heapq.heapify(due)
        try:
            while not self._stop.is_set():
                when, name = due[0]
                delay = when - self.clock()
                if delay > 0 and self._stop.wait(delay):
                    break
                heapq.heappop(due)
                self.rerandomize_once(name)
                self.domain.collect()
                heapq.heappush(due, (self.clock() + periods[name], name))
        except BaseException as exc:  # surfaced by stop()
            self.errors.append(exc)

    def stop(self, drain_timeout_s: float = 5.0) -> MetricsSnapshot:
        if self._thread is None:
            raise NotRunning("randomizer is not running")
        self._stop.set()
        self._thread.join()
        self._thread = None
        self.quiesce(drain_timeout_s)
        if self.errors:
            raise RandomizerError("randomizer thread failed") from self.errors[0]
        return self.metrics()

    # -- reporting ---------------------------------------------------------

    def metrics(self) -> MetricsSnapshot:
        with self._lock, self.domain._lock, self.pools._lock:
            return MetricsSnapshot(self.rerandomized, self.domain.retired, self.domain.freed,
                                   self.pools.alloc, self.pools.free)

    log_sink = None

    def log(self, line: str) -> None:
        if self.log_sink is not None:
            self.log_sink(line)

    def log_block(self) -> list[str]:
        t = self.clock() - self.t0
        lines = [dmesg(t, "-----")]
        lines += [dmesg(t, text) for text in self.metrics().log_lines()]
        return lines

    def live_executable_pages(self) -> int:
        return sum(1 for _, perms, _ in list(self.space.pages.values()) if perms & 1)
