"""The never-moving host: a symbol table plus a small code region.

Host functions are Python callables reached through bytecode stubs
(``SYSRET n; RET``), so module code calls them exactly like any other
imported address.  The region also holds the HALT that ends ``run``.
"""

from __future__ import annotations

import random
from typing import Callable

from . import isa
from .vmem import PAGE_SIZE, RO, RW, RX, AddressSpace, Region

HostFn = Callable[..., int]

STUB_LEN = 6   # SYSRET imm32 + RET


class Host:
    def __init__(self, space: AddressSpace, rng: random.Random, code_pages: int = 1,
                 base: int | None = None):
        self.space = space
        self.code_pages = code_pages
        if base is None:
            base = space.random_base(code_pages, rng)
        self.code = space.map_new(base, code_pages, RX, tag="host")
        self.exit_addr = self.code.base
        self._write_code(0, bytes((isa.HALT,)))
        self._cursor = 8
        self.symbols: dict[str, int] = {}
        self.services: dict[int, HostFn] = {}
        self.data: list[Region] = []
        self._rng = rng

    def _write_code(self, offset: int, code: bytes) -> None:
        fid = self.code.frames[offset // PAGE_SIZE]
        buf = self.space.phys.buffer(fid)
        off = offset % PAGE_SIZE
        buf[off:off + len(code)] = code

    def define(self, name: str, fn: HostFn) -> int:
        """Expose ``fn(cpu, *args) -> int`` as host function ``name``."""
        if self._cursor + STUB_LEN > self.code.len:
            raise MemoryError("host code region full")
        service = isa.SVC_HOST_BASE + len(self.services)
        addr = self.code.base + self._cursor
        self._write_code(self._cursor, isa.enc_sys(service) + bytes((isa.RET,)))
        self._cursor += STUB_LEN
        self.services[service] = fn
        self.symbols[name] = addr
        return addr

    def define_data(self, name: str, size: int = PAGE_SIZE, writable: bool = True) -> int:
        npages = max(1, -(-size // PAGE_SIZE))
        base = self.space.random_base(npages, self._rng)
        region = self.space.map_new(base, npages, RW if writable else RO, tag="host")
        self.data.append(region)
        self.symbols[name] = region.base
        return region.base

    def lookup(self, name: str) -> int | None:
        return self.symbols.get(name)


def default_host(space: AddressSpace, rng: random.Random) -> Host:
    """A host offering a few kernel-like helpers used by the sample modules."""
    host = Host(space, rng)
    log: list[int] = []
    host.log = log
    host.define("printk", lambda cpu, *a: (log.append(a[0]), 0)[1])
    host.define("kmix", lambda cpu, x=0, *a: (x * 31 + 7) & isa.U64)
    host.define("kadd", lambda cpu, x=0, y=0, *a: (x + y) & isa.U64)
    return host
