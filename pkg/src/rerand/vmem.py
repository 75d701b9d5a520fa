"""Sparse virtual address space over shared physical frames.

Pages are 4 KiB.  The page table is a flat dict keyed by virtual page
number; each entry is an immutable ``(frame_id, perms, buffer)`` tuple so a
reader racing with a mutator sees either the old entry or none, never a
half-written one.  Mutators serialize on a single lock.

Several virtual pages may point at the same frame (zero-copy aliasing).
A frame is released once no mapping and no explicit hold references it.
"""

from __future__ import annotations

import enum
import random
import threading
from collections import Counter
from dataclasses import dataclass

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1


class Perm(enum.IntFlag):
    NONE = 0
    X = 1
    W = 2
    R = 4

    @classmethod
    def parse(cls, text: str) -> Perm:
        perms = cls.NONE
        for ch in text.upper():
            if ch != "-":
                perms |= {"R": cls.R, "W": cls.W, "X": cls.X}[ch]
        return perms


RX = Perm.R | Perm.X
RW = Perm.R | Perm.W
RO = Perm.R


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"
    FETCH = "fetch"


_REQUIRED = {Access.READ: Perm.R, Access.WRITE: Perm.W, Access.FETCH: Perm.X}


class VmemError(Exception):
    """Base class for address-space errors."""


class OverlapError(VmemError):
    pass


class WXViolation(VmemError):
    pass


class AlignmentError(VmemError):
    pass


class OutOfRange(VmemError):
    """Region does not fit inside the configured address width."""


class NotMapped(VmemError):
    pass


class PlacementExhausted(VmemError):
    pass


class AccessFault(Exception):
    """A memory access touched a page that is unmapped or lacks permission."""

    def __init__(self, vaddr: int, kind: Access, reason: str = "unmapped"):
        super().__init__(f"{kind.value} fault at {vaddr:#x} ({reason})")
        self.vaddr = vaddr
        self.kind = kind
        self.reason = reason


class PhysicalMemory:
    """Pool of 4 KiB frames with reference counts.

    ``allocated``/``released`` are monotone; ``by_tag`` counts allocations
    per caller-supplied tag so tests can attribute frame usage.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._frames: dict[int, bytearray] = {}
        self._refs: dict[int, int] = {}
        self._next_id = 1
        self.allocated = 0
        self.released = 0
        self.by_tag: Counter[str] = Counter()

    def alloc(self, count: int, tag: str = "anon") -> list[int]:
        with self._lock:
            ids = list(range(self._next_id, self._next_id + count))
            self._next_id += count
            for fid in ids:
                self._frames[fid] = bytearray(PAGE_SIZE)
                self._refs[fid] = 0
            self.allocated += count
            self.by_tag[tag] += count
        return ids

    def buffer(self, frame_id: int) -> bytearray:
        try:
            return self._frames[frame_id]
        except KeyError:
            raise NotMapped(f"frame {frame_id} has been released") from None

    def hold(self, frame_id: int) -> None:
        with self._lock:
            self._refs[frame_id] += 1

    def drop(self, frame_id: int) -> None:
        with self._lock:
            self._drop_locked(frame_id)

    def _drop_locked(self, frame_id: int) -> None:
        n = self._refs[frame_id] - 1
        if n > 0:
            self._refs[frame_id] = n
            return
        del self._refs[frame_id]
        del self._frames[frame_id]
        self.released += 1

    def refcount(self, frame_id: int) -> int:
        return self._refs.get(frame_id, 0)

    def live(self) -> int:
        return len(self._frames)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._frames


@dataclass(frozen=True)
class Region:
    base: int
    frames: tuple[int, ...]
    perms: Perm

    @property
    def len(self) -> int:
        return len(self.frames) * PAGE_SIZE

    @property
    def end(self) -> int:
        return self.base + self.len

    def __contains__(self, vaddr: int) -> bool:
        return self.base <= vaddr < self.end


def check_wx(perms: Perm) -> None:
    if Perm.W in perms and Perm.X in perms:
        raise WXViolation(f"permissions {perms!r} are both writable and executable")


class AddressSpace:
    """A sparse ``addr_bits``-wide virtual address space."""

    def __init__(self, addr_bits: int = 48, phys: PhysicalMemory | None = None):
        if not PAGE_SHIFT < addr_bits <= 64:
            raise ValueError(f"addr_bits must be in ({PAGE_SHIFT}, 64], got {addr_bits}")
        self.addr_bits = addr_bits
        self.limit = 1 << addr_bits
        self.phys = phys if phys is not None else PhysicalMemory()
        self.pages: dict[int, tuple[int, int, bytearray]] = {}
        self._lock = threading.RLock()
        self.remaps = 0

    # -- mutation -------------------------------------------------------

    def _check_range(self, base: int, npages: int) -> None:
        if base & PAGE_MASK:
            raise AlignmentError(f"base {base:#x} is not page-aligned")
        if base < 0 or base + npages * PAGE_SIZE > self.limit:
            raise OutOfRange(f"[{base:#x}, +{npages} pages) exceeds {self.addr_bits}-bit space")

    def map_region(self, base: int, frames, perms: Perm) -> Region:
        frames = tuple(frames)
        perms = Perm(perms)
        check_wx(perms)
        self._check_range(base, len(frames))
        vpn0 = base >> PAGE_SHIFT
        with self._lock:
            for i in range(len(frames)):
                if vpn0 + i in self.pages:
                    raise OverlapError(f"page {(vpn0 + i) << PAGE_SHIFT:#x} already mapped")
            for i, fid in enumerate(frames):
                buf = self.phys.buffer(fid)
                self.phys.hold(fid)
                self.pages[vpn0 + i] = (fid, int(perms), buf)
        return Region(base, frames, perms)

    def map_new(self, base: int, npages: int, perms: Perm, tag: str = "anon") -> Region:
        frames = self.phys.alloc(npages, tag)
        try:
            return self.map_region(base, frames, perms)
        except VmemError:
            for fid in frames:
                self.phys.hold(fid)
                self.phys.drop(fid)
            raise

    def remap_alias(self, old: Region, new_base: int) -> Region:
        """Map ``old``'s frames again at ``new_base``; no frames are allocated."""
        self._require_mapped(old)
        with self._lock:
            region = self.map_region(new_base, old.frames, old.perms)
            self.remaps += 1
        return region

    def replace_frames(self, region: Region, frames) -> Region:
        """Atomically point ``region``'s pages at ``frames`` (same count)."""
        frames = tuple(frames)
        if len(frames) != len(region.frames):
            raise ValueError("frame count mismatch")
        vpn0 = region.base >> PAGE_SHIFT
        with self._lock:
            self._require_mapped(region)
            for i, fid in enumerate(frames):
                self.phys.hold(fid)
                self.pages[vpn0 + i] = (fid, int(region.perms), self.phys.buffer(fid))
            for fid in region.frames:
                self.phys.drop(fid)
            self.remaps += 1
        return Region(region.base, frames, region.perms)

    def protect(self, region: Region, perms: Perm) -> Region:
        perms = Perm(perms)
        check_wx(perms)
        vpn0 = region.base >> PAGE_SHIFT
        with self._lock:
            self._require_mapped(region)
            for i, fid in enumerate(region.frames):
                _, _, buf = self.pages[vpn0 + i]
                self.pages[vpn0 + i] = (fid, int(perms), buf)
        return Region(region.base, region.frames, perms)

    def unmap_region(self, region: Region) -> None:
        vpn0 = region.base >> PAGE_SHIFT
        with self._lock:
            self._require_mapped(region)
            for i in range(len(region.frames)):
                del self.pages[vpn0 + i]
            for fid in region.frames:
                self.phys.drop(fid)

    def _require_mapped(self, region: Region) -> None:
        vpn0 = region.base >> PAGE_SHIFT
        for i, fid in enumerate(region.frames):
            ent = self.pages.get(vpn0 + i)
            if ent is None or ent[0] != fid:
                raise NotMapped(f"region at {region.base:#x} is not mapped")

    # -- placement ------------------------------------------------------

    def is_free(self, base: int, npages: int) -> bool:
        if base < 0 or base + npages * PAGE_SIZE > self.limit:
            return False
        vpn0 = base >> PAGE_SHIFT
        return all(vpn0 + i not in self.pages for i in range(npages))

    def random_base(self, npages: int, rng: random.Random, tries: int = 64) -> int:
        """Uniform page-aligned base with ``npages`` free pages after it."""
        slots = (self.limit >> PAGE_SHIFT) - npages + 1
        if slots <= 0:
            raise PlacementExhausted(f"{npages} pages do not fit in {self.addr_bits} bits")
        for _ in range(tries):
            base = rng.randrange(slots) << PAGE_SHIFT
            if self.is_free(base, npages):
                return base
        raise PlacementExhausted(f"no free base for {npages} pages after {tries} tries")

    # -- access ---------------------------------------------------------

    def translate(self, vaddr: int, kind: Access = Access.READ) -> tuple[bytearray, int]:
        ent = self.pages.get(vaddr >> PAGE_SHIFT) if 0 <= vaddr < self.limit else None
        if ent is None:
            raise AccessFault(vaddr, kind)
        if not ent[1] & _REQUIRED[kind]:
            raise AccessFault(vaddr, kind, "permission")
        return ent[2], vaddr & PAGE_MASK

    def access(self, vaddr: int, kind: Access, length: int, data: bytes | None = None) -> bytes:
        """Read, fetch or write ``length`` bytes; may span pages.

        Every touched page is checked before anything is written.
        """
        if kind is Access.WRITE:
            if data is None or len(data) != length:
                raise ValueError("write needs data of the stated length")
        pieces = []
        addr, left = vaddr, length
        while left > 0:
            buf, off = self.translate(addr, kind)
            n = min(left, PAGE_SIZE - off)
            pieces.append((buf, off, n))
            addr += n
            left -= n
        if kind is Access.WRITE:
            pos = 0
            for buf, off, n in pieces:
                buf[off:off + n] = data[pos:pos + n]
                pos += n
            return b""
        return b"".join(bytes(buf[off:off + n]) for buf, off, n in pieces)

    def read(self, vaddr: int, length: int) -> bytes:
        return self.access(vaddr, Access.READ, length)

    def fetch(self, vaddr: int, length: int) -> bytes:
        return self.access(vaddr, Access.FETCH, length)

    def write(self, vaddr: int, data: bytes) -> None:
        self.access(vaddr, Access.WRITE, len(data), bytes(data))

    def read_u64(self, vaddr: int) -> int:
        return int.from_bytes(self.read(vaddr, 8), "little")

    def write_u64(self, vaddr: int, value: int) -> None:
        self.write(vaddr, (value & 0xFFFF_FFFF_FFFF_FFFF).to_bytes(8, "little"))

    def perms_at(self, vaddr: int) -> Perm | None:
        ent = self.pages.get(vaddr >> PAGE_SHIFT)
        return None if ent is None else Perm(ent[1])

    def check_invariants(self) -> None:
        for vpn, (_, perms, _) in self.pages.items():
            if perms & Perm.W and perms & Perm.X:
                raise WXViolation(f"page {vpn << PAGE_SHIFT:#x} is W+X")
