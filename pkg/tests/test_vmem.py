import random
import threading

import pytest
from hypothesis import given, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from rerand.vmem import (PAGE_SIZE, RO, RW, RX, Access, AccessFault, AddressSpace, AlignmentError,
                         NotMapped, OutOfRange, OverlapError, Perm, PlacementExhausted, WXViolation)


@pytest.fixture
def space():
    return AddressSpace()


def test_map_two_frames(space):
    frames = space.phys.alloc(2)
    r = space.map_region(0x1000, frames, RX)
    assert (r.base, r.len, r.end) == (0x1000, 8192, 0x3000)
    assert space.fetch(0x1000, 1) == b"\0"
    assert space.perms_at(0x2fff) == RX


def test_map_twice_overlaps(space):
    space.map_new(0x1000, 1, RO)
    with pytest.raises(OverlapError):
        space.map_new(0x1000, 1, RO)


def test_wx_rejected(space):
    with pytest.raises(WXViolation):
        space.map_new(0x1000, 1, Perm.R | Perm.W | Perm.X)
    with pytest.raises(WXViolation):
        space.protect(space.map_new(0x2000, 1, RW), Perm.W | Perm.X)
    assert space.phys.live() == 1


def test_misaligned_and_out_of_range():
    space = AddressSpace(20)
    with pytest.raises(AlignmentError):
        space.map_new(0x1001, 1, RO)
    with pytest.raises(OutOfRange):
        space.map_new((1 << 20) - PAGE_SIZE, 2, RO)


def test_alias_shares_frames(space):
    r = space.map_new(0x1000, 2, RW)
    before = space.phys.allocated
    alias = space.remap_alias(r, 0x7F00_0000_0000)
    assert space.phys.allocated == before
    assert alias.frames == r.frames
    space.write(r.base + 5, b"\xab")
    assert space.read(alias.base + 5, 1) == b"\xab"
    space.unmap_region(r)
    assert space.read(alias.base + 5, 1) == b"\xab"


def test_alias_onto_itself_overlaps(space):
    r = space.map_new(0x10000, 4, RO)
    with pytest.raises(OverlapError):
        space.remap_alias(r, 0x10000 + 2 * PAGE_SIZE)


def test_protect_semantics(space):
    got = space.map_new(0x5000, 1, RW)
    space.write_u64(0x5000, 7)
    got = space.protect(got, RO)
    with pytest.raises(AccessFault) as exc:
        space.write_u64(0x5000, 8)
    assert exc.value.kind is Access.WRITE and exc.value.vaddr == 0x5000
    assert space.read_u64(0x5000) == 7
    code = space.protect(space.map_new(0x9000, 1, RW), RX)
    assert space.fetch(code.base, 4) == bytes(4)


def test_unmap(space):
    r = space.map_new(0x1000, 3, RW)
    fids = r.frames
    space.unmap_region(r)
    assert all(f not in space.phys for f in fids)
    for off in range(0, 3 * PAGE_SIZE, PAGE_SIZE):
        for kind in Access:
            with pytest.raises(AccessFault):
                space.access(r.base + off, kind, 1, b"x" if kind is Access.WRITE else None)
    with pytest.raises(NotMapped):
        space.unmap_region(r)


def test_unmap_one_alias_keeps_other(space):
    r = space.map_new(0x1000, 1, RW)
    a = space.remap_alias(r, 0x40000)
    space.unmap_region(a)
    space.write(r.base, b"ok")
    assert space.read(r.base, 2) == b"ok"
    assert space.phys.refcount(r.frames[0]) == 1


def test_access_across_pages(space):
    space.map_new(0x1000, 2, RW)
    space.write(0x1ffe, b"abcd")
    assert space.read(0x1ffe, 4) == b"abcd"


def test_fetch_needs_x(space):
    space.map_new(0x1000, 1, RW)
    with pytest.raises(AccessFault) as exc:
        space.fetch(0x1000, 1)
    assert exc.value.reason == "permission"


def test_write_spanning_into_readonly_is_all_or_nothing(space):
    space.map_new(0x1000, 1, RW)
    space.map_new(0x2000, 1, RO)
    with pytest.raises(AccessFault):
        space.write(0x1ffe, b"wxyz")
    assert space.read(0x1ffe, 2) == b"\0\0"


def test_replace_frames_is_atomic_swap(space):
    r = space.map_new(0x1000, 1, RO)
    new = space.phys.alloc(1)
    space.phys.buffer(new[0])[:8] = (42).to_bytes(8, "little")
    old_fid = r.frames[0]
    r2 = space.replace_frames(r, new)
    assert space.read_u64(0x1000) == 42
    assert old_fid not in space.phys
    assert space.perms_at(0x1000) == RO and r2.frames == tuple(new)


def test_random_base_exhaustion():
    space = AddressSpace(14)          # four pages in total
    space.map_new(0, 2, RO)
    space.map_new(3 * PAGE_SIZE, 1, RO)
    with pytest.raises(PlacementExhausted):
        space.random_base(2, random.Random(0))
    assert space.random_base(1, random.Random(0)) == 2 * PAGE_SIZE


def test_perm_parse():
    assert Perm.parse("r-x") == RX
    assert Perm.parse("rw") == RW


def test_racing_reader_sees_old_or_fault(space):
    r = space.map_new(0x1000, 1, RW)
    space.write(0x1000, b"\x5a" * 8)
    seen = set()
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            try:
                seen.add(space.read(0x1000, 8))
            except AccessFault:
                seen.add("fault")

    t = threading.Thread(target=reader)
    t.start()
    for _ in range(200):
        a = space.remap_alias(r, 0x100000)
        space.unmap_region(r)
        r = space.remap_alias(a, 0x1000)
        space.unmap_region(a)
    stop.set()
    t.join()
    assert seen <= {b"\x5a" * 8, "fault"}


class VmemMachine(RuleBasedStateMachine):
    """Random map/alias/protect/unmap sequences keep refcounts and W^X honest."""

    def __init__(self):
        super().__init__()
        self.space = AddressSpace(24)
        self.rng = random.Random(0)
        self.regions = []

    @rule(npages=st.integers(1, 4), perms=st.sampled_from([RO, RW, RX]))
    def map(self, npages, perms):
        try:
            base = self.space.random_base(npages, self.rng)
        except PlacementExhausted:
            return
        self.regions.append(self.space.map_new(base, npages, perms))

    @precondition(lambda self: self.regions)
    @rule(i=st.integers(0, 100))
    def alias(self, i):
        r = self.regions[i % len(self.regions)]
        try:
            base = self.space.random_base(len(r.frames), self.rng)
        except PlacementExhausted:
            return
        self.regions.append(self.space.remap_alias(r, base))

    @precondition(lambda self: self.regions)
    @rule(i=st.integers(0, 100), perms=st.sampled_from([RO, RW, RX]))
    def protect(self, i, perms):
        j = i % len(self.regions)
        self.regions[j] = self.space.protect(self.regions[j], perms)

    @precondition(lambda self: self.regions)
    @rule(i=st.integers(0, 100))
    def unmap(self, i):
        self.space.unmap_region(self.regions.pop(i % len(self.regions)))

    @precondition(lambda self: self.regions)
    @rule(i=st.integers(0, 100), byte=st.integers(0, 255))
    def coherent(self, i, byte):
        r = self.regions[i % len(self.regions)]
        for other in self.regions:
            if other.frames[0] == r.frames[0]:
                self.space.phys.buffer(r.frames[0])[0] = byte
                assert self.space.pages[other.base >> 12][2][0] == byte

    @invariant()
    def refcounts_match_mappings(self):
        self.space.check_invariants()
        uses = {}
        for r in self.regions:
            for f in r.frames:
                uses[f] = uses.get(f, 0) + 1
        assert self.space.phys.live() == len(uses)
        for f, n in uses.items():
            assert self.space.phys.refcount(f) == n
        assert len(self.space.pages) == sum(len(r.frames) for r in self.regions)


TestVmemMachine = VmemMachine.TestCase


@given(st.integers(0, 255), st.integers(0, 2 * PAGE_SIZE - 8))
def test_alias_coherence_any_offset(byte, off):
    space = AddressSpace(32)
    r = space.map_new(0x10000, 2, RW)
    a = space.remap_alias(r, 0x800000)
    space.write(a.base + off, bytes([byte]) * 8)
    assert space.read(r.base + off, 8) == bytes([byte]) * 8
