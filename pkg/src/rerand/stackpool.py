"""Per-worker LIFO pools of execution stacks.

Each worker owns a list head.  ``get_new_stack`` pops from it or maps a
fresh stack at a random address; ``return_old_stack`` pushes onto whatever
list is current.  ``regenerate`` swaps every head for a new list in one
assignment and hands the detached lists to the reclamation domain, which
unmaps their stacks once pending calls (which may still be popping from a
detached list) have finished.  Detached nodes are never relinked, so a
swapped head cannot come back (no ABA).
"""

from __future__ import annotations

import enum
import random
import threading
from dataclasses import dataclass, field
from typing import Hashable

from .smr import ReclamationDomain
from .vmem import PAGE_SIZE, RW, AddressSpace, Region, VmemError


class StackError(Exception):
    pass


class ForeignStack(StackError):
    pass


class DoubleReturn(ForeignStack):
    pass


class OutOfMemory(StackError):
    pass


class UnknownWorker(StackError):
    pass


class State(enum.Enum):
    HELD = "held"
    POOLED = "pooled"
    FREED = "freed"


@dataclass(eq=False)
class Stack:
    region: Region
    owner: Hashable
    state: State = State.HELD

    @property
    def base(self) -> int:
        return self.region.base

    @property
    def top(self) -> int:
        return self.region.end


class _StackList:
    """One LIFO list; a detached list is only ever drained, never refilled."""

    __slots__ = ("items", "lock", "detached")

    def __init__(self) -> None:
        self.items: list[Stack] = []
        self.lock = threading.Lock()
        self.detached = False


@dataclass(frozen=True)
class StackCounters:
    alloc: int
    free: int

    @property
    def delta(self) -> int:
        return self.alloc - self.free

    def log_lines(self) -> list[str]:
        return [f"Stack Alloc: {self.alloc}", f"Stack Free: {self.free}",
                f"Stack Delta: {self.delta}"]


@dataclass
class StackPool:
    space: AddressSpace
    rng: random.Random = field(default_factory=random.Random)
    stack_size: int = 16 * 1024
    prepopulate: int = 2
    regen_prepopulate: int = 0
    _heads: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    alloc: int = 0
    free: int = 0

    def __post_init__(self) -> None:
        if self.stack_size <= 0 or self.stack_size % PAGE_SIZE:
            raise ValueError("stack_size must be a positive multiple of PAGE_SIZE")

    def register(self, worker: Hashable) -> None:
        if worker in self._heads:
            return
        lst = _StackList()
        lst.items.extend(self._allocate(worker, State.POOLED) for _ in range(self.prepopulate))
        self._heads[worker] = lst

    def workers(self) -> list:
        return list(self._heads)

    def _allocate(self, worker: Hashable, state: State) -> Stack:
        npages = self.stack_size // PAGE_SIZE
        with self._lock, self.space._lock:
            try:
                base = self.space.random_base(npages, self.rng)
                region = self.space.map_new(base, npages, RW, tag="stack")
            except VmemError as exc:
                raise OutOfMemory(str(exc)) from exc
            self.alloc += 1
        return Stack(region, worker, state)

    def _release(self, stack: Stack) -> None:
        self.space.unmap_region(stack.region)
        stack.state = State.FREED
        with self._lock:
            self.free += 1

    def get_new_stack(self, worker: Hashable) -> Stack:
        head = self._heads.get(worker)
        if head is None:
            raise UnknownWorker(repr(worker))
        with head.lock:
            stack = head.items.pop() if head.items else None
        if stack is None:
            return self._allocate(worker, State.HELD)
        stack.state = State.HELD
        return stack

    def return_old_stack(self, worker: Hashable, stack: Stack) -> None:
        if stack.owner != worker:
            raise ForeignStack(f"stack {stack.base:#x} belongs to {stack.owner!r}, not {worker!r}")
        if stack.state is not State.HELD:
            raise DoubleReturn(f"stack {stack.base:#x} is {stack.state.value}")
        head = self._heads[worker]
        stack.state = State.POOLED
        with head.lock:
            head.items.append(stack)

    def regenerate(self, domain: ReclamationDomain) -> None:
        """Swap in fresh lists and retire the old ones through ``domain``."""
        old = []
        for worker in list(self._heads):
            fresh = _StackList()
            fresh.items.extend(self._allocate(worker, State.POOLED)
                               for _ in range(self.regen_prepopulate))
            old.append(self._heads[worker])
            self._heads[worker] = fresh
        domain.mr_retire(lambda: self._free_lists(old))

    def _free_lists(self, lists: list[_StackList]) -> None:
        for lst in lists:
            with lst.lock:
                lst.detached = True
                items, lst.items = lst.items, []
            for stack in items:
                self._release(stack)

    def pooled(self) -> list[Stack]:
        out = []
        for lst in list(self._heads.values()):
            with lst.lock:
                out.extend(lst.items)
        return out

    def counters(self) -> StackCounters:
        with self._lock:
            return StackCounters(self.alloc, self.free)

    def release_all(self, domain: ReclamationDomain) -> None:
        """Retire every pooled stack (used on shutdown)."""
        saved = self.regen_prepopulate
        self.regen_prepopulate = 0
        try:
            self.regenerate(domain)
        finally:
            self.regen_prepopulate = saved
