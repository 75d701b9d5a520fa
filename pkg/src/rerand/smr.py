"""Deferred reclamation: mr_start / mr_finish / mr_retire.

Every retire closes an epoch.  A guard remembers the epoch it started in;
a callback retired in epoch ``e`` may run once no guard that started in an
epoch ``<= e`` is still active.  Those are exactly the guards that were
active when the callback was retired, so callbacks never outrun a pending
call and never wait on calls that began afterwards.

Active-guard counts live in an insertion-ordered dict keyed by epoch, so the
oldest active epoch is its first key and guard entry/exit is O(1).
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable


class SmrError(Exception):
    pass


class UnregisteredWorker(SmrError):
    pass


class DoubleRelease(SmrError):
    pass


class ForeignGuard(SmrError):
    """Guard released by a worker other than the one that created it."""


@dataclass(eq=False)
class Guard:
    worker: Hashable
    epoch: int
    started: float
    released: bool = False


@dataclass(frozen=True)
class SmrCounters:
    retired: int
    freed: int

    @property
    def delta(self) -> int:
        return self.retired - self.freed

    def log_lines(self) -> list[str]:
        return [f"SMR Retire: {self.retired}", f"SMR Free: {self.freed}",
                f"SMR Delta: {self.delta}"]


@dataclass
class ReclamationDomain:
    """Tracks pending guarded calls and runs retired callbacks after them."""

    watchdog_s: float = 1.0
    auto_collect: bool = False
    clock: Callable[[], float] = time.monotonic
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    _workers: set = field(default_factory=set, repr=False)
    _epoch: int = 0
    _active: dict[int, int] = field(default_factory=dict, repr=False)
    _guards: dict[int, Guard] = field(default_factory=dict, repr=False)
    _queue: deque = field(default_factory=deque, repr=False)
    retired: int = 0
    freed: int = 0

    def register(self, worker: Hashable) -> None:
        with self._lock:
            self._workers.add(worker)

    def unregister(self, worker: Hashable) -> None:
        with self._lock:
            self._workers.discard(worker)

    def is_registered(self, worker: Hashable) -> bool:
        return worker in self._workers

    def mr_start(self, worker: Hashable) -> Guard:
        with self._lock:
            if worker not in self._workers:
                raise UnregisteredWorker(repr(worker))
            ep = self._epoch
            self._active[ep] = self._active.get(ep, 0) + 1
            guard = Guard(worker, ep, self.clock())
            self._guards[id(guard)] = guard
        return guard

    def mr_finish(self, guard: Guard, worker: Hashable | None = None) -> None:
        with self._lock:
            if guard.released:
                raise DoubleRelease(f"guard of worker {guard.worker!r} released twice")
            if worker is not None and worker != guard.worker:
                raise ForeignGuard(f"worker {worker!r} cannot release {guard.worker!r}'s guard")
            guard.released = True
            del self._guards[id(guard)]
            n = self._active[guard.epoch] - 1
            if n:
                self._active[guard.epoch] = n
            else:
                del self._active[guard.epoch]
        if self.auto_collect:
            self.collect()

    def mr_retire(self, callback: Callable[[], object]) -> None:
        with self._lock:
            self._queue.append((self._epoch, callback))
            self._epoch += 1
            self.retired += 1

    def _oldest_active(self) -> int | None:
        return next(iter(self._active), None)

    def collect(self) -> int:
        """Run every eligible callback; returns how many ran."""
        ready = []
        with self._lock:
            oldest = self._oldest_active()
            while self._queue and (oldest is None or self._queue[0][0] < oldest):
                ready.append(self._queue.popleft()[1])
            self.freed += len(ready)
        errors = []
        for cb in ready:
            try:
                cb()
            except Exception as exc:  # keep draining; report the first failure
                errors.append(exc)
        if errors:
            raise errors[0]
        return len(ready)

    def pending(self) -> int:
        return len(self._queue)

    def active_guards(self) -> int:
        with self._lock:
            return len(self._guards)

    def overdue(self, threshold_s: float | None = None) -> list[Guard]:
        """Guards held longer than the watchdog threshold."""
        limit = self.watchdog_s if threshold_s is None else threshold_s
        now = self.clock()
        with self._lock:
            return [g for g in self._guards.values() if now - g.started > limit]

    def counters(self) -> SmrCounters:
        with self._lock:
            return SmrCounters(self.retired, self.freed)

    def drain(self, timeout_s: float = 5.0, poll_s: float = 0.001) -> bool:
        """Collect until nothing is pending or the timeout expires."""
        deadline = time.monotonic() + timeout_s
        while True:
            self.collect()
            if not self._queue:
                return True
            if time.monotonic() >= deadline:
                return False
            time.sleep(poll_s)
