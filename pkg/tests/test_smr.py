import threading

import pytest
from hypothesis import given, settings, strategies as st

from rerand.smr import DoubleRelease, ForeignGuard, ReclamationDomain, UnregisteredWorker

from smr_oracle import OracleDomain

events = st.lists(st.tuples(st.sampled_from(["start", "finish", "retire", "collect"]),
                            st.integers(0, 5)), max_size=20)


def run_script(script, nworkers):
    """Drive the domain and the oracle with the same script; compare every collect."""
    dom, ora = ReclamationDomain(), OracleDomain()
    for w in range(nworkers):
        dom.register(w)
    stacks = {w: [] for w in range(nworkers)}
    ran = []
    next_cb = 0
    for op, arg in script:
        w = arg % nworkers
        if op == "start":
            stacks[w].append((dom.mr_start(w), ora.start(w)))
        elif op == "finish" and stacks[w]:
            g, gid = stacks[w].pop()
            dom.mr_finish(g, w)
            ora.finish(gid)
        elif op == "retire":
            cb = next_cb
            next_cb += 1
            dom.mr_retire(lambda cb=cb: ran.append(cb))
            ora.retire(cb)
        elif op == "collect":
            before = len(ran)
            assert dom.collect() == len(ora.collect())
            assert sorted(ran[before:]) == sorted(ora.ran[len(ora.ran) - (len(ran) - before):])
    for w, stack in stacks.items():
        while stack:
            g, gid = stack.pop()
            dom.mr_finish(g, w)
            ora.finish(gid)
    dom.collect()
    ora.collect()
    return dom, ora, ran, next_cb


@settings(max_examples=400)
@given(events, st.integers(1, 6))
def test_matches_sequential_oracle(script, nworkers):
    dom, ora, ran, n = run_script(script, nworkers)
    assert sorted(ran) == sorted(ora.ran) == list(range(n))    # exactly once
    assert dom.counters().delta == 0 and dom.pending() == 0


def test_start_retire_finish():
    d = ReclamationDomain()
    d.register("a")
    hits = []
    g = d.mr_start("a")
    d.mr_retire(lambda: hits.append(1))
    assert d.collect() == 0 and hits == []
    d.mr_finish(g, "a")
    assert d.collect() == 1 and hits == [1]
    assert d.collect() == 0 and hits == [1]


def test_retire_without_guards_runs_on_next_collect():
    d = ReclamationDomain()
    hits = []
    d.mr_retire(lambda: hits.append(1))
    assert hits == []
    d.collect()
    assert hits == [1]


def test_nested_guards_release_on_outer_finish():
    d = ReclamationDomain()
    d.register(0)
    hits = []
    outer = d.mr_start(0)
    inner = d.mr_start(0)
    d.mr_retire(lambda: hits.append(1))
    d.mr_finish(inner, 0)
    assert d.collect() == 0
    d.mr_finish(outer, 0)
    assert d.collect() == 1


def test_guard_started_after_retire_does_not_block():
    d = ReclamationDomain()
    d.register(0)
    d.mr_retire(lambda: None)
    g = d.mr_start(0)
    assert d.collect() == 1
    d.mr_finish(g)


def test_errors():
    d = ReclamationDomain()
    with pytest.raises(UnregisteredWorker):
        d.mr_start("ghost")
    d.register("a")
    d.register("b")
    g = d.mr_start("a")
    with pytest.raises(ForeignGuard):
        d.mr_finish(g, "b")
    d.mr_finish(g, "a")
    with pytest.raises(DoubleRelease):
        d.mr_finish(g, "a")


def test_worker_isolation():
    d = ReclamationDomain()
    d.register("a")
    d.register("b")
    ga, gb = d.mr_start("a"), d.mr_start("b")
    d.mr_retire(lambda: None)
    d.mr_finish(ga, "a")
    assert d.collect() == 0 and d.counters().delta == 1
    d.mr_finish(gb, "b")
    assert d.collect() == 1 and d.counters().delta == 0


def test_pinned_callback_stays_pending():
    d = ReclamationDomain()
    d.register(0)
    d.mr_start(0)
    d.mr_retire(lambda: None)
    d.collect()
    assert d.counters().delta == 1
    assert d.counters().log_lines() == ["SMR Retire: 1", "SMR Free: 0", "SMR Delta: 1"]


def test_watchdog_reports_long_guards():
    now = [0.0]
    d = ReclamationDomain(watchdog_s=1.0, clock=lambda: now[0])
    d.register(0)
    g = d.mr_start(0)
    now[0] = 0.5
    assert d.overdue() == []
    now[0] = 2.0
    assert d.overdue() == [g]
    assert d.overdue(5.0) == []


def test_failing_callback_does_not_stop_the_rest():
    d = ReclamationDomain()
    hits = []
    d.mr_retire(lambda: 1 / 0)
    d.mr_retire(lambda: hits.append(1))
    with pytest.raises(ZeroDivisionError):
        d.collect()
    assert hits == [1] and d.counters().delta == 0


def test_guard_path_never_touches_the_retire_queue():
    class Tripwire:
        def __getattr__(self, name):
            raise AssertionError("guard path scanned the retire queue")

        def __bool__(self):
            raise AssertionError("guard path scanned the retire queue")

    d = ReclamationDomain()
    d.register(0)
    for _ in range(100):
        d.mr_retire(lambda: None)
    saved, d._queue = d._queue, Tripwire()
    guards = [d.mr_start(0) for _ in range(50)]
    for g in reversed(guards):
        d.mr_finish(g, 0)
    d._queue = saved
    assert d.collect() == 100


def test_auto_collect():
    d = ReclamationDomain(auto_collect=True)
    d.register(0)
    hits = []
    g = d.mr_start(0)
    d.mr_retire(lambda: hits.append(1))
    d.mr_finish(g)
    assert hits == [1]


def test_exactly_once_under_churn():
    d = ReclamationDomain()
    counts = [0] * 1000
    lock = threading.Lock()
    for w in range(4):
        d.register(w)

    def bump(i):
        with lock:
            counts[i] += 1

    def worker(w):
        for _ in range(500):
            g = d.mr_start(w)
            d.mr_finish(g, w)

    def retirer():
        for i in range(1000):
            d.mr_retire(lambda i=i: bump(i))
            if i % 7 == 0:
                d.collect()

    threads = [threading.Thread(target=worker, args=(w,)) for w in range(4)]
    threads.append(threading.Thread(target=retirer))
    threads += [threading.Thread(target=lambda: [d.collect() for _ in range(300)])
                for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert d.drain(2.0)
    assert counts == [1] * 1000
    assert d.counters().delta == 0
