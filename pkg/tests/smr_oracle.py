"""Sequential reference for the reclamation domain.

A callback is owed to every guard that was active when it was retired and
may run at the first collect after all of those guards are gone.
"""


class OracleDomain:
    def __init__(self):
        self.active = {}          # guard id -> worker
        self.pending = []         # (cb id, blocking guard ids)
        self.ran = []
        self.next_guard = 0

    def start(self, worker):
        gid = self.next_guard
        self.next_guard += 1
        self.active[gid] = worker
        return gid

    def finish(self, gid):
        del self.active[gid]

    def retire(self, cb):
        self.pending.append((cb, set(self.active)))

    def collect(self):
        ready = [cb for cb, block in self.pending if not block & set(self.active)]
        self.pending = [(cb, b) for cb, b in self.pending if b & set(self.active)]
        self.ran += ready
        return ready
