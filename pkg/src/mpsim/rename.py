"""Multi-path register renaming.

Each thread path logs its own destination renames. A source read sees the
path's own renames, then each ancestor's nearest-first, then the committed
architectural map. An ancestor stops renaming once it forks, so every
ancestor event precedes the fork leading to the reader. For speed each path
keeps a flat register -> tag view, copied from its parent on first use; every
event remembers the tag it shadowed so rollback can restore the view. Paths
are the ThreadEntry objects of a ThreadTable (only ``parent``, ``path`` and
``status`` are used).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .trace import NUM_ARCH_REGS

DEFAULT_PHYS_TAGS = 8192


class RenameStall(RuntimeError):
    """Free tag pool exhausted; dispatch must stall."""


class RenameConsistencyError(RuntimeError):
    pass


@dataclass(eq=False, slots=True)
class RenameEvent:
    arch_reg: int
    tag: int
    thread: object
    level: int
    order: int
    prev: int = -1

    @property
    def path(self):
        return self.thread.path


class _PathLog:
    __slots__ = ("events", "view", "next_order", "readers")

    def __init__(self, view):
        self.events: deque[RenameEvent] = deque()
        self.view: list[int] = view
        self.next_order = 0
        # True once a descendant copied this view
        self.readers = False


class RenameFile:
    """`phys_tags` rename tags on top of the 32 tags that back the initial
    architectural state."""

    def __init__(self, phys_tags: int = DEFAULT_PHYS_TAGS, arch_regs: int = NUM_ARCH_REGS):
        if phys_tags < 0:
            raise ValueError("phys_tags must be >= 0")
        self.arch_regs = arch_regs
        self.total_tags = arch_regs + phys_tags
        self.committed = list(range(arch_regs))
        self.free = deque(range(arch_regs, self.total_tags))
        self._logs: dict[object, _PathLog] = {}
        self.allocations = 0

    @property
    def free_count(self) -> int:
        return len(self.free)

    def can_allocate(self, n: int) -> bool:
        return len(self.free) >= n

    def events(self, thread) -> list[RenameEvent]:
        log = self._logs.get(thread)
        return list(log.events) if log else []

    def _log(self, thread) -> _PathLog:
        log = self._logs.get(thread)
        if log is None:
            parent = thread.parent
            if parent is None:
                view = list(self.committed)
            else:
                plog = self._log(parent)
                plog.readers = True
                view = list(plog.view)
            log = self._logs[thread] = _PathLog(view)
        return log

    def rename_dest(self, thread, arch_reg: int, order: int | None = None) -> RenameEvent:
        log = self._log(thread)
        if order is None:
            order = log.next_order
        return self.rename_op(thread, (), (arch_reg,), order)[1][0]

    def lookup_src(self, thread, arch_reg: int) -> int:
        return self._log(thread).view[arch_reg]

    def rename_op(self, thread, srcs, dsts, order: int):
        """Rename one instruction: source lookups first, then destination
        allocations. Returns (source tags, destination events)."""
        log = self._logs.get(thread)
        if log is None:
            log = self._log(thread)
        view = log.view
        tags = [view[r] for r in srcs]
        if not dsts:
            return tags, ()
        if log.readers:
            raise RenameConsistencyError(f"rename on path {thread.path} after a descendant read it")
        if thread.status == "invalidated":
            raise RenameConsistencyError(f"rename on invalidated path {thread.path}")
        free = self.free
        if len(free) < len(dsts):
            raise RenameStall("free tag pool exhausted")
        events = log.events
        if events and order <= events[-1].order:
            raise RenameConsistencyError(f"rename order {order} not increasing on path {thread.path}")
        log.next_order = order + 1
        level = len(thread.path)
        evs = []
        for r in dsts:
            tag = free.popleft()
            ev = RenameEvent(r, tag, thread, level, order, view[r])
            view[r] = tag
            evs.append(ev)
        events.extend(evs)
        self.allocations += len(evs)
        return tags, evs

    def release_path_renames(self, threads) -> int:
        """Drop every event of the given (invalidated) paths and free their tags."""
        freed = 0
        for t in threads:
            log = self._logs.pop(t, None)
            if log is None:
                continue
            for ev in log.events:
                self.free.append(ev.tag)
                freed += 1
        return freed

    def truncate_after(self, thread, order: int) -> int:
        """Undo renames the path made after `order` (misprediction rollback)."""
        log = self._logs.get(thread)
        if log is None:
            return 0
        freed = 0
        while log.events and log.events[-1].order > order:
            ev = log.events.pop()
            log.view[ev.arch_reg] = ev.prev
            self.free.append(ev.tag)
            freed += 1
        # rollback implies every descendant path was already released
        log.readers = False
        return freed

    def commit_rename(self, ev: RenameEvent) -> int:
        """Retire `ev` into the architectural map; frees the tag it replaces."""
        if ev.thread.status == "invalidated":
            raise RenameConsistencyError(f"commit from invalidated path {ev.thread.path}")
        log = self._logs.get(ev.thread)
        if log is None or not log.events or log.events[0] is not ev:
            raise RenameConsistencyError("commit out of order: event is not the oldest on its path")
        log.events.popleft()
        old = self.committed[ev.arch_reg]
        self.committed[ev.arch_reg] = ev.tag
        self.free.append(old)
        return old

    def forget(self, thread) -> None:
        log = self._logs.pop(thread, None)
        if log is not None and log.events:
            raise RenameConsistencyError(f"forget of path {thread.path} with live renames")

    @property
    def live_events(self) -> int:
        return sum(len(l.events) for l in self._logs.values())

