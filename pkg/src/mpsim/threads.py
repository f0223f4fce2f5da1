"""Thread Management Table: speculative thread paths identified by
branch-history bit strings (1 = taken arm, 0 = not-taken arm).

Entries are stable objects arranged in a fork tree. A path's PathId lists only
its *unresolved* forks, earliest first, so when a fork resolves the surviving
subtree drops that bit and every path's level shrinks by one. The resolved
parent stays in the tree as a ``merged`` link so older instructions fetched
before the fork keep a well-defined ancestor chain (rename lookups walk it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

PathId = tuple  # tuple[int, ...]

ACTIVE = "active"
FORKED = "forked"
MERGED = "merged"
INVALIDATED = "invalidated"

DEFAULT_MAX_LEVELS = 25


class LevelExceededError(RuntimeError):
    """Fork requested at the maximum branch level; the caller must predict."""


class ThreadConsistencyError(RuntimeError):
    pass


def is_ancestor(a: PathId, b: PathId) -> bool:
    """True iff `a` is a proper prefix of `b`."""
    return len(a) < len(b) and b[: len(a)] == a


@dataclass(eq=False)
class ThreadEntry:
    path: PathId
    next_pc: int
    forked_branch_addr: Optional[int] = None
    arm_probs: tuple = ()
    status: str = ACTIVE
    parent: Optional["ThreadEntry"] = field(default=None, repr=False)
    # set while forked: (not-taken child, taken child)
    children: Optional[tuple] = field(default=None, repr=False)
    # set once merged: the child that survived this entry's fork
    successor: Optional["ThreadEntry"] = field(default=None, repr=False)
    fork_pc: Optional[int] = None
    confidence: float = 1.0
    # owner-specific state (the pipeline keeps its fetch cursor here)
    cursor: object = field(default=None, repr=False)

    @property
    def thread_level(self) -> int:
        return len(self.path)

    @property
    def path_confidence(self) -> float:
        return self.confidence


class ForkPoint(NamedTuple):
    branch_pc: int
    level: int
    parent: PathId


def _order_key(e: ThreadEntry):
    return (len(e.path), e.path)


class ThreadTable:
    def __init__(self, max_branch_levels: int = DEFAULT_MAX_LEVELS, root_pc: int = 0):
        if max_branch_levels < 0:
            raise ValueError("max_branch_levels must be >= 0")
        self.max_branch_levels = max_branch_levels
        self.root = ThreadEntry(path=(), next_pc=root_pc)
        self._index: dict[PathId, ThreadEntry] = {(): self.root}
        self._active: set[ThreadEntry] = {self.root}
        self.peak_active = 1

    # lookups ------------------------------------------------------------
    def entry(self, path: PathId) -> ThreadEntry:
        try:
            return self._index[tuple(path)]
        except KeyError:
            raise ThreadConsistencyError(f"no live path {tuple(path)}") from None

    def __contains__(self, path) -> bool:
        return tuple(path) in self._index

    def active_threads(self) -> list[ThreadEntry]:
        return sorted(self._active, key=_order_key)

    @property
    def active_count(self) -> int:
        return len(self._active)

    def path_confidence(self, path: PathId) -> float:
        return self.entry(path).confidence

    def fork_points(self) -> list[ForkPoint]:
        return sorted((ForkPoint(e.fork_pc, len(e.path), e.path)
                       for e in self._index.values() if e.status == FORKED),
                      key=lambda fp: (fp.level, fp.parent))

    # mutation -----------------------------------------------------------
    def fork(self, parent: PathId, branch_pc: int, taken_target: int, fallthrough_pc: int,
             taken_conf: float) -> tuple[PathId, PathId]:
        """Split an active path at a conditional branch. Returns the
        (taken, not-taken) child PathIds."""
        p = self.entry(parent)
        t, nt = self.fork_entry(p, branch_pc, taken_target, fallthrough_pc, taken_conf)
        return t.path, nt.path

    def fork_entry(self, p: ThreadEntry, branch_pc, taken_target, fallthrough_pc, taken_conf):
        if p.status != ACTIVE:
            raise ThreadConsistencyError(f"fork on non-active path {p.path} ({p.status})")
        if len(p.path) >= self.max_branch_levels:
            raise LevelExceededError(f"path {p.path} is at the maximum level {self.max_branch_levels}")
        if not 0.0 <= taken_conf <= 1.0:
            raise ValueError(f"taken_conf must be a probability, got {taken_conf}")
        nt_conf = 1.0 - taken_conf
        t = ThreadEntry(p.path + (1,), taken_target, branch_pc, p.arm_probs + (taken_conf,),
                        parent=p, confidence=p.confidence * taken_conf)
        nt = ThreadEntry(p.path + (0,), fallthrough_pc, branch_pc, p.arm_probs + (nt_conf,),
                         parent=p, confidence=p.confidence * nt_conf)
        p.status = FORKED
        p.children = (nt, t)
        p.fork_pc = branch_pc
        self._active.discard(p)
        for c in (t, nt):
            self._index[c.path] = c
            self._active.add(c)
        if len(self._active) > self.peak_active:
            self.peak_active = len(self._active)
        return t, nt

    def resolve_branch(self, fork_point, actual_taken: bool) -> list[ThreadEntry]:
        """Resolve a recorded fork. `fork_point` is a ForkPoint or the parent
        PathId. Returns the invalidated entries (with their PathIds as they were
        before invalidation)."""
        if isinstance(fork_point, ForkPoint):
            p = self._index.get(tuple(fork_point.parent))
            if (p is None or p.status != FORKED or p.fork_pc != fork_point.branch_pc
                    or len(p.path) != fork_point.level):
                raise ThreadConsistencyError(f"unknown fork point {fork_point}")
        else:
            p = self._index.get(tuple(fork_point))
            if p is None or p.status != FORKED:
                raise ThreadConsistencyError(f"unknown fork point {tuple(fork_point)}")
        return self.resolve_entry(p, actual_taken)

    def resolve_entry(self, p: ThreadEntry, actual_taken: bool) -> list[ThreadEntry]:
        if p.status != FORKED:
            raise ThreadConsistencyError(f"path {p.path} has no unresolved fork")
        nt, t = p.children
        winner, loser = (t, nt) if actual_taken else (nt, t)
        dead = self._invalidate(loser)
        p.status = MERGED
        p.children = None
        p.successor = winner
        del self._index[p.path]
        self._drop_level(winner, len(p.path))
        return dead

    def rewind(self, path_or_entry) -> list[ThreadEntry]:
        """Discard everything the path fetched after it forked (or after a
        merged fork) and make it an active leaf again. Used for misprediction
        recovery. Returns the invalidated descendants."""
        e = path_or_entry if isinstance(path_or_entry, ThreadEntry) else self.entry(path_or_entry)
        if e.status == INVALIDATED:
            raise ThreadConsistencyError(f"rewind of invalidated path {e.path}")
        dead = []
        if e.status == FORKED:
            for c in e.children:
                dead += self._invalidate(c)
        elif e.status == MERGED:
            dead += self._invalidate(e.successor)
        e.children = None
        e.successor = None
        e.fork_pc = None
        if e.status != ACTIVE:
            e.status = ACTIVE
            self._index[e.path] = e
            self._active.add(e)
        return dead

    def drop_root(self) -> ThreadEntry:
        """Forget a merged root link; its successor becomes the root."""
        old = self.root
        if old.status != MERGED:
            raise ThreadConsistencyError("only a merged root can be dropped")
        self.root = old.successor
        self.root.parent = None
        old.successor = None
        return old

    # internals ----------------------------------------------------------
    def _invalidate(self, top: ThreadEntry) -> list[ThreadEntry]:
        out = []
        stack = [top]
        while stack:
            e = stack.pop()
            if e.status == INVALIDATED:
                continue
            if e.status in (ACTIVE, FORKED):
                if self._index.get(e.path) is e:
                    del self._index[e.path]
            self._active.discard(e)
            e.status = INVALIDATED
            out.append(e)
            if e.children:
                stack.extend(e.children)
            if e.successor is not None:
                stack.append(e.successor)
            e.children = None
            e.successor = None
        return out

    def _drop_level(self, top: ThreadEntry, k: int) -> None:
        """Remove bit position k from every path in the subtree."""
        stack = [top]
        moved = []
        while stack:
            e = stack.pop()
            if e.status in (ACTIVE, FORKED) and self._index.get(e.path) is e:
                del self._index[e.path]
                moved.append(e)
            e.path = e.path[:k] + e.path[k + 1:]
            e.arm_probs = e.arm_probs[:k] + e.arm_probs[k + 1:]
            e.confidence = math.prod(e.arm_probs)
            if e.children:
                stack.extend(e.children)
            if e.successor is not None:
                stack.append(e.successor)
        for e in moved:
            self._index[e.path] = e
