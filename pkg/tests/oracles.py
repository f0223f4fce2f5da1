"""Independent reference models used only by the tests. Each is written
from the definitions directly and shares no code with the package."""

from __future__ import annotations

import itertools


def fsm2(counter: int, taken: bool) -> int:
    """Reference 2-bit saturating counter as an explicit state table."""
    table = {
        (0, False): 0, (0, True): 1,
        (1, False): 0, (1, True): 2,
        (2, False): 1, (2, True): 3,
        (3, False): 2, (3, True): 3,
    }
    return table[(counter, taken)]


# The confidence rule spelled out case by case for all 32 inputs.
CONFIDENCE_TRUTH_TABLE = {}
for _v in range(16):
    CONFIDENCE_TRUTH_TABLE[(_v, True)] = 8 if _v < 8 else min(15, _v + 1)
    CONFIDENCE_TRUTH_TABLE[(_v, False)] = _v + 1 if _v < 8 else 7


def all_paths(depth: int):
    """Every bit-tuple of length 0..depth."""
    for n in range(depth + 1):
        yield from itertools.product((0, 1), repeat=n)


def complementary_subtree(live, parent, actual_taken):
    """Paths invalidated when the fork at `parent` resolves: the parent
    extended by the losing bit, and everything below it, by prefix test."""
    loser = tuple(parent) + ((0,) if actual_taken else (1,))
    return {p for p in live if p[:len(loser)] == loser}


class LinearRename:
    """Brute-force rename oracle. Every rename is appended to one global list
    with the path that made it; a lookup from path P scans the list backwards
    for the newest rename of the register made by P or by an ancestor of P
    (ancestor events are only counted if they happened before P came into
    being, which the tests guarantee by construction)."""

    def __init__(self, arch_regs=32):
        self.events = []  # (path_obj, reg, tag)
        self.base = list(range(arch_regs))

    def rename(self, path_obj, reg, tag):
        self.events.append((path_obj, reg, tag))

    def lookup(self, path_obj, chain, reg):
        for p, r, tag in reversed(self.events):
            if r == reg and p in chain:
                return tag
        return self.base[reg]


def interpret(records):
    """In-order single-path interpreter. For each instruction, the seq of the
    producer of every source register (-1 for the initial state), and the
    final producer of every architectural register."""
    last = [-1] * 32
    log = []
    for r in records:
        log.append((r.seq, tuple(last[s] for s in r.srcs)))
        for d in r.dsts:
            last[d] = r.seq
    return log, last
