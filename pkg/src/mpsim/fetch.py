"""Fetch policies: how one cycle's fetch bandwidth is split across the active
thread paths, and when a conditional branch forks instead of being predicted."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .threads import DEFAULT_MAX_LEVELS

PERFECT_SINGLE = "perfect_single"
GSHARE_SINGLE = "gshare_single"
DIVIDED_EAGER = "divided_eager"
DEE = "dee"
SELECTIVE_DEE = "selective_dee"
DYNAMIC_DEE = "dynamic_dee"

POLICIES = (PERFECT_SINGLE, GSHARE_SINGLE, DIVIDED_EAGER, DEE, SELECTIVE_DEE, DYNAMIC_DEE)
SINGLE_PATH = frozenset((PERFECT_SINGLE, GSHARE_SINGLE))
EAGER = frozenset((DIVIDED_EAGER, DEE, SELECTIVE_DEE, DYNAMIC_DEE))
USES_CONFIDENCE = frozenset((DEE, SELECTIVE_DEE, DYNAMIC_DEE))

# short names accepted on the command line
CLI_NAMES = {
    "perfect": PERFECT_SINGLE,
    "gshare": GSHARE_SINGLE,
    "divided": DIVIDED_EAGER,
    "dee": DEE,
    "selective-dee": SELECTIVE_DEE,
    "dynamic-dee": DYNAMIC_DEE,
}
CLI_LABELS = {v: k for k, v in CLI_NAMES.items()}

FORK = "fork"
PREDICT = "predict"


class SchedulingError(RuntimeError):
    pass


def policy_name(name: str) -> str:
    """Canonical policy identifier from either the canonical or the CLI form."""
    if name in POLICIES:
        return name
    try:
        return CLI_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown fetch policy {name!r}; choose from {', '.join(CLI_NAMES)}") from None


@dataclass(frozen=True)
class FetchPolicy:
    name: str = DYNAMIC_DEE
    fetch_width: int = 32
    target_ipc: int = 8
    max_branch_levels: int = DEFAULT_MAX_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "name", policy_name(self.name))
        if self.fetch_width < 1:
            raise ValueError("fetch_width must be >= 1")
        if self.target_ipc < 1:
            raise ValueError("target_ipc must be >= 1")
        if self.name == SELECTIVE_DEE and self.fetch_width % self.target_ipc:
            raise ValueError(f"selective_dee needs fetch_width ({self.fetch_width}) divisible by "
                             f"target_ipc ({self.target_ipc})")
        if self.max_branch_levels < 0:
            raise ValueError("max_branch_levels must be >= 0")

    @property
    def is_eager(self) -> bool:
        return self.name in EAGER

    @property
    def uses_confidence(self) -> bool:
        return self.name in USES_CONFIDENCE


def _key(path):
    return (len(path), tuple(path))


def _largest_remainder(width: int, weights: list[float]) -> list[int]:
    total = math.fsum(weights)
    quotas = [width * w / total for w in weights]
    alloc = [math.floor(q) for q in quotas]
    left = width - sum(alloc)
    # largest fractional part first; ties go to the earlier thread
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:left]:
        alloc[i] += 1
    return alloc


def allocate_fetch(policy: FetchPolicy, threads) -> dict:
    """Split `policy.fetch_width` across `threads`, an iterable of
    (PathId, path_confidence) pairs. Returns {PathId: count}; counts are
    non-negative and sum to the fetch width."""
    threads = sorted(((tuple(p), c) for p, c in threads), key=lambda t: _key(t[0]))
    if not threads:
        raise SchedulingError("no active thread path to fetch from")
    width = policy.fetch_width
    alloc = {p: 0 for p, _ in threads}
    name = policy.name

    if name in SINGLE_PATH:
        alloc[threads[0][0]] = width
    elif name == DIVIDED_EAGER:
        share, rem = divmod(width, len(threads))
        for i, (p, _) in enumerate(threads):
            alloc[p] = share + (1 if i < rem else 0)
    else:
        # best first: higher confidence, then lower level, then smaller PathId
        ranked = sorted(threads, key=lambda t: (-t[1], _key(t[0])))
        if name == DEE:
            alloc[ranked[0][0]] = width
        elif name == SELECTIVE_DEE:
            k = width // policy.target_ipc
            for p, _ in ranked[:k]:
                alloc[p] = policy.target_ipc
            alloc[ranked[0][0]] += max(0, k - len(ranked)) * policy.target_ipc
        elif name == DYNAMIC_DEE:
            weights = [c for _, c in threads]
            if math.fsum(weights) <= 0:
                weights = [1.0] * len(threads)
            for (p, _), n in zip(threads, _largest_remainder(width, weights)):
                alloc[p] = n
        else:
            raise SchedulingError(f"unhandled policy {name}")
    return alloc


def should_fork(policy: FetchPolicy, thread_level: int) -> str:
    if policy.name in SINGLE_PATH:
        return PREDICT
    return FORK if thread_level < policy.max_branch_levels else PREDICT


def select_fetch_pcs(allocation: dict, table) -> list[tuple]:
    """Fetch plan for this cycle: (PathId, start pc, count) for every thread
    with a non-zero allocation, in active-thread order. The fetch engine walks
    each plan entry and stops early at a forking branch."""
    plan = []
    for e in table.active_threads():
        n = allocation.get(e.path, 0)
        if n > 0:
            plan.append((e.path, e.next_pc, n))
    return plan
