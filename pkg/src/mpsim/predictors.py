"""Direction predictor (gshare), branch target buffer, and the 4-bit
confidence estimator."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

CONF_MAX = 15
CONF_THRESHOLD = 8

HIGH = "high"
LOW = "low"


def _check_pow2(name, n):
    if n < 1 or n & (n - 1):
        raise ValueError(f"{name} must be a power of two, got {n}")


class Gshare:
    """Table of 2-bit saturating counters indexed by (pc >> 2) XOR global history."""

    def __init__(self, entries: int = 16384, history_bits: int = 16):
        _check_pow2("gshare entries", entries)
        if history_bits < 0:
            raise ValueError("history_bits must be >= 0")
        self.entries = entries
        self.history_bits = history_bits
        self.counters = bytearray(entries)  # strongly not-taken
        self.history = 0
        self._hmask = (1 << history_bits) - 1

    def index(self, pc: int) -> int:
        return ((pc >> 2) ^ self.history) & (self.entries - 1)

    def predict(self, pc: int) -> bool:
        return self.counters[self.index(pc)] >= 2

    def update(self, pc: int, taken: bool) -> None:
        i = self.index(pc)
        c = self.counters[i]
        if taken:
            if c < 3:
                self.counters[i] = c + 1
        elif c > 0:
            self.counters[i] = c - 1
        self.history = ((self.history << 1) | int(taken)) & self._hmask


class BTB:
    """Set-associative branch target buffer with LRU replacement."""

    def __init__(self, sets: int = 8192, ways: int = 16):
        _check_pow2("BTB sets", sets)
        if ways < 1:
            raise ValueError("BTB ways must be >= 1")
        self.sets = sets
        self.ways = ways
        self._sets: dict[int, OrderedDict] = {}

    def set_index(self, pc: int) -> int:
        return (pc >> 2) & (self.sets - 1)

    def lookup(self, pc: int) -> int | None:
        s = self._sets.get(self.set_index(pc))
        if s is None or pc not in s:
            return None
        s.move_to_end(pc)
        return s[pc]

    def insert(self, pc: int, target: int) -> int | None:
        """Install pc -> target. Returns the evicted pc, if any."""
        s = self._sets.setdefault(self.set_index(pc), OrderedDict())
        evicted = None
        if pc in s:
            s.move_to_end(pc)
        elif len(s) >= self.ways:
            evicted, _ = s.popitem(last=False)
        s[pc] = target
        return evicted

    def __len__(self):
        return sum(len(s) for s in self._sets.values())


def confidence_update(value: int, prediction_correct: bool) -> int:
    """Asymmetric update: a correct prediction lifts a low counter straight to
    the threshold, a wrong one drops a high counter just below it."""
    if prediction_correct:
        if value < CONF_THRESHOLD:
            return CONF_THRESHOLD
        return min(value + 1, CONF_MAX)
    if value < CONF_THRESHOLD:
        return value + 1
    return CONF_THRESHOLD - 1


def confidence_classify(value: int) -> str:
    return HIGH if value >= CONF_THRESHOLD else LOW


def counter_to_probability(value: int) -> float:
    return 0.5 + 0.5 * (value / CONF_MAX)


class ConfidenceTable:
    def __init__(self, entries: int = 8192):
        _check_pow2("confidence entries", entries)
        self.entries = entries
        self.values = bytearray(entries)

    def index(self, pc: int) -> int:
        return (pc >> 2) & (self.entries - 1)

    def get(self, pc: int) -> int:
        return self.values[self.index(pc)]

    def update(self, pc: int, prediction_correct: bool) -> None:
        i = self.index(pc)
        self.values[i] = confidence_update(self.values[i], prediction_correct)


@dataclass
class ConfusionMatrix:
    hi_correct: int = 0
    hi_wrong: int = 0
    lo_correct: int = 0
    lo_wrong: int = 0

    def record(self, cls: str, correct: bool) -> None:
        if cls == HIGH:
            if correct:
                self.hi_correct += 1
            else:
                self.hi_wrong += 1
        elif cls == LOW:
            if correct:
                self.lo_correct += 1
            else:
                self.lo_wrong += 1
        else:
            raise ValueError(f"unknown confidence class {cls!r}")

    @property
    def total(self) -> int:
        return self.hi_correct + self.hi_wrong + self.lo_correct + self.lo_wrong


def oracle_predict(oracle, seq: int) -> tuple[bool, int]:
    """Perfect prediction from a captured BranchOracle; raises OracleMismatch
    for a seq that is not a conditional branch."""
    return oracle.predict(seq)
