"""Dynamic instruction traces: records, a seeded synthetic generator, file I/O,
and the conditional-branch oracle used by the perfect-prediction mode."""

from __future__ import annotations

import io
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, TextIO

INT_ALU = "int_alu"
BRANCH_COND = "branch_cond"
BRANCH_UNCOND = "branch_uncond"
LOAD = "load"
STORE = "store"
MUL_DIV = "mul_div"
FLOAT_SPECIAL = "float_special"

OP_CLASSES = (INT_ALU, BRANCH_COND, BRANCH_UNCOND, LOAD, STORE, MUL_DIV, FLOAT_SPECIAL)
BRANCH_CLASSES = frozenset((BRANCH_COND, BRANCH_UNCOND))

NUM_ARCH_REGS = 32
MAX_DSTS = 2
MAX_SRCS = 3
INSN_BYTES = 4
CODE_BASE = 0x400000

HEADER = "#mpsim-trace-v1"


class TraceFormatError(ValueError):
    """A trace stream line could not be parsed."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class TraceValidationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class TraceRecord:
    seq: int
    pc: int
    op: str
    dsts: tuple[int, ...] = ()
    srcs: tuple[int, ...] = ()
    taken: bool = False
    target: int = 0
    fallthrough: int = 0

    @property
    def is_branch(self) -> bool:
        return self.op in BRANCH_CLASSES

    @property
    def next_pc(self) -> int:
        """pc of the successor on the realized path."""
        if self.op in BRANCH_CLASSES and self.taken:
            return self.target
        return self.fallthrough

    def validate(self) -> None:
        if self.op not in OP_CLASSES:
            raise TraceValidationError(f"seq {self.seq}: unknown op class {self.op!r}")
        if len(self.dsts) > MAX_DSTS or len(self.srcs) > MAX_SRCS:
            raise TraceValidationError(f"seq {self.seq}: too many register operands")
        for r in self.dsts + self.srcs:
            if not 0 <= r < NUM_ARCH_REGS:
                raise TraceValidationError(f"seq {self.seq}: register id {r} out of range [0, {NUM_ARCH_REGS - 1}]")
        if self.op == BRANCH_UNCOND and not self.taken:
            raise TraceValidationError(f"seq {self.seq}: unconditional branch must be taken")
        if self.op not in BRANCH_CLASSES and self.target != self.fallthrough:
            raise TraceValidationError(f"seq {self.seq}: non-branch with target != fallthrough")


# default weights over the non-branch classes; branches are governed by branch_fraction
DEFAULT_MIX = {INT_ALU: 0.5, LOAD: 0.2, STORE: 0.1, MUL_DIV: 0.08, FLOAT_SPECIAL: 0.12}


@dataclass
class TraceSpec:
    instruction_count: int = 100_000
    branch_fraction: float = 0.15
    hard_branch_fraction: float = 0.2
    biased_taken_probability: float = 0.9
    static_branch_count: int = 64
    op_class_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    seed: int = 1
    # probability that a source operand reads one of the last few written registers
    dependency_locality: float = 0.5

    def validate(self) -> None:
        for name in ("branch_fraction", "hard_branch_fraction", "biased_taken_probability", "dependency_locality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("instruction_count", "static_branch_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not self.op_class_mix:
            raise ValueError("op_class_mix must not be empty")
        for op, w in self.op_class_mix.items():
            if op not in OP_CLASSES or op in BRANCH_CLASSES:
                raise ValueError(f"op_class_mix: {op!r} is not a non-branch op class")
            if w < 0:
                raise ValueError(f"op_class_mix: weight for {op} is negative")
        if sum(self.op_class_mix.values()) <= 0:
            raise ValueError("op_class_mix weights sum to zero")


@dataclass(frozen=True)
class _Static:
    op: str
    dsts: tuple
    srcs: tuple
    target: int = 0
    fallthrough: int = 0
    taken_prob: float = 0.0


class _OperandPicker:
    """Chooses register operands, favouring recently written registers so the
    trace has dependence chains of realistic length."""

    def __init__(self, rng: random.Random, locality: float):
        self.rng = rng
        self.locality = locality
        self.recent: list[int] = []

    def dst(self) -> int:
        r = self.rng.randrange(NUM_ARCH_REGS)
        self.recent.append(r)
        if len(self.recent) > 4:
            self.recent.pop(0)
        return r

    def src(self) -> int:
        if self.recent and self.rng.random() < self.locality:
            return self.rng.choice(self.recent)
        return self.rng.randrange(NUM_ARCH_REGS)


def _body_insn(rng: random.Random, picker: _OperandPicker, classes, weights) -> _Static:
    op = rng.choices(classes, weights)[0]
    if op == STORE:
        srcs = (picker.src(), picker.src())
        return _Static(op, (), srcs)
    if op == LOAD:
        srcs = (picker.src(),)
        return _Static(op, (picker.dst(),), srcs)
    srcs = tuple(picker.src() for _ in range(rng.randint(1, 2)))
    return _Static(op, (picker.dst(),), srcs)


def _build_program(spec: TraceSpec, rng: random.Random) -> tuple[dict[int, _Static], int]:
    """Lay out a looping program of `static_branch_count` forward-skip hammocks.

    Site i is `body_i; branch_i; skip_i` where the branch's target skips the
    `skip_i` block and lands on site i+1; the last site loops back to site 0
    through an unconditional jump. Body lengths are balanced so the expected
    dynamic branch fraction equals `branch_fraction`.
    """
    classes = list(spec.op_class_mix)
    weights = [spec.op_class_mix[c] for c in classes]
    picker = _OperandPicker(rng, spec.dependency_locality)
    n_sites = spec.static_branch_count
    f = spec.branch_fraction

    probs = []
    for _ in range(n_sites):
        hard = rng.random() < spec.hard_branch_fraction
        probs.append(0.5 if hard else spec.biased_taken_probability)

    # expected non-branch instructions per site so that (n_sites + 1) branches
    # make up fraction f of every loop iteration
    per_site = ((n_sites + 1) / f - (n_sites + 1)) / n_sites
    shapes = []
    carry = 0.0
    for p in probs:
        skip = rng.randint(0, int(per_site)) if per_site >= 1 else 0
        want = per_site - skip * (1 - p) + carry
        body = max(0, round(want))
        carry = want - body
        shapes.append((body, skip))

    program: dict[int, _Static] = {}
    pc = CODE_BASE
    site_starts = []
    pending = None  # branch pc awaiting the next site's start as its target
    for (body, skip), p in zip(shapes, probs):
        site_starts.append(pc)
        if pending is not None:
            program[pending] = replace(program[pending], target=pc)
        for _ in range(body):
            program[pc] = _body_insn(rng, picker, classes, weights)
            pc += INSN_BYTES
        srcs = tuple(picker.src() for _ in range(rng.randint(1, 2)))
        program[pc] = _Static(BRANCH_COND, (), srcs, 0, pc + INSN_BYTES, p)
        pending = pc
        pc += INSN_BYTES
        for _ in range(skip):
            program[pc] = _body_insn(rng, picker, classes, weights)
            pc += INSN_BYTES
    # loop-back jump is the join point of the last site
    program[pending] = replace(program[pending], target=pc)
    program[pc] = _Static(BRANCH_UNCOND, (), (), site_starts[0], pc + INSN_BYTES, 1.0)
    return program, site_starts[0]


def generate_synthetic_trace(spec: TraceSpec) -> list[TraceRecord]:
    spec.validate()
    rng = random.Random(spec.seed)
    n = spec.instruction_count
    if spec.branch_fraction == 0.0:
        classes = list(spec.op_class_mix)
        weights = [spec.op_class_mix[c] for c in classes]
        picker = _OperandPicker(rng, spec.dependency_locality)
        out = []
        for i in range(n):
            s = _body_insn(rng, picker, classes, weights)
            pc = CODE_BASE + INSN_BYTES * i
            out.append(TraceRecord(i, pc, s.op, s.dsts, s.srcs, False, pc + INSN_BYTES, pc + INSN_BYTES))
        return out

    program, pc = _build_program(spec, rng)
    out = []
    for i in range(n):
        s = program[pc]
        if s.op == BRANCH_COND:
            taken = rng.random() < s.taken_prob
            rec = TraceRecord(i, pc, s.op, (), s.srcs, taken, s.target, s.fallthrough)
        elif s.op == BRANCH_UNCOND:
            rec = TraceRecord(i, pc, s.op, (), s.srcs, True, s.target, s.fallthrough)
        else:
            nxt = pc + INSN_BYTES
            rec = TraceRecord(i, pc, s.op, s.dsts, s.srcs, False, nxt, nxt)
        out.append(rec)
        pc = rec.next_pc
    return out


def _fmt_regs(regs) -> str:
    return ",".join(str(r) for r in regs) if regs else "-"


def write_trace(records: Iterable[TraceRecord], dest: TextIO | None = None) -> str | None:
    """Write records in the text format. Returns the text when `dest` is None."""
    buf = io.StringIO() if dest is None else dest
    buf.write(HEADER + "\n")
    for r in records:
        buf.write(f"{r.seq} {r.pc:#x} {r.op} {_fmt_regs(r.dsts)} {_fmt_regs(r.srcs)} "
                  f"{int(r.taken)} {r.target:#x} {r.fallthrough:#x}\n")
    if dest is None:
        return buf.getvalue()
    return None


def _parse_regs(tok: str, lineno: int) -> tuple[int, ...]:
    if tok == "-":
        return ()
    try:
        return tuple(int(x) for x in tok.split(","))
    except ValueError:
        raise TraceFormatError(lineno, f"bad register list {tok!r}") from None


def _parse_addr(tok: str, lineno: int) -> int:
    if not tok.startswith("0x"):
        raise TraceFormatError(lineno, f"address {tok!r} must be 0x-prefixed hex")
    try:
        return int(tok, 16)
    except ValueError:
        raise TraceFormatError(lineno, f"bad address {tok!r}") from None


def read_trace(source: TextIO | str) -> list[TraceRecord]:
    """Parse a trace stream (or its full text)."""
    lines = source.splitlines() if isinstance(source, str) else source
    records = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if lineno == 1:
            if line.strip() != HEADER:
                raise TraceFormatError(1, f"missing header {HEADER!r}")
            continue
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 8:
            raise TraceFormatError(lineno, f"expected 8 fields, got {len(toks)}")
        try:
            seq = int(toks[0])
        except ValueError:
            raise TraceFormatError(lineno, f"bad seq {toks[0]!r}") from None
        if seq != len(records):
            raise TraceFormatError(lineno, f"seq {seq} out of order (expected {len(records)})")
        if toks[2] not in OP_CLASSES:
            raise TraceFormatError(lineno, f"unknown op class {toks[2]!r}")
        if toks[5] not in ("0", "1"):
            raise TraceFormatError(lineno, f"taken flag must be 0 or 1, got {toks[5]!r}")
        rec = TraceRecord(seq, _parse_addr(toks[1], lineno), toks[2], _parse_regs(toks[3], lineno),
                          _parse_regs(toks[4], lineno), toks[5] == "1",
                          _parse_addr(toks[6], lineno), _parse_addr(toks[7], lineno))
        try:
            rec.validate()
        except TraceValidationError as e:
            raise TraceValidationError(f"line {lineno}: {e}") from None
        records.append(rec)
    if not records and not lines:
        raise TraceFormatError(1, "empty stream (no header)")
    return records


def check_coherent(records: list[TraceRecord]) -> None:
    for a, b in zip(records, records[1:]):
        if a.next_pc != b.pc:
            raise TraceValidationError(f"seq {a.seq}: successor pc {a.next_pc:#x} != next record pc {b.pc:#x}")


class OracleMismatch(KeyError):
    """Lookup of a sequence number that is not a conditional branch."""


class BranchOracle:
    """Ground-truth (taken, target) for every conditional branch occurrence."""

    def __init__(self, outcomes: dict[int, tuple[bool, int]]):
        self._outcomes = outcomes

    def __len__(self):
        return len(self._outcomes)

    def __contains__(self, seq):
        return seq in self._outcomes

    def __getitem__(self, seq) -> tuple[bool, int]:
        return self.predict(seq)

    def predict(self, seq: int) -> tuple[bool, int]:
        try:
            return self._outcomes[seq]
        except KeyError:
            raise OracleMismatch(f"seq {seq} is not a conditional branch in the captured trace") from None


def capture_branch_oracle(records: Iterable[TraceRecord]) -> BranchOracle:
    return BranchOracle({r.seq: (r.taken, r.target) for r in records if r.op == BRANCH_COND})


__all__ = [
    "TraceRecord", "TraceSpec", "BranchOracle", "OracleMismatch", "TraceFormatError",
    "TraceValidationError", "generate_synthetic_trace", "write_trace", "read_trace",
    "capture_branch_oracle", "check_coherent", "OP_CLASSES", "BRANCH_COND", "BRANCH_UNCOND",
    "INT_ALU", "LOAD", "STORE", "MUL_DIV", "FLOAT_SPECIAL", "NUM_ARCH_REGS",
]
