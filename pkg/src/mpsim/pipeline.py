"""Cycle-level multi-path pipeline: fetch, dispatch/rename, issue, execute,
writeback, complete. Stages are evaluated back to front each cycle."""

from __future__ import annotations

import gc
import heapq
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields

from .fetch import (DIVIDED_EAGER, DYNAMIC_DEE, PERFECT_SINGLE, FetchPolicy,
                    allocate_fetch, select_fetch_pcs)
from .predictors import (BTB, ConfidenceTable, ConfusionMatrix, Gshare,
                         confidence_classify, counter_to_probability)
from .rename import RenameFile
from .threads import MERGED, ThreadTable
from .trace import (BRANCH_COND, BRANCH_UNCOND, FLOAT_SPECIAL, INSN_BYTES,
                    INT_ALU, LOAD, MUL_DIV, NUM_ARCH_REGS, STORE, BranchOracle,
                    TraceRecord, capture_branch_oracle)

UNIT_OF = {
    INT_ALU: "int_alu",
    BRANCH_COND: "branch",
    BRANCH_UNCOND: "branch",
    LOAD: "load_store",
    STORE: "load_store",
    MUL_DIV: "mul_div",
    FLOAT_SPECIAL: "float_special",
}
UNITS = ("int_alu", "branch", "load_store", "mul_div", "float_special")

# op stages
FETCHED, WINDOW, ISSUED, DONE = range(4)

# producer marker for the initial architectural state and for wrong-path writers
INITIAL = -1
WRONG_PATH = -2


class ConfigError(ValueError):
    pass


class SimulatorFault(RuntimeError):
    """Internal consistency violation inside a simulation run."""


@dataclass
class MachineConfig:
    policy: str = DYNAMIC_DEE
    fetch_width: int = 32
    target_ipc: int = 8
    max_branch_levels: int = 25
    window_size: int = 4096
    issue_width: int = 64
    writeback_width: int = 128
    complete_width: int = 128
    commit_width: int = 128
    int_alu_units: int = 40
    int_alu_latency: int = 1
    branch_units: int = 40
    branch_latency: int = 1
    load_store_units: int = 40
    load_store_latency: int = 2
    mul_div_units: int = 20
    mul_div_latency: int = 5
    float_special_units: int = 40
    float_special_latency: int = 3
    gshare_entries: int = 16384
    gshare_history_bits: int = 16
    btb_sets: int = 8192
    btb_ways: int = 16
    confidence_entries: int = 8192
    phys_tags: int = 8192
    frontend_depth: int = 1
    warmup_instructions: int = 0
    # 0 = everything after the warm-up window
    measure_instructions: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "policy":
                continue
            if f.name in ("warmup_instructions", "measure_instructions", "max_branch_levels",
                          "gshare_history_bits", "phys_tags"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be >= 0, got {v}")
            elif v < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {v}")
        try:
            self.fetch_policy()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def fetch_policy(self) -> FetchPolicy:
        return FetchPolicy(self.policy, self.fetch_width, self.target_ipc, self.max_branch_levels)

    def units(self) -> dict:
        return {u: getattr(self, f"{u}_units") for u in UNITS}

    def latencies(self) -> dict:
        return {u: getattr(self, f"{u}_latency") for u in UNITS}


@dataclass
class RunStats:
    label: str = ""
    policy: str = ""
    fetch_width: int = 0
    max_branch_levels: int = 0
    warmup_instructions: int = 0
    measure_instructions: int = 0
    cycles: int = 0
    committed_instructions: int = 0
    recoveries: int = 0
    recoveries_btb_miss: int = 0
    cond_branches: int = 0
    cond_mispredictions: int = 0
    btb_misses: int = 0
    # conditional branches predicted because the path sat at the level limit
    level_capped: int = 0
    confusion: dict = field(default_factory=lambda: asdict(ConfusionMatrix()))
    peak_active_threads: int = 0
    mean_active_threads: float = 0.0
    fetched_instructions: int = 0
    committed_total: int = 0
    squashed_instructions: int = 0
    inflight_at_end: int = 0
    rename_allocations: int = 0
    rename_stalls: int = 0
    window_stalls: int = 0
    free_tags_at_end: int = 0
    # static branch pc (hex) -> [executions, mispredictions]
    per_branch: dict = field(default_factory=dict)

    @property
    def confusion_matrix(self) -> ConfusionMatrix:
        return ConfusionMatrix(**self.confusion)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunStats":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunStats fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunStats":
        return cls.from_dict(json.loads(text))


def compute_ipc(stats: RunStats) -> float:
    if stats.cycles <= 0:
        raise ZeroDivisionError("IPC undefined for a run with zero cycles")
    return stats.committed_instructions / stats.cycles


class Op:
    __slots__ = ("fno", "seq", "rec", "entry", "unit", "lat", "fcycle", "state", "dead",
                 "pending", "consumers", "wb_cycle", "src_tags", "dst_events",
                 "fork_parent", "recover", "pred_ok", "conf_cls", "btb_miss", "capped")

    def __init__(self, fno, seq, rec, entry, unit_lat, fcycle):
        self.fno = fno
        self.seq = seq
        self.rec = rec
        self.entry = entry
        self.unit, self.lat = unit_lat
        self.fcycle = fcycle
        self.state = FETCHED
        self.dead = False
        self.pending = 0
        self.consumers = None
        self.wb_cycle = -1
        self.src_tags = ()
        self.dst_events = ()
        self.fork_parent = None
        self.recover = False
        self.pred_ok = True
        self.conf_cls = None
        self.btb_miss = False
        self.capped = False

    def __repr__(self):
        return f"Op(fno={self.fno}, seq={self.seq}, {self.rec.op}@{self.rec.pc:#x}, state={self.state})"


class _Cursor:
    """Per-path fetch state."""
    __slots__ = ("on_correct", "pos", "stall_until", "buffered", "ops")

    def __init__(self, on_correct, pos):
        self.on_correct = on_correct
        self.pos = pos
        self.stall_until = 0
        self.buffered = 0
        self.ops = deque()


class Machine:
    def __init__(self, trace: list[TraceRecord], oracle: BranchOracle | None = None,
                 config: MachineConfig | None = None, record_commits: bool = False,
                 label: str = ""):
        self.config = cfg = config or MachineConfig()
        cfg.validate()
        self.policy = cfg.fetch_policy()
        self.trace = trace
        self.label = label
        if len(trace) < 1:
            raise ConfigError("trace is empty")
        measure = cfg.measure_instructions or (len(trace) - cfg.warmup_instructions)
        if measure < 1 or cfg.warmup_instructions + measure > len(trace):
            raise ConfigError(f"trace has {len(trace)} instructions, fewer than warm-up "
                              f"{cfg.warmup_instructions} + measurement {measure}")
        self.warmup = cfg.warmup_instructions
        self.measure = measure
        self.end_seq = self.warmup + measure

        if self.policy.name == PERFECT_SINGLE and oracle is None:
            oracle = capture_branch_oracle(trace)
        self.oracle = oracle
        self.gshare = Gshare(cfg.gshare_entries, cfg.gshare_history_bits)
        self.btb = BTB(cfg.btb_sets, cfg.btb_ways)
        self.conf = ConfidenceTable(cfg.confidence_entries)
        self.table = ThreadTable(self.policy.max_branch_levels, root_pc=trace[0].pc)
        self.table.root.cursor = _Cursor(True, 0)
        self.rename = RenameFile(cfg.phys_tags)

        # static code image used to fetch down wrong paths
        self.image: dict[int, TraceRecord] = {}
        for r in trace:
            if r.pc not in self.image:
                self.image[r.pc] = r

        self._unit_cap = cfg.units()
        lat = cfg.latencies()
        self._unit_lat = {k: (u, lat[u]) for k, u in UNIT_OF.items()}
        self._buf_cap = 2 * cfg.fetch_width
        self._is_eager = self.policy.is_eager
        self._uses_conf = self.policy.uses_confidence

        self.cycle = 0
        self.fetch_q: deque[Op] = deque()
        self.ready: list = []
        self.exec_done: dict[int, list[Op]] = {}
        self.wb_backlog: list[Op] = []
        self.window = 0
        # indexed by tag: the in-flight writer (until writeback) and the trace
        # seq of the instruction that produced the tag's value
        self.producer: list[Op | None] = [None] * self.rename.total_tags
        self.tag_seq: list[int] = [INITIAL] * self.rename.total_tags
        self.correct_inflight: dict[int, Op] = {}
        self.next_commit = 0
        self.done = False
        self._fno = 0
        self._last_commit_cycle = 0
        self.record_commits = record_commits
        self.commit_log: list[tuple] = []

        self.stats = RunStats(label=label, policy=self.policy.name, fetch_width=cfg.fetch_width,
                              max_branch_levels=self.policy.max_branch_levels,
                              warmup_instructions=self.warmup, measure_instructions=measure)
        self._confusion = ConfusionMatrix()
        self._per_branch: dict[int, list] = {}
        self._start_cycle = 0 if self.warmup == 0 else None
        self._active_sum = 0
        self._measured_cycles = 0

    # ------------------------------------------------------------------ run
    def run(self) -> RunStats:
        # the run allocates millions of short-lived ops; frequent young-generation
        # collections cost more than a third of the run time
        saved = gc.get_threshold()
        gc.set_threshold(max(saved[0], 50_000), *saved[1:])
        try:
            while not self.done:
                self.step_cycle()
        finally:
            gc.set_threshold(*saved)
        return self.finish()

    def step_cycle(self) -> None:
        c = self.cycle
        self._commit(c)
        if self.done:
            self.cycle += 1
            return
        self._writeback(c)
        self._issue(c)
        self._dispatch(c)
        self._fetch(c)
        if self._start_cycle is not None:
            n = self.table.active_count
            self._active_sum += n
            self._measured_cycles += 1
            if n > self.stats.peak_active_threads:
                self.stats.peak_active_threads = n
        if c - self._last_commit_cycle > 100_000:
            raise SimulatorFault(f"no commit for 100000 cycles at cycle {c} (next seq {self.next_commit})")
        self.cycle += 1

    def finish(self) -> RunStats:
        s = self.stats
        s.confusion = asdict(self._confusion)
        s.per_branch = {f"{pc:#x}": list(v) for pc, v in sorted(self._per_branch.items())}
        s.mean_active_threads = self._active_sum / self._measured_cycles if self._measured_cycles else 0.0
        s.inflight_at_end = sum(1 for _ in self._live_ops())
        s.rename_allocations = self.rename.allocations
        s.free_tags_at_end = self.rename.free_count
        return s

    def _live_ops(self):
        seen = set()
        stack = [self.table.root]
        while stack:
            e = stack.pop()
            if e in seen:
                continue
            seen.add(e)
            yield from e.cursor.ops
            if e.children:
                stack.extend(e.children)
            if e.successor is not None:
                stack.append(e.successor)

    def committed_producers(self) -> list[int]:
        """Trace seq of the instruction whose value each architectural register
        holds (INITIAL if never written)."""
        return [self.tag_seq[t] for t in self.rename.committed]

    # --------------------------------------------------------------- commit
    def _commit(self, c: int) -> None:
        limit = min(self.config.commit_width, self.config.complete_width)
        n = 0
        st = self.stats
        while n < limit:
            op = self.correct_inflight.get(self.next_commit)
            if op is None or op.state != DONE or op.wb_cycle >= c:
                break
            del self.correct_inflight[self.next_commit]
            e = op.entry
            ops = e.cursor.ops
            if not ops or ops[0] is not op:
                raise SimulatorFault(f"commit of {op} is not the oldest op on its path")
            ops.popleft()
            for ev in op.dst_events:
                self.rename.commit_rename(ev)
            if self.record_commits:
                self.commit_log.append((op.seq, tuple(self.tag_seq[t] for t in op.src_tags)))
            self.window -= 1
            st.committed_total += 1
            if op.seq >= self.warmup:
                self._account(op)
            self.next_commit += 1
            n += 1
            if self.next_commit == self.warmup:
                self._start_cycle = c + 1
            if self.next_commit == self.end_seq:
                st.cycles = c + 1 - self._start_cycle
                self.done = True
                break
        if n:
            self._last_commit_cycle = c
            self._collect_root()

    def _account(self, op: Op) -> None:
        st = self.stats
        st.committed_instructions += 1
        rec = op.rec
        if rec.op == BRANCH_COND:
            st.cond_branches += 1
            pb = self._per_branch.get(rec.pc)
            if pb is None:
                pb = self._per_branch[rec.pc] = [0, 0]
            pb[0] += 1
            if not op.pred_ok:
                pb[1] += 1
                st.cond_mispredictions += 1
            if op.conf_cls is not None:
                self._confusion.record(op.conf_cls, op.pred_ok)
            if op.btb_miss:
                st.btb_misses += 1
            if op.capped:
                st.level_capped += 1
            if op.recover:
                st.recoveries += 1
                if op.btb_miss:
                    st.recoveries_btb_miss += 1

    def _collect_root(self) -> None:
        t = self.table
        root = t.root
        while root.status == MERGED and not root.cursor.ops:
            t.drop_root()
            self.rename.forget(root)
            root = t.root

    # ------------------------------------------------------------ writeback
    def _writeback(self, c: int) -> None:
        batch = self.exec_done.pop(c - 1, None)
        if self.wb_backlog:
            batch = self.wb_backlog + (batch or [])
            self.wb_backlog = []
        if not batch:
            return
        batch.sort(key=lambda o: o.fno)
        width = self.config.writeback_width
        n = 0
        producer = self.producer
        ready = self.ready
        for i, op in enumerate(batch):
            if op.dead:
                continue
            if n >= width:
                self.wb_backlog = [o for o in batch[i:] if not o.dead]
                break
            n += 1
            op.state = DONE
            op.wb_cycle = c
            for ev in op.dst_events:
                if producer[ev.tag] is op:
                    producer[ev.tag] = None
            if op.consumers:
                for cons in op.consumers:
                    if not cons.dead:
                        cons.pending -= 1
                        if cons.pending == 0:
                            heapq.heappush(ready, (cons.fno, cons))
                op.consumers = None
            if op.unit == "branch":
                self._resolve(op, c)

    def _resolve(self, op: Op, c: int) -> None:
        rec = op.rec
        if rec.op == BRANCH_COND:
            self.btb.insert(rec.pc, rec.target)
        if op.fork_parent is not None:
            if op.seq >= 0:
                actual = rec.taken
            else:
                # wrong-path branches have no ground truth; pick a fixed arm
                actual = bool((op.fno * 0x9E3779B1 >> 13) & 1)
            dead = self.table.resolve_entry(op.fork_parent, actual)
            self._kill_entries(dead)
        elif op.recover:
            self.recover(op, c)

    def recover(self, op: Op, c: int) -> None:
        """Squash everything younger than a wrong predicted branch on its path
        and redirect fetch to the correct successor."""
        e = op.entry
        self._kill_entries(self.table.rewind(e))
        cur = e.cursor
        ops = cur.ops
        fno = op.fno
        young = []
        while ops and ops[-1].fno > fno:
            young.append(ops.pop())
        self._squash(young)
        self.rename.truncate_after(e, op.fno)
        cur.on_correct = True
        cur.pos = op.seq + 1
        cur.stall_until = c + 1
        e.next_pc = op.rec.next_pc

    def _kill_entries(self, dead) -> None:
        for d in dead:
            self._squash(d.cursor.ops)
            d.cursor.ops.clear()
        self.rename.release_path_renames(dead)

    def _squash(self, ops) -> None:
        in_window = 0
        for op in ops:
            if op.seq >= 0:
                raise SimulatorFault(f"squash of correct-path {op}")
            op.dead = True
            if op.state == FETCHED:
                op.entry.cursor.buffered -= 1
            else:
                in_window += 1
        self.window -= in_window
        self.stats.squashed_instructions += len(ops)

    # ---------------------------------------------------------------- issue
    def _issue(self, c: int) -> None:
        ready = self.ready
        if not ready:
            return
        used = dict.fromkeys(UNITS, 0)
        cap = self._unit_cap
        width = self.config.issue_width
        issued = 0
        deferred = []
        exec_done = self.exec_done
        while ready and issued < width:
            item = heapq.heappop(ready)
            op = item[1]
            if op.dead:
                continue
            u = op.unit
            if used[u] >= cap[u]:
                deferred.append(item)
                continue
            used[u] += 1
            issued += 1
            op.state = ISSUED
            done = c + op.lat
            lst = exec_done.get(done)
            if lst is None:
                exec_done[done] = [op]
            else:
                lst.append(op)
        for item in deferred:
            heapq.heappush(ready, item)

    # ------------------------------------------------------------- dispatch
    def _dispatch(self, c: int) -> None:
        q = self.fetch_q
        if not q:
            return
        latest = c - self.config.frontend_depth
        room = self.config.window_size - self.window
        rename = self.rename
        rename_op = rename.rename_op
        free = rename.free
        producer = self.producer
        tag_seq = self.tag_seq
        ready = self.ready
        push = heapq.heappush
        moved = 0
        while q:
            op = q[0]
            if op.dead:
                q.popleft()
                continue
            if op.fcycle > latest:
                break
            if moved >= room:
                self.stats.window_stalls += 1
                break
            rec = op.rec
            dsts = rec.dsts
            if dsts and len(free) < len(dsts):
                self.stats.rename_stalls += 1
                break
            q.popleft()
            op.entry.cursor.buffered -= 1
            tags, evs = rename_op(op.entry, rec.srcs, dsts, op.fno)
            pending = 0
            for tag in tags:
                p = producer[tag]
                if p is not None:
                    if p.consumers is None:
                        p.consumers = [op]
                    else:
                        p.consumers.append(op)
                    pending += 1
            if evs:
                ps = op.seq if op.seq >= 0 else WRONG_PATH
                for ev in evs:
                    producer[ev.tag] = op
                    tag_seq[ev.tag] = ps
            op.src_tags = tags
            op.dst_events = evs
            op.state = WINDOW
            moved += 1
            if pending:
                op.pending = pending
            else:
                push(ready, (op.fno, op))
        self.window += moved

    # ---------------------------------------------------------------- fetch
    def _fetch(self, c: int) -> None:
        leaves = self.table.active_threads()
        if len(leaves) == 1:
            alloc = {leaves[0].path: self.policy.fetch_width}
        else:
            alloc = allocate_fetch(self.policy, [(e.path, e.confidence) for e in leaves])
        for path, _, n in select_fetch_pcs(alloc, _Snapshot(leaves)):
            self._fetch_thread(self.table.entry(path), n, c)

    def _phantom(self, pc: int) -> TraceRecord:
        # code never seen on the correct path: plain ALU ops falling straight through
        h = (pc >> 2) * 0x9E3779B1
        rec = TraceRecord(-1, pc, INT_ALU, ((h >> 7) & 31,), ((h >> 17) & 31,), False,
                          pc + INSN_BYTES, pc + INSN_BYTES)
        self.image[pc] = rec
        return rec

    def _fetch_thread(self, e, n: int, c: int) -> None:
        cur = e.cursor
        if cur.stall_until > c:
            return
        n = min(n, self._buf_cap - cur.buffered)
        if n <= 0:
            return
        trace = self.trace
        ntrace = len(trace)
        image = self.image
        unit_lat = self._unit_lat
        ops = cur.ops
        fetch_q = self.fetch_q
        inflight = self.correct_inflight
        fno = self._fno
        fetched = 0
        pc = e.next_pc
        while fetched < n:
            if cur.on_correct:
                seq = cur.pos
                if seq >= ntrace:
                    break
                rec = trace[seq]
                if rec.pc != pc:
                    raise SimulatorFault(f"correct path at {pc:#x} but trace seq {seq} is at {rec.pc:#x}")
                op = Op(fno, seq, rec, e, unit_lat[rec.op], c)
                inflight[seq] = op
            else:
                rec = image.get(pc) or self._phantom(pc)
                op = Op(fno, -1, rec, e, unit_lat[rec.op], c)
            fno += 1
            fetched += 1
            ops.append(op)
            fetch_q.append(op)
            kind = rec.op
            if kind == BRANCH_COND:
                forked = self._fetch_cond(op, e, cur)
                pc = e.next_pc
                if forked:
                    break
            elif kind == BRANCH_UNCOND:
                if cur.on_correct:
                    cur.pos += 1
                pc = rec.target
                if self.btb.lookup(rec.pc) is None:
                    # direct target becomes known at decode
                    self.btb.insert(rec.pc, pc)
                    cur.stall_until = c + self.config.frontend_depth + 1
                    break
            else:
                if cur.on_correct:
                    cur.pos += 1
                pc = rec.fallthrough
        e.next_pc = pc
        self._fno = fno
        cur.buffered += fetched
        self.stats.fetched_instructions += fetched

    def _fetch_cond(self, op: Op, e, cur) -> bool:
        """Handle a fetched conditional branch. Returns True when the path forked."""
        rec = op.rec
        pc = rec.pc
        if self.policy.name == PERFECT_SINGLE:
            taken, target = self.oracle.predict(op.seq)
            cur.pos += 1
            e.next_pc = target if taken else rec.fallthrough
            return False

        pred = self.gshare.predict(pc)
        conf_val = self.conf.get(pc)
        if cur.on_correct:
            op.pred_ok = pred == rec.taken
            if self._uses_conf:
                op.conf_cls = confidence_classify(conf_val)
            # predictors train in program order on the correct path
            self.gshare.update(pc, rec.taken)
            self.conf.update(pc, op.pred_ok)

        target = self.btb.lookup(pc)
        if target is None:
            op.btb_miss = True
            self._follow(op, e, cur, False, rec.fallthrough)
            return False

        if self._is_eager and len(e.path) < self.policy.max_branch_levels:
            if self.policy.name == DIVIDED_EAGER:
                taken_conf = 0.5
            else:
                p = counter_to_probability(conf_val)
                taken_conf = p if pred else 1.0 - p
            t, nt = self.table.fork_entry(e, pc, target, rec.fallthrough, taken_conf)
            if cur.on_correct:
                good, bad = (t, nt) if rec.taken else (nt, t)
                good.cursor = _Cursor(True, cur.pos + 1)
                bad.cursor = _Cursor(False, -1)
            else:
                t.cursor = _Cursor(False, -1)
                nt.cursor = _Cursor(False, -1)
            op.fork_parent = e
            return True

        if self._is_eager:
            op.capped = True
        self._follow(op, e, cur, pred, target if pred else rec.fallthrough)
        return False

    def _follow(self, op: Op, e, cur, taken: bool, next_pc: int) -> None:
        e.next_pc = next_pc
        if cur.on_correct:
            if taken != op.rec.taken:
                op.recover = True
                cur.on_correct = False
            else:
                cur.pos += 1


class _Snapshot:
    """Presents a fixed list of leaves to select_fetch_pcs."""

    def __init__(self, leaves):
        self._leaves = leaves

    def active_threads(self):
        return self._leaves


def run(trace: list[TraceRecord], oracle: BranchOracle | None = None,
        config: MachineConfig | None = None, label: str = "") -> RunStats:
    return Machine(trace, oracle, config, label=label).run()
