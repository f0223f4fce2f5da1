import pytest
from hypothesis import given, settings, strategies as st

from mpsim.fetch import POLICIES
from mpsim.pipeline import (ConfigError, Machine, MachineConfig, RunStats,
                            compute_ipc, run)
from mpsim.trace import (CODE_BASE, INSN_BYTES, INT_ALU, TraceRecord, TraceSpec,
                         generate_synthetic_trace)

from oracles import interpret


def straight_line(n, srcs=()):
    out = []
    for i in range(n):
        pc = CODE_BASE + i * INSN_BYTES
        out.append(TraceRecord(i, pc, INT_ALU, (i % 32,), srcs, False, pc + INSN_BYTES, pc + INSN_BYTES))
    return out


def small_trace(seed, n=2000, hard=0.3):
    return generate_synthetic_trace(TraceSpec(instruction_count=n, seed=seed, hard_branch_fraction=hard))


def test_single_instruction_pipeline_depth():
    # fetch, decode/dispatch, issue, execute, writeback, commit
    s = run(straight_line(1), config=MachineConfig(policy="gshare_single"))
    assert s.cycles == 6
    assert s.committed_instructions == 1


def test_independent_alu_stream_reaches_fetch_width():
    s = run(straight_line(10_000), config=MachineConfig(policy="gshare_single"))
    assert compute_ipc(s) >= 32 * 0.95


def test_serial_chain_issues_every_other_cycle():
    # a result is visible to consumers the cycle after its writeback
    trace = [TraceRecord(i, CODE_BASE + 4 * i, INT_ALU, (1,), (1,), False,
                         CODE_BASE + 4 * i + 4, CODE_BASE + 4 * i + 4) for i in range(2000)]
    s = run(trace, config=MachineConfig(policy="gshare_single"))
    assert s.cycles == 2 * 2000 + 4


def test_fully_biased_branches_are_learned():
    tr = generate_synthetic_trace(TraceSpec(instruction_count=20_000, hard_branch_fraction=0.0,
                                            biased_taken_probability=1.0, seed=3))
    s = run(tr, config=MachineConfig(policy="gshare_single", warmup_instructions=5000))
    assert s.cond_branches > 1000
    assert s.cond_mispredictions / s.cond_branches < 0.01


def test_mispredictions_cause_recoveries_and_squashes():
    s = run(small_trace(1, 5000, hard=0.5), config=MachineConfig(policy="gshare_single"))
    assert s.recoveries > 0
    assert s.squashed_instructions > 0
    assert s.recoveries >= s.cond_mispredictions - s.level_capped


def test_perfect_mode_never_recovers_on_conditionals():
    s = run(small_trace(2, 5000, hard=0.5), config=MachineConfig(policy="perfect_single"))
    assert s.cond_mispredictions == 0
    assert s.recoveries == s.recoveries_btb_miss


def test_short_trace_is_config_error():
    with pytest.raises(ConfigError):
        Machine(straight_line(100), config=MachineConfig(warmup_instructions=80, measure_instructions=50))
    with pytest.raises(ConfigError):
        Machine([], config=MachineConfig())


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        MachineConfig(fetch_width=0).validate()
    with pytest.raises(ConfigError):
        MachineConfig(policy="bogus").validate()


def test_compute_ipc():
    assert compute_ipc(RunStats(committed_instructions=300, cycles=200)) == 1.5
    with pytest.raises(ZeroDivisionError):
        compute_ipc(RunStats(committed_instructions=5, cycles=0))


def test_measurement_window_counts_only_measured_instructions():
    s = run(small_trace(4, 4000), config=MachineConfig(policy="dynamic_dee", warmup_instructions=1000,
                                                     measure_instructions=2000))
    assert s.committed_instructions == 2000
    assert s.warmup_instructions == 1000


def test_run_is_deterministic():
    tr = small_trace(5)
    a = run(tr, config=MachineConfig(policy="dee"))
    b = run(tr, config=MachineConfig(policy="dee"))
    assert a.to_json() == b.to_json()


def test_runstats_json_round_trip():
    s = run(small_trace(6, 1000), config=MachineConfig(policy="selective_dee"), label="x")
    assert RunStats.from_json(s.to_json()) == s
    with pytest.raises(ValueError):
        RunStats.from_dict({"cycles": 1, "bogus": 2})


def test_tiny_tag_pool_stalls_but_finishes():
    tr = small_trace(7, 1500)
    s = run(tr, config=MachineConfig(policy="dynamic_dee", phys_tags=8))
    assert s.committed_instructions == 1500
    assert s.rename_stalls > 0


@pytest.mark.parametrize("policy", POLICIES)
def test_commit_order_and_values_match_interpreter(policy):
    tr = small_trace(8, 3000, hard=0.4)
    m = Machine(tr, config=MachineConfig(policy=policy), record_commits=True)
    s = m.run()
    log, last = interpret(tr)
    assert m.commit_log == log
    assert m.committed_producers() == last
    assert s.fetched_instructions == s.committed_total + s.squashed_instructions + s.inflight_at_end
    # no tag leaked: every tag is free, architecturally mapped or still in flight
    assert s.free_tags_at_end + 32 + m.rename.live_events == m.rename.total_tags


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), policy=st.sampled_from(POLICIES),
       levels=st.integers(1, 6), width=st.sampled_from([4, 8, 32]))
def test_invariants_on_random_configs(seed, policy, levels, width):
    tr = small_trace(seed, 800, hard=0.5)
    cfg = MachineConfig(policy=policy, max_branch_levels=levels, fetch_width=width, target_ipc=min(8, width))
    m = Machine(tr, config=cfg, record_commits=True)
    s = m.run()
    assert m.commit_log == interpret(tr)[0]
    assert s.committed_instructions == 800
    # a tree with L fork levels has at most 2**L leaves
    assert s.peak_active_threads <= 2 ** levels
    assert compute_ipc(s) <= width
