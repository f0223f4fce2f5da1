import random

import pytest

from mpsim.rename import RenameConsistencyError, RenameFile, RenameStall
from mpsim.threads import ThreadTable

from oracles import LinearRename


def chain_of(e):
    out = set()
    while e is not None:
        out.add(e)
        e = e.parent
    return out


def test_first_write_leaves_committed_map():
    t = ThreadTable()
    rf = RenameFile()
    ev = rf.rename_dest(t.root, 12)
    assert ev.tag >= 32
    assert rf.committed[12] == 12
    assert rf.lookup_src(t.root, 12) == ev.tag


def test_two_writes_on_one_path():
    t = ThreadTable()
    rf = RenameFile()
    a = rf.rename_dest(t.root, 12)
    b = rf.rename_dest(t.root, 12)
    assert a.tag != b.tag and a.order < b.order
    assert rf.lookup_src(t.root, 12) == b.tag


def test_root_rename_visible_to_all_descendants():
    t = ThreadTable()
    rf = RenameFile()
    ev = rf.rename_dest(t.root, 12)
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    t.fork((1,), 0x20, 0x40, 0x24, 0.5)
    t.fork((0,), 0x14, 0x40, 0x18, 0.5)
    assert rf.lookup_src(t.entry((1, 0)), 12) == ev.tag
    assert rf.lookup_src(t.entry((0, 1)), 12) == ev.tag


def test_ancestor_rename_invisible_to_non_descendant():
    t = ThreadTable()
    rf = RenameFile()
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    one = t.entry((1,))
    ev = rf.rename_dest(one, 12)
    t.fork((1,), 0x20, 0x40, 0x24, 0.5)
    assert rf.lookup_src(t.entry((1, 0)), 12) == ev.tag
    assert rf.lookup_src(t.entry((0,)), 12) == rf.committed[12]


def test_rename_on_invalidated_path_rejected():
    t = ThreadTable()
    rf = RenameFile()
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    loser = t.entry((0,))
    t.resolve_branch((), True)
    with pytest.raises(RenameConsistencyError):
        rf.rename_dest(loser, 3)


def test_pool_exhaustion_is_a_stall():
    t = ThreadTable()
    rf = RenameFile(phys_tags=2)
    rf.rename_dest(t.root, 1)
    rf.rename_dest(t.root, 2)
    assert not rf.can_allocate(1)
    with pytest.raises(RenameStall):
        rf.rename_dest(t.root, 3)


def test_release_frees_tags_and_spares_sibling():
    t = ThreadTable()
    rf = RenameFile(phys_tags=16)
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    keep = t.entry((1,))
    k = rf.rename_dest(keep, 4)
    gone = t.entry((0,))
    for r in (4, 5, 6):
        rf.rename_dest(gone, r)
    free = rf.free_count
    dead = t.resolve_branch((), True)
    assert rf.release_path_renames(dead) == 3
    assert rf.free_count == free + 3
    assert rf.lookup_src(keep, 4) == k.tag
    assert rf.release_path_renames([t.root]) == 0


def test_commit_updates_map_and_frees_old():
    t = ThreadTable()
    rf = RenameFile(phys_tags=4)
    a = rf.rename_dest(t.root, 5)
    b = rf.rename_dest(t.root, 5)
    assert rf.commit_rename(a) == 5
    assert rf.committed[5] == a.tag
    rf.commit_rename(b)
    assert rf.committed[5] == b.tag
    assert a.tag in rf.free


def test_commit_out_of_order_and_invalidated():
    t = ThreadTable()
    rf = RenameFile()
    rf.rename_dest(t.root, 1)
    b = rf.rename_dest(t.root, 2)
    with pytest.raises(RenameConsistencyError):
        rf.commit_rename(b)
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    ev = rf.rename_dest(t.entry((0,)), 3)
    t.resolve_branch((), True)
    with pytest.raises(RenameConsistencyError):
        rf.commit_rename(ev)


def test_truncate_restores_previous_mapping():
    t = ThreadTable()
    rf = RenameFile()
    a = rf.rename_dest(t.root, 7, order=10)
    rf.rename_dest(t.root, 7, order=20)
    rf.rename_dest(t.root, 8, order=30)
    assert rf.truncate_after(t.root, 10) == 2
    assert rf.lookup_src(t.root, 7) == a.tag
    assert rf.lookup_src(t.root, 8) == rf.committed[8]


def test_single_path_matches_naive_map():
    rng = random.Random(1)
    t = ThreadTable()
    rf = RenameFile(phys_tags=100_000)
    naive = list(range(32))
    for _ in range(5000):
        r = rng.randrange(32)
        if rng.random() < 0.5:
            naive[r] = rf.rename_dest(t.root, r).tag
        else:
            assert rf.lookup_src(t.root, r) == naive[r]


def run_random_tree(seed):
    """Random fork tree, at most 4 levels and 200 instructions; every source
    lookup is checked against the linearized-ancestor oracle."""
    rng = random.Random(seed)
    t = ThreadTable(max_branch_levels=4)
    rf = RenameFile(phys_tags=4096)
    oracle = LinearRename()
    checks = 0
    for _ in range(rng.randint(20, 200)):
        leaves = t.active_threads()
        e = rng.choice(leaves)
        roll = rng.random()
        if roll < 0.1 and len(e.path) < 4:
            t.fork(e.path, 0x10, 0x20, 0x14, 0.5)
        elif roll < 0.15 and t.fork_points():
            fp = rng.choice(t.fork_points())
            dead = t.resolve_branch(fp, rng.random() < 0.5)
            rf.release_path_renames(dead)
            oracle.events = [ev for ev in oracle.events if ev[0] not in set(dead)]
        elif roll < 0.6:
            r = rng.randrange(32)
            ev = rf.rename_dest(e, r)
            oracle.rename(e, r, ev.tag)
        else:
            r = rng.randrange(32)
            assert rf.lookup_src(e, r) == oracle.lookup(e, chain_of(e), r)
            checks += 1
    for e in t.active_threads():
        for r in range(32):
            assert rf.lookup_src(e, r) == oracle.lookup(e, chain_of(e), r)
            checks += 1
    return checks


@pytest.mark.parametrize("seed", range(20))
def test_random_trees_match_linear_oracle(seed):
    assert run_random_tree(seed) > 0


def test_no_tag_leak_after_release_and_commit():
    t = ThreadTable()
    rf = RenameFile(phys_tags=64)
    evs = [rf.rename_dest(t.root, r % 32) for r in range(40)]
    t.fork((), 0x10, 0x20, 0x14, 0.5)
    for r in range(5):
        rf.rename_dest(t.entry((0,)), r)
    rf.release_path_renames(t.resolve_branch((), True))
    for ev in evs:
        rf.commit_rename(ev)
    # everything except the tags held by the committed map is free
    assert rf.free_count == rf.total_tags - 32
    assert len(set(rf.free) | set(rf.committed)) == rf.total_tags
