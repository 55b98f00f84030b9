import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incll.arena import (
    ArenaFault,
    ExhaustiveSpaceTooLarge,
    PersistentArena,
    SimulatedCrash,
    load_snapshot,
)


class NaivePCSO:
    """Independent model: full per-line store logs, floors from flush/fence."""

    def __init__(self, size):
        self.size = size
        self.log = {}  # line -> [(addr, width, value)]
        self.floor = {}
        self.pending_flush = {}

    def store(self, addr, width, value):
        self.log.setdefault(addr // 64, []).append((addr, width, value))

    def flush(self, line):
        self.pending_flush[line] = len(self.log.get(line, []))

    def fence(self):
        for line, n in self.pending_flush.items():
            self.floor[line] = max(self.floor.get(line, 0), n)
        self.pending_flush.clear()

    def global_flush(self):
        for line, entries in self.log.items():
            self.floor[line] = len(entries)
        self.pending_flush.clear()

    def images(self):
        lines = sorted(self.log)
        choices = [range(self.floor.get(ln, 0), len(self.log[ln]) + 1) for ln in lines]
        out = set()
        for combo in itertools.product(*choices):
            img = bytearray(self.size)
            for ln, k in zip(lines, combo):
                for addr, width, value in self.log[ln][:k]:
                    img[addr : addr + width] = value.to_bytes(width, "little")
            out.add(bytes(img))
        return out


def test_read_your_write():
    a = PersistentArena(128)
    a.store(0, 8, 7)
    assert a.load(0, 8) == 7


def test_prefix_rule_same_line():
    a = PersistentArena(128)
    a.store(0, 8, 1)
    a.store(8, 8, 2)
    img = a.image({0: 1})
    assert img.data[0] == 1 and img.data[8] == 0


def test_cross_line_store_can_persist_out_of_order():
    a = PersistentArena(128)
    a.store(0, 8, 0xA)  # line 0
    a.store(64, 8, 0xB)  # line 1
    images = {bytes(i.data) for i in a.crash_images()}
    assert any(img[0] == 0 and img[64] == 0xB for img in images)


def test_flush_then_fence_sets_cutoff():
    a = PersistentArena(128)
    a.store(0, 8, 1)
    a.store(8, 8, 2)
    a.flush(0)
    a.fence()
    assert a.fenced_cutoff(0) == 2
    assert a.crash("exhaustive") and len(a.crash("exhaustive")) == 1


def test_flush_without_fence_guarantees_nothing():
    a = PersistentArena(128)
    a.store(0, 8, 1)
    a.flush(0)
    assert {i.data[0] for i in a.crash_images()} == {0, 1}


def test_store_after_flush_not_covered_by_fence():
    a = PersistentArena(128)
    a.store(0, 8, 1)
    a.flush(0)
    a.store(8, 8, 2)
    a.fence()
    images = [(i.data[0], i.data[8]) for i in a.crash_images()]
    assert sorted(images) == [(1, 0), (1, 2)]


def test_fence_without_flush_changes_nothing():
    a = PersistentArena(128)
    a.store(0, 8, 1)
    a.fence()
    assert a.fenced_cutoff(0) == 0
    assert len(a.crash("exhaustive")) == 2


def test_flush_two_lines_one_fence():
    a = PersistentArena(256)
    a.store(0, 8, 1)
    a.store(64, 8, 1)
    a.flush(0)
    a.flush(1)
    a.fence()
    assert a.fenced_cutoff(0) == a.fenced_cutoff(1) == 1


def test_global_flush():
    a = PersistentArena(256)
    assert a.global_flush() == 0
    a.store(0, 8, 5)
    a.store(8, 8, 6)
    a.store(128, 4, 7)
    dirty = sum(1 for ln in range(4) if a.store_count(ln) > a.fenced_cutoff(ln))
    assert a.global_flush() == dirty == 2
    images = a.crash("exhaustive")
    assert len(images) == 1 and images[0].data == a.mem


def test_release_order_same_line_vs_cross_line():
    a = PersistentArena(256)
    a.store_ordered([(0, 8, 1), (8, 8, 2)])  # X then W, same line
    for img in a.crash_images():
        assert not (img.data[8] == 2 and img.data[0] != 1)
    b = PersistentArena(256)
    b.store_ordered([(0, 8, 1), (64, 8, 2)])  # X then W, different lines
    assert any(i.data[64] == 2 and i.data[0] == 0 for i in b.crash_images())


def test_exhaustive_counts():
    a = PersistentArena(256)
    for v in (1, 2, 3):
        a.store(0, 8, v)
    assert len(a.crash("exhaustive")) == 4
    b = PersistentArena(256)
    for v in (1, 2):
        b.store(0, 8, v)
        b.store(64, 8, v)
    assert b.exhaustive_space() == 9
    assert len({bytes(i.data) for i in b.crash_images()}) == 9


def test_exhaustive_bound():
    a = PersistentArena(64 * 20, exhaustive_bound=100)
    for ln in range(20):
        a.store(ln * 64, 8, 1)
    with pytest.raises(ExhaustiveSpaceTooLarge):
        a.crash("exhaustive")


def test_adversarial_picks_floor_or_full():
    a = PersistentArena(64 * 8)
    for ln in range(8):
        a.flush(ln)
        for v in (1, 2, 3):
            a.store(ln * 64, 8, v)
    for seed in range(20):
        img = a.crash("adversarial", seed)
        assert set(img.cutoffs.values()) <= {0, 3}


def test_counters_scripted():
    a = PersistentArena(256)
    a.store(0, 8, 1)
    a.flush(0)
    a.fence()
    assert a.counters() == {"stores": 1, "flushes": 1, "fences": 1, "globalFlushes": 0, "dirtyLinesAtLastGlobalFlush": 0}
    a.store(64, 8, 1)
    a.store(128, 8, 1)
    a.store(136, 8, 1)
    a.global_flush()
    assert a.counters() == {"stores": 4, "flushes": 1, "fences": 1, "globalFlushes": 1, "dirtyLinesAtLastGlobalFlush": 2}
    a.flush(0)
    a.flush(1)
    a.fence()
    a.fence()
    a.store_block(0, bytes(24))
    assert a.counters() == {"stores": 7, "flushes": 3, "fences": 3, "globalFlushes": 1, "dirtyLinesAtLastGlobalFlush": 2}


def test_faults():
    a = PersistentArena(128)
    with pytest.raises(ArenaFault):
        a.store(4, 8, 1)
    with pytest.raises(ArenaFault):
        a.store(128, 1, 1)
    with pytest.raises(ArenaFault):
        a.store(0, 3, 1)
    with pytest.raises(ValueError):
        PersistentArena(100)


def test_crash_after_stops_before_the_store():
    a = PersistentArena(128)
    a.crash_after(2)
    a.store(0, 8, 1)
    a.store(8, 8, 2)
    with pytest.raises(SimulatedCrash):
        a.store(16, 8, 3)
    assert a.crashed and a.load(16, 8) == 0


def test_snapshot_roundtrip(tmp_path):
    a = PersistentArena(256)
    a.store(0, 8, 0xDEAD)
    with pytest.raises(ArenaFault):
        a.save(tmp_path / "x")
    a.global_flush()
    a.save(tmp_path / "x")
    raw = (tmp_path / "x").read_bytes()
    assert raw[:4] == b"PCSO" and int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:16], "little") == 256
    b = PersistentArena.open(tmp_path / "x")
    assert b.load(0, 8) == 0xDEAD
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_snapshot(tmp_path / "bad")


def test_write_through_refuses_dirty_lines():
    a = PersistentArena(256)
    a.store(0, 8, 1)
    with pytest.raises(ArenaFault):
        a.write_through(8, bytes(8))
    a.write_through(64, b"\x01" * 8)
    assert a.crash("exhaustive")[0].data[64] == 1


script = st.lists(
    st.one_of(
        st.tuples(st.just("store"), st.integers(0, 11), st.sampled_from([1, 2, 4, 8]), st.integers(0, 255)),
        st.tuples(st.just("flush"), st.integers(0, 2)),
        st.tuples(st.just("fence")),
        st.tuples(st.just("global")),
    ),
    max_size=14,
)


@settings(max_examples=150, deadline=None)
@given(script)
def test_images_match_naive_model(ops):
    size = 192
    a, m = PersistentArena(size), NaivePCSO(size)
    for op in ops:
        if op[0] == "store":
            _, slot, width, v = op
            addr = (slot * 16) % size // width * width
            a.store(addr, width, v)
            m.store(addr, width, v)
        elif op[0] == "flush":
            a.flush(op[1])
            m.flush(op[1])
        elif op[0] == "fence":
            a.fence()
            m.fence()
        else:
            a.global_flush()
            m.global_flush()
    got = [bytes(i.data) for i in a.crash_images()]
    assert len(got) == a.exhaustive_space()
    assert set(got) <= m.images()
    # distinct cutoff choices can produce identical bytes; compare as sets
    assert set(got) == m.images()
    for img in a.crash_images():
        for line, k in img.cutoffs.items():
            assert k >= a.fenced_cutoff(line)


def test_random_strategy_is_seeded():
    a = PersistentArena(64 * 4)
    for ln in range(4):
        for v in range(5):
            a.store(ln * 64, 8, v)
    assert a.crash("random", 3).cutoffs == a.crash("random", random.Random(3)).cutoffs
