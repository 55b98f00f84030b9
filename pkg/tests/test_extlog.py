import random

import pytest

from incll import layout as L
from incll.arena import PersistentArena, SimulatedCrash
from incll.extlog import CorruptLog, ExternalLog

LOG_OFF, LOG_BYTES = L.META_END, 4096
NODES = 0x2000


def make(log_bytes=LOG_BYTES, grow=None):
    a = PersistentArena(1 << 16)
    ExternalLog.format(a, LOG_OFF, log_bytes)
    for i in range(16):
        a.write_through(NODES + 256 * i, bytes([i + 1]) * 256)
    return a, ExternalLog(a, LOG_OFF, log_bytes, grow)


def node(i):
    return NODES + 256 * i


def scribble(a, addr, size, byte):
    a.store_block(addr, bytes([byte]) * size)


def test_log_node_fences_twice():
    a, lg = make()
    before = a.counters()
    lg.log_node(node(0), 192, epoch=3)
    after = a.counters()
    assert after["fences"] - before["fences"] == 2
    # image lines plus the entry header line, then entry and log header lines
    assert after["flushes"] - before["flushes"] == (64 + 192) // 64 + 2
    assert len(lg) == 1


def test_double_log_in_one_epoch_asserts():
    _, lg = make()
    lg.log_node(node(0), 64, 3)
    with pytest.raises(AssertionError):
        lg.log_node(node(0), 64, 3)


def test_replay_restores_image():
    a, lg = make()
    lg.log_node(node(2), 256, 5)
    scribble(a, node(2), 256, 0xEE)
    fresh = ExternalLog(a, LOG_OFF, LOG_BYTES)
    assert fresh.replay_all(4, 5) == 1
    assert a.mem[node(2) : node(2) + 256] == bytes([3]) * 256


def test_scan_filters_by_epoch_window():
    a, lg = make()
    lg.log_node(node(0), 64, 5)
    fresh = ExternalLog(a, LOG_OFF, LOG_BYTES)
    assert fresh.scan(5, 6) == []
    assert len(fresh.scan(4, 5)) == 1
    assert fresh.scan(4, 4) == []


def test_partial_entry_is_never_replayed():
    a0, lg0 = make()
    start = a0.store_seq
    lg0.log_node(node(1), 192, 5)
    total = a0.store_seq - start
    rng = random.Random(3)
    for n in range(total):
        a, lg = make()
        a.crash_after(n)
        with pytest.raises(SimulatedCrash):
            lg.log_node(node(1), 192, 5)
        for _ in range(30):
            img = PersistentArena.from_image(a.crash("random", rng))
            got = ExternalLog(img, LOG_OFF, LOG_BYTES).scan(4, 5)
            assert got == [] or (len(got) == 1 and got[0].image == bytes([2]) * 192)


def test_replay_order_and_worker_independence():
    a, lg = make()
    for i in range(10):
        lg.log_node(node(i), 256, 5)
    for i in range(10):
        scribble(a, node(i), 256, 0x80 + i)
    ref = a.clone()
    ExternalLog(ref, LOG_OFF, LOG_BYTES).replay_all(4, 5)
    entries = ExternalLog(a, LOG_OFF, LOG_BYTES).scan(4, 5)
    for order in (entries[::-1], random.Random(1).sample(entries, len(entries))):
        other = a.clone()
        for e in order:
            other.store_block(e.addr, e.image)
        assert other.mem == ref.mem
    for workers in (2, 8):
        other = a.clone()
        ExternalLog(other, LOG_OFF, LOG_BYTES).replay_all(4, 5, workers)
        assert other.mem == ref.mem
    again = ref.clone()
    ExternalLog(again, LOG_OFF, LOG_BYTES).replay_all(4, 5)
    assert again.mem == ref.mem


def test_earliest_image_wins_across_failed_epochs():
    a, lg = make()
    lg.log_node(node(0), 64, 5)
    scribble(a, node(0), 64, 0x55)
    # restart into epoch 6 after 5 failed; the chain keeps growing
    lg6 = ExternalLog(a, LOG_OFF, LOG_BYTES)
    assert len(lg6.scan(4, 5)) == 1
    lg6.log_node(node(0), 64, 6)
    scribble(a, node(0), 64, 0x66)
    ExternalLog(a, LOG_OFF, LOG_BYTES).replay_all(4, 6)
    assert a.mem[node(0) : node(0) + 64] == bytes([1]) * 64


def test_truncate():
    a, lg = make()
    f = a.counters()["fences"]
    lg.truncate(2)
    assert a.counters()["fences"] == f
    lg.log_node(node(0), 64, 2)
    lg.truncate(3)
    assert a.counters()["fences"] == f + 3 and len(lg) == 0
    assert ExternalLog(a, LOG_OFF, LOG_BYTES).scan(2, 3) == []
    # the new epoch's entries overwrite the old chain from the start
    lg.log_node(node(0), 64, 3)
    assert [e.epoch for e in ExternalLog(a, LOG_OFF, LOG_BYTES).scan(2, 3)] == [3]


def test_growth_links_segments():
    bump = [0x8000]

    def grow(n):
        bump[0] += n
        return bump[0] - n

    a, lg = make(log_bytes=512, grow=grow)
    for i in range(12):
        lg.log_node(node(i), 64, 7)
    assert lg.n_links > 0 and len(lg.segments) > 1
    found = ExternalLog(a, LOG_OFF, 512).scan(6, 7)
    assert [e.addr for e in found] == [node(i) for i in range(12)]


def test_full_log_without_growth():
    _, lg = make(log_bytes=256)
    with pytest.raises(MemoryError):
        for i in range(8):
            lg.log_node(node(i), 64, 7)


def test_corrupt_entry():
    a, _ = make()
    e = LOG_OFF
    a.store(e + L.LOGE_ADDR, 8, a.size)
    a.store(e + L.LOGE_SIZE, 8, 64)
    a.store(e + L.LOGE_COMMIT, 8, (L.LOG_MAGIC << 32) | 5)
    with pytest.raises(CorruptLog):
        ExternalLog(a, LOG_OFF, LOG_BYTES).scan(4, 5)
