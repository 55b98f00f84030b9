import pytest

from incll import layout as L
from incll.arena import PersistentArena
from incll.epoch import EpochManager, UnrecoverableStore


def fresh():
    a = PersistentArena(4096)
    EpochManager.format(a)
    return a, EpochManager(a)


def reopen(arena: PersistentArena) -> EpochManager:
    """Open the durable state only (what survives a crash at a quiescent point)."""
    return EpochManager(PersistentArena.from_bytes(arena.persisted_bytes()))


def test_format_starts_at_one():
    _, em = fresh()
    assert em.current() == 1 and em.state.last_completed == 0 and em.state.failed == set()


def test_advance_persists_index():
    a, em = fresh()
    assert em.advance() == 2
    assert em.advance() == 3
    again = reopen(a)
    assert again.current() == 3 and again.state.last_completed == 2


def test_advance_order():
    a, em = fresh()
    seen = []

    def before():
        seen.append(("before", a.counters()["globalFlushes"]))

    def truncate(new):
        seen.append(("truncate", reopen(a).current(), new))

    em.advance(before_flush=before, truncate=truncate)
    assert seen == [("before", 0), ("truncate", 2, 2)]


def advance_to(em, n):
    while em.current() < n:
        em.advance()


def test_restart_marks_interrupted_epoch_failed():
    a, em = fresh()
    advance_to(em, 7)
    crashed = reopen(a)
    fences = crashed.arena.counters()["fences"]
    st = crashed.mark_failed_and_resume()
    assert 7 in st.failed and st.cur == 8 and st.first_exec == 8
    assert crashed.arena.counters()["fences"] - fences == 2
    assert crashed.arena.counters()["globalFlushes"] == 0


def test_two_successive_crashes():
    a, em = fresh()
    advance_to(em, 7)
    first = reopen(a)
    first.mark_failed_and_resume()
    second = reopen(first.arena)
    st = second.mark_failed_and_resume()
    assert st.failed == {7, 8} and st.cur == 9 and st.last_completed == 6


def test_every_image_of_a_slot_write_is_old_or_new():
    a, em = fresh()
    advance_to(em, 4)
    states = []

    def hook(arena):
        if not states:
            for img in arena.crash_images():
                states.append(EpochManager(PersistentArena.from_image(img)).current())

    a.fence_hook = hook
    em.advance()
    assert set(states) == {4, 5}
    assert len(states) == 4  # three stores on one line


def test_both_slots_corrupt():
    a, _ = fresh()
    a.mem[L.EPOCH_BLOCK + 16] ^= 0xFF
    a.mem[L.EPOCH_BLOCK + 48] ^= 0xFF
    with pytest.raises(UnrecoverableStore):
        EpochManager(a)


def test_full_failed_array_requests_full_pass():
    a = PersistentArena(4096)
    EpochManager.format(a)
    arena = a
    for _ in range(2):
        em = EpochManager(arena, capacity=2)
        assert not em.mark_failed_and_resume().needs_full_pass
        arena = em.arena
    em = EpochManager(arena, capacity=2)
    fences = arena.counters()["fences"]
    st = em.mark_failed_and_resume()
    assert st.needs_full_pass and st.failed == {1, 2, 3} and st.cur == 4
    assert arena.counters()["fences"] == fences
    em.finish_full_pass()
    after = EpochManager(arena, capacity=2)
    assert after.current() == 4 and after.state.last_completed == 3 and after.state.failed == set()


def test_capacity_bounds():
    a, _ = fresh()
    with pytest.raises(ValueError):
        EpochManager(a, capacity=0)
    with pytest.raises(ValueError):
        EpochManager(a, capacity=L.FAILED_CAPACITY + 1)
