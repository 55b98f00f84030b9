"""Durable epoch index and failed-epoch set.

The epoch block is one cache line holding two 32-byte slots.  Updates go to
the inactive slot with a higher sequence number and a trailing crc32, so a
torn slot is simply ignored and the other slot still describes a valid
state.  Failed epochs live in a fixed u32 array; an entry only counts once a
later slot update includes it in ``failedCount``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

from incll import layout as L
from incll.arena import LINE_SHIFT, PersistentArena
from incll.codec import EPOCH_LIMIT

_SLOT = struct.Struct("<IIII")

FIRST_EPOCH = 1


class UnrecoverableStore(Exception):
    """Both epoch slots are invalid or the superblock is missing."""


@dataclass
class EpochState:
    cur: int
    last_completed: int
    failed: set[int] = field(default_factory=set)
    first_exec: int = FIRST_EPOCH
    needs_full_pass: bool = False


def _slot_bytes(seq: int, cur: int, completed: int, nfailed: int) -> bytes:
    head = _SLOT.pack(seq, cur, completed, nfailed)
    return head + struct.pack("<I", zlib.crc32(head)) + bytes(12)


class EpochManager:
    """Owns the epoch block and the failed-epoch array of one arena."""

    def __init__(self, arena: PersistentArena, capacity: int = L.FAILED_CAPACITY):
        if not 1 <= capacity <= L.FAILED_CAPACITY:
            raise ValueError(f"failed-epoch capacity must be in 1..{L.FAILED_CAPACITY}")
        self.arena = arena
        self.capacity = capacity
        seq, cur, completed, nfailed, slot = self._read_block()
        self._seq = seq
        self._slot = slot
        self.state = EpochState(cur, completed, self._read_failed(nfailed), first_exec=cur)

    @staticmethod
    def format(arena: PersistentArena) -> None:
        block = _slot_bytes(1, FIRST_EPOCH, FIRST_EPOCH - 1, 0) + bytes(L.EPOCH_SLOT_SIZE)
        arena.write_through(L.EPOCH_BLOCK, block)
        arena.write_through(L.FAILED_ARRAY, bytes(4 * L.FAILED_CAPACITY))

    def _read_block(self) -> tuple[int, int, int, int, int]:
        best = None
        mem = self.arena.mem
        for slot in (0, 1):
            off = L.EPOCH_BLOCK + slot * L.EPOCH_SLOT_SIZE
            head = bytes(mem[off : off + 16])
            (crc,) = struct.unpack_from("<I", mem, off + L.EPOCH_SLOT_CRC)
            if zlib.crc32(head) != crc:
                continue
            seq, cur, completed, nfailed = _SLOT.unpack(head)
            if nfailed > L.FAILED_CAPACITY or cur == 0:
                continue
            if best is None or seq > best[0]:
                best = (seq, cur, completed, nfailed, slot)
        if best is None:
            raise UnrecoverableStore("both epoch block slots are invalid")
        return best

    def _read_failed(self, n: int) -> set[int]:
        return set(struct.unpack_from(f"<{n}I", self.arena.mem, L.FAILED_ARRAY)) if n else set()

    @property
    def nfailed_durable(self) -> int:
        return self._read_block()[3]

    def current(self) -> int:
        return self.state.cur

    def _write_slot(self, cur: int, completed: int, nfailed: int) -> None:
        """Durably publish a new block state (flush + fence, slow path only)."""
        slot = 1 - self._slot
        off = L.EPOCH_BLOCK + slot * L.EPOCH_SLOT_SIZE
        data = _slot_bytes(self._seq + 1, cur, completed, nfailed)
        # crc word goes last; a torn slot fails its checksum
        self.arena.store(off, 8, int.from_bytes(data[0:8], "little"))
        self.arena.store(off + 8, 8, int.from_bytes(data[8:16], "little"))
        self.arena.store(off + 16, 8, int.from_bytes(data[16:24], "little"))
        self.arena.flush(off >> LINE_SHIFT)
        self.arena.fence()
        self._seq += 1
        self._slot = slot

    def advance(self, before_flush: Callable[[], None] | None = None, truncate: Callable[[int], None] | None = None) -> int:
        """Close the current epoch at a quiescent point.

        Order: closing-epoch work (``before_flush``), global flush, durable
        epoch index, then log truncation.  A crash anywhere before the index
        is durable rolls back the whole closing epoch.
        """
        st = self.state
        if before_flush is not None:
            before_flush()
        self.arena.global_flush()
        new = st.cur + 1
        if new >= EPOCH_LIMIT:
            raise OverflowError("32-bit epoch index wrapped")
        self._write_slot(new, st.cur, len(self._durable_failed_list()))
        st.last_completed = st.cur
        st.cur = new
        if truncate is not None:
            truncate(new)
        return new

    def _durable_failed_list(self) -> list[int]:
        n = self._read_block()[3]
        return list(struct.unpack_from(f"<{n}I", self.arena.mem, L.FAILED_ARRAY)) if n else []

    def mark_failed_and_resume(self) -> EpochState:
        """Record the interrupted epoch as failed and start the next one.

        When the failed array is full nothing is written here; the caller
        must run a full repair pass and then call ``finish_full_pass``.
        """
        st = self.state
        interrupted = st.cur
        failed = self._durable_failed_list()
        st.failed = set(failed) | {interrupted}
        st.first_exec = interrupted + 1
        if st.first_exec >= EPOCH_LIMIT:
            raise OverflowError("32-bit epoch index wrapped")
        if len(failed) >= self.capacity:
            st.needs_full_pass = True
            st.cur = interrupted + 1
            return st
        slot_addr = L.FAILED_ARRAY + 4 * len(failed)
        self.arena.store(slot_addr, 4, interrupted)
        self.arena.flush(slot_addr >> LINE_SHIFT)
        self.arena.fence()
        self._write_slot(interrupted + 1, st.last_completed, len(failed) + 1)
        st.cur = interrupted + 1
        return st

    def finish_full_pass(self) -> None:
        """After a full repair pass and global flush, forget all failed epochs."""
        st = self.state
        self._write_slot(st.cur, st.cur - 1, 0)
        st.last_completed = st.cur - 1
        st.needs_full_pass = False
