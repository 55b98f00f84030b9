"""Durable size-class free-list allocator.

Every durable pointer the allocator mutates (list heads, the bump cursor,
each free object's ``next``) is a 16-byte pointer cell: a live word and an
InCLL word sharing one cache line, each carrying a 2-bit counter and one
half of the epoch of the last mutation.  The first mutation of a cell in an
epoch writes the InCLL word (old pointer, bumped counter, low epoch half)
before the live word, so no flush or fence is ever needed: a crash between
the two leaves mismatched counters, and a crash after both leaves an epoch
that recovery finds in the failed set.

Frees are deferred to the end of the epoch (epoch-based reclamation), so an
object handed out in epoch E was free when E started and its contents never
need logging.
"""

from __future__ import annotations

import struct
import threading
from collections import defaultdict

from incll import layout as L
from incll.arena import PersistentArena
from incll.codec import HANDLE_MASK, header_encode
from incll.epoch import EpochState
from incll.recovery import RecoveryLocks

_U64x2 = struct.Struct("<QQ")


class OutOfSpace(MemoryError):
    pass


class DurableAllocator:
    def __init__(
        self,
        arena: PersistentArena,
        epochs: EpochState,
        heap_end: int,
        locks: RecoveryLocks | None = None,
    ):
        self.arena = arena
        self.ep = epochs
        self.heap_end = heap_end
        self.locks = locks or RecoveryLocks()
        self._class_locks = {c: threading.Lock() for c in L.SIZE_CLASSES}
        self._bump_lock = threading.Lock()
        self._limbo_lock = threading.Lock()
        self._limbo: dict[int, dict[int, list[int]]] = {}
        self.n_snapshots = 0
        self.n_repairs = 0

    @staticmethod
    def format(arena: PersistentArena, heap_start: int) -> None:
        a, b = header_encode(0, heap_start, 0, heap_start, 0)
        arena.write_through(L.BUMP_CELL, _U64x2.pack(a, b))

    # -- pointer cells -------------------------------------------------------

    def cell_repair(self, addr: int) -> bool:
        """Roll a cell back if its last mutation is torn or in a failed epoch."""
        a, b = _U64x2.unpack_from(self.arena.mem, addr)
        first = self.ep.first_exec
        if (a & 3) == (b & 3):
            epoch = ((a >> 48) << 16) | (b >> 48)
            if epoch >= first or epoch not in self.ep.failed:
                return False
        with self.locks.for_addr(addr):
            a, b = _U64x2.unpack_from(self.arena.mem, addr)
            c1, c2 = a & 3, b & 3
            if c1 == c2:
                epoch = ((a >> 48) << 16) | (b >> 48)
                if epoch >= first or epoch not in self.ep.failed:
                    return False
            restored = b & HANDLE_MASK
            c = (c1 + 1) & 3
            self.arena.store(addr + 8, 8, c | restored | ((first & 0xFFFF) << 48))
            self.arena.store(addr, 8, c | restored | ((first >> 16) << 48))
            self.n_repairs += 1
            return True

    def cell_get(self, addr: int) -> int:
        a, b = _U64x2.unpack_from(self.arena.mem, addr)
        if (a & 3) != (b & 3) or (((a >> 48) << 16) | (b >> 48)) < self.ep.first_exec:
            self.cell_repair(addr)
            a = self.arena.load64(addr)
        return a & HANDLE_MASK

    def cell_set(self, addr: int, value: int) -> None:
        a, b = _U64x2.unpack_from(self.arena.mem, addr)
        cur = self.ep.cur
        epoch = ((a >> 48) << 16) | (b >> 48)
        c1 = a & 3
        if c1 != (b & 3) or epoch < self.ep.first_exec:
            if self.cell_repair(addr):
                a, b = _U64x2.unpack_from(self.arena.mem, addr)
                epoch = ((a >> 48) << 16) | (b >> 48)
                c1 = a & 3
        if epoch == cur:
            self.arena.store(addr, 8, c1 | value | ((cur >> 16) << 48))
            return
        c = (c1 + 1) & 3
        self.arena.store(addr + 8, 8, c | (a & HANDLE_MASK) | ((cur & 0xFFFF) << 48))
        self.arena.store(addr, 8, c | value | ((cur >> 16) << 48))
        self.n_snapshots += 1

    # -- allocation ----------------------------------------------------------

    def carve(self, nbytes: int, align: int = L.LINE) -> int:
        """Take fresh space from the bump region."""
        with self._bump_lock:
            cur = self.cell_get(L.BUMP_CELL)
            h = (cur + align - 1) & -align
            end = (h + nbytes + 15) & ~15
            if end > self.heap_end:
                raise OutOfSpace(f"arena exhausted: need {nbytes} bytes at {h:#x}, heap ends at {self.heap_end:#x}")
            self.cell_set(L.BUMP_CELL, end)
            return h

    def alloc(self, size_class: int) -> int:
        head_addr = L.class_head(size_class)
        with self._class_locks[size_class]:
            h = self.cell_get(head_addr)
            if h == 0:
                return self.carve(size_class, min(size_class, L.LINE))
            self.cell_set(head_addr, self.cell_get(h))
            return h

    def free(self, h: int, size_class: int) -> None:
        """Defer ``h`` until the epoch closes."""
        if size_class not in L.SIZE_CLASSES:
            raise ValueError(f"unknown size class {size_class}")
        tid = threading.get_ident()
        mine = self._limbo.get(tid)
        if mine is None:
            with self._limbo_lock:
                mine = self._limbo.setdefault(tid, defaultdict(list))
        mine[size_class].append(h)

    def limbo_size(self) -> int:
        return sum(len(v) for lists in self._limbo.values() for v in lists.values())

    def merge_limbo(self) -> int:
        """Push deferred frees onto their lists; part of the closing epoch."""
        with self._limbo_lock:
            pending, self._limbo = self._limbo, {}
        n = 0
        for lists in pending.values():
            for size_class, objs in sorted(lists.items()):
                head_addr = L.class_head(size_class)
                with self._class_locks[size_class]:
                    for h in objs:
                        self.cell_set(h, self.cell_get(head_addr))
                        self.cell_set(head_addr, h)
                        n += 1
        return n

    def drop_limbo(self) -> None:
        self._limbo = {}

    def free_objects(self) -> dict[int, list[int]]:
        """Walk every free list (repairing headers on the way)."""
        out: dict[int, list[int]] = {}
        for size_class in L.SIZE_CLASSES:
            seen: list[int] = []
            marks: set[int] = set()
            h = self.cell_get(L.class_head(size_class))
            while h:
                if h in marks:
                    raise RuntimeError(f"cycle in free list of class {size_class} at {h:#x}")
                marks.add(h)
                seen.append(h)
                h = self.cell_get(h)
            out[size_class] = seen
        return out

    def bump_cursor(self) -> int:
        return self.cell_get(L.BUMP_CELL)
