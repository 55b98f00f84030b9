"""External undo log of whole-node images.

Entries are appended in one chain that starts at the head of the primary
segment after every truncation.  Each entry is a header line followed by
the padded image; its commit word (magic and epoch) is written only after
the image is fenced, so a chain walk stops at the first entry that never
committed.  Entries from epochs that completed are stale and also end the
walk, which is what makes truncation a single header write.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from incll import layout as L
from incll.arena import LINE_SHIFT, PersistentArena

log = logging.getLogger(__name__)


class CorruptLog(Exception):
    pass


@dataclass(frozen=True)
class LogEntry:
    addr: int
    size: int
    epoch: int
    image: bytes
    at: int


def _pad(n: int) -> int:
    return (n + 63) & ~63


class ExternalLog:
    def __init__(
        self,
        arena: PersistentArena,
        offset: int,
        nbytes: int,
        grow: Callable[[int], int] | None = None,
    ):
        if offset % L.LINE or nbytes % L.LINE or nbytes < 4 * L.LINE:
            raise ValueError("log segment must be line aligned and at least 256 bytes")
        self.arena = arena
        self.segments: list[tuple[int, int]] = [(offset, nbytes)]
        self._grow = grow
        self._seg = 0
        self._pos = 0
        self._count = 0
        self._lock = threading.Lock()
        self._logged: set[int] = set()
        self.n_entries = 0
        self.n_links = 0

    @staticmethod
    def format(arena: PersistentArena, offset: int, nbytes: int) -> None:
        header = bytearray(L.LINE)
        header[L.LOGH_EPOCH : L.LOGH_EPOCH + 4] = (1).to_bytes(4, "little")
        header[L.LOGH_CURSOR : L.LOGH_CURSOR + 8] = offset.to_bytes(8, "little")
        arena.write_through(L.LOG_HEADER, header)
        arena.write_through(offset, bytes(L.LINE))

    def __len__(self) -> int:
        return self._count

    @property
    def cursor(self) -> int:
        return self.segments[self._seg][0] + self._pos

    def logged_this_epoch(self, addr: int) -> bool:
        return addr in self._logged

    # -- append ------------------------------------------------------------

    def log_node(self, addr: int, size: int, epoch: int) -> None:
        """Durably record ``size`` live bytes at ``addr`` before they change.

        Two fences: one after the image, one after the commit word.
        """
        if size % 8 or addr % 8:
            raise ValueError("logged ranges must be 8-byte aligned")
        arena = self.arena
        with self._lock:
            assert addr not in self._logged, f"node {addr:#x} logged twice in epoch {epoch}"
            image = bytes(arena.mem[addr : addr + size])
            need = L.LOGE_HEADER + _pad(size)
            if self._pos + need + L.LOGE_HEADER > self.segments[self._seg][1]:
                self._link(epoch, need)
            e = self.cursor
            arena.store(e + L.LOGE_ADDR, 8, addr)
            arena.store(e + L.LOGE_SIZE, 8, size | (L.LOG_KIND_IMAGE << 32))
            arena.store_block(e + L.LOGE_HEADER, image)
            arena.flush_range(e, L.LOGE_HEADER + size)
            arena.fence()
            self._commit(e, epoch, need)
            self._logged.add(addr)
            self.n_entries += 1

    def _commit(self, e: int, epoch: int, need: int) -> None:
        arena = self.arena
        arena.store(e + L.LOGE_COMMIT, 8, (L.LOG_MAGIC << 32) | epoch)
        self._pos += need
        self._count += 1
        arena.store(L.LOG_HEADER + L.LOGH_EPOCH, 8, epoch | (self._count << 32))
        arena.store(L.LOG_HEADER + L.LOGH_CURSOR, 8, self.cursor)
        arena.flush(e >> LINE_SHIFT)
        arena.flush(L.LOG_HEADER >> LINE_SHIFT)
        arena.fence()

    def _link(self, epoch: int, need: int) -> None:
        nbytes = self.segments[0][1]
        if need + 2 * L.LOGE_HEADER > nbytes:
            raise ValueError(f"log entry of {need} bytes cannot fit a {nbytes}-byte segment")
        if self._seg + 1 == len(self.segments):
            if self._grow is None:
                raise MemoryError("external log is full and cannot grow")
            self.segments.append((self._grow(nbytes), nbytes))
            log.info("external log grew to %d segments", len(self.segments))
        nxt, nsize = self.segments[self._seg + 1]
        arena = self.arena
        e = self.cursor
        arena.store(e + L.LOGE_ADDR, 8, 0)
        arena.store(e + L.LOGE_SIZE, 8, L.LOG_KIND_LINK << 32)
        arena.store(e + L.LOGE_LINK, 8, nxt)
        arena.store(e + L.LOGE_LINK_SIZE, 8, nsize)
        arena.flush(e >> LINE_SHIFT)
        arena.fence()
        arena.store(e + L.LOGE_COMMIT, 8, (L.LOG_MAGIC << 32) | epoch)
        arena.flush(e >> LINE_SHIFT)
        arena.fence()
        self._seg += 1
        self._pos = 0
        self.n_links += 1

    # -- epoch boundary ----------------------------------------------------

    def truncate(self, new_epoch: int) -> None:
        """Drop all entries; called after the global flush made them moot."""
        self._logged.clear()
        if self._count == 0 and self._seg == 0 and self._pos == 0:
            return
        self._seg = self._pos = self._count = 0
        self.arena.store(L.LOG_HEADER + L.LOGH_EPOCH, 8, new_epoch)
        self.arena.store(L.LOG_HEADER + L.LOGH_CURSOR, 8, self.cursor)
        self.arena.flush(L.LOG_HEADER >> LINE_SHIFT)
        self.arena.fence()

    # -- recovery ----------------------------------------------------------

    def scan(self, last_completed: int, cur: int) -> list[LogEntry]:
        """Walk the chain, returning committed entries newer than ``last_completed``.

        Leaves the append cursor at the end of the chain so a recovered
        execution keeps appending after the entries it may still need.
        """
        mem = self.arena.mem
        size_limit = self.arena.size
        out: list[LogEntry] = []
        seg, pos = 0, 0
        while True:
            base, nbytes = self.segments[seg]
            if pos + L.LOGE_HEADER > nbytes:
                break
            e = base + pos
            commit = int.from_bytes(mem[e : e + 8], "little")
            epoch = commit & 0xFFFF_FFFF
            if commit >> 32 != L.LOG_MAGIC or not last_completed < epoch <= cur:
                break
            kind_size = int.from_bytes(mem[e + L.LOGE_SIZE : e + L.LOGE_SIZE + 8], "little")
            kind, size = kind_size >> 32, kind_size & 0xFFFF_FFFF
            if kind == L.LOG_KIND_LINK:
                nxt = int.from_bytes(mem[e + L.LOGE_LINK : e + L.LOGE_LINK + 8], "little")
                nsize = int.from_bytes(mem[e + L.LOGE_LINK_SIZE : e + L.LOGE_LINK_SIZE + 8], "little")
                if nxt % L.LINE or nxt + nsize > size_limit or nsize < 4 * L.LINE:
                    raise CorruptLog(f"link at {e:#x} points outside the arena")
                if seg + 1 == len(self.segments):
                    self.segments.append((nxt, nsize))
                elif self.segments[seg + 1] != (nxt, nsize):
                    self.segments[seg + 1 :] = [(nxt, nsize)]
                seg, pos = seg + 1, 0
                continue
            if kind != L.LOG_KIND_IMAGE:
                raise CorruptLog(f"unknown entry kind {kind} at {e:#x}")
            addr = int.from_bytes(mem[e + L.LOGE_ADDR : e + L.LOGE_ADDR + 8], "little")
            if size % 8 or addr % 8 or addr + size > size_limit or pos + L.LOGE_HEADER + size > nbytes:
                raise CorruptLog(f"entry at {e:#x} covers [{addr:#x}, +{size}) outside the arena")
            img = e + L.LOGE_HEADER
            out.append(LogEntry(addr, size, epoch, bytes(mem[img : img + size]), e))
            pos += L.LOGE_HEADER + _pad(size)
        self._seg, self._pos, self._count = seg, pos, len(out)
        return out

    def replay_all(self, last_completed: int, cur: int, workers: int = 1) -> int:
        """Copy every live entry's image back over its node.

        A node can appear once per failed epoch in a chain of failed epochs;
        the earliest image wins.  Entries never overlap, so the result is
        independent of order and worker count.
        """
        entries = self.scan(last_completed, cur)
        first: dict[int, LogEntry] = {}
        for ent in entries:
            first.setdefault(ent.addr, ent)
        chosen = list(first.values())
        if workers <= 1 or len(chosen) < 2:
            for ent in chosen:
                self.arena.store_block(ent.addr, ent.image)
        else:
            parts = [chosen[i::workers] for i in range(workers)]

            def apply(part: list[LogEntry]) -> None:
                for ent in part:
                    self.arena.store_block(ent.addr, ent.image)

            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(apply, parts))
        return len(chosen)
