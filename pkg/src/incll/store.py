"""The durable ordered map as one object: arena, epochs, log, allocator, tree."""

from __future__ import annotations

import copy
import logging
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from incll import layout as L
from incll.alloc import DurableAllocator
from incll.arena import PersistentArena
from incll.epoch import EpochManager, UnrecoverableStore
from incll.extlog import ExternalLog
from incll.recovery import LeafRecovery, RecoveryLocks
from incll.tree import DurableTree, TreeStats, inode_image, leaf_image

log = logging.getLogger(__name__)

_SB = struct.Struct("<8sIIQQQQ")  # magic, version, pad, arena size, log offset, log bytes, heap offset
_U64 = struct.Struct("<Q")

MiB = 1 << 20


@dataclass
class StoreConfig:
    arena_size: int = 64 * MiB
    log_bytes: int = 4 * MiB
    incll: bool = True
    recovery_locks: int = 1024
    failed_capacity: int = L.FAILED_CAPACITY
    replay_workers: int = 1


class DurableStore:
    """Open store over an arena.  Use ``create`` or ``recover_store``."""

    def __init__(self, arena: PersistentArena, epochs: EpochManager, config: StoreConfig):
        magic, version, _, size, log_off, log_bytes, heap = _SB.unpack_from(arena.mem, L.SUPERBLOCK)
        if magic != L.SUPERBLOCK_MAGIC:
            raise UnrecoverableStore("superblock magic missing")
        if version != L.LAYOUT_VERSION or size != arena.size:
            raise UnrecoverableStore(f"layout version {version} / size {size} does not match this build")
        self.arena = arena
        self.config = config
        self.epochs = epochs
        self.ep = epochs.state
        self.heap_start = heap
        self.locks = RecoveryLocks(config.recovery_locks)
        self.alloc = DurableAllocator(arena, self.ep, arena.size, self.locks)
        self.log = ExternalLog(arena, log_off, log_bytes, grow=self._grow_log)
        self.recovery = LeafRecovery(arena, self.ep, self.locks)
        self.tree = DurableTree(arena, self.ep, self.log, self.alloc, self.recovery, incll=config.incll)
        self.replayed = 0
        self.epoch_log_counts: list[int] = []

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def create(cls, config: StoreConfig | None = None, arena: PersistentArena | None = None) -> DurableStore:
        config = config or StoreConfig()
        if arena is None:
            arena = PersistentArena(config.arena_size)
        log_off = L.META_END
        log_bytes = (config.log_bytes + L.LINE - 1) & -L.LINE
        heap = log_off + log_bytes
        if heap + 4 * L.LINE > arena.size:
            raise ValueError("arena too small for the metadata region and log")
        sb = _SB.pack(L.SUPERBLOCK_MAGIC, L.LAYOUT_VERSION, 0, arena.size, log_off, log_bytes, heap)
        arena.write_through(L.SUPERBLOCK, sb)
        EpochManager.format(arena)
        ExternalLog.format(arena, log_off, log_bytes)
        DurableAllocator.format(arena, heap)
        return cls(arena, EpochManager(arena, config.failed_capacity), config)

    @classmethod
    def recover(cls, arena: PersistentArena, *, workers: int = 1, config: StoreConfig | None = None) -> DurableStore:
        config = config or StoreConfig(arena_size=arena.size)
        epochs = EpochManager(arena, config.failed_capacity)
        interrupted, completed = epochs.state.cur, epochs.state.last_completed
        st = epochs.mark_failed_and_resume()
        store = cls(arena, epochs, config)
        store.replayed = store.log.replay_all(completed, interrupted, workers)
        if st.needs_full_pass:
            log.warning("failed-epoch table full; running a full repair pass")
            store.repair_all(force=True)
            arena.global_flush()
            epochs.finish_full_pass()
            store.log.truncate(st.cur)
        return store

    def _grow_log(self, nbytes: int) -> int:
        return self.alloc.carve(nbytes, L.LINE)

    def fork(self) -> DurableStore:
        """Independent copy (arena and transient state) for what-if runs."""
        other = DurableStore.__new__(DurableStore)
        other.__dict__.update(self.__dict__)
        other.arena = arena = self.arena.clone()
        other.epochs = copy.copy(self.epochs)
        other.epochs.arena = arena
        other.ep = other.epochs.state = copy.deepcopy(self.ep)
        other.locks = RecoveryLocks(self.locks.k)
        other.alloc = copy.copy(self.alloc)
        other.alloc.__dict__.update(arena=arena, ep=other.ep, locks=other.locks)
        other.alloc._limbo = {t: defaultdict(list, {c: list(v) for c, v in d.items()}) for t, d in self.alloc._limbo.items()}
        other.alloc._class_locks = {c: threading.Lock() for c in self.alloc._class_locks}
        other.alloc._bump_lock = threading.Lock()
        other.alloc._limbo_lock = threading.Lock()
        other.log = copy.copy(self.log)
        other.log.__dict__.update(arena=arena, segments=list(self.log.segments), _logged=set(self.log._logged), _grow=other._grow_log)
        other.log._lock = threading.Lock()
        other.recovery = LeafRecovery(arena, other.ep, other.locks)
        other.tree = DurableTree(arena, other.ep, other.log, other.alloc, other.recovery, incll=self.tree.incll)
        other.tree.stats = self.tree.stats.copy()
        other.epoch_log_counts = list(self.epoch_log_counts)
        return other

    # -- map operations ----------------------------------------------------

    def get(self, key: int) -> int | None:
        return self.tree.get(key)

    def insert(self, key: int, handle: int) -> int | None:
        return self.tree.insert(key, handle)

    def update(self, key: int, handle: int) -> int | None:
        return self.tree.update(key, handle)

    def remove(self, key: int) -> int | None:
        return self.tree.remove(key)

    def scan(self, start: int, n: int) -> list[tuple[int, int]]:
        return self.tree.scan(start, n)

    def items(self) -> Iterator[tuple[int, int]]:
        return self.tree.items()

    # value buffers: 32-byte objects with an 8-byte payload after the header

    def new_value(self, payload: int) -> int:
        h = self.alloc.alloc(L.VALUE_CLASS)
        self.arena.store(h + L.VALUE_PAYLOAD, 8, payload)
        return h

    def value(self, handle: int) -> int:
        return _U64.unpack_from(self.arena.mem, handle + L.VALUE_PAYLOAD)[0]

    def put(self, key: int, payload: int) -> None:
        """Store ``payload`` under ``key`` in a fresh buffer, freeing the old one."""
        old = self.tree.insert(key, self.new_value(payload))
        if old is not None:
            self.alloc.free(old, L.VALUE_CLASS)

    def read(self, key: int) -> int | None:
        h = self.tree.get(key)
        return None if h is None else self.value(h)

    def delete(self, key: int) -> bool:
        old = self.tree.remove(key)
        if old is not None:
            self.alloc.free(old, L.VALUE_CLASS)
        return old is not None

    def contents(self) -> dict[int, int]:
        """Full traversal: key -> payload."""
        return {k: self.value(h) for k, h in self.tree.items()}

    # -- epochs ------------------------------------------------------------

    @property
    def epoch(self) -> int:
        return self.ep.cur

    def advance_epoch(self) -> int:
        """Close the epoch; requires that no operation is in flight."""
        self.epoch_log_counts.append(len(self.log))
        return self.epochs.advance(before_flush=self.alloc.merge_limbo, truncate=self.log.truncate)

    # -- bulk load ---------------------------------------------------------

    def bulk_load(self, items: Mapping[int, int] | Iterable[tuple[int, int]], fill: int = 10) -> None:
        """Build the tree from ``key -> payload`` into an empty store.

        Nodes and value buffers are written straight to persistence; only
        the root pointer and bump cursor go through the normal store path,
        and the epoch is advanced at the end so the load is a checkpoint.
        """
        if self.tree.root():
            raise ValueError("bulk_load needs an empty store")
        pairs = sorted(items.items() if isinstance(items, Mapping) else items)
        if not pairs:
            return
        if not 1 <= fill <= 14:
            raise ValueError("leaf fill must be in 1..14")
        arena, cur = self.arena, self.ep.cur
        vbase = self.alloc.carve(L.VALUE_CLASS * len(pairs), L.VALUE_CLASS)
        buf = bytearray(L.VALUE_CLASS * len(pairs))
        for i, (_, payload) in enumerate(pairs):
            _U64.pack_into(buf, i * L.VALUE_CLASS + L.VALUE_PAYLOAD, payload)
        arena.write_through(vbase, buf)
        handles = [vbase + i * L.VALUE_CLASS for i in range(len(pairs))]

        nleaves = -(-len(pairs) // fill)
        lbase = self.alloc.carve(L.LEAF_CLASS * nleaves, L.LINE)
        buf = bytearray(L.LEAF_CLASS * nleaves)
        level: list[tuple[int, int]] = []  # (first key, node)
        for j in range(nleaves):
            chunk = [(k, handles[i]) for i, (k, _) in enumerate(pairs[j * fill : (j + 1) * fill], j * fill)]
            h = lbase + j * L.LEAF_CLASS
            nxt = h + L.LEAF_CLASS if j + 1 < nleaves else 0
            off = j * L.LEAF_CLASS + L.OBJ_HEADER
            buf[off : off + L.LEAF_SIZE - L.OBJ_HEADER] = leaf_image(chunk, cur, nxt)
            level.append((chunk[0][0], h))
        arena.write_through(lbase, buf)

        fanout = 12
        while len(level) > 1:
            groups = [level[i : i + fanout] for i in range(0, len(level), fanout)]
            if len(groups) > 1 and len(groups[-1]) == 1:
                groups[-2:] = [groups[-2][:-1], groups[-2][-1:] + groups[-1]]
            base = self.alloc.carve(L.INTERNAL_CLASS * len(groups), L.LINE)
            buf = bytearray(L.INTERNAL_CLASS * len(groups))
            nxt_level = []
            for j, g in enumerate(groups):
                off = j * L.INTERNAL_CLASS + L.OBJ_HEADER
                img = inode_image([k for k, _ in g[1:]], [c for _, c in g], cur)
                buf[off : off + L.INODE_SIZE - L.OBJ_HEADER] = img
                nxt_level.append((g[0][0], base + j * L.INTERNAL_CLASS))
            arena.write_through(base, buf)
            level = nxt_level
        self.alloc.cell_set(L.ROOT_CELL, level[0][1])
        self.advance_epoch()

    # -- verification & recovery helpers -----------------------------------

    def repair_all(self, force: bool = False) -> int:
        """Visit every leaf and allocator cell so all lazy repairs happen now."""
        n = 0
        for h in self.tree.leaves():
            n += self.recovery.repair_leaf(h, force=force)
        self.alloc.free_objects()
        self.alloc.bump_cursor()
        return n

    def free_objects(self) -> dict[int, list[int]]:
        return self.alloc.free_objects()

    def stats(self) -> dict[str, int]:
        t: TreeStats = self.tree.stats
        out = {
            "epoch": self.ep.cur,
            "logEntries": t.log_entries,
            "inCLLUses": t.incll_uses,
            "epochOpens": t.epoch_opens,
            "valInCLLWrites": t.val_snapshots,
            "splits": t.splits,
            "merges": t.merges,
            "allocSnapshots": self.alloc.n_snapshots,
            "replayed": self.replayed,
            "leafRepairs": self.recovery.n_repaired,
            "cellRepairs": self.alloc.n_repairs,
        }
        out.update({f"gate.{g.value}": n for g, n in t.gate.items()})
        out.update({f"logged.{r}": n for r, n in t.logged.items()})
        out.update(self.arena.counters())
        return out
