"""Post-crash restoration.

Recovery is split in two.  ``recover_store`` runs before the store is used:
it records the interrupted epoch as failed and copies every live external
log image back over its node.  Leaves are then repaired lazily from their
in-cache-line logs the first time anything touches them, serialized by a
hashed array of transient locks (the node's own lock word cannot be trusted
after a crash).
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import TYPE_CHECKING

from incll import layout as L
from incll.arena import CrashImage, PersistentArena
from incll.codec import HANDLE_MASK, INVALIDIDX, reconstruct_epoch
from incll.epoch import EpochState

if TYPE_CHECKING:
    from incll.store import DurableStore, StoreConfig

_U32 = struct.Struct("<I")
_U64x3 = struct.Struct("<QQQ")
_U64 = struct.Struct("<Q")

DEFAULT_LOCKS = 1024
_GOLDEN = 0x9E37_79B9_7F4A_7C15


class RecoveryLocks:
    def __init__(self, k: int = DEFAULT_LOCKS):
        if k < 1:
            raise ValueError("need at least one recovery lock")
        self.k = k
        self._locks: dict[int, threading.Lock] = {}  # created on first use

    def index(self, addr: int) -> int:
        return ((((addr >> 4) * _GOLDEN) & 0xFFFF_FFFF_FFFF_FFFF) >> 32) % self.k

    def for_addr(self, addr: int) -> threading.Lock:
        i = self.index(addr)
        lk = self._locks.get(i)
        if lk is None:
            lk = self._locks.setdefault(i, threading.Lock())
        return lk


class LeafRecovery:
    """Lazy per-leaf rollback of InCLL_p and the two ValInCLL words."""

    def __init__(self, arena: PersistentArena, epochs: EpochState, locks: RecoveryLocks):
        self.arena = arena
        self.ep = epochs
        self.locks = locks
        self.n_checked = 0
        self.n_repaired = 0

    def repair_leaf(self, h: int, force: bool = False) -> bool:
        """Bring leaf ``h`` back to its state at the start of the failed epoch.

        Only leaves carrying failed-epoch state are written; a leaf last
        touched in a completed epoch is already correct and the ordinary
        epoch-open path handles its next mutation.  ``force`` re-examines a
        leaf even if this execution already stamped it (used by the full
        repair pass, which may itself have been interrupted).
        """
        mem = self.arena.mem
        first = self.ep.first_exec
        if not force and _U32.unpack_from(mem, h + L.LEAF_META)[0] >= first:
            return False
        with self.locks.for_addr(h):
            meta, perm, perm_incll = _U64x3.unpack_from(mem, h + L.LEAF_META)
            node_epoch = meta & 0xFFFF_FFFF
            if not force and node_epoch >= first:
                return False
            self.n_checked += 1
            failed = self.ep.failed
            perm_failed = node_epoch in failed
            restore = []
            for waddr, lo, hi in ((L.LEAF_INCLL1, 0, 6), (L.LEAF_INCLL2, 7, 13)):
                w = _U64.unpack_from(mem, h + waddr)[0]
                idx = w & 0xF
                if idx == INVALIDIDX or not lo <= idx <= hi:
                    continue
                if reconstruct_epoch(node_epoch, w >> 48) in failed:
                    restore.append((idx, w & HANDLE_MASK))
            if not perm_failed and not restore:
                return False
            store = self.arena.store
            empty = INVALIDIDX | ((first & 0xFFFF) << 48)
            if (first >> 16) != (node_epoch >> 16):
                # words reconstruct against the stamped epoch's high half; make
                # sure no stale word can outlive the new stamp (rare: once per
                # 2**16 epochs)
                store(h + L.LEAF_INCLL1, 8, empty)
                store(h + L.LEAF_INCLL2, 8, empty)
                self.arena.flush((h + L.LEAF_INCLL1) >> 6)
                self.arena.flush((h + L.LEAF_INCLL2) >> 6)
                self.arena.fence()
            if perm_failed:
                store(h + L.LEAF_PERM, 8, perm_incll)
                perm = perm_incll
            for idx, handle in restore:
                store(h + L.LEAF_VALS + 8 * idx, 8, handle)
            store(h + L.LEAF_INCLL1, 8, empty)
            store(h + L.LEAF_INCLL2, 8, empty)
            store(h + L.LEAF_PERM_INCLL, 8, perm)
            store(h + L.LEAF_META, 8, first | (1 << 40) | (L.KIND_LEAF << 48))
            self.n_repaired += 1
            return True


def recover_store(
    source: PersistentArena | CrashImage | str | Path,
    *,
    workers: int = 1,
    config: StoreConfig | None = None,
) -> DurableStore:
    """Open a store from a crash image (or arena, or snapshot file).

    Marks the interrupted epoch failed, replays the external log with
    ``workers`` threads, and returns a usable store whose leaves repair
    themselves on first touch.
    """
    from incll.store import DurableStore

    if isinstance(source, CrashImage):
        arena = PersistentArena.from_image(source)
    elif isinstance(source, PersistentArena):
        arena = source
    else:
        arena = PersistentArena.open(source)
    return DurableStore.recover(arena, workers=workers, config=config)
