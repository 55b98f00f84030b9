"""B+ tree with Masstree-style leaves made durable by InCLL.

Leaves keep 14 fixed 8-byte keys, 14 value handles and a permutation word
that orders the live slots.  Within an epoch a leaf's first mutation saves
the permutation into ``permutationInCLL`` (same cache line, so same-line
store order makes it durable before the change), and the first update of a
value line saves the old handle into that line's ValInCLL word.  Anything
those two logs cannot express falls back to the external node log.

Internal nodes are only changed by splits and merges and are always logged
externally, once per epoch, tracked by ``lastLoggedEpoch``.

Locking: every node has a transient exclusive lock.  Point operations use
lock coupling and hold only the target leaf while mutating.  Operations that
change structure restart from the root holding the root lock and every node
on the path, so they never race with each other or with a descent.
"""

from __future__ import annotations

import struct
import threading
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from incll import layout as L
from incll.alloc import DurableAllocator
from incll.arena import PersistentArena
from incll.codec import EMPTY_PERMUTATION, INVALIDIDX, check_handle, WIDTH, perm_from_slots, perm_insert, perm_remove
from incll.epoch import EpochState
from incll.extlog import ExternalLog
from incll.recovery import LeafRecovery

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_KEYS = struct.Struct(f"<{WIDTH}Q")
_META_PERM = struct.Struct("<QQ")
_LEAF_BODY = struct.Struct(f"<6Q{WIDTH}Q16xQ{WIDTH}QQ")  # [16, 320)
_INODE_BODY = struct.Struct(f"<IBBBB{L.INODE_WIDTH}Q{L.INODE_WIDTH + 1}Q")  # [16, 256)

_META_KIND = L.KIND_LEAF << 48
_LOGGED = 1 << 32
_INS = 1 << 40
_IKEYS = [struct.Struct(f"<{n}Q") for n in range(L.INODE_WIDTH + 2)]

MAX_KEY = (1 << 64) - 1


class Gate(Enum):
    USE_INCLL = "useInCLL"
    EXTERNAL_LOG_FIRST = "externalLogFirst"
    NOTHING_NEEDED = "nothingNeeded"


class Op(Enum):
    INSERT = "insert"
    REMOVE = "remove"
    UPDATE = "update"


@dataclass
class TreeStats:
    gate: Counter = field(default_factory=Counter)
    logged: Counter = field(default_factory=Counter)  # external entries by reason
    epoch_opens: int = 0  # InCLL_p snapshots
    val_snapshots: int = 0  # ValInCLL writes
    splits: int = 0
    merges: int = 0

    @property
    def incll_uses(self) -> int:
        return self.epoch_opens + self.val_snapshots

    @property
    def log_entries(self) -> int:
        return sum(self.logged.values())

    def copy(self) -> TreeStats:
        return TreeStats(Counter(self.gate), Counter(self.logged), self.epoch_opens, self.val_snapshots, self.splits, self.merges)


def leaf_image(entries: list[tuple[int, int]], epoch: int, nxt: int, logged: bool = True) -> bytes:
    """Bytes [16, 320) of a leaf holding ``entries`` in slots 0..n-1."""
    n = len(entries)
    keys = [k for k, _ in entries] + [0] * (WIDTH - n)
    vals = [v for _, v in entries] + [0] * (WIDTH - n)
    perm = perm_from_slots(list(range(n)))
    meta = epoch | (_LOGGED if logged else 0) | _INS | _META_KIND
    empty = INVALIDIDX | ((epoch & 0xFFFF) << 48)
    return _LEAF_BODY.pack(meta, perm, perm, 0, nxt, 0, *keys, empty, *vals, empty)


def inode_image(keys: list[int], children: list[int], epoch: int) -> bytes:
    """Bytes [16, 256) of an internal node."""
    n = len(keys)
    assert len(children) == n + 1 and n <= L.INODE_WIDTH
    return _INODE_BODY.pack(
        epoch, n, 0, L.KIND_INTERNAL, 0,
        *keys, *([0] * (L.INODE_WIDTH - n)),
        *children, *([0] * (L.INODE_WIDTH - n)),
    )


class DurableTree:
    def __init__(
        self,
        arena: PersistentArena,
        epochs: EpochState,
        log: ExternalLog,
        alloc: DurableAllocator,
        recovery: LeafRecovery,
        *,
        incll: bool = True,
    ):
        self.arena = arena
        self.ep = epochs
        self.log = log
        self.alloc = alloc
        self.recovery = recovery
        self.incll = incll
        self.stats = TreeStats()
        self._locks: dict[int, threading.Lock] = {}
        self._root_lock = threading.Lock()

    # -- small helpers -----------------------------------------------------

    def _lock(self, h: int) -> threading.Lock:
        lk = self._locks.get(h)
        if lk is None:
            lk = self._locks.setdefault(h, threading.Lock())
        return lk

    def root(self) -> int:
        return self.alloc.cell_get(L.ROOT_CELL)

    def _is_internal(self, h: int) -> bool:
        return self.arena.mem[h + L.KIND_BYTE] == L.KIND_INTERNAL

    def _inode(self, h: int) -> tuple[list[int], list[int]]:
        mem = self.arena.mem
        n = mem[h + L.INODE_NKEYS]
        keys = list(_IKEYS[n].unpack_from(mem, h + L.INODE_KEYS))
        children = list(_IKEYS[n + 1].unpack_from(mem, h + L.INODE_CHILDREN))
        return keys, children

    def _child_for(self, h: int, key: int) -> tuple[int, int]:
        mem = self.arena.mem
        n = mem[h + L.INODE_NKEYS]
        i = bisect_right(_IKEYS[n].unpack_from(mem, h + L.INODE_KEYS), key)
        return i, _U64.unpack_from(mem, h + L.INODE_CHILDREN + 8 * i)[0]

    def _leaf_view(self, h: int) -> tuple[int, list[int], list[int]]:
        """(permutation, live slots in key order, their keys)."""
        mem = self.arena.mem
        perm = _U64.unpack_from(mem, h + L.LEAF_PERM)[0]
        keys = _KEYS.unpack_from(mem, h + L.LEAF_KEYS)
        slots = [(perm >> s) & 0xF for s in range(4, 4 + 4 * (perm & 0xF), 4)]
        return perm, slots, [keys[s] for s in slots]

    def _val(self, h: int, slot: int) -> int:
        return _U64.unpack_from(self.arena.mem, h + L.LEAF_VALS + 8 * slot)[0]

    # -- descent -----------------------------------------------------------

    def _find_leaf(self, key: int) -> int:
        """Lock-coupled descent; returns the leaf with its lock held (0 if empty)."""
        rl = self._root_lock
        rl.acquire()
        h = self.alloc.cell_get(L.ROOT_CELL)
        if h == 0:
            rl.release()
            return 0
        lk = self._lock(h)
        lk.acquire()
        rl.release()
        mem = self.arena.mem
        while mem[h + L.KIND_BYTE] == L.KIND_INTERNAL:
            _, c = self._child_for(h, key)
            clk = self._lock(c)
            clk.acquire()
            lk.release()
            h, lk = c, clk
        self.recovery.repair_leaf(h)
        return h

    def _structural(self, key: int, fn):
        """Run ``fn(path, leaf)`` holding the root lock and every node on the path."""
        held: list[int] = []
        with self._root_lock:
            try:
                path: list[tuple[int, int]] = []
                h = self.alloc.cell_get(L.ROOT_CELL)
                while h:
                    self._lock(h).acquire()
                    held.append(h)
                    if not self._is_internal(h):
                        self.recovery.repair_leaf(h)
                        break
                    i, c = self._child_for(h, key)
                    path.append((h, i))
                    h = c
                return fn(path, h, held)
            finally:
                for n in reversed(held):
                    self._lock(n).release()

    # -- the gate ----------------------------------------------------------

    def gate(self, h: int, op: Op, slot: int = -1, old: int = 0) -> Gate:
        """Decide how the next mutation of leaf ``h`` is made recoverable.

        Performs whatever logging the answer implies, so on return the
        caller may mutate.  Caller holds the leaf lock.
        """
        arena = self.arena
        meta = _U64.unpack_from(arena.mem, h + L.LEAF_META)[0]
        ne = meta & 0xFFFF_FFFF
        cur = self.ep.cur
        if not self.incll:
            if ne == cur and meta & _LOGGED:
                return self._count(Gate.NOTHING_NEEDED)
            self._log_leaf(h, "no-incll", opening=ne != cur)
            return self._count(Gate.EXTERNAL_LOG_FIRST)
        if ne != cur:
            if (ne >> 16) != (cur >> 16):
                self._log_leaf(h, "epoch-overflow", opening=True)
                return self._count(Gate.EXTERNAL_LOG_FIRST)
            lo = (cur & 0xFFFF) << 48
            empty = INVALIDIDX | lo
            store = arena.store
            store(h + L.LEAF_PERM_INCLL, 8, _U64.unpack_from(arena.mem, h + L.LEAF_PERM)[0])
            if op is Op.UPDATE:
                w = slot | old | lo
                store(h + L.LEAF_INCLL1, 8, w if slot <= 6 else empty)
                store(h + L.LEAF_INCLL2, 8, empty if slot <= 6 else w)
                self.stats.val_snapshots += 1
            else:
                store(h + L.LEAF_INCLL1, 8, empty)
                store(h + L.LEAF_INCLL2, 8, empty)
            store(h + L.LEAF_META, 8, cur | (0 if op is Op.REMOVE else _INS) | _META_KIND)
            self.stats.epoch_opens += 1
            return self._count(Gate.USE_INCLL)
        if meta & _LOGGED:
            return self._count(Gate.NOTHING_NEEDED)
        if op is Op.INSERT:
            if not meta & _INS:
                self._log_leaf(h, "insert-after-remove")
                return self._count(Gate.EXTERNAL_LOG_FIRST)
            return self._count(Gate.USE_INCLL)
        if op is Op.REMOVE:
            if meta & _INS:
                arena.store(h + L.LEAF_META, 8, meta & ~_INS)
            return self._count(Gate.USE_INCLL)
        waddr = h + (L.LEAF_INCLL1 if slot <= 6 else L.LEAF_INCLL2)
        idx = _U64.unpack_from(arena.mem, waddr)[0] & 0xF
        if idx == slot:
            return self._count(Gate.NOTHING_NEEDED)
        if idx == INVALIDIDX:
            arena.store(waddr, 8, slot | old | ((cur & 0xFFFF) << 48))
            self.stats.val_snapshots += 1
            return self._count(Gate.USE_INCLL)
        self._log_leaf(h, "second-slot-update")
        return self._count(Gate.EXTERNAL_LOG_FIRST)

    def _count(self, g: Gate) -> Gate:
        self.stats.gate[g] += 1
        return g

    def _log_leaf(self, h: int, reason: str, opening: bool = False) -> None:
        """Externally log leaf ``h`` and mark it logged for this epoch."""
        cur = self.ep.cur
        self.log.log_node(h + L.OBJ_HEADER, L.LEAF_SIZE - L.OBJ_HEADER, cur)
        store = self.arena.store
        if opening:
            empty = INVALIDIDX | ((cur & 0xFFFF) << 48)
            store(h + L.LEAF_INCLL1, 8, empty)
            store(h + L.LEAF_INCLL2, 8, empty)
        store(h + L.LEAF_META, 8, cur | _LOGGED | _INS | _META_KIND)
        self.stats.logged[reason] += 1

    def _ensure_leaf_logged(self, h: int, reason: str) -> None:
        meta = _U64.unpack_from(self.arena.mem, h + L.LEAF_META)[0]
        ne = meta & 0xFFFF_FFFF
        if ne == self.ep.cur and meta & _LOGGED:
            return
        self._log_leaf(h, reason, opening=ne != self.ep.cur)

    def _ensure_inode_logged(self, h: int) -> None:
        cur = self.ep.cur
        if _U32.unpack_from(self.arena.mem, h + L.INODE_LOGGED_EPOCH)[0] == cur:
            return
        self.log.log_node(h + L.OBJ_HEADER, L.INODE_SIZE - L.OBJ_HEADER, cur)
        self.arena.store(h + L.INODE_LOGGED_EPOCH, 4, cur)
        self.stats.logged["internal"] += 1

    # -- leaf mutations (leaf lock held) ----------------------------------

    def _update_at(self, h: int, slot: int, value: int) -> int:
        old = self._val(h, slot)
        self.gate(h, Op.UPDATE, slot, old)
        self.arena.store(h + L.LEAF_VALS + 8 * slot, 8, value)
        return old

    def _insert_at(self, h: int, pos: int, key: int, value: int) -> None:
        self.gate(h, Op.INSERT)
        perm = _U64.unpack_from(self.arena.mem, h + L.LEAF_PERM)[0]
        perm, slot = perm_insert(perm, pos)
        store = self.arena.store
        store(h + L.LEAF_KEYS + 8 * slot, 8, key)
        store(h + L.LEAF_VALS + 8 * slot, 8, value)
        store(h + L.LEAF_PERM, 8, perm)

    def _remove_at(self, h: int, pos: int) -> int:
        self.gate(h, Op.REMOVE)
        perm = _U64.unpack_from(self.arena.mem, h + L.LEAF_PERM)[0]
        perm, slot = perm_remove(perm, pos)
        self.arena.store(h + L.LEAF_PERM, 8, perm)
        return self._val(h, slot)

    # -- public operations -------------------------------------------------

    def get(self, key: int) -> int | None:
        h = self._find_leaf(key)
        if h == 0:
            return None
        try:
            _, slots, keys = self._leaf_view(h)
            pos = bisect_left(keys, key)
            if pos < len(keys) and keys[pos] == key:
                return self._val(h, slots[pos])
            return None
        finally:
            self._lock(h).release()

    def insert(self, key: int, value: int) -> int | None:
        """Bind ``key``; returns the previous handle if it was bound."""
        _check_key(key)
        check_handle(value)
        h = self._find_leaf(key)
        if h:
            try:
                _, slots, keys = self._leaf_view(h)
                pos = bisect_left(keys, key)
                if pos < len(keys) and keys[pos] == key:
                    return self._update_at(h, slots[pos], value)
                if len(keys) < WIDTH:
                    self._insert_at(h, pos, key, value)
                    return None
            finally:
                self._lock(h).release()
        return self._structural(key, lambda path, leaf, held: self._insert_slow(path, leaf, held, key, value))

    def update(self, key: int, value: int) -> int | None:
        """Replace the handle of a present key; absent keys are left alone."""
        check_handle(value)
        h = self._find_leaf(key)
        if h == 0:
            return None
        try:
            _, slots, keys = self._leaf_view(h)
            pos = bisect_left(keys, key)
            if pos < len(keys) and keys[pos] == key:
                return self._update_at(h, slots[pos], value)
            return None
        finally:
            self._lock(h).release()

    def remove(self, key: int) -> int | None:
        h = self._find_leaf(key)
        if h == 0:
            return None
        try:
            _, slots, keys = self._leaf_view(h)
            pos = bisect_left(keys, key)
            if pos == len(keys) or keys[pos] != key:
                return None
            if len(keys) > 1:
                return self._remove_at(h, pos)
        finally:
            self._lock(h).release()
        return self._structural(key, lambda path, leaf, held: self._remove_slow(path, leaf, held, key))

    def scan(self, start: int, n: int) -> list[tuple[int, int]]:
        """Up to ``n`` (key, handle) pairs with key >= ``start``, in order."""
        out: list[tuple[int, int]] = []
        if n <= 0:
            return out
        h = self._find_leaf(start)
        while h:
            try:
                _, slots, keys = self._leaf_view(h)
                for pos in range(bisect_left(keys, start), len(keys)):
                    out.append((keys[pos], self._val(h, slots[pos])))
                    if len(out) == n:
                        return out
                nxt = _U64.unpack_from(self.arena.mem, h + L.LEAF_NEXT)[0]
            finally:
                self._lock(h).release()
            # no hand-over-hand at the leaf level: merges lock right to left
            h = nxt
            if h:
                self._lock(h).acquire()
                self.recovery.repair_leaf(h)
        return out

    # -- structural paths (root lock and whole path held) -----------------

    def _insert_slow(self, path, leaf: int, held: list[int], key: int, value: int) -> int | None:
        if leaf == 0:
            h = self.alloc.alloc(L.LEAF_CLASS)
            self.arena.store_block(h + L.OBJ_HEADER, leaf_image([(key, value)], self.ep.cur, 0))
            self.alloc.cell_set(L.ROOT_CELL, h)
            return None
        _, slots, keys = self._leaf_view(leaf)
        pos = bisect_left(keys, key)
        if pos < len(keys) and keys[pos] == key:
            return self._update_at(leaf, slots[pos], value)
        if len(keys) < WIDTH:
            self._insert_at(leaf, pos, key, value)
            return None
        self._split_leaf(path, leaf, held, pos, key, value)
        return None

    def _split_leaf(self, path, h: int, held: list[int], pos: int, key: int, value: int) -> None:
        self._ensure_leaf_logged(h, "split")
        perm, slots, keys = self._leaf_view(h)
        entries = [(k, self._val(h, s), s) for k, s in zip(keys, slots)]
        entries.insert(pos, (key, value, -1))
        mid = len(entries) // 2
        left, right = entries[:mid], entries[mid:]
        cur = self.ep.cur
        r = self.alloc.alloc(L.LEAF_CLASS)
        nxt = _U64.unpack_from(self.arena.mem, h + L.LEAF_NEXT)[0]
        # fresh node: unreachable if this epoch fails, so it needs no log entry
        self.arena.store_block(r + L.OBJ_HEADER, leaf_image([(k, v) for k, v, _ in right], cur, nxt))
        live = [s for _, _, s in left if s >= 0]
        store = self.arena.store
        if len(live) < len(left):
            free = next(s for s in range(WIDTH) if s not in live)
            i = next(j for j, e in enumerate(left) if e[2] < 0)
            store(h + L.LEAF_KEYS + 8 * free, 8, key)
            store(h + L.LEAF_VALS + 8 * free, 8, value)
            live.insert(i, free)
        store(h + L.LEAF_PERM, 8, perm_from_slots(live))
        store(h + L.LEAF_NEXT, 8, r)
        self.stats.splits += 1
        self._insert_into_parent(path, h, right[0][0], r)

    def _insert_into_parent(self, path, left: int, sep: int, right: int) -> None:
        cur = self.ep.cur
        if not path:
            root = self.alloc.alloc(L.INTERNAL_CLASS)
            self.arena.store_block(root + L.OBJ_HEADER, inode_image([sep], [left, right], cur))
            self.alloc.cell_set(L.ROOT_CELL, root)
            return
        p, i = path[-1]
        self._ensure_inode_logged(p)
        keys, children = self._inode(p)
        keys.insert(i, sep)
        children.insert(i + 1, right)
        if len(keys) <= L.INODE_WIDTH:
            self.arena.store_block(p + L.OBJ_HEADER, inode_image(keys, children, cur))
            return
        mid = len(keys) // 2
        up = keys[mid]
        p2 = self.alloc.alloc(L.INTERNAL_CLASS)
        self.arena.store_block(p2 + L.OBJ_HEADER, inode_image(keys[mid + 1 :], children[mid + 1 :], cur))
        self.arena.store_block(p + L.OBJ_HEADER, inode_image(keys[:mid], children[: mid + 1], cur))
        self._insert_into_parent(path[:-1], p, up, p2)

    def _remove_slow(self, path, leaf: int, held: list[int], key: int) -> int | None:
        if leaf == 0:
            return None
        _, slots, keys = self._leaf_view(leaf)
        pos = bisect_left(keys, key)
        if pos == len(keys) or keys[pos] != key:
            return None
        old = self._remove_at(leaf, pos)
        if len(keys) > 1 or not path:
            return old
        p, i = path[-1]
        pkeys, children = self._inode(p)
        if len(children) < 2:
            return old
        self._unlink_leaf(path, leaf, held)
        self._ensure_inode_logged(p)
        del children[i]
        del pkeys[i - 1 if i > 0 else 0]
        self.arena.store_block(p + L.OBJ_HEADER, inode_image(pkeys, children, self.ep.cur))
        self.alloc.free(leaf, L.LEAF_CLASS)
        self.stats.merges += 1
        return old

    def _unlink_leaf(self, path, leaf: int, held: list[int]) -> None:
        """Point the predecessor leaf's ``next`` past ``leaf``."""
        j = len(path) - 1
        while j >= 0 and path[j][1] == 0:
            j -= 1
        if j < 0:
            return  # leftmost leaf has no predecessor
        node, i = path[j]
        h = self._inode(node)[1][i - 1]
        while True:
            self._lock(h).acquire()
            held.append(h)
            if not self._is_internal(h):
                break
            h = self._inode(h)[1][-1]
        self.recovery.repair_leaf(h)
        self._ensure_leaf_logged(h, "merge")
        self.arena.store(h + L.LEAF_NEXT, 8, _U64.unpack_from(self.arena.mem, leaf + L.LEAF_NEXT)[0])

    # -- whole-tree views (require quiescence) ----------------------------

    def leftmost_leaf(self) -> int:
        h = self.root()
        while h and self._is_internal(h):
            h = self._inode(h)[1][0]
        return h

    def leaves(self) -> Iterator[int]:
        h = self.leftmost_leaf()
        while h:
            yield h
            h = _U64.unpack_from(self.arena.mem, h + L.LEAF_NEXT)[0]

    def items(self) -> Iterator[tuple[int, int]]:
        """Full traversal in key order, repairing every leaf on the way."""
        for h in self.leaves():
            self.recovery.repair_leaf(h)
            _, slots, keys = self._leaf_view(h)
            for k, s in zip(keys, slots):
                yield k, self._val(h, s)

    def nodes(self) -> Iterator[tuple[int, bool]]:
        """Every reachable node as (handle, is_leaf), preorder."""
        stack = [self.root()] if self.root() else []
        while stack:
            h = stack.pop()
            if self._is_internal(h):
                yield h, False
                stack.extend(reversed(self._inode(h)[1]))
            else:
                yield h, True

    def height(self) -> int:
        n, h = 0, self.root()
        while h:
            n += 1
            h = self._inode(h)[1][0] if self._is_internal(h) else 0
        return n

    def check(self) -> None:
        """Assert structural invariants (ordering, separators, leaf chain)."""
        root = self.root()
        if not root:
            return
        chain = list(self.leaves())
        seen: list[int] = []

        def walk(h: int, lo: int, hi: int) -> None:
            if self._is_internal(h):
                keys, children = self._inode(h)
                assert keys == sorted(keys) and len(set(keys)) == len(keys), f"unsorted internal {h:#x}"
                bounds = [lo, *keys, hi]
                for c, a, b in zip(children, bounds, bounds[1:]):
                    walk(c, a, b)
                return
            perm = _U64.unpack_from(self.arena.mem, h + L.LEAF_PERM)[0]
            slots = [(perm >> s) & 0xF for s in range(4, 60, 4)]
            assert sorted(slots) == list(range(WIDTH)), f"bad permutation in leaf {h:#x}"
            _, _, keys = self._leaf_view(h)
            assert keys == sorted(keys) and len(set(keys)) == len(keys), f"unsorted leaf {h:#x}"
            assert all(lo <= k < hi for k in keys), f"leaf {h:#x} keys outside [{lo}, {hi})"
            seen.append(h)

        walk(root, 0, MAX_KEY + 1)
        assert seen == chain, "leaf chain disagrees with tree order"


def _check_key(key: int) -> None:
    if not 0 <= key <= MAX_KEY:
        raise ValueError(f"key {key} is not an unsigned 64-bit integer")


__all__ = ["DurableTree", "Gate", "Op", "TreeStats", "leaf_image", "inode_image", "EMPTY_PERMUTATION"]
