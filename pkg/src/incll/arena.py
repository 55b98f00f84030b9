"""Simulated persistent memory following the PCSO ordering model.

Every store lands in the live (cache) image immediately and is appended to
its cache line's pending history.  A line's persisted bytes at crash time
are the fence floor plus any prefix of that history: same-line stores reach
NVM in issue order, stores to different lines are unordered unless a flush
of the earlier line was fenced in between.

History below a line's fence floor is folded into the persisted image as
soon as the floor moves, so memory stays proportional to the unfenced
stores.  Absolute store counts per line are still tracked for reporting.
"""

from __future__ import annotations

import itertools
import random
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

LINE_SIZE = 64
LINE_SHIFT = 6

SNAPSHOT_MAGIC = b"PCSO"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sIQ")

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")

DEFAULT_EXHAUSTIVE_BOUND = 1 << 16


class ArenaFault(Exception):
    """Out-of-bounds, misaligned or line-straddling access."""


class SimulatedCrash(Exception):
    """Raised from a store once the injected crash point is reached."""


class ExhaustiveSpaceTooLarge(Exception):
    pass


@dataclass
class CrashImage:
    """Arena bytes as they would be found in NVM after power loss.

    ``cutoffs`` maps each line that had unfenced stores to the absolute
    number of its stores that made it (always >= the line's fenced cutoff).
    """

    data: bytearray
    cutoffs: dict[int, int] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        save_snapshot(path, self.data)


class PersistentArena:
    def __init__(self, size: int, *, exhaustive_bound: int = DEFAULT_EXHAUSTIVE_BOUND):
        if size <= 0 or size % LINE_SIZE:
            raise ValueError("arena size must be a positive multiple of 64")
        self.size = size
        self.mem = bytearray(size)
        self._persisted = bytearray(size)
        self._pending: dict[int, list[tuple[int, bytes, int]]] = {}
        self._floor: dict[int, int] = {}
        self._flushq: dict[int, int] = {}
        self._seq = 0
        self._crash_at: int | None = None
        self.crashed = False
        self.exhaustive_bound = exhaustive_bound
        self.fence_hook: Callable[[PersistentArena], None] | None = None
        self._lock = threading.Lock()
        self.n_stores = 0
        self.n_flushes = 0
        self.n_fences = 0
        self.n_global_flushes = 0
        self.dirty_at_last_global_flush = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def from_bytes(cls, data: bytes | bytearray, **kw) -> PersistentArena:
        """Arena whose live and persisted images both equal ``data``."""
        arena = cls(len(data), **kw)
        arena.mem[:] = data
        arena._persisted[:] = data
        return arena

    @classmethod
    def from_image(cls, image: CrashImage, **kw) -> PersistentArena:
        return cls.from_bytes(image.data, **kw)

    def clone(self) -> PersistentArena:
        other = PersistentArena.__new__(PersistentArena)
        other.__dict__.update(self.__dict__)
        other.mem = bytearray(self.mem)
        other._persisted = bytearray(self._persisted)
        other._pending = {k: list(v) for k, v in self._pending.items()}
        other._floor = dict(self._floor)
        other._flushq = dict(self._flushq)
        other._lock = threading.Lock()
        other.fence_hook = None
        return other

    # -- stores and loads -------------------------------------------------

    def _check(self, addr: int, width: int) -> None:
        if width not in (1, 2, 4, 8):
            raise ArenaFault(f"unsupported store width {width}")
        if addr < 0 or addr + width > self.size:
            raise ArenaFault(f"access [{addr:#x}, +{width}) outside arena of {self.size:#x} bytes")
        if addr % width:
            raise ArenaFault(f"misaligned {width}-byte access at {addr:#x}")

    def store(self, addr: int, width: int, value: int) -> None:
        if addr % width or addr < 0 or addr + width > self.size or width not in (1, 2, 4, 8):
            self._check(addr, width)
        data = value.to_bytes(width, "little")
        line = addr >> LINE_SHIFT
        with self._lock:
            seq = self._seq
            if self._crash_at is not None and seq >= self._crash_at:
                self.crashed = True
                raise SimulatedCrash(f"crash injected at store #{seq}")
            self._seq = seq + 1
            self.n_stores += 1
            self.mem[addr : addr + width] = data
            pend = self._pending.get(line)
            if pend is None:
                self._pending[line] = [(addr, data, seq)]
            else:
                pend.append((addr, data, seq))

    def store64(self, addr: int, value: int) -> None:
        self.store(addr, 8, value)

    def store_block(self, addr: int, data: bytes | bytearray | memoryview) -> None:
        """Store ``data`` as a run of independent 8-byte stores."""
        n = len(data)
        if n % 8 or addr % 8:
            raise ArenaFault("block stores must be 8-byte aligned and sized")
        if addr < 0 or addr + n > self.size:
            raise ArenaFault(f"block [{addr:#x}, +{n}) outside arena")
        data = bytes(data)
        with self._lock:
            for off in range(0, n, 8):
                seq = self._seq
                if self._crash_at is not None and seq >= self._crash_at:
                    self.crashed = True
                    raise SimulatedCrash(f"crash injected at store #{seq}")
                self._seq = seq + 1
                self.n_stores += 1
                a = addr + off
                chunk = data[off : off + 8]
                self.mem[a : a + 8] = chunk
                line = a >> LINE_SHIFT
                pend = self._pending.get(line)
                if pend is None:
                    self._pending[line] = [(a, chunk, seq)]
                else:
                    pend.append((a, chunk, seq))

    def store_ordered(self, stores: Iterable[tuple[int, int, int]]) -> None:
        """Issue (addr, width, value) stores in program order.

        Release ordering is free in this model because every line history
        already records issue order; the check below is the assertion hook.
        """
        last: dict[int, int] = {}
        for addr, width, value in stores:
            self.store(addr, width, value)
            line = addr >> LINE_SHIFT
            seq = self._pending[line][-1][2]
            assert seq > last.get(line, -1), "same-line stores recorded out of order"
            last[line] = seq

    def load(self, addr: int, width: int) -> int:
        self._check(addr, width)
        return int.from_bytes(self.mem[addr : addr + width], "little")

    def load64(self, addr: int) -> int:
        return _U64.unpack_from(self.mem, addr)[0]

    def load32(self, addr: int) -> int:
        return _U32.unpack_from(self.mem, addr)[0]

    def write_through(self, addr: int, data: bytes | bytearray | memoryview) -> None:
        """Initialization write that is persistent immediately.

        Only legal on lines with no unfenced history; it stands for "store,
        then global flush" when formatting or bulk loading.
        """
        n = len(data)
        if addr < 0 or addr + n > self.size:
            raise ArenaFault(f"write-through [{addr:#x}, +{n}) outside arena")
        first, last = addr >> LINE_SHIFT, (addr + n - 1) >> LINE_SHIFT
        with self._lock:
            if self._pending and any(ln in self._pending for ln in range(first, last + 1)):
                raise ArenaFault("write-through over a line with unfenced stores")
            self.mem[addr : addr + n] = data
            self._persisted[addr : addr + n] = data

    # -- persistence control ----------------------------------------------

    def flush(self, line: int) -> None:
        with self._lock:
            self.n_flushes += 1
            pend = self._pending.get(line)
            if pend:
                self._flushq[line] = len(pend)

    def flush_range(self, addr: int, size: int) -> None:
        for line in range(addr >> LINE_SHIFT, ((addr + size - 1) >> LINE_SHIFT) + 1):
            self.flush(line)

    def fence(self) -> None:
        if self.fence_hook is not None:
            self.fence_hook(self)
        with self._lock:
            self.n_fences += 1
            for line, n in self._flushq.items():
                pend = self._pending[line]
                for addr, data, _ in pend[:n]:
                    self._persisted[addr : addr + len(data)] = data
                self._floor[line] = self._floor.get(line, 0) + n
                if n == len(pend):
                    del self._pending[line]
                else:
                    del pend[:n]
            self._flushq.clear()

    def global_flush(self) -> int:
        """Persist every line; returns how many lines were dirty."""
        with self._lock:
            dirty = len(self._pending)
            mem, persisted, floor = self.mem, self._persisted, self._floor
            for line, pend in self._pending.items():
                lo = line << LINE_SHIFT
                persisted[lo : lo + LINE_SIZE] = mem[lo : lo + LINE_SIZE]
                floor[line] = floor.get(line, 0) + len(pend)
            self._pending.clear()
            self._flushq.clear()
            self.n_global_flushes += 1
            self.dirty_at_last_global_flush = dirty
            return dirty

    # -- inspection --------------------------------------------------------

    def dirty_lines(self) -> int:
        return len(self._pending)

    def pending(self, line: int) -> list[tuple[int, bytes, int]]:
        """Unfenced (addr, bytes, global seq) stores of ``line`` in issue order."""
        return list(self._pending.get(line, ()))

    def fenced_cutoff(self, line: int) -> int:
        return self._floor.get(line, 0)

    def store_count(self, line: int) -> int:
        return self._floor.get(line, 0) + len(self._pending.get(line, ()))

    def counters(self) -> dict[str, int]:
        return {
            "stores": self.n_stores,
            "flushes": self.n_flushes,
            "fences": self.n_fences,
            "globalFlushes": self.n_global_flushes,
            "dirtyLinesAtLastGlobalFlush": self.dirty_at_last_global_flush,
        }

    def persisted_bytes(self) -> bytes:
        """Persisted image below the fence floors (no unfenced stores)."""
        return bytes(self._persisted)

    # -- crash injection ---------------------------------------------------

    def crash_after(self, n_stores: int | None) -> None:
        """Arrange for the ``n_stores``-th future store to raise SimulatedCrash."""
        self._crash_at = None if n_stores is None else self._seq + n_stores

    @property
    def store_seq(self) -> int:
        return self._seq

    def image(self, keep: dict[int, int]) -> CrashImage:
        """Crash image keeping ``keep[line]`` unfenced stores of each dirty line."""
        data = bytearray(self._persisted)
        cutoffs = {}
        for line, pend in self._pending.items():
            k = keep.get(line, 0)
            if not 0 <= k <= len(pend):
                raise ValueError(f"cutoff {k} invalid for line {line} with {len(pend)} pending stores")
            for addr, chunk, _ in pend[:k]:
                data[addr : addr + len(chunk)] = chunk
            cutoffs[line] = self._floor.get(line, 0) + k
        return CrashImage(data, cutoffs)

    def exhaustive_space(self) -> int:
        total = 1
        for pend in self._pending.values():
            total *= len(pend) + 1
        return total

    def crash_images(self) -> Iterator[CrashImage]:
        """Every admissible image: the cross product of per-line prefixes."""
        space = self.exhaustive_space()
        if space > self.exhaustive_bound:
            raise ExhaustiveSpaceTooLarge(f"{space} images exceed bound {self.exhaustive_bound}")
        lines = sorted(self._pending)
        ranges = [range(len(self._pending[ln]) + 1) for ln in lines]
        for combo in itertools.product(*ranges):
            yield self.image(dict(zip(lines, combo)))

    def crash(self, strategy: str = "random", rng: random.Random | int | None = None):
        """Pick crash image(s).

        ``random``: each line keeps a uniformly chosen prefix.
        ``adversarial``: each line independently keeps either nothing past
        its floor or everything, mixing stale and fresh lines.
        ``exhaustive``: list of every admissible image.
        """
        if strategy == "exhaustive":
            return list(self.crash_images())
        if not isinstance(rng, random.Random):
            rng = random.Random(rng)
        keep = {}
        for line in sorted(self._pending):
            n = len(self._pending[line])
            if strategy == "random":
                keep[line] = rng.randint(0, n)
            elif strategy in ("adversarial", "adversarial-latest"):
                keep[line] = n if rng.random() < 0.5 else 0
            else:
                raise ValueError(f"unknown crash strategy {strategy!r}")
        return self.image(keep)

    # -- snapshot files ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Save the persisted image; only meaningful with no unfenced stores."""
        if self._pending:
            raise ArenaFault("save requires a quiescent, fully persisted arena (call global_flush)")
        save_snapshot(path, self._persisted)

    @classmethod
    def open(cls, path: str | Path, **kw) -> PersistentArena:
        return cls.from_bytes(load_snapshot(path), **kw)


def save_snapshot(path: str | Path, data: bytes | bytearray) -> None:
    with open(path, "wb") as fh:
        fh.write(_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(data)))
        fh.write(data)


def load_snapshot(path: str | Path) -> bytearray:
    raw = Path(path).read_bytes()
    if len(raw) < _SNAP_HEADER.size:
        raise ValueError("snapshot file truncated")
    magic, version, size = _SNAP_HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    body = raw[_SNAP_HEADER.size :]
    if len(body) != size:
        raise ValueError(f"snapshot body is {len(body)} bytes, header says {size}")
    return bytearray(body)
