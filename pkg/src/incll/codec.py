"""Bit-packing for the words that live inside leaves and allocator headers.

Three encodings share the same "canonical handle" trick: handles are
16-byte aligned offsets below 2**48, so a 64-bit word can carry the handle
in bits 4-47 and still have 4 low bits and 16 high bits free.

* permutation: bits 0-3 live count, nibble i (bits 4+4i .. 7+4i) is the slot
  holding the i-th smallest key; nibbles past the count are the free pool.
* ValInCLL: bits 0-3 slot index (15 = invalid), bits 4-47 logged handle,
  bits 48-63 low half of the epoch that wrote it.
* pointer cell (allocator header, list heads, bump cursor, root): two such
  words, bits 0-1 a 2-bit counter, bits 4-47 a handle, bits 48-63 one half of
  a 32-bit epoch (high half in the live word, low half in the logged word).
"""

from __future__ import annotations

from typing import NamedTuple

WIDTH = 14
INVALIDIDX = 15
HANDLE_MASK = 0x0000_FFFF_FFFF_FFF0
HANDLE_LIMIT = 1 << 48
EPOCH_LIMIT = 1 << 32

_LOW4 = 0xF
_HALF = 0xFFFF


def higher16(epoch: int) -> int:
    return (epoch >> 16) & _HALF


def lower16(epoch: int) -> int:
    return epoch & _HALF


def join_epoch(high: int, low: int) -> int:
    return ((high & _HALF) << 16) | (low & _HALF)


def reconstruct_epoch(reference: int, low: int) -> int:
    """Full epoch of a ValInCLL word, given the node's nodeEpoch as found.

    The InCLL path is only taken when the high halves of the node epoch and
    the current epoch agree, so a word written while the node was opened
    carries the same high half even if the nodeEpoch store itself was lost.
    """
    return join_epoch(higher16(reference), low)


def check_handle(h: int) -> None:
    if h & _LOW4 or not 0 <= h < HANDLE_LIMIT:
        raise ValueError(f"handle {h:#x} is not a 16-byte aligned offset below 2**48")


# -- permutation -----------------------------------------------------------

EMPTY_PERMUTATION = sum(i << (4 + 4 * i) for i in range(WIDTH))


def perm_decode(word: int) -> tuple[int, list[int]]:
    """Return (count, 14 slot nibbles in order)."""
    return word & _LOW4, [(word >> s) & _LOW4 for s in range(4, 4 + 4 * WIDTH, 4)]


def perm_encode(count: int, slots: list[int]) -> int:
    if not 0 <= count <= WIDTH:
        raise ValueError(f"permutation count {count} out of range")
    word = count
    shift = 4
    for s in slots:
        word |= s << shift
        shift += 4
    return word


def perm_valid(word: int) -> bool:
    count, slots = perm_decode(word)
    return count <= WIDTH and sorted(slots) == list(range(WIDTH))


def perm_insert(word: int, pos: int) -> tuple[int, int]:
    """Claim the first free slot and place it at sorted position ``pos``.

    Returns (new word, claimed slot).
    """
    count, slots = perm_decode(word)
    if count >= WIDTH:
        raise ValueError("permutation is full")
    slot = slots[count]
    del slots[count]
    slots.insert(pos, slot)
    return perm_encode(count + 1, slots), slot


def perm_remove(word: int, pos: int) -> tuple[int, int]:
    """Drop the entry at sorted position ``pos``; its slot heads the free pool."""
    count, slots = perm_decode(word)
    if not 0 <= pos < count:
        raise IndexError(pos)
    slot = slots.pop(pos)
    slots.insert(count - 1, slot)
    return perm_encode(count - 1, slots), slot


def perm_from_slots(live: list[int]) -> int:
    """Permutation listing ``live`` in order, remaining slots free ascending."""
    used = set(live)
    return perm_encode(len(live), list(live) + [s for s in range(WIDTH) if s not in used])


# -- ValInCLL --------------------------------------------------------------


class ValInCLL(NamedTuple):
    idx: int
    handle: int
    low_epoch: int

    @property
    def valid(self) -> bool:
        return self.idx != INVALIDIDX


def valincll_encode(idx: int, handle: int, low_epoch: int) -> int:
    if not 0 <= idx <= _LOW4:
        raise ValueError(f"slot index {idx} does not fit 4 bits")
    check_handle(handle)
    return idx | handle | ((low_epoch & _HALF) << 48)


def valincll_decode(word: int) -> ValInCLL:
    return ValInCLL(word & _LOW4, word & HANDLE_MASK, word >> 48)


def valincll_empty(low_epoch: int) -> int:
    return INVALIDIDX | ((low_epoch & _HALF) << 48)


# -- pointer cell / ObjHeader ---------------------------------------------


class ObjHeader(NamedTuple):
    c1: int
    next: int
    c2: int
    next_incll: int
    epoch_high: int
    epoch_low: int

    @property
    def torn(self) -> bool:
        return self.c1 != self.c2

    @property
    def epoch(self) -> int:
        return join_epoch(self.epoch_high, self.epoch_low)


def cell_word(counter: int, handle: int, half: int) -> int:
    if not 0 <= counter <= 3:
        raise ValueError(f"counter {counter} does not fit 2 bits")
    check_handle(handle)
    return counter | handle | ((half & _HALF) << 48)


def header_encode(c1: int, nxt: int, c2: int, logged: int, epoch: int) -> tuple[int, int]:
    """Pack (next word, nextInCLL word) for a header last written in ``epoch``."""
    return cell_word(c1, nxt, higher16(epoch)), cell_word(c2, logged, lower16(epoch))


def header_decode(next_word: int, incll_word: int) -> ObjHeader:
    return ObjHeader(
        next_word & 3,
        next_word & HANDLE_MASK,
        incll_word & 3,
        incll_word & HANDLE_MASK,
        next_word >> 48,
        incll_word >> 48,
    )
