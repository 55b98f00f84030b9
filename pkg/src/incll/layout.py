"""Byte offsets of everything the store keeps in the arena.

All multi-byte fields are little-endian.  ``describe()`` renders these tables
for ``incll dump-layout``.
"""

from __future__ import annotations

LINE = 64

# -- metadata region (arena offset 0) --------------------------------------

EPOCH_BLOCK = 0x000  # two 32-byte slots, see EPOCH_SLOT_* below
SUPERBLOCK = 0x040
FAILED_ARRAY = 0x080  # FAILED_CAPACITY x u32, four lines
FAILED_CAPACITY = 64
LOG_HEADER = 0x180
ROOT_CELL = 0x1C0
CLASS_HEADS = 0x200  # one line per size class, pointer cell at +0
BUMP_CELL = 0x380
META_END = 0x400

SIZE_CLASSES = (32, 64, 128, 256, 512, 1024)

# epoch block slot (slot i at EPOCH_BLOCK + 32*i)
EPOCH_SLOT_SIZE = 32
EPOCH_SLOT_SEQ = 0  # u32
EPOCH_SLOT_CUR = 4  # u32
EPOCH_SLOT_COMPLETED = 8  # u32, last epoch whose advance finished
EPOCH_SLOT_NFAILED = 12  # u32
EPOCH_SLOT_CRC = 16  # u32, crc32 of bytes [0, 16)

# superblock
SB_MAGIC = 0  # 8 bytes b"INCLLSTO"
SB_VERSION = 8  # u32
SB_ARENA_SIZE = 16  # u64
SB_LOG_OFFSET = 24  # u64
SB_LOG_BYTES = 32  # u64
SB_HEAP_OFFSET = 40  # u64
SUPERBLOCK_MAGIC = b"INCLLSTO"
LAYOUT_VERSION = 1

# external log header line
LOGH_EPOCH = 0  # u32, epoch the log was last truncated for
LOGH_COUNT = 4  # u32, committed entries since truncation
LOGH_CURSOR = 8  # u64, byte offset of the next entry in the current segment

# external log entry: one header line, then the image padded to 64 bytes
LOGE_COMMIT = 0  # u64: LOG_MAGIC << 32 | epoch, written last
LOGE_ADDR = 8  # u64: first byte of the logged range
LOGE_SIZE = 16  # u32
LOGE_KIND = 20  # u32: 0 node image, 1 link to next segment
LOGE_LINK = 24  # u64: next segment offset (kind 1)
LOGE_LINK_SIZE = 32  # u64: next segment size (kind 1)
LOGE_HEADER = 64
LOG_MAGIC = 0x1C11_0A6E
LOG_KIND_IMAGE = 0
LOG_KIND_LINK = 1

# -- allocated objects -------------------------------------------------------

OBJ_HEADER = 16  # next word + nextInCLL word, kept while allocated

# leaf node, 320 bytes, lives in the 512 class
LEAF_CLASS = 512
LEAF_META = 16  # u64: nodeEpoch u32 | logged u8 | insAllowed u8 | kind u8 | pad
LEAF_PERM = 24  # u64 permutation
LEAF_PERM_INCLL = 32  # u64 permutationInCLL
LEAF_LOCK = 40  # u64 reserved: lock/version, transient in this build
LEAF_NEXT = 48  # u64 next leaf handle
LEAF_PARENT = 56  # u64 reserved, always 0 (descent keeps a path stack)
LEAF_KEYS = 64  # 14 x u64
LEAF_INCLL1 = 192  # ValInCLL for vals[0..6]
LEAF_VALS = 200  # 14 x u64; vals[0..6] share line 3 with InCLL1
LEAF_INCLL2 = 312  # ValInCLL for vals[7..13], line 4
LEAF_SIZE = 320

# internal node, 256 bytes, the 256 class
INTERNAL_CLASS = 256
INODE_LOGGED_EPOCH = 16  # u32 lastLoggedEpoch
INODE_NKEYS = 20  # u8
INODE_KIND = 22  # u8, same byte as the leaf kind
INODE_KEYS = 24  # 14 x u64
INODE_CHILDREN = 136  # 15 x u64
INODE_SIZE = 256
INODE_WIDTH = 14

KIND_LEAF = 1
KIND_INTERNAL = 2
KIND_BYTE = 22

VALUE_CLASS = 32
VALUE_PAYLOAD = 16


def _check() -> None:
    assert LEAF_META // LINE == LEAF_PERM // LINE == LEAF_PERM_INCLL // LINE
    assert LEAF_INCLL1 // LINE == (LEAF_VALS + 6 * 8) // LINE == 3
    assert (LEAF_VALS + 7 * 8) // LINE == (LEAF_VALS + 13 * 8) // LINE == LEAF_INCLL2 // LINE == 4
    assert LEAF_SIZE <= LEAF_CLASS and INODE_CHILDREN + 15 * 8 == INODE_SIZE
    assert BUMP_CELL + LINE <= META_END
    assert CLASS_HEADS + LINE * len(SIZE_CLASSES) <= BUMP_CELL


_check()


def class_head(size_class: int) -> int:
    return CLASS_HEADS + LINE * SIZE_CLASSES.index(size_class)


def leaf_val(slot: int) -> int:
    return LEAF_VALS + 8 * slot


def leaf_key(slot: int) -> int:
    return LEAF_KEYS + 8 * slot


def leaf_incll(slot: int) -> int:
    return LEAF_INCLL1 if slot <= 6 else LEAF_INCLL2


TABLES = {
    "metadata": [
        ("epoch block slot 0", EPOCH_BLOCK, 32),
        ("epoch block slot 1", EPOCH_BLOCK + 32, 32),
        ("superblock", SUPERBLOCK, 48),
        ("failed epochs (u32 x 64)", FAILED_ARRAY, 4 * FAILED_CAPACITY),
        ("external log header", LOG_HEADER, 16),
        ("root pointer cell", ROOT_CELL, 16),
        *[(f"free-list head, class {c}", class_head(c), 16) for c in SIZE_CLASSES],
        ("bump cursor cell", BUMP_CELL, 16),
    ],
    "epoch slot": [
        ("seq (u32)", EPOCH_SLOT_SEQ, 4),
        ("curEpoch (u32)", EPOCH_SLOT_CUR, 4),
        ("lastCompleted (u32)", EPOCH_SLOT_COMPLETED, 4),
        ("failedCount (u32)", EPOCH_SLOT_NFAILED, 4),
        ("crc32 of [0,16) (u32)", EPOCH_SLOT_CRC, 4),
    ],
    "log entry": [
        ("commit word: magic<<32 | epoch", LOGE_COMMIT, 8),
        ("logged address", LOGE_ADDR, 8),
        ("size (u32)", LOGE_SIZE, 4),
        ("kind (u32)", LOGE_KIND, 4),
        ("link segment offset", LOGE_LINK, 8),
        ("link segment size", LOGE_LINK_SIZE, 8),
        ("image (64-byte padded)", LOGE_HEADER, 0),
    ],
    "object header": [
        ("next word: c1 b0-1 | next b4-47 | epoch hi16 b48-63", 0, 8),
        ("nextInCLL word: c2 b0-1 | logged next b4-47 | epoch lo16 b48-63", 8, 8),
    ],
    "leaf": [
        ("allocator header", 0, OBJ_HEADER),
        ("meta: nodeEpoch u32 | logged u8 | insAllowed u8 | kind u8", LEAF_META, 8),
        ("permutation", LEAF_PERM, 8),
        ("permutationInCLL", LEAF_PERM_INCLL, 8),
        ("lock/version (reserved)", LEAF_LOCK, 8),
        ("next leaf", LEAF_NEXT, 8),
        ("parent (reserved)", LEAF_PARENT, 8),
        ("keys[14]", LEAF_KEYS, 112),
        ("InCLL1: idx b0-3 | handle b4-47 | epoch lo16 b48-63", LEAF_INCLL1, 8),
        ("vals[0..13]", LEAF_VALS, 112),
        ("InCLL2", LEAF_INCLL2, 8),
    ],
    "internal": [
        ("allocator header", 0, OBJ_HEADER),
        ("lastLoggedEpoch (u32)", INODE_LOGGED_EPOCH, 4),
        ("nkeys (u8)", INODE_NKEYS, 1),
        ("kind (u8)", INODE_KIND, 1),
        ("keys[14]", INODE_KEYS, 112),
        ("children[15]", INODE_CHILDREN, 120),
    ],
}


def describe() -> dict[str, list[dict[str, int | str]]]:
    return {
        name: [{"field": f, "offset": off, "size": size, "line": off // LINE} for f, off, size in rows]
        for name, rows in TABLES.items()
    }
