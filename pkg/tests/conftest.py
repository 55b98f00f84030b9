import random

import pytest

from incll.store import DurableStore, StoreConfig

SMALL = StoreConfig(arena_size=2 << 20, log_bytes=64 << 10)


def small_store(**kw) -> DurableStore:
    cfg = StoreConfig(**{**SMALL.__dict__, **kw})
    return DurableStore.create(cfg)


def fake_handle(i: int) -> int:
    """A 16-byte aligned stand-in for a value handle (never dereferenced)."""
    return 0x10_0000 + 16 * i


@pytest.fixture
def store():
    return small_store()


@pytest.fixture
def rng():
    return random.Random(12345)
