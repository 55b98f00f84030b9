"""Durable Masstree-style ordered map with in-cache-line undo logging.

Everything runs on a simulated persistent-memory arena that follows the
PCSO ordering model and supports crash injection.
"""

from incll.arena import (
    ArenaFault,
    CrashImage,
    ExhaustiveSpaceTooLarge,
    PersistentArena,
    SimulatedCrash,
)
from incll.store import DurableStore, StoreConfig
from incll.recovery import recover_store

__all__ = [
    "ArenaFault",
    "CrashImage",
    "DurableStore",
    "ExhaustiveSpaceTooLarge",
    "PersistentArena",
    "SimulatedCrash",
    "StoreConfig",
    "recover_store",
]

__version__ = "0.1.0"
