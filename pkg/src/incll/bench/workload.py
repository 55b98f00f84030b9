"""YCSB-style workloads over a bulk-loaded store, with per-epoch metrics.

Threads are logical: each has its own seeded operation stream and the
driver interleaves them round-robin, one operation per thread per batch.
That keeps every metric (and every crash point) a pure function of the
seed.  Epochs close after a fixed number of operations, or on a wall-clock
timer when ``epoch_ms`` is set (not reproducible; CLI only).
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from statistics import fmean
from typing import Callable, Iterator

import numpy as np

from incll import layout as L
from incll.store import DurableStore, StoreConfig

GET, PUT, SCAN = 0, 1, 2

# (put, get, scan) probabilities
MIXES = {
    "a": (0.5, 0.5, 0.0),
    "b": (0.05, 0.95, 0.0),
    "c": (0.0, 1.0, 0.0),
    "e": (0.0, 0.0, 1.0),
}
ZIPF_SKEW = 0.99


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "a"
    dist: str = "uniform"
    keys: int = 100_000
    ops: int = 100_000
    threads: int = 4
    ops_per_epoch: int = 10_000
    seed: int = 0
    incll: bool = True
    scan_length: int = 10
    epoch_ms: float | None = None
    log_bytes: int = 4 << 20

    def __post_init__(self):
        if self.kind not in MIXES:
            raise ValueError(f"workload must be one of {sorted(MIXES)}")
        if self.dist not in ("uniform", "zipf"):
            raise ValueError("dist must be uniform or zipf")
        if self.keys < 1 or self.ops < 0 or self.threads < 1 or self.ops_per_epoch < 1:
            raise ValueError("keys, threads and ops-per-epoch must be positive")
        assert abs(sum(MIXES[self.kind]) - 1.0) < 1e-12

    def store_config(self) -> StoreConfig:
        n, ope = self.keys, self.ops_per_epoch
        leaves = n // 10 + 2
        need = (
            L.META_END
            + self.log_bytes
            + L.VALUE_CLASS * (n + 4 * ope)
            + L.LEAF_CLASS * (leaves + leaves // 2)
            + L.INTERNAL_CLASS * (leaves // 6 + 8)
            + (8 << 20)
        )
        size = -(-need // (1 << 20)) << 20
        return StoreConfig(arena_size=size, log_bytes=self.log_bytes, incll=self.incll)


class KeyScrambler:
    """Bijection on [0, n): xorshift-multiply rounds on k bits plus cycle walking."""

    _MULS = (0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB)

    def __init__(self, n: int, seed: int = 0):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.bits = max(1, (n - 1).bit_length())
        self.mask = np.uint64((1 << self.bits) - 1)
        self.shift = np.uint64(max(1, self.bits // 2))
        rng = np.random.default_rng([seed, 0x5C4A])
        self.keys = rng.integers(0, 1 << self.bits, size=3, dtype=np.uint64)

    def _round(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            for key, mul in zip(self.keys, self._MULS):
                x = x ^ key
                x = (x * np.uint64(mul | 1)) & self.mask
                x = x ^ (x >> self.shift)
        return x

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.uint64)
        out = self._round(x)
        bad = out >= self.n
        while bad.any():
            out[bad] = self._round(out[bad])
            bad = out >= self.n
        return out


class ZipfGenerator:
    """Zipf(skew) ranks over n keys by inverse CDF, scrambled so hot keys spread out."""

    def __init__(self, n: int, skew: float = ZIPF_SKEW, seed: int = 0, scramble: bool = True):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.skew = skew
        pmf = np.arange(1, n + 1, dtype=np.float64) ** -skew
        self.cdf = np.cumsum(pmf)
        self.cdf /= self.cdf[-1]
        self.rng = np.random.default_rng(seed)
        self.scramble = KeyScrambler(n, seed) if scramble else None

    def ranks(self, size: int) -> np.ndarray:
        r = np.searchsorted(self.cdf, self.rng.random(size), side="right")
        return np.minimum(r, self.n - 1).astype(np.uint64)

    def sample(self, size: int) -> np.ndarray:
        r = self.ranks(size)
        return self.scramble(r) if self.scramble is not None else r


def zipf_keys(n: int, skew: float, seed: int, size: int) -> np.ndarray:
    return ZipfGenerator(n, skew, seed).sample(size)


@dataclass
class MetricsReport:
    workload: str
    dist: str
    keys: int
    ops: int
    threads: int
    opsPerEpoch: int
    seed: int
    incll: bool
    epochs: int
    throughputProxy: float  # operations per simulated epoch
    externalLogEntries: int
    externalLogEntriesPerEpoch: float
    inCLLUses: int
    flushCount: int
    fenceCount: int
    dirtyLinesPerGlobalFlush: float
    loggedByReason: dict[str, int] = field(default_factory=dict)
    perEpochLogEntries: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self, header: bool = False) -> str:
        row = {k: v for k, v in asdict(self).items() if not isinstance(v, (dict, list))}
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(row)
        return buf.getvalue()


class WorkloadRunner:
    """Bulk-loads ``keys`` keys (payload = key) and drives the op streams.

    A caller-supplied ``store`` must already hold that bulk load; it is
    switched to the logging mode in ``spec.incll``.  ``values`` mirrors the
    payload of every key; ``snapshot`` is its copy at the last completed
    epoch, which is what recovery must reproduce.
    """

    def __init__(self, spec: WorkloadSpec, store: DurableStore | None = None):
        self.spec = spec
        if store is None:
            store = DurableStore.create(spec.store_config())
            store.bulk_load((k, k) for k in range(spec.keys))
        store.tree.incll = spec.incll
        self.store = store
        self.values = np.arange(spec.keys, dtype=np.uint64)
        self.snapshot = self.values.copy()
        self.free_snapshot = store.free_objects()
        self._gens = [self._stream(t) for t in range(spec.threads)]
        self._serial = 0
        self.ops_done = 0
        self.epochs = 0
        self.dirty: list[int] = []
        self.per_epoch_log: list[int] = []
        self._base_stats = store.tree.stats.copy()
        self._last_logged = self._base_stats.log_entries
        self._base_counters = store.arena.counters()

    def _stream(self, tid: int) -> Iterator[tuple[int, int]]:
        spec = self.spec
        put, get, _ = MIXES[spec.kind]
        rng = np.random.default_rng([spec.seed, tid, 1])
        zipf = ZipfGenerator(spec.keys, ZIPF_SKEW, seed=spec.seed) if spec.dist == "zipf" else None
        if zipf is not None:
            zipf.rng = np.random.default_rng([spec.seed, tid, 2])
        while True:
            u = rng.random(4096)
            kinds = np.where(u < put, PUT, np.where(u < put + get, GET, SCAN))
            keys = zipf.sample(4096) if zipf is not None else rng.integers(0, spec.keys, 4096, dtype=np.uint64)
            yield from zip(kinds.tolist(), keys.tolist())

    def epoch_ops(self, n: int) -> list[tuple[int, int, int]]:
        """Next ``n`` operations as (kind, key, payload), threads interleaved."""
        out = []
        t = 0
        for _ in range(n):
            kind, key = next(self._gens[t])
            self._serial += 1
            out.append((kind, key, self._serial << 20 | self.epochs))
            t = (t + 1) % len(self._gens)
        return out

    def apply(self, store: DurableStore, op: tuple[int, int, int], track: bool = True) -> None:
        kind, key, payload = op
        if kind == PUT:
            store.put(key, payload)
            if track:
                self.values[key] = payload
        elif kind == GET:
            store.read(key)
        else:
            store.scan(key, self.spec.scan_length)

    def run_epoch(self, on_barrier: Callable[[int, list], None] | None = None, n: int | None = None) -> None:
        """Run one epoch; ``on_barrier(batch_index, ops)`` fires before each batch."""
        spec = self.spec
        n = min(spec.ops_per_epoch, spec.ops - self.ops_done) if n is None else n
        ops = self.epoch_ops(n)
        deadline = None if spec.epoch_ms is None else time.monotonic() + spec.epoch_ms / 1000
        step = spec.threads
        for b, i in enumerate(range(0, len(ops), step)):
            if on_barrier is not None:
                on_barrier(b, ops[i:])
            for op in ops[i : i + step]:
                self.apply(self.store, op)
            if deadline is not None and time.monotonic() >= deadline:
                self.ops_done += min(i + step, len(ops))
                break
        else:
            if on_barrier is not None:
                on_barrier(-(-len(ops) // step), [])
            self.ops_done += len(ops)
        logged = self.store.tree.stats.log_entries
        self.per_epoch_log.append(logged - self._last_logged)
        self._last_logged = logged
        self.store.advance_epoch()
        self.dirty.append(self.store.arena.dirty_at_last_global_flush)
        self.epochs += 1
        self.snapshot = self.values.copy()
        self.free_snapshot = self.store.free_objects()

    def run(self) -> MetricsReport:
        while self.ops_done < self.spec.ops:
            self.run_epoch()
        return self.metrics()

    def metrics(self) -> MetricsReport:
        spec, st = self.spec, self.store.tree.stats
        c = self.store.arena.counters()
        logged = st.log_entries - self._base_stats.log_entries
        reasons = {r: n - self._base_stats.logged.get(r, 0) for r, n in st.logged.items()}
        epochs = max(self.epochs, 1)
        return MetricsReport(
            workload=spec.kind,
            dist=spec.dist,
            keys=spec.keys,
            ops=self.ops_done,
            threads=spec.threads,
            opsPerEpoch=spec.ops_per_epoch,
            seed=spec.seed,
            incll=spec.incll,
            epochs=self.epochs,
            throughputProxy=self.ops_done / epochs,
            externalLogEntries=logged,
            externalLogEntriesPerEpoch=logged / epochs,
            inCLLUses=st.incll_uses - self._base_stats.incll_uses,
            flushCount=c["flushes"] - self._base_counters["flushes"],
            fenceCount=c["fences"] - self._base_counters["fences"],
            dirtyLinesPerGlobalFlush=fmean(self.dirty) if self.dirty else 0.0,
            loggedByReason={r: n for r, n in sorted(reasons.items()) if n},
            perEpochLogEntries=list(self.per_epoch_log),
        )


def run_workload(spec: WorkloadSpec, store: DurableStore | None = None) -> MetricsReport:
    return WorkloadRunner(spec, store).run()
