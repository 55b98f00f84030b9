"""Crash campaigns: run a workload, crash it, recover, compare with the oracle.

A campaign picks a batch barrier inside some epoch, takes a PCSO crash image
of the arena at that point, recovers a fresh store from the image and checks
it against the oracle snapshot of the last completed epoch: every key's
payload and every free list.  Taking an image does not disturb the running
store, so many campaigns share one workload run.

With one driver thread the crash may also land between any two stores: the
store is forked at the barrier and the fork runs on until an injected crash.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from incll import layout as L
from incll.arena import CrashImage, PersistentArena, SimulatedCrash, save_snapshot
from incll.bench.workload import WorkloadRunner, WorkloadSpec
from incll.recovery import recover_store
from incll.store import DurableStore

log = logging.getLogger(__name__)

STRATEGIES = ("random", "adversarial", "exhaustive")


def leaf_arrays(store: DurableStore) -> tuple[np.ndarray, np.ndarray]:
    """All (keys, value handles) in key order, repairing leaves that need it."""
    tree = store.tree
    leaves = np.fromiter(tree.leaves(), dtype=np.int64)
    if not len(leaves):
        return np.zeros(0, np.uint64), np.zeros(0, np.uint64)
    mem64 = np.frombuffer(store.arena.mem, dtype="<u8")
    meta = mem64[(leaves + L.LEAF_META) >> 3]
    stale = leaves[(meta & 0xFFFF_FFFF) < store.ep.first_exec]
    for h in stale.tolist():
        store.recovery.repair_leaf(h)
    perm = mem64[(leaves + L.LEAF_PERM) >> 3]
    keys = mem64[((leaves + L.LEAF_KEYS) >> 3)[:, None] + np.arange(14)]
    vals = mem64[((leaves + L.LEAF_VALS) >> 3)[:, None] + np.arange(14)]
    count = (perm & 0xF).astype(np.int64)
    order = ((perm[:, None] >> (np.arange(4, 60, 4, dtype=np.uint64))) & np.uint64(0xF)).astype(np.int64)
    live = np.arange(14) < count[:, None]
    rows = np.broadcast_to(np.arange(len(leaves))[:, None], order.shape)
    return keys[rows[live], order[live]], vals[rows[live], order[live]]


def check_store(store: DurableStore, expected: np.ndarray, free_lists: dict | None = None) -> str | None:
    """None if ``store`` holds keys 0..n-1 with payloads ``expected``; else a reason."""
    keys, handles = leaf_arrays(store)
    if len(keys) != len(expected):
        return f"{len(keys)} keys recovered, expected {len(expected)}"
    if not np.array_equal(keys, np.arange(len(expected), dtype=np.uint64)):
        bad = int(np.argmax(keys != np.arange(len(expected), dtype=np.uint64)))
        return f"key set differs first at position {bad}"
    mem64 = np.frombuffer(store.arena.mem, dtype="<u8")
    payloads = mem64[((handles + np.uint64(L.VALUE_PAYLOAD)) >> np.uint64(3)).astype(np.int64)]
    if not np.array_equal(payloads, expected):
        bad = int(np.argmax(payloads != expected))
        return f"key {bad}: payload {int(payloads[bad]):#x}, expected {int(expected[bad]):#x}"
    if free_lists is not None:
        got = store.free_objects()
        for cls, objs in free_lists.items():
            if got.get(cls) != objs:
                return f"free list of class {cls} differs ({len(got.get(cls, []))} vs {len(objs)} objects)"
    return None


@dataclass
class CampaignResult:
    spec: dict
    strategy: str
    crashes: int = 0
    passed: int = 0
    failures: list[dict] = field(default_factory=list)
    replayed: int = 0
    lazy_repairs: int = 0
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.crashes > 0 and not self.failures

    def to_json(self) -> str:
        d = asdict(self)
        d["ok"] = self.ok
        return json.dumps(d, sort_keys=True)


class _Campaign:
    def __init__(self, runner: WorkloadRunner, result: CampaignResult, rng: random.Random, dump_dir, workers):
        self.runner = runner
        self.result = result
        self.rng = rng
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.workers = workers

    def verify(self, image: CrashImage, where: dict) -> None:
        runner, res = self.runner, self.result
        workers = self.workers or self.rng.choice((1, 2, 4))
        cfg = runner.store.config
        try:
            store = recover_store(image, workers=workers, config=cfg)
            why = check_store(store, runner.snapshot, runner.free_snapshot)
            res.replayed += store.replayed
            res.lazy_repairs += store.recovery.n_repaired
        except Exception as exc:  # a crash in recovery is a finding, not a harness error
            why = f"recovery raised {exc!r}"
        res.crashes += 1
        if why is None:
            res.passed += 1
            return
        failure = dict(where, reason=why)
        if self.dump_dir is not None:
            failure["dump"] = str(self._dump(image, failure))
        log.error("campaign %d failed: %s", res.crashes, why)
        res.failures.append(failure)

    def _dump(self, image: CrashImage, failure: dict) -> Path:
        d = self.dump_dir / f"counterexample-{len(self.result.failures):03d}"
        d.mkdir(parents=True, exist_ok=True)
        image.save(d / "image.pcso")
        save_snapshot(d / "live-arena.pcso", self.runner.store.arena.mem)
        np.save(d / "expected-payloads.npy", self.runner.snapshot)
        meta = dict(failure, spec=self.result.spec, cutoffs={str(k): v for k, v in image.cutoffs.items()})
        (d / "counterexample.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return d


def crash_campaign(
    spec: WorkloadSpec,
    crashes: int,
    strategy: str = "random",
    *,
    seed: int | None = None,
    per_epoch: int = 25,
    dump_dir: str | Path | None = None,
    workers: int | None = None,
    runner: WorkloadRunner | None = None,
) -> CampaignResult:
    """Run ``crashes`` crash+recover+compare rounds over one workload run.

    Crash points are uniform over batch barriers of each epoch (including
    the barrier just before the epoch closes), ``per_epoch`` per epoch.
    Exhaustive mode checks every admissible image at each point and counts
    each image as one crash.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    t0 = time.monotonic()
    rng = random.Random(spec.seed if seed is None else seed)
    runner = runner or WorkloadRunner(spec)
    result = CampaignResult(spec=asdict(spec), strategy=strategy)
    camp = _Campaign(runner, result, rng, dump_dir, workers)
    nbatches = -(-spec.ops_per_epoch // spec.threads)
    epoch = 0
    while result.crashes < crashes:
        todo = min(per_epoch, crashes - result.crashes)
        points = sorted(rng.randint(0, nbatches) for _ in range(todo))

        def barrier(b: int, rest: list, points=points, epoch=epoch) -> None:
            while points and points[0] == b:
                points.pop(0)
                where = {"epoch": runner.store.epoch, "workloadEpoch": epoch, "batch": b}
                if spec.threads == 1 and rest and strategy != "exhaustive":
                    camp.verify(_mid_op_image(runner, rest, rng, where), where)
                elif strategy == "exhaustive":
                    for image in runner.store.arena.crash_images():
                        camp.verify(image, where)
                else:
                    where["seed"] = rng.getrandbits(32)
                    camp.verify(runner.store.arena.crash(strategy, random.Random(where["seed"])), where)

        runner.run_epoch(on_barrier=barrier, n=spec.ops_per_epoch)
        epoch += 1
    result.elapsed = time.monotonic() - t0
    return result


def _mid_op_image(runner: WorkloadRunner, rest: list, rng: random.Random, where: dict) -> CrashImage:
    """Image from a fork that crashes after a random number of further stores."""
    fork = runner.store.fork()
    where["storesAfterBarrier"] = n = rng.randint(1, 64)
    where["seed"] = s = rng.getrandbits(32)
    fork.arena.crash_after(n)
    try:
        for op in rest:
            runner.apply(fork, op, track=False)
    except SimulatedCrash:
        pass
    fork.arena.crash_after(None)
    return fork.arena.crash("random", random.Random(s))


def recover_image_file(path: str | Path, workers: int = 1) -> DurableStore:
    return recover_store(PersistentArena.open(path), workers=workers)
