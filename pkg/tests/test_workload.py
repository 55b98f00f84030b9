import json

import mpmath
import numpy as np
import pytest
from scipy import stats

from incll.bench import WorkloadRunner, WorkloadSpec, ZipfGenerator, run_workload
from incll.bench.workload import KeyScrambler


@pytest.mark.parametrize("n", [1, 2, 7, 100, 1000, 4097])
def test_scrambler_is_a_bijection(n):
    out = KeyScrambler(n, seed=3)(np.arange(n, dtype=np.uint64))
    assert np.array_equal(np.sort(out), np.arange(n, dtype=np.uint64))


def test_zipf_single_key():
    assert np.all(ZipfGenerator(1, 0.99, seed=1).sample(1000) == 0)


def test_zipf_skew_zero_is_uniform():
    n, size = 50, 200_000
    counts = np.bincount(ZipfGenerator(n, 0.0, seed=2).sample(size).astype(np.int64), minlength=n)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_zipf_top_key_frequency():
    n, s, size = 10**6, 0.99, 4_000_000
    gen = ZipfGenerator(n, s, seed=4)
    top = int(gen.scramble(np.zeros(1, dtype=np.uint64))[0])
    freq = np.count_nonzero(gen.sample(size) == top) / size
    harmonic = mpmath.zeta(s) - mpmath.zeta(s, n + 1)
    expect = float(1 / harmonic)
    assert abs(freq - expect) / expect < 0.01


def test_zipf_rank_order():
    counts = np.bincount(ZipfGenerator(100, 0.99, seed=5, scramble=False).ranks(100_000).astype(np.int64))
    assert counts[0] > counts[1] > counts[10] > counts[99]


SMALL = dict(keys=3000, ops=2000, ops_per_epoch=500, threads=2)


def test_runs_are_deterministic():
    a = run_workload(WorkloadSpec(seed=9, **SMALL))
    b = run_workload(WorkloadSpec(seed=9, **SMALL))
    c = run_workload(WorkloadSpec(seed=10, **SMALL))
    assert a.to_json() == b.to_json() != c.to_json()


def test_read_only_workload_logs_nothing():
    r = run_workload(WorkloadSpec(kind="c", **SMALL))
    assert r.externalLogEntries == 0 and r.inCLLUses == 0 and r.epochs == 4


def test_scan_workload_logs_nothing():
    r = run_workload(WorkloadSpec(kind="e", dist="zipf", **SMALL))
    assert r.externalLogEntries == 0 and r.inCLLUses == 0


def test_update_heavy_uses_incll():
    r = run_workload(WorkloadSpec(kind="a", **SMALL))
    assert r.inCLLUses > r.externalLogEntries > 0
    assert sum(r.perEpochLogEntries) == r.externalLogEntries and len(r.perEpochLogEntries) == r.epochs


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_external_log_without_incll_is_larger(seed):
    with_incll = run_workload(WorkloadSpec(seed=seed, **SMALL))
    without = run_workload(WorkloadSpec(seed=seed, incll=False, **SMALL))
    assert without.externalLogEntries > with_incll.externalLogEntries
    assert without.inCLLUses == 0


def test_runner_state_tracks_the_store():
    spec = WorkloadSpec(dist="zipf", **SMALL)
    runner = WorkloadRunner(spec)
    runner.run_epoch()
    got = {k: v for k, v in runner.store.contents().items()}
    assert got == dict(enumerate(runner.values.tolist()))
    assert np.array_equal(runner.snapshot, runner.values)


def test_report_formats():
    r = run_workload(WorkloadSpec(**SMALL))
    d = json.loads(r.to_json())
    assert {"externalLogEntriesPerEpoch", "inCLLUses", "flushCount", "fenceCount"} <= set(d)
    header, row = r.csv_row(header=True).splitlines()
    assert len(header.split(",")) == len(row.split(","))


def test_spec_validation():
    for bad in (dict(kind="d"), dict(dist="normal"), dict(keys=0), dict(threads=0)):
        with pytest.raises(ValueError):
            WorkloadSpec(**bad)
