import json

import numpy as np
import pytest

from incll.bench import WorkloadRunner, WorkloadSpec
from incll.bench.campaign import check_store, crash_campaign, leaf_arrays

SPEC = WorkloadSpec(keys=3000, ops=4000, ops_per_epoch=400, threads=4, seed=1)


@pytest.mark.parametrize("strategy", ["random", "adversarial"])
def test_campaign_passes(strategy):
    res = crash_campaign(SPEC, 40, strategy, seed=2, per_epoch=10)
    assert res.ok and res.passed == 40, res.failures
    assert json.loads(res.to_json())["ok"]


def test_mid_operation_campaign():
    spec = WorkloadSpec(keys=2000, ops=2000, ops_per_epoch=200, threads=1, seed=3, dist="zipf")
    res = crash_campaign(spec, 40, "random", seed=4, per_epoch=10)
    assert res.ok, res.failures


def test_exhaustive_campaign_on_a_small_run():
    spec = WorkloadSpec(keys=50, ops=6, ops_per_epoch=6, threads=6, seed=5)
    res = crash_campaign(spec, 1, "exhaustive", seed=1, per_epoch=1)
    assert res.ok and res.crashes >= 1


def test_no_incll_campaign():
    spec = WorkloadSpec(keys=2000, ops=2000, ops_per_epoch=400, incll=False, seed=6)
    assert crash_campaign(spec, 20, seed=7, per_epoch=10).ok


def test_leaf_arrays_match_traversal():
    runner = WorkloadRunner(SPEC)
    runner.run_epoch()
    keys, handles = leaf_arrays(runner.store)
    assert list(zip(keys.tolist(), handles.tolist())) == list(runner.store.items())
    assert check_store(runner.store, runner.values, runner.free_snapshot) is None
    wrong = runner.values.copy()
    wrong[17] += 1
    assert "key 17" in check_store(runner.store, wrong)


def test_counterexample_dump(tmp_path):
    runner = WorkloadRunner(SPEC)
    runner.run_epoch()
    runner.snapshot = runner.snapshot + np.uint64(1)  # an oracle that cannot match
    res = crash_campaign(SPEC, 1, seed=1, per_epoch=1, dump_dir=tmp_path, runner=runner)
    assert not res.ok and len(res.failures) == 1
    d = tmp_path / "counterexample-000"
    meta = json.loads((d / "counterexample.json").read_text())
    assert meta["reason"] and meta["spec"]["keys"] == SPEC.keys
    assert (d / "image.pcso").exists() and (d / "live-arena.pcso").exists()
    assert np.load(d / "expected-payloads.npy").shape == (SPEC.keys,)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        crash_campaign(SPEC, 1, "sideways")
