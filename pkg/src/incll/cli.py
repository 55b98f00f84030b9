"""Command line: ``incll run``, ``incll crash-test``, ``incll dump-layout``, ``incll recover``.

Metrics go to stdout as JSON lines (or CSV with ``--emit csv``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from incll import layout
from incll.bench.campaign import STRATEGIES, check_store, crash_campaign
from incll.bench.workload import WorkloadSpec, run_workload


def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", choices="abce", default="a")
    p.add_argument("--dist", choices=("uniform", "zipf"), default="uniform")
    p.add_argument("--keys", type=int, default=100_000, help="initial tree size")
    p.add_argument("--ops", type=int, default=100_000, help="total operations")
    p.add_argument("--threads", type=int, default=4, help="logical driver threads")
    p.add_argument("--ops-per-epoch", type=int, default=10_000)
    p.add_argument("--epoch-ms", type=float, default=None, help="wall-clock epochs instead of op counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-incll", action="store_true", help="log every first modification externally")
    p.add_argument("--log-bytes", type=int, default=4 << 20, help="primary external log segment size")
    p.add_argument("--emit", choices=("json", "csv"), default="json")


def _spec(args) -> WorkloadSpec:
    return WorkloadSpec(
        kind=args.workload,
        dist=args.dist,
        keys=args.keys,
        ops=args.ops,
        threads=args.threads,
        ops_per_epoch=args.ops_per_epoch,
        seed=args.seed,
        incll=not args.no_incll,
        epoch_ms=args.epoch_ms,
        log_bytes=args.log_bytes,
    )


def cmd_run(args) -> int:
    report = run_workload(_spec(args))
    sys.stdout.write(report.csv_row(header=True) if args.emit == "csv" else report.to_json() + "\n")
    return 0


def cmd_crash_test(args) -> int:
    spec = _spec(args)
    res = crash_campaign(
        spec,
        args.crashes,
        args.crash_strategy,
        seed=args.seed,
        per_epoch=args.per_epoch,
        dump_dir=args.dump_dir,
        workers=args.workers,
    )
    if args.emit == "csv":
        print("crashes,passed,failed,strategy,replayed,lazyRepairs,elapsed")
        print(f"{res.crashes},{res.passed},{len(res.failures)},{res.strategy},{res.replayed},{res.lazy_repairs},{res.elapsed:.2f}")
    else:
        print(res.to_json())
    return 0 if res.ok else 1


def cmd_dump_layout(args) -> int:
    tables = layout.describe()
    if args.emit == "csv":
        print("table,field,offset,size,line")
        for name, rows in tables.items():
            for r in rows:
                print(f'{name},"{r["field"]}",{r["offset"]},{r["size"]},{r["line"]}')
    else:
        for name, rows in tables.items():
            for r in rows:
                print(json.dumps({"table": name, **r}))
    return 0


def cmd_recover(args) -> int:
    import numpy as np

    from incll.recovery import recover_store

    store = recover_store(args.image, workers=args.workers)
    out = {"epoch": store.epoch, "replayed": store.replayed, "failedEpochs": sorted(store.ep.failed)}
    if args.expected:
        why = check_store(store, np.load(args.expected))
        out["matches"] = why is None
        if why:
            out["mismatch"] = why
    else:
        store.repair_all()
        out["keys"] = sum(1 for _ in store.items())
    out["leafRepairs"] = store.recovery.n_repaired
    print(json.dumps(out, sort_keys=True))
    return 0 if out.get("matches", True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incll", description="Durable B+ tree on a simulated PCSO arena")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a workload and emit metrics")
    _workload_args(run)
    run.set_defaults(func=cmd_run)

    crash = sub.add_parser("crash-test", help="crash, recover and compare against the oracle")
    _workload_args(crash)
    crash.add_argument("--crashes", type=int, default=100)
    crash.add_argument("--crash-strategy", choices=STRATEGIES, default="random")
    crash.add_argument("--per-epoch", type=int, default=25, help="crash points per epoch")
    crash.add_argument("--workers", type=int, default=None, help="replay workers (default: random 1/2/4)")
    crash.add_argument("--dump-dir", default=None, help="write counterexamples here")
    crash.set_defaults(func=cmd_crash_test)

    dump = sub.add_parser("dump-layout", help="print arena and node offset tables")
    dump.add_argument("--emit", choices=("json", "csv"), default="json")
    dump.set_defaults(func=cmd_dump_layout)

    rec = sub.add_parser("recover", help="recover a saved arena image in this process")
    rec.add_argument("image")
    rec.add_argument("--workers", type=int, default=1)
    rec.add_argument("--expected", help=".npy of expected payloads (keys 0..n-1)")
    rec.set_defaults(func=cmd_recover)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
