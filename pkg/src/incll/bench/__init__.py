"""Workload driver, crash campaigns and the command line front end."""

from incll.bench.workload import MetricsReport, WorkloadRunner, WorkloadSpec, ZipfGenerator, run_workload

__all__ = ["MetricsReport", "WorkloadRunner", "WorkloadSpec", "ZipfGenerator", "run_workload"]
