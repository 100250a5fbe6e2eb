"""Benchmark, anomaly, fault-injection and verification drivers.

The harness exercises the storage and transaction layers from the outside:

* :mod:`.workload` — seeded key-value benchmark mixes, a cross-table
  transfer driver, and a serial-replay verifier for finished runs.
* :mod:`.anomalies` — scripted isolation anomalies with expected verdicts
  per feature row.
* :mod:`.faults` — a crash-point matrix over injected store faults plus the
  janitor/owner recovery recipes.
* :mod:`.oracle` — brute-force serializability and isolation checkers over
  recorded histories.
* :mod:`.accounting` — request-count bucketing for overhead comparisons.
"""

from . import accounting, anomalies, faults, oracle, workload

__all__ = ["accounting", "anomalies", "faults", "oracle", "workload"]
