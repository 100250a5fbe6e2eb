"""Seeded key-value workloads over the transactional client.

The mixes follow the classic YCSB letters:

====  =======================================  =================
name  operation mix                            distribution
====  =======================================  =================
a     50% read / 50% update                    zipfian
b     95% read / 5% update                     zipfian
c     100% read                                zipfian
d     95% read / 5% insert                     latest-skewed
f     50% read / 50% read-modify-write         zipfian
====  =======================================  =================

Operation *streams* are fully deterministic: client ``i`` of a spec draws
from ``random.Random(f"{seed}:{i}")``, so two runs of the same spec issue
identical operations in identical per-client order. With more than one
client the thread interleaving (and therefore the event order in the
history) is up to the scheduler; single-client runs are bit-for-bit
repeatable end to end.

:func:`serial_replay_check` is the correctness oracle for a finished run:
for each table it replays every committed transaction's recorded writes in
commit-version order against a model and compares the result with an actual
scan of the table. When the run used markers it also checks each recorded
read value against the model at that point in the order.
"""

from __future__ import annotations

import math
import random
import statistics
import string
import threading
import time
from collections import Counter
from itertools import accumulate
from dataclasses import dataclass, field, replace

from .. import otf_core
from ..errors import (
    MarkerLostError,
    RedoConflictError,
    StoreError,
    TxnStateError,
    UnsupportedOperationError,
)
from ..history import HistoryLog
from ..object_store import ObjectStore
from ..txn import Client, CommitOutcome, FeatureFlags, TxnConfig
from .oracle import Verdict, apply_modifier_to_row, extract_txns

MIXES: dict[str, dict[str, float]] = {
    "a": {"read": 0.5, "update": 0.5},
    "b": {"read": 0.95, "update": 0.05},
    "c": {"read": 1.0},
    "d": {"read": 0.95, "insert": 0.05},
    "f": {"read": 0.5, "rmw": 0.5},
}

# Herds of clients hammering one table tail need deep claim retries: each
# contender may watch every slot it lost race after race. This is a capacity
# knob, not a semantic one — raising it trades latency for zero aborts.
HERD_CLAIM_RETRY_LIMIT = 100_000

# Failures a transaction can surface to its caller; anything else is a bug in
# the harness or the library and should crash the worker loudly.
ABORT_ERRORS = (
    MarkerLostError,
    RedoConflictError,
    StoreError,
    TxnStateError,
    UnsupportedOperationError,
)


@dataclass
class WorkloadSpec:
    """Declarative description of one benchmark run."""

    name: str = "ycsb-a"
    mix: dict[str, float] = field(default_factory=lambda: dict(MIXES["a"]))
    clients: int = 8
    total_ops: int = 1000
    tables: tuple[str, ...] = ("usertable",)
    rows: int = 1000
    row_size: int = 64
    bundle: str = "txn"  # "query": one op per txn; "txn": ops_per_txn per txn
    ops_per_txn: int = 4
    flags: str = "r"
    isolation_mode: str = "serializable"
    seed: int = 0
    zipf_theta: float = 0.99
    rows_per_file: int = 25

    def __post_init__(self) -> None:
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix ratios must sum to 1, got {total}")
        if self.bundle not in ("query", "txn"):
            raise ValueError(f"unknown bundle style: {self.bundle}")
        unknown = set(self.mix) - {"read", "update", "insert", "rmw"}
        if unknown:
            raise ValueError(f"unknown ops in mix: {sorted(unknown)}")


def ycsb(letter: str, **overrides) -> WorkloadSpec:
    """Spec for a standard mix letter, with field overrides."""
    letter = letter.lower()
    if letter not in MIXES:
        raise ValueError(f"unknown mix '{letter}' (have {sorted(MIXES)})")
    return WorkloadSpec(name=f"ycsb-{letter}", mix=dict(MIXES[letter]), **overrides)


def _zipf_weights(n: int, theta: float) -> list[float]:
    return [1.0 / (i + 1) ** theta for i in range(n)]


def _key(i: int) -> str:
    return f"user{i:08d}"


def _payload(rng: random.Random, size: int) -> str:
    return "".join(rng.choices(string.ascii_lowercase, k=size))


def generate_ops(spec: WorkloadSpec, client_index: int) -> list[list[dict]]:
    """The deterministic op-bundle stream for one client.

    Returns a list of bundles; each bundle is the op list for one
    transaction. Keys are drawn zipfian over the seeded rows (ranks are
    shuffled per-spec so the hot set isn't always the first keys); inserts
    use client-unique keys so blind appends never collide.
    """
    rng = random.Random(f"{spec.seed}:{client_index}")
    rank_rng = random.Random(f"{spec.seed}:ranks")
    ranks = list(range(spec.rows))
    rank_rng.shuffle(ranks)
    weights = _zipf_weights(spec.rows, spec.zipf_theta)
    cum = list(accumulate(weights))
    kinds = list(spec.mix.keys())
    kind_weights = [spec.mix[k] for k in kinds]

    per_client = spec.total_ops // spec.clients
    bundle_size = 1 if spec.bundle == "query" else spec.ops_per_txn
    n_bundles = math.ceil(per_client / bundle_size)
    inserted = 0
    bundles: list[list[dict]] = []
    for b in range(n_bundles):
        ops: list[dict] = []
        for _ in range(min(bundle_size, per_client - b * bundle_size)):
            kind = rng.choices(kinds, cum_weights=None, weights=kind_weights)[0]
            table = spec.tables[rng.randrange(len(spec.tables))]
            hot = ranks[rng.choices(range(spec.rows), cum_weights=cum)[0]]
            if kind == "read":
                ops.append({"op": "read", "table": table, "key": _key(hot)})
            elif kind == "update":
                ops.append(
                    {
                        "op": "update",
                        "table": table,
                        "key": _key(hot),
                        "set": {"field0": _payload(rng, spec.row_size)},
                    }
                )
            elif kind == "rmw":
                ops.append({"op": "rmw", "table": table, "key": _key(hot)})
            elif kind == "insert":
                key = f"new-c{client_index:03d}-{inserted:08d}"
                inserted += 1
                ops.append(
                    {
                        "op": "insert",
                        "table": table,
                        "rows": [
                            {
                                "key": key,
                                "field0": _payload(rng, spec.row_size),
                                "counter": 0,
                            }
                        ],
                    }
                )
        if ops:
            bundles.append(ops)
    return bundles


def seed_store(store: ObjectStore, spec: WorkloadSpec) -> None:
    """Create and populate the spec's tables (version 0 each)."""
    rng = random.Random(f"{spec.seed}:seed")
    client = Client(store, flags=spec.flags, name="seeder")
    for table in spec.tables:
        rows = [
            {"key": _key(i), "field0": _payload(rng, spec.row_size), "counter": 0}
            for i in range(spec.rows)
        ]
        client.create_table(
            table,
            schema={"fields": ["key", "field0", "counter"]},
            rows=rows,
            rows_per_file=spec.rows_per_file,
        )


@dataclass
class WorkloadResult:
    spec: WorkloadSpec
    wall_s: float = 0.0
    committed: int = 0
    aborted: int = 0
    conflicts: int = 0  # aborts whose reason marks a conflict
    applied_ops: int = 0  # ops inside committed transactions
    redo_rounds: int = 0
    shift_count: int = 0
    abort_reasons: Counter = field(default_factory=Counter)
    latencies_ms: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    history: HistoryLog = field(default_factory=HistoryLog)
    usage: dict = field(default_factory=dict)

    @property
    def metrics(self) -> dict:
        lat = sorted(self.latencies_ms)

        def pct(p: float) -> float:
            if not lat:
                return 0.0
            return lat[min(len(lat) - 1, int(p / 100 * len(lat)))]

        return {
            "workload": self.spec.name,
            "flags": self.spec.flags,
            "isolation": self.spec.isolation_mode,
            "clients": self.spec.clients,
            "bundle": self.spec.bundle,
            "total_ops": self.spec.total_ops,
            "applied_ops": self.applied_ops,
            "committed": self.committed,
            "aborted": self.aborted,
            "conflicts": self.conflicts,
            "redo_rounds": self.redo_rounds,
            "shifts": self.shift_count,
            "wall_s": round(self.wall_s, 3),
            "ops_per_s": round(self.applied_ops / self.wall_s, 1) if self.wall_s else 0.0,
            "p50_ms": round(statistics.median(lat), 2) if lat else 0.0,
            "p95_ms": round(pct(95), 2),
            "p99_ms": round(pct(99), 2),
            "usage": self.usage,
        }


def _is_conflict(reason: str | None) -> bool:
    return bool(reason) and reason.startswith("conflict")


def _run_bundle(client: Client, spec: WorkloadSpec, ops: list[dict]) -> CommitOutcome:
    txn = client.begin(isolation_mode=spec.isolation_mode)
    try:
        for op in ops:
            kind = op["op"]
            if kind == "read":
                txn.read(op["table"], op["key"])
            elif kind == "update":
                txn.update(op["table"], op["key"], set_fields=op["set"])
            elif kind == "rmw":
                txn.read(op["table"], op["key"])
                txn.update(op["table"], op["key"], add_fields={"counter": 1})
            elif kind == "insert":
                txn.insert(op["table"], op["rows"])
        return txn.commit()
    except ABORT_ERRORS as exc:
        if txn.status == "active":
            txn.abort()
        outcome = txn.outcome
        if outcome is not None:
            return outcome
        return CommitOutcome(committed=False, reason=f"error: {exc}")


def run_workload(
    store: ObjectStore,
    spec: WorkloadSpec,
    history: HistoryLog | None = None,
    config: TxnConfig | None = None,
    seed_first: bool = True,
) -> WorkloadResult:
    """Seed (unless told otherwise), then drive the spec with one thread per
    client. Returns aggregate metrics plus the shared history."""
    from . import accounting

    if seed_first:
        seed_store(store, spec)
    history = history if history is not None else HistoryLog()
    config = config or TxnConfig(claim_retry_limit=HERD_CLAIM_RETRY_LIMIT)
    result = WorkloadResult(spec=spec, history=history)
    before = accounting.snapshot(store, list(spec.tables))
    lock = threading.Lock()
    start_gate = threading.Barrier(spec.clients)

    def worker(ci: int) -> None:
        client = Client(
            store, flags=spec.flags, config=config, history=history, name=f"c{ci:03d}"
        )
        bundles = generate_ops(spec, ci)
        start_gate.wait()
        for ops in bundles:
            t0 = time.perf_counter()
            try:
                outcome = _run_bundle(client, spec, ops)
            except Exception as exc:  # defensive: a worker must never die silently
                with lock:
                    result.errors.append(f"c{ci}: {type(exc).__name__}: {exc}")
                    result.aborted += 1
                    result.abort_reasons[f"crash: {type(exc).__name__}"] += 1
                continue
            ms = (time.perf_counter() - t0) * 1000.0
            with lock:
                result.latencies_ms.append(ms)
                if outcome.committed:
                    result.committed += 1
                    result.applied_ops += len(ops)
                    result.redo_rounds += outcome.redo_rounds
                    result.shift_count += len(outcome.shifts)
                else:
                    result.aborted += 1
                    result.abort_reasons[outcome.reason or "unknown"] += 1
                    if _is_conflict(outcome.reason):
                        result.conflicts += 1

    threads = [threading.Thread(target=worker, args=(ci,)) for ci in range(spec.clients)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    result.wall_s = time.perf_counter() - t0
    result.usage = accounting.delta(store, list(spec.tables), before).as_dict()
    return result


def serial_replay_check(
    store: ObjectStore,
    spec: WorkloadSpec,
    history: HistoryLog,
    check_reads: bool | None = None,
) -> Verdict:
    """Replay committed transactions per table in commit-version order and
    compare with the table's actual latest contents.

    ``check_reads`` defaults to True when the run used markers (reads then
    re-resolve against the commit position, so version order must explain
    them) and False for bare optimistic runs (reads are snapshot-pinned).
    """
    flags = FeatureFlags.parse(spec.flags)
    if check_reads is None:
        check_reads = flags.markers_enabled
    txns = [t for t in extract_txns(history.events()) if t.committed]
    for table in spec.tables:
        seeded = otf_core.read_rows(store, otf_core.read_snapshot(store, table, 0))
        model: dict[str, dict] = {r["key"]: dict(r) for r in seeded}
        with_version = [(t.versions[table], t) for t in txns if table in t.versions]
        with_version.sort(key=lambda pair: pair[0])
        versions = [v for v, _ in with_version]
        if len(set(versions)) != len(versions):
            return Verdict(False, f"{table}: duplicate commit versions {versions}")
        for _, txn in with_version:
            for op in txn.ops:
                if op.get("table") != table:
                    continue
                kind = op["op"]
                if kind == "read" and check_reads:
                    got = model.get(op["key"])
                    if op.get("value") != got:
                        return Verdict(
                            False,
                            f"{table}/{op['key']}: txn {txn.txn_id[:8]} read"
                            f" {op.get('value')!r}, replay holds {got!r}",
                        )
                elif kind == "insert":
                    for row in op["rows"]:
                        model[row["key"]] = dict(row)
                elif kind in ("update", "delete"):
                    new = apply_modifier_to_row(model.get(op["key"]), op["modifier"])
                    if new is None:
                        model.pop(op["key"], None)
                    else:
                        model[op["key"]] = new
        actual_rows = otf_core.read_rows(store, otf_core.read_snapshot(store, table))
        actual = {r["key"]: r for r in actual_rows}
        if actual != model:
            missing = set(model) - set(actual)
            extra = set(actual) - set(model)
            differ = [k for k in set(model) & set(actual) if model[k] != actual[k]]
            return Verdict(
                False,
                f"{table}: replay mismatch (missing={sorted(missing)[:3]},"
                f" extra={sorted(extra)[:3]}, differ={sorted(differ)[:3]})",
            )
    return Verdict(True, f"{len(txns)} committed txns replayed cleanly")


# -- multi-table transfers -----------------------------------------------------


@dataclass
class TransferResult:
    committed: int = 0
    aborted: int = 0
    shift_records: list = field(default_factory=list)
    total_before: int = 0
    total_after: int = 0
    wall_s: float = 0.0
    history: HistoryLog = field(default_factory=HistoryLog)
    errors: list[str] = field(default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.total_before == self.total_after


def run_transfers(
    store: ObjectStore,
    clients: int = 16,
    txns_per_client: int = 4,
    tables: tuple[str, ...] = ("acct_a", "acct_b"),
    accounts_per_table: int = 8,
    opening_balance: int = 100,
    amount: int = 5,
    flags: str = "r,ct",
    isolation_mode: str = "serializable",
    seed: int = 0,
    config: TxnConfig | None = None,
    history: HistoryLog | None = None,
    seed_first: bool = True,
) -> TransferResult:
    """Randomized cross-table money transfers.

    Each transaction debits an account in one table and credits an account in
    another, so every transaction spans two tables and transfer herds form
    wait cycles on purpose. The invariant is conservation: the grand total
    over all tables never changes.
    """
    history = history if history is not None else HistoryLog()
    config = config or TxnConfig(
        claim_retry_limit=HERD_CLAIM_RETRY_LIMIT, wait_timeout_ms=20_000
    )
    result = TransferResult(history=history)
    if seed_first:
        seeder = Client(store, flags=flags, name="seeder")
        for table in tables:
            rows = [
                {"key": f"acct{i:04d}", "bal": opening_balance}
                for i in range(accounts_per_table)
            ]
            seeder.create_table(table, schema={"fields": ["key", "bal"]}, rows=rows)

    def grand_total() -> int:
        total = 0
        for table in tables:
            snap = otf_core.read_snapshot(store, table)
            total += sum(r["bal"] for r in otf_core.read_rows(store, snap))
        return total

    result.total_before = grand_total()
    lock = threading.Lock()
    gate = threading.Barrier(clients)

    def worker(ci: int) -> None:
        rng = random.Random(f"{seed}:transfer:{ci}")
        client = Client(
            store, flags=flags, config=config, history=history, name=f"x{ci:03d}"
        )
        gate.wait()
        for _ in range(txns_per_client):
            src, dst = rng.sample(range(len(tables)), 2)
            src_key = f"acct{rng.randrange(accounts_per_table):04d}"
            dst_key = f"acct{rng.randrange(accounts_per_table):04d}"
            txn = client.begin(isolation_mode=isolation_mode)
            try:
                txn.read(tables[src], src_key)
                txn.update(tables[src], src_key, add_fields={"bal": -amount})
                txn.update(tables[dst], dst_key, add_fields={"bal": amount})
                outcome = txn.commit()
            except ABORT_ERRORS as exc:
                if txn.status == "active":
                    txn.abort()
                outcome = txn.outcome or CommitOutcome(False, reason=f"error: {exc}")
            except Exception as exc:  # pragma: no cover - surfaced via errors list
                with lock:
                    result.errors.append(f"x{ci}: {type(exc).__name__}: {exc}")
                if txn.status == "active":
                    txn.abort()
                continue
            with lock:
                if outcome.committed:
                    result.committed += 1
                    result.shift_records.extend(outcome.shifts)
                else:
                    result.aborted += 1

    threads = [threading.Thread(target=worker, args=(ci,)) for ci in range(clients)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    result.wall_s = time.perf_counter() - t0
    result.total_after = grand_total()
    return result
