"""Scripted isolation-anomaly scenarios with a pass/fail verdict per feature row.

Each scenario stages the classic interleaving for one anomaly (the letter
names follow the vocabulary of Adya's thesis and the Hermitage test suite)
and reports whether the anomaly was *prevented*. :data:`EXPECTED` pins the
verdict each feature row must produce; :func:`run_matrix` runs every
scenario against every row on a fresh in-memory store and compares.

The two multi-table scenarios adapt to the feature row: with cross-table
coordination off, an application can only issue one single-table
transaction per table, so the scenario degrades to that shape — same
operation order, weaker grouping — which is exactly how those rows earn
their "not prevented" cells.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .. import otf_core
from ..history import HistoryLog
from ..object_store import MemoryStore, ObjectStore
from ..txn import Client, FeatureFlags, Txn, TxnConfig
from .oracle import extract_txns

FLAG_ROWS = ("r", "r,ct", "r,ct,i")

# prevented? per feature row
EXPECTED: dict[str, dict[str, bool]] = {
    "G0-MT": {"r": False, "r,ct": True, "r,ct,i": True},
    "G1a": {"r": True, "r,ct": True, "r,ct,i": True},
    "G1b": {"r": True, "r,ct": True, "r,ct,i": True},
    "G1c-MT": {"r": False, "r,ct": True, "r,ct,i": True},
    "OTV": {"r": True, "r,ct": True, "r,ct,i": True},
    "P4": {"r": True, "r,ct": True, "r,ct,i": True},
    "ConcurrentReads": {"r": False, "r,ct": False, "r,ct,i": True},
}

JOIN_TIMEOUT_S = 60.0


@dataclass
class AnomalyResult:
    scenario: str
    flags: str
    prevented: bool
    expected: bool
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.prevented == self.expected


def _config() -> TxnConfig:
    return TxnConfig(
        wait_timeout_ms=8_000,
        poll_interval_ms=2.0,
        claim_retry_limit=1_000,
    )


def _seed_table(
    client: Client, table: str, rows: list[dict], rows_per_file: int | None = None
) -> None:
    """Create a table through a transaction so every feature row (including
    the validated one, which must see the table in the global head) starts
    from the same published state."""
    txn = client.begin()
    txn.create_table(table, schema={})
    if rows:
        if rows_per_file:
            for i in range(0, len(rows), rows_per_file):
                txn.insert(table, rows[i : i + rows_per_file])
        else:
            txn.insert(table, rows)
    outcome = txn.commit()
    if not outcome.committed:
        raise RuntimeError(f"seed of {table} failed: {outcome.reason}")


def _value(store: ObjectStore, table: str, key: str, col: str):
    snap = otf_core.read_snapshot(store, table)
    rows = otf_core.read_rows(store, snap, keys=[key])
    return rows[0][col] if rows else None


def _final_read(history: HistoryLog, txn_id: str, table: str, key: str, col: str):
    """The value a committed transaction's read resolved to, post any folds."""
    for rec in extract_txns(history.events()):
        if rec.txn_id != txn_id:
            continue
        value = None
        for op in rec.ops:
            if op["op"] == "read" and op["table"] == table and op["key"] == key:
                row = op.get("value")
                value = row.get(col) if row else None
        return value
    return None


def _commit_in_thread(txn: Txn, out: dict, label: str) -> threading.Thread:
    def target() -> None:
        try:
            out[label] = txn.commit()
        except Exception as exc:  # surfaced via details, judged by the caller
            out[label] = exc

    t = threading.Thread(target=target, name=f"commit-{label}")
    t.start()
    return t


def _join_all(threads: list[threading.Thread]) -> bool:
    for t in threads:
        t.join(JOIN_TIMEOUT_S)
    return not any(t.is_alive() for t in threads)


def _committed(out: dict, label: str) -> bool:
    res = out.get(label)
    return getattr(res, "committed", False) is True


# -- scenarios ------------------------------------------------------------------


def scenario_g0_mt(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Write cycle across two tables: A and B each overwrite both tables, in
    opposite orders. Prevented when both tables end with the same last writer."""
    parsed = FeatureFlags.parse(flags)
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    for t in ("t1", "t2"):
        _seed_table(setup, t, [{"key": "k", "v": "init"}])
    ca = Client(store, flags=flags, config=config, history=history, name="A")
    cb = Client(store, flags=flags, config=config, history=history, name="B")
    details: dict = {}
    if parsed.cross_table:
        ta, tb = ca.begin(), cb.begin()
        ta.update("t1", "k", set_fields={"v": "A"})
        tb.update("t1", "k", set_fields={"v": "B"})
        tb.update("t2", "k", set_fields={"v": "B"})
        ta.update("t2", "k", set_fields={"v": "A"})
        out: dict = {}
        threads = [_commit_in_thread(ta, out, "A"), _commit_in_thread(tb, out, "B")]
        details["joined"] = _join_all(threads)
        details["committed"] = sum(_committed(out, x) for x in ("A", "B"))
        details["outcomes"] = {k: repr(v) for k, v in out.items()}
    else:
        # One single-table transaction per step, same interleaved order.
        for client, table, val in (
            (ca, "t1", "A"), (cb, "t1", "B"), (cb, "t2", "B"), (ca, "t2", "A"),
        ):
            txn = client.begin()
            txn.update(table, "k", set_fields={"v": val})
            txn.commit()
        details["committed"] = 4
        details["joined"] = True
    v1, v2 = _value(store, "t1", "k", "v"), _value(store, "t2", "k", "v")
    details["final"] = {"t1": v1, "t2": v2}
    prevented = bool(details["joined"]) and details["committed"] >= 1 and v1 == v2
    return {"prevented": prevented, **details}


def scenario_g1a(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Aborted read: B must never observe A's rolled-back write."""
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    _seed_table(setup, "t", [{"key": "k", "bal": 100}])
    a = Client(store, flags=flags, config=config, history=history, name="A").begin()
    b = Client(store, flags=flags, config=config, history=history, name="B").begin()
    a.update("t", "k", set_fields={"bal": 101})
    seen = b.read("t", "k")
    a.abort()
    outcome = b.commit()
    recorded = _final_read(history, b.txn_id, "t", "k", "bal")
    live = seen["bal"] if seen else None
    prevented = outcome.committed and live == 100 and recorded == 100
    return {"prevented": prevented, "live": live, "recorded": recorded}


def scenario_g1b(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Intermediate read: no reader may see A's halfway value 101."""
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    _seed_table(setup, "t", [{"key": "k", "bal": 100}])
    ca = Client(store, flags=flags, config=config, history=history, name="A")
    cb = Client(store, flags=flags, config=config, history=history, name="B")
    a = ca.begin()
    a.update("t", "k", set_fields={"bal": 101})
    b1 = cb.begin()
    mid = b1.read("t", "k")
    b1.commit()
    a.update("t", "k", set_fields={"bal": 102})
    a.commit()
    b2 = cb.begin()
    after = b2.read("t", "k")
    b2.commit()
    mid_recorded = _final_read(history, b1.txn_id, "t", "k", "bal")
    seen = {
        "mid_live": mid["bal"] if mid else None,
        "mid_recorded": mid_recorded,
        "after": after["bal"] if after else None,
    }
    prevented = 101 not in seen.values() and seen["after"] == 102
    return {"prevented": prevented, **seen}


def scenario_g1c_mt(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Circular information flow across two tables: A writes t1 and reads t2,
    B writes t2 and reads t1. Prevented unless each saw the other's write."""
    parsed = FeatureFlags.parse(flags)
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    for t in ("t1", "t2"):
        _seed_table(setup, t, [{"key": "k", "v": "init"}])
    ca = Client(store, flags=flags, config=config, history=history, name="A")
    cb = Client(store, flags=flags, config=config, history=history, name="B")
    details: dict = {}
    if parsed.cross_table:
        ta, tb = ca.begin(), cb.begin()
        ta.update("t1", "k", set_fields={"v": "A"})
        tb.update("t2", "k", set_fields={"v": "B"})
        ta.read("t2", "k")
        tb.read("t1", "k")
        out: dict = {}
        threads = [_commit_in_thread(ta, out, "A"), _commit_in_thread(tb, out, "B")]
        details["joined"] = _join_all(threads)
        details["committed"] = sum(_committed(out, x) for x in ("A", "B"))
        ra = _final_read(history, ta.txn_id, "t2", "k", "v")
        rb = _final_read(history, tb.txn_id, "t1", "k", "v")
    else:
        # Two sessions, one single-table txn per step: write, then read back
        # the other session's table.
        wa = ca.begin(); wa.update("t1", "k", set_fields={"v": "A"}); wa.commit()
        wb = cb.begin(); wb.update("t2", "k", set_fields={"v": "B"}); wb.commit()
        ra_txn = ca.begin(); ra_row = ra_txn.read("t2", "k"); ra_txn.commit()
        rb_txn = cb.begin(); rb_row = rb_txn.read("t1", "k"); rb_txn.commit()
        ra = ra_row["v"] if ra_row else None
        rb = rb_row["v"] if rb_row else None
        details["joined"] = True
        details["committed"] = 4
    details["views"] = {"A_saw_t2": ra, "B_saw_t1": rb}
    circular = ra == "B" and rb == "A"
    prevented = bool(details["joined"]) and details["committed"] >= 1 and not circular
    return {"prevented": prevented, **details}


def scenario_otv(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Observed transaction vanishes: a reader that saw T1's write to k1 must
    see T1's write to k2 as well, even while T2 overwrites both."""
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    _seed_table(
        setup,
        "acct",
        [{"key": "k1", "bal": 100}, {"key": "k2", "bal": 100}],
        rows_per_file=1,
    )
    w1 = Client(store, flags=flags, config=config, history=history, name="W1")
    w2 = Client(store, flags=flags, config=config, history=history, name="W2")
    rd = Client(store, flags=flags, config=config, history=history, name="R")
    t1 = w1.begin()
    t1.update("acct", "k1", set_fields={"bal": 101})
    t1.update("acct", "k2", set_fields={"bal": 101})
    t1.commit()
    t3 = rd.begin()
    first = t3.read("acct", "k1")
    t2 = w2.begin()
    t2.update("acct", "k1", set_fields={"bal": 102})
    t2.update("acct", "k2", set_fields={"bal": 102})
    out: dict = {}
    thread = _commit_in_thread(t2, out, "W2")  # may queue behind the open reader
    second = t3.read("acct", "k2")
    t3.commit()
    joined = _join_all([thread])
    pair = (
        first["bal"] if first else None,
        second["bal"] if second else None,
    )
    prevented = joined and _committed(out, "W2") and pair[0] == pair[1]
    return {"prevented": prevented, "pair": pair, "joined": joined}


def scenario_p4(store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog) -> dict:
    """Lost update: two read-modify-writes of +25 each must both survive."""
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    _seed_table(setup, "t", [{"key": "k", "bal": 100}])
    a = Client(store, flags=flags, config=config, history=history, name="A").begin()
    b = Client(store, flags=flags, config=config, history=history, name="B").begin()
    a.read("t", "k")
    b.read("t", "k")
    a.update("t", "k", add_fields={"bal": 25})
    b.update("t", "k", add_fields={"bal": 25})
    oa = a.commit()
    ob = b.commit()
    final = _value(store, "t", "k", "bal")
    prevented = oa.committed and ob.committed and final == 150
    return {"prevented": prevented, "final": final}


def scenario_concurrent_reads(
    store: ObjectStore, flags: str, config: TxnConfig, history: HistoryLog
) -> dict:
    """Two readers against two in-flight writers must observe comparable
    cuts: one reader's view may not be newer on t1 yet older on t2."""
    parsed = FeatureFlags.parse(flags)
    setup = Client(store, flags=flags, config=config, history=history, name="setup")
    for t in ("t1", "t2"):
        _seed_table(setup, t, [{"key": "k", "v": 0}])
    wa = Client(store, flags=flags, config=config, history=history, name="WA").begin()
    wb = Client(store, flags=flags, config=config, history=history, name="WB").begin()
    wa.update("t1", "k", set_fields={"v": 1})
    wb.update("t2", "k", set_fields={"v": 1})

    if parsed.cross_table:
        r1 = Client(store, flags=flags, config=config, history=history, name="R1").begin()
        r2 = Client(store, flags=flags, config=config, history=history, name="R2").begin()
        r1_t2 = r1.read("t2", "k")
        r2_t1 = r2.read("t1", "k")
        wa.commit()
        wb.commit()
        r1_t1 = r1.read("t1", "k")
        r2_t2 = r2.read("t2", "k")
        r1.commit()
        r2.commit()
        view1 = (r1_t1["v"], r1_t2["v"])
        view2 = (r2_t1["v"], r2_t2["v"])
    else:
        # Reader sessions issue one single-table read-txn per step.
        c1 = Client(store, flags=flags, config=config, history=history, name="R1")
        c2 = Client(store, flags=flags, config=config, history=history, name="R2")

        def read_once(client: Client, table: str) -> int:
            txn = client.begin()
            row = txn.read(table, "k")
            txn.commit()
            return row["v"]

        r1_t2 = read_once(c1, "t2")
        r2_t1 = read_once(c2, "t1")
        wa.commit()
        wb.commit()
        view1 = (read_once(c1, "t1"), r1_t2)
        view2 = (r2_t1, read_once(c2, "t2"))
    incomparable = (view1[0] > view2[0] and view1[1] < view2[1]) or (
        view1[0] < view2[0] and view1[1] > view2[1]
    )
    return {
        "prevented": not incomparable,
        "view1": view1,
        "view2": view2,
    }


SCENARIOS = {
    "G0-MT": scenario_g0_mt,
    "G1a": scenario_g1a,
    "G1b": scenario_g1b,
    "G1c-MT": scenario_g1c_mt,
    "OTV": scenario_otv,
    "P4": scenario_p4,
    "ConcurrentReads": scenario_concurrent_reads,
}


def run_anomaly(
    scenario: str,
    flags: str,
    store: ObjectStore | None = None,
    config: TxnConfig | None = None,
    history: HistoryLog | None = None,
) -> AnomalyResult:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario '{scenario}' (have {sorted(SCENARIOS)})")
    store = store if store is not None else MemoryStore()
    config = config or _config()
    history = history if history is not None else HistoryLog()
    details = SCENARIOS[scenario](store, flags, config, history)
    prevented = bool(details.pop("prevented"))
    return AnomalyResult(
        scenario=scenario,
        flags=flags,
        prevented=prevented,
        expected=EXPECTED[scenario][flags],
        details=details,
    )


def run_matrix(
    scenarios: list[str] | None = None,
    flag_rows: tuple[str, ...] = FLAG_ROWS,
) -> list[AnomalyResult]:
    """Every scenario x feature row, each on a fresh in-memory store."""
    results = []
    for name in scenarios or sorted(SCENARIOS):
        for flags in flag_rows:
            results.append(run_anomaly(name, flags))
    return results
