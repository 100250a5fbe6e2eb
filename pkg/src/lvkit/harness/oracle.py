"""Isolation checkers that replay recorded histories against a brute-force model.

The transaction layer records every operation (with the value each read
resolved to) in ``txn_complete`` events. These checkers re-run those
operations against a plain dict-of-rows model:

* :func:`check_serializable` searches for one serial order of the committed
  transactions in which every recorded read matches the model and the model
  ends in the observed final state. It enumerates permutations, so it is
  meant for small histories (<= 8 committed transactions).
* :func:`check_repeatable_reads` verifies, per transaction, that repeated
  reads of the same key are stable and that reads observe the transaction's
  own earlier writes.
* :func:`check_no_lost_updates` verifies that commutative increments all
  land: for every key touched only by ``add`` modifiers, the final value
  must equal the initial value plus the sum of committed deltas.

All checkers are pure functions over an event list; none touch a store.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ..history import Event

Model = dict[tuple[str, str], dict]  # (table, key) -> row


@dataclass
class TxnRecord:
    """One completed transaction, lifted out of a ``txn_complete`` event."""

    txn_id: str
    client: str
    seq: int  # completion order in the history
    committed: bool
    reason: str
    flags: str
    ops: list[dict] = field(default_factory=list)
    versions: dict[str, int] = field(default_factory=dict)

    @property
    def wrote(self) -> bool:
        return any(op["op"] in ("insert", "update", "delete") for op in self.ops)


@dataclass
class Verdict:
    ok: bool
    detail: str = ""
    witness: list[str] | None = None  # serial order that worked, if any

    def __bool__(self) -> bool:  # pragma: no cover - convenience
        return self.ok


def extract_txns(events: list[Event]) -> list[TxnRecord]:
    """All transactions that reached ``txn_complete``, in completion order."""
    out = []
    for ev in events:
        if ev.kind != "txn_complete":
            continue
        p = ev.payload
        out.append(
            TxnRecord(
                txn_id=ev.txn_id,
                client=ev.client,
                seq=ev.seq,
                committed=p.get("outcome") == "committed",
                reason=p.get("reason", ""),
                flags=p.get("flags", ""),
                ops=list(p.get("ops", [])),
                versions=dict(p.get("versions", {}) or {}),
            )
        )
    return out


def apply_modifier_to_row(row: dict | None, modifier: dict) -> dict | None:
    """Row-level semantics of the declarative write modifiers."""
    if modifier.get("delete"):
        return None
    if row is None:
        return None  # update of a missing key is a no-op
    new = dict(row)
    for col, val in modifier.get("set", {}).items():
        new[col] = val
    for col, delta in modifier.get("add", {}).items():
        new[col] = new.get(col, 0) + delta
    return new


def _replay_txn(model: Model, txn: TxnRecord, check_reads: bool) -> str | None:
    """Apply one transaction to ``model``; returns an error string on a
    read-value mismatch, else None."""
    for op in txn.ops:
        kind = op["op"]
        table = op.get("table")
        if kind == "read":
            if not check_reads:
                continue
            expect = op.get("value")
            got = model.get((table, op["key"]))
            if expect != got:
                return (
                    f"txn {txn.txn_id[:8]} read {table}/{op['key']} = {expect!r}"
                    f" but model holds {got!r}"
                )
        elif kind == "insert":
            for row in op["rows"]:
                model[(table, row["key"])] = dict(row)
        elif kind in ("update", "delete"):
            key = (table, op["key"])
            new = apply_modifier_to_row(model.get(key), op["modifier"])
            if new is None:
                model.pop(key, None)
            else:
                model[key] = new
        elif kind == "create_table":
            continue
    return None


def check_serializable(
    events: list[Event],
    initial: Model,
    final: Model,
    max_txns: int = 8,
    check_reads: bool = True,
) -> Verdict:
    """Search for a serial order explaining the recorded reads and final state."""
    committed = [t for t in extract_txns(events) if t.committed]
    if len(committed) > max_txns:
        return Verdict(False, f"{len(committed)} txns exceeds the search bound {max_txns}")
    first_error = ""
    # Completion order is the most likely witness; try it first.
    for perm in itertools.permutations(committed):
        model: Model = {k: dict(v) for k, v in initial.items()}
        err = None
        for txn in perm:
            err = _replay_txn(model, txn, check_reads)
            if err:
                break
        if err:
            first_error = first_error or err
            continue
        if model == final:
            return Verdict(True, witness=[t.txn_id for t in perm])
        first_error = first_error or "final state differs from every replayed order"
    if not committed:
        ok = initial == final
        return Verdict(ok, "" if ok else "no committed txns yet state changed")
    return Verdict(False, f"no serial order works; e.g. {first_error}")


def check_repeatable_reads(events: list[Event]) -> Verdict:
    """Within each committed transaction: re-reads are stable, and reads that
    follow the transaction's own writes observe those writes."""
    for txn in extract_txns(events):
        if not txn.committed:
            continue
        seen: dict[tuple[str, str], dict | None] = {}
        for op in txn.ops:
            key = (op.get("table"), op.get("key"))
            if op["op"] == "read":
                value = op.get("value")
                if key in seen and seen[key] != value:
                    return Verdict(
                        False,
                        f"txn {txn.txn_id[:8]} re-read {key} as {value!r}"
                        f" after observing {seen[key]!r}",
                    )
                seen[key] = value
            elif op["op"] in ("update", "delete"):
                if key in seen:
                    seen[key] = apply_modifier_to_row(seen[key], op["modifier"])
            elif op["op"] == "insert":
                for row in op["rows"]:
                    seen[(op["table"], row["key"])] = dict(row)
    return Verdict(True)


def check_no_lost_updates(
    events: list[Event], initial: Model, final: Model
) -> Verdict:
    """Every committed increment is reflected in the final state.

    Keys written by ``set``/``delete`` modifiers or inserts are skipped: only
    pure add-deltas have order-independent accounting.
    """
    adds: dict[tuple[str, str], dict[str, float]] = {}
    blocked: set[tuple[str, str]] = set()
    for txn in extract_txns(events):
        if not txn.committed:
            continue
        for op in txn.ops:
            if op["op"] == "insert":
                for row in op["rows"]:
                    blocked.add((op["table"], row["key"]))
            elif op["op"] in ("update", "delete"):
                key = (op["table"], op["key"])
                mod = op["modifier"]
                if mod.get("set") or mod.get("delete"):
                    blocked.add(key)
                for col, delta in mod.get("add", {}).items():
                    adds.setdefault(key, {})
                    adds[key][col] = adds[key].get(col, 0) + delta
    checked = 0
    for key, cols in adds.items():
        if key in blocked:
            continue
        base = initial.get(key, {})
        end = final.get(key)
        if end is None:
            return Verdict(False, f"{key} vanished despite only add-updates")
        for col, delta in cols.items():
            expect = base.get(col, 0) + delta
            if end.get(col) != expect:
                return Verdict(
                    False,
                    f"{key}.{col}: expected {base.get(col, 0)} + {delta} = {expect},"
                    f" found {end.get(col)!r} (lost update)",
                )
            checked += 1
    return Verdict(True, f"{checked} increment column(s) verified")


# -- hand-built fixtures -------------------------------------------------------
#
# Known-good and known-bad histories, used to prove the checkers can both
# accept and reject. Each returns (events, initial, final).


def _complete(seq: int, txn_id: str, ops: list[dict], committed: bool = True) -> Event:
    return Event(
        seq=seq,
        ts=float(seq),
        kind="txn_complete",
        txn_id=txn_id,
        client=txn_id,
        payload={
            "outcome": "committed" if committed else "aborted",
            "reason": "" if committed else "test",
            "ops": ops,
            "versions": {},
            "flags": "r",
        },
    )


def fixture_serializable() -> tuple[list[Event], Model, Model]:
    """Two increments and an interleaved-looking reader that still admit the
    serial order T1, T3, T2."""
    initial: Model = {("t", "x"): {"key": "x", "n": 0}}
    events = [
        _complete(1, "T1", [
            {"op": "read", "table": "t", "key": "x", "value": {"key": "x", "n": 0}},
            {"op": "update", "table": "t", "key": "x", "modifier": {"add": {"n": 1}}},
        ]),
        _complete(2, "T3", [
            {"op": "read", "table": "t", "key": "x", "value": {"key": "x", "n": 1}},
        ]),
        _complete(3, "T2", [
            {"op": "read", "table": "t", "key": "x", "value": {"key": "x", "n": 1}},
            {"op": "update", "table": "t", "key": "x", "modifier": {"add": {"n": 1}}},
        ]),
    ]
    final: Model = {("t", "x"): {"key": "x", "n": 2}}
    return events, initial, final


def fixture_circular() -> tuple[list[Event], Model, Model]:
    """Mutual visibility: each txn reads the other's write. No serial order
    can satisfy both reads, so the checker must reject."""
    initial: Model = {
        ("t", "x"): {"key": "x", "v": "init"},
        ("t", "y"): {"key": "y", "v": "init"},
    }
    events = [
        _complete(1, "TA", [
            {"op": "update", "table": "t", "key": "x", "modifier": {"set": {"v": "A"}}},
            {"op": "read", "table": "t", "key": "y", "value": {"key": "y", "v": "B"}},
        ]),
        _complete(2, "TB", [
            {"op": "update", "table": "t", "key": "y", "modifier": {"set": {"v": "B"}}},
            {"op": "read", "table": "t", "key": "x", "value": {"key": "x", "v": "A"}},
        ]),
    ]
    final: Model = {
        ("t", "x"): {"key": "x", "v": "A"},
        ("t", "y"): {"key": "y", "v": "B"},
    }
    return events, initial, final


def fixture_lost_update() -> tuple[list[Event], Model, Model]:
    """Two committed +10 increments but a final state showing only one."""
    initial: Model = {("t", "x"): {"key": "x", "n": 100}}
    ops = [
        {"op": "read", "table": "t", "key": "x", "value": {"key": "x", "n": 100}},
        {"op": "update", "table": "t", "key": "x", "modifier": {"add": {"n": 10}}},
    ]
    events = [_complete(1, "TA", ops), _complete(2, "TB", list(ops))]
    final: Model = {("t", "x"): {"key": "x", "n": 110}}
    return events, initial, final
