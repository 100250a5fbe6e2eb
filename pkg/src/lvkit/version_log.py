"""Global version log: one head object naming a committed version per table.

The head at ``_lv/global/version_log.json`` is ``{"epoch": N, "entries":
{table: version}}``. Transactions read it once to pin read versions across
every table (tables it does not list yet fall back to the table's own tail,
which also bootstraps the head on first publish). Writers funnel through a
single validation ticket at ``_lv/global/validation.lock``; while holding it
they validate, commit each table, publish the updated head, and release.

Per-table bookkeeping during a transaction:

* read version r: what reads were pinned to,
* hidden version h: the newest version observed while executing (starts at r),
* write version w: the slot reserved or intended for our commit,
* log version l: the chain tip observed during validation.

Rules evaluated under the ticket:

* R1 (outdated read, read set):   r < max(h, l) - slack
* R2 (slot taken, write set):     w <= h
* R3 (lost update, write set):    l + logs_written != w  (one log per table)

l is refreshed for read and write tables alike while the ticket is held, so
R1 measures staleness against the table as it stands at validation, not just
against whatever execution happened to observe. R2 deliberately keeps the
execution-time h: a conflict the transaction could not have seen is a lost
update (R3), not a taken slot.

Modes: serializable applies R1 to the read set and R2/R3 to the write set;
write_serializable is the same but read-only transactions skip validation
entirely; snapshot applies only R2/R3. Tables written purely by blind appends
may retarget to the next valid slot on an R2/R3 miss instead of aborting.

Crash safety: the commit intent (final entry JSON per table) is stamped into
the ticket object before any table-level commit. Whoever reaps an expired
ticket first rolls that intent forward idempotently, so a transaction that
died between table commits and head publish still becomes visible exactly
once.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .errors import KeyNotFoundError, RecoveryError
from .object_store import ObjectStore
from .otf_core import LogEntry, latest_version, log_key

HEAD_KEY = "_lv/global/version_log.json"
TICKET_KEY = "_lv/global/validation.lock"
DEFAULT_SLACK = 2
DEFAULT_TICKET_TIMEOUT_MS = 30_000
DEFAULT_TICKET_WAIT_MS = 10_000


@dataclass
class TableVersions:
    read: int | None = None
    hidden: int | None = None
    write: int | None = None
    log: int | None = None
    blind: bool = True  # stays True only while every write was a blind append
    logs_written: int = 0

    def observe(self, version: int) -> None:
        if self.hidden is None or version > self.hidden:
            self.hidden = version


@dataclass
class Violation:
    rule: str
    table: str
    detail: str

    def __str__(self) -> str:
        return f"violation({self.rule}) on {self.table}: {self.detail}"


@dataclass
class ValidationResult:
    compatible: bool
    violations: list[Violation] = field(default_factory=list)
    retargetable: bool = False  # all violations on blind-append tables


def read_head(store: ObjectStore):
    """Returns (doc, etag); (None, None) when no head exists yet."""
    try:
        data, meta = store.get(HEAD_KEY)
    except KeyNotFoundError:
        return None, None
    return json.loads(data), meta.etag


def pin_read_version(store: ObjectStore, table: str, head: dict | None) -> int:
    """Read version for a table: from the head, else the table's own tail."""
    if head is not None and table in head.get("entries", {}):
        return head["entries"][table]
    return latest_version(store, table)


def validate(
    versions: dict[str, TableVersions],
    mode: str,
    read_set: set[str],
    write_set: set[str],
    slack: int = DEFAULT_SLACK,
) -> ValidationResult:
    """Apply R1-R3 for the given isolation mode. Pure function, no I/O."""
    violations: list[Violation] = []
    if mode not in ("serializable", "write_serializable", "snapshot"):
        raise ValueError(f"unknown isolation mode: {mode}")
    if mode == "write_serializable" and not write_set:
        return ValidationResult(compatible=True)
    check_reads = mode in ("serializable", "write_serializable")

    if check_reads:
        for table in sorted(read_set):
            tv = versions[table]
            # Newest state the table is known to have reached: what execution
            # observed, or the chain tip read inside validation — whichever is
            # later. With slack 0 this makes committed reads current at the
            # ticket, which is what makes the serializable mode serializable.
            seen = [v for v in (tv.hidden, tv.log) if v is not None]
            newest = max(seen) if seen else tv.read
            if tv.read is not None and newest is not None and tv.read < newest - slack:
                violations.append(
                    Violation("R1", table, f"read {tv.read} < newest {newest} - slack {slack}")
                )
    for table in sorted(write_set):
        tv = versions[table]
        hidden = tv.hidden if tv.hidden is not None else tv.read
        if tv.write is not None and hidden is not None and tv.write <= hidden:
            violations.append(
                Violation("R2", table, f"write {tv.write} <= hidden {hidden}")
            )
    for table in sorted(write_set):
        tv = versions[table]
        if tv.log is None or tv.write is None:
            continue
        if tv.log + tv.logs_written != tv.write:
            violations.append(
                Violation(
                    "R3",
                    table,
                    f"log {tv.log} + written {tv.logs_written} != write {tv.write}",
                )
            )
    retargetable = bool(violations) and all(
        versions[v.table].blind and v.rule in ("R2", "R3") for v in violations
    )
    return ValidationResult(
        compatible=not violations, violations=violations, retargetable=retargetable
    )


# -- validation ticket --------------------------------------------------------

@dataclass
class TicketHandle:
    txn_id: str
    etag: str
    doc: dict


def _ticket_doc(txn_id: str, now_ms: float, intent: dict | None = None) -> bytes:
    doc = {"txn_id": txn_id, "acquired_at": now_ms}
    if intent is not None:
        doc["intent"] = intent
    return (json.dumps(doc, sort_keys=True) + "\n").encode()


def acquire_ticket(
    store: ObjectStore,
    txn_id: str,
    timeout_ms: float = DEFAULT_TICKET_TIMEOUT_MS,
    wait_ms: float = DEFAULT_TICKET_WAIT_MS,
    clock=time.time,
) -> TicketHandle:
    """Enter the validation critical section.

    Blocks (bounded by wait_ms) while another holder is alive; expired
    holders are rolled forward from their stamped intent and then replaced.
    """
    deadline = time.monotonic() + wait_ms / 1000.0
    while True:
        now_ms = clock() * 1000.0
        payload = _ticket_doc(txn_id, now_ms)
        result = store.put_if_absent(TICKET_KEY, payload)
        if result.created:
            return TicketHandle(txn_id=txn_id, etag=result.meta.etag, doc=json.loads(payload))
        try:
            data, meta = store.get(TICKET_KEY)
        except KeyNotFoundError:
            continue  # released between our put and get; retry immediately
        doc = json.loads(data)
        if now_ms - doc.get("acquired_at", 0) > timeout_ms:
            if doc.get("intent"):
                roll_forward(store, doc)
            takeover = store.overwrite_if_match(TICKET_KEY, payload, meta.etag)
            if takeover.created:
                return TicketHandle(
                    txn_id=txn_id, etag=takeover.meta.etag, doc=json.loads(payload)
                )
            continue
        if time.monotonic() >= deadline:
            raise TimeoutError(f"validation ticket held by {doc.get('txn_id')}")
        store.wait_for_change(store.change_token(), timeout=0.01)


def stamp_intent(store: ObjectStore, handle: TicketHandle, intent: dict) -> TicketHandle:
    """Persist the commit plan into the ticket before any table-level commit.

    intent: {table: {"version": v, "entry": <final log entry JSON>}}.
    """
    payload = _ticket_doc(handle.txn_id, handle.doc["acquired_at"], intent)
    result = store.overwrite_if_match(TICKET_KEY, payload, handle.etag)
    if not result.created:
        raise RecoveryError("validation ticket changed while held")
    return TicketHandle(txn_id=handle.txn_id, etag=result.meta.etag, doc=json.loads(payload))


def release_ticket(store: ObjectStore, handle: TicketHandle) -> None:
    store.delete(TICKET_KEY)


def publish(
    store: ObjectStore,
    updates: dict[str, int],
    expect_failure_impossible: bool = True,
) -> dict:
    """Fold committed versions into the head and bump the epoch.

    Runs under the ticket, so the conditional overwrite cannot legitimately
    fail; versions only move forward, which keeps replays idempotent.
    """
    head, etag = read_head(store)
    if head is None:
        doc = {"epoch": 1, "entries": dict(sorted(updates.items()))}
        result = store.put_if_absent(HEAD_KEY, (json.dumps(doc, sort_keys=True) + "\n").encode())
        if result.created:
            return doc
        head, etag = read_head(store)
    entries = dict(head["entries"])
    for table, version in updates.items():
        entries[table] = max(entries.get(table, -1), version)
    doc = {"epoch": head["epoch"] + 1, "entries": dict(sorted(entries.items()))}
    result = store.overwrite_if_match(
        HEAD_KEY, (json.dumps(doc, sort_keys=True) + "\n").encode(), etag
    )
    if not result.created:
        if expect_failure_impossible:
            raise RecoveryError("head changed while the validation ticket was held")
        return publish(store, updates, expect_failure_impossible)
    return doc


def roll_forward(store: ObjectStore, ticket_doc: dict) -> dict:
    """Finish a commit whose owner died after validation.

    For every table in the intent, make the slot hold the final entry (a live
    marker of the owner is overwritten, an absent slot is filled), then
    publish the head for the slots that landed. Safe to repeat.
    """
    intent = ticket_doc.get("intent") or {}
    owner = ticket_doc.get("txn_id")
    landed: dict[str, int] = {}
    lost: list[str] = []
    for table, info in sorted(intent.items()):
        version = info["version"]
        entry_bytes = (json.dumps(info["entry"], sort_keys=True) + "\n").encode()
        key = log_key(table, version)
        try:
            data, meta = store.get(key)
        except KeyNotFoundError:
            if store.put_if_absent(key, entry_bytes).created:
                landed[table] = version
            else:
                data, meta = store.get(key)
                current = LogEntry.from_bytes(data)
                if current.writer_txn == owner:
                    landed[table] = version
                else:
                    lost.append(table)
            continue
        current = LogEntry.from_bytes(data)
        if current.writer_txn == owner and not current.is_marker:
            landed[table] = version
        elif current.is_marker and (current.lv or {}).get("txn_id") == owner:
            if store.overwrite_if_match(key, entry_bytes, meta.etag).created:
                landed[table] = version
            else:
                lost.append(table)
        else:
            lost.append(table)
    if landed:
        publish(store, landed, expect_failure_impossible=False)
    return {"landed": landed, "lost": lost}


def recover_expired_ticket(
    store: ObjectStore,
    timeout_ms: float = DEFAULT_TICKET_TIMEOUT_MS,
    clock=time.time,
) -> dict | None:
    """Reap an expired ticket outside the acquire path (e.g. a janitor)."""
    try:
        data, meta = store.get(TICKET_KEY)
    except KeyNotFoundError:
        return None
    doc = json.loads(data)
    if clock() * 1000.0 - doc.get("acquired_at", 0) <= timeout_ms:
        return None
    outcome = roll_forward(store, doc) if doc.get("intent") else {"landed": {}, "lost": []}
    # Delete only if the object is still the expired one we read.
    try:
        if store.head(TICKET_KEY).etag == meta.etag:
            store.delete(TICKET_KEY)
    except KeyNotFoundError:
        pass
    return outcome
