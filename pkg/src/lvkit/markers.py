"""Reservation markers: claim a log slot now, publish or free it later.

A marker is a log entry whose action list is empty and whose ``lv`` section
records the owning transaction, creation time, dependency list, and timeout.
Plain readers treat it as a no-op, so claiming never perturbs query results.
The owner later either commits (conditionally overwrites the marker with the
real entry) or frees it (overwrites with a released no-op). Any client may
free markers whose timeout expired; freed and committed slots are never
reused, the chain just grows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .errors import KeyNotFoundError, MarkerLostError
from .object_store import ObjectStore
from .otf_core import (
    DEFAULT_CHECKPOINT_INTERVAL,
    Action,
    LogEntry,
    latest_version,
    log_key,
    maybe_checkpoint,
    read_entry,
)

DEFAULT_TIMEOUT_MS = 30_000
DEFAULT_CLAIM_RETRY_LIMIT = 16


@dataclass
class Marker:
    table: str
    version: int
    txn_id: str
    created_at: float  # epoch millis
    depends_on: tuple[str, ...]
    timeout_ms: float
    etag: str

    def to_entry(self) -> LogEntry:
        return LogEntry(
            version=self.version,
            actions=[],
            lv={
                "txn_id": self.txn_id,
                "created_at": self.created_at,
                "depends_on": list(self.depends_on),
                "timeout_ms": self.timeout_ms,
            },
        )

    @staticmethod
    def from_entry(table: str, entry: LogEntry, etag: str = "") -> "Marker":
        lv = entry.lv or {}
        return Marker(
            table=table,
            version=entry.version,
            txn_id=lv["txn_id"],
            created_at=lv["created_at"],
            depends_on=tuple(lv.get("depends_on", [])),
            timeout_ms=lv.get("timeout_ms", DEFAULT_TIMEOUT_MS),
            etag=etag,
        )

    def expired(self, now_ms: float) -> bool:
        return now_ms - self.created_at > self.timeout_ms


@dataclass
class LostRace:
    """Another writer took the slot; retry at new_version_hint."""

    table: str
    new_version_hint: int


def claim_marker(
    store: ObjectStore,
    table: str,
    txn_id: str,
    depends_on: tuple[str, ...] = (),
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
    base_version: int | None = None,
    clock=time.time,
) -> Marker | LostRace:
    """Try to reserve version base_version + 1 (default: current tail + 1).

    On stores without atomic put-if-absent the claim is written blind and
    verified by reading the slot back; a foreign occupant means the race was
    lost exactly as if the conditional put had failed.
    """
    if base_version is None:
        base_version = latest_version(store, table)
    version = base_version + 1
    marker = Marker(
        table=table,
        version=version,
        txn_id=txn_id,
        created_at=clock() * 1000.0,
        depends_on=tuple(depends_on),
        timeout_ms=timeout_ms,
        etag="",
    )
    payload = marker.to_entry().to_bytes()
    key = log_key(table, version)
    result = store.put_if_absent(key, payload)
    if not store.supports_put_if_absent:
        # Blind write: verify ownership via readback. Losing the verify means
        # some other writer's bytes landed last; yield the slot to them.
        try:
            data, meta = store.get(key)
        except KeyNotFoundError:
            return LostRace(table=table, new_version_hint=version)
        current = LogEntry.from_bytes(data)
        if (current.lv or {}).get("txn_id") != txn_id:
            return LostRace(table=table, new_version_hint=version)
        return replace(marker, etag=meta.etag)
    if not result.created:
        return LostRace(table=table, new_version_hint=version)
    return replace(marker, etag=result.meta.etag)


def claim_with_retry(
    store: ObjectStore,
    table: str,
    txn_id: str,
    depends_on: tuple[str, ...] = (),
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
    retry_limit: int = DEFAULT_CLAIM_RETRY_LIMIT,
    clock=time.time,
) -> Marker:
    """Claim at the moving tail, retrying lost races up to retry_limit."""
    base = latest_version(store, table)
    attempts = 0
    while True:
        got = claim_marker(
            store, table, txn_id, depends_on, timeout_ms, base_version=base, clock=clock
        )
        if isinstance(got, Marker):
            return got
        attempts += 1
        if retry_limit is not None and attempts > retry_limit:
            raise MarkerLostError(f"claim on {table} lost {attempts} races")
        # Someone claimed the slot we aimed at; aim past the new tail.
        base = max(got.new_version_hint, latest_version(store, table))


def commit_marker(
    store: ObjectStore,
    marker: Marker,
    actions: list[Action],
    writer_txn: str | None = None,
    checkpoint_interval: int | None = DEFAULT_CHECKPOINT_INTERVAL,
) -> LogEntry:
    """Atomically replace the marker with the final entry for its version.

    Raises MarkerLostError when the slot no longer carries our etag (a reaper
    freed it, or a previous attempt already landed).
    """
    entry = LogEntry(
        version=marker.version, actions=actions, writer_txn=writer_txn or marker.txn_id
    )
    key = log_key(marker.table, marker.version)
    result = store.overwrite_if_match(key, entry.to_bytes(), marker.etag)
    if not result.created:
        raise MarkerLostError(f"marker {marker.table}@{marker.version} was taken over")
    maybe_checkpoint(store, marker.table, marker.version, checkpoint_interval)
    return entry


def abort_marker(store: ObjectStore, marker: Marker, released_by: str | None = None) -> str:
    """Turn the marker into a released no-op entry.

    Returns "freed" when this call performed the release and
    "already_settled" when the slot had already been committed or freed
    (double aborts and owner-vs-reaper races are both harmless).
    """
    entry = LogEntry(
        version=marker.version,
        actions=[],
        lv={
            "txn_id": marker.txn_id,
            "released": True,
            "released_by": released_by or marker.txn_id,
        },
    )
    key = log_key(marker.table, marker.version)
    result = store.overwrite_if_match(key, entry.to_bytes(), marker.etag)
    return "freed" if result.created else "already_settled"


def scan_chain(
    store: ObjectStore, table: str, from_version: int = 0, upto: int | None = None
) -> list[LogEntry]:
    """Entries from_version..upto inclusive (upto defaults to the tail)."""
    if upto is None:
        upto = latest_version(store, table)
    return [read_entry(store, table, v) for v in range(from_version, upto + 1)]


def read_marker(store: ObjectStore, table: str, version: int) -> Marker | None:
    """Current live marker at a slot, with a fresh etag; None if settled."""
    key = log_key(table, version)
    try:
        data, meta = store.get(key)
    except KeyNotFoundError:
        return None
    entry = LogEntry.from_bytes(data)
    if not entry.is_marker:
        return None
    return Marker.from_entry(table, entry, etag=meta.etag)


def scan_markers(
    store: ObjectStore, table: str, from_version: int = 0, upto: int | None = None
) -> list[Marker]:
    """Live markers in version order within the window."""
    out = []
    for entry in scan_chain(store, table, from_version, upto):
        if entry.is_marker:
            out.append(Marker.from_entry(table, entry))
    return out


def update_marker_deps(
    store: ObjectStore, marker: Marker, depends_on: tuple[str, ...]
) -> Marker:
    """Rewrite the marker in place with a new dependency list."""
    updated = replace(marker, depends_on=tuple(depends_on))
    key = log_key(marker.table, marker.version)
    result = store.overwrite_if_match(key, updated.to_entry().to_bytes(), marker.etag)
    if not result.created:
        raise MarkerLostError(f"marker {marker.table}@{marker.version} changed under us")
    return replace(updated, etag=result.meta.etag)


def reap_stale(
    store: ObjectStore,
    table: str,
    now_ms: float | None = None,
    from_version: int = 0,
    released_by: str = "reaper",
) -> list[Marker]:
    """Free every marker whose timeout expired. Sublogs are left untouched so
    a crashed owner can still resume with a fresh claim."""
    if now_ms is None:
        now_ms = time.time() * 1000.0
    freed = []
    for version in range(from_version, latest_version(store, table) + 1):
        marker = read_marker(store, table, version)
        if marker is None or not marker.expired(now_ms):
            continue
        if abort_marker(store, marker, released_by=released_by) == "freed":
            freed.append(marker)
    return freed
