"""Minimal open-table-format metadata layer over an object store.

A table is a linked chain of JSON log entries plus immutable data files:

    <table>/_delta_log/<020d version>.json          one entry per version
    <table>/_delta_log/<020d version>.checkpoint.json
    <table>/_delta_log/_last_checkpoint             pointer {version, checkpoint_key}
    <table>/data/<uuid>.ndjson                      sorted newline-delimited rows

Versions are dense: entry v+1 can only be created via put_if_absent once v
exists, so the chain never has gaps. Entries with an empty action list are
no-ops; readers skip them, which is what keeps slot-reservation markers (see
markers.py) invisible to plain readers.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import KeyNotFoundError, TableNotFoundError, VersionNotAvailableError
from .object_store import ObjectStore

LOG_DIR = "_delta_log"
LAST_CHECKPOINT = "_last_checkpoint"
DEFAULT_CHECKPOINT_INTERVAL = 10


def log_key(table: str, version: int) -> str:
    return f"{table}/{LOG_DIR}/{version:020d}.json"

def checkpoint_key(table: str, version: int) -> str:
    return f"{table}/{LOG_DIR}/{version:020d}.checkpoint.json"

def last_checkpoint_key(table: str) -> str:
    return f"{table}/{LOG_DIR}/{LAST_CHECKPOINT}"

def data_key(table: str, file_id: str | None = None) -> str:
    return f"{table}/data/{file_id or uuid.uuid4().hex}.ndjson"


@dataclass(frozen=True)
class Action:
    """One change inside a log entry.

    kind: add_file | remove_file | set_metadata.
    add_file carries the data file path and the [min, max] key range of its
    rows; remove_file carries the path; set_metadata carries a payload dict.
    """

    kind: str
    file_path: str | None = None
    key_range: tuple[str, str] | None = None
    payload: dict | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.file_path is not None:
            out["file_path"] = self.file_path
        if self.key_range is not None:
            out["key_range"] = list(self.key_range)
        if self.payload is not None:
            out["payload"] = self.payload
        return out

    @staticmethod
    def from_json(obj: dict) -> "Action":
        kr = obj.get("key_range")
        return Action(
            kind=obj["kind"],
            file_path=obj.get("file_path"),
            key_range=(kr[0], kr[1]) if kr else None,
            payload=obj.get("payload"),
        )


@dataclass
class LogEntry:
    version: int
    actions: list[Action] = field(default_factory=list)
    writer_txn: str | None = None
    lv: dict | None = None  # slot-reservation bookkeeping; absent on plain entries

    def to_bytes(self) -> bytes:
        out: dict[str, Any] = {
            "version": self.version,
            "actions": [a.to_json() for a in self.actions],
        }
        if self.writer_txn is not None:
            out["writer_txn"] = self.writer_txn
        if self.lv is not None:
            out["lv"] = self.lv
        return (json.dumps(out, sort_keys=True) + "\n").encode()

    @staticmethod
    def from_bytes(data: bytes) -> "LogEntry":
        obj = json.loads(data)
        return LogEntry(
            version=obj["version"],
            actions=[Action.from_json(a) for a in obj.get("actions", [])],
            writer_txn=obj.get("writer_txn"),
            lv=obj.get("lv"),
        )

    @property
    def is_noop(self) -> bool:
        return not self.actions

    @property
    def is_marker(self) -> bool:
        return not self.actions and self.lv is not None and not self.lv.get("released")


@dataclass
class Snapshot:
    """Reconstructed table state at one version: the set of live files."""

    table: str
    version: int
    live_files: dict[str, Action]  # file_path -> add_file action
    metadata: dict = field(default_factory=dict)
    # Slots at or below ``version`` that held a live reservation when the
    # snapshot was built. Their content is not final yet: a commit landing
    # there later must still be picked up by whoever tracks this table.
    reserved: set[int] = field(default_factory=set)

    @property
    def file_paths(self) -> set[str]:
        return set(self.live_files)


@dataclass
class CommitResult:
    committed: bool
    version: int | None = None
    entry: LogEntry | None = None


def create_table(
    store: ObjectStore,
    table: str,
    schema: dict | None = None,
    initial_actions: Iterable[Action] = (),
) -> LogEntry:
    """Commit version 0: table metadata plus any seed files."""
    actions = [Action(kind="set_metadata", payload=schema or {})]
    actions.extend(initial_actions)
    entry = LogEntry(version=0, actions=actions)
    result = store.put_if_absent(log_key(table, 0), entry.to_bytes())
    if not result.created:
        raise FileExistsError(f"table already exists: {table}")
    return entry


def read_last_checkpoint(store: ObjectStore, table: str) -> dict | None:
    try:
        data, _ = store.get(last_checkpoint_key(table))
    except KeyNotFoundError:
        return None
    return json.loads(data)


def latest_version(store: ObjectStore, table: str) -> int:
    """Highest existing version (committed or reserved).

    Uses the _last_checkpoint pointer to bound the listing when present.
    Raises TableNotFoundError for a table with no log at all.
    """
    pointer = read_last_checkpoint(store, table)
    prefix = f"{table}/{LOG_DIR}/"
    start_after = None
    floor = -1
    if pointer is not None:
        floor = pointer["version"]
        start_after = log_key(table, floor)
    keys = store.list(prefix, start_after=start_after)
    best = floor
    for key in keys:
        name = key.rsplit("/", 1)[-1]
        if not name.endswith(".json") or name.endswith(".checkpoint.json"):
            continue
        try:
            best = max(best, int(name[:-5]))
        except ValueError:
            continue
    if best < 0:
        raise TableNotFoundError(table)
    return best


def read_entry(store: ObjectStore, table: str, version: int) -> LogEntry:
    try:
        data, _ = store.get(log_key(table, version))
    except KeyNotFoundError:
        raise VersionNotAvailableError(f"{table}@{version}") from None
    return LogEntry.from_bytes(data)


def _apply_entry(live: dict[str, Action], metadata: dict, entry: LogEntry) -> None:
    for action in entry.actions:
        if action.kind == "add_file":
            live[action.file_path] = action
        elif action.kind == "remove_file":
            live.pop(action.file_path, None)
        elif action.kind == "set_metadata":
            metadata.update(action.payload or {})


def read_snapshot(store: ObjectStore, table: str, version: int | None = None) -> Snapshot:
    """Rebuild live-file state at ``version`` (default: latest).

    Starts from the newest checkpoint at or below the target when one exists,
    then replays the remaining entries. No-op entries (markers, freed slots)
    contribute nothing, so reservation chatter never changes what is read.
    """
    if version is None:
        version = latest_version(store, table)
    live: dict[str, Action] = {}
    metadata: dict = {}
    start = 0
    pointer = read_last_checkpoint(store, table)
    if pointer is not None and pointer["version"] <= version:
        data, _ = store.get(pointer["checkpoint_key"])
        cp = json.loads(data)
        for item in cp["live_files"]:
            action = Action.from_json(item)
            live[action.file_path] = action
        metadata = dict(cp.get("table_metadata", {}))
        start = cp["through_version"] + 1
    reserved: set[int] = set()
    for v in range(start, version + 1):
        entry = read_entry(store, table, v)
        if entry.is_marker:
            reserved.add(v)
            continue
        if entry.is_noop:
            continue  # freed or empty slot: contributes nothing, ever
        if reserved:
            # A lower slot is still unresolved. This entry is final, but its
            # effects assume everything below it; applying it now would fold
            # the chain out of order (a slot read as live a moment ago may
            # land while we walk). Leave it for whoever tracks the table.
            reserved.add(v)
            continue
        _apply_entry(live, metadata, entry)
    return Snapshot(
        table=table, version=version, live_files=live, metadata=metadata, reserved=reserved
    )


def commit_single(
    store: ObjectStore,
    table: str,
    actions: list[Action],
    base_version: int,
    writer_txn: str | None = None,
    checkpoint_interval: int | None = DEFAULT_CHECKPOINT_INTERVAL,
) -> CommitResult:
    """Optimistic single-entry commit at base_version + 1.

    Loses to any concurrent writer of the same slot; the caller decides
    whether to rebase and retry.
    """
    version = base_version + 1
    entry = LogEntry(version=version, actions=actions, writer_txn=writer_txn)
    result = store.put_if_absent(log_key(table, version), entry.to_bytes())
    if not result.created:
        return CommitResult(committed=False, version=version)
    maybe_checkpoint(store, table, version, checkpoint_interval)
    return CommitResult(committed=True, version=version, entry=entry)


def write_checkpoint(store: ObjectStore, table: str, version: int) -> str:
    """Materialize the snapshot at ``version`` and advance the pointer.

    Pointer advances only forward; a slow checkpointer losing the conditional
    overwrite simply leaves the newer pointer in place.
    """
    snap = read_snapshot(store, table, version)
    if snap.reserved:
        # Unresolved slots cap what the snapshot actually reflects; a pointer
        # past them would make later readers skip entries never applied here.
        version = min(snap.reserved) - 1
        if version < 0:
            raise VersionNotAvailableError(
                f"{table}: no settled prefix to checkpoint"
            )
    cp_key = checkpoint_key(table, version)
    payload = {
        "through_version": version,
        "live_files": [a.to_json() for a in snap.live_files.values()],
        "table_metadata": snap.metadata,
    }
    store.put(cp_key, (json.dumps(payload, sort_keys=True) + "\n").encode())
    pointer = json.dumps({"version": version, "checkpoint_key": cp_key}).encode()
    ptr_key = last_checkpoint_key(table)
    for _ in range(4):
        try:
            data, meta = store.get(ptr_key)
        except KeyNotFoundError:
            if store.put_if_absent(ptr_key, pointer).created:
                return cp_key
            continue
        current = json.loads(data)
        if current["version"] >= version:
            return cp_key
        if store.overwrite_if_match(ptr_key, pointer, meta.etag).created:
            return cp_key
    return cp_key


def maybe_checkpoint(
    store: ObjectStore, table: str, version: int, interval: int | None
) -> None:
    """Best-effort cadence checkpointing after a commit the caller made."""
    if interval and version > 0 and version % interval == 0:
        write_checkpoint(store, table, version)


# -- row-level helpers ------------------------------------------------------

def encode_rows(rows: list[dict]) -> bytes:
    rows = sorted(rows, key=lambda r: r["key"])
    return ("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)).encode()


def decode_rows(data: bytes) -> list[dict]:
    return [json.loads(line) for line in data.splitlines() if line.strip()]


def write_data_file(store: ObjectStore, table: str, rows: list[dict]) -> Action:
    """Upload one sorted ndjson file and return its add_file action."""
    if not rows:
        raise ValueError("refusing to write an empty data file")
    for row in rows:
        if "key" not in row:
            raise ValueError("every row needs a 'key' field")
    key = data_key(table)
    store.put(key, encode_rows(rows))
    keys = sorted(r["key"] for r in rows)
    return Action(kind="add_file", file_path=key, key_range=(keys[0], keys[-1]))


def read_file_rows(store: ObjectStore, file_path: str) -> list[dict]:
    data, _ = store.get(file_path)
    return decode_rows(data)


def read_rows(
    store: ObjectStore,
    snapshot: Snapshot,
    keys: Iterable[str] | None = None,
    predicate: Callable[[dict], bool] | None = None,
) -> list[dict]:
    """Rows visible in ``snapshot``, optionally restricted to ``keys``.

    Uses key ranges to skip files that cannot contain the requested keys.
    Each key is owned by exactly one live file; if several files carry the
    same key the lexicographically last file path wins, which matches replay
    order being irrelevant for well-formed tables and keeps reads total.
    """
    wanted = set(keys) if keys is not None else None
    out: dict[str, dict] = {}
    for path in sorted(snapshot.live_files):
        action = snapshot.live_files[path]
        if wanted is not None and action.key_range is not None:
            lo, hi = action.key_range
            if not any(lo <= k <= hi for k in wanted):
                continue
        for row in read_file_rows(store, path):
            if wanted is not None and row["key"] not in wanted:
                continue
            if predicate is not None and not predicate(row):
                continue
            out[row["key"]] = row
    return [out[k] for k in sorted(out)]


def list_tables(store: ObjectStore) -> list[str]:
    """Table names deduced from log-directory keys."""
    tables = set()
    for key in store.list(""):
        if f"/{LOG_DIR}/" in key:
            tables.add(key.split(f"/{LOG_DIR}/")[0])
    return sorted(tables)
