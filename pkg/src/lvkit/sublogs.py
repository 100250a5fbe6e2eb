"""Per-transaction sublogs: redo steps paired with compensations.

Every mutation a transaction performs is recorded as a SublogEntry holding a
redo instruction and its compensation, persisted under
``_lv/sublogs/<txn_id>/<seq>.json`` before the store effect happens; a
manifest object is rewritten last. That ordering means any client can always
either finish rolling a crashed transaction back (delete its uploads, free
its markers) or let the owner resume and commit exactly once.

Two entry modes exist. Physical entries reference concrete, pre-declared file
paths and re-link them verbatim on replay; they are used while a transaction
has the table to itself and for blind appends. Logical entries go through a
named buffer: a search resolves a key to the owning file and stores the path
in a buffer slot, and a merge combines the buffered file with a declarative
row modifier into a fresh file. On replay logical steps re-resolve against
the current table state, which is what lets a transaction absorb changes
committed underneath it instead of aborting. A transaction may switch from
physical to logical once; there is no way back.

Instruction set: read_file, upload_file, remove_file (redo side) with
remove_file/add_file/noop compensations for physical entries; search_key and
merge_with (redo side) with restore_buffer/replace_with_buffer compensations
for logical entries. remove_file as a *redo* stages a live file for removal
(the object itself is immutable and stays); remove_file as a *compensation*
deletes the uncommitted object the paired upload created.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field

from .errors import KeyNotFoundError, RecoveryError, RedoConflictError, TableNotFoundError
from .object_store import ObjectStore
from .otf_core import Action, data_key, encode_rows, read_file_rows, read_snapshot

PHYSICAL = "physical"
LOGICAL = "logical"
DEFAULT_RESOLVE_RETRY_LIMIT = 3


def sublog_dir(txn_id: str) -> str:
    return f"_lv/sublogs/{txn_id}/"

def entry_key(txn_id: str, seq: int) -> str:
    return f"_lv/sublogs/{txn_id}/{seq:06d}.json"

def manifest_key(txn_id: str) -> str:
    return f"_lv/sublogs/{txn_id}/manifest.json"

def recovery_key(txn_id: str) -> str:
    return f"_lv/sublogs/{txn_id}/recovery.json"


@dataclass
class Instruction:
    op: str
    args: dict = field(default_factory=dict)
    buffer_slot: str | None = None

    def to_json(self) -> dict:
        out: dict = {"op": self.op, "args": self.args}
        if self.buffer_slot is not None:
            out["buffer_slot"] = self.buffer_slot
        return out

    @staticmethod
    def from_json(obj: dict) -> "Instruction":
        return Instruction(op=obj["op"], args=obj.get("args", {}), buffer_slot=obj.get("buffer_slot"))


@dataclass
class SublogEntry:
    txn_id: str
    seq: int
    mode: str
    table: str
    redo: Instruction
    compensation: Instruction
    touched_keys: list[str] = field(default_factory=list)
    touched_files: list[str] = field(default_factory=list)
    blind: bool = False
    resolved: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return (
            json.dumps(
                {
                    "txn_id": self.txn_id,
                    "seq": self.seq,
                    "mode": self.mode,
                    "table": self.table,
                    "redo": self.redo.to_json(),
                    "compensation": self.compensation.to_json(),
                    "touched_keys": self.touched_keys,
                    "touched_files": self.touched_files,
                    "blind": self.blind,
                    "resolved": self.resolved,
                },
                sort_keys=True,
            )
            + "\n"
        ).encode()

    @staticmethod
    def from_bytes(data: bytes) -> "SublogEntry":
        obj = json.loads(data)
        return SublogEntry(
            txn_id=obj["txn_id"],
            seq=obj["seq"],
            mode=obj["mode"],
            table=obj["table"],
            redo=Instruction.from_json(obj["redo"]),
            compensation=Instruction.from_json(obj["compensation"]),
            touched_keys=list(obj.get("touched_keys", [])),
            touched_files=list(obj.get("touched_files", [])),
            blind=obj.get("blind", False),
            resolved=dict(obj.get("resolved", {})),
        )


class TxnBuffer:
    """Named slots with per-slot history so compensations can restore them."""

    def __init__(self) -> None:
        self.slots: dict[str, str | None] = {}
        self.history: dict[str, list[str | None]] = {}

    def set(self, slot: str, value: str | None) -> None:
        self.history.setdefault(slot, []).append(self.slots.get(slot))
        self.slots[slot] = value

    def get(self, slot: str) -> str | None:
        return self.slots.get(slot)

    def restore(self, slot: str) -> None:
        history = self.history.get(slot)
        if history:
            self.slots[slot] = history.pop()
        else:
            self.slots.pop(slot, None)

    def as_dict(self) -> dict[str, str | None]:
        return dict(self.slots)


@dataclass
class TableStage:
    """A transaction's private view of one table: base snapshot + staged edits."""

    table: str
    base_version: int
    base_files: dict[str, Action]
    added: dict[str, Action] = field(default_factory=dict)
    removed: set[str] = field(default_factory=set)

    def live(self) -> dict[str, Action]:
        out = {p: a for p, a in self.base_files.items() if p not in self.removed}
        out.update(self.added)
        return out

    def final_actions(self) -> list[Action]:
        """Actions this transaction would publish for the table."""
        actions: list[Action] = []
        for path in sorted(self.removed):
            actions.append(Action(kind="remove_file", file_path=path))
        for path in sorted(self.added):
            actions.append(self.added[path])
        return actions

    def apply_published(self, actions: list[Action], version: int) -> None:
        """Fold a newly committed entry of another txn into the base view."""
        for action in actions:
            if action.kind == "add_file":
                self.base_files[action.file_path] = action
            elif action.kind == "remove_file":
                self.base_files.pop(action.file_path, None)
        self.base_version = max(self.base_version, version)


class Workspace:
    """Stages for all tables a transaction touched, plus a row cache."""

    def __init__(self, store: ObjectStore) -> None:
        self.store = store
        self.stages: dict[str, TableStage] = {}
        self._rows: dict[str, list[dict]] = {}

    def stage(self, table: str) -> TableStage:
        return self.stages[table]

    def add_stage(self, stage: TableStage) -> None:
        self.stages[stage.table] = stage

    def rows_of(self, path: str) -> list[dict]:
        if path not in self._rows:
            self._rows[path] = read_file_rows(self.store, path)
        return self._rows[path]

    def remember_rows(self, path: str, rows: list[dict]) -> None:
        self._rows[path] = rows

    def find_owner(self, table: str, key: str) -> str | None:
        """Live file whose rows contain ``key``; own staged files win."""
        stage = self.stages[table]
        candidates = list(stage.added.items()) + [
            (p, a) for p, a in stage.base_files.items() if p not in stage.removed
        ]
        for path, action in candidates:
            if action.key_range is not None:
                lo, hi = action.key_range
                if not (lo <= key <= hi):
                    continue
            for row in self.rows_of(path):
                if row["key"] == key:
                    return path
        return None

    def read_row(self, table: str, key: str) -> dict | None:
        path = self.find_owner(table, key)
        if path is None:
            return None
        for row in self.rows_of(path):
            if row["key"] == key:
                return dict(row)
        return None


def apply_modifier(rows: list[dict], key: str | None, modifier: dict) -> list[dict]:
    """Apply a declarative row modifier and return the new row list.

    Modifiers are persistable dicts so replay never needs client code:
    {"set": {...fields}}, {"add": {...numeric deltas}}, {"delete": true}
    all target ``key``; {"insert": [rows]} appends new rows.
    """
    out = [dict(r) for r in rows]
    if "insert" in modifier:
        out.extend(dict(r) for r in modifier["insert"])
        return out
    hit = False
    for row in out:
        if row["key"] != key:
            continue
        hit = True
        if modifier.get("delete"):
            out = [r for r in out if r["key"] != key]
            break
        for fname, value in modifier.get("set", {}).items():
            row[fname] = value
        for fname, delta in modifier.get("add", {}).items():
            row[fname] = row.get(fname, 0) + delta
    if not hit:
        raise RedoConflictError(f"row {key!r} not present in merged file")
    return out


class Sublog:
    """Owner-side sublog: append, undo, redo, conflict resolution."""

    def __init__(self, store: ObjectStore, txn_id: str, persist: bool = True) -> None:
        self.store = store
        self.txn_id = txn_id
        self.persist = persist
        self.mode = PHYSICAL
        self.entries: list[SublogEntry] = []
        self.buffer = TxnBuffer()
        self.workspace = Workspace(store)
        self.shifts: list[dict] = []
        self._manifest_dirty = False

    # -- persistence --------------------------------------------------------

    def _persist_entry(self, entry: SublogEntry) -> None:
        if self.persist:
            self.store.put(entry_key(self.txn_id, entry.seq), entry.to_bytes())

    def _persist_manifest(self) -> None:
        if not self.persist:
            return
        manifest = {
            "txn_id": self.txn_id,
            "last_seq": self.entries[-1].seq if self.entries else -1,
            "mode": self.mode,
            "tables": sorted(self.workspace.stages),
            "shifts": self.shifts,
            "status": "active",
        }
        self.store.put(
            manifest_key(self.txn_id), (json.dumps(manifest, sort_keys=True) + "\n").encode()
        )

    def record_shift(self, record: dict) -> None:
        self.shifts.append(record)
        self._persist_manifest()

    def delete_persisted(self) -> None:
        """Remove every sublog object. Call only after all markers are settled."""
        for key in self.store.list(sublog_dir(self.txn_id)):
            self.store.delete(key)

    # -- mode ---------------------------------------------------------------

    def switch_to_logical(self) -> None:
        """One-way switch; taken as soon as the table stops being private."""
        if self.mode != LOGICAL:
            self.mode = LOGICAL
            self._persist_manifest()

    # -- append API ---------------------------------------------------------

    def _append(self, entry: SublogEntry) -> SublogEntry:
        self.entries.append(entry)
        self._execute_redo(entry)
        self._persist_manifest()
        return entry

    def _next_seq(self) -> int:
        return self.entries[-1].seq + 1 if self.entries else 0

    def append_read(self, table: str, key: str) -> dict | None:
        """Record a read step; returns the row (or None)."""
        mode = self.mode
        if mode == PHYSICAL:
            redo = Instruction(op="read_file", args={"table": table, "key": key})
            comp = Instruction(op="read_file", args={"table": table, "key": key})
        else:
            slot = f"{table}:{key}"
            redo = Instruction(
                op="search_key", args={"table": table, "key": key}, buffer_slot=slot
            )
            comp = Instruction(op="restore_buffer", args={}, buffer_slot=slot)
        entry = SublogEntry(
            txn_id=self.txn_id,
            seq=self._next_seq(),
            mode=mode,
            table=table,
            redo=redo,
            compensation=comp,
            touched_keys=[key],
        )
        self._append(entry)
        return entry.resolved.get("row")

    def append_upload(
        self,
        table: str,
        rows: list[dict],
        blind: bool = False,
        replaces: list[tuple[str, tuple | None]] | None = None,
    ) -> SublogEntry:
        """Record an upload of a brand-new file (inserts / physical rewrites).

        ``replaces`` lists (path, key_range) of live files this upload
        supersedes; upload and removal form one entry so a crash can never
        separate them. Blind appends are physical even inside a logical
        sublog: the file and its path are fixed up front, never re-resolved.
        """
        path = data_key(table)
        keys = sorted(r["key"] for r in rows)
        replaced = [
            {"path": p, "key_range": list(kr) if kr else None}
            for p, kr in (replaces or [])
        ]
        redo = Instruction(
            op="upload_file",
            args={
                "table": table,
                "path": path,
                "rows": rows,
                "key_range": [keys[0], keys[-1]],
                "replaces": replaced,
            },
        )
        comp = Instruction(
            op="remove_file", args={"table": table, "path": path, "replaces": replaced}
        )
        entry = SublogEntry(
            txn_id=self.txn_id,
            seq=self._next_seq(),
            mode=PHYSICAL,
            table=table,
            redo=redo,
            compensation=comp,
            touched_keys=keys,
            touched_files=[path] + [r["path"] for r in replaced],
            blind=blind,
        )
        return self._append(entry)

    def append_remove(self, table: str, path: str, key_range, keys: list[str]) -> SublogEntry:
        """Record staging a live file for removal (physical mode)."""
        redo = Instruction(
            op="remove_file",
            args={"table": table, "path": path, "key_range": list(key_range) if key_range else None},
        )
        comp = Instruction(
            op="add_file",
            args={"table": table, "path": path, "key_range": list(key_range) if key_range else None},
        )
        entry = SublogEntry(
            txn_id=self.txn_id,
            seq=self._next_seq(),
            mode=PHYSICAL,
            table=table,
            redo=redo,
            compensation=comp,
            touched_keys=list(keys),
            touched_files=[path],
        )
        return self._append(entry)

    def append_merge(self, table: str, key: str, modifier: dict) -> SublogEntry:
        """Record a logical merge: buffered file + modifier -> fresh file."""
        slot = f"{table}:{key}"
        redo = Instruction(
            op="merge_with", args={"table": table, "key": key, "modifier": modifier},
            buffer_slot=slot,
        )
        comp = Instruction(op="replace_with_buffer", args={"table": table}, buffer_slot=slot)
        entry = SublogEntry(
            txn_id=self.txn_id,
            seq=self._next_seq(),
            mode=LOGICAL,
            table=table,
            redo=redo,
            compensation=comp,
            touched_keys=[key],
        )
        return self._append(entry)

    # -- interpreter: redo --------------------------------------------------

    def _execute_redo(self, entry: SublogEntry) -> None:
        op = entry.redo.op
        if op == "read_file":
            self._redo_read(entry)
        elif op == "search_key":
            self._redo_search(entry)
        elif op == "upload_file":
            self._redo_upload(entry)
        elif op == "remove_file":
            self._redo_remove(entry)
        elif op == "merge_with":
            self._redo_merge(entry)
        elif op == "noop":
            pass
        else:
            raise ValueError(f"unknown redo op {op}")

    def _redo_read(self, entry: SublogEntry) -> None:
        table, key = entry.redo.args["table"], entry.redo.args["key"]
        path = self.workspace.find_owner(table, key)
        row = self.workspace.read_row(table, key) if path else None
        entry.resolved = {"file_path": path, "row": row}
        entry.touched_files = [path] if path else []
        self._persist_entry(entry)

    def _redo_search(self, entry: SublogEntry) -> None:
        table, key = entry.redo.args["table"], entry.redo.args["key"]
        path = self.workspace.find_owner(table, key)
        row = self.workspace.read_row(table, key) if path else None
        entry.resolved = {"file_path": path, "row": row}
        entry.touched_files = [path] if path else []
        self._persist_entry(entry)
        self.buffer.set(entry.redo.buffer_slot, path)

    def _redo_upload(self, entry: SublogEntry) -> None:
        args = entry.redo.args
        table, path = args["table"], args["path"]
        rows = args["rows"]
        action = Action(kind="add_file", file_path=path, key_range=tuple(args["key_range"]))
        entry.resolved = {"uploaded": path}
        self._persist_entry(entry)
        stage = self.workspace.stage(table)
        # The replaced files leave the live set in the same step; a rewrite
        # whose base has meanwhile left the view cannot be re-linked.
        for item in args.get("replaces", []):
            old = item["path"]
            if old in stage.added:
                stage.added.pop(old)
            elif old in stage.base_files and old not in stage.removed:
                stage.removed.add(old)
            else:
                raise RedoConflictError(f"rewritten file vanished from view: {old}")
        try:
            self.store.head(path)  # re-link an upload that already happened
        except KeyNotFoundError:
            self.store.put(path, encode_rows(rows))
        self.workspace.remember_rows(path, sorted(rows, key=lambda r: r["key"]))
        stage.added[path] = action

    def _redo_remove(self, entry: SublogEntry) -> None:
        args = entry.redo.args
        table, path = args["table"], args["path"]
        stage = self.workspace.stage(table)
        if path in stage.added:
            was = "added"
            stage.added.pop(path)
        elif path in stage.base_files and path not in stage.removed:
            was = "base"
            stage.removed.add(path)
        else:
            raise RedoConflictError(f"file to remove vanished from view: {path}")
        entry.resolved = {"removed": path, "was": was}
        self._persist_entry(entry)

    def _redo_merge(self, entry: SublogEntry) -> None:
        args = entry.redo.args
        table, key, modifier = args["table"], args["key"], args["modifier"]
        slot = entry.redo.buffer_slot
        old_path = self.buffer.get(slot)
        stage = self.workspace.stage(table)
        if old_path is None:
            rows: list[dict] = []
            if not modifier.get("insert"):
                raise RedoConflictError(f"merge target for {key!r} not in buffer")
            old_action = None
        else:
            if old_path not in stage.live():
                raise RedoConflictError(f"buffered file left the live set: {old_path}")
            rows = self.workspace.rows_of(old_path)
            old_action = stage.live()[old_path]
        new_rows = apply_modifier(rows, key, modifier)
        new_path = data_key(table)
        if new_rows:
            row_keys = sorted(r["key"] for r in new_rows)
            new_range = [row_keys[0], row_keys[-1]]
        else:
            new_range = None
        entry.resolved = {
            "old_path": old_path,
            "old_key_range": list(old_action.key_range) if old_action and old_action.key_range else None,
            "old_was_added": bool(old_path in stage.added) if old_path else False,
            "new_path": new_path if new_rows else None,
            "new_key_range": new_range,
        }
        # Written before the upload so a foreign recovery always knows which
        # object this step may have created.
        self._persist_entry(entry)
        if new_rows:
            self.store.put(new_path, encode_rows(new_rows))
            self.workspace.remember_rows(new_path, sorted(new_rows, key=lambda r: r["key"]))
        if old_path is not None:
            if old_path in stage.added:
                stage.added.pop(old_path)
            else:
                stage.removed.add(old_path)
        if new_rows:
            stage.added[new_path] = Action(
                kind="add_file", file_path=new_path, key_range=(new_range[0], new_range[1])
            )
            self.buffer.set(slot, new_path)
        else:
            self.buffer.set(slot, None)
        entry.touched_files = [p for p in (old_path, new_path if new_rows else None) if p]

    # -- interpreter: compensation ------------------------------------------

    def _execute_comp(self, entry: SublogEntry) -> None:
        op = entry.compensation.op
        if op == "read_file" or op == "noop":
            return
        if op == "restore_buffer":
            self.buffer.restore(entry.compensation.buffer_slot)
            return
        if op == "remove_file":
            self._comp_remove_upload(entry)
            return
        if op == "add_file":
            self._comp_readd(entry)
            return
        if op == "replace_with_buffer":
            self._comp_unmerge(entry)
            return
        raise ValueError(f"unknown compensation op {op}")

    def _comp_remove_upload(self, entry: SublogEntry) -> None:
        args = entry.compensation.args
        table, path = args["table"], args["path"]
        stage = self.workspace.stage(table)
        stage.added.pop(path, None)
        self.store.delete(path)
        for item in args.get("replaces", []):
            old, kr = item["path"], item.get("key_range")
            if old in stage.base_files:
                stage.removed.discard(old)
            else:
                stage.added[old] = Action(
                    kind="add_file", file_path=old, key_range=(kr[0], kr[1]) if kr else None
                )

    def _comp_readd(self, entry: SublogEntry) -> None:
        args = entry.compensation.args
        table, path = args["table"], args["path"]
        stage = self.workspace.stage(table)
        kr = args.get("key_range")
        if path in stage.base_files:
            stage.removed.discard(path)
        else:
            stage.added[path] = Action(
                kind="add_file", file_path=path, key_range=(kr[0], kr[1]) if kr else None
            )

    def _comp_unmerge(self, entry: SublogEntry) -> None:
        table = entry.compensation.args["table"]
        stage = self.workspace.stage(table)
        res = entry.resolved
        new_path, old_path = res.get("new_path"), res.get("old_path")
        if new_path:
            stage.added.pop(new_path, None)
            self.store.delete(new_path)
        if old_path:
            if res.get("old_was_added") or old_path not in stage.base_files:
                kr = res.get("old_key_range")
                stage.added[old_path] = Action(
                    kind="add_file", file_path=old_path, key_range=(kr[0], kr[1]) if kr else None
                )
            else:
                stage.removed.discard(old_path)
        self.buffer.restore(entry.compensation.buffer_slot)

    # -- undo / redo --------------------------------------------------------

    def undo(self, to_seq: int = 0) -> list[int]:
        """Compensate entries newest-first down to ``to_seq`` inclusive.

        Physical read steps are skipped (a repeat read undoes nothing).
        Entries stay persisted; a later redo replays them.
        """
        undone = []
        for entry in reversed(self.entries):
            if entry.seq < to_seq:
                break
            if entry.mode == PHYSICAL and entry.redo.op == "read_file":
                continue
            self._execute_comp(entry)
            undone.append(entry.seq)
        return undone

    def redo(self, from_seq: int = 0) -> list[int]:
        """Re-execute entries oldest-first from ``from_seq``.

        Logical steps re-resolve against the refreshed base; physical uploads
        re-link the already-written objects. Raises RedoConflictError when a
        step can no longer be resolved (full re-execution is then required).
        """
        redone = []
        for entry in self.entries:
            if entry.seq < from_seq:
                continue
            self._execute_redo(entry)
            redone.append(entry.seq)
        return redone

    # -- conflict resolution --------------------------------------------------

    def resolve_conflict(
        self,
        published: list[tuple[int, str, list[Action]]],
        allow_redo: bool = True,
    ) -> str:
        """Fold freshly committed entries of preceding txns into this txn.

        ``published`` is a list of (version, table, actions). Returns
        "clean" when nothing overlapped, "resolved" after an undo/redo pass,
        and raises RedoConflictError when replay could not re-resolve.
        With allow_redo=False (no recovery machinery) any overlap raises.
        """
        changed_files: dict[str, set[str]] = {}
        added_ranges: dict[str, list[tuple[str, str]]] = {}
        for _version, table, actions in published:
            for action in actions:
                if action.kind not in ("add_file", "remove_file"):
                    continue
                changed_files.setdefault(table, set()).add(action.file_path)
                if action.kind == "add_file" and action.key_range:
                    added_ranges.setdefault(table, []).append(action.key_range)

        first_conflict: int | None = None
        for entry in self.entries:
            if entry.blind:
                continue
            files = changed_files.get(entry.table, set())
            ranges = added_ranges.get(entry.table, [])
            overlap = any(f in files for f in entry.touched_files) or any(
                lo <= k <= hi for k in entry.touched_keys for lo, hi in ranges
            )
            if overlap:
                first_conflict = entry.seq
                break

        def refresh_bases() -> None:
            for version, table, actions in published:
                if table in self.workspace.stages:
                    self.workspace.stage(table).apply_published(actions, version)

        if first_conflict is None:
            refresh_bases()
            return "clean"
        if not allow_redo:
            raise RedoConflictError("overlap with a preceding commit (redo disabled)")
        self.undo(first_conflict)
        refresh_bases()
        self.redo(first_conflict)
        return "resolved"

    # -- final actions -------------------------------------------------------

    def uploads(self) -> set[str]:
        """Every object path this sublog may have created."""
        out = set()
        for entry in self.entries:
            if entry.redo.op == "upload_file":
                out.add(entry.redo.args["path"])
            if entry.redo.op == "merge_with" and entry.resolved.get("new_path"):
                out.add(entry.resolved["new_path"])
        return out

    def surviving_uploads(self) -> set[str]:
        return {
            p
            for stage in self.workspace.stages.values()
            for p in stage.added
        }


# -- crash recovery -----------------------------------------------------------

def load_persisted_entries(store: ObjectStore, txn_id: str) -> list[SublogEntry]:
    """All persisted entries, by listing (the manifest may lag one append)."""
    entries = []
    for key in store.list(sublog_dir(txn_id)):
        name = key.rsplit("/", 1)[-1]
        if name in ("manifest.json", "recovery.json"):
            continue
        try:
            entries.append(SublogEntry.from_bytes(store.get(key)[0]))
        except KeyNotFoundError:
            continue
    entries.sort(key=lambda e: e.seq)
    return entries


def load_manifest(store: ObjectStore, txn_id: str) -> dict | None:
    try:
        data, _ = store.get(manifest_key(txn_id))
    except KeyNotFoundError:
        return None
    return json.loads(data)


def claim_recovery(store: ObjectStore, txn_id: str, by: str, action: str) -> dict:
    """Serialize who settles an orphaned txn: first claim wins, for ever.

    Returns the winning claim document; callers must check whether it is
    theirs and what action it pins (rollback vs resume).
    """
    claim = {"txn_id": txn_id, "claimed_by": by, "action": action}
    result = store.put_if_absent(
        recovery_key(txn_id), (json.dumps(claim, sort_keys=True) + "\n").encode()
    )
    if result.created:
        return claim
    return json.loads(store.get(recovery_key(txn_id))[0])


def recover_orphan(store: ObjectStore, txn_id: str, by: str = "recovery") -> dict:
    """Roll a crashed transaction back from its persisted sublog.

    Deletes every object the sublog may have uploaded, frees the txn's
    markers, and removes the sublog itself (the markers are settled first, so
    the chain never references a deleted file). Safe against concurrent
    recoveries and a resuming owner via the recovery claim object.
    """
    from . import markers as markers_mod

    claim = claim_recovery(store, txn_id, by, "rollback")
    if claim["claimed_by"] != by or claim["action"] != "rollback":
        raise RecoveryError(f"recovery of {txn_id} already claimed: {claim}")
    entries = load_persisted_entries(store, txn_id)
    manifest = load_manifest(store, txn_id)
    tables = set(manifest.get("tables", [])) if manifest else set()
    tables.update(e.table for e in entries)

    # Files referenced by a committed entry are public and must survive a
    # rollback (the crash may have hit between two commits of one txn).
    protected: set[str] = set()
    for table in sorted(tables):
        try:
            protected.update(read_snapshot(store, table).file_paths)
        except TableNotFoundError:
            continue

    deleted: list[str] = []
    for entry in reversed(entries):
        for path in _entry_upload_paths(entry):
            if path in protected:
                continue
            if store.delete(path):
                deleted.append(path)

    freed = []
    for table in sorted(tables):
        for marker in markers_mod.scan_markers(store, table):
            if marker.txn_id == txn_id:
                live = markers_mod.read_marker(store, table, marker.version)
                if live is not None and markers_mod.abort_marker(
                    store, live, released_by=by
                ) == "freed":
                    freed.append((table, marker.version))

    for key in store.list(sublog_dir(txn_id)):
        if key != recovery_key(txn_id):  # keep the tombstone
            store.delete(key)
    return {"txn_id": txn_id, "deleted_files": deleted, "freed_markers": freed}


def _entry_upload_paths(entry: SublogEntry) -> list[str]:
    paths = []
    if entry.redo.op == "upload_file":
        paths.append(entry.redo.args["path"])
    if entry.redo.op == "merge_with" and entry.resolved.get("new_path"):
        paths.append(entry.resolved["new_path"])
    return paths
