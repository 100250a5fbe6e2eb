"""Transaction manager tying markers, sublogs, cross-table ordering, and the
global version log together behind a small begin/read/write/commit API.

Feature flags pick the machinery:

* recovery (R): writes go through persisted sublogs and a marker on the
  written table; conflicts with preceding commits are resolved by undo/redo.
* cross_table (CT): every accessed table gets a marker, dependency lists are
  published on them, and cycles between concurrent multi-table transactions
  are broken by marker shifts. Implies the marker/sublog write machinery.
* isolation (I): read versions are pinned from the global head object and
  commits run through the validation ticket (rules R1-R3).

Without CT or I a transaction may write at most one table. The no-flag
baseline is plain optimistic commit-at-tail-plus-one.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field, replace

from . import global_conflict, markers, otf_core, sublogs, version_log
from .errors import (
    MarkerLostError,
    RedoConflictError,
    TableNotFoundError,
    TxnStateError,
    UnsupportedOperationError,
)
from .global_conflict import DependencyDag, ShiftRecord
from .history import HistoryLog
from .markers import Marker
from .object_store import ObjectStore
from .otf_core import Action, LogEntry
from .sublogs import LOGICAL, Sublog, TableStage
from .version_log import TableVersions


@dataclass(frozen=True)
class FeatureFlags:
    recovery: bool = False
    cross_table: bool = False
    isolation: bool = False

    @property
    def markers_enabled(self) -> bool:
        return self.recovery or self.cross_table

    @staticmethod
    def parse(text: str) -> "FeatureFlags":
        parts = {p.strip().lower() for p in text.split(",") if p.strip()}
        parts.discard("none")
        known = {"r", "ct", "i"}
        unknown = parts - known
        if unknown:
            raise ValueError(f"unknown feature flags: {sorted(unknown)}")
        return FeatureFlags(
            recovery="r" in parts, cross_table="ct" in parts, isolation="i" in parts
        )

    def short(self) -> str:
        out = []
        if self.recovery:
            out.append("r")
        if self.cross_table:
            out.append("ct")
        if self.isolation:
            out.append("i")
        return ",".join(out) or "none"


@dataclass
class TxnConfig:
    isolation_mode: str = "serializable"
    marker_timeout_ms: float = markers.DEFAULT_TIMEOUT_MS
    wait_timeout_ms: float = 10_000.0
    ticket_timeout_ms: float = version_log.DEFAULT_TICKET_TIMEOUT_MS
    ticket_wait_ms: float = version_log.DEFAULT_TICKET_WAIT_MS
    claim_retry_limit: int = markers.DEFAULT_CLAIM_RETRY_LIMIT
    resolve_retry_limit: int = sublogs.DEFAULT_RESOLVE_RETRY_LIMIT
    reexecute_limit: int = 2
    max_timeout_shifts: int = 3
    checkpoint_interval: int = otf_core.DEFAULT_CHECKPOINT_INTERVAL
    slack: int = version_log.DEFAULT_SLACK
    poll_interval_ms: float = 5.0
    clock: object = time.time


@dataclass
class CommitOutcome:
    committed: bool
    versions: dict[str, int] = field(default_factory=dict)
    reason: str | None = None
    redo_rounds: int = 0
    shifts: list[ShiftRecord] = field(default_factory=list)


@dataclass
class TableCtx:
    table: str
    stage: TableStage
    versions: TableVersions
    marker: Marker | None = None
    settled: set[int] = field(default_factory=set)
    peers_at: dict[str, int] = field(default_factory=dict)  # live peer markers seen
    pending_published: list[tuple[int, str, list[Action]]] = field(default_factory=list)
    pending_create: bool = False
    create_schema: dict | None = None
    wrote: bool = False
    did_read: bool = False


class Txn:
    """One transaction. Not thread-safe; one client drives one txn at a time."""

    def __init__(
        self,
        store: ObjectStore,
        flags: FeatureFlags,
        config: TxnConfig,
        history: HistoryLog | None = None,
        client: str | None = None,
    ) -> None:
        self.store = store
        self.flags = flags
        self.config = config
        self.history = history
        self.client = client
        self.txn_id = str(uuid.uuid4())
        self.status = "active"
        self.sublog = Sublog(store, self.txn_id, persist=flags.recovery)
        self.dag = DependencyDag()
        self.tables: dict[str, TableCtx] = {}
        self.shifts: list[ShiftRecord] = []
        self._head: dict | None = None
        self._head_loaded = False
        self._ops: list[dict] = []  # program-order op specs for re-execution
        self._reexecutions = 0
        self._redo_rounds = 0
        self.outcome: CommitOutcome | None = None
        self._emit("begin", flags=flags.short(), mode=config.isolation_mode)

    # -- plumbing -------------------------------------------------------------

    def _emit(self, kind: str, **payload) -> None:
        if self.history is not None:
            self.history.append(kind, txn_id=self.txn_id, client=self.client, **payload)

    def _check_active(self) -> None:
        if self.status != "active":
            raise TxnStateError(f"txn is {self.status}")

    def _now_ms(self) -> float:
        return self.config.clock() * 1000.0

    # -- table access ---------------------------------------------------------

    def _load_head(self) -> dict | None:
        if not self._head_loaded:
            self._head, _ = version_log.read_head(self.store)
            self._head_loaded = True
        return self._head

    def _ensure_ctx(self, table: str, for_write: bool) -> TableCtx:
        ctx = self.tables.get(table)
        if ctx is None:
            if self.flags.isolation:
                head = self._load_head()
                base = version_log.pin_read_version(self.store, table, head)
            else:
                base = otf_core.latest_version(self.store, table)
            snap = otf_core.read_snapshot(self.store, table, base)
            stage = TableStage(table=table, base_version=base, base_files=dict(snap.live_files))
            ctx = TableCtx(
                table=table,
                stage=stage,
                versions=TableVersions(read=base, hidden=base),
                settled=set(range(base + 1)) - snap.reserved,
            )
            self.tables[table] = ctx
            self.sublog.workspace.add_stage(stage)
            if self.flags.cross_table:
                self._claim_for(ctx)
        if self.flags.isolation and not ctx.pending_create:
            # Hidden versions track what execution could have observed; the
            # validation rules compare pinned reads and reserved writes
            # against them. Refreshed on access, frozen during validation.
            tip = otf_core.latest_version(self.store, table)
            own = ctx.marker.version if ctx.marker else None
            if tip != own:
                ctx.versions.observe(self._visible_tip(ctx, tip))
        if for_write:
            if (
                self.flags.markers_enabled
                and ctx.marker is None
                and not ctx.pending_create
            ):
                self._claim_for(ctx)
            if (
                ctx.marker is None
                and not ctx.pending_create
                and ctx.versions.write is None
            ):
                # No reservation to pin the slot: aim one past the snapshot
                # the stage is built on. Anchoring to anything later (say, a
                # tip observed in passing) would let a staged entry land on
                # top of a foreign commit it never incorporated — its remove
                # actions would miss that commit's files and leave two live
                # owners for the same keys. Built on base ⇒ w = base + 1;
                # anything else in between must fail validation.
                ctx.versions.write = ctx.stage.base_version + 1
            ctx.wrote = True
        else:
            ctx.did_read = True
        return ctx

    def _visible_tip(self, ctx: TableCtx, tip: int) -> int:
        """Newest settled (non-reservation) version at or below the tail."""
        floor = ctx.versions.read if ctx.versions.read is not None else 0
        version = tip
        while version > floor:
            if ctx.marker is not None and version == ctx.marker.version:
                version -= 1
                continue
            entry = otf_core.read_entry(self.store, ctx.table, version)
            # Live reservations and released (no-op) slots carry no state a
            # transaction could have observed, so neither moves the tip.
            if entry.is_marker or (entry.lv is not None and not entry.actions):
                version -= 1
                continue
            return version
        return version

    def _claim_for(self, ctx: TableCtx) -> None:
        """Claim a marker at the tail and fold what the claim revealed."""
        deps = tuple(sorted(self.dag.successors(self.txn_id)))
        scan = global_conflict.claim_and_observe(
            self.store,
            self.dag,
            self.txn_id,
            ctx.table,
            base_version=max(ctx.stage.base_version, max(ctx.settled, default=-1)),
            settled=ctx.settled,
            depends_on=deps,
            timeout_ms=self.config.marker_timeout_ms,
            retry_limit=self.config.claim_retry_limit,
            clock=self.config.clock,
        )
        ctx.marker = scan.marker
        ctx.versions.write = scan.marker.version
        self._note_peers(ctx, scan)
        self._fold_or_queue(ctx, scan)
        if self.flags.cross_table:
            self._refresh_deps()
            cycle = self.dag.find_cycle(self.txn_id)
            if cycle is not None:
                # Closing a cycle at claim time: the claimer moves, now.
                self._do_shift(set(cycle) - {self.txn_id}, reason="cycle")

    def _note_peers(self, ctx: TableCtx, scan: global_conflict.TableScan) -> None:
        ctx.peers_at = {}
        for m in scan.waiting_on + scan.followers:
            ctx.peers_at[m.txn_id] = m.version

    def _fold_or_queue(self, ctx: TableCtx, scan: global_conflict.TableScan) -> None:
        """Queue entries committed below our marker, folding the prefix the
        chain has fully settled.

        Commit order is not version order: a slot above a still-open marker
        can fill first, and folding it early would replay the chain's adds
        and removes out of sequence. Anything above the lowest open slot
        stays queued until that slot settles."""
        for version, actions in scan.newly_committed:
            ctx.versions.observe(version)
            ctx.pending_published.append((version, ctx.table, actions))
        if self.flags.isolation:
            return  # pinned reads: resolved in version order at commit
        ready = self._drain_ready(ctx, scan.waiting_on)
        if not ready:
            return
        outcome = self.sublog.resolve_conflict(ready, allow_redo=self.flags.recovery)
        if outcome != "clean":
            self._redo_rounds += 1
            self._emit("resolve", table=ctx.table, outcome=outcome)

    def _drain_ready(
        self, ctx: TableCtx, waiting: list[Marker]
    ) -> list[tuple[int, str, list[Action]]]:
        """Pull the queued published entries that may fold now: those below
        every marker still open in the table, in version order."""
        if not ctx.pending_published:
            return []
        floor = min((m.version for m in waiting), default=None)
        if floor is None:
            ready, rest = ctx.pending_published, []
        else:
            ready = [p for p in ctx.pending_published if p[0] < floor]
            rest = [p for p in ctx.pending_published if p[0] >= floor]
        ctx.pending_published = rest
        ready.sort(key=lambda p: p[0])
        return ready

    def _refresh_deps(self) -> None:
        """Publish the current dependency list on every held marker so any
        follower can see whom we wait on."""
        deps = tuple(sorted(self.dag.successors(self.txn_id)))
        for ctx in self.tables.values():
            if ctx.marker is None:
                continue
            if tuple(sorted(ctx.marker.depends_on)) == deps:
                continue
            ctx.marker = markers.update_marker_deps(self.store, ctx.marker, deps)

    def _marked_tables(self) -> list[str]:
        return sorted(t for t, ctx in self.tables.items() if ctx.marker is not None)

    def _rescan(self, table: str) -> list[Marker]:
        """Refresh one table's neighborhood; folds commits, returns waiters."""
        ctx = self.tables[table]
        scan = global_conflict.commit_scan(
            self.store, self.dag, self.txn_id, table, ctx.marker, ctx.settled
        )
        self._note_peers(ctx, scan)
        self._fold_or_queue(ctx, scan)
        return scan.waiting_on

    def _do_shift(self, peers: set[str], reason: str) -> None:
        # Peer positions may predate the cycle (a peer can claim behind us
        # after our last look at a table), so refresh before choosing what
        # to move.
        for table in self._marked_tables():
            self._rescan(table)
        own = {t: ctx.marker for t, ctx in self.tables.items() if ctx.marker is not None}
        peer_positions = {t: dict(ctx.peers_at) for t, ctx in self.tables.items()}
        record = global_conflict.marker_shift(
            self.store,
            self.txn_id,
            own,
            peers,
            peer_positions,
            reason=reason,
            timeout_ms=self.config.marker_timeout_ms,
            retry_limit=self.config.claim_retry_limit,
            clock=self.config.clock,
            depends_on=tuple(sorted(self.dag.successors(self.txn_id))),
        )
        if not record.shifted:
            # Already behind every peer (a prior shift, or the cycle is
            # transitive); nothing moved, so there is nothing to record.
            return
        for table, marker in own.items():
            ctx = self.tables[table]
            ctx.marker = marker
            if table in record.shifted:
                old, _new = record.shifted[table]
                ctx.settled.add(old)  # our freed slot is a released no-op
                ctx.versions.write = marker.version
        self.shifts.append(record)
        self.sublog.record_shift(record.to_json())
        payload = record.to_json()
        payload.pop("txn_id", None)  # _emit already attributes the event
        self._emit("shift", **payload)
        # Behind everyone now; learn the new neighborhood.
        for table in record.shifted:
            self._rescan(table)
        self._refresh_deps()

    # -- reads ----------------------------------------------------------------

    def read(self, table: str, key: str) -> dict | None:
        self._check_active()
        ctx = self._ensure_ctx(table, for_write=False)
        if self.flags.markers_enabled:
            if (
                ctx.marker is not None
                and self.sublog.mode != LOGICAL
                and ctx.peers_at
            ):
                self.sublog.switch_to_logical()
            value = self.sublog.append_read(table, key)
            spec = {
                "op": "read",
                "table": table,
                "key": key,
                "entry_seq": self.sublog.entries[-1].seq,
            }
        else:
            value = self.sublog.workspace.read_row(table, key)
            spec = {"op": "read", "table": table, "key": key, "value": value}
        self._ops.append(spec)
        self._emit("read", table=table, key=key, value=value, base=ctx.stage.base_version)
        return value

    def scan(self, table: str) -> list[dict]:
        """All rows visible in this txn's view of the table."""
        self._check_active()
        self._ensure_ctx(table, for_write=False)
        stage = self.sublog.workspace.stage(table)
        out: dict[str, dict] = {}
        for path in sorted(stage.live()):
            for row in self.sublog.workspace.rows_of(path):
                out[row["key"]] = dict(row)
        rows = [out[k] for k in sorted(out)]
        self._emit("scan", table=table, count=len(rows))
        return rows

    # -- writes ---------------------------------------------------------------

    def _mode_for_writes(self) -> None:
        """Row rewrites on a shared table must be replayable, so they go
        through the re-resolving (logical) instruction set."""
        if not self.flags.markers_enabled or self.sublog.mode == LOGICAL:
            return
        if any(c.peers_at for c in self.tables.values()):
            self.sublog.switch_to_logical()

    def insert(self, table: str, rows: list[dict]) -> None:
        """Blind append of brand-new rows (no read dependency)."""
        self._check_active()
        if not rows:
            return
        ctx = self._ensure_ctx(table, for_write=True)
        self.sublog.append_upload(table, [dict(r) for r in rows], blind=True)
        ctx.versions.logs_written = 1
        self._ops.append({"op": "insert", "table": table, "rows": [dict(r) for r in rows]})
        self._emit("insert", table=table, keys=[r["key"] for r in rows])

    def update(
        self,
        table: str,
        key: str,
        set_fields: dict | None = None,
        add_fields: dict | None = None,
    ) -> None:
        modifier: dict = {}
        if set_fields:
            modifier["set"] = dict(set_fields)
        if add_fields:
            modifier["add"] = dict(add_fields)
        if not modifier:
            raise ValueError("update needs set_fields or add_fields")
        self._apply_keyed(table, key, modifier, op="update")

    def delete(self, table: str, key: str) -> None:
        self._apply_keyed(table, key, {"delete": True}, op="delete")

    def _apply_keyed(self, table: str, key: str, modifier: dict, op: str) -> None:
        self._check_active()
        ctx = self._ensure_ctx(table, for_write=True)
        ctx.versions.blind = False
        ctx.versions.logs_written = 1
        self._mode_for_writes()
        self._run_keyed_step(table, key, modifier, op)
        self._ops.append({"op": op, "table": table, "key": key, "modifier": modifier})
        self._emit(op, table=table, key=key, modifier=modifier)

    def _run_keyed_step(self, table: str, key: str, modifier: dict, op: str) -> None:
        ws = self.sublog.workspace
        if self.sublog.mode == LOGICAL:
            self.sublog.append_read(table, key)  # search fills the buffer slot
            self.sublog.append_merge(table, key, modifier)
            return
        owner = ws.find_owner(table, key)
        if owner is None:
            raise RedoConflictError(f"{op} target {key!r} not found in {table}")
        action = ws.stage(table).live()[owner]
        old_rows = ws.rows_of(owner)
        self.sublog.append_read(table, key)
        new_rows = sublogs.apply_modifier(old_rows, key, modifier)
        if new_rows:
            # One entry carries both the new file and the removal of the old
            # one, so no crash point can publish the pair half-applied.
            self.sublog.append_upload(
                table, new_rows, blind=False, replaces=[(owner, action.key_range)]
            )
        else:
            self.sublog.append_remove(
                table, owner, action.key_range, [r["key"] for r in old_rows]
            )

    def create_table(self, table: str, schema: dict | None = None) -> None:
        """Stage a table creation; becomes version 0 at commit."""
        self._check_active()
        if table in self.tables:
            raise TxnStateError(f"table already in txn scope: {table}")
        stage = TableStage(table=table, base_version=-1, base_files={})
        ctx = TableCtx(
            table=table,
            stage=stage,
            versions=TableVersions(read=-1, hidden=-1, write=0, logs_written=1),
            pending_create=True,
            create_schema=schema or {},
            wrote=True,
        )
        self.tables[table] = ctx
        self.sublog.workspace.add_stage(stage)
        self._ops.append({"op": "create_table", "table": table, "schema": schema or {}})
        self._emit("create_table", table=table)

    # -- commit ---------------------------------------------------------------

    def commit(self) -> CommitOutcome:
        self._check_active()
        while True:
            try:
                outcome = self._commit_inner()
            except UnsupportedOperationError:
                self._finalize_history(self.outcome)
                raise
            except (RedoConflictError, MarkerLostError) as exc:
                if (
                    isinstance(exc, RedoConflictError)
                    and self._reexecutions < self.config.reexecute_limit
                ):
                    try:
                        self.reexecute()
                        continue
                    except (RedoConflictError, MarkerLostError) as exc2:
                        exc = exc2
                outcome = self._abort_with(f"{type(exc).__name__}: {exc}")
            break
        if outcome.committed:
            self.status = "committed"
        self.outcome = outcome
        self._finalize_history(outcome)
        return outcome

    def _write_tables(self) -> list[str]:
        return sorted(
            t
            for t, ctx in self.tables.items()
            if ctx.pending_create or ctx.stage.added or ctx.stage.removed
        )

    def _commit_inner(self) -> CommitOutcome:
        write_tables = self._write_tables()
        if len(write_tables) > 1 and not (self.flags.cross_table or self.flags.isolation):
            self._abort_with("rejected: multi-table write without cross-table or isolation")
            raise UnsupportedOperationError(
                "multi-table writes require the cross-table or isolation feature"
            )

        # A transaction with nothing to publish has nothing to re-base: its
        # reads keep the values they resolved to during execution, so it
        # skips the wait-and-fold phase entirely and never blocks on peers.
        if write_tables and self.flags.markers_enabled:
            self._wait_and_resolve()

        if self.flags.isolation:
            return self._commit_validated(write_tables)
        return self._commit_direct(write_tables)

    # ---- marker wait / conflict resolution ----

    def _wait_and_resolve(self) -> int:
        """Wait until nothing precedes our markers, folding commits as they
        appear. Returns the number of undo/redo rounds performed."""
        rounds = 0
        timeout_shifts = 0
        deadline = time.monotonic() + self.config.wait_timeout_ms / 1000.0
        while True:
            waiting: list[Marker] = []
            for table in self._marked_tables():
                waiting.extend(self._rescan(table))
            batch: list[tuple[int, str, list[Action]]] = []
            for table, ctx in self.tables.items():
                open_below = [m for m in waiting if m.table == table]
                batch.extend(self._drain_ready(ctx, open_below))
            batch.sort(key=lambda p: p[0])
            if batch:
                outcome = self.sublog.resolve_conflict(batch, allow_redo=self.flags.recovery)
                if outcome == "resolved":
                    rounds += 1
                    self._redo_rounds += 1
                    self._emit("resolve", outcome=outcome, round=rounds)
            if not waiting:
                return rounds

            if self.flags.cross_table:
                self._refresh_deps()
                cycle = self.dag.find_cycle(self.txn_id)
                if cycle is not None:
                    peers = set(cycle) - {self.txn_id}
                    own = {t: c.marker for t, c in self.tables.items() if c.marker}
                    positions = {t: dict(c.peers_at) for t, c in self.tables.items()}
                    if global_conflict.should_shift_on_watch(
                        self.txn_id, peers, own, positions
                    ):
                        self._do_shift(peers, reason="cycle")
                        continue

            # Free expired predecessors so a crashed writer cannot block us.
            now_ms = self._now_ms()
            reaped = False
            for marker in waiting:
                if marker.expired(now_ms):
                    live = markers.read_marker(self.store, marker.table, marker.version)
                    if live is not None and live.txn_id == marker.txn_id:
                        markers.abort_marker(self.store, live, released_by=self.txn_id)
                        reaped = True
            if reaped:
                continue

            if time.monotonic() >= deadline:
                timeout_shifts += 1
                if timeout_shifts > self.config.max_timeout_shifts:
                    raise RedoConflictError("wait timeout: gave up after repeated shifts")
                self._do_shift(set(), reason="timeout")
                deadline = time.monotonic() + self.config.wait_timeout_ms / 1000.0
                continue
            token = self.store.change_token()
            budget = max(deadline - time.monotonic(), 0.001)
            pause = max(self.config.poll_interval_ms, 1.0) / 1000.0
            self.store.wait_for_change(token, timeout=min(pause, budget))

    # ---- commit without validation ----

    def _commit_direct(self, write_tables: list[str]) -> CommitOutcome:
        versions: dict[str, int] = {}
        # Creates carry their own existence check; do them before any marker
        # commit so an already-exists conflict still aborts cleanly.
        for table in write_tables:
            ctx = self.tables[table]
            if not ctx.pending_create:
                continue
            version = self._commit_create(ctx)
            if version is None:
                if versions:
                    raise TxnStateError(f"partial commit: landed {versions}")
                return self._abort_with(f"conflict: table {table} already exists")
            versions[table] = version
        for table in write_tables:
            ctx = self.tables[table]
            if ctx.pending_create:
                continue
            actions = ctx.stage.final_actions()
            if ctx.marker is not None:
                try:
                    entry = markers.commit_marker(
                        self.store,
                        ctx.marker,
                        actions,
                        writer_txn=self.txn_id,
                        checkpoint_interval=self.config.checkpoint_interval,
                    )
                except MarkerLostError:
                    if versions:
                        raise TxnStateError(f"partial commit: landed {versions}") from None
                    raise
                ctx.marker = None
                versions[table] = entry.version
            else:
                result = otf_core.commit_single(
                    self.store,
                    table,
                    actions,
                    base_version=ctx.stage.base_version,
                    writer_txn=self.txn_id,
                    checkpoint_interval=self.config.checkpoint_interval,
                )
                if not result.committed:
                    if versions:
                        raise TxnStateError(f"partial commit: landed {versions}")
                    return self._abort_with(f"conflict: lost slot {table}@{result.version}")
                versions[table] = result.version
        self._settle_remaining_markers()
        self._cleanup_after_commit()
        return CommitOutcome(
            committed=True, versions=versions, redo_rounds=self._redo_rounds, shifts=self.shifts
        )

    def _commit_create(self, ctx: TableCtx) -> int | None:
        entry_bytes = self._create_entry(ctx).to_bytes()
        result = self.store.put_if_absent(otf_core.log_key(ctx.table, 0), entry_bytes)
        if result.created:
            return 0
        existing = LogEntry.from_bytes(self.store.get(otf_core.log_key(ctx.table, 0))[0])
        if existing.writer_txn == self.txn_id:
            return 0  # a resumed attempt already landed it
        return None

    def _create_entry(self, ctx: TableCtx) -> LogEntry:
        actions = [Action(kind="set_metadata", payload=ctx.create_schema or {})]
        actions.extend(ctx.stage.added[p] for p in sorted(ctx.stage.added))
        return LogEntry(version=0, actions=actions, writer_txn=self.txn_id)

    # ---- commit with validation ----

    def _commit_validated(self, write_tables: list[str]) -> CommitOutcome:
        mode = self.config.isolation_mode
        read_set = {
            t for t, ctx in self.tables.items() if ctx.did_read and not ctx.pending_create
        }
        write_set = set(write_tables)
        if not write_set and mode in ("write_serializable", "snapshot"):
            self._settle_remaining_markers()
            self._cleanup_after_commit()
            return CommitOutcome(committed=True, redo_rounds=self._redo_rounds, shifts=self.shifts)

        ticket = version_log.acquire_ticket(
            self.store,
            self.txn_id,
            timeout_ms=self.config.ticket_timeout_ms,
            wait_ms=self.config.ticket_wait_ms,
            clock=self.config.clock,
        )
        try:
            for attempt in range(self.config.resolve_retry_limit + 1):
                self._refresh_log_versions(write_tables)
                vmap = {t: ctx.versions for t, ctx in self.tables.items()}
                result = version_log.validate(
                    vmap, mode, read_set, write_set, slack=self.config.slack
                )
                self._emit(
                    "validate",
                    compatible=result.compatible,
                    violations=[str(v) for v in result.violations],
                )
                if result.compatible:
                    break
                if result.retargetable and attempt < self.config.resolve_retry_limit:
                    self._retarget_blind(sorted({v.table for v in result.violations}))
                    continue
                reason = str(result.violations[0])
                version_log.release_ticket(self.store, ticket)
                ticket = None
                return self._abort_with(reason)

            if not write_tables:
                # Epoch-only bump: a validated read-only txn leaves a witness
                # of its position in the global order without moving any table.
                version_log.publish(self.store, {})
                version_log.release_ticket(self.store, ticket)
                ticket = None
                self._settle_remaining_markers()
                self._cleanup_after_commit()
                return CommitOutcome(
                    committed=True, redo_rounds=self._redo_rounds, shifts=self.shifts
                )

            intent: dict[str, dict] = {}
            planned: dict[str, int] = {}
            for table in write_tables:
                ctx = self.tables[table]
                if ctx.pending_create:
                    entry = self._create_entry(ctx)
                else:
                    version = ctx.marker.version if ctx.marker else ctx.versions.write
                    entry = LogEntry(
                        version=version,
                        actions=ctx.stage.final_actions(),
                        writer_txn=self.txn_id,
                    )
                intent[table] = {"version": entry.version, "entry": _entry_json(entry)}
                planned[table] = entry.version
            ticket = version_log.stamp_intent(self.store, ticket, intent)

            try:
                versions = self._land_validated(write_tables, planned)
            except MarkerLostError:
                # The intent is durable: finish the commit from it rather
                # than tearing down entries that may already be public.
                rolled = version_log.roll_forward(self.store, ticket.doc)
                version_log.release_ticket(self.store, ticket)
                ticket = None
                if rolled["lost"]:
                    raise TxnStateError(
                        f"partial commit after intent: lost {rolled['lost']}"
                    ) from None
                self._settle_remaining_markers()
                self._cleanup_after_commit()
                return CommitOutcome(
                    committed=True,
                    versions=rolled["landed"],
                    redo_rounds=self._redo_rounds,
                    shifts=self.shifts,
                )
            if versions is None:  # a slot or create was lost to a foreign writer
                version_log.release_ticket(self.store, ticket)
                ticket = None
                return self._abort_with("conflict: commit slot taken during validation")
            version_log.publish(self.store, versions)
            version_log.release_ticket(self.store, ticket)
            ticket = None
            self._settle_remaining_markers()
            self._cleanup_after_commit()
            return CommitOutcome(
                committed=True, versions=versions, redo_rounds=self._redo_rounds, shifts=self.shifts
            )
        finally:
            if ticket is not None:
                version_log.release_ticket(self.store, ticket)

    def _land_validated(
        self, write_tables: list[str], planned: dict[str, int]
    ) -> dict[str, int] | None:
        versions: dict[str, int] = {}
        for table in write_tables:
            ctx = self.tables[table]
            if ctx.pending_create:
                version = self._commit_create(ctx)
                if version is None:
                    if versions:
                        raise TxnStateError(f"partial commit: landed {versions}")
                    return None
                versions[table] = version
                continue
            actions = ctx.stage.final_actions()
            if ctx.marker is not None:
                entry = markers.commit_marker(
                    self.store,
                    ctx.marker,
                    actions,
                    writer_txn=self.txn_id,
                    checkpoint_interval=self.config.checkpoint_interval,
                )
                ctx.marker = None
                versions[table] = entry.version
            else:
                result = otf_core.commit_single(
                    self.store,
                    table,
                    actions,
                    base_version=planned[table] - 1,
                    writer_txn=self.txn_id,
                    checkpoint_interval=self.config.checkpoint_interval,
                )
                if not result.committed:
                    if versions:
                        raise TxnStateError(f"partial commit: landed {versions}")
                    return None
                versions[table] = result.version
        return versions

    def _refresh_log_versions(self, write_tables: list[str]) -> None:
        """Log version l: the chain state read inside validation.

        Tables where we hold a marker were drained by the commit wait, so l
        is the slot just below ours by construction; un-markered tables take
        the raw tail (foreign reservations occupy slots all the same).
        Read-only tables get the same observation: their l feeds the read
        staleness check, which otherwise would only know what execution
        happened to see."""
        written = set(write_tables)
        for table, ctx in self.tables.items():
            if table not in written and not ctx.did_read:
                continue
            if ctx.pending_create:
                ctx.versions.log = -1
            elif ctx.marker is not None:
                ctx.versions.log = ctx.marker.version - 1
            else:
                ctx.versions.log = otf_core.latest_version(self.store, ctx.table)

    def _retarget_blind(self, tables: list[str]) -> None:
        """Blind-append escape hatch: take the next open slot instead of
        aborting (markered tables re-claim; bare tables re-aim)."""
        deps = tuple(sorted(self.dag.successors(self.txn_id)))
        for table in tables:
            ctx = self.tables[table]
            if ctx.marker is not None:
                current = markers.read_marker(self.store, table, ctx.marker.version)
                if current is not None and current.txn_id == self.txn_id:
                    markers.abort_marker(self.store, current, released_by=self.txn_id)
                ctx.settled.add(ctx.marker.version)
                ctx.marker = markers.claim_with_retry(
                    self.store,
                    table,
                    self.txn_id,
                    depends_on=deps,
                    timeout_ms=self.config.marker_timeout_ms,
                    retry_limit=self.config.claim_retry_limit,
                    clock=self.config.clock,
                )
                ctx.versions.write = ctx.marker.version
            else:
                tip = otf_core.latest_version(self.store, table)
                ctx.versions.write = tip + 1
                ctx.versions.observe(self._visible_tip(ctx, tip))
            self._emit("retarget", table=table, write=ctx.versions.write)

    # -- abort / cleanup -------------------------------------------------------

    def abort(self) -> CommitOutcome:
        if self.status != "active":
            return self.outcome or CommitOutcome(committed=False, reason="already settled")
        outcome = self._abort_with("user abort")
        self._finalize_history(outcome)
        return outcome

    def _abort_with(self, reason: str) -> CommitOutcome:
        self.sublog.undo(0)
        self._settle_remaining_markers()
        if self.flags.recovery:
            self.sublog.delete_persisted()
        self.status = "aborted"
        self.outcome = CommitOutcome(committed=False, reason=reason, shifts=self.shifts)
        self._emit("abort", reason=reason)
        return self.outcome

    def _settle_remaining_markers(self) -> None:
        for ctx in self.tables.values():
            if ctx.marker is None:
                continue
            current = markers.read_marker(self.store, ctx.table, ctx.marker.version)
            if current is not None and current.txn_id == self.txn_id:
                markers.abort_marker(self.store, current, released_by=self.txn_id)
            ctx.marker = None

    def _cleanup_after_commit(self) -> None:
        if self.flags.recovery:
            self.sublog.delete_persisted()
        # Uploads that fell out of the final stage are referenced by nothing.
        for path in self.sublog.uploads() - self.sublog.surviving_uploads():
            self.store.delete(path)

    def _finalize_history(self, outcome: CommitOutcome | None) -> None:
        if outcome is None:
            outcome = CommitOutcome(committed=False, reason="unknown")
        ops = []
        for spec in self._ops:
            item = dict(spec)
            seq = item.pop("entry_seq", None)
            if spec["op"] == "read" and seq is not None:
                entry = next((e for e in self.sublog.entries if e.seq == seq), None)
                item["value"] = entry.resolved.get("row") if entry else None
            ops.append(item)
        self._emit(
            "txn_complete",
            outcome="committed" if outcome.committed else "aborted",
            reason=outcome.reason,
            ops=ops,
            versions=outcome.versions,
            read_versions={t: ctx.versions.read for t, ctx in self.tables.items()},
            write_versions={
                t: ctx.versions.write for t, ctx in self.tables.items() if ctx.wrote
            },
            flags=self.flags.short(),
        )

    # -- re-execution fallback --------------------------------------------------

    def reexecute(self) -> None:
        """Throw away all resolved state and replay the recorded operations
        against fresh table views (the escalation path when replaying single
        steps cannot re-resolve)."""
        if self._reexecutions >= self.config.reexecute_limit:
            raise RedoConflictError("re-execution limit reached")
        self._reexecutions += 1
        self._emit("reexecute", attempt=self._reexecutions)
        self.sublog.undo(0)
        self._settle_remaining_markers()
        if self.flags.recovery:
            self.sublog.delete_persisted()
        specs = list(self._ops)
        self._ops = []
        self.sublog = Sublog(self.store, self.txn_id, persist=self.flags.recovery)
        self.dag = DependencyDag()
        self.tables = {}
        self._head = None
        self._head_loaded = False
        for spec in specs:
            if spec["op"] == "read":
                self.read(spec["table"], spec["key"])
            elif spec["op"] == "insert":
                self.insert(spec["table"], spec["rows"])
            elif spec["op"] in ("update", "delete"):
                self._apply_keyed(spec["table"], spec["key"], spec["modifier"], spec["op"])
            elif spec["op"] == "create_table":
                self.create_table(spec["table"], spec["schema"])


def _entry_json(entry: LogEntry) -> dict:
    return json.loads(entry.to_bytes())


class Client:
    """Factory for transactions sharing a store, flags, config, and history."""

    def __init__(
        self,
        store: ObjectStore,
        flags: FeatureFlags | str = FeatureFlags(),
        config: TxnConfig | None = None,
        history: HistoryLog | None = None,
        name: str | None = None,
    ) -> None:
        self.store = store
        self.flags = FeatureFlags.parse(flags) if isinstance(flags, str) else flags
        self.config = config or TxnConfig()
        self.history = history if history is not None else HistoryLog()
        self.name = name or f"client-{uuid.uuid4().hex[:6]}"

    def begin(
        self, flags: FeatureFlags | None = None, isolation_mode: str | None = None
    ) -> Txn:
        config = self.config
        if isolation_mode is not None:
            config = replace(config, isolation_mode=isolation_mode)
        return Txn(
            self.store,
            flags or self.flags,
            config,
            history=self.history,
            client=self.name,
        )

    def create_table(
        self,
        table: str,
        schema: dict | None = None,
        rows: list[dict] | None = None,
        rows_per_file: int | None = None,
    ) -> LogEntry:
        actions = []
        if rows:
            ordered = sorted((dict(r) for r in rows), key=lambda r: r["key"])
            chunk = rows_per_file or len(ordered)
            for i in range(0, len(ordered), chunk):
                actions.append(
                    otf_core.write_data_file(self.store, table, ordered[i : i + chunk])
                )
        return otf_core.create_table(self.store, table, schema, initial_actions=actions)

def resume_owner(
    store: ObjectStore,
    txn_id: str,
    config: TxnConfig | None = None,
    action: str = "commit",
) -> dict:
    """Finish an interrupted transaction from its persisted sublog.

    ``action="commit"`` replays the sublog (re-linking uploads that already
    landed) and commits each table exactly once: a table whose log already
    holds an entry stamped with this txn_id is treated as landed and never
    re-applied, so repeated resumes are idempotent. ``action="abort"`` rolls
    the transaction back (same path a foreign reaper takes). Either way the
    recovery claim object serializes the decision against concurrent reapers.

    Returns ``{"status", "versions"}`` where status is one of
    ``committed | aborted | already-complete | lost``.
    """
    config = config or TxnConfig()
    owner = f"owner:{txn_id[:8]}"
    entries = sublogs.load_persisted_entries(store, txn_id)
    manifest = sublogs.load_manifest(store, txn_id)
    if not entries and manifest is None:
        return {"status": "already-complete", "versions": {}}

    if action != "commit":
        report = sublogs.recover_orphan(store, txn_id, by=owner)
        return {"status": "aborted", "versions": {}, "report": report}

    claim = sublogs.claim_recovery(store, txn_id, by=owner, action="resume")
    if claim["claimed_by"] != owner or claim["action"] != "resume":
        return {"status": "lost", "versions": {}, "claim": claim}

    tables = sorted(
        {e.table for e in entries if e.table}
        | set(manifest.get("tables", []) if manifest else [])
    )

    # Exactly-once guard: anything already in a table's log under our txn_id
    # landed in a previous attempt.
    versions: dict[str, int] = {}
    for table in tables:
        try:
            tail = otf_core.latest_version(store, table)
        except TableNotFoundError:
            continue
        for v in range(tail + 1):
            entry = otf_core.read_entry(store, table, v)
            if entry.writer_txn == txn_id and not entry.is_marker:
                versions[table] = v
                break
    pending = [t for t in tables if t not in versions]
    if not pending:
        _resume_cleanup(store, txn_id, None)
        return {"status": "already-complete", "versions": versions}

    sub = Sublog(store, txn_id, persist=True)
    sub.entries = entries
    sub.mode = LOGICAL if any(e.mode == LOGICAL for e in entries) else sublogs.PHYSICAL
    for table in pending:
        try:
            snap = otf_core.read_snapshot(store, table)
            stage = TableStage(table=table, base_version=snap.version, base_files=dict(snap.live_files))
        except TableNotFoundError:
            stage = TableStage(table=table, base_version=-1, base_files={})
        sub.workspace.add_stage(stage)

    own: dict[str, Marker] = {}
    for table in pending:
        for m in markers.scan_markers(store, table):
            if m.txn_id != txn_id:
                continue
            live = markers.read_marker(store, table, m.version)  # fresh etag
            if live is not None and live.txn_id == txn_id:
                own[table] = live
    for entry in sub.entries:
        if entry.table in pending:
            sub._execute_redo(entry)

    for table in pending:
        actions = sub.workspace.stage(table).final_actions()
        marker = own.get(table)
        if marker is None:
            marker = markers.claim_with_retry(
                store,
                table,
                txn_id,
                timeout_ms=config.marker_timeout_ms,
                retry_limit=config.claim_retry_limit,
                clock=config.clock,
            )
        entry = markers.commit_marker(
            store,
            marker,
            actions,
            writer_txn=txn_id,
            checkpoint_interval=config.checkpoint_interval,
        )
        versions[table] = entry.version
    _resume_cleanup(store, txn_id, sub)
    return {"status": "committed", "versions": versions}


def _resume_cleanup(store: ObjectStore, txn_id: str, sub: Sublog | None) -> None:
    if sub is not None:
        for path in sub.uploads() - sub.surviving_uploads():
            store.delete(path)
        sub.delete_persisted()
    else:
        for key in store.list(sublogs.sublog_dir(txn_id)):
            store.delete(key)
