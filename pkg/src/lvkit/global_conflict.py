"""Cross-table ordering: dependency tracking and marker shifts.

Multi-table transactions serialize per table by marker position, which can
order two transactions differently on different tables. Each client therefore
keeps a local waits-for graph fed from what markers expose publicly:

* claiming behind someone's live marker adds an edge me -> owner,
* every marker publishes its owner's current dependency list, folded in as
  owner -> dependency edges,
* markers claimed after mine whose list names me are incoming edges.

A cycle through me means the orders disagree. It is broken by a marker shift:
free my marker in every shared table where a cycle peer sits behind me and
claim a fresh slot at the tail, putting me behind every peer everywhere.
Shifts touch only markers; the transaction's read versions stay put and the
peers' now-preceding commits are folded in before commit by the sublog
machinery. Waiting has a timeout backstop that shifts across all tables.

Shift policy (deterministic, locally computable): the transaction that closes
a cycle while claiming shifts itself. When a cycle is discovered by watching
(both ends could act), the one whose marker version is larger in the
lexicographically smallest shared table performs the shift.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .errors import KeyNotFoundError
from .markers import (
    DEFAULT_CLAIM_RETRY_LIMIT,
    DEFAULT_TIMEOUT_MS,
    Marker,
    abort_marker,
    claim_marker,
    claim_with_retry,
    read_marker,
)
from .object_store import ObjectStore
from .otf_core import LOG_DIR, Action, LogEntry, latest_version, log_key


class DependencyDag:
    """Waits-for edges between transaction ids, with originating tables."""

    def __init__(self) -> None:
        self.edges: dict[str, set[str]] = {}
        self.origins: dict[tuple[str, str], set[str]] = {}

    def add_edge(self, frm: str, to: str, table: str | None = None) -> None:
        if frm == to:
            return
        self.edges.setdefault(frm, set()).add(to)
        if table is not None:
            self.origins.setdefault((frm, to), set()).add(table)

    def drop_edges_from(self, frm: str, table: str) -> None:
        """Forget edges of ``frm`` that were induced only by ``table``."""
        for to in list(self.edges.get(frm, ())):
            tables = self.origins.get((frm, to))
            if tables is None:
                continue
            tables.discard(table)
            if not tables:
                self.edges[frm].discard(to)
                self.origins.pop((frm, to), None)

    def set_node_edges(self, node: str, deps: tuple[str, ...]) -> None:
        """Replace ``node``'s outgoing edges with its just-read published
        dependency list. The marker doc is the owner's own statement of whom
        it currently waits on; keeping edges it no longer claims would leave
        phantom cycles behind after the peer moves or commits."""
        fresh = {d for d in deps if d != node}
        self.edges[node] = fresh
        for key in [k for k in self.origins if k[0] == node and k[1] not in fresh]:
            self.origins.pop(key)

    def successors(self, node: str) -> set[str]:
        return set(self.edges.get(node, ()))

    def find_cycle(self, start: str) -> list[str] | None:
        """A path start -> ... -> start, or None. DFS; graphs here are tiny."""
        path: list[str] = [start]
        seen: set[str] = set()

        def dfs(node: str) -> list[str] | None:
            for nxt in sorted(self.edges.get(node, ())):
                if nxt == start:
                    return list(path)
                if nxt in seen:
                    continue
                seen.add(nxt)
                path.append(nxt)
                found = dfs(nxt)
                if found is not None:
                    return found
                path.pop()
            return None

        return dfs(start)


@dataclass
class ShiftRecord:
    txn_id: str
    reason: str  # "cycle" | "timeout"
    peers: tuple[str, ...]
    shifted: dict[str, tuple[int, int]]  # table -> (old_version, new_version)
    # Highest peer marker version known per shifted table when the shift ran;
    # the new marker must land strictly above it (shift progress guarantee).
    peer_floor: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "reason": self.reason,
            "peers": list(self.peers),
            "shifted": {t: list(v) for t, v in self.shifted.items()},
            "peer_floor": dict(self.peer_floor),
        }


@dataclass
class TableScan:
    """One pass over a table's log relative to our marker."""

    table: str
    marker: Marker
    waiting_on: list[Marker] = field(default_factory=list)
    newly_committed: list[tuple[int, list[Action]]] = field(default_factory=list)
    followers: list[Marker] = field(default_factory=list)

    @property
    def ready(self) -> bool:
        return not self.waiting_on


def _existing_versions(store: ObjectStore, table: str) -> list[int]:
    versions = []
    for key in store.list(f"{table}/{LOG_DIR}/"):
        name = key.rsplit("/", 1)[-1]
        if name.endswith(".json") and not name.endswith(".checkpoint.json"):
            try:
                versions.append(int(name[:-5]))
            except ValueError:
                pass
    return sorted(versions)


def _fetch_entry(store: ObjectStore, table: str, version: int) -> LogEntry | None:
    try:
        data, meta = store.get(log_key(table, version))
    except KeyNotFoundError:
        return None
    entry = LogEntry.from_bytes(data)
    entry_meta_etag = meta.etag
    if entry.is_marker:
        entry.lv["_etag"] = entry_meta_etag  # carried for abort/update calls
    return entry


def _classify(
    store: ObjectStore,
    table: str,
    txn_id: str,
    versions: list[int],
    settled: set[int],
    scan: TableScan,
    marker_version: int,
) -> None:
    """GET every unsettled slot and sort it into the scan buckets."""
    for version in versions:
        if version in settled or version == marker_version:
            continue
        entry = _fetch_entry(store, table, version)
        if entry is None:
            continue
        if entry.is_marker:
            m = Marker.from_entry(table, entry, etag=entry.lv.pop("_etag", ""))
            if m.txn_id == txn_id:
                continue
            if version < marker_version:
                scan.waiting_on.append(m)
            else:
                scan.followers.append(m)
        else:
            if entry.lv is not None and entry.lv.get("released"):
                settled.add(version)  # freed slot: nothing to fold
            else:
                settled.add(version)
                if version < marker_version and entry.actions:
                    scan.newly_committed.append((version, entry.actions))


def claim_and_observe(
    store: ObjectStore,
    dag: DependencyDag,
    txn_id: str,
    table: str,
    base_version: int,
    settled: set[int],
    depends_on: tuple[str, ...] = (),
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
    retry_limit: int = DEFAULT_CLAIM_RETRY_LIMIT,
    clock=time.time,
) -> TableScan:
    """Claim a marker at the tail, then observe the slots around it.

    Issues exactly one conditional put plus three reads on a quiet table
    (post-claim LIST, predecessor GET, own-slot readback); busier tables cost
    one GET per unsettled slot. Folds predecessor dependency lists into the
    DAG so a cycle closed by this claim is visible immediately.
    """
    base = base_version
    attempts = 0
    while True:
        got = claim_marker(
            store, table, txn_id, depends_on, timeout_ms, base_version=base, clock=clock
        )
        if isinstance(got, Marker):
            marker = got
            break
        attempts += 1
        if retry_limit is not None and attempts > retry_limit:
            from .errors import MarkerLostError

            raise MarkerLostError(f"claim on {table} lost {attempts} races")
        base = max(got.new_version_hint, latest_version(store, table))

    scan = TableScan(table=table, marker=marker)
    versions = _existing_versions(store, table)

    # Predecessor liveness re-check: always issued, even when the slot is known
    # committed, so a commit that landed between assignment and claim is seen.
    pred_version = marker.version - 1
    if pred_version >= 0:
        entry = _fetch_entry(store, table, pred_version)
        if entry is not None:
            if entry.is_marker:
                m = Marker.from_entry(table, entry, etag=entry.lv.pop("_etag", ""))
                if m.txn_id != txn_id:
                    scan.waiting_on.append(m)
                settled_pred = False
            else:
                settled_pred = True
                if (
                    pred_version not in settled
                    and not (entry.lv or {}).get("released")
                    and entry.actions
                ):
                    scan.newly_committed.append((pred_version, entry.actions))
            if settled_pred:
                settled.add(pred_version)

    # Own-slot readback: stolen-claim guard (mandatory on stores without an
    # atomic conditional put, kept unconditional for a uniform request shape).
    own = read_marker(store, table, marker.version)
    if own is not None and own.txn_id == txn_id:
        marker = own
        scan.marker = own

    _classify(
        store,
        table,
        txn_id,
        [v for v in versions if v != pred_version],
        settled,
        scan,
        marker.version,
    )
    scan.waiting_on.sort(key=lambda m: m.version)
    scan.followers.sort(key=lambda m: m.version)

    _merge_scan_edges(dag, txn_id, table, scan)
    return scan


def _merge_scan_edges(
    dag: DependencyDag, txn_id: str, table: str, scan: TableScan
) -> None:
    """Fold one table scan into the waits-for graph.

    Our own edge to each marker below us is positional fact; every scanned
    peer's outgoing edges are taken wholesale from its published dependency
    list, which supersedes anything read earlier."""
    for m in scan.waiting_on + scan.followers:
        dag.set_node_edges(m.txn_id, m.depends_on)
    for m in scan.waiting_on:
        dag.add_edge(txn_id, m.txn_id, table)
    for m in scan.followers:
        if txn_id in m.depends_on:
            dag.add_edge(m.txn_id, txn_id, table)


def commit_scan(
    store: ObjectStore,
    dag: DependencyDag,
    txn_id: str,
    table: str,
    marker: Marker,
    settled: set[int],
) -> TableScan:
    """One commit-phase pass: list the log, probe the successor slot, and GET
    whatever is still unsettled. Quiet tables cost one LIST plus one GET."""
    scan = TableScan(table=table, marker=marker)
    versions = _existing_versions(store, table)

    succ = marker.version + 1
    entry = _fetch_entry(store, table, succ)
    if entry is not None and entry.is_marker:
        m = Marker.from_entry(table, entry, etag=entry.lv.pop("_etag", ""))
        if m.txn_id != txn_id:
            scan.followers.append(m)
    elif entry is not None:
        settled.add(succ)

    _classify(
        store,
        table,
        txn_id,
        [v for v in versions if v != succ],
        settled,
        scan,
        marker.version,
    )
    scan.waiting_on.sort(key=lambda m: m.version)
    scan.followers.sort(key=lambda m: m.version)

    dag.drop_edges_from(txn_id, table)
    _merge_scan_edges(dag, txn_id, table, scan)
    return scan


def should_shift_on_watch(
    txn_id: str,
    peers: set[str],
    own_markers: dict[str, Marker],
    peer_positions: dict[str, dict[str, int]],
) -> bool:
    """Deterministic tie-break for cycles noticed while watching.

    peer_positions maps table -> {txn_id -> marker version} for live markers
    we have seen. We act only when our marker is the later one in the
    lexicographically smallest table we share with a cycle peer.
    """
    shared = sorted(
        t
        for t, positions in peer_positions.items()
        if t in own_markers and any(p in positions for p in peers)
    )
    if not shared:
        return False
    t_star = shared[0]
    ours = own_markers[t_star].version
    peer_best = max(
        v for p, v in peer_positions[t_star].items() if p in peers
    )
    return ours > peer_best


def marker_shift(
    store: ObjectStore,
    txn_id: str,
    own_markers: dict[str, Marker],
    peers: set[str],
    peer_positions: dict[str, dict[str, int]],
    reason: str = "cycle",
    timeout_ms: float = DEFAULT_TIMEOUT_MS,
    retry_limit: int = DEFAULT_CLAIM_RETRY_LIMIT,
    clock=time.time,
    depends_on: tuple[str, ...] = (),
) -> ShiftRecord:
    """Move our markers behind every cycle peer.

    Cycle shifts touch the tables where a peer sits behind us; timeout shifts
    touch every table we hold. Frees run before fresh claims so waiting peers
    unblock even if a claim then races. Mutates own_markers in place; read
    versions are untouched by design.
    """
    if reason == "timeout":
        tables = sorted(own_markers)
    else:
        tables = sorted(
            t
            for t, marker in own_markers.items()
            if any(
                v > marker.version
                for p, v in peer_positions.get(t, {}).items()
                if p in peers
            )
        )
    shifted: dict[str, tuple[int, int]] = {}
    peer_floor: dict[str, int] = {}
    for table in tables:
        old = own_markers[table]
        known = peer_positions.get(table, {})
        relevant = [v for p, v in known.items() if not peers or p in peers]
        peer_floor[table] = max(relevant, default=-1)
        current = read_marker(store, table, old.version)
        if current is not None and current.txn_id == txn_id:
            abort_marker(store, current, released_by=txn_id)
        new = claim_with_retry(
            store,
            table,
            txn_id,
            depends_on=depends_on,
            timeout_ms=timeout_ms,
            retry_limit=retry_limit,
            clock=clock,
        )
        own_markers[table] = new
        shifted[table] = (old.version, new.version)
    return ShiftRecord(
        txn_id=txn_id,
        reason=reason,
        peers=tuple(sorted(peers)),
        shifted=shifted,
        peer_floor=peer_floor,
    )
