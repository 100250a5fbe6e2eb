"""Crash-point matrix: kill a transaction at an injected store fault, run the
janitor recipe, and check the system's promises still hold.

Each case arms one trigger rule (plus blockers for the cases that must keep
the global ticket from being released on the way out, since an in-process
exception unwinds ``finally`` blocks a real crash would skip), runs a fixed
victim transaction until the fault fires, abandons the victim, advances a
fake clock past every timeout, and then recovers:

1. roll the global ticket forward/away (before touching markers — a stamped
   intent lands into the owner's still-live marker slots),
2. reap expired markers,
3. settle the victim's sublog — janitor rollback, or owner resume when the
   case exercises the resume path,
4. sweep unreferenced data objects.

Afterwards the case asserts: every version of every table still replays; no
live markers remain; no unreferenced data objects remain; a fresh peer
transaction commits; and the victim's effect is present exactly once or not
at all, per the case's expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import markers, otf_core, sublogs, version_log
from ..errors import TransientIOError
from ..object_store import FaultInjector, FaultRule, MemoryStore, ObjectStore
from ..txn import Client, FeatureFlags, TxnConfig, resume_owner

MARKER_TIMEOUT_MS = 5_000.0
TICKET_TIMEOUT_MS = 5_000.0


@dataclass
class FakeClock:
    """Injectable time source; lets a test expire timeouts instantly."""

    t: float = 1_700_000_000.0

    def __call__(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds


@dataclass(frozen=True)
class FaultCase:
    name: str
    flags: str
    rule: dict  # FaultRule kwargs for the trigger
    blockers: tuple = ()  # extra FaultRule kwargs, armed alongside the trigger
    multi: bool = False  # victim spans two tables
    resume: str | None = None  # None: janitor rollback; "commit"/"abort": owner
    # expected victim delta on (table, key) after recovery; None skips the check
    expect: dict = field(default_factory=dict)
    crash_expected: bool = True  # delay faults do not kill the victim

    @property
    def case_id(self) -> str:
        tail = f"+resume-{self.resume}" if self.resume else ""
        return f"{self.name}[{self.flags}]{tail}"


@dataclass
class CaseReport:
    case: FaultCase
    ok: bool
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    details: dict = field(default_factory=dict)


def collect_garbage(store: ObjectStore, table: str) -> list[str]:
    """Delete data objects no log entry (at any version) has ever referenced.

    Run only after in-flight sublogs are settled: an upload belonging to a
    live transaction is referenced by its sublog, not by the chain yet.
    """
    referenced: set[str] = set()
    for entry in markers.scan_chain(store, table):
        for action in entry.actions:
            if action.kind == "add_file" and action.file_path:
                referenced.add(action.file_path)
    removed = []
    for key in store.list(f"{table}/data/"):
        if key not in referenced:
            store.delete(key)
            removed.append(key)
    return removed


def _value(store: ObjectStore, table: str, key: str) -> int | None:
    snap = otf_core.read_snapshot(store, table)
    rows = otf_core.read_rows(store, snap, keys=[key])
    return rows[0]["n"] if rows else None


def run_fault_case(case: FaultCase) -> CaseReport:
    clock = FakeClock()
    injector = FaultInjector()
    store = MemoryStore(injector=injector)
    config = TxnConfig(
        clock=clock,
        marker_timeout_ms=MARKER_TIMEOUT_MS,
        ticket_timeout_ms=TICKET_TIMEOUT_MS,
        wait_timeout_ms=1_500,
        poll_interval_ms=1.0,
        claim_retry_limit=500,
    )
    tables = ["ft1", "ft2"] if case.multi else ["ft1"]
    seeder = Client(store, flags=case.flags, config=config, name="seed")
    for t in tables:
        seeder.create_table(
            t,
            schema={"fields": ["key", "n"]},
            rows=[{"key": f"k{i}", "n": 0} for i in range(4)],
            rows_per_file=2,
        )

    victim = Client(store, flags=case.flags, config=config, name="victim").begin()
    victim_id = victim.txn_id
    trigger = FaultRule(**case.rule)
    injector.add(trigger)
    for spec in case.blockers:
        injector.add(FaultRule(**spec))
    crashed = False
    unexpected: str | None = None
    try:
        victim.read("ft1", "k0")
        victim.update("ft1", "k0", add_fields={"n": 7})
        if case.multi:
            victim.update("ft2", "k1", add_fields={"n": 7})
        victim.commit()
    except TransientIOError:
        crashed = True
    except Exception as exc:  # a fault must never surface as anything else
        unexpected = f"{type(exc).__name__}: {exc}"
    finally:
        injector.clear()

    checks: list[tuple[str, bool, str]] = []
    checks.append(("no-unexpected-error", unexpected is None, unexpected or ""))
    checks.append(
        (
            "crash-behaviour",
            crashed == case.crash_expected and trigger.fired >= 1,
            f"crashed={crashed} fired={trigger.fired}",
        )
    )

    # --- janitor recipe ---
    clock.advance(30.0)  # beyond both timeouts
    ticket_outcome = version_log.recover_expired_ticket(
        store, timeout_ms=TICKET_TIMEOUT_MS, clock=clock
    )
    for t in tables:
        markers.reap_stale(store, t, now_ms=clock() * 1000.0)
    resume_reports: dict[str, dict] = {}
    if case.crash_expected:
        if case.resume:
            resume_reports["first"] = resume_owner(
                store, victim_id, config=config, action=case.resume
            )
            resume_reports["second"] = resume_owner(
                store, victim_id, config=config, action=case.resume
            )
        elif FeatureFlags.parse(case.flags).recovery:
            try:
                sublogs.recover_orphan(store, victim_id, by="janitor")
            except Exception as exc:
                checks.append(("janitor-rollback", False, f"{type(exc).__name__}: {exc}"))
    swept: list[str] = []
    for t in tables:
        swept.extend(collect_garbage(store, t))

    # --- invariants ---
    for t in tables:
        replayable = True
        note = ""
        tip = otf_core.latest_version(store, t)
        for v in range(tip + 1):
            try:
                snap = otf_core.read_snapshot(store, t, v)
                otf_core.read_rows(store, snap)
            except Exception as exc:
                replayable, note = False, f"{t}@{v}: {type(exc).__name__}: {exc}"
                break
        checks.append((f"replayable-{t}", replayable, note))
        live = markers.scan_markers(store, t)
        checks.append((f"no-live-markers-{t}", not live, f"{[m.version for m in live]}"))
        missing = [
            p
            for p in otf_core.read_snapshot(store, t).file_paths
            if not _exists(store, p)
        ]
        checks.append((f"live-files-present-{t}", not missing, f"{missing}"))

    if case.resume:
        first = resume_reports.get("first", {})
        second = resume_reports.get("second", {})
        want_first = ("committed", "already-complete") if case.resume == "commit" else (
            "aborted",
            "already-complete",
        )
        checks.append(
            (
                "resume-first",
                first.get("status") in want_first,
                f"{first.get('status')}",
            )
        )
        checks.append(
            (
                "resume-idempotent",
                second.get("status") == "already-complete",
                f"{second.get('status')}",
            )
        )

    for (t, key), want in case.expect.items():
        if want is None:
            continue
        got = _value(store, t, key)
        checks.append((f"value-{t}/{key}", got == want, f"want {want}, got {got}"))

    # the system stays available: a fresh transaction commits after recovery
    peer = Client(store, flags=case.flags, config=config, name="peer").begin()
    peer.read("ft1", "k2")
    peer.update("ft1", "k2", add_fields={"n": 1})
    peer_outcome = peer.commit()
    checks.append(("peer-commits", peer_outcome.committed, str(peer_outcome.reason)))
    checks.append(("peer-value", _value(store, "ft1", "k2") == 1, ""))

    ok = all(passing for _, passing, _ in checks)
    return CaseReport(
        case=case,
        ok=ok,
        checks=checks,
        details={
            "ticket": ticket_outcome,
            "resume": {k: v.get("status") for k, v in resume_reports.items()},
            "swept": swept,
        },
    )


def _exists(store: ObjectStore, key: str) -> bool:
    from ..errors import KeyNotFoundError

    try:
        store.head(key)
        return True
    except KeyNotFoundError:
        return False


def _lock_blockers() -> tuple:
    """Keep the victim from releasing the global ticket while it unwinds."""
    return (
        dict(
            op="delete",
            key_prefix="_lv/global/validation.lock",
            action="fail-before",
            nth=0,
        ),
    )


def default_matrix() -> list[FaultCase]:
    """Crash points x feature rows; at least twenty distinct combinations."""
    cases: list[FaultCase] = []

    def crash(point: str, flags: str, rule: dict, **kw) -> None:
        cases.append(FaultCase(name=point, flags=flags, rule=rule, **kw))

    zero = {("ft1", "k0"): 0}
    seven = {("ft1", "k0"): 7}

    # 1. right after the claim landed (marker live, little or no sublog)
    for flags in ("r", "r,ct", "r,ct,i"):
        crash(
            "claim-after",
            flags,
            dict(op="put_if_absent", key_prefix="ft1/_delta_log/", action="fail-after", nth=1),
            expect=dict(zero),
        )
    # 2. first sublog write
    for flags in ("r", "r,ct", "r,ct,i"):
        crash(
            "sublog-first-write",
            flags,
            dict(op="put", key_prefix="_lv/sublogs/", action="fail-after", nth=1),
            expect=dict(zero),
        )
    # 3. data object landed, crash immediately after
    for flags in ("r", "r,ct", "r,ct,i"):
        crash(
            "upload-after",
            flags,
            dict(op="put", key_prefix="ft1/data/", action="fail-after", nth=1),
            expect=dict(zero),
        )
    # 4. data object never landed (entry recorded first)
    for flags in ("r", "r,ct"):
        crash(
            "upload-before",
            flags,
            dict(op="put", key_prefix="ft1/data/", action="fail-before", nth=1),
            expect=dict(zero),
        )
    # 5. commit overwrite attempted but never landed
    for flags in ("r", "r,ct"):
        crash(
            "commit-before",
            flags,
            dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-before", nth=1),
            expect=dict(zero),
        )
    # ... under validation the stamped intent makes the commit durable: the
    # janitor must finish it, not roll it back.
    crash(
        "commit-before",
        "r,ct,i",
        dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-before", nth=1),
        blockers=_lock_blockers(),
        expect=dict(seven),
    )
    # 6. commit landed, crash before any cleanup
    crash(
        "commit-after",
        "r",
        dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-after", nth=1),
        expect=dict(seven),
    )
    # multi-table: first table landed, second still pending -> landed prefix
    # survives a rollback janitor...
    crash(
        "commit-after",
        "r,ct",
        dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-after", nth=1),
        multi=True,
        expect={("ft1", "k0"): 7, ("ft2", "k1"): 0},
    )
    # ...while a stamped intent completes the whole transaction.
    crash(
        "commit-after",
        "r,ct,i",
        dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-after", nth=1),
        blockers=_lock_blockers(),
        multi=True,
        expect={("ft1", "k0"): 7, ("ft2", "k1"): 7},
    )
    # 7. second write into the sublog directory (the running manifest)
    for flags in ("r", "r,ct"):
        crash(
            "sublog-second-write",
            flags,
            dict(op="put", key_prefix="_lv/sublogs/", action="fail-after", nth=2),
            expect=dict(zero),
        )
    # 8. died holding the ticket, before stamping any intent
    crash(
        "ticket-held",
        "r,ct,i",
        dict(op="overwrite_if_match", key_prefix="_lv/global/validation.lock", action="fail-before", nth=1),
        blockers=_lock_blockers(),
        expect=dict(zero),
    )
    # 9. died right after stamping the intent: determined, must land
    crash(
        "intent-stamped",
        "r,ct,i",
        dict(op="overwrite_if_match", key_prefix="_lv/global/validation.lock", action="fail-after", nth=1),
        blockers=_lock_blockers(),
        multi=True,
        expect={("ft1", "k0"): 7, ("ft2", "k1"): 7},
    )
    # 10. crash after claiming the second table of a multi-table txn
    for flags in ("r,ct", "r,ct,i"):
        crash(
            "second-claim-after",
            flags,
            dict(op="put_if_absent", key_prefix="ft2/_delta_log/", action="fail-after", nth=1),
            multi=True,
            expect={("ft1", "k0"): 0, ("ft2", "k1"): 0},
        )
    # 11. pure latency is not a failure: the victim just runs slower
    for flags in ("r", "r,ct"):
        crash(
            "slow-log-reads",
            flags,
            dict(op="get", key_prefix="ft1/_delta_log/", action="delay-ms", nth=0, delay_ms=5.0),
            expect=dict(seven),
            crash_expected=False,
        )
    # 12. owner resume instead of the janitor: finish or roll back exactly once
    cases.append(
        FaultCase(
            name="upload-after",
            flags="r",
            rule=dict(op="put", key_prefix="ft1/data/", action="fail-after", nth=1),
            resume="commit",
            expect=dict(seven),
        )
    )
    cases.append(
        FaultCase(
            name="commit-after",
            flags="r",
            rule=dict(op="overwrite_if_match", key_prefix="ft1/_delta_log/", action="fail-after", nth=1),
            resume="commit",
            expect=dict(seven),
        )
    )
    cases.append(
        FaultCase(
            name="upload-after",
            flags="r,ct",
            rule=dict(op="put", key_prefix="ft1/data/", action="fail-after", nth=1),
            resume="abort",
            expect=dict(zero),
        )
    )
    return cases


def run_fault_matrix(cases: list[FaultCase] | None = None) -> list[CaseReport]:
    return [run_fault_case(case) for case in (cases or default_matrix())]
