"""Request accounting over :class:`~lvkit.object_store.StoreStats`.

Every store call is tallied by (operation, key). This module groups those
tallies into read/write classes and into key-space buckets (table metadata,
table data, coordination state) so a test can assert exact per-feature
overheads: "turning on cross-table coordination costs +1 metadata write and
+5 metadata reads per extra table" is checkable only if both sides of the
diff count the same things.

Counting rules
--------------
* Reads are ``get``, ``head`` and ``list``; writes are ``put``,
  ``put_if_absent``, ``overwrite_if_match`` and ``delete``.
* An operation counts when it is *issued*, whether or not it succeeds.
  A conditional write that loses its race is still a round-trip.
* Metadata means the table log (``<table>/_delta_log/``) plus all
  coordination state under ``_lv/``. Data means ``<table>/data/``.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..object_store import ObjectStore

READ_OPS = ("get", "head", "list")
WRITE_OPS = ("put", "put_if_absent", "overwrite_if_match", "delete")

LV_PREFIX = "_lv/"


def log_prefix(table: str) -> str:
    return f"{table}/_delta_log/"


def data_prefix(table: str) -> str:
    return f"{table}/data/"


@dataclass(frozen=True)
class OpCounts:
    """Read/write totals for one key-space bucket."""

    reads: int = 0
    writes: int = 0

    def __sub__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.reads - other.reads, self.writes - other.writes)

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(self.reads + other.reads, self.writes + other.writes)


@dataclass(frozen=True)
class UsageSnapshot:
    """Bucketed totals at one point in time, diffable against a later one."""

    metadata: OpCounts
    data: OpCounts
    total: OpCounts

    def __sub__(self, other: "UsageSnapshot") -> "UsageSnapshot":
        return UsageSnapshot(
            metadata=self.metadata - other.metadata,
            data=self.data - other.data,
            total=self.total - other.total,
        )

    def as_dict(self) -> dict:
        return {
            "metadata": {"reads": self.metadata.reads, "writes": self.metadata.writes},
            "data": {"reads": self.data.reads, "writes": self.data.writes},
            "total": {"reads": self.total.reads, "writes": self.total.writes},
        }


def _bucket(stats, ops: tuple[str, ...], prefixes: list[str]) -> int:
    return sum(stats.count(op, prefix) for op in ops for prefix in prefixes)


def snapshot(store: ObjectStore, tables: list[str]) -> UsageSnapshot:
    """Current totals for ``tables``, bucketed per the module counting rules."""
    stats = store.stats
    meta_prefixes = [log_prefix(t) for t in tables] + [LV_PREFIX]
    data_prefixes = [data_prefix(t) for t in tables]
    return UsageSnapshot(
        metadata=OpCounts(
            reads=_bucket(stats, READ_OPS, meta_prefixes),
            writes=_bucket(stats, WRITE_OPS, meta_prefixes),
        ),
        data=OpCounts(
            reads=_bucket(stats, READ_OPS, data_prefixes),
            writes=_bucket(stats, WRITE_OPS, data_prefixes),
        ),
        total=OpCounts(
            reads=sum(stats.total(op) for op in READ_OPS),
            writes=sum(stats.total(op) for op in WRITE_OPS),
        ),
    )


def delta(
    store: ObjectStore, tables: list[str], before: UsageSnapshot
) -> UsageSnapshot:
    """Totals accrued since ``before`` was taken."""
    return snapshot(store, tables) - before
