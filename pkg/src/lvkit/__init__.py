"""lvkit: a minimal versioned-log table format over object storage, with
per-transaction recovery sublogs, cross-table ordering via log markers, and
optimistic multi-table isolation through a global version log."""

from .errors import (
    KeyNotFoundError,
    MarkerLostError,
    RecoveryError,
    RedoConflictError,
    StoreError,
    TableNotFoundError,
    TransientIOError,
    TxnStateError,
    UnsupportedOperationError,
    UnsupportedStoreError,
    VersionNotAvailableError,
)
from .history import Event, HistoryLog
from .object_store import (
    FaultInjector,
    FaultRule,
    FileSystemStore,
    MemoryStore,
    NonAtomicStore,
    ObjectMeta,
    ObjectStore,
    StoreStats,
    make_store,
)
from .otf_core import (
    Action,
    LogEntry,
    Snapshot,
    create_table,
    latest_version,
    list_tables,
    read_entry,
    read_rows,
    read_snapshot,
    write_checkpoint,
)
from .txn import Client, CommitOutcome, FeatureFlags, Txn, TxnConfig

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Client",
    "CommitOutcome",
    "Event",
    "FaultInjector",
    "FaultRule",
    "FeatureFlags",
    "FileSystemStore",
    "HistoryLog",
    "KeyNotFoundError",
    "LogEntry",
    "MarkerLostError",
    "MemoryStore",
    "NonAtomicStore",
    "ObjectMeta",
    "ObjectStore",
    "RecoveryError",
    "RedoConflictError",
    "Snapshot",
    "StoreError",
    "StoreStats",
    "TableNotFoundError",
    "TransientIOError",
    "Txn",
    "TxnConfig",
    "TxnStateError",
    "UnsupportedOperationError",
    "UnsupportedStoreError",
    "VersionNotAvailableError",
    "create_table",
    "latest_version",
    "list_tables",
    "make_store",
    "read_entry",
    "read_rows",
    "read_snapshot",
    "write_checkpoint",
]
