"""Exception types shared across the toolkit."""


class StoreError(Exception):
    """Base class for object-store failures."""


class KeyNotFoundError(StoreError):
    """Requested key does not exist."""


class TransientIOError(StoreError):
    """Injected or transient I/O failure; the operation may be retried."""


class UnsupportedStoreError(StoreError):
    """Requested backend is not available in this build."""


class TableNotFoundError(Exception):
    """Table has no log entries at all."""


class VersionNotAvailableError(Exception):
    """Requested version is beyond the committed chain."""


class MarkerLostError(Exception):
    """A marker slot was overwritten by someone else (reaped or stolen)."""


class RecoveryError(Exception):
    """Persistent transaction state is unusable or recovery lost a race."""


class TxnStateError(Exception):
    """Operation is not valid for the transaction's current status."""


class UnsupportedOperationError(Exception):
    """Operation rejected for the active feature set (e.g. multi-table write)."""


class RedoConflictError(Exception):
    """Replay could not re-resolve a step (key vanished); re-execute the txn."""
