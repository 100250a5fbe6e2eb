"""Object-store abstraction with conditional writes, stats, and fault injection.

Two backends are provided: an in-memory store (strongly consistent, per-key
linearizable, cheap enough for exhaustive tests) and a local-filesystem store
(per-key advisory locking so several processes can share a directory). Both
count every issued request in a StoreStats instance and route every call
through an optional FaultInjector so tests can kill or delay specific
operations.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

from .errors import KeyNotFoundError, TransientIOError

# Operation names used for stats and fault matching.
OPS = ("put", "put_if_absent", "overwrite_if_match", "get", "head", "list", "delete")


def _etag(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ObjectMeta:
    key: str
    etag: str
    size: int
    created_at: float


@dataclass
class PutResult:
    created: bool
    meta: ObjectMeta | None = None


class StoreStats:
    """Issued-request counters, partitioned by full key.

    Counts are incremented when an operation is *issued*, before the backend
    decides whether it succeeds, so not-found probes and failed conditionals
    are visible to accounting. Injected delays are recorded per operation.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._by_op: dict[str, Counter] = {op: Counter() for op in OPS}
        self.injected_delay_ms: Counter = Counter()

    def record(self, op: str, key: str) -> None:
        with self._lock:
            self._by_op[op][key] += 1

    def record_delay(self, op: str, ms: float) -> None:
        with self._lock:
            self.injected_delay_ms[op] += ms

    def count(self, op: str, prefix: str = "") -> int:
        with self._lock:
            return sum(n for k, n in self._by_op[op].items() if k.startswith(prefix))

    def count_matching(self, op: str, substring: str) -> int:
        with self._lock:
            return sum(n for k, n in self._by_op[op].items() if substring in k)

    def snapshot(self) -> dict[str, Counter]:
        with self._lock:
            return {op: Counter(c) for op, c in self._by_op.items()}

    def total(self, op: str) -> int:
        return self.count(op, "")


@dataclass
class FaultRule:
    """Injects a failure or delay into matching store operations.

    A rule matches when the operation name equals ``op`` (or ``op`` is "*")
    and the key starts with ``key_prefix``. ``nth`` counts matches starting at
    1; 0 means every match. Actions: "fail-before" raises before the backend
    applies the operation, "fail-after" applies it first and then raises,
    "delay-ms" sleeps for ``delay_ms`` before applying.
    """

    op: str
    key_prefix: str
    action: str  # fail-before | fail-after | delay-ms
    nth: int = 0
    delay_ms: float = 0.0
    hits: int = field(default=0, init=False)
    fired: int = field(default=0, init=False)

    def matches(self, op: str, key: str) -> bool:
        return (self.op == "*" or self.op == op) and key.startswith(self.key_prefix)


class FaultInjector:
    def __init__(self, rules: list[FaultRule] | None = None) -> None:
        self._lock = threading.Lock()
        self.rules: list[FaultRule] = list(rules or [])

    def add(self, rule: FaultRule) -> FaultRule:
        with self._lock:
            self.rules.append(rule)
        return rule

    def clear(self) -> None:
        with self._lock:
            self.rules.clear()

    def _armed(self, op: str, key: str) -> list[FaultRule]:
        armed = []
        with self._lock:
            for rule in self.rules:
                if not rule.matches(op, key):
                    continue
                rule.hits += 1
                if rule.nth == 0 or rule.hits == rule.nth:
                    rule.fired += 1
                    armed.append(rule)
        return armed

    def before(self, op: str, key: str, stats: StoreStats) -> list[FaultRule]:
        """Apply pre-operation effects; returns rules whose fail-after is pending."""
        armed = self._armed(op, key)
        pending_after = []
        for rule in armed:
            if rule.action == "fail-before":
                raise TransientIOError(f"injected fail-before {op} {key}")
            if rule.action == "delay-ms":
                stats.record_delay(op, rule.delay_ms)
                time.sleep(rule.delay_ms / 1000.0)
            elif rule.action == "fail-after":
                pending_after.append(rule)
        return pending_after

    @staticmethod
    def after(pending: list[FaultRule], op: str, key: str) -> None:
        if pending:
            raise TransientIOError(f"injected fail-after {op} {key}")


class ObjectStore:
    """Interface shared by all backends.

    All operations are linearizable per key. ``put_if_absent`` and
    ``overwrite_if_match`` are the only coordination primitives the rest of
    the toolkit relies on; backends that cannot provide an atomic
    put-if-absent advertise it via ``supports_put_if_absent`` and callers fall
    back to write-then-verify.
    """

    supports_put_if_absent = True

    def __init__(self, injector: FaultInjector | None = None) -> None:
        self.stats = StoreStats()
        self.injector = injector or FaultInjector()
        self._change_cond = threading.Condition()
        self._change_seq = 0

    # -- change notification (used by commit-wait loops) --

    def change_token(self) -> int:
        with self._change_cond:
            return self._change_seq

    def wait_for_change(self, token: int, timeout: float) -> int:
        """Block until any mutation happened after ``token`` or timeout elapses."""
        deadline = time.monotonic() + timeout
        with self._change_cond:
            while self._change_seq == token:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._change_cond.wait(remaining)
            return self._change_seq

    def _notify_change(self) -> None:
        with self._change_cond:
            self._change_seq += 1
            self._change_cond.notify_all()

    # -- operation wrappers: stats + fault injection around backend hooks --

    def _run(self, op: str, key: str, fn):
        self.stats.record(op, key)
        pending = self.injector.before(op, key, self.stats)
        result = fn()
        FaultInjector.after(pending, op, key)
        if op in ("put", "put_if_absent", "overwrite_if_match", "delete"):
            self._notify_change()
        return result

    def put(self, key: str, data: bytes) -> ObjectMeta:
        return self._run("put", key, lambda: self._put(key, data))

    def put_if_absent(self, key: str, data: bytes) -> PutResult:
        return self._run("put_if_absent", key, lambda: self._put_if_absent(key, data))

    def overwrite_if_match(self, key: str, data: bytes, expected_etag: str) -> PutResult:
        """Replace ``key`` only if its current etag equals ``expected_etag``.

        Returns created=True with fresh meta on success; created=False with
        the winning meta on etag mismatch. Raises KeyNotFoundError if the key
        is absent.
        """
        return self._run(
            "overwrite_if_match", key, lambda: self._overwrite_if_match(key, data, expected_etag)
        )

    def get(self, key: str) -> tuple[bytes, ObjectMeta]:
        return self._run("get", key, lambda: self._get(key))

    def head(self, key: str) -> ObjectMeta:
        return self._run("head", key, lambda: self._head(key))

    def list(self, prefix: str, start_after: str | None = None) -> list[str]:
        """All keys under ``prefix`` in lexicographic order, optionally > start_after."""
        return self._run("list", prefix, lambda: self._list(prefix, start_after))

    def delete(self, key: str) -> bool:
        return self._run("delete", key, lambda: self._delete(key))

    # convenience used widely in tests
    def get_json_bytes(self, key: str) -> bytes:
        return self.get(key)[0]

    # backend hooks
    def _put(self, key, data):
        raise NotImplementedError

    def _put_if_absent(self, key, data):
        raise NotImplementedError

    def _overwrite_if_match(self, key, data, expected_etag):
        raise NotImplementedError

    def _get(self, key):
        raise NotImplementedError

    def _head(self, key):
        raise NotImplementedError

    def _list(self, prefix, start_after):
        raise NotImplementedError

    def _delete(self, key):
        raise NotImplementedError


class MemoryStore(ObjectStore):
    """Dict-backed store; a single lock makes every operation atomic."""

    def __init__(self, injector: FaultInjector | None = None) -> None:
        super().__init__(injector)
        self._lock = threading.RLock()
        self._objects: dict[str, tuple[bytes, ObjectMeta]] = {}

    def _meta(self, key: str, data: bytes) -> ObjectMeta:
        return ObjectMeta(key=key, etag=_etag(data), size=len(data), created_at=time.time())

    def _put(self, key, data):
        with self._lock:
            meta = self._meta(key, data)
            self._objects[key] = (bytes(data), meta)
            return meta

    def _put_if_absent(self, key, data):
        with self._lock:
            if key in self._objects:
                return PutResult(created=False, meta=self._objects[key][1])
            meta = self._meta(key, data)
            self._objects[key] = (bytes(data), meta)
            return PutResult(created=True, meta=meta)

    def _overwrite_if_match(self, key, data, expected_etag):
        with self._lock:
            if key not in self._objects:
                raise KeyNotFoundError(key)
            current = self._objects[key][1]
            if current.etag != expected_etag:
                return PutResult(created=False, meta=current)
            meta = self._meta(key, data)
            self._objects[key] = (bytes(data), meta)
            return PutResult(created=True, meta=meta)

    def _get(self, key):
        with self._lock:
            if key not in self._objects:
                raise KeyNotFoundError(key)
            data, meta = self._objects[key]
            return data, meta

    def _head(self, key):
        with self._lock:
            if key not in self._objects:
                raise KeyNotFoundError(key)
            return self._objects[key][1]

    def _list(self, prefix, start_after):
        with self._lock:
            keys = sorted(k for k in self._objects if k.startswith(prefix))
        if start_after is not None:
            keys = [k for k in keys if k > start_after]
        return keys

    def _delete(self, key):
        with self._lock:
            return self._objects.pop(key, None) is not None


class FileSystemStore(ObjectStore):
    """Store over a local directory; safe for concurrent processes.

    Keys map directly to paths under the root. put_if_absent uses O_EXCL;
    conditional overwrite takes a per-key flock so check-and-replace is
    atomic across processes. Etags are content hashes, recomputed on read.
    """

    def __init__(self, root: str, injector: FaultInjector | None = None) -> None:
        super().__init__(injector)
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _path(self, key: str) -> str:
        path = os.path.normpath(os.path.join(self.root, key))
        if not path.startswith(self.root):
            raise ValueError(f"key escapes store root: {key}")
        return path

    def _lockfile(self, key: str):
        import fcntl

        lock_path = self._path(key) + ".lock"
        os.makedirs(os.path.dirname(lock_path), exist_ok=True)
        fh = open(lock_path, "a+")
        fcntl.flock(fh, fcntl.LOCK_EX)
        return fh

    def _meta_for(self, key: str, path: str) -> ObjectMeta:
        with open(path, "rb") as fh:
            data = fh.read()
        st = os.stat(path)
        return ObjectMeta(key=key, etag=_etag(data), size=len(data), created_at=st.st_mtime)

    def _write_atomic(self, path: str, data: bytes) -> None:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _put(self, key, data):
        path = self._path(key)
        self._write_atomic(path, data)
        return ObjectMeta(key=key, etag=_etag(data), size=len(data), created_at=time.time())

    def _put_if_absent(self, key, data):
        import fcntl

        path = self._path(key)
        fh = self._lockfile(key)
        try:
            if os.path.exists(path):
                return PutResult(created=False, meta=self._meta_for(key, path))
            self._write_atomic(path, data)
            return PutResult(
                created=True,
                meta=ObjectMeta(key=key, etag=_etag(data), size=len(data), created_at=time.time()),
            )
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()

    def _overwrite_if_match(self, key, data, expected_etag):
        import fcntl

        path = self._path(key)
        fh = self._lockfile(key)
        try:
            if not os.path.exists(path):
                raise KeyNotFoundError(key)
            current = self._meta_for(key, path)
            if current.etag != expected_etag:
                return PutResult(created=False, meta=current)
            self._write_atomic(path, data)
            return PutResult(
                created=True,
                meta=ObjectMeta(key=key, etag=_etag(data), size=len(data), created_at=time.time()),
            )
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()

    def _get(self, key):
        path = self._path(key)
        if not os.path.exists(path):
            raise KeyNotFoundError(key)
        with open(path, "rb") as fh:
            data = fh.read()
        return data, ObjectMeta(
            key=key, etag=_etag(data), size=len(data), created_at=os.stat(path).st_mtime
        )

    def _head(self, key):
        path = self._path(key)
        if not os.path.exists(path):
            raise KeyNotFoundError(key)
        return self._meta_for(key, path)

    def _list(self, prefix, start_after):
        keys = []
        for dirpath, _dirnames, filenames in os.walk(self.root):
            for name in filenames:
                if name.endswith(".lock") or ".tmp." in name:
                    continue
                full = os.path.join(dirpath, name)
                key = os.path.relpath(full, self.root)
                if key.startswith(prefix):
                    keys.append(key)
        keys.sort()
        if start_after is not None:
            keys = [k for k in keys if k > start_after]
        return keys

    def _delete(self, key):
        path = self._path(key)
        try:
            os.remove(path)
            return True
        except FileNotFoundError:
            return False


class NonAtomicStore(ObjectStore):
    """Wrapper that hides the conditional-put capability of an inner store.

    Emulates backends without compare-and-set: put_if_absent degrades to a
    plain last-writer-wins put. Callers must verify ownership afterwards by
    reading the key back (the markers module does exactly that).
    """

    supports_put_if_absent = False

    def __init__(self, inner: ObjectStore) -> None:
        super().__init__(inner.injector)
        self.inner = inner
        self.stats = inner.stats

    def _put(self, key, data):
        return self.inner._put(key, data)

    def _put_if_absent(self, key, data):
        meta = self.inner._put(key, data)
        return PutResult(created=True, meta=meta)

    def _overwrite_if_match(self, key, data, expected_etag):
        return self.inner._overwrite_if_match(key, data, expected_etag)

    def _get(self, key):
        return self.inner._get(key)

    def _head(self, key):
        return self.inner._head(key)

    def _list(self, prefix, start_after):
        return self.inner._list(prefix, start_after)

    def _delete(self, key):
        return self.inner._delete(key)


def make_store(kind: str, root: str | None = None) -> ObjectStore:
    """Factory used by the CLI: kind in {mem, fs, s3}."""
    if kind == "mem":
        return MemoryStore()
    if kind == "fs":
        if not root:
            raise ValueError("fs store needs a root directory")
        return FileSystemStore(root)
    if kind == "s3":
        from .errors import UnsupportedStoreError

        raise UnsupportedStoreError(
            "s3 backend is not built into this distribution; use mem or fs"
        )
    raise ValueError(f"unknown store kind: {kind}")
