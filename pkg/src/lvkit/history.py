"""Append-only event log shared by transactions and the test harness.

Events are plain dicts with a global sequence number so concurrent clients
can interleave records safely; the JSON-lines form is the exchange format the
isolation oracle and the CLI consume.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field


@dataclass
class Event:
    seq: int
    ts: float
    kind: str
    txn_id: str | None = None
    client: str | None = None
    payload: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "ts": self.ts,
            "kind": self.kind,
            "txn_id": self.txn_id,
            "client": self.client,
            **{"payload": self.payload},
        }

    @staticmethod
    def from_json(obj: dict) -> "Event":
        return Event(
            seq=obj["seq"],
            ts=obj.get("ts", 0.0),
            kind=obj["kind"],
            txn_id=obj.get("txn_id"),
            client=obj.get("client"),
            payload=obj.get("payload", {}),
        )


class HistoryLog:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: list[Event] = []
        self._seq = 0

    def append(self, kind: str, txn_id: str | None = None, client: str | None = None, **payload) -> Event:
        with self._lock:
            event = Event(
                seq=self._seq, ts=time.time(), kind=kind, txn_id=txn_id, client=client, payload=payload
            )
            self._seq += 1
            self._events.append(event)
            return event

    def events(self, kind: str | None = None) -> list[Event]:
        with self._lock:
            items = list(self._events)
        if kind is not None:
            items = [e for e in items if e.kind == kind]
        return items

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for event in self.events():
                fh.write(json.dumps(event.to_json(), sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str) -> "HistoryLog":
        log = HistoryLog()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = Event.from_json(json.loads(line))
                with log._lock:
                    log._events.append(event)
                    log._seq = max(log._seq, event.seq + 1)
        return log
