"""
Timestamped measurement records and the JSONL event log.

The log is append-only: a schema header line, then one JSON object per
record.  Connection records carry the keys conn_id, ip, port, dir,
open_ms, close_ms, ua, hs; propagation records carry txid, conn_id, ms,
kind.  Optional keys (close_ms, ua) are omitted when absent.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

SCHEMA_HEADER = {"schema": "btcwatch/events", "version": 1}


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class ConnectionRecord:
    """One inbound or outbound connection as seen by the node."""

    conn_id: int
    remote_ip: str
    remote_port: int
    direction: str  # "inbound" | "outbound"
    open_ms: int
    close_ms: int | None = None
    version_string: str | None = None
    handshake_completed: bool = False

    @property
    def completed(self) -> bool:
        """Both opening and closing times are known."""
        return self.close_ms is not None

    @property
    def duration_ms(self) -> int | None:
        if self.close_ms is None:
            return None
        return self.close_ms - self.open_ms

    def to_json(self) -> dict:
        obj = {
            "conn_id": self.conn_id,
            "ip": self.remote_ip,
            "port": self.remote_port,
            "dir": self.direction,
            "open_ms": self.open_ms,
        }
        if self.close_ms is not None:
            obj["close_ms"] = self.close_ms
        if self.version_string is not None:
            obj["ua"] = self.version_string
        obj["hs"] = self.handshake_completed
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ConnectionRecord":
        return cls(
            conn_id=obj["conn_id"],
            remote_ip=obj["ip"],
            remote_port=obj["port"],
            direction=obj["dir"],
            open_ms=obj["open_ms"],
            close_ms=obj.get("close_ms"),
            version_string=obj.get("ua"),
            handshake_completed=obj["hs"],
        )


@dataclass
class PropagationRecord:
    """One transaction-receive event; the same txid recurs once per relayer."""

    tx_id: bytes  # 32 bytes, wire order
    connection_id: int
    remote_ip: str
    receive_ms: int
    announce_kind: str  # "inv" | "full_tx"

    def to_json(self) -> dict:
        return {
            "txid": self.tx_id[::-1].hex(),
            "conn_id": self.connection_id,
            "ip": self.remote_ip,
            "ms": self.receive_ms,
            "kind": self.announce_kind,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PropagationRecord":
        return cls(
            tx_id=bytes.fromhex(obj["txid"])[::-1],
            connection_id=obj["conn_id"],
            remote_ip=obj.get("ip", ""),
            receive_ms=obj["ms"],
            announce_kind=obj["kind"],
        )


class EventSink:
    """Collects records in memory and, when given a path, appends them as JSONL.

    Connection handlers share one sink; appends are serialized by the event
    loop, so ordering within a connection follows receive time.
    """

    def __init__(self, log_path: str | Path | None = None):
        self.connections: list[ConnectionRecord] = []
        self.propagations: list[PropagationRecord] = []
        self._next_conn_id = 0
        self._fh: IO[str] | None = None
        if log_path is not None:
            self._fh = open(log_path, "a", encoding="utf-8")
            if self._fh.tell() == 0:
                self._write(SCHEMA_HEADER)

    def next_conn_id(self) -> int:
        cid = self._next_conn_id
        self._next_conn_id += 1
        return cid

    def record_connection(self, record: ConnectionRecord) -> None:
        self.connections.append(record)
        self._write(record.to_json())

    def record_propagation(self, record: PropagationRecord) -> None:
        self.propagations.append(record)
        self._write(record.to_json())

    def _write(self, obj: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(obj, separators=(",", ":")) + "\n")

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_event_log(
    path: str | Path,
) -> tuple[list[ConnectionRecord], list[PropagationRecord]]:
    """Load one JSONL event log; the header line is validated and skipped."""
    connections: list[ConnectionRecord] = []
    propagations: list[PropagationRecord] = []
    for obj in _iter_jsonl(path):
        if "schema" in obj:
            continue
        if "txid" in obj:
            propagations.append(PropagationRecord.from_json(obj))
        else:
            connections.append(ConnectionRecord.from_json(obj))
    return connections, propagations


def read_event_logs(
    paths: Iterable[str | Path],
) -> tuple[list[ConnectionRecord], list[PropagationRecord]]:
    """Concatenate several event logs (one per monitor, typically)."""
    connections: list[ConnectionRecord] = []
    propagations: list[PropagationRecord] = []
    for path in paths:
        conns, props = read_event_log(path)
        connections.extend(conns)
        propagations.extend(props)
    return connections, propagations


def _iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: bad JSON line: {err}") from None
