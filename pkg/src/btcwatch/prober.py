"""
Reverse probing of source IPs seen by the measurement node.

A probe is one TCP connect to port 8333 followed by a handshake attempt;
the connection is closed immediately after the outcome is known.  Probe
histories classify an IP as:

  type 0, unreachable:  never accepted a TCP connection
  type 1, unavailable:  accepted TCP at least once, never completed the
                        handshake
  type 2, available:    completed the handshake at least once

Two self-imposed rules bound the burden on probed peers: the same IP is
probed at most once per six hours, and sockets are closed as soon as the
result is known.  Peers on non-default ports are not probed and therefore
end up classified unreachable; that bias is deliberate and documented.
"""

from __future__ import annotations

import json
import logging
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator

from . import wire
from .events import now_ms

logger = logging.getLogger(__name__)

DEFAULT_PORT = 8333
TCP_TIMEOUT = 5.0
HANDSHAKE_TIMEOUT = 10.0
MIN_PROBE_INTERVAL_MS = 6 * 3600 * 1000
DEFAULT_PARALLELISM = 64


class PeerClass(Enum):
    TYPE0_UNREACHABLE = 0
    TYPE1_UNAVAILABLE = 1
    TYPE2_AVAILABLE = 2


@dataclass
class ProbeResult:
    """Outcome of one reverse probe; handshake success implies TCP success."""

    ip: str
    probe_ms: int
    tcp_connected: bool
    handshake_completed: bool
    version_string: str | None = None

    def __post_init__(self):
        if self.handshake_completed and not self.tcp_connected:
            raise ValueError("handshake without TCP connection")

    def to_json(self) -> dict:
        obj = {
            "ip": self.ip,
            "ms": self.probe_ms,
            "tcp": self.tcp_connected,
            "hs": self.handshake_completed,
        }
        if self.version_string is not None:
            obj["ua"] = self.version_string
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeResult":
        return cls(obj["ip"], obj["ms"], obj["tcp"], obj["hs"], obj.get("ua"))


def probe_ip(
    ip: str,
    port: int = DEFAULT_PORT,
    tcp_timeout: float = TCP_TIMEOUT,
    handshake_timeout: float = HANDSHAKE_TIMEOUT,
    network: str = "mainnet",
    user_agent: str = "/btcwatch:0.1.0/",
) -> ProbeResult:
    """Probe one IP; all failures are encoded in the result, never raised."""
    probe_ms = now_ms()
    try:
        sock = socket.create_connection((ip, port), timeout=tcp_timeout)
    except OSError:
        return ProbeResult(ip, probe_ms, tcp_connected=False, handshake_completed=False)
    try:
        ok, agent = _blocking_handshake(sock, handshake_timeout, network, user_agent)
    finally:
        # Close immediately once the outcome is known.
        try:
            sock.close()
        except OSError:
            pass
    return ProbeResult(ip, probe_ms, tcp_connected=True, handshake_completed=ok, version_string=agent)


def _blocking_handshake(
    sock: socket.socket,
    timeout: float,
    network: str,
    user_agent: str,
) -> tuple[bool, str | None]:
    """Send VERSION, wait for the remote VERSION and VERACK (either order)."""
    deadline = time.monotonic() + timeout
    payload = wire.VersionPayload(
        timestamp=int(time.time()),
        nonce=now_ms() & 0xFFFFFFFFFFFFFFFF,
        user_agent=user_agent,
        relay=False,
    )
    agent: str | None = None
    got_version = got_verack = False
    buffer = bytearray()
    try:
        sock.sendall(wire.encode_message(wire.WireMessage("version", payload, network)))
        while not (got_version and got_verack):
            try:
                msg, consumed = wire.decode_message(bytes(buffer), network)
            except wire.IncompleteFrame:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False, agent
                sock.settimeout(remaining)
                chunk = sock.recv(4096)
                if not chunk:
                    return False, agent
                buffer.extend(chunk)
                continue
            del buffer[:consumed]
            if msg.command == "version":
                got_version = True
                agent = msg.payload.user_agent
                sock.sendall(wire.encode_message(wire.WireMessage("verack", None, network)))
            elif msg.command == "verack":
                got_verack = True
    except (OSError, wire.WireError):
        return False, agent
    return True, agent


def probe_sweep(
    ips: Iterable[str],
    port: int = DEFAULT_PORT,
    parallelism: int = DEFAULT_PARALLELISM,
    **probe_kwargs,
) -> list[ProbeResult]:
    """Probe many IPs with bounded parallelism; order follows the input."""
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda ip: probe_ip(ip, port, **probe_kwargs), ips))


class ProbeScheduler:
    """Enforces the one-probe-per-IP-per-interval rule.

    The last-probe table can be persisted so a restart does not violate the
    interval.  The limiter is a single shared service even when probes run
    from many monitors.
    """

    def __init__(
        self,
        min_interval_ms: int = MIN_PROBE_INTERVAL_MS,
        state_path: str | Path | None = None,
    ):
        self.min_interval_ms = min_interval_ms
        self.state_path = Path(state_path) if state_path is not None else None
        self._last: dict[str, int] = {}
        if self.state_path is not None and self.state_path.exists():
            self._last = {k: int(v) for k, v in json.loads(self.state_path.read_text()).items()}

    def offer(self, ip: str, at_ms: int) -> bool:
        """True when a probe of ``ip`` at ``at_ms`` respects the interval."""
        last = self._last.get(ip)
        if last is not None and at_ms - last < self.min_interval_ms:
            return False
        self._last[ip] = at_ms
        return True

    def save(self) -> None:
        if self.state_path is not None:
            self.state_path.write_text(json.dumps(self._last))


def schedule_probes(
    arrivals: Iterable[tuple[int, str]],
    min_interval_ms: int = MIN_PROBE_INTERVAL_MS,
    scheduler: ProbeScheduler | None = None,
) -> Iterator[tuple[int, str]]:
    """Turn a stream of (ms, ip) sightings into probe tasks.

    New IPs are probed promptly; repeat sightings of an IP are dropped until
    the interval since its last probe has elapsed.
    """
    if scheduler is None:
        scheduler = ProbeScheduler(min_interval_ms)
    for at_ms, ip in arrivals:
        if scheduler.offer(ip, at_ms):
            yield at_ms, ip


def classify_ip(history: Iterable[ProbeResult]) -> PeerClass:
    """Best outcome over the whole history; order-insensitive and monotone
    (more probes can only move the class upward)."""
    best = None
    for result in history:
        best = PeerClass.TYPE0_UNREACHABLE if best is None else best
        if result.handshake_completed:
            return PeerClass.TYPE2_AVAILABLE
        if result.tcp_connected:
            best = PeerClass.TYPE1_UNAVAILABLE
    if best is None:
        raise ValueError("empty probe history")
    return best


def classify_all(results: Iterable[ProbeResult]) -> dict[str, PeerClass]:
    """Group probe results by IP and classify each."""
    by_ip: dict[str, list[ProbeResult]] = {}
    for result in results:
        by_ip.setdefault(result.ip, []).append(result)
    return {ip: classify_ip(history) for ip, history in by_ip.items()}


def write_probe_log(results: Iterable[ProbeResult], fh: IO[str]) -> None:
    for result in results:
        fh.write(json.dumps(result.to_json(), separators=(",", ":")) + "\n")


def read_probe_log(path: str | Path) -> list[ProbeResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                results.append(ProbeResult.from_json(json.loads(line)))
    return results
