"""
The measurement node: a blockchain-free peer that accepts inbound
connections, answers handshakes, and logs timestamped connection and
transaction-propagation events.  It can also open several parallel
outbound connections to one target and push transactions to it.

The node never requests or serves blocks and keeps no chain state; it
exists to observe.  One handler task runs per connection; handlers share
only the event sink.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .events import ConnectionRecord, EventSink, PropagationRecord, now_ms

logger = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
KNOWN_INVENTORY_LIMIT = 50_000
READ_CHUNK = 65_536


class ProtocolError(Exception):
    """Peer violated the protocol; the connection is closed and recorded."""


class HandshakeTimeout(ProtocolError):
    """No (or incomplete) handshake within the configured timeout."""


@dataclass
class NodeConfig:
    listen_port: int = 8333
    listen_host: str = "0.0.0.0"
    max_inbound: int = 117
    # Deliberately distinctive so operators of probed/measured peers can
    # identify and contact us; never impersonate a major client.
    user_agent: str = "/btcwatch:0.1.0/"
    network: str = "mainnet"
    relay_transactions: bool = False
    log_path: str | Path | None = None
    handshake_timeout: float = HANDSHAKE_TIMEOUT
    protocol_version: int = wire.PROTOCOL_VERSION
    services: int = 0
    start_height: int = 0

    def __post_init__(self):
        if self.max_inbound < 1:
            raise ValueError("max_inbound must be >= 1")


class BoundedSet:
    """Insertion-ordered set with FIFO eviction; bounds per-connection memory
    on long runs."""

    def __init__(self, maxlen: int = KNOWN_INVENTORY_LIMIT):
        self._maxlen = maxlen
        self._items: OrderedDict = OrderedDict()

    def add(self, item) -> None:
        if item in self._items:
            return
        self._items[item] = None
        if len(self._items) > self._maxlen:
            self._items.popitem(last=False)

    def __contains__(self, item) -> bool:
        return item in self._items

    def __len__(self) -> int:
        return len(self._items)


class PeerConnection:
    """One TCP session speaking the wire protocol, plus its log record."""

    def __init__(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        config: NodeConfig,
        sink: EventSink,
        direction: str,
        node: "MeasurementNode | None" = None,
    ):
        self.reader = reader
        self.writer = writer
        self.config = config
        self.sink = sink
        self.node = node
        peer = writer.get_extra_info("peername") or ("?", 0)
        self.record = ConnectionRecord(
            conn_id=sink.next_conn_id(),
            remote_ip=peer[0],
            remote_port=peer[1],
            direction=direction,
            open_ms=now_ms(),
        )
        self._buffer = bytearray()
        self._closed = False
        self._recorded = False
        self.sent_version = False
        self.got_version = False
        self.got_verack = False
        self.known_inventory = BoundedSet()
        self._offered: dict[bytes, bytes] = {}
        self._seen = node.seen_txids if node is not None else BoundedSet()

    # -- framing ---------------------------------------------------------

    async def read_message(self) -> wire.WireMessage | None:
        """Read one frame, buffering partial input; None on clean EOF."""
        while True:
            try:
                msg, consumed = wire.decode_message(bytes(self._buffer), self.config.network)
            except wire.IncompleteFrame:
                chunk = await self.reader.read(READ_CHUNK)
                if not chunk:
                    if self._buffer:
                        logger.debug(
                            "conn %d: %d trailing bytes at EOF",
                            self.record.conn_id,
                            len(self._buffer),
                        )
                    return None
                self._buffer.extend(chunk)
                continue
            del self._buffer[:consumed]
            return msg

    async def send_message(self, command: str, payload: object = None) -> None:
        self.writer.write(wire.encode_message(wire.WireMessage(command, payload, self.config.network)))
        await self.writer.drain()

    async def send_version(self) -> None:
        payload = wire.VersionPayload(
            protocol_version=self.config.protocol_version,
            services=self.config.services,
            timestamp=int(time.time()),
            addr_recv=wire.NetAddress(ip=self.record.remote_ip, port=self.record.remote_port),
            addr_from=wire.NetAddress(),
            nonce=id(self) & 0xFFFFFFFFFFFFFFFF,
            user_agent=self.config.user_agent,
            start_height=self.config.start_height,
            relay=self.config.relay_transactions,
        )
        await self.send_message("version", payload)
        self.sent_version = True

    # -- message handling --------------------------------------------------

    async def dispatch(self, msg: wire.WireMessage) -> None:
        handler = getattr(self, f"_on_{msg.command}", None)
        if handler is None:
            # Unknown commands are logged, never rejected: a measurement
            # tool must record what it does not understand.
            size = len(msg.payload) if isinstance(msg.payload, (bytes, bytearray)) else 0
            logger.debug("conn %d: unhandled command %r (%d bytes)", self.record.conn_id, msg.command, size)
            return
        await handler(msg)

    async def _on_version(self, msg: wire.WireMessage) -> None:
        self.got_version = True
        self.record.version_string = msg.payload.user_agent
        self.record.handshake_completed = True
        if not self.sent_version:
            await self.send_version()
        await self.send_message("verack")

    async def _on_verack(self, msg: wire.WireMessage) -> None:
        self.got_verack = True

    async def _on_ping(self, msg: wire.WireMessage) -> None:
        await self.send_message("pong", msg.payload)

    async def _on_pong(self, msg: wire.WireMessage) -> None:
        pass

    async def _on_inv(self, msg: wire.WireMessage) -> None:
        ms = now_ms()
        wanted = []
        for vec in msg.payload:
            if vec.object_type != "tx":
                continue  # never fetch blocks
            self.sink.record_propagation(
                PropagationRecord(vec.hash, self.record.conn_id, self.record.remote_ip, ms, "inv")
            )
            self.known_inventory.add(vec.hash)
            if vec.hash not in self._seen:
                self._seen.add(vec.hash)
                wanted.append(vec)
        if wanted:
            await self.send_message("getdata", wanted)

    async def _on_tx(self, msg: wire.WireMessage) -> None:
        tx_hash = wire.txid(msg.payload)
        self.sink.record_propagation(
            PropagationRecord(tx_hash, self.record.conn_id, self.record.remote_ip, now_ms(), "full_tx")
        )
        self.known_inventory.add(tx_hash)
        self._seen.add(tx_hash)

    async def _on_getdata(self, msg: wire.WireMessage) -> None:
        for vec in msg.payload:
            raw = self._offered.get(vec.hash)
            if raw is not None:
                await self.send_message("tx", raw)

    async def _on_getaddr(self, msg: wire.WireMessage) -> None:
        # Answer with endpoints we dialed ourselves (public servers), never
        # with addresses learned from inbound clients.
        entries = []
        if self.node is not None:
            ts = int(time.time())
            entries = [
                wire.AddrEntry(time=ts, services=wire.NODE_NETWORK, ip=ip, port=port)
                for ip, port in self.node.address_book
            ]
        await self.send_message("addr", entries[:1000])

    async def _on_addr(self, msg: wire.WireMessage) -> None:
        logger.debug("conn %d: addr gossip with %d entries", self.record.conn_id, len(msg.payload))

    async def _on_reject(self, msg: wire.WireMessage) -> None:
        logger.info(
            "conn %d: reject %s/%#x: %s",
            self.record.conn_id,
            msg.payload.message,
            msg.payload.code,
            msg.payload.reason,
        )

    # -- lifecycle ---------------------------------------------------------

    async def pump(self, handshake_deadline: float | None = None) -> None:
        """Process messages until EOF; optionally bound the wait for the
        peer's VERSION by ``handshake_deadline`` (event-loop time)."""
        loop = asyncio.get_running_loop()
        while True:
            if handshake_deadline is not None and not self.got_version:
                remaining = handshake_deadline - loop.time()
                if remaining <= 0:
                    raise HandshakeTimeout(f"no VERSION within {self.config.handshake_timeout}s")
                try:
                    msg = await asyncio.wait_for(self.read_message(), remaining)
                except asyncio.TimeoutError:
                    raise HandshakeTimeout(f"no VERSION within {self.config.handshake_timeout}s") from None
            else:
                msg = await self.read_message()
            if msg is None:
                return
            await self.dispatch(msg)

    async def close(self) -> None:
        """Close the transport and emit the connection record exactly once."""
        if not self._closed:
            self._closed = True
            if self.record.close_ms is None:
                self.record.close_ms = now_ms()
            self.writer.close()
            try:
                await self.writer.wait_closed()
            except (ConnectionError, OSError):
                pass
        if not self._recorded:
            self._recorded = True
            self.sink.record_connection(self.record)

    def flush_open(self) -> None:
        """Record a still-open connection at shutdown, close time absent."""
        if not self._recorded:
            self._recorded = True
            self.sink.record_connection(self.record)


async def handshake(conn: PeerConnection, config: NodeConfig, timeout: float | None = None) -> str:
    """Run the active handshake: send VERSION, process the remote VERSION and
    VERACK (in either order), acknowledge with our VERACK.

    Returns the remote user agent, possibly empty.  Raises HandshakeTimeout
    on silence and ProtocolError if the peer hangs up first.
    """
    if timeout is None:
        timeout = config.handshake_timeout
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    if not conn.sent_version:
        await conn.send_version()
    while not (conn.got_version and conn.got_verack):
        remaining = deadline - loop.time()
        if remaining <= 0:
            raise HandshakeTimeout(f"handshake incomplete after {timeout}s")
        try:
            msg = await asyncio.wait_for(conn.read_message(), remaining)
        except asyncio.TimeoutError:
            raise HandshakeTimeout(f"handshake incomplete after {timeout}s") from None
        if msg is None:
            raise ProtocolError("peer closed during handshake")
        await conn.dispatch(msg)
    return conn.record.version_string or ""


async def connect_peer(
    host: str,
    port: int,
    config: NodeConfig,
    sink: EventSink,
    node: "MeasurementNode | None" = None,
) -> PeerConnection:
    """Open one outbound TCP connection (no handshake yet)."""
    reader, writer = await asyncio.open_connection(host, port)
    return PeerConnection(reader, writer, config, sink, "outbound", node)


async def open_connection(
    host: str,
    port: int,
    config: NodeConfig,
    sink: EventSink,
    node: "MeasurementNode | None" = None,
) -> PeerConnection:
    """TCP connect plus full handshake; starts the background message pump."""
    conn = await connect_peer(host, port, config, sink, node)
    try:
        await handshake(conn, config)
    except BaseException:
        await conn.close()
        raise
    conn._pump_task = asyncio.ensure_future(_run_pump(conn))
    if node is not None:
        node.address_book.add((host, port))
    return conn


async def _run_pump(conn: PeerConnection) -> None:
    try:
        await conn.pump()
    except (wire.WireError, ProtocolError, ConnectionError, OSError) as err:
        logger.debug("conn %d: pump ended: %s", conn.record.conn_id, err)
    finally:
        await conn.close()


async def open_parallel_connections(
    host: str,
    port: int,
    n: int,
    config: NodeConfig,
    sink: EventSink,
    node: "MeasurementNode | None" = None,
) -> tuple[list[PeerConnection], list[Exception]]:
    """Open ``n`` independent handshaken sessions to one endpoint.

    Partial success is allowed; failures are reported per connection.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    results = await asyncio.gather(
        *(open_connection(host, port, config, sink, node) for _ in range(n)),
        return_exceptions=True,
    )
    handles = [r for r in results if isinstance(r, PeerConnection)]
    failures = [r for r in results if not isinstance(r, PeerConnection)]
    return handles, failures


async def send_transaction(conn: PeerConnection, raw_tx: bytes, push: bool = False) -> int | None:
    """Relay one raw transaction over an established connection.

    Announces via inv and serves the peer's getdata (or pushes the tx
    directly when ``push``).  Returns the millisecond timestamp of the first
    byte sent, or None when the peer already knows this txid and the
    announcement is suppressed.
    """
    if not conn.got_version:
        raise ProtocolError("handshake not completed")
    tx_hash = wire.txid(raw_tx)
    if tx_hash in conn.known_inventory:
        logger.debug("conn %d: inv for %s suppressed", conn.record.conn_id, wire.txid_hex(tx_hash))
        return None
    conn.known_inventory.add(tx_hash)
    sent_ms = now_ms()
    if push:
        await conn.send_message("tx", raw_tx)
    else:
        conn._offered[tx_hash] = raw_tx
        await conn.send_message("inv", [wire.InvVector("tx", tx_hash)])
    return sent_ms


class MeasurementNode:
    """Accepts inbound connections and logs what arrives.

    The node completes handshakes, acknowledges pings, fetches announced
    transactions, and records every connection and propagation event.  It
    never emits getblocks or getheaders and stores no chain data.
    """

    def __init__(self, config: NodeConfig, sink: EventSink):
        self.config = config
        self.sink = sink
        self.seen_txids = BoundedSet()
        self.address_book: "OrderedDict[tuple[str, int], None] | set" = set()
        self._server: asyncio.AbstractServer | None = None
        self._active: set[PeerConnection] = set()
        self._tasks: set[asyncio.Task] = set()

    @property
    def port(self) -> int:
        assert self._server is not None and self._server.sockets
        return self._server.sockets[0].getsockname()[1]

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_inbound, self.config.listen_host, self.config.listen_port
        )
        logger.info("listening on %s:%d", self.config.listen_host, self.port)

    async def _handle_inbound(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        if len(self._active) >= self.config.max_inbound:
            logger.warning("inbound cap %d reached, refusing connection", self.config.max_inbound)
            writer.close()
            return
        conn = PeerConnection(reader, writer, self.config, self.sink, "inbound", self)
        self._active.add(conn)
        task = asyncio.current_task()
        if task is not None:
            self._tasks.add(task)
        deadline = asyncio.get_running_loop().time() + self.config.handshake_timeout
        try:
            await conn.pump(handshake_deadline=deadline)
        except (wire.WireError, ProtocolError, ConnectionError, OSError) as err:
            logger.debug("conn %d: closed on error: %s", conn.record.conn_id, err)
        finally:
            await conn.close()
            self._active.discard(conn)
            if task is not None:
                self._tasks.discard(task)

    async def stop(self) -> None:
        """Stop accepting, drop live connections, flush open records."""
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        for conn in list(self._active):
            conn.flush_open()
            conn.writer.close()
        self._active.clear()
        self.sink.flush()


async def run_listener(
    config: NodeConfig,
    sink: EventSink,
    stop_event: asyncio.Event | None = None,
    ready_event: asyncio.Event | None = None,
) -> None:
    """Run the listener until ``stop_event`` is set (or forever)."""
    node = MeasurementNode(config, sink)
    await node.start()
    if ready_event is not None:
        ready_event.set()
    if stop_event is None:
        stop_event = asyncio.Event()
    try:
        await stop_event.wait()
    finally:
        await node.stop()
