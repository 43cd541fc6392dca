"""
Bitcoin P2P wire codec for the message subset a measurement node needs:
handshake, address gossip, and transaction relay.

Reference: https://en.bitcoin.it/wiki/Protocol_documentation

-------------------------------------------------------------------------
[---FRAME---]
[ 4] MAGIC          network selector (mainnet \xF9\xBE\xB4\xD9)
[12] COMMAND        ascii, zero padded
[ 4] LENGTH         <I  len(payload)
[ 4] CHECKSUM       sha256(sha256(payload))[:4]
[..] PAYLOAD

    [---VERSION---]
    [ 4] VERSION    <i
    [ 8] SERVICES   <Q
    [ 8] TIMESTAMP  <q
    [26] ADDR_RECV  services <Q, ip 16B (v4-mapped), port >H
    [26] ADDR_FROM  same layout
    [ 8] NONCE      <Q
    [..] USER_AGENT varstr
    [ 4] HEIGHT     <i
    [ 1] RELAY      <? (absent in very old clients; tolerated on read)

    [---PING/PONG---]
    [ 8] NONCE      <Q (absent pre-BIP31; tolerated on read)

    [---INV/GETDATA---]
    [..] COUNT      varint
    [..] ENTRIES    type <I (1=tx, 2=block), hash 32B

    [---ADDR---]
    [..] COUNT      varint
    [..] ENTRIES    time <I, services <Q, ip 16B, port >H

    [---TX---]
    [..] opaque raw transaction bytes, identified by double-SHA256

    [---REJECT---]
    [..] MESSAGE varstr, CODE <B, REASON varstr, [extra data]
-------------------------------------------------------------------------

Writes are strict (minimal varints, valid checksums); reads are tolerant
(non-minimal varints flagged not refused, unknown commands surfaced as
opaque payloads).  All functions are pure and safe to call from any
number of concurrent connection handlers.
"""

from __future__ import annotations

import hashlib
import ipaddress
import logging
import struct
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 70015  # v0.14.x era default; override via VersionPayload
NODE_NETWORK = 1

HEADER_LEN = 24
COMMAND_LEN = 12
MAX_PAYLOAD_LEN = 4 * 1024 * 1024

NETWORK_MAGIC = {
    "mainnet": b"\xf9\xbe\xb4\xd9",
    "testnet": b"\x0b\x11\x09\x07",
}

INV_TX = 1
INV_BLOCK = 2
_INV_NAMES = {INV_TX: "tx", INV_BLOCK: "block"}
_INV_CODES = {"tx": INV_TX, "block": INV_BLOCK}

_V4_MAPPED_PREFIX = b"\x00" * 10 + b"\xff\xff"


class WireError(Exception):
    """Base class for codec failures."""


class IncompleteFrame(WireError):
    """Not enough bytes buffered yet; caller should read more and retry."""

    def __init__(self, needed: int):
        super().__init__(f"need at least {needed} bytes")
        self.needed = needed


class DesyncError(WireError):
    """Magic bytes did not match the expected network; drop the connection."""


class IntegrityError(WireError):
    """Checksum mismatch between header and payload."""


class OversizeError(WireError):
    """Declared or supplied payload exceeds the configured maximum."""


def sha256d(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def checksum(payload: bytes) -> bytes:
    """First 4 bytes of double-SHA256; the empty payload gives 5df6e0e2."""
    return sha256d(payload)[:4]


def txid(raw_tx: bytes) -> bytes:
    """Canonical transaction id (wire byte order) of an opaque raw tx."""
    return sha256d(raw_tx)


def txid_hex(tx_hash: bytes) -> str:
    """Display form of a tx hash: byte-reversed hex, as block explorers print it."""
    return tx_hash[::-1].hex()


def encode_varint(n: int) -> bytes:
    """Minimal CompactSize encoding of an unsigned 64-bit integer."""
    if n < 0 or n > 0xFFFFFFFFFFFFFFFF:
        raise ValueError(f"varint out of range: {n}")
    if n < 0xFD:
        return struct.pack("<B", n)
    if n <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", n)
    if n <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", n)
    return b"\xff" + struct.pack("<Q", n)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a CompactSize at ``offset``; returns (value, bytes consumed).

    Non-minimal encodings are accepted but flagged at debug level
    (tolerant read, strict write).
    """
    if offset >= len(data):
        raise IncompleteFrame(offset + 1)
    first = data[offset]
    if first < 0xFD:
        return first, 1
    width, fmt, floor = {
        0xFD: (2, "<H", 0xFD),
        0xFE: (4, "<I", 0x10000),
        0xFF: (8, "<Q", 0x100000000),
    }[first]
    end = offset + 1 + width
    if end > len(data):
        raise IncompleteFrame(end)
    value = struct.unpack_from(fmt, data, offset + 1)[0]
    if value < floor:
        logger.debug("non-minimal varint: %d encoded with %d bytes", value, 1 + width)
    return value, 1 + width


def _encode_varstr(s: str | bytes) -> bytes:
    raw = s.encode() if isinstance(s, str) else s
    return encode_varint(len(raw)) + raw


def _decode_varstr(data: bytes, offset: int) -> tuple[bytes, int]:
    length, consumed = decode_varint(data, offset)
    end = offset + consumed + length
    if end > len(data):
        raise IncompleteFrame(end)
    return data[offset + consumed : end], consumed + length


def _encode_ip(ip: str) -> bytes:
    addr = ipaddress.ip_address(ip)
    if addr.version == 4:
        return _V4_MAPPED_PREFIX + addr.packed
    return addr.packed


def _decode_ip(raw: bytes) -> str:
    if raw[:12] == _V4_MAPPED_PREFIX:
        return str(ipaddress.IPv4Address(raw[12:]))
    return str(ipaddress.IPv6Address(raw))


@dataclass
class NetAddress:
    """The 26-byte address stub used inside version payloads."""

    services: int = 0
    ip: str = "0.0.0.0"
    port: int = 0

    def encode(self) -> bytes:
        return struct.pack("<Q", self.services) + _encode_ip(self.ip) + struct.pack(">H", self.port)

    @classmethod
    def decode(cls, data: bytes, offset: int) -> tuple["NetAddress", int]:
        if offset + 26 > len(data):
            raise IncompleteFrame(offset + 26)
        services = struct.unpack_from("<Q", data, offset)[0]
        ip = _decode_ip(data[offset + 8 : offset + 24])
        port = struct.unpack_from(">H", data, offset + 24)[0]
        return cls(services, ip, port), 26


@dataclass
class AddrEntry:
    """One entry of an addr payload (the stub plus a last-seen timestamp)."""

    time: int = 0
    services: int = 0
    ip: str = "0.0.0.0"
    port: int = 0

    def encode(self) -> bytes:
        return (
            struct.pack("<I", self.time)
            + struct.pack("<Q", self.services)
            + _encode_ip(self.ip)
            + struct.pack(">H", self.port)
        )

    @classmethod
    def decode(cls, data: bytes, offset: int) -> tuple["AddrEntry", int]:
        if offset + 30 > len(data):
            raise IncompleteFrame(offset + 30)
        time_, services = struct.unpack_from("<IQ", data, offset)
        ip = _decode_ip(data[offset + 12 : offset + 28])
        port = struct.unpack_from(">H", data, offset + 28)[0]
        return cls(time_, services, ip, port), 30


@dataclass
class VersionPayload:
    """Handshake announcement; user_agent is the peer's self-reported version
    string and may legitimately be empty."""

    protocol_version: int = PROTOCOL_VERSION
    services: int = 0
    timestamp: int = 0
    addr_recv: NetAddress = field(default_factory=NetAddress)
    addr_from: NetAddress = field(default_factory=NetAddress)
    nonce: int = 0
    user_agent: str = ""
    start_height: int = 0
    relay: bool = True

    def encode(self) -> bytes:
        return b"".join(
            (
                struct.pack("<iQq", self.protocol_version, self.services, self.timestamp),
                self.addr_recv.encode(),
                self.addr_from.encode(),
                struct.pack("<Q", self.nonce),
                _encode_varstr(self.user_agent),
                struct.pack("<i", self.start_height),
                struct.pack("<?", self.relay),
            )
        )

    @classmethod
    def decode(cls, data: bytes) -> "VersionPayload":
        if len(data) < 20:
            raise IncompleteFrame(20)
        version, services, timestamp = struct.unpack_from("<iQq", data, 0)
        offset = 20
        addr_recv, used = NetAddress.decode(data, offset)
        offset += used
        addr_from, used = NetAddress.decode(data, offset)
        offset += used
        if offset + 8 > len(data):
            raise IncompleteFrame(offset + 8)
        nonce = struct.unpack_from("<Q", data, offset)[0]
        offset += 8
        agent, used = _decode_varstr(data, offset)
        offset += used
        if offset + 4 > len(data):
            raise IncompleteFrame(offset + 4)
        height = struct.unpack_from("<i", data, offset)[0]
        offset += 4
        # Relay flag is absent in pre-70001 version payloads; default on.
        relay = bool(data[offset]) if offset < len(data) else True
        return cls(
            protocol_version=version,
            services=services,
            timestamp=timestamp,
            addr_recv=addr_recv,
            addr_from=addr_from,
            nonce=nonce,
            user_agent=agent.decode("utf-8", "replace"),
            start_height=height,
            relay=relay,
        )


@dataclass
class InvVector:
    """Inventory announcement entry; tx hashes are canonical ids in wire order."""

    object_type: str | int  # "tx" | "block" | raw code for unknown types
    hash: bytes

    def __post_init__(self):
        if len(self.hash) != 32:
            raise ValueError(f"inv hash must be 32 bytes, got {len(self.hash)}")

    @property
    def type_code(self) -> int:
        if isinstance(self.object_type, int):
            return self.object_type
        return _INV_CODES[self.object_type]

    def encode(self) -> bytes:
        return struct.pack("<I", self.type_code) + self.hash

    @classmethod
    def decode(cls, data: bytes, offset: int) -> tuple["InvVector", int]:
        if offset + 36 > len(data):
            raise IncompleteFrame(offset + 36)
        code = struct.unpack_from("<I", data, offset)[0]
        return cls(_INV_NAMES.get(code, code), data[offset + 4 : offset + 36]), 36


@dataclass
class RejectPayload:
    message: str = ""
    code: int = 0
    reason: str = ""
    data: bytes = b""

    def encode(self) -> bytes:
        return _encode_varstr(self.message) + struct.pack("<B", self.code) + _encode_varstr(self.reason) + self.data

    @classmethod
    def decode(cls, data: bytes) -> "RejectPayload":
        message, used = _decode_varstr(data, 0)
        offset = used
        if offset >= len(data):
            raise IncompleteFrame(offset + 1)
        code = data[offset]
        offset += 1
        reason, used = _decode_varstr(data, offset)
        offset += used
        return cls(message.decode("utf-8", "replace"), code, reason.decode("utf-8", "replace"), data[offset:])


@dataclass
class WireMessage:
    """One decoded protocol message: command plus command-typed payload.

    Payload types by command:
      version          VersionPayload
      verack, getaddr  None
      ping, pong       int nonce (None for empty legacy pings)
      inv, getdata     list[InvVector]
      tx               bytes (opaque raw transaction)
      addr             list[AddrEntry]
      reject           RejectPayload
      anything else    bytes (opaque, surfaced not rejected)
    """

    command: str
    payload: object = None
    network: str = "mainnet"


def _encode_payload(msg: WireMessage) -> bytes:
    cmd, payload = msg.command, msg.payload
    if cmd == "version":
        return payload.encode()
    if cmd in ("verack", "getaddr"):
        return b""
    if cmd in ("ping", "pong"):
        return b"" if payload is None else struct.pack("<Q", payload)
    if cmd in ("inv", "getdata"):
        return encode_varint(len(payload)) + b"".join(v.encode() for v in payload)
    if cmd == "tx":
        return bytes(payload)
    if cmd == "addr":
        return encode_varint(len(payload)) + b"".join(e.encode() for e in payload)
    if cmd == "reject":
        return payload.encode()
    if isinstance(payload, (bytes, bytearray)):
        return bytes(payload)
    if payload is None:
        return b""
    raise WireError(f"cannot encode payload of type {type(payload).__name__} for {cmd!r}")


def _decode_payload(command: str, data: bytes) -> object:
    if command == "version":
        return VersionPayload.decode(data)
    if command in ("verack", "getaddr"):
        return None
    if command in ("ping", "pong"):
        return struct.unpack("<Q", data)[0] if len(data) >= 8 else None
    if command in ("inv", "getdata"):
        count, offset = decode_varint(data, 0)
        vectors = []
        for _ in range(count):
            vec, used = InvVector.decode(data, offset)
            vectors.append(vec)
            offset += used
        return vectors
    if command == "tx":
        return data
    if command == "addr":
        count, offset = decode_varint(data, 0)
        entries = []
        for _ in range(count):
            entry, used = AddrEntry.decode(data, offset)
            entries.append(entry)
            offset += used
        return entries
    if command == "reject":
        return RejectPayload.decode(data)
    return data  # unknown command: keep the bytes, let the caller log it


def encode_message(msg: WireMessage, max_payload: int = MAX_PAYLOAD_LEN) -> bytes:
    """Serialize one frame; the output round-trips through decode_message."""
    command = msg.command
    if len(command) > COMMAND_LEN or not command.isascii():
        raise WireError(f"bad command {command!r}")
    try:
        magic = NETWORK_MAGIC[msg.network]
    except KeyError:
        raise WireError(f"unknown network {msg.network!r}") from None
    payload = _encode_payload(msg)
    if len(payload) > max_payload:
        raise OversizeError(f"payload {len(payload)} exceeds maximum {max_payload}")
    return b"".join(
        (
            magic,
            command.encode().ljust(COMMAND_LEN, b"\x00"),
            struct.pack("<I", len(payload)),
            checksum(payload),
            payload,
        )
    )


def decode_message(
    data: bytes,
    network: str = "mainnet",
    max_payload: int = MAX_PAYLOAD_LEN,
) -> tuple[WireMessage, int]:
    """Parse exactly one frame from the head of ``data``.

    Returns (message, bytes consumed); extra trailing bytes are left for the
    next call, so a concatenation of frames decodes one message at a time.

    Raises IncompleteFrame when more bytes are needed, DesyncError on a
    magic mismatch and IntegrityError on a checksum mismatch.
    """
    if len(data) < HEADER_LEN:
        raise IncompleteFrame(HEADER_LEN)
    magic = NETWORK_MAGIC.get(network)
    if magic is None:
        raise WireError(f"unknown network {network!r}")
    if data[:4] != magic:
        raise DesyncError(f"bad magic {data[:4].hex()} for {network}")
    command = data[4:16].rstrip(b"\x00").decode("ascii", "replace")
    length = struct.unpack_from("<I", data, 16)[0]
    if length > max_payload:
        raise OversizeError(f"declared payload {length} exceeds maximum {max_payload}")
    frame_len = HEADER_LEN + length
    if len(data) < frame_len:
        raise IncompleteFrame(frame_len)
    payload = bytes(data[HEADER_LEN:frame_len])
    if checksum(payload) != data[20:24]:
        raise IntegrityError(f"checksum mismatch on {command!r}")
    return WireMessage(command, _decode_payload(command, payload), network), frame_len
