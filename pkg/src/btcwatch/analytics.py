"""
Offline statistics over collected event logs: peer-class breakdowns,
connection-duration CDFs, ephemeral-connection stats, per-IP connection
counts, AS/country concentration, per-transaction propagation fan-out,
peer-type classification, and the unreachable-population estimate.

All computations are pure batch passes over loaded records; nothing here
mutates its inputs, and every emitted table is deterministically ordered
so golden-file comparisons work.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .events import ConnectionRecord, PropagationRecord
from .prober import PeerClass

logger = logging.getLogger(__name__)

EPHEMERAL_THRESHOLD_MS = 500  # strictly below this is "ephemeral"
WINDOW_MS = 6 * 3600 * 1000

MOBILE_AGENT_MARKERS = ("breadwallet", "Bitcoin Wallet")
PROBE_AGENT_MARKERS = ("Snoopy", "bitcoin-seeder")


class PeerType(Enum):
    MOBILE = "mobile"
    PROBE = "probe"
    TOR = "tor"
    OTHER = "other"


class AsnLoadError(ValueError):
    """Malformed snapshot row; message carries the offending line number."""


class AsnDatabase:
    """Offline IPv4-prefix table mapping CIDR blocks to (ASN, country).

    Snapshot format: one ``CIDR<TAB>ASN<TAB>CC`` row per line, '#' comments
    allowed.  Lookups are longest-prefix matches.
    """

    def __init__(self, snapshot_date: str | None = None):
        self.snapshot_date = snapshot_date
        # prefix length -> {network-bits (ip >> (32 - plen)): (asn, country)}
        self._tables: dict[int, dict[int, tuple[int, str]]] = {}
        self._lengths: list[int] = []

    def add(self, cidr: str, asn: int, country: str) -> None:
        network = ipaddress.IPv4Network(cidr)
        plen = network.prefixlen
        table = self._tables.setdefault(plen, {})
        table[int(network.network_address) >> (32 - plen) if plen else 0] = (asn, country)
        self._lengths = sorted(self._tables, reverse=True)

    @classmethod
    def load(cls, path: str | Path, snapshot_date: str | None = None) -> "AsnDatabase":
        db = cls(snapshot_date)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise AsnLoadError(f"{path}:{lineno}: expected CIDR<TAB>ASN<TAB>CC")
                try:
                    db.add(parts[0], int(parts[1]), parts[2])
                except (ValueError, ipaddress.AddressValueError, ipaddress.NetmaskValueError) as err:
                    raise AsnLoadError(f"{path}:{lineno}: {err}") from None
        return db

    def lookup(self, ip: str) -> tuple[int, str] | None:
        """Longest-prefix match; None when no prefix covers the address."""
        ip_int = int(ipaddress.IPv4Address(ip))
        for plen in self._lengths:
            hit = self._tables[plen].get(ip_int >> (32 - plen) if plen else 0)
            if hit is not None:
                return hit
        return None


def lookup_asn(ip: str, db: AsnDatabase) -> tuple[int, str] | None:
    return db.lookup(ip)


@dataclass
class IpSummary:
    conn_count: int = 0
    first_seen_ms: int = 0
    last_seen_ms: int = 0
    version_strings: set = field(default_factory=set)


def dedupe_ips(records: Iterable[ConnectionRecord]) -> dict[str, IpSummary]:
    """One entry per distinct source IP with its connection count, first/last
    sighting, and the set of version strings it presented."""
    out: dict[str, IpSummary] = {}
    for rec in records:
        seen_ms = rec.close_ms if rec.close_ms is not None else rec.open_ms
        summary = out.get(rec.remote_ip)
        if summary is None:
            summary = IpSummary(0, rec.open_ms, seen_ms)
            out[rec.remote_ip] = summary
        summary.conn_count += 1
        summary.first_seen_ms = min(summary.first_seen_ms, rec.open_ms)
        summary.last_seen_ms = max(summary.last_seen_ms, seen_ms)
        if rec.version_string is not None:
            summary.version_strings.add(rec.version_string)
    return out


def _completed(records: Iterable[ConnectionRecord]) -> list[ConnectionRecord]:
    return [r for r in records if r.close_ms is not None]


def duration_cdf(
    records: Iterable[ConnectionRecord],
    class_filter: Callable[[ConnectionRecord], bool] | None = None,
) -> list[tuple[int, float]]:
    """Connection-duration CDF in 1-second bins over completed records.

    Point (x, f): fraction of connections whose duration, floored to whole
    seconds, is at most x; the x=0 bin holds everything under one second.
    Returns [] when there are no completed records.
    """
    completed = _completed(records)
    if class_filter is not None:
        completed = [r for r in completed if class_filter(r)]
    if not completed:
        return []
    floors = sorted(r.duration_ms // 1000 for r in completed)
    total = len(floors)
    table = []
    cumulative = 0
    next_idx = 0
    for sec in range(floors[-1] + 1):
        while next_idx < total and floors[next_idx] == sec:
            cumulative += 1
            next_idx += 1
        table.append((sec, cumulative / total))
    return table


def subsecond_cdf(
    records: Iterable[ConnectionRecord],
    class_filter: Callable[[ConnectionRecord], bool] | None = None,
    bin_ms: int = 100,
) -> list[tuple[float, float]]:
    """Sub-second detail for the short-connection analysis: fraction of
    completed connections strictly under each bin edge (0.1 s steps)."""
    completed = _completed(records)
    if class_filter is not None:
        completed = [r for r in completed if class_filter(r)]
    if not completed:
        return []
    durations = sorted(r.duration_ms for r in completed)
    total = len(durations)
    table = []
    idx = 0
    for edge in range(bin_ms, 1001, bin_ms):
        while idx < total and durations[idx] < edge:
            idx += 1
        table.append((edge / 1000.0, idx / total))
    return table


@dataclass
class EphemeralStats:
    count: int
    fraction: float
    by_class: dict


def ephemeral_stats(
    records: Iterable[ConnectionRecord],
    class_map: Mapping[str, PeerClass] | None = None,
) -> EphemeralStats:
    """Connections strictly shorter than 0.5 s (a 0.5 s duration is not
    ephemeral), with an optional per-class breakdown."""
    completed = _completed(records)
    count = 0
    by_class: dict = {}
    for rec in completed:
        if rec.duration_ms < EPHEMERAL_THRESHOLD_MS:
            count += 1
            if class_map is not None:
                cls = class_map.get(rec.remote_ip)
                by_class[cls] = by_class.get(cls, 0) + 1
    fraction = count / len(completed) if completed else 0.0
    return EphemeralStats(count, fraction, by_class)


def concentration(labels: Iterable, k: int) -> float:
    """Share of items falling in the k most common groups.

    Ties between equally sized groups break by ascending label so the result
    is deterministic.  Returns 0.0 for an empty input.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts: dict = {}
    total = 0
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
        total += 1
    if total == 0:
        return 0.0
    ranked = sorted(counts.items(), key=lambda item: (-item[1], str(item[0])))
    return sum(count for _, count in ranked[:k]) / total


def group_label(record, group_key: str, asn_db: AsnDatabase | None = None):
    """Label a record for concentration grouping: its ip, ASN, or country."""
    ip = record.remote_ip
    if group_key == "ip":
        return ip
    if asn_db is None:
        raise ValueError(f"group_key {group_key!r} requires an ASN database")
    hit = asn_db.lookup(ip)
    if group_key == "asn":
        return hit[0] if hit else "unknown"
    if group_key == "country":
        return hit[1] if hit else "unknown"
    raise ValueError(f"unknown group_key {group_key!r}")


def concentration_by(
    records: Sequence,
    group_key: str,
    k: int,
    asn_db: AsnDatabase | None = None,
) -> float:
    return concentration((group_label(r, group_key, asn_db) for r in records), k)


@dataclass
class TxFanout:
    ip_count: int
    country_count: int
    homogeneous: bool
    classes: set


def propagation_fanout(
    propagations: Iterable[PropagationRecord],
    ip_class_map: Mapping[str, PeerClass] | None = None,
    asn_db: AsnDatabase | None = None,
    exclude_ips: set | None = None,
) -> dict[bytes, TxFanout]:
    """Per-transaction relayer spread: distinct IPs, distinct countries, and
    whether all relayers share one peer class.

    ``exclude_ips`` drops listed relayers (e.g. known public servers) before
    counting; transactions left with no relayers are omitted.
    """
    by_tx: dict[bytes, set] = {}
    for prop in propagations:
        if exclude_ips is not None and prop.remote_ip in exclude_ips:
            continue
        by_tx.setdefault(prop.tx_id, set()).add(prop.remote_ip)
    out: dict[bytes, TxFanout] = {}
    for tx_id, ips in by_tx.items():
        countries = set()
        classes = set()
        for ip in ips:
            if asn_db is not None:
                hit = asn_db.lookup(ip)
                countries.add(hit[1] if hit else "unknown")
            if ip_class_map is not None:
                classes.add(ip_class_map.get(ip))
        out[tx_id] = TxFanout(
            ip_count=len(ips),
            country_count=len(countries),
            homogeneous=len(classes) <= 1,
            classes=classes,
        )
    return out


def classify_peer_type(
    version_strings: Iterable[str],
    ip: str | None = None,
    tor_ips: set | None = None,
) -> PeerType:
    """Peer-type rule: Tor membership wins, then a case-sensitive substring
    match over the observed version strings (mobile before probe)."""
    if tor_ips is not None and ip is not None and ip in tor_ips:
        return PeerType.TOR
    strings = list(version_strings)
    if any(marker in vs for vs in strings for marker in MOBILE_AGENT_MARKERS):
        return PeerType.MOBILE
    if any(marker in vs for vs in strings for marker in PROBE_AGENT_MARKERS):
        return PeerType.PROBE
    return PeerType.OTHER


def estimate_population(
    observed_unreachable_per_window: float,
    monitor_count: int,
    total_public_servers: int,
    avg_parallel_connections: float = 3.5,
) -> int:
    """Scale the per-window unreachable-IP count up to the whole network.

    A client keeps several parallel connections to public servers; our
    monitors are only ``monitor_count`` of ``total_public_servers``, so

        estimate = observed * (servers / monitors) / connections_per_client

    rounded to the nearest thousand.
    """
    inputs = (
        observed_unreachable_per_window,
        monitor_count,
        total_public_servers,
        avg_parallel_connections,
    )
    if any(value <= 0 for value in inputs):
        raise ValueError(f"all inputs must be positive, got {inputs}")
    estimate = (
        observed_unreachable_per_window
        * (total_public_servers / monitor_count)
        / avg_parallel_connections
    )
    return round(estimate / 1000) * 1000


def windowed_unique_ips(
    records: Sequence[ConnectionRecord],
    class_map: Mapping[str, PeerClass] | None = None,
    window_ms: int = WINDOW_MS,
) -> list[tuple[int, dict]]:
    """Distinct IPs per consecutive window, split by peer class.

    Windows are aligned to the first open timestamp in the log; a record
    belongs to the window containing its open time.  Returns a list of
    (window_start_ms, {class_or_None: distinct_ip_count}), including empty
    windows between the first and last.
    """
    if not records:
        return []
    start = min(r.open_ms for r in records)
    window_sets: dict[int, dict] = {}
    last_index = 0
    for rec in records:
        index = (rec.open_ms - start) // window_ms
        last_index = max(last_index, index)
        cls = class_map.get(rec.remote_ip) if class_map is not None else None
        window_sets.setdefault(index, {}).setdefault(cls, set()).add(rec.remote_ip)
    out = []
    for index in range(last_index + 1):
        per_class = window_sets.get(index, {})
        out.append((start + index * window_ms, {cls: len(ips) for cls, ips in per_class.items()}))
    return out


class StatReport:
    """Named tables with a one-file-per-statistic CSV emitter."""

    def __init__(self):
        self.tables: dict[str, tuple[list[str], list[tuple]]] = {}

    def add(self, name: str, header: list[str], rows: Iterable[tuple]) -> None:
        rows = [tuple(row) for row in rows]
        if name.endswith("_cdf") and rows:
            fractions = [row[1] for row in rows]
            if any(b < a for a, b in zip(fractions, fractions[1:])):
                raise ValueError(f"{name}: CDF must be nondecreasing")
            if fractions[0] < 0 or abs(fractions[-1] - 1.0) > 1e-9:
                raise ValueError(f"{name}: CDF must start >= 0 and end at 1.0")
        self.tables[name] = (list(header), rows)

    def write_csv(self, outdir: str | Path) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.tables):
            header, rows = self.tables[name]
            path = outdir / f"{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
            written.append(path)
        return written


def _class_tag(cls: PeerClass | None) -> str:
    return str(cls.value) if cls is not None else "unknown"


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def build_report(
    connections: Sequence[ConnectionRecord],
    propagations: Sequence[PropagationRecord],
    class_map: Mapping[str, PeerClass] | None = None,
    asn_db: AsnDatabase | None = None,
    tor_ips: set | None = None,
    exclude_ips: set | None = None,
    monitor_count: int | None = None,
    total_public_servers: int | None = None,
    avg_parallel_connections: float = 3.5,
    window_ms: int = WINDOW_MS,
) -> StatReport:
    """Compute the full statistic set from loaded logs."""
    class_map = class_map or {}
    report = StatReport()
    ip_map = dedupe_ips(connections)

    # Per-class breakdown of IPs, connections, propagations, unique txids.
    classes: list[PeerClass | None] = [
        PeerClass.TYPE0_UNREACHABLE,
        PeerClass.TYPE1_UNAVAILABLE,
        PeerClass.TYPE2_AVAILABLE,
    ]
    if any(ip not in class_map for ip in ip_map):
        classes.append(None)
    rows = []
    total_ips, total_conns, total_props = len(ip_map), len(connections), len(propagations)
    all_txids = {p.tx_id for p in propagations}
    for cls in classes:
        ips = {ip for ip in ip_map if class_map.get(ip) is cls}
        conns = sum(1 for r in connections if class_map.get(r.remote_ip) is cls)
        props = [p for p in propagations if class_map.get(p.remote_ip) is cls]
        txids = {p.tx_id for p in props}
        rows.append(
            (
                _class_tag(cls),
                len(ips),
                _fmt(len(ips) / total_ips if total_ips else 0.0),
                conns,
                _fmt(conns / total_conns if total_conns else 0.0),
                len(props),
                _fmt(len(props) / total_props if total_props else 0.0),
                len(txids),
            )
        )
    rows.append(
        ("total", total_ips, _fmt(1.0 if total_ips else 0.0), total_conns,
         _fmt(1.0 if total_conns else 0.0), total_props,
         _fmt(1.0 if total_props else 0.0), len(all_txids))
    )
    report.add(
        "class_breakdown",
        ["type", "ips", "ip_share", "conns", "conn_share", "props", "prop_share", "txs"],
        rows,
    )

    # Duration CDFs, overall and per class.
    cdf = duration_cdf(connections)
    if cdf:
        report.add("duration_all_cdf", ["seconds", "fraction"], [(s, _fmt(f)) for s, f in cdf])
    for cls in (PeerClass.TYPE0_UNREACHABLE, PeerClass.TYPE1_UNAVAILABLE, PeerClass.TYPE2_AVAILABLE):
        cdf = duration_cdf(connections, lambda r, c=cls: class_map.get(r.remote_ip) is c)
        if cdf:
            report.add(
                f"duration_type{cls.value}_cdf",
                ["seconds", "fraction"],
                [(s, _fmt(f)) for s, f in cdf],
            )
    sub = subsecond_cdf(connections)
    if sub:
        report.add("subsecond_all_table", ["seconds", "fraction"], [(_fmt(s), _fmt(f)) for s, f in sub])

    # Ephemeral connections.
    eph = ephemeral_stats(connections, class_map)
    eph_rows = [("all", eph.count, _fmt(eph.fraction))]
    for cls in sorted(eph.by_class, key=_class_tag):
        eph_rows.append((_class_tag(cls), eph.by_class[cls], ""))
    report.add("ephemeral", ["scope", "count", "fraction"], eph_rows)

    # Connection counts per IP.
    report.add(
        "connections_per_ip",
        ["ip", "conn_count", "version_strings"],
        [
            (ip, summary.conn_count, len(summary.version_strings))
            for ip, summary in sorted(ip_map.items(), key=lambda kv: (-kv[1].conn_count, kv[0]))
        ],
    )

    # Top-k concentration.
    conc_rows = []
    for group_key in ("ip", "asn", "country"):
        if group_key != "ip" and asn_db is None:
            continue
        for k in (5, 10, 50, 100):
            conc_rows.append((group_key, "conn", k, _fmt(concentration_by(connections, group_key, k, asn_db))))
            conc_rows.append((group_key, "prop", k, _fmt(concentration_by(propagations, group_key, k, asn_db))))
    report.add("concentration", ["group", "records", "k", "share"], conc_rows)

    # Per-transaction fan-out.
    fanout = propagation_fanout(propagations, class_map, asn_db)
    report.add(
        "fanout",
        ["txid", "ips", "countries", "homogeneous"],
        sorted(
            (tx[::-1].hex(), f.ip_count, f.country_count, int(f.homogeneous))
            for tx, f in fanout.items()
        ),
    )
    if exclude_ips is not None:
        filtered = propagation_fanout(propagations, class_map, asn_db, exclude_ips)
        report.add(
            "fanout_filtered",
            ["txid", "ips", "countries", "homogeneous"],
            sorted(
                (tx[::-1].hex(), f.ip_count, f.country_count, int(f.homogeneous))
                for tx, f in filtered.items()
            ),
        )

    # Peer types (mobile / probe / tor / other) against classes.
    type_rows = []
    by_type_class: dict[tuple[str, str], list[int]] = {}
    props_by_ip: dict[str, list[PropagationRecord]] = {}
    for prop in propagations:
        props_by_ip.setdefault(prop.remote_ip, []).append(prop)
    for ip, summary in ip_map.items():
        ptype = classify_peer_type(summary.version_strings, ip, tor_ips)
        key = (ptype.value, _class_tag(class_map.get(ip)))
        cell = by_type_class.setdefault(key, [0, 0, 0, 0])
        cell[0] += 1
        cell[1] += summary.conn_count
        ip_props = props_by_ip.get(ip, [])
        cell[2] += len(ip_props)
        cell[3] += len({p.tx_id for p in ip_props})
    for (ptype, cls), (ips, conns, props, txs) in sorted(by_type_class.items()):
        type_rows.append((ptype, cls, ips, conns, props, txs))
    report.add("peer_types", ["peer_type", "class", "ips", "conns", "props", "txs"], type_rows)

    # Distinct IPs per window and the population estimate.
    windows = windowed_unique_ips(connections, class_map, window_ms)
    report.add(
        "windowed_ips",
        ["window_start_ms", "type0", "type1", "type2", "unknown"],
        [
            (
                start,
                counts.get(PeerClass.TYPE0_UNREACHABLE, 0),
                counts.get(PeerClass.TYPE1_UNAVAILABLE, 0),
                counts.get(PeerClass.TYPE2_AVAILABLE, 0),
                counts.get(None, 0),
            )
            for start, counts in windows
        ],
    )
    if monitor_count and total_public_servers:
        unreachable_counts = [
            counts.get(PeerClass.TYPE0_UNREACHABLE, 0) for _, counts in windows
        ]
        observed = sum(unreachable_counts) / len(unreachable_counts) if unreachable_counts else 0
        if observed > 0:
            estimate = estimate_population(
                observed, monitor_count, total_public_servers, avg_parallel_connections
            )
            report.add(
                "population_estimate",
                ["observed_per_window", "monitors", "servers", "parallel_conns", "estimate"],
                [(_fmt(observed), monitor_count, total_public_servers,
                  _fmt(avg_parallel_connections), estimate)],
            )

    return report
