"""
The btcwatch command line: listen, probe, analyze, simulate, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every command that
produces an output directory drops exactly one manifest.json there with
the config snapshot and SHA-256 digests of its inputs.  Config files are
flat ``key = value`` text; logs are append-only and analyze never mutates
its inputs.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import dataclasses
import hashlib
import json
import logging
import os
import signal
import sys
from pathlib import Path

from . import __version__, analytics, gossipsim, netnode, prober
from .events import EventSink, now_ms, read_event_log, read_event_logs

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\nerror: {message}\n")
        raise SystemExit(1)


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    outdir: Path,
    command: str,
    config: dict,
    inputs: list[Path],
    started_ms: int,
) -> Path:
    """One manifest per output directory: command, config snapshot, wall
    time, input digests, tool version."""
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "started_ms": started_ms,
        "finished_ms": now_ms(),
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs},
        "tool_version": __version__,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_interval_ms(text: str) -> int:
    units = {"s": 1000, "m": 60_000, "h": 3_600_000, "d": 86_400_000}
    if text and text[-1] in units:
        return int(float(text[:-1]) * units[text[-1]])
    return int(float(text) * 1000)


def _load_keyvalue_config(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _sim_config_from_file(path: Path | None, overrides: dict | None = None) -> gossipsim.SimConfig:
    raw = _load_keyvalue_config(path) if path is not None else {}
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    fields = {f.name: f for f in dataclasses.fields(gossipsim.SimConfig)}
    kwargs: dict = {}
    matrix_path = raw.pop("region_matrix", None)
    for key, value in raw.items():
        if key not in fields:
            raise ValueError(f"unknown simulator config key {key!r}")
        ftype = fields[key].type
        if key == "regions":
            kwargs[key] = tuple(part.strip() for part in value.split(","))
        elif "bool" in ftype:
            kwargs[key] = value.lower() in ("1", "true", "yes", "on")
        elif "int" in ftype:
            kwargs[key] = int(value)
        elif "float" in ftype:
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    if matrix_path is not None:
        kwargs["latency_ms"] = gossipsim.load_latency_matrix(matrix_path)
    return gossipsim.SimConfig(**kwargs)


# -- subcommands -----------------------------------------------------------


def cmd_listen(args) -> int:
    config = netnode.NodeConfig(
        listen_port=args.port,
        listen_host=args.host,
        max_inbound=args.max_inbound,
        user_agent=args.user_agent,
        network=args.network,
        log_path=args.log,
    )
    started_ms = now_ms()
    sink = EventSink(args.log)

    async def _serve() -> None:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except NotImplementedError:
                pass
        await netnode.run_listener(config, sink, stop_event=stop)

    try:
        asyncio.run(_serve())
    finally:
        sink.close()
        write_manifest(
            Path(args.log).parent,
            "listen",
            {k: str(v) for k, v in dataclasses.asdict(config).items()},
            [],
            started_ms,
        )
    return 0


def _ip_stream_from_input(path: Path) -> list[tuple[int, str]]:
    """Accept either an event log (JSONL) or a plain list of IPs."""
    first = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            first = line.strip()
            if first:
                break
    if first.startswith("{"):
        connections, _ = read_event_log(path)
        return sorted((rec.open_ms, rec.remote_ip) for rec in connections)
    at = now_ms()
    with open(path, encoding="utf-8") as fh:
        return [(at, line.strip()) for line in fh if line.strip()]


def cmd_probe(args) -> int:
    started_ms = now_ms()
    arrivals = _ip_stream_from_input(Path(args.input))
    scheduler = prober.ProbeScheduler(_parse_interval_ms(args.interval), args.state)
    due = [ip for _, ip in prober.schedule_probes(arrivals, scheduler=scheduler)]
    logger.info("probing %d of %d sightings", len(due), len(arrivals))
    results = prober.probe_sweep(
        due,
        port=args.port,
        parallelism=args.parallelism,
        tcp_timeout=args.tcp_timeout,
        handshake_timeout=args.handshake_timeout,
        network=args.network,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a", encoding="utf-8") as fh:
        prober.write_probe_log(results, fh)
    scheduler.save()
    write_manifest(
        out.parent,
        "probe",
        {"interval": args.interval, "port": args.port, "parallelism": args.parallelism},
        [Path(args.input)],
        started_ms,
    )
    return 0


def cmd_analyze(args) -> int:
    started_ms = now_ms()
    inputs = [Path(p) for p in args.log]
    for path in inputs + [Path(p) for p in (args.probes, args.asn, args.tor) if p]:
        if not path.exists():
            raise FileNotFoundError(f"missing input file: {path}")
    connections, propagations = read_event_logs(inputs)
    class_map = None
    if args.probes:
        class_map = prober.classify_all(prober.read_probe_log(args.probes))
        inputs.append(Path(args.probes))
    asn_db = None
    if args.asn:
        asn_db = analytics.AsnDatabase.load(args.asn)
        inputs.append(Path(args.asn))
    tor_ips = None
    if args.tor:
        tor_ips = {line.strip() for line in Path(args.tor).read_text().splitlines() if line.strip()}
        inputs.append(Path(args.tor))
    exclude = None
    if args.exclude_ips:
        exclude = {line.strip() for line in Path(args.exclude_ips).read_text().splitlines() if line.strip()}
        inputs.append(Path(args.exclude_ips))
    report = analytics.build_report(
        connections,
        propagations,
        class_map=class_map,
        asn_db=asn_db,
        tor_ips=tor_ips,
        exclude_ips=exclude,
        monitor_count=args.monitors,
        total_public_servers=args.servers,
        avg_parallel_connections=args.avg_parallel,
        window_ms=_parse_interval_ms(args.window),
    )
    outdir = Path(args.out)
    written = report.write_csv(outdir)
    logger.info("wrote %d tables to %s", len(written), outdir)
    write_manifest(
        outdir,
        "analyze",
        {"window": args.window, "monitors": args.monitors, "servers": args.servers},
        inputs,
        started_ms,
    )
    return 0


def cmd_simulate(args) -> int:
    started_ms = now_ms()
    config = _sim_config_from_file(Path(args.config) if args.config else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.seeds):
        seed = config.rng_seed + i
        cfg = dataclasses.replace(config, rng_seed=seed)
        result = gossipsim.run_experiment(cfg, args.txs, args.relay_txs)
        rows.append(
            (
                seed,
                _fmt_opt(result.tp_rate),
                _fmt_opt(result.fp_rate),
                result.ties,
                _fmt_opt(result.mean_latency_s),
                _fmt_opt(result.p99_latency_s),
            )
        )
        logger.info("seed %d: tp=%s fp=%s", seed, _fmt_opt(result.tp_rate), _fmt_opt(result.fp_rate))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "tp_rate", "fp_rate", "ties", "mean_latency_s", "p99_latency_s"])
        writer.writerows(rows)
    config_snapshot = {
        k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v))
        for k, v in dataclasses.asdict(config).items()
        if k != "latency_ms"
    }
    write_manifest(
        out.parent,
        "simulate",
        {**config_snapshot, "txs": args.txs, "relay_txs": args.relay_txs, "seeds": args.seeds},
        [Path(args.config)] if args.config else [],
        started_ms,
    )
    return 0


def _fmt_opt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def cmd_report(args) -> int:
    outdir = Path(args.analysis_dir)
    if not outdir.is_dir():
        raise FileNotFoundError(f"missing analysis directory: {outdir}")
    rendered = render_report(outdir)
    sys.stdout.write(rendered)
    return 0


def render_report(outdir: Path) -> str:
    """Human-readable summary of an analyze run; deterministic for fixed
    inputs.  Missing tables produce a warning on stderr, not a failure."""
    lines: list[str] = []

    def load(name: str) -> list[dict] | None:
        path = outdir / f"{name}.csv"
        if not path.exists():
            sys.stderr.write(f"warning: {path} missing, section skipped\n")
            return None
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    breakdown = load("class_breakdown")
    if breakdown is not None:
        lines.append("Peer class overview")
        lines.append(
            f"{'type':>8} {'ips':>10} {'%':>6} {'conns':>10} {'%':>6} {'props':>10} {'%':>6} {'txs':>10}"
        )
        for row in breakdown:
            lines.append(
                f"{row['type']:>8} {row['ips']:>10} {float(row['ip_share']) * 100:>6.1f}"
                f" {row['conns']:>10} {float(row['conn_share']) * 100:>6.1f}"
                f" {row['props']:>10} {float(row['prop_share']) * 100:>6.1f}"
                f" {row['txs']:>10}"
            )
        lines.append("")

    ephemeral = load("ephemeral")
    if ephemeral is not None:
        lines.append("Ephemeral connections (duration < 0.5 s)")
        for row in ephemeral:
            frac = f" ({float(row['fraction']) * 100:.1f}%)" if row["fraction"] else ""
            lines.append(f"  {row['scope']:>8}: {row['count']}{frac}")
        lines.append("")

    population = load("population_estimate") if (outdir / "population_estimate.csv").exists() else None
    if population:
        row = population[0]
        lines.append(
            f"Estimated unreachable clients per window: {row['estimate']}"
            f" (observed {float(row['observed_per_window']):.0f} across"
            f" {row['monitors']} of {row['servers']} servers,"
            f" {float(row['parallel_conns']):.1f} connections per client)"
        )
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="btcwatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"btcwatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("listen", help="run the measurement listener")
    p.add_argument("--port", type=int, default=8333)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--network", choices=("mainnet", "testnet"), default="mainnet")
    p.add_argument("--log", required=True, help="JSONL event log path")
    p.add_argument("--user-agent", default="/btcwatch:%s/" % __version__)
    p.add_argument("--max-inbound", type=int, default=117)
    p.set_defaults(func=cmd_listen)

    p = sub.add_parser("probe", help="reverse-probe source IPs")
    p.add_argument("--input", required=True, help="IP list or event log")
    p.add_argument("--interval", default="6h", help="per-IP minimum probe interval")
    p.add_argument("--out", required=True, help="probe results JSONL")
    p.add_argument("--port", type=int, default=prober.DEFAULT_PORT)
    p.add_argument("--parallelism", type=int, default=prober.DEFAULT_PARALLELISM)
    p.add_argument("--tcp-timeout", type=float, default=prober.TCP_TIMEOUT)
    p.add_argument("--handshake-timeout", type=float, default=prober.HANDSHAKE_TIMEOUT)
    p.add_argument("--network", choices=("mainnet", "testnet"), default="mainnet")
    p.add_argument("--state", help="last-probe-time table for restarts")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="compute statistics from event logs")
    p.add_argument("--log", nargs="+", required=True, help="event log(s)")
    p.add_argument("--probes", help="probe results JSONL")
    p.add_argument("--asn", help="ASN snapshot (CIDR<TAB>ASN<TAB>CC)")
    p.add_argument("--tor", help="file of Tor relay/exit IPs")
    p.add_argument("--exclude-ips", help="IPs to drop from filtered fan-out")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", default="6h")
    p.add_argument("--monitors", type=int, help="monitor count for the population estimate")
    p.add_argument("--servers", type=int, help="public server count for the population estimate")
    p.add_argument("--avg-parallel", type=float, default=3.5)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run the diffusion/triage simulator")
    p.add_argument("--config", help="flat key=value simulator config")
    p.add_argument("--txs", type=int, default=100, help="originator transactions per seed")
    p.add_argument("--relay-txs", type=int, default=0, help="relayed transactions per seed")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True, help="results CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render a summary of an analyze run")
    p.add_argument("analysis_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("BTCWATCH_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except KeyboardInterrupt:
        return 0
    except Exception as err:  # runtime errors map to exit 2
        logger.error("%s", err)
        sys.stderr.write(f"btcwatch: error: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
