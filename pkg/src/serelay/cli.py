"""Command-line entry point for the relay-attack testbed.

Subcommands:
  pos-direct    terminal transaction straight against the in-process SE
  relay-attack  full relay chain (terminal / card emulator / relay app)
  bench         round-trip delay benchmark with histogram CSV export
  decode        pretty-print hex APDUs or TLV structures
  se-host       serve a secure element's internal channel over TCP
  relay-app     phone-side relay endpoint connecting to a card emulator
  emulator      card-emulator endpoint that runs a terminal transaction
"""
from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
import time
from pathlib import Path
from typing import Optional

from . import tlv
from .apdu import CommandApdu, MalformedApdu, ResponseApdu
from .bench import (
    BenchmarkSpec,
    histogram_to_csv,
    render_ascii,
    run_benchmark,
)
from .hexutil import format_hex, parse_hex
from .latency import AccessPath, LatencyModel, LatencyParams
from .profile import CardProfile, CountermeasurePolicy
from .relay import (
    CardEmulator,
    RelayApp,
    RemoteSecureElement,
    SecureElementHost,
    SocketTransport,
)
from .scenarios import resolve_seed, run_pos_direct, run_relay_attack
from .secure_element import ChannelOrigin, SecureElement
from .terminal import TerminalConfig, TransactionReport, run_transaction

logger = logging.getLogger(__name__)

TAG_NAMES = {
    "6F": "FCI template",
    "84": "DF name",
    "A5": "FCI proprietary template",
    "BF0C": "FCI issuer discretionary data",
    "61": "application template",
    "4F": "application identifier",
    "87": "application priority indicator",
    "50": "application label",
    "77": "response message template",
    "82": "application interchange profile",
    "94": "application file locator",
    "70": "data file record template",
    "56": "track 1 data",
    "9F6B": "track 2 data",
    "9F6C": "application version number",
    "9F62": "track 1 CVC3 bitmap",
    "9F63": "track 1 UN/ATC bitmap",
    "9F64": "track 1 ATC digit count",
    "9F65": "track 2 CVC3 bitmap",
    "9F66": "track 2 UN/ATC bitmap",
    "9F67": "track 2 ATC digit count",
    "9F60": "CVC3 track 1",
    "9F61": "CVC3 track 2",
    "9F36": "application transaction counter",
    "83": "command template",
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text!r} is not a positive integer")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text!r} is not a positive number")
    return value


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"{text!r} is not HOST:PORT")
    return host, int(port)


def _load_profile(path: Optional[str]) -> Optional[CardProfile]:
    return CardProfile.load(path) if path else None


def _load_policy(path: Optional[str]) -> Optional[CountermeasurePolicy]:
    return CountermeasurePolicy.load(path) if path else None


def _load_latency_params(path: Optional[str]) -> Optional[LatencyParams]:
    if not path:
        return None
    with open(path, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    try:
        return LatencyParams(**raw)
    except TypeError as exc:
        raise ValueError(f"bad latency parameter file {path}: {exc}") from None


def _write_report(report: TransactionReport, out_dir: Optional[str]) -> None:
    if not out_dir:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "trace.txt").write_text(report.render_trace() + "\n")


def _print_report(report: TransactionReport) -> None:
    print(report.render_trace())
    if report.pan:
        print(
            f"track2: pan={report.pan} expiry={report.expiry} "
            f"service={report.service_code}"
        )
    if report.atc is not None:
        print(
            f"cryptogram: atc={report.atc} "
            f"cvc3_t1={format_hex(report.cvc3_track1 or b'')} "
            f"cvc3_t2={format_hex(report.cvc3_track2 or b'')}"
        )


def cmd_pos_direct(args: argparse.Namespace) -> int:
    report = run_pos_direct(
        origin=ChannelOrigin(args.origin),
        profile=_load_profile(args.profile),
        policy=_load_policy(args.policy),
        unlock=args.unlock,
        pin=args.pin,
        seed=args.seed,
        path=AccessPath(args.model) if args.model else None,
        latency_params=_load_latency_params(args.latency_params),
        timeout_ms=args.timeout_ms,
        atc=args.atc,
    )
    _print_report(report)
    _write_report(report, args.out)
    return 0 if report.approved else 1


def cmd_relay_attack(args: argparse.Namespace) -> int:
    result = run_relay_attack(
        profile=_load_profile(args.profile),
        policy=_load_policy(args.policy),
        path=AccessPath(args.model),
        latency_params=_load_latency_params(args.latency_params),
        seed=args.seed,
        timeout_ms=args.timeout_ms,
        relay_pin=args.pin,
        hard_ceiling_ms=args.hard_ceiling_ms,
        transport=args.transport,
        atc=args.atc,
    )
    if result.session_error is not None:
        print(f"session open refused: {result.session_error}")
        return 1
    assert result.report is not None
    _print_report(result.report)
    _write_report(result.report, args.out)
    return 0 if result.report.approved else 1


def cmd_bench(args: argparse.Namespace) -> int:
    paths = (
        list(AccessPath) if args.path == "all" else [AccessPath(args.path)]
    )
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = _load_latency_params(args.latency_params)
    for path in paths:
        spec = BenchmarkSpec(
            path=path,
            repetitions=args.reps,
            seed=args.seed,
            bin_width_ms=args.bin_width,
            bin_count=args.bins,
            params=params,
            include_compute_time=args.include_compute,
        )
        hist = run_benchmark(spec)
        samples = sorted(LatencyModel(path, args.seed, params).samples(args.reps))
        median = samples[len(samples) // 2]
        summary = (
            f"{path.value}: reps={args.reps} min_ms={samples[0]:.1f} "
            f"median_ms={median:.1f} max_ms={samples[-1]:.1f}"
        )
        if path is AccessPath.RELAY_INTERNET:
            summary += f" median_ms>1000: {str(median > 1000).lower()}"
        print(summary)
        if args.ascii:
            print(render_ascii(hist))
        if out_dir:
            (out_dir / f"{path.value}.csv").write_text(histogram_to_csv(hist))
    return 0


def _describe_tlv(nodes, indent: int = 0) -> None:
    pad = "  " * indent
    for node in nodes:
        tag_hex = format_hex(node.tag)
        name = TAG_NAMES.get(tag_hex, "")
        label = f" ({name})" if name else ""
        if node.is_constructed:
            print(f"{pad}{tag_hex}{label} len={len(node.payload)}")
            _describe_tlv(node.children, indent + 1)
        else:
            shown = format_hex(node.value)
            printable = node.value.decode("ascii") if _is_printable(node.value) else None
            extra = f" '{printable}'" if printable else ""
            print(f"{pad}{tag_hex}{label} len={len(node.value)}: {shown}{extra}")


def _is_printable(data: bytes) -> bool:
    return len(data) > 0 and all(0x20 <= b < 0x7F for b in data)


def cmd_decode(args: argparse.Namespace) -> int:
    text = args.hex if args.hex else sys.stdin.read()
    try:
        raw = parse_hex(text)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    kind = args.kind
    if kind == "auto":
        kind = "capdu"
        try:
            CommandApdu.parse(raw)
        except MalformedApdu:
            kind = "tlv"
    if kind == "capdu":
        try:
            cmd = CommandApdu.parse(raw)
        except MalformedApdu as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(
            f"CLA={cmd.cla:02X} INS={cmd.ins:02X} P1={cmd.p1:02X} P2={cmd.p2:02X}"
            + (f" Lc={len(cmd.data)}" if cmd.data else "")
            + (f" Le={cmd.le:02X}" if cmd.le is not None else "")
        )
        if cmd.data:
            ascii_note = (
                f" '{cmd.data.decode('ascii')}'" if _is_printable(cmd.data) else ""
            )
            print(f"data: {format_hex(cmd.data)}{ascii_note}")
            _try_describe(cmd.data)
        return 0
    if kind == "rapdu":
        resp = ResponseApdu.parse(raw)
        print(f"SW={resp.sw:04X} data ({len(resp.data)} bytes)")
        _try_describe(resp.data)
        return 0
    try:
        _describe_tlv(tlv.decode(raw))
    except tlv.TlvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _try_describe(data: bytes) -> None:
    try:
        nodes = tlv.decode(data)
    except tlv.TlvError:
        return
    _describe_tlv(nodes, indent=1)


def cmd_se_host(args: argparse.Namespace) -> int:
    se = SecureElement(
        profile=_load_profile(args.profile),
        policy=_load_policy(args.policy),
        atc=args.atc,
    )
    host, port = args.listen
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    print(f"secure element listening on {host}:{listener.getsockname()[1]}")
    try:
        while True:
            conn, peer = listener.accept()
            logger.info("SE host: connection from %s", peer)
            SecureElementHost(se).serve(SocketTransport(conn))
            if args.once:
                return 0
    except KeyboardInterrupt:
        return 0
    finally:
        listener.close()


def _connect_with_retry(host: str, port: int, timeout_s: float = 10.0) -> socket.socket:
    """Keep trying while the peer role is still starting up."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout_s)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


def cmd_relay_app(args: argparse.Namespace) -> int:
    if args.se == "inproc":
        se = SecureElement(
            profile=_load_profile(args.profile),
            policy=_load_policy(args.policy),
        )
    else:
        host, port = _host_port(args.se)
        se = RemoteSecureElement(SocketTransport(_connect_with_retry(host, port)))
    seed = resolve_seed(args.seed)
    relay = RelayApp(
        se,
        model=LatencyModel(AccessPath(args.model), seed),
        pin=args.pin,
        hard_ceiling_ms=args.hard_ceiling_ms,
    )
    host, port = args.connect
    print(f"relay app connecting to {host}:{port} (seed={seed})")
    try:
        relay.serve(SocketTransport(_connect_with_retry(host, port, timeout_s=30.0)))
    finally:
        if isinstance(se, RemoteSecureElement):
            se.transport.close()
    return 0


def cmd_emulator(args: argparse.Namespace) -> int:
    host, port = args.listen
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    print(f"card emulator waiting for the relay app on {host}:{listener.getsockname()[1]}")
    conn, peer = listener.accept()
    listener.close()
    print(f"relay app connected from {peer[0]}:{peer[1]}; activating field")
    emulator = CardEmulator(SocketTransport(conn))
    seed = resolve_seed(args.seed)
    try:
        emulator.activate_field()
        report = run_transaction(
            emulator, TerminalConfig(timeout_ms=args.timeout_ms, seed=seed)
        )
        emulator.deactivate_field()
    finally:
        emulator.close()
    _print_report(report)
    _write_report(report, args.out)
    return 0 if report.approved else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serelay",
        description="Secure-element relay attack simulation testbed",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--profile", help="card profile JSON file")
        p.add_argument("--policy", help="countermeasure policy JSON file")
        p.add_argument("--seed", type=int, help="seed for all randomness")
        p.add_argument("--out", help="directory for report files")
        p.add_argument("--atc", type=int, default=0, help="initial transaction counter")
        p.add_argument(
            "--latency-params", help="JSON file overriding delay distribution knobs"
        )

    p = sub.add_parser("pos-direct", help="terminal against the in-process SE")
    add_common(p)
    p.add_argument(
        "--origin",
        choices=[o.value for o in ChannelOrigin],
        default="internal",
        help="channel the terminal talks through",
    )
    unlock = p.add_mutually_exclusive_group()
    unlock.add_argument("--unlock", dest="unlock", action="store_true", default=True)
    unlock.add_argument("--no-unlock", dest="unlock", action="store_false")
    p.add_argument("--pin", help="wallet PIN for the on-card verification step")
    p.add_argument(
        "--model",
        choices=[path.value for path in AccessPath],
        help="latency model (default: matches the origin)",
    )
    p.add_argument("--timeout-ms", type=_positive_float)
    p.set_defaults(func=cmd_pos_direct)

    p = sub.add_parser("relay-attack", help="terminal / emulator / relay app chain")
    add_common(p)
    p.add_argument(
        "--model",
        choices=[path.value for path in AccessPath],
        default=AccessPath.RELAY_WIFI.value,
    )
    p.add_argument(
        "--transport",
        choices=["inproc", "tcp"],
        default="inproc",
        help="inproc = virtual clock, tcp = loopback sockets with real delays",
    )
    p.add_argument("--timeout-ms", type=_positive_float)
    p.add_argument("--pin", help="wallet PIN known to the relay app, if any")
    p.add_argument("--hard-ceiling-ms", type=_positive_float)
    p.set_defaults(func=cmd_relay_attack)

    p = sub.add_parser("bench", help="delay benchmark with histogram export")
    p.add_argument(
        "--path",
        choices=[path.value for path in AccessPath] + ["all"],
        default="all",
    )
    p.add_argument("--reps", type=_positive_int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bin-width", type=_positive_float, default=50.0)
    p.add_argument("--bins", type=_positive_int, default=160)
    p.add_argument("--ascii", action="store_true", help="print bar charts")
    p.add_argument("--out", help="directory for per-path CSV files")
    p.add_argument(
        "--latency-params", help="JSON file overriding delay distribution knobs"
    )
    p.add_argument(
        "--include-compute",
        action="store_true",
        help="add measured host compute time to each binned delay",
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("decode", help="pretty-print hex APDUs or TLV")
    p.add_argument("hex", nargs="?", help="hex string (stdin when omitted)")
    p.add_argument(
        "--kind", choices=["auto", "capdu", "rapdu", "tlv"], default="auto"
    )
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("se-host", help="serve a secure element over TCP")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 9750))
    p.add_argument("--profile")
    p.add_argument("--policy")
    p.add_argument("--atc", type=int, default=0)
    p.add_argument("--once", action="store_true", help="exit after one connection")
    p.set_defaults(func=cmd_se_host)

    p = sub.add_parser("relay-app", help="phone-side relay endpoint")
    p.add_argument("--connect", type=_host_port, required=True, help="emulator address")
    p.add_argument("--se", default="inproc", help="'inproc' or HOST:PORT of se-host")
    p.add_argument("--profile")
    p.add_argument("--policy")
    p.add_argument(
        "--model",
        choices=[path.value for path in AccessPath],
        default=AccessPath.RELAY_WIFI.value,
    )
    p.add_argument("--pin")
    p.add_argument("--hard-ceiling-ms", type=_positive_float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_relay_app)

    p = sub.add_parser("emulator", help="card emulator + terminal endpoint")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 9751))
    p.add_argument("--timeout-ms", type=_positive_float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_emulator)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    except (ValueError, json.JSONDecodeError) as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
