"""End-to-end scenario orchestration shared by the CLI and the test suite.

Two experiments are wired here: driving the terminal straight against an
in-process secure element (over either channel), and the full relay attack
with terminal, card emulator and relay app talking through the framed wire
protocol, either in-process on a virtual clock for deterministic mass runs or
over TCP loopback with real threads and real sleeps.
"""
from __future__ import annotations

import logging
import random
import socket
import threading
from dataclasses import dataclass
from typing import Optional

from .apdu import CommandApdu
from .latency import (
    AccessPath,
    LatencyModel,
    LatencyParams,
    VirtualClock,
    WallClock,
)
from .profile import CardProfile, CountermeasurePolicy
from .relay import (
    ActivationRefused,
    CardEmulator,
    InProcessTransport,
    RelayApp,
    SocketTransport,
)
from .secure_element import ChannelOrigin, SecureElement, WALLET_AID
from .terminal import (
    DirectCardInterface,
    TerminalConfig,
    TransactionReport,
    run_transaction,
)

logger = logging.getLogger(__name__)


def resolve_seed(seed: Optional[int]) -> int:
    """Take the caller's seed or draw one from system entropy."""
    if seed is not None:
        return seed
    return random.SystemRandom().getrandbits(32)


def unlock_wallet_locally(se: SecureElement, pin: Optional[str] = None) -> bool:
    """What the wallet app does on the owner's phone: select, verify, unlock."""
    se.open_session(ChannelOrigin.INTERNAL)
    select = se.process(
        ChannelOrigin.INTERNAL,
        CommandApdu(0x00, 0xA4, 0x04, 0x00, data=WALLET_AID, le=0),
    )
    if not select.is_success:
        return False
    if pin is not None:
        se.process(
            ChannelOrigin.INTERNAL,
            CommandApdu(0x00, 0x20, 0x00, 0x00, data=pin.encode("ascii")),
        )
    unlock = se.process(ChannelOrigin.INTERNAL, CommandApdu(0x80, 0xE2, 0x00, 0xAA, le=0))
    return unlock.is_success


def default_path_for_origin(origin: ChannelOrigin) -> AccessPath:
    if origin is ChannelOrigin.CONTACTLESS:
        return AccessPath.DIRECT_EXTERNAL
    return AccessPath.DIRECT_INTERNAL


def run_pos_direct(
    origin: ChannelOrigin = ChannelOrigin.INTERNAL,
    profile: Optional[CardProfile] = None,
    policy: Optional[CountermeasurePolicy] = None,
    se: Optional[SecureElement] = None,
    unlock: bool = True,
    pin: Optional[str] = None,
    seed: Optional[int] = None,
    path: Optional[AccessPath] = None,
    latency_params: Optional[LatencyParams] = None,
    timeout_ms: Optional[float] = None,
    fixed_un: Optional[bytes] = None,
    atc: int = 0,
    clock=None,
) -> TransactionReport:
    """One terminal transaction straight against the secure element."""
    seed = resolve_seed(seed)
    clock = clock if clock is not None else VirtualClock()
    if se is None:
        se = SecureElement(profile=profile, policy=policy, atc=atc)
    if unlock:
        unlocked = unlock_wallet_locally(se, pin=pin)
        if not unlocked:
            logger.info("local unlock failed; transaction will run against a locked wallet")
    elif origin is ChannelOrigin.INTERNAL:
        se.open_session(ChannelOrigin.INTERNAL)
    if origin is ChannelOrigin.CONTACTLESS:
        se.open_session(ChannelOrigin.CONTACTLESS)
    if path is None:
        path = default_path_for_origin(origin)
    model = LatencyModel(path, seed, latency_params)
    card = DirectCardInterface(se, origin, model=model, clock=clock)
    cfg = TerminalConfig(timeout_ms=timeout_ms, seed=seed, fixed_un=fixed_un)
    return run_transaction(card, cfg, clock)


@dataclass
class RelayAttackResult:
    """Either a terminal report or the reason the session never opened."""

    report: Optional[TransactionReport]
    session_error: Optional[str]
    se: Optional[SecureElement]

    @property
    def approved(self) -> bool:
        return self.report is not None and self.report.approved


def run_relay_attack(
    profile: Optional[CardProfile] = None,
    policy: Optional[CountermeasurePolicy] = None,
    se: Optional[SecureElement] = None,
    path: AccessPath = AccessPath.RELAY_WIFI,
    latency_params: Optional[LatencyParams] = None,
    seed: Optional[int] = None,
    timeout_ms: Optional[float] = None,
    relay_pin: Optional[str] = None,
    hard_ceiling_ms: Optional[float] = None,
    transport: str = "inproc",
    atc: int = 0,
    clock=None,
) -> RelayAttackResult:
    """Full relay attack: terminal -> emulator -> relay app -> secure element."""
    seed = resolve_seed(seed)
    if se is None:
        se = SecureElement(profile=profile, policy=policy, atc=atc)
    if transport == "inproc":
        clock = clock if clock is not None else VirtualClock()
        return _relay_attack_inproc(
            se, path, latency_params, seed, timeout_ms, relay_pin, hard_ceiling_ms, clock
        )
    if transport == "tcp":
        return _relay_attack_tcp(
            se, path, latency_params, seed, timeout_ms, relay_pin, hard_ceiling_ms
        )
    raise ValueError(f"unknown transport {transport!r}")


def _finish_relay_run(
    emulator: CardEmulator,
    se: SecureElement,
    seed: int,
    timeout_ms: Optional[float],
    clock,
) -> RelayAttackResult:
    try:
        emulator.activate_field()
    except ActivationRefused as refused:
        return RelayAttackResult(report=None, session_error=refused.reason, se=se)
    cfg = TerminalConfig(timeout_ms=timeout_ms, seed=seed)
    report = run_transaction(emulator, cfg, clock)
    emulator.deactivate_field()
    return RelayAttackResult(report=report, session_error=None, se=se)


def _relay_attack_inproc(
    se, path, params, seed, timeout_ms, relay_pin, hard_ceiling_ms, clock
) -> RelayAttackResult:
    relay = RelayApp(
        se,
        model=LatencyModel(path, seed, params),
        clock=clock,
        pin=relay_pin,
        hard_ceiling_ms=hard_ceiling_ms,
    )
    emulator = CardEmulator(InProcessTransport(relay))
    try:
        return _finish_relay_run(emulator, se, seed, timeout_ms, clock)
    finally:
        emulator.close()


def _relay_attack_tcp(
    se, path, params, seed, timeout_ms, relay_pin, hard_ceiling_ms
) -> RelayAttackResult:
    clock = WallClock()
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    host, port = listener.getsockname()

    relay = RelayApp(
        se,
        model=LatencyModel(path, seed, params),
        clock=clock,
        pin=relay_pin,
        hard_ceiling_ms=hard_ceiling_ms,
    )

    def relay_main() -> None:
        relay.serve(SocketTransport(socket.create_connection((host, port), timeout=5.0)))

    relay_thread = threading.Thread(target=relay_main, name="relay-app", daemon=True)
    relay_thread.start()
    conn, _peer = listener.accept()
    listener.close()
    emulator = CardEmulator(SocketTransport(conn))
    try:
        return _finish_relay_run(emulator, se, seed, timeout_ms, clock)
    finally:
        emulator.close()
        relay_thread.join(timeout=5.0)
