"""Relay plumbing: framed wire protocol, transports and both endpoints.

Frames are ``[1-byte kind][2-byte big-endian length][payload]``. One relay
session lives per connection: the card emulator announces field activation
with SESSION_OPEN, shuttles C-APDU/R-APDU frames while the field is up and
tears down with SESSION_CLOSE. OPEN and CLOSE are echoed back as
acknowledgements; fatal conditions come back as an ERROR frame whose first
payload byte is a reason code.

The phone-side relay app owns the secure element's internal channel. On
session open it selects the wallet's on-card component, unlocks the wallet
and probes the payment applet; on any teardown (explicit close or transport
loss) it locks the wallet again, so a terminated session can never leave
the card spendable.
"""
from __future__ import annotations

import logging
import socket
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Protocol

from .apdu import CommandApdu, MalformedApdu, ResponseApdu
from .latency import LatencyModel, WallClock
from .secure_element import (
    ChannelOrigin,
    PREPAID_AID,
    SW_WRONG_LENGTH,
    WALLET_AID,
)

logger = logging.getLogger(__name__)

FRAME_HEADER_LEN = 3
MAX_PAYLOAD_LEN = 0xFFFF


class FrameKind(IntEnum):
    SESSION_OPEN = 0x01
    SESSION_CLOSE = 0x02
    C_APDU = 0x03
    R_APDU = 0x04
    ERROR = 0x05


class ErrorReason(IntEnum):
    ACCESS_DENIED = 0x01
    UNLOCK_FAILED = 0x02
    SESSION_STATE = 0x03
    TIMEOUT = 0x04


class RelayProtocolError(Exception):
    """Peer sent bytes that do not form a valid frame sequence."""


class TransportClosed(Exception):
    """The underlying stream is gone."""


class ActivationRefused(Exception):
    """Relay endpoint rejected the session open."""

    def __init__(self, reason: str):
        super().__init__(f"field activation refused: {reason}")
        self.reason = reason


class CardRemoved(Exception):
    """The emulated card vanished mid-transaction (transport or relay fault)."""


class ExchangeTimeout(Exception):
    """No response within the caller's deadline."""


@dataclass(frozen=True)
class WireFrame:
    kind: FrameKind
    payload: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FrameKind(self.kind))
        object.__setattr__(self, "payload", bytes(self.payload))
        if self.kind in (FrameKind.SESSION_OPEN, FrameKind.SESSION_CLOSE):
            if self.payload:
                raise RelayProtocolError(f"{self.kind.name} frames carry no payload")
        if len(self.payload) > MAX_PAYLOAD_LEN:
            raise RelayProtocolError("frame payload too large")

    def encode(self) -> bytes:
        return (
            bytes((self.kind,))
            + len(self.payload).to_bytes(2, "big")
            + self.payload
        )

    @classmethod
    def decode(cls, raw: bytes) -> "WireFrame":
        frame, used = cls.decode_prefix(raw)
        if used != len(raw):
            raise RelayProtocolError(f"{len(raw) - used} trailing bytes after frame")
        return frame

    @classmethod
    def decode_prefix(cls, raw: bytes) -> tuple["WireFrame", int]:
        if len(raw) < FRAME_HEADER_LEN:
            raise RelayProtocolError("short frame header")
        try:
            kind = FrameKind(raw[0])
        except ValueError:
            raise RelayProtocolError(f"unknown frame kind {raw[0]:#04x}") from None
        length = int.from_bytes(raw[1:3], "big")
        end = FRAME_HEADER_LEN + length
        if len(raw) < end:
            raise RelayProtocolError("truncated frame payload")
        return cls(kind=kind, payload=raw[FRAME_HEADER_LEN:end]), end


def error_frame(reason: ErrorReason, detail: str = "") -> WireFrame:
    return WireFrame(FrameKind.ERROR, bytes((reason,)) + detail.encode("utf-8"))


def error_reason_name(frame: WireFrame) -> str:
    if frame.kind is not FrameKind.ERROR or not frame.payload:
        return "unknown"
    try:
        return ErrorReason(frame.payload[0]).name.lower()
    except ValueError:
        return f"code_{frame.payload[0]:#04x}"


class Transport(Protocol):
    def send_frame(self, frame: WireFrame) -> None: ...

    def recv_frame(self, timeout_ms: Optional[float] = None) -> WireFrame: ...

    def close(self) -> None: ...


class SocketTransport:
    """Frame stream over a connected TCP (or socketpair) socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False

    def send_frame(self, frame: WireFrame) -> None:
        if self._closed:
            raise TransportClosed("transport already closed")
        try:
            self._sock.sendall(frame.encode())
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _recv_exact(self, count: int) -> bytes:
        chunks = b""
        while len(chunks) < count:
            try:
                chunk = self._sock.recv(count - len(chunks))
            except socket.timeout:
                raise
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks += chunk
        return chunks

    def recv_frame(self, timeout_ms: Optional[float] = None) -> WireFrame:
        if self._closed:
            raise TransportClosed("transport already closed")
        try:
            self._sock.settimeout(
                timeout_ms / 1000.0 if timeout_ms is not None else None
            )
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc
        try:
            header = self._recv_exact(FRAME_HEADER_LEN)
            length = int.from_bytes(header[1:3], "big")
            payload = self._recv_exact(length) if length else b""
        except socket.timeout:
            raise ExchangeTimeout("no frame within deadline") from None
        finally:
            try:
                self._sock.settimeout(None)
            except OSError:
                pass
        return WireFrame.decode(header + payload)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def connect_tcp(host: str, port: int, timeout_s: float = 5.0) -> SocketTransport:
    return SocketTransport(socket.create_connection((host, port), timeout=timeout_s))


class FrameHandler(Protocol):
    def handle_frame(self, frame: WireFrame) -> Iterable[WireFrame]: ...

    def on_transport_lost(self) -> None: ...


class InProcessTransport:
    """Single-threaded transport that feeds frames straight into a handler.

    Used where both endpoints live in one process: the emulator's sends are
    handled synchronously and the handler's replies are queued for the next
    ``recv_frame``. FIFO per session holds by construction.
    """

    def __init__(self, handler: FrameHandler):
        self._handler = handler
        self._inbox: deque[WireFrame] = deque()
        self._closed = False

    def send_frame(self, frame: WireFrame) -> None:
        if self._closed:
            raise TransportClosed("transport already closed")
        self._inbox.extend(self._handler.handle_frame(frame))

    def recv_frame(self, timeout_ms: Optional[float] = None) -> WireFrame:
        if self._closed:
            raise TransportClosed("transport already closed")
        if not self._inbox:
            raise RelayProtocolError("no frame pending")
        return self._inbox.popleft()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._handler.on_transport_lost()


class RelayApp:
    """Phone-side endpoint bridging the SE's internal channel to the wire.

    ``se`` may be a local :class:`~serelay.secure_element.SecureElement` or
    any object with the same ``open_session``/``process``/``close_session``
    surface (e.g. a remote client). ``pin`` is the wallet PIN the attacker
    managed to learn, if any; without it the on-card PIN countermeasure makes
    the unlock step fail.
    """

    def __init__(
        self,
        se,
        model: Optional[LatencyModel] = None,
        clock=None,
        pin: Optional[str] = None,
        hard_ceiling_ms: Optional[float] = None,
        payment_aid: bytes = PREPAID_AID,
    ):
        self.se = se
        self.model = model
        self.clock = clock if clock is not None else WallClock()
        self.pin = pin
        self.hard_ceiling_ms = hard_ceiling_ms
        self.payment_aid = payment_aid
        self.session_open = False

    # -- SE helpers ----------------------------------------------------------

    def _se_command(self, cmd: CommandApdu) -> ResponseApdu:
        return self.se.process(ChannelOrigin.INTERNAL, cmd)

    def _select(self, aid: bytes) -> ResponseApdu:
        return self._se_command(CommandApdu(0x00, 0xA4, 0x04, 0x00, data=aid, le=0))

    def _open_sequence(self) -> Optional[WireFrame]:
        """Run the select/unlock/probe preamble; an ERROR frame on failure."""
        self.se.open_session(ChannelOrigin.INTERNAL)
        if not self._select(WALLET_AID).is_success:
            return error_frame(ErrorReason.ACCESS_DENIED, "on-card component")
        if self.pin is not None:
            self._se_command(
                CommandApdu(0x00, 0x20, 0x00, 0x00, data=self.pin.encode("ascii"))
            )
        unlock = self._se_command(CommandApdu(0x80, 0xE2, 0x00, 0xAA, le=0))
        if not unlock.is_success:
            return error_frame(ErrorReason.UNLOCK_FAILED, f"sw={unlock.sw:04X}")
        # probe that the payment applet is actually reachable on this channel
        if not self._select(self.payment_aid).is_success:
            return error_frame(ErrorReason.ACCESS_DENIED, "payment applet")
        return None

    def _teardown(self) -> None:
        """Re-select the on-card component, lock the wallet, drop the channel."""
        try:
            if self._select(WALLET_AID).is_success:
                self._se_command(CommandApdu(0x80, 0xE2, 0x00, 0x55, le=0))
        except (TransportClosed, RelayProtocolError):
            pass  # a dead remote SE cannot be locked from here
        finally:
            self.se.close_session(ChannelOrigin.INTERNAL)
            self.session_open = False

    # -- frame handling -------------------------------------------------------

    def handle_frame(self, frame: WireFrame) -> list[WireFrame]:
        if frame.kind is FrameKind.SESSION_OPEN:
            if self.session_open:
                return [error_frame(ErrorReason.SESSION_STATE, "already open")]
            try:
                failure = self._open_sequence()
            except (TransportClosed, RelayProtocolError):
                failure = error_frame(ErrorReason.ACCESS_DENIED, "SE unreachable")
            if failure is not None:
                self._teardown()
                return [failure]
            self.session_open = True
            return [WireFrame(FrameKind.SESSION_OPEN)]
        if frame.kind is FrameKind.SESSION_CLOSE:
            if self.session_open:
                self._teardown()
            return [WireFrame(FrameKind.SESSION_CLOSE)]
        if frame.kind is FrameKind.C_APDU:
            if not self.session_open:
                return [error_frame(ErrorReason.SESSION_STATE, "session not open")]
            try:
                return [self._relay_apdu(frame.payload)]
            except (TransportClosed, RelayProtocolError):
                self._teardown()
                return [error_frame(ErrorReason.ACCESS_DENIED, "SE unreachable")]
        return [error_frame(ErrorReason.SESSION_STATE, f"unexpected {frame.kind.name}")]

    def _relay_apdu(self, raw: bytes) -> WireFrame:
        delay_ms = self.model.sample_ms() if self.model is not None else 0.0
        if self.hard_ceiling_ms is not None and delay_ms > self.hard_ceiling_ms:
            # give up after the ceiling instead of waiting the delay out
            self.clock.sleep_ms(self.hard_ceiling_ms)
            return error_frame(ErrorReason.TIMEOUT, f"{delay_ms:.0f}ms")
        self.clock.sleep_ms(delay_ms)
        try:
            cmd = CommandApdu.parse(raw)
        except MalformedApdu:
            # transparent pipes never raise; answer like a confused card
            return WireFrame(
                FrameKind.R_APDU, ResponseApdu.from_sw(SW_WRONG_LENGTH).to_bytes()
            )
        resp = self._se_command(cmd)
        return WireFrame(FrameKind.R_APDU, resp.to_bytes())

    def on_transport_lost(self) -> None:
        if self.session_open:
            logger.info("transport lost with session open; locking wallet")
            self._teardown()

    def serve(self, transport: Transport) -> None:
        """Drive one connection until the peer goes away."""
        try:
            while True:
                try:
                    frame = transport.recv_frame()
                    for reply in self.handle_frame(frame):
                        transport.send_frame(reply)
                except (TransportClosed, RelayProtocolError):
                    break
        finally:
            self.on_transport_lost()
            transport.close()


class CardEmulator:
    """Terminal-side endpoint: presents the relayed SE as a local card."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.field_active = False

    def activate_field(self) -> None:
        if self.field_active:
            return
        try:
            self.transport.send_frame(WireFrame(FrameKind.SESSION_OPEN))
            reply = self.transport.recv_frame()
        except (TransportClosed, RelayProtocolError) as exc:
            raise ActivationRefused(f"relay unreachable: {exc}") from exc
        if reply.kind is FrameKind.SESSION_OPEN:
            self.field_active = True
            return
        if reply.kind is FrameKind.ERROR:
            raise ActivationRefused(error_reason_name(reply))
        raise ActivationRefused(f"unexpected {reply.kind.name} frame")

    def exchange(self, capdu: bytes, max_wait_ms: Optional[float] = None) -> bytes:
        if not self.field_active:
            raise CardRemoved("field not active")
        try:
            self.transport.send_frame(WireFrame(FrameKind.C_APDU, capdu))
            reply = self.transport.recv_frame(timeout_ms=max_wait_ms)
        except ExchangeTimeout:
            self.field_active = False
            raise
        except (TransportClosed, RelayProtocolError) as exc:
            self.field_active = False
            raise CardRemoved(str(exc)) from exc
        if reply.kind is FrameKind.R_APDU:
            return reply.payload
        self.field_active = False
        raise CardRemoved(f"relay reported {error_reason_name(reply)}")

    def deactivate_field(self) -> None:
        if not self.field_active:
            return
        self.field_active = False
        try:
            self.transport.send_frame(WireFrame(FrameKind.SESSION_CLOSE))
            self.transport.recv_frame()
        except (TransportClosed, RelayProtocolError, ExchangeTimeout):
            pass

    def close(self) -> None:
        self.deactivate_field()
        self.transport.close()


class SecureElementHost:
    """Serves a secure element's internal channel over the wire protocol.

    Lets the relay app run in a different process from the SE. Transport
    loss with a session open locks the wallet defensively, preserving the
    session-hygiene guarantee across a distributed deployment.
    """

    def __init__(self, se):
        self.se = se
        self.session_open = False

    def handle_frame(self, frame: WireFrame) -> list[WireFrame]:
        if frame.kind is FrameKind.SESSION_OPEN:
            if self.session_open:
                return [error_frame(ErrorReason.SESSION_STATE, "already open")]
            self.se.open_session(ChannelOrigin.INTERNAL)
            self.session_open = True
            return [WireFrame(FrameKind.SESSION_OPEN)]
        if frame.kind is FrameKind.SESSION_CLOSE:
            if self.session_open:
                self.se.close_session(ChannelOrigin.INTERNAL)
                self.session_open = False
            return [WireFrame(FrameKind.SESSION_CLOSE)]
        if frame.kind is FrameKind.C_APDU:
            if not self.session_open:
                return [error_frame(ErrorReason.SESSION_STATE, "session not open")]
            try:
                cmd = CommandApdu.parse(frame.payload)
            except MalformedApdu:
                return [
                    WireFrame(
                        FrameKind.R_APDU,
                        ResponseApdu.from_sw(SW_WRONG_LENGTH).to_bytes(),
                    )
                ]
            resp = self.se.process(ChannelOrigin.INTERNAL, cmd)
            return [WireFrame(FrameKind.R_APDU, resp.to_bytes())]
        return [error_frame(ErrorReason.SESSION_STATE, f"unexpected {frame.kind.name}")]

    def on_transport_lost(self) -> None:
        if self.session_open:
            logger.info("SE host lost its peer with a session open; locking wallet")
            self.se.lock_wallet()
            self.se.close_session(ChannelOrigin.INTERNAL)
            self.session_open = False

    def serve(self, transport: Transport) -> None:
        try:
            while True:
                try:
                    frame = transport.recv_frame()
                    for reply in self.handle_frame(frame):
                        transport.send_frame(reply)
                except (TransportClosed, RelayProtocolError):
                    break
        finally:
            self.on_transport_lost()
            transport.close()


class RemoteSecureElement:
    """Client for :class:`SecureElementHost`; quacks like a local SE."""

    def __init__(self, transport: Transport):
        self.transport = transport

    def open_session(self, origin: ChannelOrigin) -> None:
        self.transport.send_frame(WireFrame(FrameKind.SESSION_OPEN))
        reply = self.transport.recv_frame()
        if reply.kind is not FrameKind.SESSION_OPEN:
            raise RelayProtocolError(f"open rejected: {error_reason_name(reply)}")

    def process(self, origin: ChannelOrigin, cmd: CommandApdu) -> ResponseApdu:
        self.transport.send_frame(WireFrame(FrameKind.C_APDU, cmd.to_bytes()))
        reply = self.transport.recv_frame()
        if reply.kind is not FrameKind.R_APDU:
            raise RelayProtocolError(f"exchange failed: {error_reason_name(reply)}")
        return ResponseApdu.parse(reply.payload)

    def close_session(self, origin: ChannelOrigin) -> None:
        try:
            self.transport.send_frame(WireFrame(FrameKind.SESSION_CLOSE))
            self.transport.recv_frame()
        except (TransportClosed, RelayProtocolError, ExchangeTimeout):
            pass
