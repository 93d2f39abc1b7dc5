"""Card personalization data and countermeasure switches.

Both structures load from JSON files; byte-valued fields are hex strings,
digit-valued fields are decimal strings. The bundled defaults describe a
synthetic prepaid MasterCard-style profile: the PAN is made up (Luhn-valid)
and the CVC3 key is a fixed test key, so nothing here encodes a real card.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Union

from .hexutil import format_hex, parse_hex


def luhn_check_digit(digits: str) -> int:
    """Check digit that makes ``digits + str(result)`` Luhn-valid."""
    total = 0
    for pos, ch in enumerate(reversed(digits)):
        d = int(ch)
        if pos % 2 == 0:  # positions counted with the check digit appended
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return (10 - total % 10) % 10


def luhn_valid(digits: str) -> bool:
    if not digits.isdigit() or len(digits) < 2:
        return False
    return luhn_check_digit(digits[:-1]) == int(digits[-1])


# fixed 16-byte test key; any resemblance to issuer key material is accidental
DEFAULT_CVC3_KEY = bytes.fromhex("404142434445464748494A4B4C4D4E4F")

_DEFAULT_PAN_BASE = "543000000007000"  # 15 digits; check digit appended below
DEFAULT_PAN = _DEFAULT_PAN_BASE + str(luhn_check_digit(_DEFAULT_PAN_BASE))


def _require_digits(name: str, value: str, length: int) -> None:
    if not (isinstance(value, str) and value.isdigit() and len(value) == length):
        raise ValueError(f"{name} must be {length} decimal digits, got {value!r}")


def _require_bytes(name: str, value: bytes, length: int) -> None:
    if not (isinstance(value, bytes) and len(value) == length):
        raise ValueError(f"{name} must be {length} bytes")


@dataclass(frozen=True)
class CardProfile:
    """Everything the payment applet needs to build its data file record."""

    pan: str = DEFAULT_PAN
    expiry: str = "1711"  # YYMM
    service_code: str = "101"
    discretionary: str = "0010000000000"
    track1_cvc3_bitmap: bytes = bytes.fromhex("000000000038")  # tag 9F62
    track1_unatc_bitmap: bytes = bytes.fromhex("0000000003C6")  # tag 9F63
    track2_cvc3_bitmap: bytes = bytes.fromhex("0038")  # tag 9F65
    track2_unatc_bitmap: bytes = bytes.fromhex("03C6")  # tag 9F66
    track1_atc_digits: int = 4  # tag 9F64
    track2_atc_digits: int = 4  # tag 9F67
    cvc3_key: bytes = DEFAULT_CVC3_KEY
    pin: str = "1234"

    def __post_init__(self) -> None:
        _require_digits("pan", self.pan, 16)
        if not luhn_valid(self.pan):
            raise ValueError(f"PAN {self.pan!r} fails the Luhn check")
        _require_digits("expiry", self.expiry, 4)
        _require_digits("service_code", self.service_code, 3)
        _require_digits("discretionary", self.discretionary, 13)
        _require_bytes("track1_cvc3_bitmap", self.track1_cvc3_bitmap, 6)
        _require_bytes("track1_unatc_bitmap", self.track1_unatc_bitmap, 6)
        _require_bytes("track2_cvc3_bitmap", self.track2_cvc3_bitmap, 2)
        _require_bytes("track2_unatc_bitmap", self.track2_unatc_bitmap, 2)
        _require_bytes("cvc3_key", self.cvc3_key, 16)
        if not (self.pin.isdigit() and 4 <= len(self.pin) <= 8):
            raise ValueError("pin must be 4-8 decimal digits")
        for name in ("track1_atc_digits", "track2_atc_digits"):
            if not 0 <= getattr(self, name) <= 9:
                raise ValueError(f"{name} out of range")

    def track1(self) -> bytes:
        """Track 1 (structure B) as ASCII; cardholder name left blank."""
        text = (
            "B"
            + self.pan
            + "^ /^"
            + self.expiry
            + self.service_code
            + self.discretionary
        )
        return text.encode("ascii")

    def track2(self) -> bytes:
        """Track 2 as packed nibbles with D separator and F padding."""
        digits = self.pan + "D" + self.expiry + self.service_code + self.discretionary
        if len(digits) % 2:
            digits += "F"
        return bytes.fromhex(digits)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pan": self.pan,
            "expiry": self.expiry,
            "service_code": self.service_code,
            "discretionary": self.discretionary,
            "track1_cvc3_bitmap": format_hex(self.track1_cvc3_bitmap),
            "track1_unatc_bitmap": format_hex(self.track1_unatc_bitmap),
            "track2_cvc3_bitmap": format_hex(self.track2_cvc3_bitmap),
            "track2_unatc_bitmap": format_hex(self.track2_unatc_bitmap),
            "track1_atc_digits": self.track1_atc_digits,
            "track2_atc_digits": self.track2_atc_digits,
            "cvc3_key": format_hex(self.cvc3_key),
            "pin": self.pin,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "CardProfile":
        kwargs: dict[str, Any] = {}
        hex_fields = {
            "track1_cvc3_bitmap",
            "track1_unatc_bitmap",
            "track2_cvc3_bitmap",
            "track2_unatc_bitmap",
            "cvc3_key",
        }
        for key, value in raw.items():
            if key in hex_fields:
                kwargs[key] = parse_hex(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CardProfile":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class CountermeasurePolicy:
    """Secure-element hardening toggles, all off by default.

    ``require_pin_on_card`` moves PIN verification onto the card: the unlock
    command is refused until a VERIFY with the correct PIN succeeded in the
    same internal session. ``internal_disabled_aids`` lists applets that must
    not be reachable through the internal interface at all.
    """

    require_pin_on_card: bool = False
    internal_disabled_aids: frozenset[bytes] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        normalized = frozenset(bytes(a) for a in self.internal_disabled_aids)
        object.__setattr__(self, "internal_disabled_aids", normalized)
        for aid in normalized:
            if not 5 <= len(aid) <= 16:
                raise ValueError(f"AID {aid.hex()} must be 5-16 bytes")

    def with_internal_disabled(self, *aids: bytes) -> "CountermeasurePolicy":
        return replace(
            self,
            internal_disabled_aids=self.internal_disabled_aids | set(aids),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "require_pin_on_card": self.require_pin_on_card,
            "internal_disabled_aids": sorted(
                format_hex(a) for a in self.internal_disabled_aids
            ),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "CountermeasurePolicy":
        return cls(
            require_pin_on_card=bool(raw.get("require_pin_on_card", False)),
            internal_disabled_aids=frozenset(
                parse_hex(a) for a in raw.get("internal_disabled_aids", [])
            ),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CountermeasurePolicy":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
