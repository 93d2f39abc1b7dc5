import pytest

from serelay.hexutil import format_hex, parse_hex


def test_parse_plain():
    assert parse_hex("9000") == b"\x90\x00"


def test_parse_case_insensitive():
    assert parse_hex("9f6b") == parse_hex("9F6B") == b"\x9f\x6b"


def test_parse_with_spaces_and_newlines():
    assert parse_hex("6F 3A\n84 0E") == bytes.fromhex("6f3a840e")


def test_parse_odd_length_rejected():
    with pytest.raises(ValueError):
        parse_hex("ABC")


def test_parse_non_hex_rejected():
    with pytest.raises(ValueError):
        parse_hex("ZZ")


def test_format_uppercase():
    assert format_hex(b"\x9f\x6b\x00") == "9F6B00"


def test_format_with_separator():
    assert format_hex(b"\x90\x00", sep=" ") == "90 00"


def test_round_trip():
    data = bytes(range(256))
    assert parse_hex(format_hex(data)) == data
    assert parse_hex(format_hex(data, sep=" ")) == data
