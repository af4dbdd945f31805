"""Canonical encodings and SHA3-256 digests shared by ledger and contracts."""

import hashlib
import json

DIGEST_SIZE = 32


def sha3(data: bytes) -> bytes:
    return hashlib.sha3_256(data).digest()


def _field_bytes(value) -> bytes:
    if isinstance(value, bytes):
        return b"b" + value
    if isinstance(value, bool):
        return b"?" + (b"\x01" if value else b"\x00")
    if isinstance(value, int):
        if value < 0:
            raise ValueError("negative integers have no canonical encoding")
        return b"i" + value.to_bytes(8, "big")
    if isinstance(value, str):
        return b"s" + value.encode("utf-8")
    raise TypeError(f"cannot encode {type(value).__name__}")


def encode_fields(*fields) -> bytes:
    """Length-prefixed concatenation: each field is ``u32 len || tag || body``."""
    out = bytearray()
    for f in fields:
        body = _field_bytes(f)
        out += len(body).to_bytes(4, "big")
        out += body
    return bytes(out)


def digest_fields(*fields) -> bytes:
    return sha3(encode_fields(*fields))


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()
