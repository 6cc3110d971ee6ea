"""Sealed wire records and the tick read/write path.

Wire record: [4-byte magic "NSH1"][8-byte interval index][4-byte dp_len]
[AEAD-sealed frame-block chunk], integers big-endian. A tick's frame block is
split across as many records as the MTU requires, never across ticks; chunk
sizes are a fixed function of dp_len, so the receiver can delimit the stream
from the headers alone and total wire bytes per tick depend only on dp_len.

Records are sealed with AES-256-GCM under per-direction keys; nonces are the
per-direction record counter. A null cipher passes chunks through unsealed
for debugging.
"""

from __future__ import annotations

import hmac
import json
import os
import struct
from dataclasses import dataclass
from hashlib import sha256
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import AuthError, ParameterMismatch, SessionError
from .frames import block_len

MAGIC = b"NSH1"
_RECORD_HEADER = struct.Struct(">4sQI")
RECORD_HEADER_LEN = _RECORD_HEADER.size  # 16
GCM_TAG_LEN = 16
PROTOCOL_VERSION = 1

CIPHER_AESGCM = "aesgcm"
CIPHER_NULL = "null"


class RecordError(SessionError):
    """Undecodable or unauthenticated record."""


def _hkdf_sha256(key: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    prk = hmac.new(salt, key, sha256).digest()
    out = b""
    block = b""
    counter = 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), sha256).digest()
        out += block
        counter += 1
    return out[:length]


def derive_direction_keys(psk: bytes, salt: bytes) -> tuple[bytes, bytes]:
    """(connect-to-serve key, serve-to-connect key) from the pre-shared key."""
    return (
        _hkdf_sha256(psk, salt, b"netshaper c2s"),
        _hkdf_sha256(psk, salt, b"netshaper s2c"),
    )


class RecordCodec:
    """Seals and opens one direction's records; owns that direction's counter."""

    def __init__(self, key: bytes | None, mtu: int, flows_max: int):
        self.tag_len = GCM_TAG_LEN if key is not None else 0
        self.capacity = mtu - RECORD_HEADER_LEN - self.tag_len
        if self.capacity < 1:
            raise SessionError(f"mtu {mtu} leaves no room for record bodies")
        self._aead = AESGCM(key) if key is not None else None
        self.mtu = mtu
        self.flows_max = flows_max
        self.seq = 0

    def chunk_sizes(self, dp_len: int) -> list[int]:
        """Plaintext chunk lengths for a tick; at least one (possibly empty) record."""
        total = block_len(dp_len, self.flows_max)
        if total == 0:
            return [0]
        sizes = [self.capacity] * (total // self.capacity)
        if total % self.capacity:
            sizes.append(total % self.capacity)
        return sizes

    def wire_bytes_for_tick(self, dp_len: int) -> int:
        """Exact bytes a tick of dp_len puts on the wire; independent of content."""
        chunks = self.chunk_sizes(dp_len)
        return sum(chunks) + len(chunks) * (RECORD_HEADER_LEN + self.tag_len)

    def _nonce(self, seq: int) -> bytes:
        return seq.to_bytes(12, "big")

    def seal_tick(self, interval: int, dp_len: int, block: bytes) -> list[bytes]:
        if len(block) != block_len(dp_len, self.flows_max):
            raise RecordError(f"block length {len(block)} does not match dp_len {dp_len}")
        records = []
        pos = 0
        for size in self.chunk_sizes(dp_len):
            chunk = block[pos : pos + size]
            pos += size
            header = _RECORD_HEADER.pack(MAGIC, interval, dp_len)
            if self._aead is None:
                records.append(header + chunk)
            else:
                records.append(header + self._aead.encrypt(self._nonce(self.seq), chunk, header))
            self.seq += 1
        return records

    def read_tick(self, recv_exact: Callable[[int], bytes]) -> tuple[int, int, bytes | None]:
        """Read and open all records of the next tick from a byte stream.

        Record boundaries derive from the cleartext header, so a record that
        fails authentication is dropped without losing stream sync: the tick's
        remaining records are still consumed and the block comes back as None
        for the caller to count.
        """
        block = bytearray()
        expected: list[int] | None = None
        interval = dp_len = 0
        damaged = False
        while expected is None or expected:
            header = recv_exact(RECORD_HEADER_LEN)
            magic, rec_interval, rec_dp_len = _RECORD_HEADER.unpack(header)
            if magic != MAGIC:
                raise RecordError("bad record magic")
            if expected is None:
                interval, dp_len = rec_interval, rec_dp_len
                expected = self.chunk_sizes(dp_len)
            elif (rec_interval, rec_dp_len) != (interval, dp_len):
                raise RecordError("record header changed mid-tick")
            size = expected.pop(0)
            ciphertext = recv_exact(size + self.tag_len)
            if self._aead is None:
                block += ciphertext
            else:
                try:
                    block += self._aead.decrypt(self._nonce(self.seq), ciphertext, header)
                except InvalidTag:
                    damaged = True
            self.seq += 1
        return interval, dp_len, None if damaged else bytes(block)


# --- establishment handshake ---

_HELLO_LEN = struct.Struct(">I")
HMAC_LEN = 32


@dataclass(frozen=True)
class Hello:
    role: str
    nonce: bytes
    params: dict

    def encode(self, psk: bytes | None) -> bytes:
        payload = json.dumps(
            {
                "version": PROTOCOL_VERSION,
                "role": self.role,
                "nonce": self.nonce.hex(),
                "params": self.params,
            },
            sort_keys=True,
        ).encode()
        mac = hmac.new(psk, payload, sha256).digest() if psk is not None else b""
        return MAGIC + _HELLO_LEN.pack(len(payload) + len(mac)) + payload + mac


def read_hello(recv_exact: Callable[[int], bytes], psk: bytes | None) -> Hello:
    magic = recv_exact(4)
    if magic != MAGIC:
        raise SessionError("peer did not speak the tunnel protocol")
    (length,) = _HELLO_LEN.unpack(recv_exact(4))
    if not 0 < length <= 65536:
        raise SessionError(f"implausible hello length {length}")
    raw = recv_exact(length)
    if psk is not None:
        if length <= HMAC_LEN:
            raise AuthError("hello too short to be authenticated")
        payload, mac = raw[:-HMAC_LEN], raw[-HMAC_LEN:]
        if not hmac.compare_digest(hmac.new(psk, payload, sha256).digest(), mac):
            raise AuthError("peer failed pre-shared-key authentication")
    else:
        payload = raw
    try:
        body = json.loads(payload.decode())
        return Hello(body["role"], bytes.fromhex(body["nonce"]), body["params"])
    except (ValueError, KeyError) as exc:
        raise SessionError(f"malformed hello: {exc}") from exc


def check_params_match(mine: dict, theirs: dict) -> None:
    if mine != theirs:
        diffs = sorted(
            k for k in mine.keys() | theirs.keys() if mine.get(k) != theirs.get(k)
        )
        raise ParameterMismatch(f"endpoints disagree on: {', '.join(diffs)}")


def random_nonce() -> bytes:
    return os.urandom(16)
