"""Runtime bytecode normalization, canonicalization, disassembly and segmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyBytecode, MalformedHex
from .opcodes import push_size

HASH_ALGORITHM = "sha256"

_HEX = frozenset("0123456789abcdefABCDEF")


def canonical_digest(data: bytes) -> bytes:
    return hashlib.new(HASH_ALGORITHM, data).digest()


def normalize(hex_text: str) -> bytes:
    """Decode ``hex_text`` (optionally ``0x``-prefixed, any case) into bytes."""
    text = hex_text.strip()
    if text[:2] in ("0x", "0X"):
        text = text[2:]
    if not text:
        raise MalformedHex("empty bytecode after prefix removal")
    if len(text) % 2:
        raise MalformedHex(f"odd hex length {len(text)}")
    if not _HEX.issuperset(text):
        bad = next(c for c in text if c not in _HEX)
        raise MalformedHex(f"non-hex character {bad!r}")
    return bytes.fromhex(text)


@dataclass(frozen=True)
class CanonicalBytecode:
    bytes: bytes
    canonical_hash: bytes
    original_len: int
    stripped_len: int

    @property
    def hash_hex(self) -> str:
        return self.canonical_hash.hex()

    @classmethod
    def from_bytes(cls, data: bytes, original_len: int | None = None) -> CanonicalBytecode:
        return cls(data, canonical_digest(data), original_len or len(data), len(data))


def _trailer_len(data: bytes) -> int:
    """Length of a CBOR metadata trailer (map + 2-byte length suffix), 0 if none."""
    n = len(data)
    if n < 3:
        return 0
    m = int.from_bytes(data[-2:], "big")
    if m < 2 or m + 2 > n:
        return 0
    head = data[n - 2 - m]
    # map with 1..23 entries whose first key is a text string
    if head >> 5 != 5 or not 1 <= head & 0x1F <= 23:
        return 0
    if data[n - 1 - m] >> 5 != 3:
        return 0
    return m + 2


def strip_metadata(data: bytes) -> CanonicalBytecode:
    """Remove trailing compiler metadata and hash the result.

    Trailers are removed until none is left, which makes the operation idempotent.
    """
    if not data:
        raise EmptyBytecode("cannot canonicalize empty bytecode")
    original_len = len(data)
    body = data
    while True:
        cut = _trailer_len(body)
        if not cut or cut == len(body):
            break
        body = body[:-cut]
    return CanonicalBytecode(bytes(body), canonical_digest(body), original_len, len(body))


def canonicalize(hex_text: str) -> CanonicalBytecode:
    return strip_metadata(normalize(hex_text))


class Instruction(NamedTuple):
    offset: int
    opcode: int
    immediate: bytes = b""
    truncated: bool = False
    size: int = 1  # bytes consumed from the code


def decode(data: bytes) -> list[Instruction]:
    """Linear-sweep disassembly. Truncated PUSH immediates are zero-padded."""
    out = []
    i = 0
    n = len(data)
    while i < n:
        op = data[i]
        k = push_size(op)
        if k:
            imm = data[i + 1:i + 1 + k]
            if len(imm) < k:
                out.append(Instruction(i, op, imm + bytes(k - len(imm)), True, 1 + len(imm)))
            else:
                out.append(Instruction(i, op, imm, False, 1 + k))
            i += 1 + k
        else:
            out.append(Instruction(i, op))
            i += 1
    return out


def skeleton(data: bytes) -> bytes:
    """Bytecode with every PUSH immediate zeroed."""
    out = bytearray(data)
    for ins in decode(data):
        k = push_size(ins.opcode)
        if k:
            start = ins.offset + 1
            out[start:start + k] = bytes(len(out[start:start + k]))
    return bytes(out)


def skeleton_hash(data: bytes) -> str:
    return canonical_digest(skeleton(data)).hex()


@dataclass
class TokenSequence:
    segments: np.ndarray  # (N, L) int64, padding 0
    mask: np.ndarray  # (N,) bool
    truncated: int = 0
    byte_len: int = 0

    @property
    def L(self) -> int:
        return self.segments.shape[1]

    @property
    def N(self) -> int:
        return self.segments.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def segment(code: CanonicalBytecode | bytes, L: int, N: int) -> TokenSequence:
    """Slice bytes into N segments of L tokens; tokens are the byte values, padding is 0."""
    if L < 1 or N < 1:
        raise ValueError("segment geometry must be positive")
    data = code.bytes if isinstance(code, CanonicalBytecode) else code
    cap = L * N
    kept = np.frombuffer(data[:cap], dtype=np.uint8).astype(np.int64)
    tokens = np.zeros(cap, dtype=np.int64)
    tokens[:len(kept)] = kept
    n_valid = min(math.ceil(len(data) / L), N)
    mask = np.zeros(N, dtype=bool)
    mask[:n_valid] = True
    return TokenSequence(tokens.reshape(N, L), mask, max(0, len(data) - cap), len(data))


@dataclass
class TokenBatch:
    tokens: np.ndarray  # (B, N, L)
    mask: np.ndarray  # (B, N)
    byte_len: np.ndarray = field(default=None)

    def __len__(self):
        return self.tokens.shape[0]

    @classmethod
    def stack(cls, seqs: list[TokenSequence]) -> TokenBatch:
        return cls(
            np.stack([s.segments for s in seqs]),
            np.stack([s.mask for s in seqs]),
            np.array([s.byte_len for s in seqs]),
        )
