"""Structural heuristics per contract: selectors, density, ERC/proxy labels, opcode counts."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from Crypto.Hash import keccak

from .bytecode import CanonicalBytecode, Instruction, decode
from .errors import EmptyBytecode, EmptyInput
from .metrics import pcc
from .opcodes import DELEGATECALL, PUSH4, RETURNDATACOPY, mnemonic

DEFAULT_TPROXY = 4


def selector(signature: str) -> bytes:
    """First four bytes of keccak-256 over the canonical signature string."""
    h = keccak.new(digest_bits=256)
    h.update(signature.encode())
    return h.digest()[:4]


ERC20_SIGNATURES = (
    "totalSupply()",
    "balanceOf(address)",
    "transfer(address,uint256)",
    "approve(address,uint256)",
    "transferFrom(address,address,uint256)",
)
ERC721_SIGNATURES = (
    "balanceOf(address)",
    "ownerOf(uint256)",
    "approve(address,uint256)",
    "setApprovalForAll(address,bool)",
    "transferFrom(address,address,uint256)",
)
ERC721_SAFE_TRANSFER = (
    "safeTransferFrom(address,address,uint256)",
    "safeTransferFrom(address,address,uint256,bytes)",
)
OWNERSHIP_SIGNATURES = ("owner()", "transferOwnership(address)")

ERC20_SELECTORS = frozenset(selector(s) for s in ERC20_SIGNATURES)
ERC721_SELECTORS = frozenset(selector(s) for s in ERC721_SIGNATURES)
ERC721_SAFE_SELECTORS = frozenset(selector(s) for s in ERC721_SAFE_TRANSFER)
OWNERSHIP_SELECTORS = frozenset(selector(s) for s in OWNERSHIP_SIGNATURES)

# EIP-1167 runtime: prefix, 20-byte implementation address, suffix
MINIMAL_PROXY_PREFIX = bytes.fromhex("363d3d373d3d3d363d73")
MINIMAL_PROXY_SUFFIX = bytes.fromhex("5af43d82803e903d91602b57fd5bf3")


def extract_selectors(stream: list[Instruction]) -> frozenset[bytes]:
    return frozenset(
        ins.immediate for ins in stream if ins.opcode == PUSH4 and not ins.truncated
    )


def signature_density(selector_count: int, byte_len: int) -> float:
    """Unique selectors per KB (1024 bytes) of stripped runtime code."""
    if byte_len <= 0:
        raise EmptyBytecode("signature density needs a non-empty contract")
    return selector_count / (byte_len / 1024)


def classify_erc(selectors) -> tuple[bool, bool]:
    sel = set(selectors)
    erc20 = ERC20_SELECTORS <= sel
    erc721 = ERC721_SELECTORS <= sel and not ERC721_SAFE_SELECTORS.isdisjoint(sel)
    return erc20, erc721


def is_minimal_proxy(code: bytes) -> bool:
    return (
        len(code) == 45
        and code.startswith(MINIMAL_PROXY_PREFIX)
        and code.endswith(MINIMAL_PROXY_SUFFIX)
    )


def proxy_indicator(
    stream: list[Instruction], selectors, tproxy: int = DEFAULT_TPROXY, code: bytes | None = None
) -> tuple[bool, bool]:
    """Return ``(proxy, minimal)``.

    ``proxy`` needs DELEGATECALL, RETURNDATACOPY and at most ``tproxy`` selectors.
    ``minimal`` is the strict EIP-1167 template match and needs the raw ``code``.
    """
    ops = {ins.opcode for ins in stream}
    proxy = DELEGATECALL in ops and RETURNDATACOPY in ops and len(selectors) <= tproxy
    minimal = code is not None and is_minimal_proxy(code)
    return proxy, minimal


def opcode_histogram(stream: list[Instruction]) -> dict[int, int]:
    return dict(Counter(ins.opcode for ins in stream))


@dataclass
class StructuralFeatures:
    canonical_hash: str
    byte_len: int
    selectors: frozenset[bytes]
    erc20: bool
    erc721: bool
    proxy: bool
    minimal_proxy: bool
    opcode_hist: dict[int, int] = field(default_factory=dict)

    @property
    def selector_count(self) -> int:
        return len(self.selectors)

    @property
    def signature_density(self) -> float:
        return signature_density(self.selector_count, self.byte_len)

    @property
    def has_ownership(self) -> bool:
        return not OWNERSHIP_SELECTORS.isdisjoint(self.selectors)

    def to_row(self) -> dict:
        return {
            "canonical_hash": self.canonical_hash,
            "byte_len": self.byte_len,
            "selectors": sorted(s.hex() for s in self.selectors),
            "selector_count": self.selector_count,
            "signature_density": self.signature_density,
            "erc20": self.erc20,
            "erc721": self.erc721,
            "proxy": self.proxy,
            "minimal_proxy": self.minimal_proxy,
            "opcode_hist": {mnemonic(op): n for op, n in sorted(self.opcode_hist.items())},
        }

    @classmethod
    def from_row(cls, row: dict) -> StructuralFeatures:
        from .opcodes import BY_NAME

        def op_of(name):
            return BY_NAME[name] if name in BY_NAME else int(name.rsplit("0x", 1)[1], 16)

        return cls(
            row["canonical_hash"],
            row["byte_len"],
            frozenset(bytes.fromhex(s) for s in row["selectors"]),
            row["erc20"],
            row["erc721"],
            row["proxy"],
            row["minimal_proxy"],
            {op_of(k): v for k, v in row["opcode_hist"].items()},
        )


def extract_features(code: CanonicalBytecode, tproxy: int = DEFAULT_TPROXY) -> StructuralFeatures:
    if not code.bytes:
        raise EmptyBytecode("empty contract after metadata stripping")
    stream = decode(code.bytes)
    sels = extract_selectors(stream)
    erc20, erc721 = classify_erc(sels)
    proxy, minimal = proxy_indicator(stream, sels, tproxy, code.bytes)
    return StructuralFeatures(
        code.hash_hex, code.stripped_len, sels, erc20, erc721, proxy, minimal,
        opcode_histogram(stream),
    )


# reference bands observed at corpus scale; for report context only
REFERENCE_CORRELATION_BANDS = {"byte_len": (0.46, 0.72), "selector_count": (0.10, 0.27)}
REFERENCE_TAIL_DENSITY = 0.25


def sanity_correlations(scores, features: list[StructuralFeatures]) -> dict:
    if len(scores) < 2 or len(scores) != len(features):
        raise EmptyInput("need at least two scored contracts with features")
    out = {}
    for name, values in (
        ("byte_len", [f.byte_len for f in features]),
        ("selector_count", [f.selector_count for f in features]),
    ):
        out[name] = {"pcc": pcc(list(scores), values), "reference_band": list(REFERENCE_CORRELATION_BANDS[name])}
    return out
