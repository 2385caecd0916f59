"""Synthetic runtime bytecode and labels for tests, demos and the learnability check.

Contracts are random sequences of single-byte opcodes with planted PUSH4 selectors, so
the byte length and PUSH4 count of every contract are known exactly. Tool-style scores are
an affine function of those two quantities plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import ERC20_SELECTORS, MINIMAL_PROXY_PREFIX, MINIMAL_PROXY_SUFFIX, OWNERSHIP_SELECTORS
from .opcodes import BY_NAME, EXTERNAL_CALL_OPS, PUSH4

# single-byte opcodes without immediates, excluding STOP so padding stays distinguishable
FILLER = np.array(sorted(
    op for op, name in ((op, n) for n, op in BY_NAME.items())
    if not name.startswith("PUSH") and op != 0x00
), dtype=np.uint8)
DUPS = frozenset(range(0x80, 0x90))
SWAPS = frozenset(range(0x90, 0xA0))
JUMPDEST = BY_NAME["JUMPDEST"]

K_FEATURES = 7


@dataclass
class SyntheticContract:
    code: bytes
    push4: int

    @property
    def byte_len(self) -> int:
        return len(self.code)


def make_contract(rng: np.random.Generator, n_bytes: int, n_push4: int, selectors=None) -> SyntheticContract:
    """Random filler opcodes with ``n_push4`` PUSH4 instructions planted at random slots."""
    n_push4 = min(n_push4, n_bytes // 5)
    n_filler = n_bytes - 5 * n_push4
    slots = np.full(n_filler + n_push4, -1)
    slots[rng.choice(len(slots), n_push4, replace=False)] = np.arange(n_push4)
    filler = iter(rng.choice(FILLER, n_filler))
    out = bytearray()
    for s in slots:
        if s < 0:
            out.append(int(next(filler)))
        else:
            sel = selectors[s % len(selectors)] if selectors else rng.integers(0, 256, 4, dtype=np.uint8).tobytes()
            out.append(PUSH4)
            out += sel
    return SyntheticContract(bytes(out), n_push4)


def tool_features(c: SyntheticContract, rng: np.random.Generator) -> np.ndarray:
    ops = np.frombuffer(c.code, dtype=np.uint8)
    # immediates can only be PUSH4 payloads; count opcodes on filler positions only
    is_op = np.ones(len(ops), dtype=bool)
    for i in np.flatnonzero(ops == PUSH4):
        if is_op[i]:
            is_op[i + 1:i + 5] = False
    real = ops[is_op]
    kb = c.byte_len / 1024
    return np.array([
        kb,
        c.push4 / 10,
        np.isin(real, [JUMPDEST]).sum() / 10,
        np.isin(real, list(DUPS)).sum() / 50,
        np.isin(real, list(SWAPS)).sum() / 50,
        np.isin(real, list(EXTERNAL_CALL_OPS)).sum() / 10,
        0.5 * kb + 0.05 * c.push4 + rng.normal(0, 0.01),
    ])


AFFINE = (4.0, 8.0 / 512, 0.25)  # intercept, per byte, per PUSH4


def affine_target(byte_len, push4, coef=AFFINE):
    a, b, c = coef
    return a + b * np.asarray(byte_len, dtype=float) + c * np.asarray(push4, dtype=float)


def learnability_dataset(n: int, seed: int, min_len: int = 64, max_len: int = 512, noise: float = 0.1):
    """Contracts, features and targets; noise std is ``noise`` times the clean-target std."""
    rng = np.random.default_rng(seed)
    lens = rng.integers(min_len, max_len + 1, n)
    push4 = np.array([rng.integers(0, max(1, min(24, ln // 10)) + 1) for ln in lens])
    contracts = [make_contract(rng, int(ln), int(k)) for ln, k in zip(lens, push4)]
    clean = affine_target([c.byte_len for c in contracts], [c.push4 for c in contracts])
    target = clean + rng.normal(0, noise * clean.std(), n)
    feats = np.stack([tool_features(c, rng) for c in contracts])
    return contracts, feats, target


# ---------------------------------------------------------------------------
# multi-chain fixture corpus

def cbor_trailer(rng: np.random.Generator) -> bytes:
    """A solc-style metadata map {"ipfs": <34 bytes>, "solc": <3 bytes>} plus length suffix."""
    body = (b"\xa2" + b"\x64ipfs" + b"\x58\x22" + rng.integers(0, 256, 34, dtype=np.uint8).tobytes()
            + b"\x64solc" + b"\x43" + bytes([0, 8, 19]))
    return body + len(body).to_bytes(2, "big")


def minimal_proxy(impl: bytes) -> bytes:
    return MINIMAL_PROXY_PREFIX + impl + MINIMAL_PROXY_SUFFIX


def _address(rng) -> str:
    return "0x" + rng.integers(0, 256, 20, dtype=np.uint8).tobytes().hex()


CHAINS = ("ethereum", "bsc", "polygon")


def make_fixture(out: Path, seed: int = 7, n_per_chain: int = 240, chains=CHAINS) -> dict:
    """Write corpus, label and incident files for a small multi-chain pipeline run.

    Returns the config dict that points the pipeline at them (also written as config.json).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rare = [rng.integers(0, 256, 4, dtype=np.uint8).tobytes() for _ in range(6)]
    shared_pool = []  # templates deployed on several chains
    for _ in range(12):
        ln = int(rng.integers(300, 512))
        shared_pool.append(make_contract(rng, ln, int(rng.integers(1, 4)), selectors=rare))
    labels, incidents = [], []
    paths = {}
    for ci, chain in enumerate(chains):
        rows = []
        for i in range(n_per_chain):
            kind = rng.random()
            if kind < 0.05:
                code = minimal_proxy(rng.integers(0, 256, 20, dtype=np.uint8).tobytes())
                push4 = 0
            elif kind < 0.12:
                c = make_contract(rng, int(rng.integers(200, 500)), 7,
                                  selectors=sorted(ERC20_SELECTORS | OWNERSHIP_SELECTORS))
                code, push4 = c.code, c.push4
            else:
                c = make_contract(rng, int(rng.integers(40, 512)), int(rng.integers(0, 20)))
                code, push4 = c.code, c.push4
            if rng.random() < 0.5:
                code = code + cbor_trailer(rng)
            rows.append({"chain": chain, "address": _address(rng), "bytecode_hex": "0x" + code.hex()})
        for j, tpl in enumerate(shared_pool):
            if (j + ci) % 3 == 2:
                continue
            addr = f"0x{'%02x' % (j + 1) * 20}" if j < 3 else _address(rng)
            rows.append({"chain": chain, "address": addr, "bytecode_hex": "0x" + (tpl.code + cbor_trailer(rng)).hex()})
        # same bytecode, two addresses
        dup = rows[3]["bytecode_hex"]
        rows.append({"chain": chain, "address": _address(rng), "bytecode_hex": dup.upper().replace("0X", "0x")})
        rows.append({"chain": chain, "address": _address(rng), "bytecode_hex": "0xzz12"})
        if chain == chains[0]:
            label_rng = np.random.default_rng(seed + 100)
            for r in rows:
                try:
                    code = bytes.fromhex(r["bytecode_hex"][2:])
                except ValueError:
                    continue
                sc = SyntheticContract(code, code.count(bytes([PUSH4])))
                F = tool_features(sc, label_rng)
                s = float(affine_target(len(code), sc.push4) + label_rng.normal(0, 0.2))
                labels.append({"address": r["address"], "s_tool": s} | {f"f{k + 1}": float(v) for k, v in enumerate(F)})
        else:
            incidents.append(("Fixture incident " + chain, chain, "direct", [rows[10]["address"]]))
            incidents.append(("Fixture incident " + chain, chain, "tx_resolved",
                              [rows[11]["address"].upper().replace("0X", "0x"), _address(rng)]))
        p = out / f"corpus_{chain}.jsonl"
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        paths[chain] = p.name
    (out / "labels.jsonl").write_text("".join(json.dumps(r) + "\n" for r in labels))
    (out / "incidents.tsv").write_text(
        "# name\tchain\tevidence\taddresses\n"
        + "".join(f"{n}\t{c}\t{e}\t{','.join(a)}\n" for n, c, e, a in incidents)
    )
    config = {
        "seed": seed,
        "preset": "desk",
        "train_chain": chains[0],
        "corpora": paths,
        "labels": "labels.jsonl",
        "incidents": "incidents.tsv",
        "model": {"epochs": 3, "L": 32, "N": 16},
        "lift": {"min_count": 2},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return config
