"""Tail enrichment: selector and opcode lift, label shares in the tail vs overall."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .errors import EmptyInput, EmptyTail
from .features import StructuralFeatures
from .opcodes import mnemonic

DEFAULT_EPS = 1e-9
DEFAULT_MIN_COUNT = 5


@dataclass
class LiftRow:
    kind: str
    pattern: int | bytes
    tail_count: int
    all_count: int
    tail_freq: float
    all_freq: float
    lift: float

    @property
    def label(self) -> str:
        if self.kind == "selector":
            return "0x" + self.pattern.hex()
        return mnemonic(self.pattern)

    def to_csv_row(self) -> dict:
        return {
            "kind": self.kind,
            "pattern": self.label,
            "tail_count": self.tail_count,
            "all_count": self.all_count,
            "lift": f"{self.lift:.6f}",
        }


def _selector_counts(contracts: list[StructuralFeatures]) -> Counter:
    c: Counter = Counter()
    for f in contracts:
        c.update(f.selectors)
    return c


def _opcode_counts(contracts: list[StructuralFeatures]) -> Counter:
    c: Counter = Counter()
    for f in contracts:
        c.update(f.opcode_hist)
    return c


def lift_table(tail: list[StructuralFeatures], everything: list[StructuralFeatures], kind: str,
               eps: float = DEFAULT_EPS, min_count: int = DEFAULT_MIN_COUNT) -> list[LiftRow]:
    """Lift of each pattern, tail frequency over smoothed overall frequency.

    Selectors use per-contract presence; opcodes use their share of all opcode occurrences.
    Rows with fewer than ``min_count`` tail occurrences are dropped; the rest sort by lift.
    """
    if not tail:
        raise EmptyTail("tail set is empty")
    if not everything:
        raise EmptyInput("reference set is empty")
    if kind == "selector":
        tc, ac = _selector_counts(tail), _selector_counts(everything)
        tdenom, adenom = len(tail), len(everything)
    elif kind == "opcode":
        tc, ac = _opcode_counts(tail), _opcode_counts(everything)
        tdenom, adenom = sum(tc.values()), sum(ac.values())
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    rows = []
    for pat, t in tc.items():
        if t < min_count:
            continue
        tf = t / tdenom
        af = ac[pat] / adenom
        rows.append(LiftRow(kind, pat, t, ac[pat], tf, af, tf / (af + eps)))
    rows.sort(key=lambda r: (-r.lift, r.label))
    return rows


def frequencies(contracts: list[StructuralFeatures], kind: str) -> dict:
    if kind == "selector":
        c, d = _selector_counts(contracts), len(contracts)
    else:
        c = _opcode_counts(contracts)
        d = sum(c.values())
    return {k: v / d for k, v in c.items()}


def selector_lifts(tail, everything, eps: float = DEFAULT_EPS) -> dict[bytes, float]:
    """Unfiltered selector lift lookup used for secondary ranking."""
    return {r.pattern: r.lift for r in lift_table(tail, everything, "selector", eps, min_count=1)}


def _share(contracts, flag) -> float:
    return 100.0 * sum(bool(getattr(f, flag)) for f in contracts) / len(contracts) if contracts else 0.0


def tail_label_shares(tail: list[StructuralFeatures], everything: list[StructuralFeatures]) -> dict:
    """Percentages of ERC20, ERC721, proxy and minimal-proxy flags, overall vs tail."""
    return {
        flag: {"overall": _share(everything, flag), "tail": _share(tail, flag)}
        for flag in ("erc20", "erc721", "proxy", "minimal_proxy")
    } | {"n_overall": len(everything), "n_tail": len(tail)}
