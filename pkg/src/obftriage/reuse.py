"""Cross-chain bytecode reuse: set overlaps over canonical hashes and reuse clusters."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import EmptySet
from .triage import MAIN_P, ScoreRecord, quantile


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def overlap_coeff(a, b) -> float:
    a, b = set(a), set(b)
    small = min(len(a), len(b))
    return len(a & b) / small if small else 0.0


def directional_overlap(a, b) -> float:
    """Share of ``a`` that also appears in ``b``."""
    a = set(a)
    if not a:
        raise EmptySet("directional overlap from an empty set")
    return len(a & set(b)) / len(a)


@dataclass
class PairOverlap:
    chain_a: str
    chain_b: str
    size_a: int
    size_b: int
    intersection: int
    jaccard: float
    overlap_coeff: float
    a_to_b: float | None
    b_to_a: float | None
    empty: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pair_overlap(chain_a: str, a: set, chain_b: str, b: set) -> PairOverlap:
    return PairOverlap(
        chain_a, chain_b, len(a), len(b), len(a & b), jaccard(a, b), overlap_coeff(a, b),
        directional_overlap(a, b) if a else None,
        directional_overlap(b, a) if b else None,
        empty=not a and not b,
    )


def chain_hash_sets(records: list[ScoreRecord]) -> dict[str, set[str]]:
    sets: dict[str, set[str]] = defaultdict(set)
    for r in records:
        sets[r.chain].add(r.canonical_hash)
    return dict(sets)


def tail_hash_sets(records: list[ScoreRecord], main_p: float = MAIN_P) -> dict[str, set[str]]:
    by_chain: dict[str, list[ScoreRecord]] = defaultdict(list)
    for r in records:
        by_chain[r.chain].append(r)
    out = {}
    for chain, recs in by_chain.items():
        cut = quantile([r.score for r in recs], main_p)
        out[chain] = {r.canonical_hash for r in recs if r.score >= cut}
    return out


def overlap_table(sets: dict[str, set[str]]) -> list[PairOverlap]:
    return [pair_overlap(a, sets[a], b, sets[b]) for a, b in combinations(sorted(sets), 2)]


def tail_jaccard(records: list[ScoreRecord], main_p: float = MAIN_P) -> dict[str, dict[str, float]]:
    """Pairwise Jaccard between per-chain top-tail hash sets."""
    tails = tail_hash_sets(records, main_p)
    chains = sorted(tails)
    return {a: {b: jaccard(tails[a], tails[b]) for b in chains} for a in chains}


@dataclass
class ReuseCluster:
    canonical_hash: str
    members: list[tuple[str, str]]
    chain_coverage: int
    mean_score: float
    max_score: float
    identical_address: bool = False
    shared_addresses: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "hash": self.canonical_hash,
            "members": [{"chain": c, "address": a} for c, a in self.members],
            "chain_coverage": self.chain_coverage,
            "mean_score": self.mean_score,
            "max_score": self.max_score,
            "identical_address": self.identical_address,
            "shared_addresses": self.shared_addresses,
        }


def reuse_clusters(records: list[ScoreRecord], addresses: dict | None = None) -> tuple[list[ReuseCluster], dict[int, int]]:
    """Group scored contracts by canonical hash and keep those seen on two or more chains.

    ``addresses`` optionally maps ``(chain, hash)`` to every deployment address; by default
    each record contributes its own address. Mean/max are taken over per-chain scores.
    Returns the clusters (sorted by mean score, descending) and a coverage histogram.
    """
    groups: dict[str, dict[str, ScoreRecord]] = defaultdict(dict)
    for r in records:
        groups[r.canonical_hash].setdefault(r.chain, r)
    clusters = []
    for h, per_chain in groups.items():
        if len(per_chain) < 2:
            continue
        members = []
        for chain in sorted(per_chain):
            addrs = (addresses or {}).get((chain, h)) or [per_chain[chain].address]
            members.extend((chain, a.lower()) for a in sorted(addrs))
        seen: dict[str, set] = defaultdict(set)
        for chain, a in members:
            seen[a].add(chain)
        shared = sorted(a for a, cs in seen.items() if len(cs) > 1)
        scores = np.array([per_chain[c].score for c in sorted(per_chain)])
        clusters.append(ReuseCluster(
            h, members, len(per_chain), float(scores.mean()), float(scores.max()), bool(shared), shared,
        ))
    clusters.sort(key=lambda c: (-c.mean_score, c.canonical_hash))
    hist: dict[int, int] = defaultdict(int)
    for c in clusters:
        hist[c.chain_coverage] += 1
    return clusters, dict(sorted(hist.items()))


def coverage_score_stats(clusters: list[ReuseCluster]) -> dict[int, dict]:
    """Mean of cluster mean-scores per chain coverage level. Reported, not interpreted."""
    by_cov: dict[int, list[float]] = defaultdict(list)
    for c in clusters:
        by_cov[c.chain_coverage].append(c.mean_score)
    return {k: {"clusters": len(v), "mean_of_mean_score": float(np.mean(v)), "max": float(np.max(v))}
            for k, v in sorted(by_cov.items())}
