"""Localize known incident addresses within their chain's score distribution."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import UnknownChain, ValidationError
from .triage import QueueSpec, ScoreRecord, percentile_rank, queue_spec

EVIDENCE_TYPES = ("direct", "tx_resolved")


@dataclass
class IncidentRecord:
    name: str
    chain: str
    evidence: str
    addresses: list[str]
    note: str = ""


def parse_incidents(text: str) -> list[IncidentRecord]:
    """Tab-separated lines: name, chain, evidence, comma-separated addresses[, note].

    Blank lines and ``#`` comments are skipped.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 4:
            raise ValidationError(f"incident line {lineno}: expected 4 tab-separated fields")
        name, chain, evidence, addrs = (p.strip() for p in parts[:4])
        if evidence not in EVIDENCE_TYPES:
            raise ValidationError(f"incident line {lineno}: unknown evidence {evidence!r}")
        addresses = [a.strip() for a in addrs.split(",") if a.strip()]
        if not addresses:
            raise ValidationError(f"incident line {lineno}: no address")
        out.append(IncidentRecord(name, chain, evidence, addresses, parts[4].strip() if len(parts) > 4 else ""))
    return out


@dataclass
class AlignmentResult:
    incident: str
    chain: str
    evidence: str
    address: str
    canonical_hash: str
    score: float
    percentile: float
    in_p99: bool
    in_p999: bool


def align(incidents: list[IncidentRecord], records: list[ScoreRecord],
          address_index: dict | None = None, specs: dict[str, QueueSpec] | None = None):
    """Match incident addresses (case-insensitive) against scored corpora.

    ``address_index`` maps ``(chain, address_lower)`` to a canonical hash; if omitted it is
    built from the records' own addresses. Returns ``(results, unmatched)`` where
    ``unmatched`` lists ``(incident, chain, address)``.
    """
    by_chain: dict[str, dict[str, ScoreRecord]] = {}
    for r in records:
        by_chain.setdefault(r.chain, {})[r.canonical_hash] = r
    if address_index is None:
        address_index = {(r.chain, r.address.lower()): r.canonical_hash for r in records}
    sorted_scores = {c: np.sort([r.score for r in recs.values()]) for c, recs in by_chain.items()}
    specs = dict(specs or {})
    results, unmatched, seen = [], [], set()
    for inc in incidents:
        if inc.chain not in by_chain:
            raise UnknownChain(f"incident {inc.name!r} names chain {inc.chain!r} with no scored corpus")
        spec = specs.get(inc.chain)
        if spec is None:
            spec = specs[inc.chain] = queue_spec(inc.chain, sorted_scores[inc.chain])
        for addr in inc.addresses:
            key = (inc.name, inc.evidence, addr.lower(), inc.chain)
            if key in seen:
                continue
            seen.add(key)
            h = address_index.get((inc.chain, addr.lower()))
            if h is None or h not in by_chain[inc.chain]:
                unmatched.append((inc.name, inc.chain, addr))
                continue
            r = by_chain[inc.chain][h]
            results.append(AlignmentResult(
                inc.name, inc.chain, inc.evidence, addr.lower(), h, r.score,
                percentile_rank(sorted_scores[inc.chain], r.score),
                r.score >= spec.main_cutoff, r.score >= spec.emergency_cutoff,
            ))
    return results, unmatched


ALIGNMENT_FIELDS = ["incident", "chain", "evidence", "address", "canonical_hash", "score",
                    "percentile", "in_p99", "in_p999"]


def alignment_report(results: list[AlignmentResult]) -> str:
    """CSV with one row per (incident, evidence, address); header always present."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, ALIGNMENT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in sorted(results, key=lambda r: (r.incident, r.evidence, r.chain, r.address)):
        w.writerow({
            "incident": r.incident, "chain": r.chain, "evidence": r.evidence,
            "address": r.address, "canonical_hash": r.canonical_hash,
            "score": f"{r.score:.6f}", "percentile": f"p{r.percentile:.2f}",
            "in_p99": "yes" if r.in_p99 else "no", "in_p999": "yes" if r.in_p999 else "no",
        })
    return buf.getvalue()
