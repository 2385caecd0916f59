"""Within-chain percentile cutoffs, two-tier audit queues, threshold transfer and re-ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput
from .opcodes import EXTERNAL_CALL_OPS

MAIN_P = 99.0
EMERGENCY_P = 99.9
WATCH_BAND = (95.0, 99.0)
DEFAULT_REVIEWER_RATE = 50.0

# corpus-scale cutoffs (main p99, emergency p99.9); shipped for reference, never asserted
REFERENCE_CUTOFFS = {
    "ethereum": (18.07, 22.69),
    "bsc": (16.82, 19.74),
    "polygon": (18.72, 20.51),
    "avalanche": (19.18, 20.67),
}


def quantile(scores, p: float) -> float:
    """Linear interpolation between order statistics at zero-based rank (n-1)*p/100.

    Every percentile in the toolkit (queue cutoffs, error percentiles) goes through here.
    """
    x = np.asarray(scores, dtype=float)
    if x.size == 0:
        raise EmptyInput("quantile of an empty sample")
    if not 0 < p < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {p}")
    return float(np.percentile(x, p, method="linear"))


def percentile_rank(sorted_scores: np.ndarray, s: float) -> float:
    """Share of the sample strictly below ``s`` with ties counted at half weight, in %."""
    n = len(sorted_scores)
    below = np.searchsorted(sorted_scores, s, side="left")
    upto = np.searchsorted(sorted_scores, s, side="right")
    return 100.0 * (below + 0.5 * (upto - below)) / n


@dataclass(frozen=True)
class ScoreRecord:
    chain: str
    address: str
    canonical_hash: str
    score: float
    source: str = "model"


@dataclass
class QueueSpec:
    chain: str
    n: int
    main_cutoff: float
    emergency_cutoff: float
    watch_lo: float
    main_p: float = MAIN_P
    emergency_p: float = EMERGENCY_P
    watch_band: tuple[float, float] = WATCH_BAND
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "chain": self.chain,
            "n": self.n,
            "main_p": self.main_p,
            "emergency_p": self.emergency_p,
            "watch_band": list(self.watch_band),
            "main_cutoff": self.main_cutoff,
            "emergency_cutoff": self.emergency_cutoff,
            "watch_cutoff": self.watch_lo,
            "degenerate": self.degenerate,
        }


@dataclass
class QueueEntry:
    record: ScoreRecord
    percentile: float
    tier: str
    priority: float | None = None
    flags: list[str] = field(default_factory=list)


@dataclass
class TriageQueues:
    spec: QueueSpec
    main: list[QueueEntry]
    emergency: list[QueueEntry]
    watch: list[QueueEntry]


def _ties_at(x: np.ndarray, cutoff: float) -> int:
    return int(np.count_nonzero(x == cutoff))


def queue_spec(chain: str, scores, main_p=MAIN_P, emergency_p=EMERGENCY_P, watch_band=WATCH_BAND) -> QueueSpec:
    x = np.asarray(scores, dtype=float)
    main = quantile(x, main_p)
    emergency = quantile(x, emergency_p)
    degenerate = _ties_at(x, main) > 1 or _ties_at(x, emergency) > 1
    return QueueSpec(
        chain, len(x), main, emergency, quantile(x, watch_band[0]),
        main_p, emergency_p, tuple(watch_band), degenerate,
    )


def _order(records: list[ScoreRecord]) -> list[ScoreRecord]:
    return sorted(records, key=lambda r: (-r.score, r.canonical_hash))


def build_queues(records: list[ScoreRecord], spec: QueueSpec | None = None, **kw) -> TriageQueues:
    """Main (>= p99), emergency (>= p99.9, nested in main) and watch (p95 <= s < p99) queues."""
    if not records:
        raise EmptyInput("cannot build queues over an empty corpus")
    chain = records[0].chain
    x = np.array([r.score for r in records], dtype=float)
    spec = spec or queue_spec(chain, x, **kw)
    sorted_x = np.sort(x)
    main, emergency, watch = [], [], []
    for r in _order(records):
        pct = percentile_rank(sorted_x, r.score)
        flags = ["DegenerateDistribution"] if spec.degenerate else []
        if r.score >= spec.main_cutoff:
            tier = "emergency" if r.score >= spec.emergency_cutoff else "main"
            entry = QueueEntry(r, pct, tier, flags=flags)
            main.append(entry)
            if tier == "emergency":
                emergency.append(entry)
        elif r.score >= spec.watch_lo:
            watch.append(QueueEntry(r, pct, "watch", flags=flags))
    return TriageQueues(spec, main, emergency, watch)


def tier_of(score: float, spec: QueueSpec) -> str | None:
    if score >= spec.emergency_cutoff:
        return "emergency"
    if score >= spec.main_cutoff:
        return "main"
    if score >= spec.watch_lo:
        return "watch"
    return None


@dataclass
class TransferRow:
    source_chain: str
    target_chain: str
    cutoff: float
    n: int
    tail_count: int
    tail_share: float  # percent
    own_cutoff: float
    own_count: int
    delta_n: int
    delta_days: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def transfer_tail_share(
    target_scores, cutoff: float, *, source_chain: str = "", target_chain: str = "",
    main_p: float = MAIN_P, reviewer_rate: float = DEFAULT_REVIEWER_RATE,
) -> TransferRow:
    """Queue size on the target chain when a foreign absolute cutoff is applied."""
    x = np.asarray(target_scores, dtype=float)
    if x.size == 0:
        raise EmptyInput("target corpus is empty")
    count = int(np.count_nonzero(x >= cutoff))
    own = quantile(x, main_p)
    own_count = int(np.count_nonzero(x >= own))
    delta = count - own_count
    return TransferRow(
        source_chain, target_chain, float(cutoff), int(x.size), count, 100.0 * count / x.size,
        own, own_count, delta, delta / reviewer_rate,
    )


def transfer_matrix(scores_by_chain: dict, main_p: float = MAIN_P,
                    reviewer_rate: float = DEFAULT_REVIEWER_RATE) -> list[TransferRow]:
    rows = []
    for src in sorted(scores_by_chain):
        cutoff = quantile(scores_by_chain[src], main_p)
        for dst in sorted(scores_by_chain):
            rows.append(transfer_tail_share(
                scores_by_chain[dst], cutoff, source_chain=src, target_chain=dst,
                main_p=main_p, reviewer_rate=reviewer_rate,
            ))
    return rows


@dataclass
class SecondaryWeights:
    """Composite priority weights. Heuristic defaults, not calibrated."""

    low_density: float = 1.0
    selector_lift: float = 1.0
    external_calls: float = 1.0
    reuse: float = 1.0
    sparse_ownership: float = 1.0
    proxy: float = 1.0
    lift_cap: float = 50.0
    external_cap: float = 5.0
    sparse_selector_max: int = 8


def _density_percentiles(features_by_hash: dict) -> dict[str, float]:
    dens = {h: f.signature_density for h, f in features_by_hash.items()}
    ordered = np.sort(np.fromiter(dens.values(), dtype=float))
    return {h: percentile_rank(ordered, d) / 100.0 for h, d in dens.items()}


def _external_share(hist: dict[int, int]) -> float:
    total = sum(hist.values())
    return sum(n for op, n in hist.items() if op in EXTERNAL_CALL_OPS) / total if total else 0.0


def priority_components(feat, density_pct: float, selector_lift: dict[bytes, float],
                        corpus_external_share: float, in_cluster: bool,
                        w: SecondaryWeights) -> dict[str, float]:
    lifts = [min(selector_lift.get(s, 0.0), w.lift_cap) for s in feat.selectors]
    ext = _external_share(feat.opcode_hist) / (corpus_external_share + 1e-9)
    return {
        "low_density": 1.0 - density_pct,
        "selector_lift": (sum(lifts) / len(lifts) / w.lift_cap) if lifts else 0.0,
        "external_calls": min(ext, w.external_cap) / w.external_cap,
        "reuse": 1.0 if in_cluster else 0.0,
        "sparse_ownership": 1.0 if feat.has_ownership and feat.selector_count <= w.sparse_selector_max else 0.0,
        "proxy": 1.0 if feat.proxy else 0.0,
    }


def secondary_rank(queue: list[QueueEntry], features_by_hash: dict, selector_lift: dict[bytes, float],
                   cluster_hashes=frozenset(), weights: SecondaryWeights | None = None) -> list[QueueEntry]:
    """Re-rank a queue by structural cues; entries without features go last, flagged."""
    w = weights or SecondaryWeights()
    dens_pct = _density_percentiles(features_by_hash) if features_by_hash else {}
    hists = [f.opcode_hist for f in features_by_hash.values()]
    tot = sum(sum(h.values()) for h in hists)
    ext_all = sum(n for h in hists for op, n in h.items() if op in EXTERNAL_CALL_OPS) / tot if tot else 0.0
    scored, missing = [], []
    for e in queue:
        feat = features_by_hash.get(e.record.canonical_hash)
        if feat is None:
            e.priority = None
            if "MissingFeature" not in e.flags:
                e.flags.append("MissingFeature")
            missing.append(e)
            continue
        comp = priority_components(
            feat, dens_pct[e.record.canonical_hash], selector_lift, ext_all,
            e.record.canonical_hash in cluster_hashes, w,
        )
        e.priority = sum(getattr(w, k) * v for k, v in comp.items())
        scored.append(e)
    scored.sort(key=lambda e: -e.priority)
    return scored + missing


QUEUE_CSV_FIELDS = ["chain", "address", "canonical_hash", "score", "within_chain_percentile",
                    "tier", "priority", "flags"]


def queue_rows(entries: list[QueueEntry]) -> list[dict]:
    rows = []
    for e in entries:
        rows.append({
            "chain": e.record.chain,
            "address": e.record.address,
            "canonical_hash": e.record.canonical_hash,
            "score": f"{e.record.score:.6f}",
            "within_chain_percentile": f"{e.percentile:.4f}",
            "tier": e.tier,
            "priority": "" if e.priority is None else f"{e.priority:.6f}",
            "flags": ";".join(e.flags),
        })
    return rows


def expected_queue_size(n: int, p: float) -> int:
    return math.ceil(n * (100.0 - p) / 100.0)
