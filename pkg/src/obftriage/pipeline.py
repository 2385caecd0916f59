"""Corpus store, dataset splitting and stage orchestration.

A run directory holds one sub-directory per stage. Every stage reads the artifacts of the
stages it depends on and raises ``StageDependencyError`` naming the first missing one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import enrichment, incidents, metrics, reuse, triage
from .bytecode import HASH_ALGORITHM, CanonicalBytecode, canonicalize, segment, skeleton_hash
from .errors import (AbortThresholdExceeded, CorrelationUndefined, IoError, StageDependencyError,
                     ValidationError)
from .features import DEFAULT_TPROXY, StructuralFeatures, extract_features, sanity_correlations
from .model import ModelConfig, preset
from .training import LabeledSet, load_checkpoint, predict, save_checkpoint, score_unique, train_loop

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ABORT_FRACTION = 0.5
FAMILY_POLICY = "exact-skeleton"
_ADDRESS = re.compile(r"^0x[0-9a-fA-F]{40}$")

STAGES = ("ingest", "extract", "train", "score", "queues", "transfer", "enrich", "reuse", "align", "report")
BUNDLE = ("queues.csv", "transfer.csv", "lift_selectors.csv", "lift_opcodes.csv", "label_shares.json",
          "reuse_overlap.json", "clusters.json", "alignment.csv", "eval.json", "run_manifest.json")


# ---------------------------------------------------------------------------
# corpus store

@dataclass
class StoredContract:
    canonical_hash: str
    bytecode_hex: str
    original_len: int
    stripped_len: int
    skeleton: str
    addresses: list[str] = field(default_factory=list)

    @property
    def code(self) -> bytes:
        return bytes.fromhex(self.bytecode_hex)

    @property
    def address(self) -> str:
        """Representative address (lowest)."""
        return self.addresses[0]


@dataclass
class IngestStats:
    chain: str
    rows: int = 0
    malformed: int = 0
    stored: int = 0
    addresses: int = 0
    stripped: int = 0
    errors: dict[str, int] = field(default_factory=dict)


def store_path(out: Path, chain: str) -> Path:
    return Path(out) / "store" / f"{chain}.jsonl"


def load_store(out: Path, chain: str) -> dict[str, StoredContract]:
    p = store_path(out, chain)
    if not p.exists():
        return {}
    contracts = {}
    for line in p.read_text().splitlines():
        row = json.loads(line)
        contracts[row["canonical_hash"]] = StoredContract(**row)
    return contracts


def write_store(out: Path, chain: str, contracts: dict[str, StoredContract]):
    p = store_path(out, chain)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        for h in sorted(contracts):
            fh.write(json.dumps(contracts[h].__dict__, sort_keys=True) + "\n")


def stored_chains(out: Path) -> list[str]:
    d = Path(out) / "store"
    return sorted(p.stem for p in d.glob("*.jsonl")) if d.exists() else []


def _parse_row(line: str, chain: str):
    row = json.loads(line)
    if not isinstance(row, dict):
        raise ValidationError("record is not an object")
    if row.get("chain", chain) != chain:
        raise ValidationError(f"record chain {row.get('chain')!r} differs from {chain!r}")
    addr = str(row.get("address", ""))
    if not _ADDRESS.match(addr):
        raise ValidationError(f"malformed address {addr!r}")
    return addr.lower(), canonicalize(str(row.get("bytecode_hex", "")))


def ingest(path, chain: str, out: Path) -> IngestStats:
    """Normalize, strip, hash and deduplicate a line-delimited corpus file into the store."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read corpus {path}: {e}") from e
    contracts = load_store(out, chain)
    stats = IngestStats(chain)
    errors: dict[str, int] = defaultdict(int)
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        stats.rows += 1
        try:
            addr, code = _parse_row(line, chain)
        except (json.JSONDecodeError, ValidationError) as e:
            stats.malformed += 1
            errors[type(e).__name__] += 1
            log.warning("%s:%d skipped: %s", path, lineno, e)
            continue
        h = code.hash_hex
        entry = contracts.get(h)
        if entry is None:
            entry = contracts[h] = StoredContract(h, code.bytes.hex(), code.original_len, code.stripped_len,
                                                  skeleton_hash(code.bytes))
        if addr not in entry.addresses:
            entry.addresses = sorted(entry.addresses + [addr])
    if stats.rows and stats.malformed / stats.rows > ABORT_FRACTION:
        raise AbortThresholdExceeded(f"{stats.malformed}/{stats.rows} rows malformed in {path}")
    stats.stored = len(contracts)
    stats.addresses = sum(len(c.addresses) for c in contracts.values())
    stats.stripped = sum(c.stripped_len < c.original_len for c in contracts.values())
    stats.errors = dict(errors)
    write_store(out, chain, contracts)
    return stats


# ---------------------------------------------------------------------------
# family split

SPLITS = ("train", "val", "test")


def _largest_remainder(total: int, ratios) -> list[int]:
    weights = np.asarray(ratios, dtype=float) / sum(ratios)
    raw = weights * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def family_split(families: dict[str, str], ratios=(7, 2, 1), seed: int = 0) -> dict[str, str]:
    """Assign each member to a split; ``families`` maps member key to family fingerprint.

    Families are shuffled with ``seed`` and dealt out so split sizes match ``ratios`` by
    family count; every member of a family lands in the same split.
    """
    fams = sorted(set(families.values()))
    order = np.random.default_rng(seed).permutation(len(fams))
    counts = _largest_remainder(len(fams), ratios)
    assign, pos = {}, 0
    for name, n in zip(SPLITS, counts):
        for i in order[pos:pos + n]:
            assign[fams[i]] = name
        pos += n
    return {k: assign[f] for k, f in families.items()}


# ---------------------------------------------------------------------------
# label files

def load_labels(path, K: int | None = None) -> dict[str, tuple[float, np.ndarray]]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read labels {path}: {e}") from e
    labels = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        keys = sorted((k for k in row if re.fullmatch(r"f\d+", k)), key=lambda k: int(k[1:]))
        if K is not None and len(keys) != K:
            raise ValidationError(f"labels line {lineno}: expected {K} features, got {len(keys)}")
        vals = np.array([float(row[k]) for k in keys] + [float(row["s_tool"])])
        if not np.isfinite(vals).all():
            raise ValidationError(f"labels line {lineno}: non-finite value")
        labels[str(row["address"]).lower()] = (vals[-1], vals[:-1])
    return labels


# ---------------------------------------------------------------------------
# run context

@dataclass
class RunContext:
    out: Path
    config: dict
    base: Path = Path(".")

    @classmethod
    def from_file(cls, path, out, **overrides) -> RunContext:
        p = Path(path)
        try:
            cfg = json.loads(p.read_text())
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cls(Path(out), cfg, p.parent)

    def path(self, key: str) -> Path | None:
        v = self.config.get(key)
        return None if v is None else self.base / v

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    def model_config(self) -> ModelConfig:
        return preset(self.config.get("preset", "desk"), seed=self.seed, **self.config.get("model", {}))

    def artifact(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, stage: str, needed: str, path: Path):
        if not path.exists():
            raise StageDependencyError(stage, needed)

    @property
    def chains(self) -> list[str]:
        want = self.config.get("chains")
        have = stored_chains(self.out)
        return [c for c in have if not want or c in want]


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, bytes):
        return o.hex()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_csv(path: Path, fields: list[str], rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# stages

def stage_ingest(ctx: RunContext, input_path=None, chain=None) -> list[IngestStats]:
    jobs = [(Path(input_path), chain)] if input_path else [
        (ctx.base / p, c) for c, p in sorted(ctx.config.get("corpora", {}).items())
    ]
    if not jobs:
        raise ValidationError("ingest needs --input/--chain or a 'corpora' mapping in the config")
    results = []
    for path, ch in jobs:
        if not ch:
            raise ValidationError("ingest needs a chain id")
        st = ingest(path, ch, ctx.out)
        _write_json(ctx.artifact("store", f"{ch}.ingest.json"), {"version": FORMAT_VERSION} | st.__dict__)
        log.info("ingested %s: %d rows, %d malformed, %d unique", ch, st.rows, st.malformed, st.stored)
        results.append(st)
    return results


def _require_store(ctx, stage):
    if not ctx.chains:
        raise StageDependencyError(stage, "ingest")


def stage_extract(ctx: RunContext):
    _require_store(ctx, "extract")
    tproxy = int(ctx.config.get("tproxy", DEFAULT_TPROXY))
    for chain in ctx.chains:
        rows = []
        for h, c in sorted(load_store(ctx.out, chain).items()):
            feat = extract_features(CanonicalBytecode.from_bytes(c.code, c.original_len), tproxy)
            rows.append(json.dumps(feat.to_row(), sort_keys=True))
        p = ctx.artifact("features", f"{chain}.jsonl")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("".join(r + "\n" for r in rows))


def load_features(ctx: RunContext, chain: str, stage: str) -> dict[str, StructuralFeatures]:
    p = ctx.artifact("features", f"{chain}.jsonl")
    ctx.require(stage, "extract", p)
    return {f.canonical_hash: f for f in (StructuralFeatures.from_row(json.loads(line))
                                          for line in p.read_text().splitlines())}


def _labeled_set(contracts: list[StoredContract], labels, cfg: ModelConfig) -> LabeledSet:
    seqs, s, F, keys = [], [], [], []
    for c in contracts:
        hit = next((a for a in c.addresses if a in labels), None)
        if hit is None:
            continue
        seqs.append(segment(c.code, cfg.L, cfg.N))
        s.append(labels[hit][0])
        F.append(labels[hit][1])
        keys.append(c.canonical_hash)
    if not seqs:
        raise ValidationError("no stored contract carries a label")
    return LabeledSet(np.stack([q.segments for q in seqs]), np.stack([q.mask for q in seqs]),
                      np.array(s), np.stack(F), np.array([q.byte_len for q in seqs]), keys)


def stage_train(ctx: RunContext):
    chain = ctx.config.get("train_chain")
    if not chain:
        raise ValidationError("config needs 'train_chain'")
    ctx.require("train", "ingest", store_path(ctx.out, chain))
    labels_path = ctx.path("labels")
    if labels_path is None:
        raise ValidationError("config needs 'labels'")
    cfg = ctx.model_config()
    store = load_store(ctx.out, chain)
    data = _labeled_set([store[h] for h in sorted(store)], load_labels(labels_path, cfg.K), cfg)
    fams = {h: store[h].skeleton for h in data.keys}
    split = family_split(fams, tuple(ctx.config.get("split", (7, 2, 1))), ctx.seed)
    idx = {name: [i for i, h in enumerate(data.keys) if split[h] == name] for name in SPLITS}
    train, val, test = (data.subset(idx[n]) for n in SPLITS)
    result = train_loop(train, val if len(val) >= 2 else None, cfg)
    mdir = ctx.artifact("model")
    mdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(mdir / "checkpoint.npz", result.params, result.stats, cfg,
                    {"hash_algorithm": HASH_ALGORITHM, "family_policy": FAMILY_POLICY, "train_chain": chain})
    _write_json(mdir / "split.json", {"version": FORMAT_VERSION, "policy": FAMILY_POLICY,
                                      "assignment": dict(sorted(split.items())),
                                      "sizes": {n: len(idx[n]) for n in SPLITS}})
    history = [{k: v for k, v in row.items() if k != "seconds"} for row in result.history]
    evaluation = {"version": FORMAT_VERSION, "train_chain": chain, "best_epoch": result.best_epoch,
                  "history": history, "split_sizes": {n: len(idx[n]) for n in SPLITS}}
    held = test if len(test) >= 2 else val
    if len(held) >= 2:
        yhat = predict(held, result.params, result.stats, cfg)
        evaluation["heldout"] = metrics.evaluate(held.s_tool, yhat).to_dict()
        evaluation["error_percentiles"] = metrics.error_percentiles(held.s_tool, yhat)
        if len(held) >= 4:
            evaluation["length_bins"] = [b.__dict__ for b in
                                         metrics.length_binned_errors(held.byte_len, held.s_tool, yhat)]
        cut = triage.quantile(held.s_tool, triage.MAIN_P)
        evaluation["tail_p99"] = {"cutoff": cut, **metrics.tail_errors(held.s_tool, yhat, cut).to_dict()}
    _write_json(mdir / "eval.json", evaluation)


SCORE_FIELDS = ["chain", "address", "canonical_hash", "score", "source"]


def stage_score(ctx: RunContext):
    _require_store(ctx, "score")
    ckpt = ctx.artifact("model", "checkpoint.npz")
    ctx.require("score", "train", ckpt)
    params, stats, cfg, _ = load_checkpoint(ckpt)
    perf = {}
    for chain in ctx.chains:
        store = load_store(ctx.out, chain)
        hashes = sorted(store)
        seqs = [segment(store[h].code, cfg.L, cfg.N) for h in hashes]
        data = LabeledSet(np.stack([q.segments for q in seqs]), np.stack([q.mask for q in seqs]),
                          np.zeros(len(seqs)), np.zeros((len(seqs), cfg.K)), np.array([q.byte_len for q in seqs]))
        scores, ms = score_unique(data, params, stats, cfg)
        perf[chain] = {"contracts": len(hashes), "ms_per_contract": ms}
        rows = [{"chain": chain, "address": store[h].address, "canonical_hash": h,
                 "score": repr(float(s)), "source": "model"} for h, s in zip(hashes, scores)]
        _write_csv(ctx.artifact("scores", f"{chain}.csv"), SCORE_FIELDS, rows)
    # wall-clock numbers stay out of the report bundle
    _write_json(ctx.artifact("scores", "throughput.json"), perf)


def load_scores(ctx: RunContext, stage: str) -> dict[str, list[triage.ScoreRecord]]:
    _require_store(ctx, stage)
    out = {}
    for chain in ctx.chains:
        p = ctx.artifact("scores", f"{chain}.csv")
        ctx.require(stage, "score", p)
        out[chain] = [triage.ScoreRecord(r["chain"], r["address"], r["canonical_hash"], float(r["score"]), r["source"])
                      for r in _read_csv(p)]
    return out


def _secondary_weights(ctx) -> triage.SecondaryWeights:
    return triage.SecondaryWeights(**ctx.config.get("weights", {}))


def _lift_cfg(ctx):
    lc = ctx.config.get("lift", {})
    return float(lc.get("eps", enrichment.DEFAULT_EPS)), int(lc.get("min_count", enrichment.DEFAULT_MIN_COUNT))


def stage_queues(ctx: RunContext):
    scores = load_scores(ctx, "queues")
    all_records = [r for recs in scores.values() for r in recs]
    clusters, _ = reuse.reuse_clusters(all_records)
    cluster_hashes = {c.canonical_hash for c in clusters}
    eps, _ = _lift_cfg(ctx)
    rows, specs = [], {}
    for chain, recs in scores.items():
        feats = load_features(ctx, chain, "queues")
        q = triage.build_queues(recs)
        specs[chain] = q.spec.to_dict() | {"reference_cutoffs": triage.REFERENCE_CUTOFFS.get(chain)}
        tail = [feats[e.record.canonical_hash] for e in q.main if e.record.canonical_hash in feats]
        lifts = enrichment.selector_lifts(tail, list(feats.values()), eps) if tail else {}
        ranked = triage.secondary_rank(q.main, feats, lifts, cluster_hashes, _secondary_weights(ctx))
        rows += triage.queue_rows(ranked) + triage.queue_rows(q.watch)
    _write_csv(ctx.artifact("queues", "queues.csv"), triage.QUEUE_CSV_FIELDS, rows)
    _write_json(ctx.artifact("queues", "queue_specs.json"), {
        "version": FORMAT_VERSION, "quantile_rule": "linear interpolation at rank (n-1)p/100",
        "secondary_weights": _secondary_weights(ctx).__dict__, "secondary_weights_note": "heuristic defaults",
        "chains": specs,
    })


TRANSFER_FIELDS = ["source_chain", "target_chain", "cutoff", "n", "tail_count", "tail_share", "own_cutoff",
                   "own_count", "delta_n", "delta_days"]


def stage_transfer(ctx: RunContext):
    scores = load_scores(ctx, "transfer")
    rate = float(ctx.config.get("reviewer_rate", triage.DEFAULT_REVIEWER_RATE))
    rows = triage.transfer_matrix({c: [r.score for r in recs] for c, recs in scores.items()}, reviewer_rate=rate)
    _write_csv(ctx.artifact("transfer", "transfer.csv"), TRANSFER_FIELDS,
               [{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.to_dict().items()} for r in rows])


LIFT_FIELDS = ["chain", "kind", "pattern", "tail_count", "all_count", "lift"]


def stage_enrich(ctx: RunContext):
    scores = load_scores(ctx, "enrich")
    eps, min_count = _lift_cfg(ctx)
    sel_rows, op_rows, shares = [], [], {}
    for chain, recs in scores.items():
        feats = load_features(ctx, chain, "enrich")
        cut = triage.quantile([r.score for r in recs], triage.MAIN_P)
        tail = [feats[r.canonical_hash] for r in sorted(recs, key=lambda r: r.canonical_hash) if r.score >= cut]
        everything = [feats[h] for h in sorted(feats)]
        for kind, sink in (("selector", sel_rows), ("opcode", op_rows)):
            sink += [{"chain": chain} | row.to_csv_row()
                     for row in enrichment.lift_table(tail, everything, kind, eps, min_count)]
        shares[chain] = enrichment.tail_label_shares(tail, everything)
        shares[chain]["sanity_correlations"] = _safe_correlations(recs, feats)
    edir = ctx.artifact("enrich")
    _write_csv(edir / "lift_selectors.csv", LIFT_FIELDS, sel_rows)
    _write_csv(edir / "lift_opcodes.csv", LIFT_FIELDS, op_rows)
    _write_json(edir / "label_shares.json", {"version": FORMAT_VERSION, "eps": eps, "min_count": min_count,
                                            "chains": shares})


def _safe_correlations(recs, feats):
    ordered = sorted(recs, key=lambda r: r.canonical_hash)
    try:
        return sanity_correlations([r.score for r in ordered], [feats[r.canonical_hash] for r in ordered])
    except CorrelationUndefined as e:
        return {"error": str(e)}


def stage_reuse(ctx: RunContext):
    scores = load_scores(ctx, "reuse")
    records = [r for c in sorted(scores) for r in scores[c]]
    overall = reuse.chain_hash_sets(records)
    tails = reuse.tail_hash_sets(records)
    pairs = []
    for o, t in zip(reuse.overlap_table(overall), reuse.overlap_table(tails)):
        pairs.append({"overall": o.to_dict(), "tail": t.to_dict(),
                      "tail_to_overall_jaccard": (t.jaccard / o.jaccard) if o.jaccard else None})
    addr_index = {}
    for chain in scores:
        for h, c in load_store(ctx.out, chain).items():
            addr_index[(chain, h)] = c.addresses
    clusters, hist = reuse.reuse_clusters(records, addr_index)
    rdir = ctx.artifact("reuse")
    _write_json(rdir / "reuse_overlap.json", {"version": FORMAT_VERSION, "hash_algorithm": HASH_ALGORITHM,
                                             "pairs": pairs, "tail_jaccard": reuse.tail_jaccard(records)})
    _write_json(rdir / "clusters.json", {
        "version": FORMAT_VERSION,
        "clusters": [c.to_dict() for c in clusters],
        "coverage_histogram": {str(k): v for k, v in hist.items()},
        "coverage_score_stats": {str(k): v for k, v in reuse.coverage_score_stats(clusters).items()},
        "identical_address": [c.canonical_hash for c in clusters if c.identical_address],
    })


def stage_align(ctx: RunContext):
    scores = load_scores(ctx, "align")
    path = ctx.path("incidents")
    if path is None:
        raise ValidationError("config needs 'incidents'")
    try:
        incs = incidents.parse_incidents(Path(path).read_text())
    except OSError as e:
        raise IoError(f"cannot read incidents {path}: {e}") from e
    addr_index = {}
    for chain in scores:
        for h, c in load_store(ctx.out, chain).items():
            for a in c.addresses:
                addr_index[(chain, a)] = h
    records = [r for c in sorted(scores) for r in scores[c]]
    results, unmatched = incidents.align(incs, records, addr_index)
    adir = ctx.artifact("align")
    adir.mkdir(parents=True, exist_ok=True)
    (adir / "alignment.csv").write_text(incidents.alignment_report(results))
    _write_json(adir / "unmatched.json", [list(u) for u in unmatched])


def stage_report(ctx: RunContext):
    sources = {
        "queues.csv": ("queues", ctx.artifact("queues", "queues.csv")),
        "transfer.csv": ("transfer", ctx.artifact("transfer", "transfer.csv")),
        "lift_selectors.csv": ("enrich", ctx.artifact("enrich", "lift_selectors.csv")),
        "lift_opcodes.csv": ("enrich", ctx.artifact("enrich", "lift_opcodes.csv")),
        "label_shares.json": ("enrich", ctx.artifact("enrich", "label_shares.json")),
        "reuse_overlap.json": ("reuse", ctx.artifact("reuse", "reuse_overlap.json")),
        "clusters.json": ("reuse", ctx.artifact("reuse", "clusters.json")),
        "alignment.csv": ("align", ctx.artifact("align", "alignment.csv")),
        "eval.json": ("train", ctx.artifact("model", "eval.json")),
    }
    for name, (stage, p) in sources.items():
        ctx.require("report", stage, p)
    rdir = ctx.artifact("report")
    rdir.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, (_, p) in sources.items():
        data = p.read_bytes()
        (rdir / name).write_bytes(data)
        digests[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "version": FORMAT_VERSION,
        "hash_algorithm": HASH_ALGORITHM,
        "family_policy": FAMILY_POLICY,
        "quantile_rule": "linear",
        "seed": ctx.seed,
        "config": ctx.config,
        "model": ctx.model_config().to_dict(),
        "chains": ctx.chains,
        "files": digests,
        "notes": {
            "secondary_weights": "heuristic defaults",
            "proxy_indicator": "DELEGATECALL and RETURNDATACOPY with at most tproxy selectors; stand-in rule",
            "reference_cutoffs": triage.REFERENCE_CUTOFFS,
        },
    }
    _write_json(rdir / "run_manifest.json", manifest)


STAGE_FUNCS = {
    "ingest": stage_ingest, "extract": stage_extract, "train": stage_train, "score": stage_score,
    "queues": stage_queues, "transfer": stage_transfer, "enrich": stage_enrich, "reuse": stage_reuse,
    "align": stage_align, "report": stage_report,
}


def run(stage: str, ctx: RunContext, **kw):
    if stage not in STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}")
    return STAGE_FUNCS[stage](ctx, **kw)


def run_all(ctx: RunContext):
    for stage in STAGES:
        run(stage, ctx)
