"""AdamW training loop with global-norm clipping, batched scoring and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .bytecode import TokenBatch
from .errors import DivergenceError, ValidationError
from .metrics import evaluate
from .model import FeatureStats, ModelConfig, forward, frozen, init_params, loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DIVERGENCE_LOSS = 1e6


@dataclass
class LabeledSet:
    """Token tensors with tool score and feature targets, row-aligned."""

    tokens: np.ndarray  # (n, N, L)
    mask: np.ndarray  # (n, N)
    s_tool: np.ndarray  # (n,)
    features: np.ndarray  # (n, K)
    byte_len: np.ndarray  # (n,)
    keys: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.s_tool)

    def subset(self, idx) -> LabeledSet:
        idx = np.asarray(idx, dtype=int)
        keys = [self.keys[i] for i in idx] if self.keys else []
        return LabeledSet(self.tokens[idx], self.mask[idx], self.s_tool[idx], self.features[idx],
                          self.byte_len[idx], keys)

    def batch(self, idx) -> TokenBatch:
        return TokenBatch(self.tokens[idx], self.mask[idx], self.byte_len[idx])


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_step(params, opt: AdamW, data: LabeledSet, idx, stats: FeatureStats, cfg: ModelConfig,
               rng: np.random.Generator | None = None) -> dict:
    opt.zero_grad()
    out = forward(data.batch(idx), params, stats, cfg, training=True, rng=rng)
    terms = loss(out, data.s_tool[idx], data.features[idx], cfg)
    terms.total.backward()
    norm = clip_grad_norm(params, cfg.clip_norm)
    opt.step()
    return {"loss": float(terms.total.data), "score": terms.score, "aux": terms.aux,
            "feature": terms.feature, "grad_norm": norm}


def predict(data: LabeledSet | TokenBatch, params, stats: FeatureStats, cfg: ModelConfig,
            batch: int | None = None) -> np.ndarray:
    """Eval-mode scores in input order."""
    batch = batch or cfg.infer_batch
    view = frozen(params)
    tokens, mask = data.tokens, data.mask
    out = np.empty(len(tokens))
    for start in range(0, len(tokens), batch):
        sl = slice(start, start + batch)
        res = forward(TokenBatch(tokens[sl], mask[sl]), view, stats, cfg)
        out[sl] = res.s_hat.data
    return out


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    stats: FeatureStats
    history: list[dict]
    best_epoch: int


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _restore(snap) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in snap.items()}


def init_output_biases(params, train: LabeledSet):
    """Start the score and feature heads at the training-split target means."""
    params["head.b2"].data[:] = train.s_tool.mean()
    params["rec.b2"].data[:] = train.features.mean(axis=0)


def train_loop(train: LabeledSet, val: LabeledSet | None, cfg: ModelConfig,
               stats: FeatureStats | None = None, params=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; keeps the parameters of the best validation epoch.

    Shuffling and dropout draw from generators seeded by ``cfg.seed``, so a fixed seed
    reproduces the run exactly.
    """
    if len(train) == 0:
        raise ValidationError("empty training split")
    stats = stats or FeatureStats.fit(train.features)
    if params is None:
        params = init_params(cfg)
        init_output_biases(params, train)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    history = []
    stable = _snapshot(params)
    best, best_epoch, best_val = stable, -1, np.inf
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch):
            step = train_step(params, opt, train, order[start:start + cfg.batch], stats, cfg, dropout_rng)
            if not np.isfinite(step["loss"]) or step["loss"] > DIVERGENCE_LOSS:
                raise DivergenceError(f"loss {step['loss']:.3g} at epoch {epoch}", checkpoint=_restore(stable))
            losses.append(step["loss"])
        stable = _snapshot(params)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if val is not None and len(val) >= 2:
            rep = evaluate(val.s_tool, predict(val, params, stats, cfg))
            row |= {"val_mse": rep.mse, "val_mae": rep.mae, "val_mape": rep.mape, "val_pcc": rep.pcc}
            if rep.mse < best_val:
                best, best_epoch, best_val = stable, epoch, rep.mse
        else:
            best, best_epoch = stable, epoch
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
    return TrainResult(_restore(best), stats, history, best_epoch)


def score_unique(data: LabeledSet | TokenBatch, params, stats, cfg, batch=None) -> tuple[np.ndarray, float]:
    """Scores plus per-contract wall-clock latency in milliseconds."""
    t0 = time.perf_counter()
    scores = predict(data, params, stats, cfg, batch)
    ms = 1000.0 * (time.perf_counter() - t0) / max(len(scores), 1)
    log.info("scored %d contracts, %.3f ms/contract", len(scores), ms)
    return scores, ms


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params, stats: FeatureStats, cfg: ModelConfig, extra: dict | None = None):
    meta = {"version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays["stats/mu"] = stats.mu
    arrays["stats/sigma"] = stats.sigma
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True) for k in z.files if k.startswith("param/")}
        stats = FeatureStats(z["stats/mu"].copy(), z["stats/sigma"].copy())
    cfg = ModelConfig(**meta["config"])
    return params, stats, cfg, meta.get("extra", {})

