"""Hierarchical attention surrogate for obfuscation scoring.

A local Transformer encoder reads each fixed-length byte segment, segment summaries pass
through a global encoder with chunk positions, valid segments are mean-pooled, and three
heads produce reconstructed tool features, the Z-score of those features and the fused
final score.

Segments with mask 0 never enter the computation: the local encoder only runs on valid
segments, their global rows are excluded as attention keys and from pooling. Outputs
are therefore exactly independent of padding-segment content.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bytecode import TokenBatch
from .errors import EmptyContract, NumericError, ShapeError, VocabError

VOCAB = 257
SIGMA_FLOOR = 1e-6
POOL_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    L: int = 64
    N: int = 8
    vocab: int = VOCAB
    d_model: int = 32
    n_layers_local: int = 1
    n_layers_global: int = 1
    n_heads: int = 2
    ffn_dim: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    K: int = 7
    lambda_s: float = 1.0
    lambda_aux: float = 0.1
    lambda_feature: float = 0.01
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 0.5
    batch: int = 24
    epochs: int = 20
    seed: int = 0
    infer_batch: int = 200

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError("d_model must be divisible by n_heads")
        if min(self.lambda_s, self.lambda_aux, self.lambda_feature) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)

    def with_(self, **kw) -> ModelConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": ModelConfig(
        L=512, N=32, d_model=256, n_layers_local=2, n_layers_global=2, n_heads=4,
        dropout=0.1, lr=5e-4, weight_decay=1e-4, batch=24, epochs=20, clip_norm=0.5,
    ),
    "desk": ModelConfig(),
}


def preset(name: str, **overrides) -> ModelConfig:
    return replace(PRESETS[name], **overrides)


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, features) -> FeatureStats:
        """Mean and (population) std per feature, std floored to stay positive."""
        F = np.asarray(features, dtype=float)
        return cls(F.mean(axis=0), np.maximum(F.std(axis=0), SIGMA_FLOOR))

    @property
    def K(self) -> int:
        return len(self.mu)


def zscore(f, stats: FeatureStats):
    """Sum of standardized features; works on a single vector or a (batch, K) array."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != stats.K:
        raise ShapeError(f"expected {stats.K} features, got {f.shape[-1]}")
    return ((f - stats.mu) / stats.sigma).sum(axis=-1)


# ---------------------------------------------------------------------------
# parameters

def _block_shapes(prefix: str, d: int, ffn: int) -> dict:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.w1": (d, ffn), f"{prefix}.b1": (ffn,),
        f"{prefix}.w2": (ffn, d), f"{prefix}.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, K = cfg.d_model, cfg.K
    shapes = {"embed": (cfg.vocab, d), "pos_local": (cfg.L, d), "pos_chunk": (cfg.N, d)}
    for i in range(cfg.n_layers_local):
        shapes |= _block_shapes(f"local.{i}", d, cfg.ffn_dim)
    shapes |= {"local.lnf.g": (d,), "local.lnf.b": (d,)}
    for i in range(cfg.n_layers_global):
        shapes |= _block_shapes(f"global.{i}", d, cfg.ffn_dim)
    shapes |= {"global.lnf.g": (d,), "global.lnf.b": (d,)}
    shapes |= {"rec.w1": (d, d), "rec.b1": (d,), "rec.w2": (d, K), "rec.b2": (K,)}
    shapes |= {"head.w1": (d + K + 1, d), "head.b1": (d,), "head.w2": (d, 1), "head.b2": (1,)}
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) everywhere except layer-norm gain/bias."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif ".ln" in name and name.endswith(".b"):
            data = np.zeros(shape)
        else:
            if name in ("embed", "pos_local", "pos_chunk") or len(shape) == 1:
                fan_in = cfg.d_model if len(shape) == 2 else _bias_fan_in(name, cfg)
            else:
                fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _bias_fan_in(name: str, cfg: ModelConfig) -> int:
    d, K = cfg.d_model, cfg.K
    if name.endswith(".b2") and name.startswith(("local", "global")):
        return cfg.ffn_dim
    if name == "head.b1":
        return d + K + 1
    return d


# ---------------------------------------------------------------------------
# forward

@dataclass
class Trace:
    """Optional recorder for attention probabilities (for inspection and tests)."""

    attention: dict[str, np.ndarray] = field(default_factory=dict)


def _linear(x, p, w, b):
    return ag.matmul(x, p[w]) + p[b]


def _attention(x, p, pre, cfg, key_mask, training, rng, trace):
    M, T, d = x.shape
    H, dh = cfg.n_heads, d // cfg.n_heads

    def heads(t):
        return ag.transpose(ag.reshape(t, (M, T, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, p, f"{pre}.wq", f"{pre}.bq"))
    k = heads(_linear(x, p, f"{pre}.wk", f"{pre}.bk"))
    v = heads(_linear(x, p, f"{pre}.wv", f"{pre}.bv"))
    logits = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    probs = ag.softmax(logits, axis=-1, key_mask=key_mask)
    if trace is not None:
        trace.attention[pre] = probs.data
    probs = ag.dropout(probs, cfg.dropout, rng, training)
    out = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (M, T, d))
    return _linear(out, p, f"{pre}.wo", f"{pre}.bo")


def _block(x, p, pre, cfg, key_mask, training, rng, trace):
    h = ag.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    x = x + ag.dropout(_attention(h, p, pre, cfg, key_mask, training, rng, trace), cfg.dropout, rng, training)
    h = ag.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h = _linear(ag.gelu(_linear(h, p, f"{pre}.w1", f"{pre}.b1")), p, f"{pre}.w2", f"{pre}.b2")
    return x + ag.dropout(h, cfg.dropout, rng, training)


def local_encode(segments: np.ndarray, params, cfg: ModelConfig, *, training=False, rng=None,
                 trace: Trace | None = None) -> Tensor:
    """Encode (M, L) token segments into (M, L, d) states."""
    segments = np.asarray(segments)
    if segments.ndim != 2 or segments.shape[1] != cfg.L:
        raise ShapeError(f"expected (M, {cfg.L}) segments, got {segments.shape}")
    if segments.size and (segments.min() < 0 or segments.max() >= cfg.vocab):
        raise VocabError(f"token outside [0, {cfg.vocab - 1}]")
    x = ag.embedding(params["embed"], segments) + params["pos_local"]
    x = ag.dropout(x, cfg.dropout, rng, training)
    for i in range(cfg.n_layers_local):
        x = _block(x, params, f"local.{i}", cfg, None, training, rng, trace)
    return ag.layer_norm(x, params["local.lnf.g"], params["local.lnf.b"])


def global_encode(summaries: Tensor, mask: np.ndarray, params, cfg: ModelConfig, *, training=False,
                  rng=None, trace: Trace | None = None) -> Tensor:
    """Bidirectional attention over (B, N, d) segment summaries; masked segments are not keys."""
    if summaries.shape[1] != cfg.N or mask.shape != summaries.shape[:2]:
        raise ShapeError(f"expected (B, {cfg.N}, d) summaries with matching mask")
    x = summaries + params["pos_chunk"]
    x = ag.dropout(x, cfg.dropout, rng, training)
    key_mask = mask[:, None, None, :]
    for i in range(cfg.n_layers_global):
        x = _block(x, params, f"global.{i}", cfg, key_mask, training, rng, trace)
    return ag.layer_norm(x, params["global.lnf.g"], params["global.lnf.b"])


def masked_mean_pool(h: Tensor, mask: np.ndarray, eps: float = POOL_EPS) -> Tensor:
    """Average of the rows with mask 1: sum_i h_i m_i / (sum_i m_i + eps)."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptyContract("contract with no valid segment")
    summed = ag.tsum(ag.where(mask[..., None], h), axis=1)
    return summed * (1.0 / (counts + eps))[:, None]


@dataclass
class ForwardOutput:
    s_hat: Tensor  # (B,)
    s_tool_hat: Tensor  # (B,)
    f_hat: Tensor  # (B, K)
    v: Tensor  # (B, d)


def forward(batch: TokenBatch, params, stats: FeatureStats, cfg: ModelConfig, *, training=False,
            rng=None, trace: Trace | None = None) -> ForwardOutput:
    tokens, mask = np.asarray(batch.tokens), np.asarray(batch.mask, dtype=bool)
    B = tokens.shape[0]
    if tokens.shape[1:] != (cfg.N, cfg.L):
        raise ShapeError(f"batch geometry {tokens.shape[1:]} does not match config ({cfg.N}, {cfg.L})")
    if stats.K != cfg.K:
        raise ShapeError(f"feature stats carry {stats.K} features, config expects {cfg.K}")
    if (mask.sum(axis=1) == 0).any():
        raise EmptyContract("contract with no valid segment")
    idx = np.flatnonzero(mask.reshape(-1))
    local = local_encode(tokens.reshape(B * cfg.N, cfg.L)[idx], params, cfg,
                         training=training, rng=rng, trace=trace)
    summaries = ag.scatter_rows(ag.mean(local, axis=1), idx, B * cfg.N)
    summaries = ag.reshape(summaries, (B, cfg.N, cfg.d_model))
    h = global_encode(summaries, mask, params, cfg, training=training, rng=rng, trace=trace)
    v = masked_mean_pool(h, mask)
    f_hat = _linear(ag.gelu(_linear(v, params, "rec.w1", "rec.b1")), params, "rec.w2", "rec.b2")
    s_tool_hat = ag.tsum((f_hat - stats.mu) * (1.0 / stats.sigma), axis=-1)
    fused = ag.concat([v, f_hat, ag.reshape(s_tool_hat, (B, 1))], axis=-1)
    s_hat = _linear(ag.gelu(_linear(fused, params, "head.w1", "head.b1")), params, "head.w2", "head.b2")
    return ForwardOutput(ag.reshape(s_hat, (B,)), s_tool_hat, f_hat, v)


@dataclass
class LossTerms:
    total: Tensor
    score: float  # weighted terms; total == score + aux + feature
    aux: float
    feature: float


def loss(out: ForwardOutput, s_tool, features, cfg: ModelConfig) -> LossTerms:
    """Joint objective: main score MSE, auxiliary Z-score MSE and per-feature MSE."""
    s = np.asarray(s_tool, dtype=float)
    F = np.asarray(features, dtype=float)
    if s.shape != out.s_hat.shape or F.shape != out.f_hat.shape:
        raise ShapeError("targets do not match the batch")
    if not (np.isfinite(s).all() and np.isfinite(F).all() and np.isfinite(out.s_hat.data).all()):
        raise NumericError("non-finite value in loss inputs")
    l_s = ag.mean(ag.square(out.s_hat - s)) * cfg.lambda_s
    l_aux = ag.mean(ag.square(out.s_tool_hat - s)) * cfg.lambda_aux
    l_f = ag.tsum(ag.mean(ag.square(out.f_hat - F), axis=0)) * cfg.lambda_feature
    total = l_s + l_aux + l_f
    return LossTerms(total, float(l_s.data), float(l_aux.data), float(l_f.data))


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Gradient-free view of a parameter set, for inference."""
    return {k: Tensor(v.data) for k, v in params.items()}
