"""Regression accuracy and error analysis: MAPE, MAE, MSE, PCC, length bins, tail errors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CorrelationUndefined, EmptyInput, EmptyTail, ShapeError
from .triage import quantile


def _pair(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ShapeError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise EmptyInput("no samples")
    return y, yhat


def mape(y, yhat) -> float:
    """Mean absolute percentage error in %, skipping zero targets."""
    value, _ = mape_with_excluded(y, yhat)
    return value


def mape_with_excluded(y, yhat) -> tuple[float, int]:
    y, yhat = _pair(y, yhat)
    keep = y != 0
    if not keep.any():
        raise EmptyInput("every target is zero; MAPE undefined")
    return float(np.mean(np.abs((y[keep] - yhat[keep]) / y[keep])) * 100.0), int((~keep).sum())


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def pcc(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        raise CorrelationUndefined("need at least two samples")
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    syy = float(np.sum(dy * dy))
    spp = float(np.sum(dp * dp))
    if syy == 0 or spp == 0:
        raise CorrelationUndefined("zero variance")
    r = float(np.sum(dy * dp)) / math.sqrt(syy * spp)
    return max(-1.0, min(1.0, r))


@dataclass
class EvalReport:
    n: int
    mape: float | None
    mae: float
    mse: float
    pcc: float | None
    mape_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(y, yhat) -> EvalReport:
    y, yhat = _pair(y, yhat)
    try:
        m, excluded = mape_with_excluded(y, yhat)
    except EmptyInput:
        m, excluded = None, int(y.size)
    try:
        r = pcc(y, yhat)
    except CorrelationUndefined:
        r = None
    return EvalReport(int(y.size), m, mae(y, yhat), mse(y, yhat), r, excluded)


def error_percentiles(y, yhat, levels=(50, 90, 95, 99)) -> dict[str, float]:
    y, yhat = _pair(y, yhat)
    err = np.abs(y - yhat)
    return {f"p{lv:g}": quantile(err, lv) for lv in levels}


@dataclass
class LengthBin:
    lo: float
    hi: float
    n: int
    mae: float | None
    mape: float | None


def length_binned_errors(byte_len, y, yhat) -> list[LengthBin]:
    """Per-quartile errors, quartile edges taken from the empirical length distribution.

    Bins are half-open ``[lo, hi)`` except the last, which also holds the maximum.
    """
    lens = np.asarray(byte_len, dtype=float)
    y, yhat = _pair(y, yhat)
    if lens.shape != y.shape:
        raise ShapeError("byte_len must align with targets")
    if lens.size < 4:
        raise EmptyInput("need at least four records for quartile bins")
    edges = [float(lens.min())] + [quantile(lens, q) for q in (25, 50, 75)] + [float(lens.max())]
    idx = np.clip(np.searchsorted(edges[1:-1], lens, side="right"), 0, 3)
    bins = []
    for b in range(4):
        sel = idx == b
        n = int(sel.sum())
        if n:
            try:
                bm = mape(y[sel], yhat[sel])
            except EmptyInput:
                bm = None
            bins.append(LengthBin(edges[b], edges[b + 1], n, mae(y[sel], yhat[sel]), bm))
        else:
            bins.append(LengthBin(edges[b], edges[b + 1], 0, None, None))
    return bins


def tail_errors(y, yhat, cutoff: float) -> EvalReport:
    y, yhat = _pair(y, yhat)
    sel = y >= cutoff
    if not sel.any():
        raise EmptyTail(f"no target at or above {cutoff}")
    return evaluate(y[sel], yhat[sel])
