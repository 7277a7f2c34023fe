"""Correlation metrics between quality labels and predictions."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is undefined (constant input or too few points)."""


def _check(labels, preds):
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if y.ndim != 1 or y.shape != p.shape:
        raise ValueError("labels and preds must be equal-length 1-D sequences")
    if len(y) < 2:
        raise UndefinedCorrelationError(f"correlation needs at least 2 points, got {len(y)}")
    return y, p


def pcc(labels, preds) -> float:
    """Pearson correlation: centered cross-product over the product of centered norms."""
    y, p = _check(labels, preds)
    dy = y - y.mean()
    dp = p - p.mean()
    syy = float(np.dot(dy, dy))
    spp = float(np.dot(dp, dp))
    if syy == 0.0 or spp == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sequence")
    r = float(np.dot(dy, dp)) / math.sqrt(syy * spp)
    if abs(r) > 1.0 - 1e-9 and _perfectly_linear(y, p):
        return math.copysign(1.0, r)
    return max(-1.0, min(1.0, r))


def _perfectly_linear(y, p) -> bool:
    """Exact rational check that sxy^2 == sxx * syy, so +-1 is returned exactly."""
    fy = [Fraction(float(v)) for v in y]
    fp = [Fraction(float(v)) for v in p]
    my = sum(fy) / len(fy)
    mp = sum(fp) / len(fp)
    sxy = sum((a - my) * (b - mp) for a, b in zip(fy, fp))
    sxx = sum((a - my) ** 2 for a in fy)
    spp = sum((b - mp) ** 2 for b in fp)
    return sxy * sxy == sxx * spp


def srcc(labels, preds) -> float:
    """Spearman correlation: Pearson on average ranks (ties share the mean rank)."""
    y, p = _check(labels, preds)
    return pcc(rankdata(y, method="average"), rankdata(p, method="average"))
