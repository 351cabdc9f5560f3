"""Cross-entropy, per-stratum interventional regulariser and the combined objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelOutput

__all__ = ["LossBreakdown", "cross_entropy", "l_cr_t", "l_cr_terms", "total_loss"]


def _check_labels(labels, num_rows: int, K: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (num_rows,):
        raise ValueError(f"expected {num_rows} labels, got shape {y.shape}")
    bad = np.flatnonzero((y < 0) | (y >= K))
    if bad.size:
        raise ValueError(f"label {int(y[bad[0]])} at position {int(bad[0])} outside [0, {K})")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    y = _check_labels(labels, logits.shape[0], logits.shape[-1])
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits), y)), -1.0)


def l_cr_t(strat_logits_t: Tensor, labels, n: int) -> Tensor:
    """One stratum's regulariser term, with the uniform prior 1/n kept inside the log."""
    if n < 1:
        raise ValueError("n must be >= 1")
    y = _check_labels(labels, strat_logits_t.shape[0], strat_logits_t.shape[-1])
    logp = ad.add_scalar(ad.pick(ad.log_softmax(strat_logits_t), y), math.log(1.0 / n))
    return ad.scale(ad.mean(logp), -1.0)


def l_cr_terms(strat_logits: Tensor, labels) -> Tensor:
    """All n regulariser terms at once from (B, n, K) logits; returns shape (n,)."""
    B, n, K = strat_logits.shape
    y = _check_labels(labels, B, K)
    logp = ad.pick(ad.log_softmax(strat_logits), y)  # (B, n)
    return ad.scale(ad.add_scalar(ad.mean(logp, axis=0), math.log(1.0 / n)), -1.0)


@dataclass
class LossBreakdown:
    l_ce: float
    l_cr_terms: list[float]
    l_total: float
    lam: float
    total: Tensor = field(repr=False)

    @property
    def l_cr_sum(self) -> float:
        return float(math.fsum(self.l_cr_terms))


def total_loss(out: ModelOutput, labels, lam: float) -> LossBreakdown:
    """``l_ce + lam * sum_t l_cr_t``; the Tensor in ``.total`` is what gets differentiated."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = cross_entropy(out.baseline_logits, labels)
    if out.strat_logits is None:
        if lam != 0:
            raise ValueError("a nonzero lambda needs the activation branch")
        return LossBreakdown(float(ce.values), [], float(ce.values), lam, ce)
    terms = l_cr_terms(out.strat_logits, labels)
    total = ad.add(ce, ad.scale(ad.sum(terms), lam))
    return LossBreakdown(
        l_ce=float(ce.values),
        l_cr_terms=[float(v) for v in terms.values],
        l_total=float(total.values),
        lam=lam,
        total=total,
    )
