"""Task, alignment, contrastive and gate-entropy losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

ENTROPY_CLAMP = 1e-12


@dataclass
class LossWeights:
    lambda_align: float = 0.1
    lambda_contr: float = 0.1
    lambda_gate: float = 0.01
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if min(self.lambda_align, self.lambda_contr, self.lambda_gate) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    lm: Tensor
    align: Tensor
    contr: Tensor
    gate: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("lm", "align", "contr", "gate", "total")}


def _one_hot(targets: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((targets.size, classes))
    out[np.arange(targets.size), targets] = 1.0
    return out


def lm_loss(logits: Tensor, targets: Sequence[int], ignore_mask: Sequence[bool] | None = None) -> Tensor:
    """Mean next-token NLL over positions where ``ignore_mask`` is False."""
    if logits.ndim != 2:
        raise DimensionError(f"lm_loss expects [S, V] logits, got {logits.shape}")
    s, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (s,):
        raise DimensionError(f"{targets.size} targets for {s} positions")
    keep = np.ones(s, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    if not keep.any():
        raise ContractError("lm_loss: every target position is ignored")
    if targets[keep].min() < 0 or targets[keep].max() >= v:
        raise ContractError(f"lm_loss: targets outside [0, {v})")
    onehot = _one_hot(np.where(keep, targets, 0), v) * keep[:, None]
    picked = ad.sum(ad.log_softmax_last_dim(logits) * Tensor(onehot))
    return -picked / float(keep.sum())


def align_loss(R: Tensor, T: Tensor) -> Tensor:
    """Mean over tokens of the squared Euclidean distance between paired rows."""
    if R.shape != T.shape or R.ndim != 2:
        raise DimensionError(f"align_loss: {R.shape} vs {T.shape}")
    diff = R - T
    return ad.sum(diff * diff) / float(R.shape[0])


def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(norms == 0.0):
        raise ContractError("cannot normalise a zero-norm row")
    n = ad.sqrt(ad.sum(x * x, axis=-1, keepdims=True))
    return x / ad.expand(n, x.shape)


def _diag_ce(logits: Tensor) -> Tensor:
    b = logits.shape[0]
    return -ad.sum(ad.log_softmax_last_dim(logits) * Tensor(np.eye(b))) / float(b)


def info_nce(a: Tensor, b: Tensor, tau: float, symmetric: bool = True) -> Tensor:
    """InfoNCE over cosine similarities with in-batch negatives; row i pairs with row i."""
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 1:
        raise DimensionError(f"info_nce: {a.shape} vs {b.shape}")
    if not tau > 0:
        raise ContractError("temperature must be positive")
    sim = ad.matmul(l2_normalize_rows(a), ad.transpose(l2_normalize_rows(b))) / tau
    rows = _diag_ce(sim)
    if not symmetric:
        return rows
    return (rows + _diag_ce(ad.transpose(sim))) * 0.5


def contrastive_loss(p_r: Tensor, p_t: Tensor, p_p: Tensor, tau: float, symmetric: bool = True) -> Tensor:
    return (info_nce(p_r, p_t, tau, symmetric) + info_nce(p_r, p_p, tau, symmetric)) * 0.5


def gate_entropy_loss(alpha: Tensor) -> Tensor:
    """Negative mean binary entropy of the gates; minimised at alpha = 0.5."""
    a = ad.clip(alpha, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    one_minus = 1.0 - a
    h = -(a * ad.log(a)) - one_minus * ad.log(one_minus)
    return -ad.mean(h)


def total_loss(lm: Tensor, align: Tensor, contr: Tensor, gate: Tensor, w: LossWeights) -> LossBreakdown:
    total = lm + align * w.lambda_align + contr * w.lambda_contr + gate * w.lambda_gate
    return LossBreakdown(lm, align, contr, gate, total)
