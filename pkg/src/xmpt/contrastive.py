"""InfoNCE over L2-normalized feature rows, shared by both training stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TAU = 0.4
DEFAULT_K = 1024
FEATURE_DIM = 16
NORM_TOL = 1e-6

# key: negatives come from the positive (target) bank; anchor: from other anchors
NEGATIVE_MODES = ("key", "anchor")


@dataclass
class ContrastiveBatch:
    anchors: Tensor
    positives: Tensor
    negatives: Optional[Tensor] = None
    temperature: float = DEFAULT_TAU
    negatives_per_anchor: int = DEFAULT_K
    mode: str = "key"

    def __post_init__(self):
        self.anchors = T.as_tensor(self.anchors)
        self.positives = T.as_tensor(self.positives)
        if self.negatives is not None:
            self.negatives = T.as_tensor(self.negatives)
        if self.anchors.shape != self.positives.shape or self.anchors.ndim != 2:
            raise T.ShapeError("info_nce", self.anchors.shape, self.positives.shape,
                               detail="anchors and positives must be aligned N x D")
        if self.negatives is not None and (
            self.negatives.ndim != 2 or self.negatives.shape[1] != self.anchors.shape[1]
        ):
            raise T.ShapeError("info_nce", self.anchors.shape, self.negatives.shape)
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.negatives_per_anchor < 0:
            raise ValueError("negatives_per_anchor must be >= 0")
        if self.mode not in NEGATIVE_MODES:
            raise ValueError(f"negative sampling mode must be one of {NEGATIVE_MODES}, got {self.mode!r}")


def _check_unit_rows(name: str, x: np.ndarray):
    if x.size == 0:
        return
    err = np.abs(np.sqrt(np.sum(x * x, axis=1)) - 1.0).max()
    if err > NORM_TOL:
        raise ValueError(f"{name} rows are not L2-normalized (max |norm - 1| = {err:.3g})")


def sample_negative_indices(n: int, m: int, k: int, exclude_self: bool, rng) -> np.ndarray:
    """(n, k) column indices into an m-row bank, uniform without replacement per row.

    With ``exclude_self`` row i never receives column i. When k covers every
    available column the result is deterministic and ordered.
    """
    avail = m - 1 if exclude_self else m
    if k >= avail:
        cols = np.broadcast_to(np.arange(m), (n, m))
        if not exclude_self:
            return cols.copy()
        mask = cols != np.arange(n)[:, None]
        return cols[mask].reshape(n, m - 1)
    if rng is None:
        raise ValueError("a random generator is needed to subsample negatives")
    keys = rng.random((n, m))
    if exclude_self:
        keys[np.arange(n), np.arange(n)] = np.inf
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


def info_nce(batch: ContrastiveBatch, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean over anchors of -log(e^{a.p/t} / (e^{a.p/t} + sum_j e^{a.n_j/t}))."""
    a, p = batch.anchors, batch.positives
    n = a.shape[0]
    if n == 0:
        raise ValueError("info_nce needs at least one anchor")
    _check_unit_rows("anchors", a.data)
    _check_unit_rows("positives", p.data)
    if batch.negatives is not None:
        _check_unit_rows("negatives", batch.negatives.data)
        bank, exclude = batch.negatives, False
    elif batch.mode == "key":
        bank, exclude = p, True
    else:
        bank, exclude = a, True
    m = bank.shape[0]
    k = min(batch.negatives_per_anchor, m - 1 if exclude else m)

    inv_tau = 1.0 / batch.temperature
    pos = T.sum(T.mul(a, p), axis=1)
    pos_logit = T.scale(pos, inv_tau)
    if k <= 0:
        logits = T.reshape(pos_logit, (n, 1))
    else:
        sims = T.matmul(a, T.transpose(bank))
        cols = sample_negative_indices(n, m, k, exclude, rng)
        flat = (cols + np.arange(n)[:, None] * m).ravel()
        neg = T.reshape(T.gather_rows(T.reshape(sims, (n * m,)), flat), (n, k))
        logits = T.concat([T.reshape(pos_logit, (n, 1)), T.scale(neg, inv_tau)], axis=1)
    row_max = logits.data.max(axis=1)
    lse = T.logsumexp(logits, axis=1)
    # -log softmax of column 0, with the row max cancelling exactly when k == 0
    per_anchor = T.add(T.sub(T.sub(lse, Tensor._wrap(row_max)), pos_logit), Tensor._wrap(row_max))
    return T.mean(per_anchor)


@dataclass
class SimilarityStats:
    mean_pos_sim: float
    mean_neg_sim: float


def similarity_stats(anchors, positives, negatives=None) -> SimilarityStats:
    """Mean positive and negative cosine similarity (no gradient).

    Without explicit negatives, every (i, j != i) anchor/positive pairing counts
    as a negative, matching key-side sampling.
    """
    a = np.asarray(anchors.data if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    p = np.asarray(positives.data if isinstance(positives, Tensor) else positives, dtype=np.float64)
    if a.size == 0 or p.size == 0:
        raise ValueError("similarity_stats needs non-empty inputs")
    diag = np.sum(a * p, axis=1)
    mean_pos = float(diag.mean())
    if negatives is None:
        n = len(a)
        if n < 2:
            return SimilarityStats(mean_pos, float("nan"))
        total = float(a.sum(axis=0) @ p.sum(axis=0)) - float(diag.sum())
        return SimilarityStats(mean_pos, total / (n * (n - 1)))
    neg = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    if neg.size == 0:
        raise ValueError("similarity_stats needs non-empty negatives")
    return SimilarityStats(mean_pos, float(a.sum(axis=0) @ neg.sum(axis=0)) / (len(a) * len(neg)))
