"""Training objectives: ArcFace base loss, three compatibility
regularizers, and the combined two-stage objectives.

All losses consume unit-norm embeddings (checked to 1e-4) and reduce to
a scalar mean over the batch. Cosines feeding the angular-margin kernel
are clamped to [-1 + 1e-7, 1 - 1e-7] to keep arccos gradients finite at
perfect alignment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clip,
    exp,
    log,
    matmul,
    mean,
    mul,
    reduce_sum,
    scalar_mul,
    sub,
    transpose,
)
from .models import ArcFaceHead

COS_CLAMP = 1e-7
NORM_TOL = 1e-4

COMP_KINDS = ("regression", "classification", "contrastive")


@dataclass
class LossConfig:
    lambda_: float = 2.0
    comp_kind: str = "regression"
    tau: float = 0.1
    s: float = 30.0
    m: float = 0.3

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lambda_}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.comp_kind not in COMP_KINDS:
            raise ValueError(f"unknown comp_kind {self.comp_kind!r}, expected one of {COMP_KINDS}")


@dataclass
class OldReference:
    """Frozen old-model quantities available to the compatibility term."""

    embeddings: Tensor | np.ndarray | None = None   # old-space features of the batch
    head: ArcFaceHead | None = None                 # old classifier


def _check_unit_rows(t: Tensor, what: str) -> None:
    norms = np.linalg.norm(t.values, axis=-1)
    worst = float(np.abs(norms - 1.0).max(initial=0.0))
    if worst > NORM_TOL:
        raise ValueError(f"{what} rows must be unit-norm (worst deviation {worst:.2e})")


def _logsumexp_rows(logits: Tensor) -> Tensor:
    """Row-wise log-sum-exp, shift by a detached per-row max for stability."""
    shift = logits.values.max(axis=1, keepdims=True)
    z = sub(logits, Tensor(shift))
    return add(log(reduce_sum(exp(z), axis=1)), Tensor(shift[:, 0]))


def _margin_kernel(cos: Tensor, m: float) -> Tensor:
    # cos(arccos(x) + m) = x cos m - sqrt(1 - x^2) sin m, on clamped x
    from .autodiff import sqrt as tsqrt

    cos_m, sin_m = math.cos(m), math.sin(m)
    sin_theta = tsqrt(sub(Tensor(1.0), mul(cos, cos)))
    return sub(scalar_mul(cos, cos_m), scalar_mul(sin_theta, sin_m))


def _arcface_ce(emb: Tensor, onehot: np.ndarray, weights: Tensor,
                s: float, m: float, sample_weights: np.ndarray) -> Tensor:
    """Weighted-mean cross-entropy over margin-adjusted cosine logits.

    ``sample_weights`` must sum to 1 over the rows that count; rows with
    weight 0 contribute neither value nor gradient.
    """
    from .autodiff import l2_normalize

    cos = clip(matmul(emb, transpose(l2_normalize(weights))),
               -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    k = _margin_kernel(cos, m)
    onehot_t = Tensor(onehot)
    logits = scalar_mul(add(mul(onehot_t, k), mul(Tensor(1.0 - onehot), cos)), s)
    true_logit = reduce_sum(mul(logits, onehot_t), axis=1)
    per_row = sub(_logsumexp_rows(logits), true_logit)
    return reduce_sum(mul(per_row, Tensor(sample_weights)))


def arcface_loss(emb: Tensor, labels, head: ArcFaceHead) -> Tensor:
    """Mean ArcFace loss of a batch against ``head`` (margin on the true
    class only, scaled cosines elsewhere)."""
    _check_unit_rows(emb, "arcface embedding")
    n = emb.shape[0]
    rows, known = head.rows_for(labels)
    if not known.all():
        bad = np.asarray(labels)[~known]
        raise ValueError(f"labels {np.unique(bad).tolist()} are not in the head's class set")
    onehot = np.zeros((n, head.num_classes))
    onehot[np.arange(n), rows] = 1.0
    return _arcface_ce(emb, onehot, head.weights, head.s, head.m,
                       np.full(n, 1.0 / n))


def regression_comp(new_emb: Tensor, old_emb: Tensor) -> Tensor:
    """Mean of 1 - cos(new_i, old_i); lies in [0, 2] for unit rows."""
    if new_emb.shape != old_emb.shape:
        raise ValueError(f"regression_comp: shapes {new_emb.shape} and {old_emb.shape} differ")
    _check_unit_rows(new_emb, "regression_comp new")
    _check_unit_rows(old_emb, "regression_comp old")
    dots = clip(reduce_sum(mul(new_emb, old_emb), axis=1), -1.0, 1.0)
    return mean(sub(Tensor(1.0), dots))


def classification_comp(new_emb: Tensor, labels, old_head: ArcFaceHead) -> Tensor:
    """ArcFace loss of new embeddings against the frozen old classifier.

    Samples whose label the old head never saw (class-split upgrades) are
    excluded from the mean; if every sample is excluded the loss is 0 and
    a warning is emitted. No gradient reaches the old weights.
    """
    _check_unit_rows(new_emb, "classification_comp embedding")
    n = new_emb.shape[0]
    rows, known = old_head.rows_for(labels)
    n_known = int(known.sum())
    if n_known == 0:
        warnings.warn("classification_comp: no batch label is known to the old head; "
                      "returning 0", stacklevel=2)
        return Tensor(0.0)
    onehot = np.zeros((n, old_head.num_classes))
    onehot[np.arange(n)[known], rows[known]] = 1.0
    sample_weights = np.where(known, 1.0 / n_known, 0.0)
    frozen = Tensor(old_head.weights.values.copy())
    return _arcface_ce(new_emb, onehot, frozen, old_head.s, old_head.m, sample_weights)


def contrastive_comp(new_emb: Tensor, old_emb: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive compatibility across the model pair.

    For anchor i (a new embedding), positives are old embeddings at other
    indices sharing its label and negatives are the remaining old
    embeddings; the anchor's own old view at index i is excluded. Anchors
    with no positive are skipped; if all are skipped the loss is 0 and a
    warning is emitted.
    """
    if new_emb.shape != old_emb.shape:
        raise ValueError(f"contrastive_comp: shapes {new_emb.shape} and {old_emb.shape} differ")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _check_unit_rows(new_emb, "contrastive_comp new")
    _check_unit_rows(old_emb, "contrastive_comp old")
    labels = np.asarray(labels)
    n = new_emb.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    pos_counts = pos_mask.sum(axis=1)
    valid = pos_counts >= 1
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("contrastive_comp: no anchor has a positive in the batch; "
                      "returning 0", stacklevel=2)
        return Tensor(0.0)

    sims = scalar_mul(matmul(new_emb, transpose(old_emb)), 1.0 / tau)
    # push self entries far below everything else so exp maps them to 0.0
    masked = sub(sims, Tensor(np.where(not_self, 0.0, 1e9)))
    shift = masked.values.max(axis=1, keepdims=True)
    denom = reduce_sum(exp(sub(masked, Tensor(shift))), axis=1)
    lse = add(log(denom), Tensor(shift[:, 0]))
    inv_counts = np.where(valid, 1.0 / np.maximum(pos_counts, 1), 0.0)
    pos_mean = mul(reduce_sum(mul(sims, Tensor(pos_mask.astype(np.float64))), axis=1),
                   Tensor(inv_counts))
    per_anchor = sub(lse, pos_mean)
    anchor_weights = np.where(valid, 1.0 / n_valid, 0.0)
    return reduce_sum(mul(per_anchor, Tensor(anchor_weights)))


def bct_terms(new_emb: Tensor, labels, new_head: ArcFaceHead,
              old_ref: OldReference | None, cfg: LossConfig) -> tuple[Tensor, Tensor | None]:
    """Base loss and (unless lambda is 0) the compatibility term.

    With lambda 0 the compatibility term is skipped entirely so the
    combined loss is bit-identical to the base loss.
    """
    base = arcface_loss(new_emb, labels, new_head)
    if cfg.lambda_ == 0.0:
        return base, None
    if old_ref is None:
        raise ValueError("bct_loss with lambda > 0 needs an old-model reference")
    if cfg.comp_kind == "regression":
        if old_ref.embeddings is None:
            raise ValueError("regression compatibility needs old embeddings")
        old = old_ref.embeddings if isinstance(old_ref.embeddings, Tensor) \
            else Tensor(old_ref.embeddings)
        comp = regression_comp(new_emb, old)
    elif cfg.comp_kind == "classification":
        if old_ref.head is None:
            raise ValueError("classification compatibility needs the old head")
        comp = classification_comp(new_emb, labels, old_ref.head)
    else:
        if old_ref.embeddings is None:
            raise ValueError("contrastive compatibility needs old embeddings")
        old = old_ref.embeddings if isinstance(old_ref.embeddings, Tensor) \
            else Tensor(old_ref.embeddings)
        comp = contrastive_comp(new_emb, old, labels, cfg.tau)
    return base, comp


def combine_bct(base: Tensor, comp: Tensor | None, lambda_: float) -> Tensor:
    if comp is None:
        return base
    return add(base, scalar_mul(comp, lambda_))


def bct_loss(new_emb: Tensor, labels, new_head: ArcFaceHead,
             old_ref: OldReference | None, cfg: LossConfig) -> Tensor:
    """Backward-compatible training objective: base + lambda * comp."""
    base, comp = bct_terms(new_emb, labels, new_head, old_ref, cfg)
    return combine_bct(base, comp, cfg.lambda_)


def fct_loss(upgraded_emb: Tensor, new_emb: Tensor | np.ndarray) -> Tensor:
    """Forward-compatibility objective: 1 - cos between upgraded old
    features and frozen new-model targets. Single term, no weighting;
    gradient reaches only the upgrade module."""
    target = new_emb.values if isinstance(new_emb, Tensor) else np.asarray(new_emb)
    return regression_comp(Tensor(target), upgraded_emb)
