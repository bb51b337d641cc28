"""Supervised aggregation, self-consistency and anti-divergence losses.

All three are cosine/temperature contrastive losses written exactly in their
printed form: the supervised denominator sums over negatives only, the
self-consistency denominator over the other distrusted (non-augmented)
features, and the anti-divergence denominator over every source feature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    ContractError,
    Tensor,
    add,
    cosine_matrix,
    exp,
    index,
    log,
    mean,
    mul,
    no_grad,
    sum_,
)

log_ = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class AugmentationPolicy:
    jitter_sigma: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)


def augment(x, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Per-sample magnitude scaling plus Gaussian jitter; shape preserved."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("augment: non-finite input")
    lo, hi = policy.scale_range
    scale_shape = (x.shape[0],) + (1,) * (x.ndim - 1) if x.ndim > 1 else (1,)
    scale = rng.uniform(lo, hi, size=scale_shape) if hi > lo else np.full(scale_shape, lo)
    noise = rng.normal(0.0, policy.jitter_sigma, size=x.shape) if policy.jitter_sigma > 0 else 0.0
    return x * scale + noise


def _logsumexp_rows(logits: Tensor, mask: np.ndarray) -> Tensor:
    """log sum_j mask_ij exp(logits_ij), shifted by the constant row max."""
    shift = logits.data.max(axis=1, keepdims=True)
    terms = mul(exp(add(logits, -shift)), mask.astype(np.float64))
    return add(log(sum_(terms, axis=1)), shift[:, 0])


def supervised_contrastive_loss(feats: Tensor, labels, tau: float = 0.1) -> Tensor:
    """Mean over anchors of the mean over positives of
    -log[exp(cos(i,p)/tau) / sum_{n in N(i)} exp(cos(i,n)/tau)].

    Anchors lacking a positive or a negative are skipped.
    """
    labels = np.asarray(labels)
    n = feats.shape[0]
    if n < 2:
        raise ContractError("supervised_contrastive_loss: need at least two samples")
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.any():
        raise ContractError("supervised_contrastive_loss: degenerate batch, every anchor lacks a positive or a negative")
    rows = np.flatnonzero(valid)
    logits = mul(index(cosine_matrix(feats, feats), rows), 1.0 / tau)
    pos_v, neg_v = pos[rows], neg[rows]
    pos_mean = mul(sum_(mul(logits, pos_v.astype(np.float64)), axis=1), 1.0 / pos_v.sum(axis=1))
    per_anchor = add(_logsumexp_rows(logits, neg_v), mul(pos_mean, -1.0))
    return mean(per_anchor)


def self_consistency_loss(dis_feats: Tensor, dis_feats_aug: Tensor, tau: float = 0.1) -> Tensor:
    """Mean of -log[exp(cos(f_i, f_i+)/tau) / sum_{j != i} exp(cos(f_i, f_j)/tau)].

    Fewer than two distrusted features leaves no negatives; contributes 0.
    """
    k = dis_feats.shape[0]
    if k < 2:
        # an empty distrusted set is routine late in the curriculum; a lone feature is worth flagging
        (log_.warning if k == 1 else log_.debug)(
            "self_consistency_loss: %d distrusted feature(s), no negatives; contributing 0", k)
        return Tensor(0.0)
    ar = np.arange(k)
    pos = mul(index(cosine_matrix(dis_feats, dis_feats_aug), (ar, ar)), 1.0 / tau)
    others = mul(cosine_matrix(dis_feats, dis_feats), 1.0 / tau)
    per = add(_logsumexp_rows(others, ~np.eye(k, dtype=bool)), mul(pos, -1.0))
    return mean(per)


def nearest_source_anchor(dis_feat, source_feats) -> int:
    """Index of the source row with the highest cosine to ``dis_feat``; lowest index on ties."""
    src = source_feats.data if isinstance(source_feats, Tensor) else np.asarray(source_feats, dtype=np.float64)
    q = dis_feat.data if isinstance(dis_feat, Tensor) else np.asarray(dis_feat, dtype=np.float64)
    if src.shape[0] == 0:
        raise ContractError("nearest_source_anchor: empty source set")
    with no_grad():
        sims = cosine_matrix(Tensor(q.reshape(1, -1)), Tensor(src)).data[0]
    return int(np.argmax(sims))


def anti_divergence_loss(dis_feats: Tensor, source_feats: Tensor, tau: float = 0.1) -> Tensor:
    """Mean of -log[exp(cos(f_i, PS(f_i))/tau) / sum_j exp(cos(f_i, s_j)/tau)],
    PS being the max-cosine source feature.  An empty distrusted set gives 0."""
    k = dis_feats.shape[0]
    if k == 0:
        return Tensor(0.0)
    if source_feats.shape[0] == 0:
        raise ContractError("anti_divergence_loss: empty source set")
    logits = mul(cosine_matrix(dis_feats, source_feats), 1.0 / tau)
    anchors = np.argmax(logits.data, axis=1)
    picked = index(logits, (np.arange(k), anchors))
    all_src = np.ones(logits.shape, dtype=bool)
    return mean(add(_logsumexp_rows(logits, all_src), mul(picked, -1.0)))


@dataclass
class LossTerms:
    l_sup: float
    l_self: float
    l_anti: float
    l_adv: float
    l_total: float
    lambda1: float
    lambda2: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(l_sup, l_self, l_anti, l_adv, lambda1: float = 0.5, lambda2: float = 0.5):
    """Combine the four terms.

    Returns ``(terms, objective)``.  ``terms.l_total`` is the exact weighted sum
    l_sup + l_self + lambda1 l_anti + lambda2 l_adv.  ``objective`` is the tensor
    to differentiate: the adversarial term enters it unweighted because its
    lambda2 scaling is applied by the gradient reversal in front of the
    discriminator, so the discriminator sees +dL_adv and upstream -lambda2 dL_adv.
    """
    parts = {"l_sup": l_sup, "l_self": l_self, "l_anti": l_anti, "l_adv": l_adv}
    vals = {}
    for name, t in parts.items():
        v = float(t.data) if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is not finite ({v})")
        vals[name] = v
    l_total = vals["l_sup"] + vals["l_self"] + lambda1 * vals["l_anti"] + lambda2 * vals["l_adv"]
    terms = LossTerms(l_total=l_total, lambda1=lambda1, lambda2=lambda2, **vals)

    objective = None
    for t, w in ((l_sup, 1.0), (l_self, 1.0), (l_anti, lambda1), (l_adv, 1.0)):
        if isinstance(t, Tensor) and w != 0.0:
            term = t if w == 1.0 else mul(t, w)
            objective = term if objective is None else add(objective, term)
    return terms, objective
