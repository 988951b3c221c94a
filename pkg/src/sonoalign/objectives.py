"""Similarity logits, symmetric contrastive loss, and the soft-prior
semantic regularizer (MSE on clamped cosines + row-wise KL)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .prior import PriorMatrix

TAU_FLOOR = 0.01


class ObjectiveError(Exception):
    pass


@dataclass
class LossHyper:
    lam: float = 0.2  # weight of the semantic term
    alpha_s: float = 0.6  # MSE share inside the semantic term
    tau2: float = 0.07  # fixed temperature of the semantic softmaxes

    def validate(self):
        if self.lam < 0:
            raise ObjectiveError("lam must be >= 0")
        if not 0.0 <= self.alpha_s <= 1.0:
            raise ObjectiveError("alpha_s must be in [0, 1]")
        if self.tau2 <= 0:
            raise ObjectiveError("tau2 must be > 0")
        return self


@dataclass
class BatchEmbeddings:
    """Row-normalized image and text embeddings with their cosine matrix."""
    images: ad.Tensor  # B x D, rows L2-normalized
    texts: ad.Tensor  # B x D, rows L2-normalized
    cosines: ad.Tensor  # B x B

    @staticmethod
    def from_raw(images: ad.Tensor, texts: ad.Tensor) -> "BatchEmbeddings":
        x = ad.l2_normalize(images)
        t = ad.l2_normalize(texts)
        return BatchEmbeddings(x, t, ad.matmul(x, ad.transpose(t)))

    @property
    def batch_size(self):
        return self.images.shape[0]


def temperature(rho: ad.Tensor) -> ad.Tensor:
    """Learnable tau = exp(rho), floored at 0.01."""
    return ad.clamp_elem(ad.exp_elem(rho), lo=TAU_FLOOR)


def similarity_logits(emb: BatchEmbeddings, tau: ad.Tensor) -> ad.Tensor:
    return ad.div(emb.cosines, tau)


def clip_loss(p: ad.Tensor) -> ad.Tensor:
    """Symmetric InfoNCE over the logit matrix: mean of row-wise and
    column-wise diagonal log-softmax terms."""
    b = p.shape[0]
    if p.shape != (b, b):
        raise ObjectiveError(f"logits must be square, got {p.shape}")
    mask = ad.constant(np.eye(b))
    row_terms = ad.sum_elems(ad.mul(ad.row_log_softmax(p), mask))
    col_terms = ad.sum_elems(ad.mul(ad.row_log_softmax(ad.transpose(p)), mask))
    return ad.scale(ad.add(row_terms, col_terms), -1.0 / (2.0 * b))


def semantic_loss(cosines: ad.Tensor, prior: PriorMatrix, tau2=0.07, alpha_s=0.6):
    """Returns (l_mse, l_kl, l_semantic). The MSE compares clamp(C, 0, 1)
    with the prior entry-wise (both on the [0,1] scale, normalized by B^2);
    the KL compares row softmaxes of C/tau2 against softmaxes of S/tau2.
    The prior is a constant; gradients flow through the cosines only."""
    b = prior.batch_size
    if cosines.shape != (b, b):
        raise ObjectiveError(f"cosine shape {cosines.shape} != prior {prior.matrix.shape}")
    if tau2 <= 0:
        raise ObjectiveError("tau2 must be > 0")
    if not 0.0 <= alpha_s <= 1.0:
        raise ObjectiveError("alpha_s must be in [0, 1]")

    s = ad.constant(prior.matrix)
    diff = ad.sub(ad.clamp_elem(cosines, 0.0, 1.0), s)
    l_mse = ad.scale(ad.sum_elems(ad.mul(diff, diff)), 1.0 / (b * b))

    scaled = ad.scale(cosines, 1.0 / tau2)
    p_log = ad.row_log_softmax(scaled)
    p = ad.row_softmax(scaled)
    s_scaled = prior.matrix / tau2
    shifted = s_scaled - s_scaled.max(axis=1, keepdims=True)
    q_log = ad.constant(shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True)))
    l_kl = ad.scale(ad.sum_elems(ad.mul(p, ad.sub(p_log, q_log))), 1.0 / b)

    l_semantic = ad.add(ad.scale(l_mse, alpha_s), ad.scale(l_kl, 1.0 - alpha_s))
    return l_mse, l_kl, l_semantic


@dataclass
class LossBreakdown:
    l_clip: float
    l_mse: float
    l_kl: float
    l_semantic: float
    l_total: float
    tau: float
    total: ad.Tensor  # live scalar for backward

    def to_dict(self):
        return {
            "l_clip": self.l_clip,
            "l_mse": self.l_mse,
            "l_kl": self.l_kl,
            "l_semantic": self.l_semantic,
            "l_total": self.l_total,
            "tau": self.tau,
        }


def total_loss(emb: BatchEmbeddings, prior, rho: ad.Tensor,
               hyper: LossHyper) -> LossBreakdown:
    """L = L_contrastive + lam * L_semantic. With lam = 0 the semantic
    branch (and the prior) is skipped entirely."""
    hyper.validate()
    tau = temperature(rho)
    logits = similarity_logits(emb, tau)
    l_clip = clip_loss(logits)
    if hyper.lam > 0.0:
        if prior is None:
            raise ObjectiveError("prior required when lam > 0")
        l_mse, l_kl, l_semantic = semantic_loss(emb.cosines, prior,
                                                hyper.tau2, hyper.alpha_s)
        total = ad.add(l_clip, ad.scale(l_semantic, hyper.lam))
        return LossBreakdown(l_clip.item(), l_mse.item(), l_kl.item(),
                             l_semantic.item(), total.item(), tau.item(), total)
    return LossBreakdown(l_clip.item(), 0.0, 0.0, 0.0, l_clip.item(),
                         tau.item(), l_clip)
